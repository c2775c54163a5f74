use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClientUpdate, FedConfig, FedError, GlobalBroadcast, LayerStats};
use crate::rng::substream;
use crate::segnet::{one_hot, Batch, Network};
use crate::synthdata::{random_flip, VolumeSample};
use crate::tensor::Tensor;
use crate::vfda::{mixup, sample_mixup_lambda, LayerTrace, MomentumStats};

/// What a client keeps between rounds besides its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: u32,
    /// One accumulator per encoder level.
    pub momentum: Vec<MomentumStats>,
    pub next_round: u32,
}

impl ClientState {
    pub fn new(client_id: u32, channels: &[usize]) -> Self {
        ClientState {
            client_id,
            momentum: channels.iter().map(|&c| MomentumStats::new(c)).collect(),
            next_round: 1,
        }
    }
}

/// Result of one local round.
#[derive(Debug, Clone)]
pub struct ClientRound {
    pub update: ClientUpdate,
    /// Mean over local steps; NaN when no step ran.
    pub loss_ce: f64,
    pub loss_dice: f64,
    /// Per-layer trace of the last local step.
    pub traces: Vec<LayerTrace>,
}

/// Stacks equally sized samples into one batch.
pub fn stack_samples(samples: &[&VolumeSample]) -> Result<Batch, FedError> {
    let first = samples.first().ok_or_else(|| FedError::Invalid("empty batch".into()))?;
    let shape = first.volume.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.volume.len());
    let mut labels = Vec::with_capacity(samples.len() * first.labels.len());
    for s in samples {
        if s.volume.shape() != shape.as_slice() {
            return Err(FedError::Invalid(format!(
                "sample shape {:?} differs from {:?}",
                s.volume.shape(),
                shape
            )));
        }
        data.extend_from_slice(s.volume.data());
        labels.extend_from_slice(&s.labels);
    }
    let mut batch_shape = shape;
    batch_shape[0] = samples.len();
    let volumes = Tensor::new(batch_shape, data).map_err(|e| FedError::Invalid(e.to_string()))?;
    Ok(Batch { volumes, labels })
}

fn batch_targets(net: &Network, batch: &Batch) -> Result<Tensor, FedError> {
    let [b, _, h, w, s] = batch.volumes.dims5("targets").map_err(|e| FedError::Invalid(e.to_string()))?;
    Ok(one_hot(&batch.labels, [b, net.config().num_classes, h, w, s])?)
}

fn augmented<'a>(sample: &'a VolumeSample, flip: bool, rng: &mut impl Rng) -> std::borrow::Cow<'a, VolumeSample> {
    if flip {
        std::borrow::Cow::Owned(random_flip(sample, rng))
    } else {
        std::borrow::Cow::Borrowed(sample)
    }
}

/// One round of local training at one client.
///
/// `model` supplies architecture and VFDA settings; its parameters are
/// replaced by the broadcast ones. Randomness comes from three substreams
/// keyed by `(seed, round, client_id)`: sample order, input augmentation and
/// VFDA noise.
pub fn client_local_round(
    state: &mut ClientState,
    model: &Network,
    broadcast: &GlobalBroadcast,
    shard: &[VolumeSample],
    config: &FedConfig,
    seed: u64,
) -> Result<ClientRound, FedError> {
    if broadcast.round != state.next_round {
        return Err(FedError::RoundMismatch {
            expected: state.next_round,
            found: broadcast.round,
        });
    }
    if shard.is_empty() {
        return Err(FedError::Invalid(format!("client {} has no samples", state.client_id)));
    }
    let layers = model.vfda.len();
    if broadcast.variances.len() != layers || state.momentum.len() != layers {
        return Err(FedError::Invalid(format!(
            "expected {layers} VFDA layers, broadcast has {} and client state {}",
            broadcast.variances.len(),
            state.momentum.len()
        )));
    }
    let mut net = model.clone();
    net.set_flat_params(&broadcast.params)?;
    net.round = broadcast.round;
    for ((layer, m), v) in net.vfda.iter_mut().zip(&state.momentum).zip(&broadcast.variances) {
        if v.channels() != layer.channels() {
            return Err(FedError::ChannelMismatch {
                expected: layer.channels(),
                actual: v.channels(),
            });
        }
        layer.momentum = m.clone();
        layer.global_variance = v.clone();
    }

    let key = [u64::from(broadcast.round), u64::from(state.client_id)];
    let mut order_rng = substream(seed, "shuffle", &key);
    let mut aug_rng = substream(seed, "augment", &key);
    let mut eps_rng = substream(seed, "eps", &key);
    let lr = config.learning_rate(broadcast.round);
    let mixing = config.ablation.mixup_baseline;

    let (mut ce_sum, mut dice_sum, mut steps) = (0.0, 0.0, 0usize);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..config.local_epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(config.batch_size) {
            let picked: Vec<_> = chunk
                .iter()
                .map(|&i| augmented(&shard[i], config.flip_augment, &mut aug_rng))
                .collect();
            let batch = stack_samples(&picked.iter().map(|c| c.as_ref()).collect::<Vec<_>>())?;
            let mut targets = batch_targets(&net, &batch)?;
            let mut volumes = batch.volumes;
            if mixing {
                let lambda = sample_mixup_lambda(config.mixup_alpha, &mut aug_rng)?;
                let partners: Vec<_> = chunk
                    .iter()
                    .map(|_| {
                        let j = aug_rng.random_range(0..shard.len());
                        augmented(&shard[j], config.flip_augment, &mut aug_rng)
                    })
                    .collect();
                let other = stack_samples(&partners.iter().map(|c| c.as_ref()).collect::<Vec<_>>())?;
                let other_targets = batch_targets(&net, &other)?;
                (volumes, targets) = mixup(&volumes, &targets, &other.volumes, &other_targets, lambda)?;
            }
            let (ce, dice) = net.train_step_targets(&volumes, &targets, lr, config.loss_weights, &mut eps_rng)?;
            ce_sum += ce;
            dice_sum += dice;
            steps += 1;
        }
    }

    let stats = if config.ablation.vfda_active() {
        state.momentum = net.vfda.iter().map(|l| l.momentum.clone()).collect();
        state
            .momentum
            .iter()
            .map(|m| LayerStats {
                mu_bar: m.mu_bar.clone(),
                sigma_bar: m.sigma_bar.clone(),
            })
            .collect()
    } else {
        net.vfda.iter().map(|l| LayerStats::zeros(l.channels())).collect()
    };
    state.next_round += 1;
    let mean = |s: f64| if steps == 0 { f64::NAN } else { s / steps as f64 };
    Ok(ClientRound {
        update: ClientUpdate {
            client_id: state.client_id,
            sample_count: u32::try_from(shard.len()).map_err(|_| FedError::Invalid("shard too large".into()))?,
            params: net.flat_params(),
            stats,
        },
        loss_ce: mean(ce_sum),
        loss_dice: mean(dice_sum),
        traces: net.vfda.iter().map(|l| l.last_trace).collect(),
    })
}
