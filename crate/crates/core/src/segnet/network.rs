use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{one_hot, soft_cross_entropy, soft_dice_loss, softmax, softmax_backward};
use super::SegError;
use crate::tensor::{
    concat_channels, concat_channels_backward, conv3d_backward, conv3d_forward, relu, relu_backward, sgd_step,
    upsample_nearest, upsample_nearest_backward, ConcatCache, Conv3dCache, ReluCache, Tensor, UpsampleCache,
};
use crate::vfda::{vfda_backward, Mode, VfdaCache, VfdaLayerState, VfdaSettings};

pub const KERNEL_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            num_classes: 2,
            encoder_channels: vec![8, 16, 32],
        }
    }
}

impl NetworkConfig {
    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), SegError> {
        if self.in_channels == 0 {
            return Err(SegError::Config("in_channels must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(SegError::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(SegError::Config(format!(
                "encoder_channels must be non-empty and positive, got {:?}",
                self.encoder_channels
            )));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<ConvSpec> {
        let ch = &self.encoder_channels;
        let mut specs = Vec::new();
        let mut prev = self.in_channels;
        for (l, &c) in ch.iter().enumerate() {
            specs.push(ConvSpec::same(prev, c));
            if l + 1 < ch.len() {
                specs.push(ConvSpec::same(c, c));
            }
            prev = c;
        }
        for l in (0..ch.len().saturating_sub(1)).rev() {
            specs.push(ConvSpec::same(ch[l + 1] + ch[l], ch[l]));
        }
        specs.push(ConvSpec {
            cin: ch[0],
            cout: self.num_classes,
            k: 1,
        });
        specs
    }

    /// Parameter tensor shapes in storage order (kernel, bias per conv).
    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        self.layers()
            .iter()
            .flat_map(|s| [vec![s.cout, s.cin, s.k, s.k, s.k], vec![s.cout]])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    k: usize,
}

impl ConvSpec {
    fn same(cin: usize, cout: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            k: KERNEL_SIZE,
        }
    }
}

/// A training batch: `B×Cin×H×W×S` volumes with `B×H×W×S` integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub volumes: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, dice: 1.0 }
    }
}

struct EncoderCache {
    conv: Conv3dCache,
    relu: ReluCache,
    vfda: Option<VfdaCache>,
    down: Option<(Conv3dCache, ReluCache)>,
}

struct DecoderCache {
    up: UpsampleCache,
    cat: ConcatCache,
    conv: Conv3dCache,
    relu: ReluCache,
}

/// Everything [`Network::backward`] needs from one forward pass.
pub struct ForwardCache {
    encoder: Vec<EncoderCache>,
    /// In forward order (deepest decoder level first).
    decoder: Vec<DecoderCache>,
    head: Conv3dCache,
}

/// Small 3D encoder–decoder.
///
/// Encoder level `l`: 3³ conv → ReLU → VFDA, then a stride-2 3³ conv → ReLU
/// into the next level. Decoder level `l`: nearest ×2 upsample → concat with
/// the encoder output of level `l` → 3³ conv → ReLU. A 1³ conv maps to class
/// logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Tensor>,
    pub vfda: Vec<VfdaLayerState>,
    pub settings: VfdaSettings,
    /// Federation round, drives the momentum factor.
    pub round: u32,
}

impl Network {
    /// He-initialized kernels (`N(0, 2/fan_in)`), zero biases, fresh VFDA state.
    pub fn new(config: NetworkConfig, settings: VfdaSettings, rng: &mut impl Rng) -> Result<Self, SegError> {
        config.validate()?;
        let mut params = Vec::new();
        for shape in config.parameter_shapes() {
            if shape.len() == 5 {
                let fan_in = (shape[1] * shape[2] * shape[3] * shape[4]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                params.push(Tensor::from_fn(&shape, |_| normal.sample(rng)));
            } else {
                params.push(Tensor::zeros(&shape));
            }
        }
        let vfda = config.encoder_channels.iter().map(|&c| VfdaLayerState::new(c)).collect();
        Ok(Network {
            config,
            params,
            vfda,
            settings,
            round: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), SegError> {
        if flat.len() != self.parameter_count() {
            return Err(SegError::Shape(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_input(&self, volumes: &Tensor) -> Result<(), SegError> {
        let [_, c, h, w, s] = volumes.dims5("network forward")?;
        if c != self.config.in_channels {
            return Err(SegError::Shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if [h, w, s].iter().any(|&d| d == 0 || d % m != 0) {
            return Err(SegError::Shape(format!(
                "spatial dims {:?} must be positive multiples of {m}",
                [h, w, s]
            )));
        }
        Ok(())
    }

    fn conv(&self, idx: usize, x: &Tensor, stride: usize, pad: usize) -> Result<(Tensor, Conv3dCache), SegError> {
        Ok(conv3d_forward(x, &self.params[2 * idx], &self.params[2 * idx + 1], stride, pad)?)
    }

    /// Logits `B×K×H×W×S`. In eval mode every VFDA layer is the identity and
    /// `rng` is not touched.
    pub fn forward(
        &mut self,
        volumes: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, ForwardCache), SegError> {
        self.check_input(volumes)?;
        let levels = self.config.levels();
        let pad = KERNEL_SIZE / 2;
        let mut conv_idx = 0;
        let mut encoder = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        let mut x = volumes.clone();
        for l in 0..levels {
            let (y, conv) = self.conv(conv_idx, &x, 1, pad)?;
            conv_idx += 1;
            let (y, relu_cache) = relu(&y);
            self.vfda[l].mode = mode;
            let (y, vfda) = self.vfda[l].forward(&y, &self.settings, self.round, rng)?;
            let down = if l + 1 < levels {
                let (d, dc) = self.conv(conv_idx, &y, 2, pad)?;
                conv_idx += 1;
                let (d, dr) = relu(&d);
                x = d;
                Some((dc, dr))
            } else {
                x = y.clone();
                None
            };
            skips.push(y);
            encoder.push(EncoderCache {
                conv,
                relu: relu_cache,
                vfda,
                down,
            });
        }
        let mut decoder = Vec::with_capacity(levels.saturating_sub(1));
        for l in (0..levels.saturating_sub(1)).rev() {
            let (u, up) = upsample_nearest(&x, 2)?;
            let (cat_out, cat) = concat_channels(&u, &skips[l])?;
            let (y, conv) = self.conv(conv_idx, &cat_out, 1, pad)?;
            conv_idx += 1;
            let (y, relu_cache) = relu(&y);
            x = y;
            decoder.push(DecoderCache {
                up,
                cat,
                conv,
                relu: relu_cache,
            });
        }
        let (logits, head) = self.conv(conv_idx, &x, 1, 0)?;
        Ok((logits, ForwardCache { encoder, decoder, head }))
    }

    /// Eval-mode logits without touching this network's state.
    pub fn infer(&self, volumes: &Tensor) -> Result<Tensor, SegError> {
        let mut scratch = self.clone();
        // eval mode never draws from the rng
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (logits, _) = scratch.forward(volumes, Mode::Eval, &mut rng)?;
        Ok(logits)
    }

    /// Per-voxel argmax class labels, `B×H×W×S`.
    pub fn predict(&self, volumes: &Tensor) -> Result<Vec<u8>, SegError> {
        argmax_labels(&self.infer(volumes)?)
    }

    /// Gradients of a scalar loss with respect to every parameter tensor.
    pub fn backward(&self, grad_logits: &Tensor, cache: &ForwardCache) -> Result<Vec<Tensor>, SegError> {
        let levels = self.config.levels();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut put = |idx: usize, k: Tensor, b: Tensor| {
            grads[2 * idx] = Some(k);
            grads[2 * idx + 1] = Some(b);
        };
        // conv indices: encoder convs and downsamplers interleaved, then decoders, then head
        let enc_idx = |l: usize| 2 * l;
        let down_idx = |l: usize| 2 * l + 1;
        let first_dec = 2 * levels - 1;

        let g = conv3d_backward(grad_logits, &cache.head)?;
        put(first_dec + levels - 1, g.kernel, g.bias);
        let mut gx = g.input;

        let mut skip_grads: Vec<Option<Tensor>> = vec![None; levels];
        // forward visited decoder levels L−2, …, 0; walk them back 0, …, L−2
        for (pos, dc) in cache.decoder.iter().enumerate().rev() {
            let level = levels - 2 - pos;
            let g = relu_backward(&gx, &dc.relu)?;
            let g = conv3d_backward(&g, &dc.conv)?;
            put(first_dec + pos, g.kernel, g.bias);
            let (g_up, g_skip) = concat_channels_backward(&g.input, &dc.cat)?;
            skip_grads[level] = Some(g_skip);
            gx = upsample_nearest_backward(&g_up, &dc.up)?;
        }

        // gx is now the gradient at the deepest encoder output
        let mut g_out = gx;
        for l in (0..levels).rev() {
            let ec = &cache.encoder[l];
            if let Some(s) = skip_grads[l].take() {
                if l + 1 < levels {
                    for (a, b) in g_out.data_mut().iter_mut().zip(s.data()) {
                        *a += b;
                    }
                }
            }
            let g = match &ec.vfda {
                Some(vc) => vfda_backward(&g_out, vc)?,
                None => g_out,
            };
            let g = relu_backward(&g, &ec.relu)?;
            let g = conv3d_backward(&g, &ec.conv)?;
            put(enc_idx(l), g.kernel, g.bias);
            if l > 0 {
                let (dc, dr) = cache.encoder[l - 1].down.as_ref().expect("downsampler below deepest level");
                let gd = relu_backward(&g.input, dr)?;
                let gd = conv3d_backward(&gd, dc)?;
                put(down_idx(l - 1), gd.kernel, gd.bias);
                g_out = gd.input;
            } else {
                g_out = g.input;
            }
        }
        Ok(grads
            .into_iter()
            .map(|g| g.expect("every parameter receives a gradient"))
            .collect())
    }

    /// Weighted CE + soft-Dice loss and its gradient in the logits.
    pub fn loss(
        logits: &Tensor,
        targets: &Tensor,
        weights: LossWeights,
    ) -> Result<(f64, f64, Tensor), SegError> {
        let (ce, g_ce) = soft_cross_entropy(logits, targets)?;
        let probs = softmax(logits)?;
        let (dice, g_probs) = soft_dice_loss(&probs, targets)?;
        let g_dice = softmax_backward(&probs, &g_probs)?;
        let grad = Tensor::from_fn(logits.shape(), |i| weights.ce * g_ce.data()[i] + weights.dice * g_dice.data()[i]);
        Ok((ce, dice, grad))
    }

    /// One forward/backward/SGD step on soft targets. Returns `(ce, dice)`.
    pub fn train_step_targets(
        &mut self,
        volumes: &Tensor,
        targets: &Tensor,
        lr: f64,
        weights: LossWeights,
        rng: &mut impl Rng,
    ) -> Result<(f64, f64), SegError> {
        let (logits, cache) = self.forward(volumes, Mode::Train, rng)?;
        let (ce, dice, grad) = Self::loss(&logits, targets, weights)?;
        let grads = self.backward(&grad, &cache)?;
        sgd_step(&mut self.params, &grads, lr)?;
        Ok((ce, dice))
    }

    pub fn train_step(
        &mut self,
        batch: &Batch,
        lr: f64,
        weights: LossWeights,
        rng: &mut impl Rng,
    ) -> Result<(f64, f64), SegError> {
        let targets = self.targets_for(batch)?;
        self.train_step_targets(&batch.volumes, &targets, lr, weights, rng)
    }

    pub fn targets_for(&self, batch: &Batch) -> Result<Tensor, SegError> {
        let [b, _, h, w, s] = batch.volumes.dims5("targets")?;
        one_hot(&batch.labels, [b, self.config.num_classes, h, w, s])
    }
}

/// Argmax over the class axis; ties go to the lower class index.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<u8>, SegError> {
    let [b, k, ..] = logits.dims5("argmax")?;
    let n = logits.spatial_len();
    let x = logits.data();
    let mut out = Vec::with_capacity(b * n);
    for bi in 0..b {
        for v in 0..n {
            let mut best = 0;
            for c in 1..k {
                if x[(bi * k + c) * n + v] > x[(bi * k + best) * n + v] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
