use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    aggregate_weights, client_local_round, deserialize_broadcast, deserialize_update, layer_variances,
    serialize_broadcast, serialize_update, ClientState, FedConfig, FedError, GlobalBroadcast,
};
use crate::expcli::{evaluate, EvalReport};
use crate::rng::substream;
use crate::segnet::{Network, NetworkConfig};
use crate::synthdata::VolumeSample;
use crate::vfda::{LayerTrace, PrototypeVariance};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientLog {
    pub client_id: u32,
    pub loss_ce: f64,
    pub loss_dice: f64,
    pub traces: Vec<LayerTrace>,
}

/// Outcome of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: u32,
    /// In client-id order.
    pub clients: Vec<ClientLog>,
    /// Aggregated model on the held-out set; `None` without a held-out set.
    pub global: Option<EvalReport>,
    pub wall_ms: u64,
}

/// Everything needed to continue a run except the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config: FedConfig,
    pub network: NetworkConfig,
    pub params: Vec<f64>,
    pub global_variances: Vec<PrototypeVariance>,
    pub clients: Vec<ClientState>,
    pub next_round: u32,
    pub global_variance_override: Option<f64>,
}

/// Server plus simulated clients.
#[derive(Debug, Clone)]
pub struct Federation {
    config: FedConfig,
    seed: u64,
    model: Network,
    clients: Vec<ClientState>,
    shards: Vec<Vec<VolumeSample>>,
    heldout: Vec<VolumeSample>,
    global_variances: Vec<PrototypeVariance>,
    next_round: u32,
    /// Broadcast this constant instead of the estimated global variances.
    pub global_variance_override: Option<f64>,
}

impl Federation {
    /// Fresh run. The global model is initialized from the `init` substream.
    pub fn new(
        config: FedConfig,
        network: NetworkConfig,
        shards: Vec<Vec<VolumeSample>>,
        heldout: Vec<VolumeSample>,
        seed: u64,
    ) -> Result<Self, FedError> {
        config.validate()?;
        let model = Network::new(network, config.vfda_settings(), &mut substream(seed, "init", &[]))?;
        let channels = model.config().encoder_channels.clone();
        let clients = (0..config.num_clients)
            .map(|i| ClientState::new(i as u32, &channels))
            .collect();
        let global_variances = channels.iter().map(|&c| PrototypeVariance::zeros(c)).collect();
        let fed = Federation {
            config,
            seed,
            model,
            clients,
            shards,
            heldout,
            global_variances,
            next_round: 1,
            global_variance_override: None,
        };
        fed.check_data()?;
        Ok(fed)
    }

    fn check_data(&self) -> Result<(), FedError> {
        if self.shards.len() != self.config.num_clients {
            return Err(FedError::Invalid(format!(
                "{} data shards for {} clients",
                self.shards.len(),
                self.config.num_clients
            )));
        }
        let k = self.model.config().num_classes;
        for s in self.shards.iter().flatten().chain(&self.heldout) {
            if usize::from(s.num_classes) != k {
                return Err(FedError::Invalid(format!(
                    "model has {k} classes but data has {}",
                    s.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &FedConfig {
        &self.config
    }

    pub fn model(&self) -> &Network {
        &self.model
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global_variances(&self) -> &[PrototypeVariance] {
        &self.global_variances
    }

    pub fn next_round(&self) -> u32 {
        self.next_round
    }

    pub fn is_finished(&self) -> bool {
        self.next_round > self.config.rounds
    }

    fn broadcast(&self) -> GlobalBroadcast {
        let variances = match self.global_variance_override {
            Some(v) => self.global_variances.iter().map(|g| PrototypeVariance::filled(g.channels(), v)).collect(),
            None => self.global_variances.clone(),
        };
        GlobalBroadcast {
            round: self.next_round,
            params: self.model.flat_params(),
            variances,
        }
    }

    /// Broadcast, local training at every client, aggregation, evaluation.
    pub fn step(&mut self) -> Result<RoundLog, FedError> {
        if self.is_finished() {
            return Err(FedError::Invalid(format!("all {} rounds already ran", self.config.rounds)));
        }
        let start = Instant::now();
        let wire = serialize_broadcast(&self.broadcast())?;
        let (model, config, seed) = (&self.model, &self.config, self.seed);
        let results: Vec<_> = self
            .clients
            .par_iter()
            .zip(self.shards.par_iter())
            .map(|(state, shard)| {
                let mut state = state.clone();
                let client_id = state.client_id;
                let run = |state: &mut ClientState| -> Result<_, FedError> {
                    let broadcast = deserialize_broadcast(&wire)?;
                    let out = client_local_round(state, model, &broadcast, shard, config, seed)?;
                    let bytes = serialize_update(&out.update)?;
                    Ok((bytes, out.loss_ce, out.loss_dice, out.traces))
                };
                run(&mut state).map(|r| (state, r)).map_err(|e| FedError::Client {
                    client_id,
                    source: Box::new(e),
                })
            })
            .collect();

        let mut states = Vec::with_capacity(results.len());
        let mut updates = Vec::with_capacity(results.len());
        let mut logs = Vec::with_capacity(results.len());
        for r in results {
            let (state, (bytes, loss_ce, loss_dice, traces)) = r?;
            let update = deserialize_update(&bytes)?;
            logs.push(ClientLog {
                client_id: update.client_id,
                loss_ce,
                loss_dice,
                traces,
            });
            updates.push(update);
            states.push(state);
        }
        let params = aggregate_weights(&updates)?;
        let variances = layer_variances(&updates)?;

        self.model.set_flat_params(&params)?;
        self.global_variances = variances;
        self.clients = states;
        let round = self.next_round;
        self.next_round += 1;
        logs.sort_by_key(|l| l.client_id);
        let global = if self.heldout.is_empty() {
            None
        } else {
            Some(evaluate(&self.model, &self.heldout)?)
        };
        Ok(RoundLog {
            round,
            clients: logs,
            global,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Runs every remaining round, calling `on_round` after each.
    pub fn run_with(&mut self, mut on_round: impl FnMut(&RoundLog) -> Result<(), FedError>) -> Result<Vec<RoundLog>, FedError> {
        let mut logs = Vec::new();
        while !self.is_finished() {
            let log = self.step()?;
            on_round(&log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn run(&mut self) -> Result<Vec<RoundLog>, FedError> {
        self.run_with(|_| Ok(()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            network: self.model.config().clone(),
            params: self.model.flat_params(),
            global_variances: self.global_variances.clone(),
            clients: self.clients.clone(),
            next_round: self.next_round,
            global_variance_override: self.global_variance_override,
        }
    }

    /// Rebuilds a run from a checkpoint and the same data it was started with.
    pub fn resume(
        ckpt: Checkpoint,
        shards: Vec<Vec<VolumeSample>>,
        heldout: Vec<VolumeSample>,
    ) -> Result<Self, FedError> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(FedError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        let mut fed = Federation::new(ckpt.config, ckpt.network, shards, heldout, ckpt.seed)?;
        fed.model.set_flat_params(&ckpt.params)?;
        if ckpt.clients.len() != fed.clients.len() || ckpt.global_variances.len() != fed.global_variances.len() {
            return Err(FedError::Checkpoint("client or layer count does not match the config".into()));
        }
        fed.clients = ckpt.clients;
        fed.global_variances = ckpt.global_variances;
        fed.next_round = ckpt.next_round;
        fed.global_variance_override = ckpt.global_variance_override;
        Ok(fed)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), FedError> {
        let text = serde_json::to_string(&self.checkpoint()).map_err(|e| FedError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| FedError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FedError> {
        let text = std::fs::read_to_string(path).map_err(|source| FedError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| FedError::Checkpoint(e.to_string()))
    }
}
