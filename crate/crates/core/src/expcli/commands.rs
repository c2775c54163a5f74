use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate, ConfigError, EvalReport, ExperimentConfig};
use crate::federation::{Federation, RoundLog, Variant};
use crate::rng::substream;
use crate::segnet::{Network, NetworkConfig};
use crate::synthdata::{
    encode_volume, generate_sample, generate_shard, make_partition, read_dataset, read_volumes_in, write_dataset,
    ClientShift, VolumeSample,
};
use crate::vfda::VfdaSettings;

/// Failure of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum ExpError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl ExpError {
    /// 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExpError::Config(_) => 2,
            ExpError::Runtime(_) => 3,
        }
    }

    fn runtime(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        ExpError::Runtime(format!("{context}: {err}"))
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> ExpError + '_ {
    move |e| ExpError::runtime(path.display(), e)
}

fn create_dir(path: &Path) -> Result<(), ExpError> {
    fs::create_dir_all(path).map_err(io_at(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExpError> {
    fs::write(path, contents).map_err(io_at(path))
}

/// Client shards plus the global held-out set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Empty when the data was loaded from disk.
    pub shifts: Vec<ClientShift>,
    pub shards: Vec<Vec<VolumeSample>>,
    pub heldout: Vec<VolumeSample>,
}

impl Dataset {
    /// SHA-256 over the encoded volume files, shards in client order then held-out.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (i, shard) in self.shards.iter().enumerate() {
            h.update(format!("client_{i}:{}", shard.len()).as_bytes());
            for s in shard {
                h.update(encode_volume(s).expect("generated samples are well-formed"));
            }
        }
        h.update(format!("heldout:{}", self.heldout.len()).as_bytes());
        for s in &self.heldout {
            h.update(encode_volume(s).expect("generated samples are well-formed"));
        }
        hex::encode(h.finalize())
    }
}

/// Deterministic shards from the config seed.
///
/// Client `i` draws from the `data/i` substream, the held-out set (cycling
/// through all client shifts) from `heldout`.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExpError> {
    let d = cfg.data.volume_size;
    let k = cfg.network.num_classes;
    let n = cfg.federation.num_clients;
    let fail = |e| ExpError::runtime("data generation", e);
    let shifts = make_partition(
        n,
        cfg.data.heterogeneity,
        cfg.data.samples_per_client,
        &mut substream(cfg.seed, "partition", &[]),
    )
    .map_err(fail)?;
    let shards = shifts
        .iter()
        .enumerate()
        .map(|(i, s)| generate_shard(s, d, k, &mut substream(cfg.seed, "data", &[i as u64])))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail)?;
    let mut rng = substream(cfg.seed, "heldout", &[]);
    let heldout = (0..cfg.data.heldout_samples)
        .map(|j| generate_sample(&shifts[j % n], d, k, &mut rng))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail)?;
    Ok(Dataset { shifts, shards, heldout })
}

/// Reads `cfg.data.dir` when set, otherwise generates.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExpError> {
    let Some(dir) = &cfg.data.dir else {
        return generate_dataset(cfg);
    };
    let (shards, heldout) = read_dataset(dir).map_err(|e| ExpError::runtime("loading dataset", e))?;
    if shards.len() != cfg.federation.num_clients {
        return Err(ExpError::Runtime(format!(
            "{} holds {} client shards but federation.num_clients is {}",
            dir.display(),
            shards.len(),
            cfg.federation.num_clients
        )));
    }
    if heldout.is_empty() {
        return Err(ExpError::Runtime(format!("{} has no heldout samples", dir.display())));
    }
    Ok(Dataset {
        shifts: Vec::new(),
        shards,
        heldout,
    })
}

/// Writes the dataset, its client shifts and the config under `cfg.out_dir`.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Dataset, ExpError> {
    let data = generate_dataset(cfg)?;
    create_dir(&cfg.out_dir)?;
    write_dataset(&cfg.out_dir, &data.shards, &data.heldout).map_err(|e| ExpError::runtime("writing dataset", e))?;
    let shifts = serde_json::to_string_pretty(&data.shifts).map_err(|e| ExpError::runtime("partition", e))?;
    write_file(&cfg.out_dir.join("partition.json"), shifts + "\n")?;
    write_file(&cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    Ok(data)
}

/// Appends one block of rows per round and flushes it, so an interrupted run
/// leaves a readable prefix.
pub struct MetricsWriter {
    out: BufWriter<File>,
    classes: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, classes: usize) -> Result<Self, ExpError> {
        let file = File::create(path).map_err(io_at(path))?;
        let mut w = MetricsWriter {
            out: BufWriter::new(file),
            classes,
        };
        let dice: Vec<String> = (1..classes).map(|c| format!("dice_c{c}")).collect();
        let header = format!("round,client_id,loss_ce,loss_dice,{},dice_mean\n", dice.join(","));
        w.write(&header)?;
        Ok(w)
    }

    fn write(&mut self, text: &str) -> Result<(), ExpError> {
        self.out
            .write_all(text.as_bytes())
            .and_then(|_| self.out.flush())
            .map_err(|e| ExpError::runtime("metrics.csv", e))
    }

    pub fn write_round(&mut self, log: &RoundLog) -> Result<(), ExpError> {
        let empty = vec![""; self.classes];
        let mut text = String::new();
        for c in &log.clients {
            text += &format!("{},{},{},{},{}\n", log.round, c.client_id, c.loss_ce, c.loss_dice, empty.join(","));
        }
        match &log.global {
            Some(g) => {
                let dice: Vec<String> = g.dice.iter().map(|d| d.to_string()).collect();
                text += &format!(
                    "{},-1,{},{},{},{}\n",
                    log.round,
                    g.loss_ce,
                    g.loss_dice,
                    dice.join(","),
                    g.dice_mean
                );
            }
            None => text += &format!("{},-1,,,{}\n", log.round, empty.join(",")),
        }
        self.write(&text)
    }
}

/// Trained global model on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub network: NetworkConfig,
    pub rounds: u32,
    pub params: Vec<f64>,
}

pub const MODEL_FORMAT: &str = "vfda-model";

impl ModelFile {
    pub fn from_network(net: &Network, rounds: u32) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: 1,
            network: net.config().clone(),
            rounds,
            params: net.flat_params(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ExpError> {
        let text = serde_json::to_string(self).map_err(|e| ExpError::runtime("model", e))?;
        write_file(path, text)
    }

    pub fn load(path: &Path) -> Result<Self, ExpError> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        let m: ModelFile = serde_json::from_str(&text).map_err(|e| ExpError::runtime(path.display(), e))?;
        if m.format != MODEL_FORMAT || m.version != 1 {
            return Err(ExpError::Runtime(format!(
                "{}: not a version 1 {MODEL_FORMAT} file",
                path.display()
            )));
        }
        Ok(m)
    }

    pub fn network(&self) -> Result<Network, ExpError> {
        let fail = |e| ExpError::runtime("model", e);
        // initialization is overwritten right away
        let mut net = Network::new(self.network.clone(), VfdaSettings::default(), &mut substream(0, "init", &[]))
            .map_err(fail)?;
        net.set_flat_params(&self.params).map_err(fail)?;
        Ok(net)
    }
}

/// Runs a full federation on `data`, streaming rows to `metrics` if given.
pub fn run_federation(
    cfg: &ExperimentConfig,
    data: &Dataset,
    metrics: Option<&Path>,
    global_variance_override: Option<f64>,
) -> Result<(Federation, Vec<RoundLog>), ExpError> {
    let fail = |e| ExpError::runtime("federation", e);
    let mut fed = Federation::new(
        cfg.federation.clone(),
        cfg.network.clone(),
        data.shards.clone(),
        data.heldout.clone(),
        cfg.seed,
    )
    .map_err(fail)?;
    fed.global_variance_override = global_variance_override;
    let mut writer = metrics.map(|p| MetricsWriter::create(p, cfg.network.num_classes)).transpose()?;
    let mut logs = Vec::new();
    while !fed.is_finished() {
        let log = fed.step().map_err(fail)?;
        if let Some(w) = writer.as_mut() {
            w.write_round(&log)?;
        }
        logs.push(log);
    }
    Ok((fed, logs))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<RoundLog>,
    pub final_eval: Option<EvalReport>,
    pub model_path: PathBuf,
}

/// Writes `config.toml`, `metrics.csv` and `model.json` under `cfg.out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome, ExpError> {
    let data = load_dataset(cfg)?;
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    let (fed, logs) = run_federation(cfg, &data, Some(&cfg.out_dir.join("metrics.csv")), None)?;
    let model_path = cfg.out_dir.join("model.json");
    ModelFile::from_network(fed.model(), cfg.federation.rounds).save(&model_path)?;
    Ok(TrainOutcome {
        final_eval: logs.last().and_then(|l| l.global.clone()),
        logs,
        model_path,
    })
}

/// Eval-mode Dice of a saved model on a directory of `sample_<k>.fvx` files.
/// Writes `eval_report.json` into `out` when given.
pub fn cmd_eval(model_path: &Path, data_dir: &Path, out: Option<&Path>) -> Result<EvalReport, ExpError> {
    let model = ModelFile::load(model_path)?;
    let samples = read_volumes_in(data_dir).map_err(|e| ExpError::runtime("loading samples", e))?;
    if samples.is_empty() {
        return Err(ExpError::Runtime(format!("no sample_<k>.fvx files in {}", data_dir.display())));
    }
    let model_k = model.network.num_classes;
    if let Some(s) = samples.iter().find(|s| usize::from(s.num_classes) != model_k) {
        return Err(ExpError::Runtime(format!(
            "class count mismatch: model has K={model_k}, data has K={}",
            s.num_classes
        )));
    }
    let report = evaluate(&model.network()?, &samples).map_err(|e| ExpError::runtime("evaluation", e))?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("eval_report.json"), report_json(&report)?)?;
    }
    Ok(report)
}

pub fn report_json(report: &EvalReport) -> Result<String, ExpError> {
    serde_json::to_string_pretty(report)
        .map(|s| s + "\n")
        .map_err(|e| ExpError::runtime("report", e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Final-round global mean Dice per seed.
    pub dice: Vec<f64>,
    /// Dataset hash per seed.
    pub shard_hashes: Vec<String>,
    pub mean: f64,
    /// Sample standard deviation; NaN for a single seed.
    pub std: f64,
}

impl AblationRow {
    /// One hash over the per-seed dataset hashes.
    pub fn shard_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.shard_hashes {
            h.update(s.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| format!("seed_{s}")).collect();
        let mut out = format!("variant,{},mean,std,shard_hash\n", seeds.join(","));
        for r in &self.rows {
            let dice: Vec<String> = r.dice.iter().map(|d| d.to_string()).collect();
            out += &format!("{},{},{},{},{}\n", r.variant.label(), dice.join(","), r.mean, r.std, r.shard_hash());
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        f64::NAN
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Final global Dice of one variant on one seed's data.
pub fn run_variant(cfg: &ExperimentConfig, variant: Variant, data: &Dataset, metrics: Option<&Path>) -> Result<f64, ExpError> {
    let mut vcfg = cfg.clone();
    vcfg.federation.ablation = variant.flags();
    let (_, logs) = run_federation(&vcfg, data, metrics, None)?;
    let last = logs.last().and_then(|l| l.global.as_ref());
    Ok(last.map_or(f64::NAN, |g| g.dice_mean))
}

fn slug(v: Variant) -> &'static str {
    match v {
        Variant::None => "none",
        Variant::MixUp => "mixup",
        Variant::Vfda => "vfda",
        Variant::VfdaNoEmd => "vfda_no_emd",
        Variant::VfdaNoGlobalVariance => "vfda_no_global_var",
    }
}

/// Every variant on seeds `seed..seed+S`, each seed's shards shared by all
/// variants. Writes `ablation_table.csv` and per-run metrics under
/// `ablate/<variant>/seed_<s>/`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationTable, ExpError> {
    let seeds: Vec<u64> = (0..cfg.ablate.seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    let data: Vec<(Dataset, String)> = seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            load_dataset(&c).map(|d| {
                let h = d.hash();
                (d, h)
            })
        })
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(Variant, usize)> = Variant::ALL
        .iter()
        .flat_map(|&v| (0..seeds.len()).map(move |i| (v, i)))
        .collect();
    let results: Vec<f64> = jobs
        .par_iter()
        .map(|&(v, i)| {
            let mut c = cfg.clone();
            c.seed = seeds[i];
            let dir = cfg.out_dir.join("ablate").join(slug(v)).join(format!("seed_{}", seeds[i]));
            create_dir(&dir)?;
            run_variant(&c, v, &data[i].0, Some(&dir.join("metrics.csv")))
        })
        .collect::<Result<_, _>>()?;
    let rows = Variant::ALL
        .iter()
        .enumerate()
        .map(|(vi, &variant)| {
            let dice = results[vi * seeds.len()..(vi + 1) * seeds.len()].to_vec();
            let (mean, std) = mean_std(&dice);
            AblationRow {
                variant,
                dice,
                shard_hashes: data.iter().map(|(_, h)| h.clone()).collect(),
                mean,
                std,
            }
        })
        .collect();
    let table = AblationTable { seeds, rows };
    write_file(&cfg.out_dir.join("ablation_table.csv"), table.to_csv())?;
    Ok(table)
}
