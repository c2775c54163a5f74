use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vfda::expcli::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_train, parse_config, report_json, ExpError, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "vfda", version, about = "Federated 3D segmentation with feature-statistics augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic client shards and held-out set
    GenData(Common),
    /// Run one federated training
    Train(Common),
    /// Evaluate a saved model on a directory of volumes
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file written by `train`
        #[arg(long)]
        model: PathBuf,
        /// Directory holding sample_<k>.fvx files
        #[arg(long)]
        data: PathBuf,
    },
    /// Run all five variants over several seeds
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Upload last-batch statistics instead of momentum-accumulated ones
    #[arg(long)]
    no_emd: bool,
    /// Use the local statistic variance only
    #[arg(long)]
    no_global_var: bool,
    /// Disable feature augmentation
    #[arg(long)]
    no_vfda: bool,
    /// MixUp baseline instead of feature augmentation
    #[arg(long)]
    mixup: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ExpError> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        let a = &mut cfg.federation.ablation;
        a.no_emd |= self.no_emd;
        a.no_global_variance |= self.no_global_var;
        a.no_vfda |= self.no_vfda;
        a.mixup_baseline |= self.mixup;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), ExpError> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let data = cmd_gen_data(&cfg)?;
            println!(
                "wrote {} client shards and {} held-out samples to {} (sha256 {})",
                data.shards.len(),
                data.heldout.len(),
                cfg.out_dir.display(),
                data.hash()
            );
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let out = cmd_train(&cfg)?;
            match &out.final_eval {
                Some(r) => println!("round {}: held-out dice_mean {}", out.logs.len(), r.dice_mean),
                None => println!("round {}: no held-out set", out.logs.len()),
            }
            println!("model written to {}", out.model_path.display());
        }
        Command::Eval { common, model, data } => {
            let out = common.out.clone();
            let report = cmd_eval(&model, &data, out.as_deref())?;
            print!("{}", report_json(&report)?);
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let table = cmd_ablate(&cfg)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
