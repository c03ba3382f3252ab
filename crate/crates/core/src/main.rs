use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use synergy_ctr::config::FileConfig;
use synergy_ctr::data::{Dataset, SyntheticData, SyntheticSpec};
use synergy_ctr::experiments::{self, GradCheckSettings};
use synergy_ctr::model::Ablation;
use synergy_ctr::training::{self, TrainConfig, TrainOutputs};
use synergy_ctr::{Error, Result};

#[derive(Parser)]
#[command(name = "synergy-ctr", version, about = "Multi-modal CTR model: data, training and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training and data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Generator preset when data is generated in memory.
    #[arg(long)]
    preset: Option<String>,
    /// Dataset manifest written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Stage to remove: none, no_mfe, no_src, no_fdaf or all.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest plus three data files).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train one model, writing metrics.jsonl and best.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Score the test split with a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the four ablation configurations and print their AUCs.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds (0, 1, ..) when the config lists none.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Compare analytic and finite-difference gradients of every parameter.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the ablation and diffusion-depth benchmarks.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

struct Setup {
    train: TrainConfig,
    file: FileConfig,
}

fn setup(common: &Common, bench_defaults: bool) -> Result<Setup> {
    let mut file = match &common.config {
        Some(p) => FileConfig::load(p)?,
        None if bench_defaults => FileConfig::from_train_config(&experiments::bench_train_config()),
        None => FileConfig::default(),
    };
    if let Some(seed) = common.seed {
        file.train.seed = seed;
    }
    if let Some(a) = &common.ablation {
        file.ablation = Ablation::parse(a)?;
    }
    if let Some(p) = &common.preset {
        file.data.preset = Some(p.clone());
        file.data.spec = None;
    }
    if let Some(d) = &common.data {
        file.data.manifest = Some(d.clone());
    }
    Ok(Setup {
        train: file.train_config()?,
        file,
    })
}

fn spec_for(setup: &Setup) -> Result<SyntheticSpec> {
    let mut spec = setup.file.data.synthetic_spec()?;
    spec.seed = setup.train.seed;
    Ok(spec)
}

fn dataset(setup: &Setup) -> Result<Dataset> {
    match &setup.file.data.manifest {
        Some(path) => Ok(Dataset::load(path)?.1),
        None => Ok(SyntheticData::generate(&spec_for(setup)?)?.dataset()),
    }
}

fn seeds(setup: &Setup, count: u64) -> Vec<u64> {
    setup
        .file
        .data
        .seeds
        .clone()
        .unwrap_or_else(|| (0..count).collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let setup = setup(&common, false)?;
            let data = SyntheticData::generate(&spec_for(&setup)?)?;
            let manifest = data.write(&out)?;
            println!(
                "wrote {} ({} items, {} train / {} test records, checksum {})",
                out.join(synergy_ctr::data::MANIFEST_FILE).display(),
                manifest.n_items,
                manifest.train_records,
                manifest.test_records,
                manifest.checksum
            );
        }
        Command::Train { common, out } => {
            let setup = setup(&common, false)?;
            let data = dataset(&setup)?;
            let outcome = training::train(&setup.train, &data, &TrainOutputs { dir: Some(out.clone()) })?;
            println!(
                "best auc {:.4} at epoch {} of {}; outputs in {}",
                outcome.best_auc,
                outcome.best_epoch,
                outcome.history.len(),
                out.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let setup = setup(&common, false)?;
            let data = dataset(&setup)?;
            let model = training::load_model(&setup.train.model, &data, &checkpoint)?;
            let auc = training::evaluate(&model, &data, &data.test, setup.train.batch_size, setup.train.seed)?;
            println!("auc {auc:.6}");
        }
        Command::Ablate { common, seeds: n } => {
            let setup = setup(&common, true)?;
            let rows = experiments::run_ablation(&spec_for(&setup)?, &setup.train, &seeds(&setup, n))?;
            print!("{}", experiments::format_table(&rows));
        }
        Command::Gradcheck { seed } => {
            let mut mini = experiments::miniature(seed)?;
            let report = experiments::gradcheck(&mut mini, GradCheckSettings::default())?;
            let failing: Vec<_> = report.iter().filter(|r| !r.passed).collect();
            for r in &report {
                println!(
                    "{:<40} {:>5} entries  max rel {:.2e}  max abs {:.2e}  {}",
                    r.name,
                    r.entries,
                    r.max_rel_error,
                    r.max_abs_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            println!("{} of {} parameters failing", failing.len(), report.len());
            if !failing.is_empty() {
                return Err(Error::Numeric(format!("{} parameters fail the gradient check", failing.len())));
            }
        }
        Command::Bench { common, seeds: n } => {
            let setup = setup(&common, true)?;
            let spec = spec_for(&setup)?;
            let seeds = seeds(&setup, n);
            let rows = experiments::run_ablation(&spec, &setup.train, &seeds)?;
            println!("ablation ({} seeds)", seeds.len());
            print!("{}", experiments::format_table(&rows));
            let rows = experiments::run_depth_sweep(&spec, &setup.train, &seeds, &[12, 2, 40])?;
            println!("diffusion depth ({} seeds)", seeds.len());
            print!("{}", experiments::format_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
