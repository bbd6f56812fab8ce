use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tab::commands::{
    cmd_ablate, cmd_eval, cmd_eval_predictions, cmd_generate, cmd_predict, cmd_train, TrainOptions,
};
use tab::config::{extract_overrides, RunConfig};
use tab::report::ablation_table;
use tab::{CliError, Result};
use tab_core::model::Variant;

/// Multi-annotator segmentation with preference queries and a stochastic
/// low-rank head.
///
/// Any config key can be overridden with a dotted flag, e.g.
/// `--model.d 32` or `--train.lr0=5e-4`.
#[derive(Parser, Debug)]
#[command(name = "tab", version)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (data seed for `generate`, training seed otherwise).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the synthetic dataset described by the config.
    Generate,
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a run's checkpoint, or a directory of saved probability maps.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        run: Option<PathBuf>,
        #[arg(long, requires = "data")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Probability maps and attention heatmaps for one image.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Train all variants over several seeds and tabulate them.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subset of full,no_pfe,no_ss,diag_gauss,no_mu_prior.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        quiet: bool,
    },
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, &overrides)?,
        None => RunConfig::from_value(RunConfig::default().to_value(), &overrides)?,
    };
    let config_path = cli.config.as_deref();
    match &cli.cmd {
        Cmd::Generate => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            let out = out_dir(&cli, "data");
            let m = cmd_generate(&cfg, config_path, &out)?;
            println!("{} train / {} test samples in {}", m.train.len(), m.test.len(), out.display());
        }
        Cmd::Train { data, resume, quiet } => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let out = out_dir(&cli, "run");
            let opts = TrainOptions {
                resume: *resume,
                progress: !quiet,
            };
            let done = cmd_train(&cfg, config_path, data, &out, opts)?;
            print!("{}", done.evaluation.report.table());
        }
        Cmd::Eval {
            run,
            predictions,
            data,
            split,
        } => {
            let ev = match (predictions, run) {
                (Some(p), _) => {
                    let data = data.as_ref().expect("required by clap");
                    cmd_eval_predictions(p, data, split, &out_dir(&cli, p.to_str().unwrap_or(".")))?
                }
                (None, Some(r)) => cmd_eval(r, data.as_deref(), split, &cli.out.clone().unwrap_or_else(|| r.clone()))?,
                (None, None) => unreachable!("required by clap"),
            };
            print!("{}", ev.report.table());
        }
        Cmd::Predict { run, image } => {
            let written = cmd_predict(run, image, &out_dir(&cli, "predict"))?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Cmd::Ablate {
            data,
            variants,
            seeds,
            quiet,
        } => {
            let base = cli.seed.unwrap_or(cfg.train.seed);
            let seeds: Vec<u64> = (0..*seeds).map(|i| base + i).collect();
            let variants = variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
            let s = cmd_ablate(&cfg, config_path, data.as_deref(), &out_dir(&cli, "ablation"), &variants, &seeds, !quiet)?;
            print!("{}", ablation_table(&s));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (args, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Numeric(_) = e {
                eprintln!("a diagnostic dump was written to abort.json in the run directory");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
