use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cerd::commands::{self, CliConfig};
use cerd::data::SplitName;
use cerd::{CerdError, Result};

#[derive(Parser)]
#[command(name = "cerd", version, about = "Multimodal classification with missing-modality reconstruction")]
struct Cli {
    /// Log progress (per-epoch losses) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file (`train`, `synth`, `data`, `load` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set epochs=10` or `--set synth.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: $CERD_OUT/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as CSV files plus manifest.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Synthetic-spec JSON; replaces the `synth` section of --config.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model and write checkpoint, epoch log and final metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifest; overrides `data` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Also write the metrics here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-subject evidence reports and the modality-importance summary.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation variant under several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of seeds, starting at the configured seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Compare pipeline gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        scale: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(cfg: &ConfigArgs, spec: Option<&Path>, data: Option<PathBuf>) -> Result<CliConfig> {
    let mut c = CliConfig::resolve(cfg.config.as_deref(), spec, &cfg.overrides)?;
    if data.is_some() {
        c.data = data;
    }
    Ok(c)
}

fn print_metrics(split: &str, m: &cerd::metrics::Metrics) {
    println!(
        "{split}: accuracy {:.4}  macro_f1 {:.4}  macro_auc {:.4}",
        m.accuracy, m.macro_f1, m.macro_auc
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, spec } => {
            let c = resolve(&cfg, spec.as_deref(), None)?;
            let out = commands::output_dir(cfg.out.as_deref(), "synth");
            let s = commands::cmd_synth(&c, &out)?;
            let full = s.data.full_coverage(&(0..s.data.len()).collect::<Vec<_>>()).len();
            println!(
                "wrote {} subjects ({} fully observed) to {}",
                s.data.len(),
                full,
                s.manifest.display()
            );
        }
        Command::Train { cfg, data } => {
            let c = resolve(&cfg, None, data)?;
            let out = commands::output_dir(cfg.out.as_deref(), "train");
            let s = commands::cmd_train(&c, &out)?;
            for (group, n) in s.model.parameter_inventory() {
                println!("parameters {group}: {n}");
            }
            match s.best_epoch {
                Some(e) => println!("best epoch {e}"),
                None => println!("no classification epoch ran; checkpoint holds the final parameters"),
            }
            for (split, m) in &s.metrics {
                print_metrics(split, m);
            }
            println!("artifacts in {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let m = commands::cmd_eval(&checkpoint, &data, split, out.as_deref())?;
            print_metrics(&split.to_string(), &m);
        }
        Command::Attribute {
            checkpoint,
            data,
            split,
            out,
        } => {
            let out = commands::output_dir(out.as_deref(), "attribute");
            let s = commands::cmd_attribute(&checkpoint, &data, split, &out)?;
            for r in &s.rows {
                println!(
                    "{}: mean weight {:.4}  mean |contribution| {:.4}",
                    r.modality, r.mean_weight, r.mean_abs_contribution
                );
            }
            println!("top modality {} over {} subjects; reports in {}", s.top_modality(), s.subjects, out.display());
        }
        Command::Ablate { cfg, data, seeds } => {
            let c = resolve(&cfg, None, data)?;
            let out = commands::output_dir(cfg.out.as_deref(), "ablate");
            let t = commands::cmd_ablate(&c, seeds, &out)?;
            for r in &t.rows {
                print_metrics(&format!("{} (median of {})", r.variant, r.runs.len()), &r.median);
            }
            println!("tables in {}", out.display());
        }
        Command::Gradcheck { scale, seed, out } => {
            let mut config = commands::gradcheck_config(&scale)?;
            config.seed = seed;
            let check = commands::cmd_gradcheck(&config, out.as_deref())?;
            for (module, m) in &check.modules {
                println!("{module:<12} {:>6} scalars  max rel error {:.3e}  ({})", m.scalars, m.max_rel_error, m.worst);
            }
            println!("max rel error {:.3e} (tolerance {:e})", check.max_rel_error, check.tolerance);
            if !check.passed {
                return Err(CerdError::Consistency(format!(
                    "gradient check failed: {:.3e} exceeds {:e}",
                    check.max_rel_error, check.tolerance
                )));
            }
            println!("gradient check passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cerd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
