//! `capc` command-line harness. Every subcommand reads one INI run
//! configuration (`--config`) and is a pure function of that file and
//! `--seed`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use capc::checkpoint::Checkpoint;
use capc::config::{require_path, RunConfig};
use capc::csi::{read_dataset, Dataset};
use capc::diagnose::{diagnose_collapse, export_embeddings, validation_batch, write_spectrum};
use capc::eval::{linear_eval, semi_supervised_eval, shots_sweep, transfer_eval, EvalMode, EvalReport};
use capc::model::Encoder;
use capc::sweep::sweep_aug;
use capc::synth::gen_dataset;
use capc::train::Trainer;
use capc::{seed, CapcError, Result};

/// Seed tag of the randomly initialized baseline encoder in `sweep-shots`.
const TAG_BASELINE: u64 = 0x21;

#[derive(Debug, Parser)]
#[command(name = "capc", version, about = "Context-aware predictive coding for WiFi CSI")]
struct Cli {
    /// INI run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed of every section.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory (default depends on the subcommand).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for sweeps and batched math.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a paired synthetic CSI dataset.
    Synth,
    /// Self-supervised pre-training; writes `checkpoint/` and `metrics.log`.
    Pretrain {
        /// Continue from `<out>/checkpoint` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Few-shot linear probe on the frozen encoder.
    EvalLinear,
    /// Few-shot fine-tuning of encoder and classifier.
    EvalSemi,
    /// Linear probe on the `eval.target` dataset.
    Transfer,
    /// Accuracy over `eval.shots_list` x `eval.seeds`, against a random encoder.
    SweepShots,
    /// Pre-train and probe every single and paired augmentation.
    SweepAug,
    /// Singular-value spectrum of the embedding covariance.
    DiagnoseCollapse,
    /// Concatenated window embeddings and labels of a dataset.
    ExportEmbeddings,
}

impl Command {
    fn default_out(&self) -> &'static str {
        match self {
            Command::Synth => "data",
            Command::Pretrain { .. } => "run",
            Command::ExportEmbeddings => "embeddings",
            _ => "results",
        }
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 2 for usage and configuration errors, 1 otherwise.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let Some(config_path) = cli.config.clone() else {
        eprintln!("error: --config PATH is required\n\nUsage: capc --config PATH [--seed INT] [--out DIR] [--jobs N] <COMMAND>");
        return 2;
    };
    let result = RunConfig::load(&config_path).and_then(|cfg| {
        let cfg = match cli.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        let out = cli.out.clone().unwrap_or_else(|| cli.command.default_out().into());
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.jobs {
            pool = pool.num_threads(n);
        }
        let pool = pool.build().map_err(|e| CapcError::Config(format!("--jobs: {e}")))?;
        pool.install(|| run(&cli.command, &cfg, &out))
    });
    match result {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CapcError::Config(_) | CapcError::ConfigKey { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn dataset(key: &str, path: &Path, standardize: bool) -> Result<Dataset> {
    require_path(key, path)?;
    let ds = read_dataset(path)?;
    Ok(if standardize { ds.standardized() } else { ds })
}

fn encoder(key: &str, path: &Path) -> Result<Encoder<f32>> {
    require_path(key, path)?;
    Ok(Checkpoint::load(path)?.model.encoder().clone())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))
        .and_then(|_| std::fs::write(path, text))
        .map_err(|e| CapcError::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn report_line(mode: &str, shots: usize, seed: u64, r: &EvalReport) -> String {
    format!(
        "mode,shots,seed,accuracy,train_count,test_count\n{mode},{shots},{seed},{:.6},{},{}\n",
        r.accuracy, r.train_count, r.test_count
    )
}

fn run(command: &Command, cfg: &RunConfig, out: &Path) -> Result<String> {
    let mut summary = String::new();
    match command {
        Command::Synth => {
            let ds = gen_dataset(&cfg.synth.build()?, out)?;
            let _ = writeln!(summary, "wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Pretrain { resume } => {
            let ds = dataset("pretrain.data", &cfg.pretrain.data, cfg.pretrain.standardize)?;
            let ck_dir = out.join("checkpoint");
            let trainer = if *resume && ck_dir.exists() {
                Trainer::resume(Checkpoint::load(&ck_dir)?, &ds)?
            } else {
                Trainer::new(cfg.pretrain.train.clone(), &ds)?
            };
            let report = trainer.run(Some(out))?;
            if let Some(last) = report.logs.last() {
                let _ = writeln!(summary, "{last}");
            }
            let _ = writeln!(summary, "checkpoint: {}", ck_dir.display());
        }
        Command::EvalLinear | Command::EvalSemi => {
            let ds = dataset("eval.data", &cfg.eval.data, cfg.eval.standardize)?;
            let enc = encoder("eval.checkpoint", &cfg.eval.checkpoint)?;
            let (mode, report) = if matches!(command, Command::EvalLinear) {
                (EvalMode::Linear, linear_eval(&enc, &ds, &cfg.eval.config(EvalMode::Linear))?)
            } else {
                (EvalMode::Semi, semi_supervised_eval(&enc, &ds, &cfg.eval.config(EvalMode::Semi))?.0)
            };
            let text = report_line(mode.name(), cfg.eval.shots, cfg.eval.seed, &report);
            write_text(&out.join(format!("eval-{}.csv", mode.name())), &text)?;
            let _ = writeln!(summary, "{} accuracy {:.4}", mode.name(), report.accuracy);
        }
        Command::Transfer => {
            let target = cfg.eval.target.as_deref().ok_or_else(|| CapcError::ConfigKey {
                key: "eval.target".into(),
                reason: "transfer needs a target dataset".into(),
            })?;
            let ds = dataset("eval.target", target, cfg.eval.standardize)?;
            let enc = encoder("eval.checkpoint", &cfg.eval.checkpoint)?;
            let report = transfer_eval(&enc, &ds, &cfg.eval.config(EvalMode::Linear))?;
            let text = report_line("transfer", cfg.eval.shots, cfg.eval.seed, &report);
            write_text(&out.join("transfer.csv"), &text)?;
            let _ = writeln!(summary, "transfer accuracy {:.4}", report.accuracy);
        }
        Command::SweepShots => {
            let ds = dataset("eval.data", &cfg.eval.data, cfg.eval.standardize)?;
            require_path("eval.checkpoint", &cfg.eval.checkpoint)?;
            let ck = Checkpoint::load(&cfg.eval.checkpoint)?;
            let trained = ck.model.encoder();
            let baseline = Encoder::new(trained.config, &mut seed::rng(cfg.eval.seed, &[TAG_BASELINE]))?;
            let name = ck.model.config.method.name();
            let table = shots_sweep(
                &[(name, trained), ("random", &baseline)],
                &ds,
                &cfg.eval.shots_list,
                &cfg.eval.seeds,
                &cfg.eval.config(cfg.eval.sweep_mode),
            )?;
            table.write(out)?;
            summary.push_str(&table.summary());
        }
        Command::SweepAug => {
            let train = dataset("pretrain.data", &cfg.pretrain.data, cfg.pretrain.standardize)?;
            let eval = dataset("eval.data", &cfg.eval.data, cfg.eval.standardize)?;
            let names: Vec<&str> = cfg.sweep.augmentations.iter().map(String::as_str).collect();
            let grid = sweep_aug(&names, &cfg.pretrain.train, &train, &cfg.eval.config(EvalMode::Linear), &eval)?;
            grid.write(&out.join("aug_grid.csv"))?;
            summary.push_str(&grid.to_csv());
        }
        Command::DiagnoseCollapse => {
            let ds = dataset("diagnose.data", &cfg.diagnose.data, cfg.diagnose.standardize)?;
            let enc = encoder("diagnose.checkpoint", &cfg.diagnose.checkpoint)?;
            let batch = validation_batch(&ds, cfg.diagnose.batch);
            let sv = diagnose_collapse(&enc, &batch)?;
            write_spectrum(&sv, &out.join("spectrum.csv"))?;
            let (max, min) = (sv[0], sv[sv.len() - 1]);
            let _ = writeln!(summary, "singular values: max {max:.4e} min {min:.4e} ratio {:.4e}", min / max);
        }
        Command::ExportEmbeddings => {
            let ds = dataset("diagnose.data", &cfg.diagnose.data, cfg.diagnose.standardize)?;
            let enc = encoder("diagnose.checkpoint", &cfg.diagnose.checkpoint)?;
            let z = export_embeddings(&enc, &ds, out)?;
            let _ = writeln!(summary, "wrote {} x {} embeddings to {}", z.nrows(), z.ncols(), out.display());
        }
    }
    Ok(summary)
}
