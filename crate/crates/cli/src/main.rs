use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spdpose::config::RunConfig;
use spdpose::data::{dataset_fingerprint, generate_dataset, write_dataset, Dataset, Split};
use spdpose::experiments::{correlation_analysis, run_ablation, write_ablation_csv};
use spdpose::metrics::{write_correlation_csv, write_metrics_csv};
use spdpose::model::VariantId;
use spdpose::train::{evaluate_model, write_train_log, Checkpoint, Trainer};
use spdpose::{Error, Result};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT_FILE: &str = "checkpoint_last.json";
pub const BEST_CHECKPOINT_FILE: &str = "checkpoint_best.json";
pub const CORRELATION_FILE: &str = "correlation.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Parser, Debug)]
#[command(name = "spdpose", version, about = "SPD-manifold pose regression on a synthetic toy dataset")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags layered over the TOML config.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: config, then $SPDPOSE_OUT_DIR, then ./spdpose-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<VariantId>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr_adam: Option<f64>,
    #[arg(long, global = true)]
    lr_stiefel: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    n_train: Option<usize>,
    #[arg(long, global = true)]
    n_val: Option<usize>,
    #[arg(long, global = true)]
    n_test: Option<usize>,
    #[arg(long, global = true)]
    n_pairs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to disk.
    Generate,
    /// Train one variant; writes the epoch log and last/best checkpoints.
    Train {
        /// Continue from a checkpoint (its config is used; --epochs may extend it).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint's best-on-validation parameters on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Covariance vs feature distance against pose distance, untrained backbone.
    Analyze,
    /// Train and evaluate every variant with shared data and seed.
    Ablate,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { c.$($field).+ = v; })*
            };
        }
        set!(
            seed => seed, epochs => epochs, batch_size => batch_size, lr_adam => lr_adam,
            lr_stiefel => lr_stiefel, lambda => lambda, n_train => dataset.n_train,
            n_val => dataset.n_val, n_test => dataset.n_test, n_pairs => analysis.n_pairs,
        );
        if let Some(v) = self.variant {
            c.variant = v;
        }
        c.validate()?;
        Ok(c)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.resolved_output_dir())
    }
}

fn with_path(path: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| with_path(dir)(e.into()))
}

fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    eprintln!("generating dataset (seed {})", cfg.seed);
    generate_dataset(&cfg.dataset, cfg.seed)
}

/// Artifacts must not depend on where they were written.
fn portable(mut cfg: RunConfig) -> RunConfig {
    cfg.output_dir = None;
    cfg
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset_for(cfg)?;
    let dir = out.join("dataset");
    ensure_dir(&dir)?;
    write_dataset(&dir, &ds).map_err(with_path(&dir))?;
    println!("train {} val {} test {}", ds.train.len(), ds.val.len(), ds.test.len());
    println!("fingerprint {}", dataset_fingerprint(&ds));
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_train(cfg: RunConfig, out: &Path, resume: Option<&Path>, epochs: Option<usize>) -> Result<()> {
    ensure_dir(out)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let ds = dataset_for(&ck.config)?;
            let mut t = Trainer::resume(ck, &ds)?;
            if let Some(e) = epochs {
                t.config.epochs = e;
                t.config.validate()?;
            }
            eprintln!("resuming at epoch {} step {}", t.state.epoch, t.state.global_step);
            t
        }
        None => {
            let ds = dataset_for(&cfg)?;
            Trainer::new(portable(cfg), &ds)?
        }
    };
    let (log_path, last_path, best_path) = (out.join(TRAIN_LOG_FILE), out.join(LAST_CHECKPOINT_FILE), out.join(BEST_CHECKPOINT_FILE));
    trainer.run(|t, log| {
        eprintln!(
            "epoch {} train {:.5} val {:.5} lr_adam {:.2e} skipped {}",
            log.epoch, log.train.total, log.val.total, log.lr_adam, log.skipped
        );
        write_train_log(&log_path, &t.state.log).map_err(with_path(&log_path))?;
        let ck = t.checkpoint();
        ck.save(&last_path).map_err(with_path(&last_path))?;
        if t.state.best_epoch == Some(log.epoch) {
            ck.save(&best_path).map_err(with_path(&best_path))?;
        }
        Ok(())
    })?;
    write_train_log(&log_path, &trainer.state.log).map_err(with_path(&log_path))?;
    trainer.checkpoint().save(&last_path).map_err(with_path(&last_path))?;
    println!(
        "variant {} epochs {} best_epoch {} best_val {}",
        trainer.config.variant,
        trainer.state.epoch,
        trainer.state.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
        trainer.state.best_val.map(|v| v.to_string()).unwrap_or_default()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(out: &Path, checkpoint: &Path, split: Split) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = dataset_for(&ck.config)?;
    if ds.stats != ck.stats {
        return Err(Error::Format("checkpoint translation stats do not match the regenerated dataset".into()));
    }
    let model = ck.config.model_config();
    let report = evaluate_model(&model, ck.best_params(), ds.split(split), &ds.stats, &ds.object)?;
    ensure_dir(out)?;
    let path = out.join(format!("metrics_{}.csv", split.as_str()));
    write_metrics_csv(&path, &report).map_err(with_path(&path))?;
    println!(
        "split {} n {} add_mean {:.6} adds_mean {:.6} accuracy {:.4} auc {:.4} median_rot_deg {:.3} median_trans_m {:.5}",
        split.as_str(),
        report.records.len(),
        report.add_mean,
        report.adds_mean,
        report.add_accuracy,
        report.auc_add,
        report.median_rotation_deg,
        report.median_translation_m
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset_for(cfg)?;
    let r = correlation_analysis(cfg, &ds)?;
    ensure_dir(out)?;
    let path = out.join(CORRELATION_FILE);
    write_correlation_csv(&path, &r.curve).map_err(with_path(&path))?;
    println!("spearman cov {:.4} cosine {:.4} euclid {:.4}", r.spearman_cov, r.spearman_cosine, r.spearman_euclid);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset_for(cfg)?;
    ensure_dir(out)?;
    let rows = run_ablation(cfg, &ds, |r| {
        eprintln!("{}: median rotation {:.2} deg, translation {:.4} m", r.variant, r.median_rotation_deg, r.median_translation_m);
        Ok(())
    })?;
    let path = out.join(ABLATION_FILE);
    write_ablation_csv(&path, &rows).map_err(with_path(&path))?;
    println!("dataset {}", rows[0].dataset_hash);
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ov = &cli.overrides;
    match &cli.command {
        Command::Train { resume: Some(path) } => {
            let out = ov.out.clone().unwrap_or_else(spdpose::config::default_output_dir);
            cmd_train(RunConfig::default(), &out, Some(path), ov.epochs)
        }
        Command::Eval { checkpoint, split } => {
            let out = ov.out.clone().unwrap_or_else(spdpose::config::default_output_dir);
            cmd_eval(&out, checkpoint, *split)
        }
        cmd => {
            let cfg = ov.resolve()?;
            let out = ov.out_dir(&cfg);
            match cmd {
                Command::Generate => cmd_generate(&cfg, &out),
                Command::Train { .. } => cmd_train(cfg, &out, None, None),
                Command::Analyze => cmd_analyze(&cfg, &out),
                Command::Ablate => cmd_ablate(&cfg, &out),
                Command::Eval { .. } => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[ConfigError]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
