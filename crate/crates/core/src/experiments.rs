//! End-to-end runs shared by the command line and the acceptance suite:
//! untrained-backbone correlation analysis, train-then-test, variant ablation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{dataset_fingerprint, Dataset};
use crate::error::Result;
use crate::metrics::{covariance_pose_correlation, csv_err, CorrelationConfig, CorrelationResult, MetricReport};
use crate::model::{backbone_features, init_params, VariantId};
use crate::train::{derive_seed, evaluate_model, EpochLog, Trainer};

const ANALYSIS_TAG: u64 = 3;

/// Feature-space vs pose-space distances on the test split, using a freshly
/// initialized backbone that never sees a pose label.
pub fn correlation_analysis(cfg: &RunConfig, ds: &Dataset) -> Result<CorrelationResult> {
    cfg.validate()?;
    let model = cfg.model_config();
    let params = init_params(&model, derive_seed(cfg.seed, ANALYSIS_TAG))?;
    let cc = CorrelationConfig {
        n_pairs: cfg.analysis.n_pairs,
        bins: cfg.analysis.bins,
        seed: cfg.seed,
        translation_scale: ds.object.diameter(),
    };
    covariance_pose_correlation(&ds.test, |img| backbone_features(&model, &params, img), &cc)
}

/// Trains `cfg.variant`, then scores the best-on-validation parameters on the test split.
pub fn train_and_test(
    cfg: &RunConfig,
    ds: &Dataset,
    on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
) -> Result<(Trainer, MetricReport)> {
    let mut trainer = Trainer::new(cfg.clone(), ds)?;
    trainer.run(on_epoch)?;
    let report = evaluate_model(&trainer.model, trainer.best_params(), &ds.test, &ds.stats, &ds.object)?;
    Ok((trainer, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: VariantId,
    pub reference: bool,
    pub seed: u64,
    pub dataset_hash: String,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub median_rotation_deg: f64,
    pub median_translation_m: f64,
    pub add_mean: f64,
    pub adds_mean: f64,
    pub add_accuracy: f64,
    pub auc_add: f64,
}

pub const ABLATION_CSV_HEADER: [&str; 12] = [
    "variant",
    "reference",
    "seed",
    "dataset_hash",
    "best_epoch",
    "best_val_loss",
    "median_rotation_deg",
    "median_translation_m",
    "add_mean_m",
    "adds_mean_m",
    "add_accuracy",
    "auc_add",
];

/// Every variant on the same data with the same seed; the 6D-via-Cholesky model is the reference.
pub fn run_ablation(
    cfg: &RunConfig,
    ds: &Dataset,
    mut on_variant: impl FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let hash = dataset_fingerprint(ds);
    let mut rows = Vec::with_capacity(VariantId::ALL.len());
    for variant in VariantId::ALL {
        let vcfg = RunConfig { variant, ..cfg.clone() };
        let (trainer, report) = train_and_test(&vcfg, ds, |_, _| Ok(()))?;
        let row = AblationRow {
            variant,
            reference: variant == VariantId::Full6d,
            seed: cfg.seed,
            dataset_hash: hash.clone(),
            best_epoch: trainer.state.best_epoch,
            best_val_loss: trainer.state.best_val,
            median_rotation_deg: report.median_rotation_deg,
            median_translation_m: report.median_translation_m,
            add_mean: report.add_mean,
            adds_mean: report.adds_mean,
            add_accuracy: report.add_accuracy,
            auc_add: report.auc_add,
        };
        on_variant(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

fn opt_string<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(ABLATION_CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.variant.as_str().to_string(),
            r.reference.to_string(),
            r.seed.to_string(),
            r.dataset_hash.clone(),
            opt_string(r.best_epoch),
            opt_string(r.best_val_loss),
            r.median_rotation_deg.to_string(),
            r.median_translation_m.to_string(),
            r.add_mean.to_string(),
            r.adds_mean.to_string(),
            r.add_accuracy.to_string(),
            r.auc_add.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
