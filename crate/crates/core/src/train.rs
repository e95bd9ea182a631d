//! Epoch loop, plateau scheduling, best-on-validation tracking, checkpoints
//! and test-split evaluation.

use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{denormalize_translation, PoseSE3, TranslationStats};
use crate::config::RunConfig;
use crate::data::{Dataset, Sample, Split, ToyObject};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate_poses, MetricReport};
use crate::model::{evaluate_loss, init_params, predict, train_step, Example, ModelConfig, Optimizers, Params, StepOutcome};
use crate::optim::PlateauScheduler;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Independent seeds for parameter init and batch shuffling.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const PARAM_TAG: u64 = 1;
const SHUFFLE_TAG: u64 = 2;

/// Exact ChaCha position, enough to resume the stream bit for bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub lr_adam: f64,
    pub lr_stiefel: f64,
    pub skipped: usize,
}

pub const TRAIN_LOG_HEADER: [&str; 12] = [
    "epoch",
    "train_total",
    "train_rotation",
    "train_translation",
    "train_regularizer",
    "val_total",
    "val_rotation",
    "val_translation",
    "val_regularizer",
    "lr_adam",
    "lr_stiefel",
    "skipped",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: Params,
    pub optimizers: Optimizers,
    pub scheduler: PlateauScheduler,
    pub rng: RngState,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: usize,
    pub global_step: u64,
    pub epoch_losses: Vec<LossBreakdown>,
    pub epoch_skipped: usize,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<Params>,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub stats: TranslationStats,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("checkpoint {}: {e}", path.display()))))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", ck.version)));
        }
        Ok(ck)
    }

    /// Parameters at the best validation epoch, else the latest ones.
    pub fn best_params(&self) -> &Params {
        self.state.best_params.as_ref().unwrap_or(&self.state.params)
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: ModelConfig,
    pub stats: TranslationStats,
    pub state: TrainState,
    rng: ChaCha8Rng,
    train: Vec<Example>,
    val: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub outcome: StepOutcome,
    pub epoch_end: Option<EpochLog>,
}

impl Trainer {
    pub fn new(config: RunConfig, ds: &Dataset) -> Result<Self> {
        config.validate()?;
        let model = config.model_config();
        let params = init_params(&model, derive_seed(config.seed, PARAM_TAG))?;
        let optimizers = Optimizers::new(config.lr_adam, config.lr_stiefel)?;
        let scheduler = PlateauScheduler::new(config.scheduler.factor, config.scheduler.patience)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_TAG));
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut rng);
        let state = TrainState {
            params,
            optimizers,
            scheduler,
            rng: RngState::capture(&rng),
            order,
            cursor: 0,
            epoch: 0,
            global_step: 0,
            epoch_losses: Vec::new(),
            epoch_skipped: 0,
            best_val: None,
            best_epoch: None,
            best_params: None,
            log: Vec::new(),
        };
        Ok(Self {
            model,
            stats: ds.stats,
            state,
            rng,
            train: ds.examples(Split::Train),
            val: ds.examples(Split::Val),
            config,
        })
    }

    pub fn resume(ck: Checkpoint, ds: &Dataset) -> Result<Self> {
        ck.config.validate()?;
        if ck.stats != ds.stats {
            return Err(Error::Format("checkpoint translation stats do not match the dataset".into()));
        }
        if ck.state.order.len() != ds.train.len() {
            return Err(Error::Format("checkpoint was written for a different training split".into()));
        }
        Ok(Self {
            model: ck.config.model_config(),
            stats: ck.stats,
            rng: ck.state.rng.restore(),
            state: ck.state,
            train: ds.examples(Split::Train),
            val: ds.examples(Split::Val),
            config: ck.config,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng = RngState::capture(&self.rng);
        Checkpoint { version: CHECKPOINT_VERSION, config: self.config.clone(), stats: self.stats, state }
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// One mini-batch; closes the epoch when the shuffled order is exhausted.
    pub fn step(&mut self) -> Result<StepReport> {
        let n = self.state.order.len();
        let end = (self.state.cursor + self.config.batch_size).min(n);
        let batch: Vec<&Example> = self.state.order[self.state.cursor..end].iter().map(|&i| &self.train[i]).collect();
        let outcome = train_step(&self.model, &mut self.state.params, &mut self.state.optimizers, &batch, self.config.lambda)?;
        self.state.cursor = end;
        self.state.global_step += 1;
        if outcome.skipped.len() < batch.len() {
            self.state.epoch_losses.push(outcome.loss);
        }
        self.state.epoch_skipped += outcome.skipped.len();
        let epoch_end = if self.state.cursor >= n { Some(self.end_epoch()?) } else { None };
        Ok(StepReport { outcome, epoch_end })
    }

    fn end_epoch(&mut self) -> Result<EpochLog> {
        let train = LossBreakdown::mean(&self.state.epoch_losses).unwrap_or_default();
        let val = evaluate_loss(&self.model, &self.state.params, &self.val, self.config.lambda)?;
        if !val.total.is_finite() {
            return Err(Error::DivergenceDetected(format!("epoch {}: validation loss {}", self.state.epoch, val.total)));
        }
        let opt = &mut self.state.optimizers;
        let log = EpochLog {
            epoch: self.state.epoch,
            train,
            val,
            lr_adam: opt.adam.lr,
            lr_stiefel: opt.stiefel.lr,
            skipped: self.state.epoch_skipped,
        };
        let mut lrs = [opt.adam.lr, opt.stiefel.lr];
        self.state.scheduler.step(val.total, &mut lrs);
        opt.adam.lr = lrs[0];
        opt.stiefel.lr = lrs[1];
        if self.state.best_val.is_none_or(|b| val.total < b) {
            self.state.best_val = Some(val.total);
            self.state.best_epoch = Some(self.state.epoch);
            self.state.best_params = Some(self.state.params.clone());
        }
        self.state.log.push(log.clone());
        self.state.epoch += 1;
        self.state.cursor = 0;
        self.state.epoch_losses.clear();
        self.state.epoch_skipped = 0;
        self.state.order.shuffle(&mut self.rng);
        Ok(log)
    }

    /// Runs to the configured epoch count, calling `on_epoch` after each one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>) -> Result<()> {
        while !self.finished() {
            if let Some(log) = self.step()?.epoch_end {
                on_epoch(self, &log)?;
            }
        }
        Ok(())
    }

    pub fn best_params(&self) -> &Params {
        self.state.best_params.as_ref().unwrap_or(&self.state.params)
    }
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = TRAIN_LOG_HEADER.join(",");
    out.push('\n');
    for e in log {
        let fields = [
            e.epoch.to_string(),
            e.train.total.to_string(),
            e.train.rotation_geodesic.to_string(),
            e.train.translation_l2.to_string(),
            e.train.regularizer.to_string(),
            e.val.total.to_string(),
            e.val.rotation_geodesic.to_string(),
            e.val.translation_l2.to_string(),
            e.val.regularizer.to_string(),
            e.lr_adam.to_string(),
            e.lr_stiefel.to_string(),
            e.skipped.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Predicted poses in metres; degenerate 6D outputs fall back to the identity rotation.
pub fn predict_poses(
    model: &ModelConfig,
    params: &Params,
    samples: &[Sample],
    stats: &TranslationStats,
) -> Result<Vec<(usize, PoseSE3, PoseSE3)>> {
    samples
        .par_iter()
        .map(|s| {
            let (rotation, t_norm) = match predict(model, params, &s.image) {
                Ok((p, _)) => (p.rotation, p.t_norm),
                Err(Error::DegenerateRotation(_)) => {
                    (Matrix3::identity(), crate::model::forward(model, params, &s.image).map(|t| head_translation(&t))?)
                }
                Err(e) => return Err(e),
            };
            let hat = PoseSE3 { rotation, translation: denormalize_translation(&t_norm, stats) };
            Ok((s.id, hat, s.pose))
        })
        .collect()
}

fn head_translation(trace: &crate::model::Trace) -> nalgebra::Vector3<f64> {
    use crate::model::HeadOutput;
    match &trace.output {
        HeadOutput::Params6D { params, .. } => params.t,
        HeadOutput::Euler { t, .. } => *t,
        HeadOutput::Tangent(s) => crate::linalg::cholesky_lower(s)
            .map(|l| crate::codec::params_from_factor(&l).t)
            .unwrap_or_else(|_| nalgebra::Vector3::zeros()),
    }
}

pub fn evaluate_model(
    model: &ModelConfig,
    params: &Params,
    samples: &[Sample],
    stats: &TranslationStats,
    object: &ToyObject,
) -> Result<MetricReport> {
    let preds = predict_poses(model, params, samples, stats)?;
    Ok(evaluate_poses(&object.points, object.diameter(), &preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};
    use crate::model::VariantId;
    use rand::Rng;

    fn tiny_config(variant: VariantId) -> RunConfig {
        RunConfig {
            variant,
            epochs: 3,
            batch_size: 4,
            lr_adam: 1e-3,
            dataset: DatasetConfig { n_train: 24, n_val: 8, n_test: 8, ..DatasetConfig::default() },
            ..RunConfig::default()
        }
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(9);
        let _: u64 = rng.random();
        let mut back = RngState::capture(&rng).restore();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }

    #[test]
    fn runs_all_epochs_and_logs() {
        let cfg = tiny_config(VariantId::Full6d);
        let ds = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let mut t = Trainer::new(cfg, &ds).unwrap();
        let mut seen = 0;
        t.run(|_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 3);
        assert_eq!(t.state.global_step, 18);
        assert_eq!(t.state.log.len(), 3);
        assert!(t.state.best_params.is_some());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_train_log(&path, &t.state.log).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRAIN_LOG_HEADER.join(","));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn resume_mid_epoch_is_bit_exact() {
        let cfg = tiny_config(VariantId::Full6d);
        let ds = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let mut full = Trainer::new(cfg.clone(), &ds).unwrap();
        let reference: Vec<u64> = (0..15).map(|_| full.step().unwrap().outcome.loss.total.to_bits()).collect();

        let mut first = Trainer::new(cfg, &ds).unwrap();
        let mut got: Vec<u64> = (0..4).map(|_| first.step().unwrap().outcome.loss.total.to_bits()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        first.checkpoint().save(&path).unwrap();
        let mut resumed = Trainer::resume(Checkpoint::load(&path).unwrap(), &ds).unwrap();
        got.extend((0..11).map(|_| resumed.step().unwrap().outcome.loss.total.to_bits()));
        assert_eq!(got, reference);
        assert_eq!(resumed.state.params, full.state.params);
        assert_eq!(resumed.checkpoint(), full.checkpoint());
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(Checkpoint::load(&dir.path().join("missing.json")).unwrap_err().class(), "IoError");
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{not json").unwrap();
        assert_eq!(Checkpoint::load(&bad).unwrap_err().class(), "FormatError");
    }

    #[test]
    fn ground_truth_predictions_score_perfectly() {
        let ds = generate_dataset(&DatasetConfig { n_train: 10, n_val: 2, n_test: 6, ..Default::default() }, 1).unwrap();
        let preds: Vec<_> = ds.test.iter().map(|s| (s.id, s.pose, s.pose)).collect();
        let r = evaluate_poses(&ds.object.points, ds.object.diameter(), &preds);
        assert_eq!((r.add_accuracy, r.auc_add), (1.0, 1.0));
    }

    #[test]
    fn evaluation_is_deterministic_for_every_variant() {
        for v in VariantId::ALL {
            let cfg = tiny_config(v);
            let ds = generate_dataset(&cfg.dataset, 2).unwrap();
            let model = cfg.model_config();
            let params = init_params(&model, 5).unwrap();
            let a = evaluate_model(&model, &params, &ds.test, &ds.stats, &ds.object).unwrap();
            let b = evaluate_model(&model, &params, &ds.test, &ds.stats, &ds.object).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.records.len(), 8);
        }
    }
}
