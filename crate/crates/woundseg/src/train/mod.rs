//! Training loop, evaluation, and run bookkeeping.
//!
//! A run is deterministic given its configuration: epoch shuffles come
//! from one seeded generator advanced only on the coordinating thread,
//! and per-sample augmentation streams are keyed by (epoch, sample
//! index), so batch composition never affects the pixels a sample
//! receives. The plateau scheduler and early stopper are pure state
//! machines over the validation metric, which makes an interrupted run
//! resumable from a checkpoint plus the recorded metric history alone.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

pub use checkpoint::TrainingSnapshot;
pub use optim::Adam;
pub use schedule::{EarlyStop, PlateauScheduler, StopVerdict};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, batch_samples, sample_rng, AugmentConfig, SegSample};
use crate::loss::LossConfig;
use crate::metrics::{aggregate_dsc, image_mean_dsc, EvalReport};
use crate::model::Segmenter;
use crate::nn::Params;
use crate::stats::{wilcoxon_signed_rank, PairedTestResult};
use crate::tensor::{ClassMask, Tape};
use crate::{Error, Result};

/// Optimization and run-control settings.
///
/// Validation mean DSC is the monitored metric: the scheduler and the
/// early stopper both watch it, and the best-epoch weights restored at
/// the end of a run are chosen by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Square side every sample must already be resized to.
    pub input_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Minimum metric gain that counts as improvement, shared by the
    /// scheduler and the stopper.
    pub improvement_threshold: f64,
    /// Reshuffle the training set each epoch. Off keeps batch
    /// composition fixed, which also freezes what the normalization
    /// layers fold into their running statistics.
    pub shuffle: bool,
    pub seed: u64,
    /// Latest full training state, rewritten every epoch; the resume
    /// point after an interruption.
    pub checkpoint_path: Option<PathBuf>,
    /// State at the best validation epoch seen so far.
    pub best_checkpoint_path: Option<PathBuf>,
    /// Per-epoch metric table, rewritten every epoch.
    pub history_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            max_epochs: 200,
            input_size: 224,
            plateau_factor: 0.1,
            plateau_patience: 5,
            early_stop_patience: 15,
            improvement_threshold: 1e-4,
            shuffle: true,
            seed: 0,
            checkpoint_path: None,
            best_checkpoint_path: None,
            history_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::argument("train_config", "learning_rate must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("train_config", "batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::argument("train_config", "max_epochs must be at least 1"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::argument(
                "train_config",
                format!("input_size {} is not a positive multiple of 32", self.input_size),
            ));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(Error::argument("train_config", "plateau_factor must lie in (0, 1)"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::argument("train_config", "patience values must be at least 1"));
        }
        if !(self.improvement_threshold >= 0.0 && self.improvement_threshold.is_finite()) {
            return Err(Error::argument(
                "train_config",
                "improvement_threshold must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

/// One epoch's results. `lr` is the rate in force during the epoch,
/// before the scheduler saw this epoch's metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_dsc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub stopped_early: bool,
}

struct LoopState {
    opt: Adam<f64>,
    scheduler: PlateauScheduler,
    stopper: EarlyStop,
    rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
    best: Option<(usize, f64)>,
    start_epoch: usize,
    /// Best-epoch state recovered from disk on resume; consulted at the
    /// end only if no improvement happens after the resume point.
    preloaded_best: Option<TrainingSnapshot>,
}

/// Trains until `max_epochs` or early stop, then restores the weights
/// of the best validation epoch into `model`.
pub fn train(
    model: &mut Segmenter<f64>,
    train_set: &[SegSample],
    val_set: &[SegSample],
    loss_cfg: &LossConfig,
    augment_cfg: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_run_inputs(model, train_set, val_set, loss_cfg, augment_cfg, cfg)?;
    let state = LoopState {
        opt: Adam::new(cfg.learning_rate),
        scheduler: PlateauScheduler::new(
            cfg.learning_rate,
            cfg.plateau_factor,
            cfg.plateau_patience,
            cfg.improvement_threshold,
        )?,
        stopper: EarlyStop::new(cfg.early_stop_patience, cfg.improvement_threshold)?,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        history: Vec::new(),
        best: None,
        start_epoch: 0,
        preloaded_best: None,
    };
    run_loop(model, train_set, val_set, loss_cfg, augment_cfg, cfg, state)
}

/// Continues an interrupted run bit-exactly: restores weights,
/// optimizer moments, and shuffle rng from the snapshot, then replays
/// the recorded metric history through fresh scheduler and stopper
/// instances to rebuild their state.
pub fn resume(
    model: &mut Segmenter<f64>,
    snapshot: &TrainingSnapshot,
    prior_history: &[EpochRecord],
    train_set: &[SegSample],
    val_set: &[SegSample],
    loss_cfg: &LossConfig,
    augment_cfg: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_run_inputs(model, train_set, val_set, loss_cfg, augment_cfg, cfg)?;
    if snapshot.epoch as usize != prior_history.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is at epoch {} but history holds {} records",
            snapshot.epoch,
            prior_history.len()
        )));
    }
    snapshot.restore_model(model)?;
    let mut opt = Adam::new(cfg.learning_rate);
    snapshot.restore_optimizer(&mut opt);

    let mut scheduler = PlateauScheduler::new(
        cfg.learning_rate,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.improvement_threshold,
    )?;
    let mut stopper = EarlyStop::new(cfg.early_stop_patience, cfg.improvement_threshold)?;
    let mut best = None;
    let mut already_stopped = false;
    for rec in prior_history {
        let verdict = stopper.observe(rec.val_mean_dsc);
        if verdict.improved {
            best = Some((rec.epoch, rec.val_mean_dsc));
        }
        already_stopped = verdict.stop;
        scheduler.observe(rec.val_mean_dsc);
    }
    if already_stopped {
        let (best_epoch, best_val_dsc) = best.expect("stop implies at least one observation");
        return Ok(TrainOutcome {
            history: prior_history.to_vec(),
            best_epoch,
            best_val_dsc,
            stopped_early: true,
        });
    }

    let mut preloaded_best = None;
    if best.is_some() {
        if let Some(path) = &cfg.best_checkpoint_path {
            if path.exists() {
                preloaded_best = Some(TrainingSnapshot::load(path)?);
            }
        }
    }

    let state = LoopState {
        opt,
        scheduler,
        stopper,
        rng: snapshot.restore_rng(),
        history: prior_history.to_vec(),
        best,
        start_epoch: snapshot.epoch as usize,
        preloaded_best,
    };
    run_loop(model, train_set, val_set, loss_cfg, augment_cfg, cfg, state)
}

fn check_run_inputs(
    model: &Segmenter<f64>,
    train_set: &[SegSample],
    val_set: &[SegSample],
    loss_cfg: &LossConfig,
    augment_cfg: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    loss_cfg.validate()?;
    augment_cfg.validate()?;
    model.config.validate()?;
    check_split(model, train_set, cfg.input_size, "train")?;
    check_split(model, val_set, cfg.input_size, "val")
}

fn check_split(
    model: &Segmenter<f64>,
    samples: &[SegSample],
    input_size: usize,
    role: &str,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::argument("train", format!("{role} split is empty")));
    }
    let classes = model.config.num_classes();
    for s in samples {
        if s.height() != input_size || s.width() != input_size {
            return Err(Error::argument(
                "train",
                format!(
                    "{role} sample {:?} is {}x{}, run expects {input_size}x{input_size}",
                    s.source_id,
                    s.height(),
                    s.width()
                ),
            ));
        }
        s.check_classes(classes)?;
    }
    Ok(())
}

fn run_loop(
    model: &mut Segmenter<f64>,
    train_set: &[SegSample],
    val_set: &[SegSample],
    loss_cfg: &LossConfig,
    augment_cfg: &AugmentConfig,
    cfg: &TrainConfig,
    mut st: LoopState,
) -> Result<TrainOutcome> {
    let n_train = train_set.len();
    let mut best_weights: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    let mut stopped_early = false;

    for epoch in st.start_epoch..cfg.max_epochs {
        let lr = st.scheduler.lr();
        st.opt.lr = lr;

        let mut order: Vec<usize> = (0..n_train).collect();
        if cfg.shuffle {
            order.shuffle(&mut st.rng);
        }

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut draw = sample_rng(augment_cfg.seed, epoch, idx);
                batch.push(augment(&train_set[idx], augment_cfg, &mut draw)?);
            }
            let refs: Vec<&SegSample> = batch.iter().collect();
            let (images, masks) = batch_samples(&refs)?;

            let mut tape = Tape::new();
            let x = tape.constant(&images);
            let logits = model
                .forward(&mut tape, x, true)
                .map_err(|e| abort_on_non_finite(epoch, e))?;
            let loss = loss_cfg
                .loss(&mut tape, logits, &masks)
                .map_err(|e| abort_on_non_finite(epoch, e))?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss value in epoch {epoch}")));
            }
            tape.backward(loss)?;
            st.opt.step(model, &tape)?;
            loss_sum += value * chunk.len() as f64;
        }
        let train_loss = loss_sum / n_train as f64;

        let report = evaluate(model, val_set, cfg.batch_size)?;
        let val_dsc = report.mean_dsc;
        st.history.push(EpochRecord { epoch, train_loss, val_mean_dsc: val_dsc, lr });

        let verdict = st.stopper.observe(val_dsc);
        if verdict.improved {
            st.best = Some((epoch, val_dsc));
            best_weights = Some(copy_weights(model));
            if let Some(path) = &cfg.best_checkpoint_path {
                TrainingSnapshot::capture(model, &st.opt, (epoch + 1) as u64, Some(val_dsc), &st.rng)
                    .save(path)?;
            }
        }
        st.scheduler.observe(val_dsc);

        if let Some(path) = &cfg.checkpoint_path {
            let best_metric = st.best.map(|(_, m)| m);
            TrainingSnapshot::capture(model, &st.opt, (epoch + 1) as u64, best_metric, &st.rng)
                .save(path)?;
        }
        if let Some(path) = &cfg.history_path {
            write_history(path, &st.history)?;
        }
        if verdict.stop {
            stopped_early = true;
            break;
        }
    }

    match (&best_weights, &st.preloaded_best) {
        (Some((params, buffers)), _) => restore_weights(model, params, buffers),
        (None, Some(snap)) => snap.restore_model(model)?,
        (None, None) => {}
    }
    let (best_epoch, best_val_dsc) = st
        .best
        .ok_or_else(|| Error::Training("run finished without a single epoch".into()))?;
    Ok(TrainOutcome { history: st.history, best_epoch, best_val_dsc, stopped_early })
}

fn copy_weights(model: &Segmenter<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (
        model.params().iter().map(|p| p.value.data().to_vec()).collect(),
        model.buffers().iter().map(|b| b.data.clone()).collect(),
    )
}

fn restore_weights(model: &mut Segmenter<f64>, params: &[Vec<f64>], buffers: &[Vec<f64>]) {
    for (p, saved) in model.params_mut().into_iter().zip(params) {
        p.value.data_mut().copy_from_slice(saved);
    }
    for (b, saved) in model.buffers_mut().into_iter().zip(buffers) {
        b.data.copy_from_slice(saved);
    }
}

/// Every tape op checks its output for non-finite values and reports
/// the op name; this turns that failure into a training abort carrying
/// the epoch it happened in.
fn abort_on_non_finite(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Training(format!(
            "epoch {epoch}: op {op:?} produced non-finite values"
        )),
        other => other,
    }
}

/// Predicts every sample and scores macro DSC over the whole set.
/// A mask label outside the model's class range is an error.
pub fn evaluate(
    model: &mut Segmenter<f64>,
    samples: &[SegSample],
    batch_size: usize,
) -> Result<EvalReport> {
    let classes = model.config.num_classes();
    let pairs = predict_masks(model, samples, batch_size)?;
    aggregate_dsc(pairs.iter().map(|(p, g)| (p, *g)), classes)
}

/// Per-image mean DSC in sample order, the pairing unit for the
/// significance test.
pub fn per_image_mean_dsc(
    model: &mut Segmenter<f64>,
    samples: &[SegSample],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let classes = model.config.num_classes();
    let pairs = predict_masks(model, samples, batch_size)?;
    pairs
        .iter()
        .map(|(p, g)| {
            image_mean_dsc(p, g, classes)?.ok_or_else(|| {
                Error::argument("per_image_mean_dsc", "no class present in either mask")
            })
        })
        .collect()
}

fn predict_masks<'a>(
    model: &mut Segmenter<f64>,
    samples: &'a [SegSample],
    batch_size: usize,
) -> Result<Vec<(ClassMask, &'a ClassMask)>> {
    if samples.is_empty() {
        return Err(Error::argument("evaluate", "no samples"));
    }
    if batch_size == 0 {
        return Err(Error::argument("evaluate", "batch_size must be at least 1"));
    }
    let classes = model.config.num_classes();
    for s in samples {
        s.check_classes(classes)?;
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (images, _) = batch_samples(&refs)?;
        let preds = model.predict(&images)?;
        let (h, w) = (chunk[0].height(), chunk[0].width());
        for (i, s) in chunk.iter().enumerate() {
            let plane = preds.data()[i * h * w..(i + 1) * h * w].to_vec();
            out.push((ClassMask::new(&[h, w], plane)?, &s.mask));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ModelComparison {
    pub mean_a: f64,
    pub mean_b: f64,
    /// Absent when every paired difference is zero.
    pub test: Option<PairedTestResult>,
    pub verdict: String,
}

/// Compares two models' per-image score lists with the paired
/// signed-rank test. Identical lists and lists with too few nonzero
/// differences yield a testless verdict rather than an error.
pub fn compare_models(a: &[f64], b: &[f64]) -> Result<ModelComparison> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::argument(
            "compare_models",
            format!("need equal-length nonempty score lists, got {} and {}", a.len(), b.len()),
        ));
    }
    let mean_a = a.iter().sum::<f64>() / a.len() as f64;
    let mean_b = b.iter().sum::<f64>() / b.len() as f64;
    match wilcoxon_signed_rank(a, b) {
        Ok(test) => {
            let verdict = if test.p_value < 0.05 {
                let better = if mean_a >= mean_b { "first" } else { "second" };
                format!(
                    "{better} model scores higher (W={}, p={:.4}, r={:.2})",
                    test.statistic_w, test.p_value, test.effect_size_r
                )
            } else {
                format!(
                    "no significant difference (W={}, p={:.4})",
                    test.statistic_w, test.p_value
                )
            };
            Ok(ModelComparison { mean_a, mean_b, test: Some(test), verdict })
        }
        Err(Error::UndefinedTest(_)) => Ok(ModelComparison {
            mean_a,
            mean_b,
            test: None,
            verdict: "scores are identical; no paired difference to test".into(),
        }),
        Err(Error::Argument { op, detail }) if op == "wilcoxon" => Ok(ModelComparison {
            mean_a,
            mean_b,
            test: None,
            verdict: format!("too few informative pairs for a signed-rank test ({detail})"),
        }),
        Err(e) => Err(e),
    }
}

const HISTORY_HEADER: &str = "epoch\ttrain_loss\tval_mean_dsc\tlr";

/// Tab-separated metric table. Floats use shortest round-trip
/// formatting, so a read-back history replays state machines exactly.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.epoch, r.train_loss, r.val_mean_dsc, r.lr));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HISTORY_HEADER => {}
        other => return Err(Error::Codec(format!("bad history header {other:?}"))),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Codec(format!("history line {} has {} columns", i + 2, cols.len())));
        }
        let field = |j: usize, name: &str| -> Result<f64> {
            cols[j]
                .parse()
                .map_err(|_| Error::Codec(format!("history line {}: bad {name} {:?}", i + 2, cols[j])))
        };
        records.push(EpochRecord {
            epoch: cols[0]
                .parse()
                .map_err(|_| Error::Codec(format!("history line {}: bad epoch {:?}", i + 2, cols[0])))?,
            train_loss: field(1, "train_loss")?,
            val_mean_dsc: field(2, "val_mean_dsc")?,
            lr: field(3, "lr")?,
        });
    }
    Ok(records)
}
