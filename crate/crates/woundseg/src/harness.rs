//! Experiment drivers shared by the command-line tool and the
//! acceptance suite: scripted overfit runs, the decoder head
//! comparison benchmark, and the eleven-row head-structure sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    generate_with, split_dataset, AugmentConfig, SegSample, SyntheticConfig,
};
use crate::decoder::{ablation_row, AblationRow, Activation, NormKind};
use crate::loss::{LossConfig, LossKind};
use crate::model::{DecoderKind, ModelConfig, Segmenter};
use crate::train::{
    compare_models, evaluate, per_image_mean_dsc, train, EpochRecord, ModelComparison,
    TrainConfig, TrainOutcome,
};
use crate::{Error, Result};

/// Scripted run that drives one model to memorize a small fixed set.
/// Validation is the training set itself, so the recorded validation
/// score tracks training-set accuracy directly.
#[derive(Clone, Debug)]
pub struct OverfitSettings {
    pub samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OverfitSettings {
    fn default() -> Self {
        OverfitSettings {
            samples: 8,
            image_size: 64,
            num_classes: 7,
            max_epochs: 200,
            learning_rate: 1e-4,
            batch_size: 4,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    /// Training-set mean DSC of the returned (best) weights.
    pub train_mean_dsc: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

/// Trains a fusion-head model on `samples` synthetic images and scores
/// the best weights on that same set. Regions are drawn large, with
/// every class equally likely: the logit map is produced at a quarter
/// of the input extent, so structures near that stride cap the score
/// no matter how well the set is memorized. Batch order is fixed
/// across epochs, keeping the normalization running statistics
/// steady; under a plateau scheduler watching a small set, reshuffle
/// churn in those statistics reads as metric noise.
pub fn overfit_micro(s: &OverfitSettings) -> Result<OverfitReport> {
    let gen = SyntheticConfig {
        regions_per_image: [2, 3],
        radius_fractions: [0.2, 0.32],
        rarity_ratio: 1.0,
        ..SyntheticConfig::standard(s.image_size, s.num_classes)
    };
    let data = generate_with(&gen, s.samples, s.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut model = Segmenter::new(ModelConfig::micro(s.num_classes), &mut rng)?;
    let cfg = TrainConfig {
        learning_rate: s.learning_rate,
        max_epochs: s.max_epochs,
        input_size: s.image_size,
        batch_size: s.batch_size,
        shuffle: false,
        seed: s.seed,
        ..TrainConfig::default()
    };
    let outcome = train(
        &mut model,
        &data,
        &data,
        &LossConfig::default(),
        &AugmentConfig::identity(),
        &cfg,
    )?;
    let report = evaluate(&mut model, &data, cfg.batch_size)?;
    Ok(OverfitReport {
        train_mean_dsc: report.mean_dsc,
        epochs_run: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        history: outcome.history,
    })
}

/// Paired comparison of the two decoder heads over a shared
/// boundary-heavy dataset. Every seed trains both heads with one
/// budget, then both are scored per-image on the held-out split.
#[derive(Clone, Debug)]
pub struct BenchmarkSettings {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub data_seed: u64,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        BenchmarkSettings {
            seeds: vec![0, 1, 2, 3, 4],
            epochs: 12,
            samples: 64,
            image_size: 64,
            num_classes: 4,
            learning_rate: 1e-3,
            data_seed: 9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBenchmark {
    /// Held-out per-image scores for the fusion head, all seeds pooled.
    pub spatial_scores: Vec<f64>,
    /// Same images and seeds under the all-MLP head.
    pub allmlp_scores: Vec<f64>,
    pub spatial_mean: f64,
    pub allmlp_mean: f64,
    pub comparison: ModelComparison,
}

/// Runs the paired benchmark. Scores come back image-by-image in one
/// fixed order for both heads, so a signed-rank test on the pooled
/// lists is a valid paired comparison.
pub fn decoder_benchmark(s: &BenchmarkSettings) -> Result<DecoderBenchmark> {
    if s.seeds.is_empty() {
        return Err(Error::argument("decoder_benchmark", "need at least one seed"));
    }
    let data = generate_with(
        &SyntheticConfig::boundary_heavy(s.image_size, s.num_classes),
        s.samples,
        s.data_seed,
    )?;
    let (train_set, val_set, test_set) = split_dataset(data, [0.8, 0.1, 0.1], s.data_seed)?;
    if test_set.is_empty() {
        return Err(Error::argument(
            "decoder_benchmark",
            format!("{} samples leave an empty held-out split", s.samples),
        ));
    }
    let mut spatial_scores = Vec::new();
    let mut allmlp_scores = Vec::new();
    for &seed in &s.seeds {
        for kind in [DecoderKind::SpatialFusion, DecoderKind::AllMlp] {
            let model_cfg = match kind {
                DecoderKind::SpatialFusion => ModelConfig::micro(s.num_classes),
                DecoderKind::AllMlp => ModelConfig::micro_allmlp(s.num_classes),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = Segmenter::new(model_cfg, &mut rng)?;
            let cfg = TrainConfig {
                learning_rate: s.learning_rate,
                max_epochs: s.epochs,
                input_size: s.image_size,
                seed,
                ..TrainConfig::default()
            };
            train(
                &mut model,
                &train_set,
                &val_set,
                &LossConfig::default(),
                &AugmentConfig::identity(),
                &cfg,
            )?;
            let scores = per_image_mean_dsc(&mut model, &test_set, cfg.batch_size)?;
            match kind {
                DecoderKind::SpatialFusion => spatial_scores.extend(scores),
                DecoderKind::AllMlp => allmlp_scores.extend(scores),
            }
        }
    }
    let comparison = compare_models(&spatial_scores, &allmlp_scores)?;
    Ok(DecoderBenchmark {
        spatial_mean: comparison.mean_a,
        allmlp_mean: comparison.mean_b,
        spatial_scores,
        allmlp_scores,
        comparison,
    })
}

/// Shared data and budget for head-structure sweep runs. One sweep
/// generates a single dataset; every row trains on the same split.
#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub epochs: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            epochs: 10,
            train_samples: 24,
            val_samples: 8,
            image_size: 64,
            num_classes: 7,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub row: AblationRow,
    /// Best validation mean DSC reached within the budget.
    pub val_mean_dsc: f64,
    pub epochs_run: usize,
}

/// Trains one sweep row: a fusion head restructured per the row, with
/// the row's loss and augmentation switches applied.
pub fn run_ablation_row(index: usize, s: &AblationSettings) -> Result<AblationOutcome> {
    let row = ablation_row(index)?;
    let (train_set, val_set) = ablation_dataset(s)?;
    let outcome = train_one_ablation(&row, &train_set, &val_set, s)?;
    Ok(AblationOutcome {
        row,
        val_mean_dsc: outcome.best_val_dsc,
        epochs_run: outcome.history.len(),
    })
}

/// Runs the listed rows against one shared dataset.
pub fn run_ablation_rows(indices: &[usize], s: &AblationSettings) -> Result<Vec<AblationOutcome>> {
    let rows: Vec<AblationRow> = indices
        .iter()
        .map(|&i| ablation_row(i))
        .collect::<Result<_>>()?;
    let (train_set, val_set) = ablation_dataset(s)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let outcome = train_one_ablation(&row, &train_set, &val_set, s)?;
        out.push(AblationOutcome {
            row,
            val_mean_dsc: outcome.best_val_dsc,
            epochs_run: outcome.history.len(),
        });
    }
    Ok(out)
}

fn ablation_dataset(s: &AblationSettings) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let mut data = generate_with(
        &SyntheticConfig::standard(s.image_size, s.num_classes),
        s.train_samples + s.val_samples,
        s.seed,
    )?;
    let val = data.split_off(s.train_samples);
    Ok((data, val))
}

fn train_one_ablation(
    row: &AblationRow,
    train_set: &[SegSample],
    val_set: &[SegSample],
    s: &AblationSettings,
) -> Result<TrainOutcome> {
    let mut model_cfg = ModelConfig::micro(s.num_classes);
    model_cfg.decoder = row.configure(&model_cfg.decoder);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut model = Segmenter::new(model_cfg, &mut rng)?;
    let loss_cfg = LossConfig { kind: row.loss, ..LossConfig::default() };
    let augment_cfg = if row.augment {
        AugmentConfig { seed: s.seed, ..AugmentConfig::default() }
    } else {
        AugmentConfig::identity()
    };
    let cfg = TrainConfig {
        learning_rate: s.learning_rate,
        max_epochs: s.epochs,
        input_size: s.image_size,
        seed: s.seed,
        ..TrainConfig::default()
    };
    train(&mut model, train_set, val_set, &loss_cfg, &augment_cfg, &cfg)
}

/// Column layout of the sweep table: structure switches left of the
/// published score, then the score measured by this run.
pub const ABLATION_TSV_HEADER: &str =
    "row\talign\tnorm\tactivation\textra_convs\tloss\taugment\treported_dsc_pct\tmeasured_dsc_pct";

pub fn ablation_tsv_line(o: &AblationOutcome) -> String {
    let kernel = |k: usize| format!("{k}x{k}");
    let extras = if o.row.extra_convs.is_empty() {
        "-".to_string()
    } else {
        o.row.extra_convs.iter().map(|&k| kernel(k)).collect::<Vec<_>>().join("+")
    };
    let norm = match o.row.norm {
        NormKind::None => "none",
        NormKind::BatchNorm => "batch_norm",
    };
    let act = match o.row.activation {
        Activation::None => "none",
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
    };
    let loss = match o.row.loss {
        LossKind::CrossEntropy => "cross_entropy",
        LossKind::FocalDice => "focal_dice",
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{:.2}",
        o.row.index,
        kernel(o.row.align_kernel),
        norm,
        act,
        extras,
        loss,
        if o.row.augment { "yes" } else { "no" },
        o.row.reported_mean_dsc,
        o.val_mean_dsc * 100.0,
    )
}

/// Full sweep table as TSV, header plus one line per outcome.
pub fn ablation_tsv(outcomes: &[AblationOutcome]) -> String {
    let mut text = String::from(ABLATION_TSV_HEADER);
    for o in outcomes {
        text.push('\n');
        text.push_str(&ablation_tsv_line(o));
    }
    text.push('\n');
    text
}
