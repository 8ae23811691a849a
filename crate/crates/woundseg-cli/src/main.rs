//! Command-line interface: training, evaluation, gradient checks,
//! parameter counts, the head-structure sweep, the decoder comparison
//! benchmark, and synthetic dataset generation.
//!
//! Configuration flows from a TOML file (`--config` or the
//! `WOUNDSEG_CONFIG` environment variable) plus `--section.key=value`
//! overrides, which are split out of the argument list before normal
//! flag parsing. Configuration problems exit with status 2, runtime
//! failures with status 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use woundseg::config::{load_run_config, RunConfig};
use woundseg::data::{
    generate_with, save_sample, split_dataset, write_manifest, ClassPalette, SegSample,
    SyntheticConfig,
};
use woundseg::harness::{
    ablation_tsv, decoder_benchmark, run_ablation_rows, AblationSettings, BenchmarkSettings,
};
use woundseg::metrics::EvalReport;
use woundseg::model::{gradient_suite, Segmenter};
use woundseg::train::{evaluate, read_history, resume, train, TrainingSnapshot};
use woundseg::{Error, Result};

#[derive(Parser)]
#[command(name = "woundseg", version, about = "Wound tissue segmentation toolkit")]
struct Cli {
    /// TOML run configuration; unset falls back to the WOUNDSEG_CONFIG
    /// environment variable, then to built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model on manifest or synthetic data
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the test split
    Eval(EvalArgs),
    /// Check every differentiable building block against finite differences
    Gradcheck,
    /// Print parameter and arithmetic counts for the configured model
    Count(CountArgs),
    /// Run decoder head-structure sweep rows and emit the result table
    Ablate(AblateArgs),
    /// Train both decoder heads across seeds and compare them
    Compare(CompareArgs),
    /// Write a synthetic dataset (PPM/PGM pairs plus manifest) to disk
    SynthData(SynthDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Train on N generated samples instead of manifest data
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Draw many small regions instead of the standard geometry
    #[arg(long, requires = "synthetic")]
    boundary_heavy: bool,
    /// Continue from train.checkpoint_path and train.history_path
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file holding the weights to evaluate
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Evaluate on the test split of N generated samples
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Draw many small regions instead of the standard geometry
    #[arg(long, requires = "synthetic")]
    boundary_heavy: bool,
}

#[derive(Args)]
struct CountArgs {
    /// Square input side for the arithmetic counts; defaults to
    /// train.input_size
    #[arg(long, value_name = "SIZE")]
    input_size: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    /// Row indices to run: "all" or a comma-separated list like "1,9,11"
    #[arg(long, default_value = "all")]
    rows: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table to a file
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Number of training seeds (0..N) per head
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    /// Benchmark dataset size before splitting
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Dataset generation seed
    #[arg(long, default_value_t = 9)]
    seed: u64,
}

#[derive(Args)]
struct SynthDataArgs {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw many small regions instead of the standard geometry
    #[arg(long)]
    boundary_heavy: bool,
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let run_cfg = match load_run_config(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(&run_cfg, a),
        Command::Eval(a) => cmd_eval(&run_cfg, a),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Count(a) => cmd_count(&run_cfg, a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::SynthData(a) => cmd_synth_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Pulls `--section.key=value` arguments out of the raw argument list.
/// A dot before the first `=` marks a config override; everything else
/// passes through to normal flag parsing.
fn split_overrides(raw: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut args = Vec::with_capacity(raw.len());
    let mut overrides = Vec::new();
    for arg in raw {
        let is_override = arg
            .strip_prefix("--")
            .and_then(|rest| rest.split_once('='))
            .is_some_and(|(key, _)| key.contains('.'));
        if is_override {
            overrides.push(arg.trim_start_matches("--").to_string());
        } else {
            args.push(arg);
        }
    }
    (args, overrides)
}

struct DataBundle {
    train: Vec<SegSample>,
    val: Vec<SegSample>,
    test: Vec<SegSample>,
}

/// Builds the three splits from either the synthetic generator or the
/// configured manifests, resized to the training extent.
fn assemble_data(run: &RunConfig, synthetic: Option<usize>, boundary_heavy: bool) -> Result<DataBundle> {
    let size = run.train.input_size;
    if let Some(n) = synthetic {
        let classes = run.model.num_classes();
        let gen = if boundary_heavy {
            SyntheticConfig::boundary_heavy(size, classes)
        } else {
            SyntheticConfig::standard(size, classes)
        };
        let data = generate_with(&gen, n, run.data.split_seed)?;
        let (train, val, test) = split_dataset(data, run.data.split_fractions, run.data.split_seed)?;
        return Ok(DataBundle { train, val, test });
    }
    let palette = ClassPalette::by_name(&run.data.palette)?;
    let resize_all = |samples: Vec<SegSample>| -> Result<Vec<SegSample>> {
        samples.iter().map(|s| woundseg::data::resize_sample(s, size)).collect()
    };
    if let (Some(tr), Some(va)) = (&run.data.train_manifest, &run.data.val_manifest) {
        let train = resize_all(woundseg::data::load_manifest_samples(tr, &palette)?)?;
        let val = resize_all(woundseg::data::load_manifest_samples(va, &palette)?)?;
        let test = match &run.data.test_manifest {
            Some(te) => resize_all(woundseg::data::load_manifest_samples(te, &palette)?)?,
            None => Vec::new(),
        };
        return Ok(DataBundle { train, val, test });
    }
    if let Some(m) = &run.data.manifest {
        let all = resize_all(woundseg::data::load_manifest_samples(m, &palette)?)?;
        let (train, val, test) = split_dataset(all, run.data.split_fractions, run.data.split_seed)?;
        return Ok(DataBundle { train, val, test });
    }
    Err(Error::Config(
        "no data source: set data.manifest (or per-split manifests) or pass --synthetic N".into(),
    ))
}

fn print_report(split: &str, report: &EvalReport) {
    println!(
        "{split} mean DSC {:.4} over {} images",
        report.mean_dsc, report.n_images
    );
    for (c, dsc) in report.per_class.iter().enumerate() {
        match dsc {
            Some(v) => println!("  class {c}: {v:.4}"),
            None => println!("  class {c}: absent"),
        }
    }
}

fn cmd_train(run: &RunConfig, a: &TrainArgs) -> Result<()> {
    let bundle = assemble_data(run, a.synthetic, a.boundary_heavy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let mut model = Segmenter::new(run.model.clone(), &mut rng)?;
    let outcome = if a.resume {
        let ckpt = run.train.checkpoint_path.as_ref().ok_or_else(|| {
            Error::Config("--resume needs train.checkpoint_path in the configuration".into())
        })?;
        let hist = run.train.history_path.as_ref().ok_or_else(|| {
            Error::Config("--resume needs train.history_path in the configuration".into())
        })?;
        let snapshot = TrainingSnapshot::load(ckpt)?;
        let prior = read_history(hist)?;
        println!("resuming from epoch {}", snapshot.epoch);
        resume(
            &mut model,
            &snapshot,
            &prior,
            &bundle.train,
            &bundle.val,
            &run.loss,
            &run.augment,
            &run.train,
        )?
    } else {
        train(&mut model, &bundle.train, &bundle.val, &run.loss, &run.augment, &run.train)?
    };
    let stopped = if outcome.stopped_early { " (stopped early)" } else { "" };
    println!(
        "trained {} epochs{stopped}; best val mean DSC {:.4} at epoch {}",
        outcome.history.len(),
        outcome.best_val_dsc,
        outcome.best_epoch
    );
    if !bundle.test.is_empty() {
        let report = evaluate(&mut model, &bundle.test, run.train.batch_size)?;
        print_report("test", &report);
    }
    Ok(())
}

fn cmd_eval(run: &RunConfig, a: &EvalArgs) -> Result<()> {
    let bundle = assemble_data(run, a.synthetic, a.boundary_heavy)?;
    if bundle.test.is_empty() {
        return Err(Error::Config("no test split to evaluate".into()));
    }
    let snapshot = TrainingSnapshot::load(&a.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let mut model = Segmenter::new(run.model.clone(), &mut rng)?;
    snapshot.restore_model(&mut model)?;
    let report = evaluate(&mut model, &bundle.test, run.train.batch_size)?;
    print_report("test", &report);
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let reports = gradient_suite()?;
    let mut failures = 0usize;
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{status}  {:<24} max rel err {:.3e}  ({} elements, {} kinks skipped)",
            r.name, r.max_rel_err, r.checked, r.skipped
        );
        if !r.passed() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Training(format!("{failures} gradient checks failed")));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn cmd_count(run: &RunConfig, a: &CountArgs) -> Result<()> {
    let size = a.input_size.unwrap_or(run.train.input_size);
    println!("parameters: {}", run.model.param_count());
    println!("macs per [1,3,{size},{size}] forward: {}", run.model.macs(1, size, size));
    println!("flops per [1,3,{size},{size}] forward: {}", run.model.flops(1, size, size));
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let indices: Vec<usize> = if a.rows == "all" {
        (1..=11).collect()
    } else {
        a.rows
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::argument("ablate", format!("bad row index {t:?}")))
            })
            .collect::<Result<_>>()?
    };
    let settings = AblationSettings { epochs: a.epochs, seed: a.seed, ..AblationSettings::default() };
    let outcomes = run_ablation_rows(&indices, &settings)?;
    let tsv = ablation_tsv(&outcomes);
    print!("{tsv}");
    if let Some(path) = &a.out {
        std::fs::write(path, &tsv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let settings = BenchmarkSettings {
        seeds: (0..a.seeds as u64).collect(),
        epochs: a.epochs,
        samples: a.samples,
        data_seed: a.seed,
        ..BenchmarkSettings::default()
    };
    let bench = decoder_benchmark(&settings)?;
    println!(
        "fusion head mean DSC {:.4} | all-MLP head mean DSC {:.4} over {} paired images",
        bench.spatial_mean,
        bench.allmlp_mean,
        bench.spatial_scores.len()
    );
    println!("{}", bench.comparison.verdict);
    Ok(())
}

fn cmd_synth_data(a: &SynthDataArgs) -> Result<()> {
    let gen = if a.boundary_heavy {
        SyntheticConfig::boundary_heavy(a.size, a.classes)
    } else {
        SyntheticConfig::standard(a.size, a.classes)
    };
    let samples = generate_with(&gen, a.count, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let mut entries = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let img = format!("img_{i:04}.ppm");
        let mask = format!("mask_{i:04}.pgm");
        save_sample(s, &a.out.join(&img), &a.out.join(&mask))?;
        entries.push((PathBuf::from(img), PathBuf::from(mask)));
    }
    let manifest = a.out.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    println!("wrote {} sample pairs and {}", samples.len(), manifest.display());
    Ok(())
}
