//! Command-line front end: training, subset selection, the synthetic benchmark
//! and the loss-combination grid.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use wsjoint::classifier::{ClassifierCheckpoint, ClassifierParams};
use wsjoint::dataset::{load_bundle, save_bundle, standardize_features};
use wsjoint::eval::Metric;
use wsjoint::joint::{fit_lf_unsupervised, grid_search, train, EpochRecord, LossCombo, LossTerm, Predictor};
use wsjoint::report::{hash_input, write_json, InputHash, Manifest};
use wsjoint::subsel::{select_subset, Kernel, Method, SelectionParams, SelectionResult};
use wsjoint::synth::{
    benchmark_config, default_rows, generate, mean_std, run_benchmark, BenchmarkResult, SyntheticSpec,
};
use wsjoint::{Architecture, DataBundle, Format, TrainConfig};

type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "wsjoint", version, about = "Joint LF-model and classifier training with subset selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a bundle with a loss combination, averaging over seeds.
    Train(TrainArgs),
    /// Choose unlabelled instances to label.
    Select(SelectArgs),
    /// Write a synthetic Gaussian bundle.
    Synth(SynthArgs),
    /// Run the five-row synthetic benchmark.
    SynthBench(BenchArgs),
    /// Train every combination in a list and rank them by validation score.
    Grid(GridArgs),
}

#[derive(Args, Serialize)]
struct DataArgs {
    /// Bundle path (a JSON file or a CSV directory).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "json")]
    format: Format,
    /// Standardise features with statistics from the labelled and unlabelled splits.
    #[arg(long)]
    standardize: bool,
}

#[derive(Args, Serialize)]
struct Hyper {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.0003)]
    lr_f: f64,
    #[arg(long, default_value_t = 0.001)]
    lr_g: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Keep probability for hidden units; omit to disable dropout.
    #[arg(long)]
    dropout_keep: Option<f64>,
    #[arg(long, default_value = "macro_f1")]
    metric: Metric,
    /// `logreg` or `mlp:<units>`.
    #[arg(long, default_value = "logreg")]
    arch: Architecture,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
}

impl Hyper {
    fn config(&self, combo: LossCombo, seed: u64) -> TrainConfig {
        TrainConfig {
            architecture: self.arch,
            lr_f: self.lr_f,
            lr_g: self.lr_g,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            combo,
            metric: self.metric,
            dropout_keep: self.dropout_keep,
        }
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated terms from L1..L6.
    #[arg(long)]
    combo: LossCombo,
    /// Add the quality-guide term (requires L5).
    #[arg(long)]
    qg: bool,
    #[command(flatten)]
    hyper: Hyper,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    method: Method,
    #[arg(long, default_value_t = 10)]
    budget: usize,
    #[arg(long, default_value_t = 5)]
    filter_factor: usize,
    /// `cosine` or `rbf:<gamma>`.
    #[arg(long, default_value = "cosine")]
    kernel: Kernel,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs for the unsupervised LF model.
    #[arg(long, default_value_t = 100)]
    lf_epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr_g: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Classifier checkpoint whose prediction entropy drives filtering.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Write a bundle with the chosen instances moved to the labelled split.
    #[arg(long, requires = "labels")]
    emit_labelled: Option<PathBuf>,
    /// JSON array with one label per unlabelled instance.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    dims: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "json")]
    format: Format,
    /// Also write the hidden labels of the unlabelled split as a JSON array.
    #[arg(long)]
    labels_out: Option<PathBuf>,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long, default_value_t = 3)]
    dims: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    /// File with one combination per line; defaults to every combination of
    /// at least three terms.
    #[arg(long)]
    combos: Option<PathBuf>,
    /// Add QG to every combination containing L5.
    #[arg(long)]
    qg: bool,
    #[command(flatten)]
    hyper: Hyper,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Select(a) => cmd_select(a),
        Command::Synth(a) => cmd_synth(a),
        Command::SynthBench(a) => cmd_synth_bench(a),
        Command::Grid(a) => cmd_grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(args: &DataArgs) -> CliResult<DataBundle> {
    let bundle = load_bundle(&args.data, args.format)?;
    Ok(if args.standardize {
        standardize_features(&bundle)
    } else {
        bundle
    })
}

fn write_manifest<C: Serialize>(out: &Path, command: &str, seeds: Vec<u64>, config: C, inputs: &[&Path]) -> CliResult<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputHash {
                path: p.display().to_string(),
                sha256: hash_input(p)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = Manifest {
        command: command.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seeds,
        config,
        inputs,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn fmt_mean(name: &str, xs: &[f64]) -> String {
    let (m, s) = mean_std(xs);
    format!("{name} = {m:.4} ± {s:.4} over {} seed(s)", xs.len())
}

// ---------------------------------------------------------------------------
// train

#[derive(Serialize)]
struct TrainRun {
    seed: u64,
    predictor: Predictor,
    best_epoch: usize,
    best_validation: f64,
    test: f64,
    history: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct TrainReport {
    combo: LossCombo,
    metric: Metric,
    /// Set when quality guides were taken from validation precision.
    quality_guides_from_validation: bool,
    test_mean: f64,
    test_std: f64,
    runs: Vec<TrainRun>,
}

fn with_guides(bundle: DataBundle, needed: bool) -> CliResult<(DataBundle, bool)> {
    if needed && bundle.quality_guides.is_none() {
        Ok((bundle.with_default_quality_guides()?, true))
    } else {
        Ok((bundle, false))
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut combo = a.combo;
    if a.qg {
        combo = combo.with(LossTerm::QG);
    }
    combo.validate()?;
    if a.hyper.seeds.is_empty() {
        return Err("need at least one seed".into());
    }
    let (bundle, derived) = with_guides(load(&a.data)?, combo.contains(LossTerm::QG))?;
    let models = a
        .hyper
        .seeds
        .par_iter()
        .map(|&s| train(&bundle, &a.hyper.config(combo, s)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut runs = Vec::new();
    for (model, &seed) in models.iter().zip(&a.hyper.seeds) {
        let dir = a.out.join(format!("seed_{seed}"));
        write_json(&dir.join("lf_model.json"), &model.lf_model.to_checkpoint())?;
        if combo.trains_classifier() {
            write_json(&dir.join("classifier.json"), &model.classifier.to_checkpoint())?;
        }
        runs.push(TrainRun {
            seed,
            predictor: model.predictor,
            best_epoch: model.best_epoch,
            best_validation: model.best_validation(),
            test: model.score(&bundle.test, bundle.num_classes)?,
            history: model.history.clone(),
        });
    }
    let tests: Vec<f64> = runs.iter().map(|r| r.test).collect();
    let (test_mean, test_std) = mean_std(&tests);
    let report = TrainReport {
        combo,
        metric: a.hyper.metric,
        quality_guides_from_validation: derived,
        test_mean,
        test_std,
        runs,
    };
    write_json(&a.out.join("report.json"), &report)?;
    write_manifest(&a.out, "train", a.hyper.seeds.clone(), a, &[&a.data.data])?;
    println!("{combo}: {}", fmt_mean("test", &tests));
    Ok(())
}

// ---------------------------------------------------------------------------
// select

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn cmd_select(a: &SelectArgs) -> CliResult<()> {
    let raw = load_bundle(&a.data.data, a.data.format)?;
    let bundle = if a.data.standardize {
        standardize_features(&raw)
    } else {
        raw.clone()
    };
    let guided = bundle.with_default_quality_guides()?;
    let lf = fit_lf_unsupervised(&guided, a.lr_g, a.lf_epochs, a.batch_size, a.seed)?;
    let classifier = match &a.classifier {
        Some(p) => Some(ClassifierParams::from_checkpoint(&read_json::<ClassifierCheckpoint>(p)?)?),
        None => None,
    };
    let params = SelectionParams {
        method: a.method,
        budget: a.budget,
        filter_factor: a.filter_factor,
        kernel: a.kernel,
        seed: a.seed,
    };
    let result: SelectionResult = select_subset(&bundle, classifier.as_ref(), &lf, params)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    write_json(&a.out.join("selection.json"), &result)?;

    let mut inputs: Vec<&Path> = vec![&a.data.data];
    if let Some(p) = &a.classifier {
        inputs.push(p);
    }
    if let (Some(target), Some(labels_path)) = (&a.emit_labelled, &a.labels) {
        let labels: Vec<usize> = read_json(labels_path)?;
        if labels.len() != raw.unlabelled.len() {
            return Err(format!(
                "labels file has {} entries, the unlabelled split has {}",
                labels.len(),
                raw.unlabelled.len()
            )
            .into());
        }
        let ys: Vec<usize> = result.chosen.iter().map(|&i| labels[i]).collect();
        save_bundle(&raw.promote(&result.chosen, &ys)?, target, a.data.format)?;
        inputs.push(labels_path);
    }
    write_manifest(&a.out, "select", vec![a.seed], a, &inputs)?;
    println!("{:?} selected {} of {}: {:?}", a.method, result.chosen.len(), bundle.unlabelled.len(), result.chosen);
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let data = generate(&SyntheticSpec::with_dims(a.dims, a.seed)?)?;
    save_bundle(&data.bundle, &a.out, a.format)?;
    if let Some(p) = &a.labels_out {
        write_json(p, &data.unlabelled_labels)?;
    }
    println!(
        "wrote {} ({} labelled, {} unlabelled, {} validation, {} test, {} LFs)",
        a.out.display(),
        data.bundle.labelled.len(),
        data.bundle.unlabelled.len(),
        data.bundle.validation.len(),
        data.bundle.test.len(),
        data.bundle.num_lfs
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// synth-bench

#[derive(Serialize)]
struct BenchConfig<'a> {
    dims: usize,
    recipe: TrainConfig,
    args: &'a BenchArgs,
}

fn cmd_synth_bench(a: &BenchArgs) -> CliResult<()> {
    let rows = default_rows();
    let results: Vec<BenchmarkResult> = run_benchmark(a.dims, &rows, &a.seeds, benchmark_config)?;
    write_json(&a.out.join("table.json"), &results)?;
    let mut w = csv::Writer::from_path(a.out.join("table.csv"))?;
    let mut header = vec!["row".to_string(), "combo".into(), "mean".into(), "std".into()];
    header.extend(a.seeds.iter().map(|s| format!("seed_{s}")));
    w.write_record(&header)?;
    for r in &results {
        let mut rec = vec![r.name.clone(), r.combo.to_string(), format!("{:?}", r.mean), format!("{:?}", r.std)];
        rec.extend(r.per_seed.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let config = BenchConfig {
        dims: a.dims,
        recipe: benchmark_config(LossCombo::new(&[LossTerm::L1]), 0),
        args: a,
    };
    write_manifest(&a.out, "synth-bench", a.seeds.clone(), config, &[])?;
    for r in &results {
        println!("{:<34} {:.3} ± {:.3}", r.name, r.mean, r.std);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// grid

#[derive(Serialize)]
struct GridSeed {
    seed: u64,
    validation: f64,
    test: f64,
    best_epoch: usize,
}

#[derive(Serialize)]
struct GridRow {
    combo: LossCombo,
    validation_mean: f64,
    test_mean: f64,
    best: bool,
    per_seed: Vec<GridSeed>,
}

#[derive(Serialize)]
struct GridReport {
    metric: Metric,
    quality_guides_from_validation: bool,
    rows: Vec<GridRow>,
}

fn read_combos(path: &Path) -> CliResult<Vec<LossCombo>> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let combos = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse::<LossCombo>())
        .collect::<Result<Vec<_>, _>>()?;
    if combos.is_empty() {
        return Err(format!("{}: no combinations", path.display()).into());
    }
    Ok(combos)
}

fn cmd_grid(a: &GridArgs) -> CliResult<()> {
    if a.hyper.seeds.is_empty() {
        return Err("need at least one seed".into());
    }
    let (mut combos, allow_small) = match &a.combos {
        Some(p) => (read_combos(p)?, true),
        None => (LossCombo::all_with_at_least(3, false), false),
    };
    if a.qg {
        combos = combos
            .into_iter()
            .map(|c| if c.contains(LossTerm::L5) { c.with(LossTerm::QG) } else { c })
            .collect();
    }
    let needs_guides = combos.iter().any(|c| c.contains(LossTerm::QG));
    let (bundle, derived) = with_guides(load(&a.data)?, needs_guides)?;

    let base = a.hyper.config(combos[0], 0);
    let mut rows: Vec<GridRow> = combos
        .iter()
        .map(|&combo| GridRow {
            combo,
            validation_mean: 0.0,
            test_mean: 0.0,
            best: false,
            per_seed: Vec::new(),
        })
        .collect();
    for &seed in &a.hyper.seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let grid = grid_search(&bundle, &combos, &cfg, allow_small)?;
        for e in grid.ranked {
            let row = rows.iter_mut().find(|r| r.combo == e.combo).expect("combo in grid");
            row.per_seed.push(GridSeed {
                seed,
                validation: e.validation,
                test: e.test,
                best_epoch: e.best_epoch,
            });
        }
    }
    for r in rows.iter_mut() {
        r.validation_mean = mean_std(&r.per_seed.iter().map(|s| s.validation).collect::<Vec<_>>()).0;
        r.test_mean = mean_std(&r.per_seed.iter().map(|s| s.test).collect::<Vec<_>>()).0;
    }
    rows.sort_by(|x, y| y.validation_mean.total_cmp(&x.validation_mean));
    rows[0].best = true;
    let report = GridReport {
        metric: a.hyper.metric,
        quality_guides_from_validation: derived,
        rows,
    };
    write_json(&a.out.join("grid.json"), &report)?;
    let mut inputs: Vec<&Path> = vec![&a.data.data];
    if let Some(p) = &a.combos {
        inputs.push(p);
    }
    write_manifest(&a.out, "grid", a.hyper.seeds.clone(), a, &inputs)?;
    for r in &report.rows {
        println!(
            "{}{:<24} validation {:.4}  test {:.4}",
            if r.best { "* " } else { "  " },
            r.combo.to_string(),
            r.validation_mean,
            r.test_mean
        );
    }
    Ok(())
}
