//! Three-class Gaussian benchmark with coordinate-threshold LFs.
//!
//! Classes A, B, C are isotropic Gaussians. For each class, a few points of
//! that class serve as anchors, and each anchor becomes one LF:
//!
//! - class A anchor `(x_a, y_a, ..)`: fires when `y ≥ y_a`
//! - class B anchor `(x_b, ..)`: fires when `x ≤ x_b`
//! - class C anchor `(x_c, ..)`: fires when `x ≥ x_c`
//!
//! where `x` and `y` are the first two coordinates. Any further coordinate is
//! ignored by the LFs.

use ndarray::{Array2, ArrayView1};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::Architecture;
use crate::dataset::{DataBundle, InstanceSet};
use crate::eval::Metric;
use crate::joint::{fit_lf_unsupervised, train, LossCombo, TrainConfig, TrainError};
use crate::rng::{stream, Stream};
use crate::subsel::{select_subset, Kernel, Method, SelectError, SelectionParams};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unsupported dimensionality {0}; expected 2 or 3")]
    Dims(usize),
    #[error("class {class} has {found} anchor points, need {needed}")]
    TooFewAnchors {
        class: usize,
        found: usize,
        needed: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Data(#[from] crate::dataset::DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dims: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// One mean vector per class.
    pub means: Vec<Vec<f64>>,
    /// Per-coordinate variance, shared by all classes.
    pub variance: Vec<f64>,
    pub lfs_per_class: usize,
    pub labelled_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn three_d(seed: u64) -> Self {
        SyntheticSpec {
            dims: 3,
            n_train: 1000,
            n_test: 1000,
            means: vec![vec![0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            variance: vec![1.0; 3],
            lfs_per_class: 5,
            labelled_fraction: 0.01,
            seed,
        }
    }

    /// Planar layout: A above, B to the left, C to the right.
    pub fn two_d(seed: u64) -> Self {
        SyntheticSpec {
            dims: 2,
            means: vec![vec![0.0, 1.0], vec![-1.0, 0.0], vec![1.0, 0.0]],
            variance: vec![1.0; 2],
            ..SyntheticSpec::three_d(seed)
        }
    }

    pub fn with_dims(dims: usize, seed: u64) -> Result<Self, SynthError> {
        match dims {
            2 => Ok(SyntheticSpec::two_d(seed)),
            3 => Ok(SyntheticSpec::three_d(seed)),
            d => Err(SynthError::Dims(d)),
        }
    }

    pub fn labelled_count(&self) -> usize {
        ((self.n_train as f64 * self.labelled_fraction).round() as usize).max(1)
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !(2..=3).contains(&self.dims) {
            return Err(SynthError::Dims(self.dims));
        }
        if self.means.len() != NUM_CLASSES || self.means.iter().any(|m| m.len() != self.dims) {
            return Err(SynthError::Spec("need one mean per class of length dims".into()));
        }
        if self.variance.len() != self.dims || self.variance.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(SynthError::Spec("variance must be positive per coordinate".into()));
        }
        if self.lfs_per_class == 0 {
            return Err(SynthError::Spec("need at least one LF per class".into()));
        }
        if 2 * self.labelled_count() >= self.n_train {
            return Err(SynthError::Spec(
                "labelled and validation splits would exhaust the training pool".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtLeast,
    AtMost,
}

/// Fires for `class` when coordinate `coord` compares to `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLf {
    pub class: usize,
    pub coord: usize,
    pub comparison: Comparison,
    pub threshold: f64,
}

impl ThresholdLf {
    pub fn fires(&self, x: ArrayView1<'_, f64>) -> u8 {
        let v = x[self.coord];
        let hit = match self.comparison {
            Comparison::AtLeast => v >= self.threshold,
            Comparison::AtMost => v <= self.threshold,
        };
        hit as u8
    }
}

/// One LF per anchor; `anchors[c]` are the anchor points of class `c`.
pub fn build_lfs(anchors: &[Vec<Vec<f64>>], per_class: usize) -> Result<Vec<ThresholdLf>, SynthError> {
    let mut lfs = Vec::with_capacity(NUM_CLASSES * per_class);
    for class in 0..NUM_CLASSES {
        let pts = anchors.get(class).map_or(&[][..], Vec::as_slice);
        if pts.len() < per_class {
            return Err(SynthError::TooFewAnchors {
                class,
                found: pts.len(),
                needed: per_class,
            });
        }
        for p in &pts[..per_class] {
            let (coord, comparison) = match class {
                0 => (1, Comparison::AtLeast),
                1 => (0, Comparison::AtMost),
                _ => (0, Comparison::AtLeast),
            };
            lfs.push(ThresholdLf {
                class,
                coord,
                comparison,
                threshold: p[coord],
            });
        }
    }
    Ok(lfs)
}

pub fn apply_lfs(lfs: &[ThresholdLf], features: &Array2<f64>) -> Array2<u8> {
    Array2::from_shape_fn((features.nrows(), lfs.len()), |(i, j)| {
        lfs[j].fires(features.row(i))
    })
}

/// A generated benchmark instance. The gold labels of the unlabelled split are
/// kept aside so experiments can reveal them (skyline, subset selection).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub bundle: DataBundle,
    pub unlabelled_labels: Vec<usize>,
    pub lfs: Vec<ThresholdLf>,
}

impl SyntheticData {
    /// Every training instance outside validation becomes labelled.
    pub fn fully_labelled(&self) -> DataBundle {
        let mut unl = self.bundle.unlabelled.clone();
        unl.labels = Some(self.unlabelled_labels.clone());
        let mut b = self.bundle.clone();
        b.labelled = b.labelled.concat(&unl);
        b.unlabelled = InstanceSet::empty(b.dim(), b.num_lfs, false);
        b
    }

    /// Replaces the labelled split by the given unlabelled rows, with their gold labels.
    pub fn relabel_from_unlabelled(&self, chosen: &[usize]) -> Result<DataBundle, crate::dataset::DataError> {
        let mut base = self.bundle.clone();
        base.labelled = InstanceSet::empty(base.dim(), base.num_lfs, true);
        let ys: Vec<usize> = chosen.iter().map(|&i| self.unlabelled_labels[i]).collect();
        base.promote(chosen, &ys)
    }
}

fn sample_points<R: Rng>(spec: &SyntheticSpec, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
    let std: Vec<Normal<f64>> = spec
        .variance
        .iter()
        .map(|v| Normal::new(0.0, v.sqrt()).expect("positive variance"))
        .collect();
    let mut x = Array2::zeros((n, spec.dims));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..NUM_CLASSES);
        for d in 0..spec.dims {
            x[[i, d]] = spec.means[c][d] + std[d].sample(rng);
        }
        y.push(c);
    }
    (x, y)
}

/// Draws `count` indices from `pool` with per-class counts differing by at most
/// one (classes short of their quota hand the remainder to the others).
fn stratified_pick<R: Rng>(pool: &[usize], labels: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for &i in pool {
        by_class[labels[i]].push(i);
    }
    for members in by_class.iter_mut() {
        members.shuffle(rng);
    }
    let mut class_order: Vec<usize> = (0..NUM_CLASSES).collect();
    class_order.shuffle(rng);
    let mut picked = Vec::with_capacity(count);
    let mut cursor = [0usize; NUM_CLASSES];
    while picked.len() < count {
        let before = picked.len();
        for &c in &class_order {
            if picked.len() == count {
                break;
            }
            if cursor[c] < by_class[c].len() {
                picked.push(by_class[c][cursor[c]]);
                cursor[c] += 1;
            }
        }
        if picked.len() == before {
            break;
        }
    }
    picked.sort_unstable();
    picked
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData, SynthError> {
    spec.validate()?;
    let mut sampling = stream(spec.seed, Stream::Sampling);
    let (train_x, train_y) = sample_points(spec, spec.n_train, &mut sampling);
    let (test_x, test_y) = sample_points(spec, spec.n_test, &mut sampling);

    let mut split_rng = stream(spec.seed, Stream::Split);
    let n_lab = spec.labelled_count();
    let all: Vec<usize> = (0..spec.n_train).collect();
    let labelled = stratified_pick(&all, &train_y, n_lab, &mut split_rng);
    let rest: Vec<usize> = all.iter().copied().filter(|i| !labelled.contains(i)).collect();
    let validation = stratified_pick(&rest, &train_y, n_lab, &mut split_rng);
    let unlabelled: Vec<usize> = rest
        .iter()
        .copied()
        .filter(|i| !validation.contains(i))
        .collect();

    let mut anchor_rng = stream(spec.seed, Stream::LfAnchors);
    let mut anchors = vec![Vec::new(); NUM_CLASSES];
    for (c, slot) in anchors.iter_mut().enumerate() {
        let from_labelled: Vec<usize> = labelled.iter().copied().filter(|&i| train_y[i] == c).collect();
        let pool: Vec<usize> = if from_labelled.len() >= spec.lfs_per_class {
            from_labelled
        } else {
            all.iter().copied().filter(|&i| train_y[i] == c).collect()
        };
        let picks: Vec<usize> = pool
            .choose_multiple(&mut anchor_rng, spec.lfs_per_class)
            .copied()
            .collect();
        *slot = picks.iter().map(|&i| train_x.row(i).to_vec()).collect();
    }
    let lfs = build_lfs(&anchors, spec.lfs_per_class)?;

    let make = |x: Array2<f64>, ys: Option<Vec<usize>>| {
        let l = apply_lfs(&lfs, &x);
        InstanceSet {
            features: x,
            lf_outputs: l,
            labels: ys,
        }
    };
    let rows = |idx: &[usize]| train_x.select(ndarray::Axis(0), idx);
    let labels_of = |idx: &[usize]| idx.iter().map(|&i| train_y[i]).collect::<Vec<_>>();

    let bundle = DataBundle {
        num_classes: NUM_CLASSES,
        num_lfs: lfs.len(),
        lf_classes: lfs.iter().map(|l| l.class).collect(),
        quality_guides: None,
        labelled: make(rows(&labelled), Some(labels_of(&labelled))),
        unlabelled: make(rows(&unlabelled), None),
        validation: make(rows(&validation), Some(labels_of(&validation))),
        test: make(test_x, Some(test_y)),
    };
    bundle.validate().map_err(|e| SynthError::Spec(e.to_string()))?;
    Ok(SyntheticData {
        bundle,
        unlabelled_labels: labels_of(&unlabelled),
        lfs,
    })
}

/// Training recipe shared by every benchmark row.
pub fn benchmark_config(combo: LossCombo, seed: u64) -> TrainConfig {
    TrainConfig {
        architecture: Architecture::LogReg,
        lr_f: 0.001,
        lr_g: 0.001,
        batch_size: 32,
        epochs: 100,
        seed,
        combo,
        metric: Metric::MacroF1,
        dropout_keep: Some(0.8),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub name: String,
    pub combo: LossCombo,
    /// Train on every training instance as labelled.
    pub fully_labelled: bool,
}

/// The five configurations of the reference table.
pub fn default_rows() -> Vec<BenchmarkRow> {
    let row = |name: &str, combo: &str, full: bool| BenchmarkRow {
        name: name.into(),
        combo: combo.parse().expect("valid built-in combo"),
        fully_labelled: full,
    };
    vec![
        row("L1 (entire dataset labelled)", "L1", true),
        row("L1 (1% labelled)", "L1", false),
        row("L1 (1% labelled)+L2", "L1,L2", false),
        row("L1+L2+L3+L4+L5+L6", "L1,L2,L3,L4,L5,L6", false),
        row("L4 (1% labelled)+L5", "L4,L5", false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub name: String,
    pub combo: LossCombo,
    pub seeds: Vec<u64>,
    /// Test macro-F1 per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every row for every seed; each seed regenerates the data.
pub fn run_benchmark(
    dims: usize,
    rows: &[BenchmarkRow],
    seeds: &[u64],
    config: impl Fn(LossCombo, u64) -> TrainConfig + Sync,
) -> Result<Vec<BenchmarkResult>, SynthError> {
    if seeds.is_empty() {
        return Err(SynthError::Spec("need at least one seed".into()));
    }
    let data: Vec<SyntheticData> = seeds
        .par_iter()
        .map(|&s| generate(&SyntheticSpec::with_dims(dims, s)?))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..seeds.len()).map(move |s| (r, s)))
        .collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(r, s)| {
            let row = &rows[r];
            let bundle = if row.fully_labelled {
                data[s].fully_labelled()
            } else {
                data[s].bundle.clone()
            };
            let model = train(&bundle, &config(row.combo, seeds[s]))?;
            Ok(model.score(&bundle.test, bundle.num_classes)?)
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let per_seed: Vec<f64> = scores[r * seeds.len()..(r + 1) * seeds.len()].to_vec();
            let (mean, std) = mean_std(&per_seed);
            BenchmarkResult {
                name: row.name.clone(),
                combo: row.combo,
                seeds: seeds.to_vec(),
                per_seed,
                mean,
                std,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrial {
    pub seed: u64,
    pub method: Method,
    /// Unlabelled indices that were labelled.
    pub chosen: Vec<usize>,
    pub test_f1: f64,
}

/// Labels `budget` unlabelled points picked by `method` (in place of the
/// stratified labelled split), then trains with `combo` and scores on test.
///
/// Entropies and hypothesised labels come from an LF model fitted on the
/// unlabelled split with L5 and QG. The quality guides default to LF precision
/// on the validation split.
pub fn selection_trial(
    data: &SyntheticData,
    method: Method,
    budget: usize,
    filter_factor: usize,
    kernel: Kernel,
    config: &TrainConfig,
) -> Result<SelectionTrial, SynthError> {
    let guided = data.bundle.with_default_quality_guides()?;
    let lf = fit_lf_unsupervised(
        &guided,
        config.lr_g,
        config.epochs,
        config.batch_size,
        config.seed,
    )?;
    let params = SelectionParams {
        method,
        budget,
        filter_factor,
        kernel,
        seed: config.seed,
    };
    let picked = select_subset(&data.bundle, None, &lf, params)?;
    let bundle = data.relabel_from_unlabelled(&picked.chosen)?;
    let model = train(&bundle, config)?;
    Ok(SelectionTrial {
        seed: config.seed,
        method,
        test_f1: model.score(&bundle.test, bundle.num_classes)?,
        chosen: picked.chosen,
    })
}
