//! Independent reference computations shared by the integration tests and the
//! acceptance report. Nothing here calls the closed forms under test.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsjoint::classifier::{grad_classifier_losses, Architecture, ClassifierParams, Parameters, PhiBatch};
use wsjoint::joint::{grad_lf_losses, total_loss, LossCombo, LossTerm};
use wsjoint::subsel::{lazy_greedy, naive_greedy, FacilityLocation};
use wsjoint::{DataBundle, InstanceSet, LfModelParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// LF model: brute-force enumeration over every (l, y)

pub fn random_lf_model<R: Rng>(rng: &mut R, m: usize, k: usize) -> LfModelParams {
    let theta = Array2::from_shape_fn((m, k), |_| rng.random_range(-3.0..3.0));
    let lf_classes = (0..m).map(|_| rng.random_range(0..k)).collect();
    let q = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
    LfModelParams {
        theta,
        lf_classes,
        quality_targets: Some(q),
    }
}

fn bits(mask: usize, m: usize) -> Vec<u8> {
    (0..m).map(|j| ((mask >> j) & 1) as u8).collect()
}

fn score(theta: &Array2<f64>, l: &[u8], y: usize) -> f64 {
    l.iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(j, _)| theta[[j, y]])
        .sum()
}

/// Unnormalised weight table `w[mask][y] = Π_j ψ(l_j, y)`.
pub struct Enumeration {
    pub m: usize,
    pub k: usize,
    pub weights: Vec<Vec<f64>>,
    pub z: f64,
}

impl Enumeration {
    pub fn new(theta: &Array2<f64>) -> Self {
        let (m, k) = theta.dim();
        let weights: Vec<Vec<f64>> = (0..1usize << m)
            .map(|mask| {
                let l = bits(mask, m);
                (0..k).map(|y| score(theta, &l, y).exp()).collect()
            })
            .collect();
        let z = weights.iter().flatten().sum();
        Enumeration { m, k, weights, z }
    }

    fn mask(l: &[u8]) -> usize {
        l.iter().enumerate().map(|(j, &v)| (v as usize) << j).sum()
    }

    pub fn log_partition(&self) -> f64 {
        self.z.ln()
    }

    pub fn log_joint(&self, l: &[u8], y: usize) -> f64 {
        (self.weights[Self::mask(l)][y] / self.z).ln()
    }

    pub fn posterior(&self, l: &[u8]) -> Vec<f64> {
        let row = &self.weights[Self::mask(l)];
        let s: f64 = row.iter().sum();
        row.iter().map(|w| w / s).collect()
    }

    pub fn ll_s(&self, ls: &[Vec<u8>], ys: &[usize]) -> f64 {
        ls.iter().zip(ys).map(|(l, &y)| -self.log_joint(l, y)).sum()
    }

    pub fn ll_u(&self, ls: &[Vec<u8>]) -> f64 {
        ls.iter()
            .map(|l| -(self.weights[Self::mask(l)].iter().sum::<f64>() / self.z).ln())
            .sum()
    }

    /// `P(y = k_j | l_j = 1)` by summing the joint over every other firing.
    pub fn model_precision(&self, j: usize, kj: usize) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (mask, row) in self.weights.iter().enumerate() {
            if (mask >> j) & 1 == 1 {
                num += row[kj];
                den += row.iter().sum::<f64>();
            }
        }
        num / den
    }
}

/// Largest absolute deviation of every LF-model quantity from enumeration on
/// one random model with `n` random firing vectors.
pub fn lf_enumeration_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let m = r.random_range(1..=10);
    let k = r.random_range(2..=4);
    let lf = random_lf_model(&mut r, m, k);
    let e = Enumeration::new(&lf.theta);
    let n = 6;
    let ls: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..m).map(|_| r.random_range(0..=1u8)).collect())
        .collect();
    let ys: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let set = InstanceSet::new(
        Array2::zeros((n, 1)),
        Array2::from_shape_fn((n, m), |(i, j)| ls[i][j]),
        Some(ys.clone()),
    )
    .unwrap();

    let mut worst: f64 = (lf.log_partition() - e.log_partition()).abs();
    for (i, l) in ls.iter().enumerate() {
        let view = set.l(i);
        for y in 0..k {
            worst = worst.max((lf.log_joint(view, y).unwrap() - e.log_joint(l, y)).abs());
        }
        for (a, b) in lf.posterior(view).iter().zip(e.posterior(l)) {
            worst = worst.max((a - b).abs());
        }
    }
    worst = worst.max((lf.ll_s(&set).unwrap() - e.ll_s(&ls, &ys)).abs());
    worst = worst.max((lf.ll_u(&set) - e.ll_u(&ls)).abs());
    for j in 0..m {
        let p = lf.model_precision(j).unwrap();
        worst = worst.max((p - e.model_precision(j, lf.lf_classes[j])).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// Gradients: central finite differences

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`, the largest over all entries.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

pub struct GradCase {
    pub bundle: DataBundle,
    pub classifier: ClassifierParams,
    pub lf: LfModelParams,
}

fn random_set<R: Rng>(rng: &mut R, n: usize, d: usize, m: usize, k: usize, labelled: bool) -> InstanceSet {
    InstanceSet::new(
        Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0)),
        Array2::from_shape_fn((n, m), |_| rng.random_range(0..=1u8)),
        labelled.then(|| (0..n).map(|_| rng.random_range(0..k)).collect()),
    )
    .unwrap()
}

pub fn random_grad_case(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let d = r.random_range(1..=5);
    let k = r.random_range(2..=4);
    let m = r.random_range(1..=5);
    let arch = if r.random_bool(0.5) {
        Architecture::LogReg
    } else {
        Architecture::Mlp {
            hidden_units: r.random_range(1..=6),
        }
    };
    let mut classifier = ClassifierParams::init(arch, d, k, &mut r);
    // non-zero biases so every parameter is exercised
    for layer in classifier.layers.iter_mut() {
        layer.b = Array1::from_shape_fn(layer.b.len(), |_| r.random_range(-0.5..0.5));
    }
    let lf = random_lf_model(&mut r, m, k);
    let bundle = DataBundle {
        num_classes: k,
        num_lfs: m,
        lf_classes: lf.lf_classes.clone(),
        quality_guides: lf.quality_targets.clone(),
        labelled: random_set(&mut r, 3, d, m, k, true),
        unlabelled: random_set(&mut r, 4, d, m, k, false),
        validation: random_set(&mut r, 2, d, m, k, true),
        test: random_set(&mut r, 2, d, m, k, true),
    };
    GradCase {
        bundle,
        classifier,
        lf,
    }
}

fn term_value(case: &GradCase, phi: &ClassifierParams, lf: &LfModelParams, term: LossTerm) -> f64 {
    let combo = if term == LossTerm::QG {
        LossCombo::new(&[LossTerm::L5, LossTerm::QG])
    } else {
        LossCombo::new(&[term])
    };
    total_loss(phi, lf, &case.bundle, &combo).unwrap().terms[&term]
}

/// Worst relative error of the φ-side gradient of `term` (L1, L2, L3 or L6).
pub fn phi_grad_error(case: &GradCase, term: LossTerm) -> f64 {
    let batch = PhiBatch {
        labelled: &case.bundle.labelled,
        unlabelled: &case.bundle.unlabelled,
    };
    let (_, grads) = grad_classifier_losses::<ChaCha8Rng>(
        &case.classifier,
        batch,
        &LossCombo::new(&[term]),
        &case.lf,
        None,
    )
    .unwrap();
    let analytic: Vec<f64> = grads.tensors().concat();
    let mut numeric = Vec::with_capacity(analytic.len());
    let sizes: Vec<usize> = case.classifier.tensors().iter().map(|t| t.len()).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let mut plus = case.classifier.clone();
            plus.tensors_mut()[t][i] += FD_STEP;
            let mut minus = case.classifier.clone();
            minus.tensors_mut()[t][i] -= FD_STEP;
            let f = |p: &ClassifierParams| term_value(case, p, &case.lf, term);
            numeric.push((f(&plus) - f(&minus)) / (2.0 * FD_STEP));
        }
    }
    max_rel_error(&analytic, &numeric)
}

/// Worst relative error of the θ-side gradient of `term` (L4, L5, L6 or QG).
pub fn theta_grad_error(case: &GradCase, term: LossTerm) -> f64 {
    let b = &case.bundle;
    let probs: Vec<Vec<f64>> = b
        .labelled
        .concat(&b.unlabelled)
        .features
        .rows()
        .into_iter()
        .map(|x| case.classifier.forward(x).unwrap())
        .collect();
    let combo = LossCombo::new(&[term]);
    let analytic = grad_lf_losses(&case.lf, &b.labelled, &b.unlabelled, Some(&probs), &combo).unwrap();
    let numeric = Array2::from_shape_fn(case.lf.theta.dim(), |(j, y)| {
        let mut plus = case.lf.clone();
        plus.theta[[j, y]] += FD_STEP;
        let mut minus = case.lf.clone();
        minus.theta[[j, y]] -= FD_STEP;
        let f = |lf: &LfModelParams| term_value(case, &case.classifier, lf, term);
        (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
    });
    max_rel_error(analytic.as_slice().unwrap(), numeric.as_slice().unwrap())
}

pub const PHI_TERMS: [LossTerm; 4] = [LossTerm::L1, LossTerm::L2, LossTerm::L3, LossTerm::L6];
pub const THETA_TERMS: [LossTerm; 4] = [LossTerm::L4, LossTerm::L5, LossTerm::L6, LossTerm::QG];

/// Worst error over every term, both sides, on one random case.
pub fn gradient_case_error(seed: u64) -> f64 {
    let case = random_grad_case(seed);
    let phi = PHI_TERMS.iter().map(|&t| phi_grad_error(&case, t));
    let theta = THETA_TERMS.iter().map(|&t| theta_grad_error(&case, t));
    phi.chain(theta).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Facility location: exhaustive search

/// Random non-negative symmetric similarity with σ_ii the row maximum.
pub fn random_sigma<R: Rng>(rng: &mut R, n: usize) -> Array2<f64> {
    let pts: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let gamma = rng.random_range(0.1..2.0);
    Array2::from_shape_fn((n, n), |(i, j)| {
        let d2 = (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2);
        (-gamma * d2).exp()
    })
}

pub fn random_partition<R: Rng>(rng: &mut R, n: usize, blocks: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); blocks];
    for i in 0..n {
        out[rng.random_range(0..blocks)].push(i);
    }
    out
}

/// Direct facility-location value: every element, best similarity within its block.
pub fn brute_fl(sigma: &Array2<f64>, block_of: &[usize], set: &[usize]) -> f64 {
    (0..sigma.nrows())
        .map(|i| {
            set.iter()
                .filter(|&&j| block_of[i] == block_of[j])
                .map(|&j| sigma[[i, j]])
                .fold(0.0, f64::max)
        })
        .sum()
}

pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

pub fn exhaustive_opt(sigma: &Array2<f64>, block_of: &[usize], k: usize) -> f64 {
    combinations(sigma.nrows(), k)
        .iter()
        .map(|s| brute_fl(sigma, block_of, s))
        .fold(0.0, f64::max)
}

pub struct GreedyCheck {
    pub identical: bool,
    /// `greedy / OPT`, when the instance is small enough for exhaustive search.
    pub ratio: Option<f64>,
}

pub fn greedy_check(seed: u64) -> GreedyCheck {
    let mut r = rng(seed);
    let small = seed.is_multiple_of(2);
    let n = if small { r.random_range(2..=12) } else { r.random_range(2..=50) };
    let k = if small { r.random_range(1..=4.min(n)) } else { r.random_range(1..=n.min(10)) };
    let sigma = random_sigma(&mut r, n);
    let supervised = r.random_bool(0.5);
    let (fl, block_of) = if supervised {
        let blocks = r.random_range(1..=3);
        let parts = random_partition(&mut r, n, blocks);
        let mut block_of = vec![0; n];
        for (b, members) in parts.iter().enumerate() {
            for &i in members {
                block_of[i] = b;
            }
        }
        (FacilityLocation::supervised(&sigma, &parts).unwrap(), block_of)
    } else {
        let ground: Vec<usize> = (0..n).collect();
        (FacilityLocation::unsupervised(&sigma, &ground).unwrap(), vec![0; n])
    };
    let naive = naive_greedy(&fl, k).unwrap();
    let lazy = lazy_greedy(&fl, k).unwrap();
    let identical = naive.chosen == lazy.chosen && naive.objective_trace == lazy.objective_trace;
    let ratio = small.then(|| {
        let got = brute_fl(&sigma, &block_of, &lazy.chosen);
        got / exhaustive_opt(&sigma, &block_of, k)
    });
    GreedyCheck { identical, ratio }
}

// ---------------------------------------------------------------------------
// Wilcoxon: enumeration of sign assignments

/// Exact one-tailed `P(W+ ≥ observed)` by listing every sign vector.
pub fn brute_wilcoxon_greater(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    let mut mags: Vec<(f64, usize)> = nz.iter().map(|d| d.abs()).zip(0..).collect();
    mags.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let j = (i..n).take_while(|&t| mags[t].0 == mags[i].0).last().unwrap();
        for t in i..=j {
            ranks[mags[t].1] = (i + j + 2) as f64 / 2.0;
        }
        i = j + 1;
    }
    let observed: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| ranks[b]).sum();
        if w >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}
