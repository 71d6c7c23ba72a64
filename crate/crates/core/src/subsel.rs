//! Choosing which unlabelled instances to label.
//!
//! Candidates are first narrowed to the `f·B` instances the current model is
//! least sure about, then `B` of them are picked greedily under a facility
//! location objective
//!
//! ```text
//! f(S) = Σ_{i ∈ V} max_{j ∈ S} σ_ij
//! ```
//!
//! optionally restricted to pairs inside the same hypothesised-label block.
//! Gains are evaluated against a memoised vector holding, for every ground
//! element, its best similarity to the current selection.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{entropy, ClassifierError, ClassifierParams};
use crate::dataset::{DataBundle, InstanceSet};
use crate::lfmodel::LfModelParams;
use crate::rng::{stream, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("the unlabelled set is empty")]
    EmptyUnlabelled,
    #[error("the ground set is empty")]
    EmptyGround,
    #[error("{0} must be at least 1")]
    NonPositive(&'static str),
    #[error("index {0} is out of range for a similarity matrix of size {1}")]
    IndexOutOfRange(usize, usize),
    #[error("selected element {0} is not in the ground set")]
    NotInGround(usize),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `(1 + cos(x_i, x_j)) / 2`, in `[0, 1]`.
    CosineShifted,
    /// `exp(-γ ‖x_i - x_j‖²)`.
    Rbf { gamma: f64 },
}

impl std::str::FromStr for Kernel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "cosine" {
            return Ok(Kernel::CosineShifted);
        }
        if let Some(g) = s.strip_prefix("rbf:") {
            let gamma: f64 = g.parse().map_err(|_| format!("bad rbf gamma '{g}'"))?;
            if !gamma.is_finite() || gamma <= 0.0 {
                return Err("rbf gamma must be positive".into());
            }
            return Ok(Kernel::Rbf { gamma });
        }
        Err(format!("unknown kernel '{s}', expected cosine or rbf:<gamma>"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub sigma: Array2<f64>,
    pub kernel: Kernel,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_similarity(features: ArrayView2<'_, f64>, kernel: Kernel) -> SimilarityMatrix {
    let n = features.nrows();
    let mut sigma = Array2::zeros((n, n));
    let norms: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    for i in 0..n {
        for j in i..n {
            let (a, b) = (features.row(i), features.row(j));
            let s = match kernel {
                Kernel::CosineShifted => {
                    let cos = if norms[i] == 0.0 || norms[j] == 0.0 {
                        0.0
                    } else {
                        (a.dot(&b) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                    };
                    (1.0 + cos) / 2.0
                }
                Kernel::Rbf { gamma } => {
                    let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                    (-gamma * d2).exp()
                }
            };
            sigma[[i, j]] = s;
            sigma[[j, i]] = s;
        }
    }
    SimilarityMatrix { sigma, kernel }
}

/// A monotone submodular function whose marginal gains can be computed from a
/// memoised statistic of the current selection.
pub trait MemoizedObjective {
    type Memo: Clone;

    /// Ground elements in ascending order.
    fn ground(&self) -> &[usize];
    fn empty_memo(&self) -> Self::Memo;
    /// `f(S ∪ {e}) - f(S)` where `memo` summarises `S`; `e` is a ground position.
    fn gain(&self, pos: usize, memo: &Self::Memo) -> f64;
    fn commit(&self, pos: usize, memo: &mut Self::Memo);
    fn memo_value(&self, memo: &Self::Memo) -> f64;
    /// Direct evaluation of `f(S)`, `S` given as element indices.
    fn evaluate(&self, set: &[usize]) -> Result<f64, SelectError>;
}

/// Facility location over a ground set, optionally blocked by a partition
/// (the supervised variant).
#[derive(Debug, Clone)]
pub struct FacilityLocation<'a> {
    sigma: &'a Array2<f64>,
    ground: Vec<usize>,
    /// Block id per ground position; `None` means a single block.
    blocks: Option<Vec<usize>>,
}

impl<'a> FacilityLocation<'a> {
    pub fn unsupervised(sigma: &'a Array2<f64>, ground: &[usize]) -> Result<Self, SelectError> {
        let mut g = ground.to_vec();
        g.sort_unstable();
        g.dedup();
        if let Some(&bad) = g.iter().find(|&&i| i >= sigma.nrows()) {
            return Err(SelectError::IndexOutOfRange(bad, sigma.nrows()));
        }
        Ok(FacilityLocation {
            sigma,
            ground: g,
            blocks: None,
        })
    }

    /// `partition` lists the elements of each block; blocks must be disjoint
    /// and together cover the ground set.
    pub fn supervised(sigma: &'a Array2<f64>, partition: &[Vec<usize>]) -> Result<Self, SelectError> {
        let mut tagged: Vec<(usize, usize)> = partition
            .iter()
            .enumerate()
            .flat_map(|(b, members)| members.iter().map(move |&i| (i, b)))
            .collect();
        tagged.sort_unstable();
        if let Some(w) = tagged.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(SelectError::Partition(format!(
                "element {} appears in more than one block",
                w[0].0
            )));
        }
        if let Some(&(bad, _)) = tagged.iter().find(|(i, _)| *i >= sigma.nrows()) {
            return Err(SelectError::IndexOutOfRange(bad, sigma.nrows()));
        }
        Ok(FacilityLocation {
            sigma,
            ground: tagged.iter().map(|t| t.0).collect(),
            blocks: Some(tagged.iter().map(|t| t.1).collect()),
        })
    }

    fn same_block(&self, a: usize, b: usize) -> bool {
        self.blocks.as_ref().is_none_or(|bl| bl[a] == bl[b])
    }

    fn position(&self, element: usize) -> Result<usize, SelectError> {
        self.ground
            .binary_search(&element)
            .map_err(|_| SelectError::NotInGround(element))
    }
}

impl MemoizedObjective for FacilityLocation<'_> {
    /// Best similarity of every ground position to the selection (0 for none).
    type Memo = Vec<f64>;

    fn ground(&self) -> &[usize] {
        &self.ground
    }

    fn empty_memo(&self) -> Vec<f64> {
        vec![0.0; self.ground.len()]
    }

    fn gain(&self, pos: usize, memo: &Vec<f64>) -> f64 {
        let j = self.ground[pos];
        let mut total = 0.0;
        for (p, &i) in self.ground.iter().enumerate() {
            if self.same_block(p, pos) {
                let s = self.sigma[[i, j]];
                if s > memo[p] {
                    total += s - memo[p];
                }
            }
        }
        total
    }

    fn commit(&self, pos: usize, memo: &mut Vec<f64>) {
        let j = self.ground[pos];
        for (p, &i) in self.ground.iter().enumerate() {
            if self.same_block(p, pos) {
                memo[p] = memo[p].max(self.sigma[[i, j]]);
            }
        }
    }

    fn memo_value(&self, memo: &Vec<f64>) -> f64 {
        memo.iter().sum()
    }

    fn evaluate(&self, set: &[usize]) -> Result<f64, SelectError> {
        let positions = set
            .iter()
            .map(|&e| self.position(e))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self
            .ground
            .iter()
            .enumerate()
            .map(|(p, &i)| {
                positions
                    .iter()
                    .filter(|&&q| self.same_block(p, q))
                    .map(|&q| self.sigma[[i, self.ground[q]]])
                    .fold(0.0, f64::max)
            })
            .sum())
    }
}

/// `Σ_{i ∈ ground} max_{j ∈ S} σ_ij`, with the max over an empty set taken as 0.
pub fn f_unsup(sigma: &SimilarityMatrix, ground: &[usize], set: &[usize]) -> Result<f64, SelectError> {
    FacilityLocation::unsupervised(&sigma.sigma, ground)?.evaluate(set)
}

/// Facility location summed block-wise over a partition of the ground set.
pub fn f_sup(sigma: &SimilarityMatrix, partition: &[Vec<usize>], set: &[usize]) -> Result<f64, SelectError> {
    FacilityLocation::supervised(&sigma.sigma, partition)?.evaluate(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unsup,
    Sup,
    Random,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unsup" => Ok(Method::Unsup),
            "sup" => Ok(Method::Sup),
            "random" => Ok(Method::Random),
            other => Err(format!("unknown method '{other}', expected unsup, sup or random")),
        }
    }
}

/// Outcome of a greedy run, in ground-element indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyResult {
    pub chosen: Vec<usize>,
    /// `f(S_t)` after each addition.
    pub objective_trace: Vec<f64>,
    /// Number of marginal-gain evaluations performed.
    pub gain_evaluations: usize,
}

fn check_budget<O: MemoizedObjective>(obj: &O, k: usize) -> Result<usize, SelectError> {
    if k == 0 {
        return Err(SelectError::NonPositive("budget"));
    }
    if obj.ground().is_empty() {
        return Err(SelectError::EmptyGround);
    }
    Ok(k.min(obj.ground().len()))
}

/// Plain greedy: every round re-evaluates every remaining element and takes the
/// best gain, lowest index on ties.
pub fn naive_greedy<O: MemoizedObjective>(obj: &O, k: usize) -> Result<GreedyResult, SelectError> {
    let k = check_budget(obj, k)?;
    let n = obj.ground().len();
    let mut memo = obj.empty_memo();
    let mut taken = vec![false; n];
    let mut out = GreedyResult {
        chosen: Vec::with_capacity(k),
        objective_trace: Vec::with_capacity(k),
        gain_evaluations: 0,
    };
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for pos in (0..n).filter(|&p| !taken[p]) {
            let g = obj.gain(pos, &memo);
            out.gain_evaluations += 1;
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((pos, g));
            }
        }
        let (pos, _) = best.expect("k is clamped to the ground size");
        taken[pos] = true;
        obj.commit(pos, &mut memo);
        out.chosen.push(obj.ground()[pos]);
        out.objective_trace.push(obj.memo_value(&memo));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct HeapEntry {
    bound: f64,
    pos: usize,
    /// Round in which `bound` was computed.
    round: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    // Larger bound first, then lower position.
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then_with(|| other.pos.cmp(&self.pos))
    }
}

/// Lazy greedy: stale gains from earlier rounds upper-bound current gains, so an
/// element whose freshly computed gain still tops the queue can be taken without
/// re-evaluating the rest. Selects exactly what [`naive_greedy`] selects.
pub fn lazy_greedy<O: MemoizedObjective>(obj: &O, k: usize) -> Result<GreedyResult, SelectError> {
    let k = check_budget(obj, k)?;
    let n = obj.ground().len();
    let mut memo = obj.empty_memo();
    let mut out = GreedyResult {
        chosen: Vec::with_capacity(k),
        objective_trace: Vec::with_capacity(k),
        gain_evaluations: 0,
    };
    let mut heap: BinaryHeap<HeapEntry> = (0..n)
        .map(|pos| HeapEntry {
            bound: obj.gain(pos, &memo),
            pos,
            round: 0,
        })
        .collect();
    out.gain_evaluations += n;
    for round in 0..k {
        loop {
            let top = heap.pop().expect("k is clamped to the ground size");
            if top.round == round {
                obj.commit(top.pos, &mut memo);
                out.chosen.push(obj.ground()[top.pos]);
                out.objective_trace.push(obj.memo_value(&memo));
                break;
            }
            out.gain_evaluations += 1;
            heap.push(HeapEntry {
                bound: obj.gain(top.pos, &memo),
                pos: top.pos,
                round,
            });
        }
        // Entries left from this round are stale for the next one.
    }
    Ok(out)
}

/// Where prediction entropies come from.
#[derive(Debug, Clone, Copy)]
pub enum EntropySource<'a> {
    Classifier(&'a ClassifierParams),
    LfPosterior(&'a LfModelParams),
}

pub fn prediction_entropies(source: EntropySource<'_>, set: &InstanceSet) -> Result<Vec<f64>, SelectError> {
    (0..set.len())
        .map(|i| {
            Ok(entropy(&match source {
                EntropySource::Classifier(c) => c.forward(set.x(i))?,
                EntropySource::LfPosterior(lf) => lf.posterior(set.l(i)),
            }))
        })
        .collect()
}

/// Indices of the `count` largest entropies, highest first, lower index on ties.
pub fn top_entropy_indices(entropies: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..entropies.len()).collect();
    idx.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

pub fn entropy_filter(
    source: EntropySource<'_>,
    unlabelled: &InstanceSet,
    filter_factor: usize,
    budget: usize,
) -> Result<Vec<usize>, SelectError> {
    if filter_factor == 0 {
        return Err(SelectError::NonPositive("filter factor"));
    }
    if budget == 0 {
        return Err(SelectError::NonPositive("budget"));
    }
    if unlabelled.is_empty() {
        return Err(SelectError::EmptyUnlabelled);
    }
    let ent = prediction_entropies(source, unlabelled)?;
    Ok(top_entropy_indices(&ent, filter_factor.saturating_mul(budget)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: Method,
    pub budget: usize,
    pub filter_factor: usize,
    pub kernel: Kernel,
    /// Indices into the unlabelled split, in selection order.
    pub chosen: Vec<usize>,
    pub objective_trace: Vec<f64>,
    /// Prediction entropy of each chosen instance.
    pub chosen_entropies: Vec<f64>,
    pub candidates: usize,
    pub gain_evaluations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct SelectionParams {
    pub method: Method,
    pub budget: usize,
    pub filter_factor: usize,
    pub kernel: Kernel,
    pub seed: u64,
}

/// Picks `budget` unlabelled instances to label.
///
/// `lf_model` should come from unsupervised training on the LFs; it supplies
/// the hypothesised labels for the supervised objective and, when no classifier
/// is given, the entropies for filtering.
pub fn select_subset(
    bundle: &DataBundle,
    classifier: Option<&ClassifierParams>,
    lf_model: &LfModelParams,
    params: SelectionParams,
) -> Result<SelectionResult, SelectError> {
    let unl = &bundle.unlabelled;
    if unl.is_empty() {
        return Err(SelectError::EmptyUnlabelled);
    }
    if params.budget == 0 {
        return Err(SelectError::NonPositive("budget"));
    }
    let mut warnings = Vec::new();
    let budget = if params.budget > unl.len() {
        warnings.push(format!(
            "budget {} exceeds the {} unlabelled instances; clamped",
            params.budget,
            unl.len()
        ));
        unl.len()
    } else {
        params.budget
    };
    let source = classifier
        .map(EntropySource::Classifier)
        .unwrap_or(EntropySource::LfPosterior(lf_model));
    let entropies = prediction_entropies(source, unl)?;

    let (chosen, trace, candidates, evals) = match params.method {
        Method::Random => {
            let mut rng = stream(params.seed, Stream::Sampling);
            let picked = sample(&mut rng, unl.len(), budget).into_vec();
            (picked, Vec::new(), unl.len(), 0)
        }
        Method::Unsup | Method::Sup => {
            if params.filter_factor == 0 {
                return Err(SelectError::NonPositive("filter factor"));
            }
            let cand = top_entropy_indices(&entropies, params.filter_factor.saturating_mul(budget));
            let feats = unl.features.select(ndarray::Axis(0), &cand);
            let sim = build_similarity(feats.view(), params.kernel);
            let local: Vec<usize> = (0..cand.len()).collect();
            let result = if params.method == Method::Unsup {
                lazy_greedy(&FacilityLocation::unsupervised(&sim.sigma, &local)?, budget)?
            } else {
                let k = lf_model.num_classes();
                let mut blocks = vec![Vec::new(); k + 1];
                for (p, &i) in cand.iter().enumerate() {
                    let l = unl.l(i);
                    let b = if l.iter().all(|&v| v == 0) {
                        k
                    } else {
                        lf_model.predict_g(l)
                    };
                    blocks[b].push(p);
                }
                lazy_greedy(&FacilityLocation::supervised(&sim.sigma, &blocks)?, budget)?
            };
            let chosen = result.chosen.iter().map(|&p| cand[p]).collect();
            (chosen, result.objective_trace, cand.len(), result.gain_evaluations)
        }
    };
    Ok(SelectionResult {
        method: params.method,
        budget,
        filter_factor: params.filter_factor,
        kernel: params.kernel,
        chosen_entropies: chosen.iter().map(|&i: &usize| entropies[i]).collect(),
        chosen,
        objective_trace: trace,
        candidates,
        gain_evaluations: evals,
        warnings,
    })
}
