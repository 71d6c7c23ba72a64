//! Joint objective over the LF model (θ) and the classifier (φ).
//!
//! The objective is an unweighted sum of up to seven terms:
//!
//! | term | parameters | split | value |
//! |------|------------|-------|-------|
//! | L1 | φ | labelled | cross-entropy against gold labels |
//! | L2 | φ | unlabelled | prediction entropy |
//! | L3 | φ | unlabelled | cross-entropy against the LF consensus `g(l)` |
//! | L4 | θ | labelled | `-log P_θ(l, y)` |
//! | L5 | θ | unlabelled | `-log Σ_y P_θ(l, y)` |
//! | L6 | φ, θ | both | `KL(P_φ(·|x) ‖ P_θ(·|l))` |
//! | QG | θ | – | cross-entropy of target vs. implied LF precision |
//!
//! Both parameter sets are updated simultaneously from gradients taken at the
//! same point, each with its own Adam state and learning rate.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    adam_step, grad_classifier_losses, AdamState, Architecture, ClassifierError, ClassifierParams,
    Dropout, PhiBatch,
};
use crate::dataset::{DataBundle, DataError, InstanceSet};
use crate::eval::{EvalError, Metric};
use crate::lfmodel::{LfModelError, LfModelParams};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    L1,
    L2,
    L3,
    L4,
    L5,
    L6,
    QG,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::L1,
        LossTerm::L2,
        LossTerm::L3,
        LossTerm::L4,
        LossTerm::L5,
        LossTerm::L6,
        LossTerm::QG,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn trains_classifier(self) -> bool {
        matches!(self, LossTerm::L1 | LossTerm::L2 | LossTerm::L3 | LossTerm::L6)
    }

    pub fn trains_lf_model(self) -> bool {
        matches!(self, LossTerm::L4 | LossTerm::L5 | LossTerm::L6 | LossTerm::QG)
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for LossTerm {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| TrainError::InvalidCombo(format!("unknown loss term '{s}'")))
    }
}

/// A set of active loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LossCombo(u8);

impl LossCombo {
    pub fn new(terms: &[LossTerm]) -> Self {
        LossCombo(terms.iter().fold(0, |acc, t| acc | t.bit()))
    }

    pub fn contains(&self, t: LossTerm) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn with(self, t: LossTerm) -> Self {
        LossCombo(self.0 | t.bit())
    }

    pub fn terms(&self) -> impl Iterator<Item = LossTerm> + '_ {
        LossTerm::ALL.into_iter().filter(|t| self.contains(*t))
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// Number of terms other than QG.
    pub fn core_len(&self) -> usize {
        self.terms().filter(|t| *t != LossTerm::QG).count()
    }

    pub fn trains_classifier(&self) -> bool {
        self.terms().any(LossTerm::trains_classifier)
    }

    pub fn trains_lf_model(&self) -> bool {
        self.terms().any(LossTerm::trains_lf_model)
    }

    pub fn uses_unlabelled(&self) -> bool {
        [LossTerm::L2, LossTerm::L3, LossTerm::L5, LossTerm::L6]
            .iter()
            .any(|t| self.contains(*t))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.is_empty() {
            return Err(TrainError::InvalidCombo("no loss terms selected".into()));
        }
        if self.contains(LossTerm::QG) && !self.contains(LossTerm::L5) {
            return Err(TrainError::InvalidCombo(
                "QG is only used together with L5".into(),
            ));
        }
        Ok(())
    }

    /// Every combination of L1..L6 with at least `min_terms` terms, optionally with QG added.
    pub fn all_with_at_least(min_terms: usize, with_qg: bool) -> Vec<LossCombo> {
        let core = &LossTerm::ALL[..6];
        let mut out = Vec::new();
        for mask in 1u8..(1 << 6) {
            if (mask.count_ones() as usize) < min_terms {
                continue;
            }
            let mut c = LossCombo::new(
                &core
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, t)| *t)
                    .collect::<Vec<_>>(),
            );
            if with_qg && c.contains(LossTerm::L5) {
                c = c.with(LossTerm::QG);
            }
            if c.validate().is_ok() {
                out.push(c);
            }
        }
        out
    }
}

impl fmt::Display for LossCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.terms().map(|t| t.to_string()).collect();
        write!(f, "{}", names.join("+"))
    }
}

impl FromStr for LossCombo {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let terms = s
            .split([',', '+'])
            .filter(|p| !p.trim().is_empty())
            .map(LossTerm::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        let combo = LossCombo::new(&terms);
        combo.validate()?;
        Ok(combo)
    }
}

impl Serialize for LossCombo {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LossCombo {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid loss combination: {0}")]
    InvalidCombo(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss term {term} needs a non-empty {split} split")]
    EmptySplit { term: LossTerm, split: &'static str },
    #[error("QG requires quality guides in the bundle")]
    MissingQualityGuides,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    LfModel(#[from] LfModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub lr_f: f64,
    pub lr_g: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub combo: LossCombo,
    pub metric: Metric,
    /// Probability of keeping a hidden unit; `None` disables dropout.
    pub dropout_keep: Option<f64>,
}

impl TrainConfig {
    pub fn new(combo: LossCombo) -> Self {
        TrainConfig {
            architecture: Architecture::LogReg,
            lr_f: 0.0003,
            lr_g: 0.001,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            combo,
            metric: Metric::Accuracy,
            dropout_keep: Some(0.8),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.combo.validate()?;
        if !(self.lr_f > 0.0 && self.lr_g > 0.0) {
            return Err(TrainError::InvalidConfig("learning rates must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        if let Some(k) = self.dropout_keep {
            if !(k > 0.0 && k <= 1.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "dropout keep probability {k} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term values of the objective.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: BTreeMap<LossTerm, f64>,
    pub total: f64,
}

/// Evaluates the active terms on the full labelled and unlabelled splits
/// (no dropout).
pub fn total_loss(
    classifier: &ClassifierParams,
    lf: &LfModelParams,
    bundle: &DataBundle,
    combo: &LossCombo,
) -> Result<LossBreakdown, TrainError> {
    combo.validate()?;
    let mut terms = BTreeMap::new();
    let phi = combo.trains_classifier();
    if phi {
        let only = |t: LossTerm| LossCombo::new(&[t]);
        let batch = PhiBatch {
            labelled: &bundle.labelled,
            unlabelled: &bundle.unlabelled,
        };
        for t in [LossTerm::L1, LossTerm::L2, LossTerm::L3, LossTerm::L6] {
            if combo.contains(t) {
                let (v, _) = grad_classifier_losses::<rand_chacha::ChaCha8Rng>(
                    classifier,
                    batch,
                    &only(t),
                    lf,
                    None,
                )?;
                let value = match t {
                    LossTerm::L1 => v.l1,
                    LossTerm::L2 => v.l2,
                    LossTerm::L3 => v.l3,
                    _ => v.l6,
                };
                terms.insert(t, value);
            }
        }
    }
    if combo.contains(LossTerm::L4) {
        terms.insert(LossTerm::L4, lf.ll_s(&bundle.labelled)?);
    }
    if combo.contains(LossTerm::L5) {
        terms.insert(LossTerm::L5, lf.ll_u(&bundle.unlabelled));
    }
    if combo.contains(LossTerm::QG) {
        terms.insert(LossTerm::QG, lf.qg_loss()?);
    }
    let total = terms.values().sum();
    Ok(LossBreakdown { terms, total })
}

/// Gradient w.r.t. θ of the active LF-side terms.
///
/// `labelled` feeds L4, `unlabelled` feeds L5, both feed L6 whose targets
/// `classifier_probs` (one row per labelled then unlabelled instance) are constants.
pub fn grad_lf_losses(
    lf: &LfModelParams,
    labelled: &InstanceSet,
    unlabelled: &InstanceSet,
    classifier_probs: Option<&[Vec<f64>]>,
    combo: &LossCombo,
) -> Result<Array2<f64>, TrainError> {
    let mut grad = Array2::zeros(lf.theta.raw_dim());
    if combo.contains(LossTerm::L4) {
        lf.add_ll_s_grad(labelled, &mut grad)?;
    }
    if combo.contains(LossTerm::L5) {
        lf.add_ll_u_grad(unlabelled, &mut grad);
    }
    if combo.contains(LossTerm::L6) {
        let probs = classifier_probs.ok_or_else(|| {
            TrainError::InvalidConfig("L6 needs classifier predictions".into())
        })?;
        let (nl, _) = (labelled.len(), unlabelled.len());
        lf.add_kl_grad(labelled, &probs[..nl], &mut grad);
        lf.add_kl_grad(unlabelled, &probs[nl..], &mut grad);
    }
    if combo.contains(LossTerm::QG) {
        lf.add_qg_grad(&mut grad)?;
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub validation_metric: f64,
}

/// Which model produces the final predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Classifier,
    LfModel,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub classifier: ClassifierParams,
    pub lf_model: LfModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub predictor: Predictor,
    pub config: TrainConfig,
}

impl TrainedModel {
    pub fn predict(&self, set: &InstanceSet) -> Result<Vec<usize>, TrainError> {
        predict_with(self.predictor, &self.classifier, &self.lf_model, set)
    }

    pub fn best_validation(&self) -> f64 {
        self.history[self.best_epoch].validation_metric
    }

    pub fn score(&self, set: &InstanceSet, num_classes: usize) -> Result<f64, TrainError> {
        let gold = set
            .labels()
            .ok_or(DataError::MissingLabels { split: "evaluation" })?;
        Ok(self.config.metric.score(&self.predict(set)?, gold, num_classes)?.value)
    }
}

fn predict_with(
    predictor: Predictor,
    classifier: &ClassifierParams,
    lf: &LfModelParams,
    set: &InstanceSet,
) -> Result<Vec<usize>, TrainError> {
    Ok(match predictor {
        Predictor::Classifier => classifier.predict_set(set)?,
        Predictor::LfModel => lf.predict_set(set),
    })
}

fn check_splits(bundle: &DataBundle, config: &TrainConfig) -> Result<(), TrainError> {
    bundle.require_trainable()?;
    for t in config.combo.terms() {
        let needs_unlabelled = matches!(t, LossTerm::L2 | LossTerm::L3 | LossTerm::L5);
        if needs_unlabelled && bundle.unlabelled.is_empty() {
            return Err(TrainError::EmptySplit {
                term: t,
                split: "unlabelled",
            });
        }
    }
    if config.combo.contains(LossTerm::QG) && bundle.quality_guides.is_none() {
        return Err(TrainError::MissingQualityGuides);
    }
    Ok(())
}

/// Trains θ and φ jointly and returns the parameters of the epoch with the best
/// validation metric (earliest on ties).
///
/// When any unlabelled term is active, an epoch is one shuffled pass over the
/// unlabelled split in mini-batches, and each step also sees the full labelled
/// split. Otherwise an epoch is a shuffled mini-batch pass over the labelled split.
pub fn train(bundle: &DataBundle, config: &TrainConfig) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    check_splits(bundle, config)?;
    let combo = config.combo;
    let (dim, k) = (bundle.dim(), bundle.num_classes);

    let mut init_rng = stream(config.seed, Stream::Init);
    let mut shuffle_rng = stream(config.seed, Stream::Shuffle);
    let mut dropout_rng = stream(config.seed, Stream::Dropout);

    let mut phi = ClassifierParams::init(config.architecture, dim, k, &mut init_rng);
    let mut lf = LfModelParams::zeros(bundle.num_lfs, k, bundle.lf_classes.clone())
        .with_quality_targets(bundle.quality_guides.clone());
    let mut adam_f = AdamState::new(&phi, config.lr_f);
    let mut adam_g = AdamState::new(&lf.theta, config.lr_g);

    let train_phi = combo.trains_classifier();
    let train_theta = combo.trains_lf_model();
    let predictor = if train_phi {
        Predictor::Classifier
    } else {
        Predictor::LfModel
    };
    let drive_unlabelled = combo.uses_unlabelled() && !bundle.unlabelled.is_empty();
    let gold_val = bundle
        .validation
        .labels()
        .ok_or(DataError::MissingLabels { split: "validation" })?;

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ClassifierParams, LfModelParams)> = None;
    let empty_u = InstanceSet::empty(dim, bundle.num_lfs, false);

    for epoch in 0..config.epochs {
        let driver_len = if drive_unlabelled {
            bundle.unlabelled.len()
        } else {
            bundle.labelled.len()
        };
        let mut order: Vec<usize> = (0..driver_len).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let (lab_batch, unl_batch) = if drive_unlabelled {
                (bundle.labelled.clone(), bundle.unlabelled.select(chunk))
            } else {
                (bundle.labelled.select(chunk), empty_u.clone())
            };
            let phi_grads = if train_phi {
                let mut dropout = config.dropout_keep.filter(|&p| p < 1.0).map(|keep_prob| Dropout {
                    keep_prob,
                    rng: &mut dropout_rng,
                });
                let (_, g) = grad_classifier_losses(
                    &phi,
                    PhiBatch {
                        labelled: &lab_batch,
                        unlabelled: &unl_batch,
                    },
                    &combo,
                    &lf,
                    dropout.as_mut(),
                )?;
                Some(g)
            } else {
                None
            };
            let theta_grad = if train_theta {
                let probs = if combo.contains(LossTerm::L6) {
                    let mut p = phi.probs_set(&lab_batch)?;
                    p.extend(phi.probs_set(&unl_batch)?);
                    Some(p)
                } else {
                    None
                };
                Some(grad_lf_losses(
                    &lf,
                    &lab_batch,
                    &unl_batch,
                    probs.as_deref(),
                    &combo,
                )?)
            } else {
                None
            };
            if let Some(g) = phi_grads {
                adam_step(&mut phi, &mut adam_f, &g)?;
            }
            if let Some(g) = theta_grad {
                adam_step(&mut lf.theta, &mut adam_g, &g)?;
            }
        }

        let preds = predict_with(predictor, &phi, &lf, &bundle.validation)?;
        let val = config.metric.score(&preds, gold_val, k)?.value;
        let losses = total_loss(&phi, &lf, bundle, &combo)?;
        history.push(EpochRecord {
            epoch,
            losses,
            validation_metric: val,
        });
        if best.as_ref().is_none_or(|b| val > b.1) {
            best = Some((epoch, val, phi.clone(), lf.clone()));
        }
    }

    let (best_epoch, _, classifier, lf_model) = best.expect("at least one epoch");
    Ok(TrainedModel {
        classifier,
        lf_model,
        history,
        best_epoch,
        predictor,
        config: config.clone(),
    })
}

/// Fits θ on the unlabelled split alone (L5, plus QG when quality guides exist).
/// Used to hypothesise labels for supervised facility location.
pub fn fit_lf_unsupervised(
    bundle: &DataBundle,
    lr_g: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<LfModelParams, TrainError> {
    if bundle.unlabelled.is_empty() {
        return Err(TrainError::EmptySplit {
            term: LossTerm::L5,
            split: "unlabelled",
        });
    }
    let mut combo = LossCombo::new(&[LossTerm::L5]);
    if bundle.quality_guides.is_some() {
        combo = combo.with(LossTerm::QG);
    }
    let mut lf = LfModelParams::zeros(bundle.num_lfs, bundle.num_classes, bundle.lf_classes.clone())
        .with_quality_targets(bundle.quality_guides.clone());
    let mut adam = AdamState::new(&lf.theta, lr_g);
    let mut rng = stream(seed, Stream::Shuffle);
    let empty = InstanceSet::empty(bundle.dim(), bundle.num_lfs, true);
    let mut order: Vec<usize> = (0..bundle.unlabelled.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let batch = bundle.unlabelled.select(chunk);
            let g = grad_lf_losses(&lf, &empty, &batch, None, &combo)?;
            adam_step(&mut lf.theta, &mut adam, &g)?;
        }
    }
    Ok(lf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub combo: LossCombo,
    pub validation: f64,
    pub test: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Sorted by validation metric, best first; ties keep input order.
    pub ranked: Vec<GridEntry>,
}

impl GridResult {
    pub fn best(&self) -> &GridEntry {
        &self.ranked[0]
    }
}

/// Trains each combination with the same config and seed, ranking by validation metric.
/// Combinations with fewer than three non-QG terms are rejected unless `allow_small`.
pub fn grid_search(
    bundle: &DataBundle,
    combos: &[LossCombo],
    config: &TrainConfig,
    allow_small: bool,
) -> Result<GridResult, TrainError> {
    if combos.is_empty() {
        return Err(TrainError::InvalidCombo("empty combination list".into()));
    }
    for c in combos {
        c.validate()?;
        if !allow_small && c.core_len() < 3 {
            return Err(TrainError::InvalidCombo(format!(
                "{c} has fewer than 3 loss terms"
            )));
        }
    }
    let entries = combos
        .par_iter()
        .map(|&combo| {
            let cfg = TrainConfig {
                combo,
                ..config.clone()
            };
            let model = train(bundle, &cfg)?;
            Ok(GridEntry {
                combo,
                validation: model.best_validation(),
                test: model.score(&bundle.test, bundle.num_classes)?,
                best_epoch: model.best_epoch,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut ranked = entries;
    ranked.sort_by(|a, b| b.validation.total_cmp(&a.validation));
    Ok(GridResult { ranked })
}
