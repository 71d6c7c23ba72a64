//! Feature classifier: logistic regression or a two-hidden-layer ReLU network,
//! with hand-written backpropagation and an Adam optimiser.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InstanceSet;
use crate::joint::{LossCombo, LossTerm};
use crate::lfmodel::LfModelParams;
use crate::numeric::{argmax, log_softmax, softmax};

/// Floor applied to probabilities before taking logs in the loss functions.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("input has dimension {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("parameter shapes do not match: {0}")]
    Shape(String),
    #[error("unsupported architecture in checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[serde(rename = "logreg")]
    LogReg,
    Mlp { hidden_units: usize },
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "logreg" {
            return Ok(Architecture::LogReg);
        }
        if let Some(h) = s.strip_prefix("mlp:") {
            let hidden_units = h.parse().map_err(|_| format!("bad hidden width '{h}'"))?;
            if hidden_units == 0 {
                return Err("hidden width must be positive".into());
            }
            return Ok(Architecture::Mlp { hidden_units });
        }
        Err(format!("unknown architecture '{s}', expected logreg or mlp:<units>"))
    }
}

/// One affine layer; `w` is `inputs × outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub architecture: Architecture,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifierCheckpoint {
    pub architecture: Architecture,
    pub layers: Vec<LayerCheckpoint>,
}

/// Dropout on hidden activations. `keep_prob` is the probability of keeping a unit.
pub struct Dropout<'a, R: Rng> {
    pub keep_prob: f64,
    pub rng: &'a mut R,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (post-activation, post-dropout for hidden layers).
    inputs: Vec<Array1<f64>>,
    /// Derivative of each hidden activation w.r.t. its pre-activation,
    /// folded together with the dropout mask and its inverse scaling.
    hidden_gates: Vec<Array1<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn layer_sizes(arch: Architecture, dim: usize, classes: usize) -> Vec<(usize, usize)> {
    match arch {
        Architecture::LogReg => vec![(dim, classes)],
        Architecture::Mlp { hidden_units: h } => vec![(dim, h), (h, h), (h, classes)],
    }
}

impl ClassifierParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(arch: Architecture, dim: usize, classes: usize, rng: &mut R) -> Self {
        let layers = layer_sizes(arch, dim, classes)
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    w: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                        rng.random_range(-limit..=limit)
                    }),
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        ClassifierParams {
            architecture: arch,
            layers,
        }
    }

    pub fn zeros(arch: Architecture, dim: usize, classes: usize) -> Self {
        let layers = layer_sizes(arch, dim, classes)
            .into_iter()
            .map(|(i, o)| Layer {
                w: Array2::zeros((i, o)),
                b: Array1::zeros(o),
            })
            .collect();
        ClassifierParams {
            architecture: arch,
            layers,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ClassifierParams {
            architecture: self.architecture,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").w.ncols()
    }

    pub fn forward_cached<R: Rng>(
        &self,
        x: ArrayView1<'_, f64>,
        mut dropout: Option<&mut Dropout<'_, R>>,
    ) -> Result<ForwardCache, ClassifierError> {
        if x.len() != self.input_dim() {
            return Err(ClassifierError::Dimension {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_gates = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.w) + &layer.b;
            inputs.push(h);
            if i == last {
                let logits = z.to_vec();
                let probs = softmax(&logits);
                return Ok(ForwardCache {
                    inputs,
                    hidden_gates,
                    logits,
                    probs,
                });
            }
            let mut gate = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            if let Some(d) = dropout.as_deref_mut() {
                for g in gate.iter_mut() {
                    let keep = d.rng.random::<f64>() < d.keep_prob;
                    *g = if keep { *g / d.keep_prob } else { 0.0 };
                }
            }
            h = &z * &gate;
            hidden_gates.push(gate);
        }
        unreachable!("loop returns at the output layer")
    }

    /// Class probabilities without dropout.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Vec<f64>, ClassifierError> {
        Ok(self.forward_cached::<rand_chacha::ChaCha8Rng>(x, None)?.probs)
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> Result<usize, ClassifierError> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn predict_set(&self, set: &InstanceSet) -> Result<Vec<usize>, ClassifierError> {
        (0..set.len()).map(|i| self.predict(set.x(i))).collect()
    }

    pub fn probs_set(&self, set: &InstanceSet) -> Result<Vec<Vec<f64>>, ClassifierError> {
        (0..set.len()).map(|i| self.forward(set.x(i))).collect()
    }

    /// Accumulates into `grads` the parameter gradient given `∂loss/∂logits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grads: &mut ClassifierParams) {
        let mut delta = Array1::from(dlogits.to_vec());
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            let g = &mut grads.layers[i];
            for (r, &a) in input.iter().enumerate() {
                if a != 0.0 {
                    g.w.row_mut(r).scaled_add(a, &delta);
                }
            }
            g.b += &delta;
            if i > 0 {
                let back = self.layers[i].w.dot(&delta);
                delta = back * &cache.hidden_gates[i - 1];
            }
        }
    }

    pub fn to_checkpoint(&self) -> ClassifierCheckpoint {
        ClassifierCheckpoint {
            architecture: self.architecture,
            layers: self
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    w: l.w.rows().into_iter().map(|r| r.to_vec()).collect(),
                    b: l.b.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &ClassifierCheckpoint) -> Result<Self, ClassifierError> {
        let mut layers = Vec::new();
        for (i, l) in ck.layers.iter().enumerate() {
            let rows = l.w.len();
            let cols = l.w.first().map_or(0, Vec::len);
            let flat: Vec<f64> = l.w.iter().flatten().copied().collect();
            let w = Array2::from_shape_vec((rows, cols), flat)
                .map_err(|e| ClassifierError::Checkpoint(format!("layer {i}: {e}")))?;
            if l.b.len() != cols {
                return Err(ClassifierError::Checkpoint(format!(
                    "layer {i}: bias has {} entries, expected {cols}",
                    l.b.len()
                )));
            }
            layers.push(Layer {
                w,
                b: Array1::from(l.b.clone()),
            });
        }
        let expected = match ck.architecture {
            Architecture::LogReg => 1,
            Architecture::Mlp { .. } => 3,
        };
        if layers.len() != expected || layers.windows(2).any(|p| p[0].w.ncols() != p[1].w.nrows()) {
            return Err(ClassifierError::Checkpoint("layer shapes do not chain".into()));
        }
        Ok(ClassifierParams {
            architecture: ck.architecture,
            layers,
        })
    }
}

// ---------------------------------------------------------------------------
// Losses on probability vectors and their gradients w.r.t. logits

pub fn cross_entropy(pred: &[f64], y: usize) -> f64 {
    -pred[y].max(PROB_FLOOR).ln()
}

pub fn entropy(pred: &[f64]) -> f64 {
    -pred
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `KL(p ‖ q)`, with `q` floored at [`PROB_FLOOR`].
pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

/// `∂ CE(softmax(z), y) / ∂z = softmax(z) - e_y`.
pub fn cross_entropy_logit_grad(probs: &[f64], y: usize, out: &mut [f64]) {
    for (k, (o, &p)) in out.iter_mut().zip(probs).enumerate() {
        *o += p - if k == y { 1.0 } else { 0.0 };
    }
}

/// `∂ H(softmax(z)) / ∂z_k = -p_k (log p_k + H)`.
pub fn entropy_logit_grad(logits: &[f64], out: &mut [f64]) {
    let logp = log_softmax(logits);
    let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    let h = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
    for (k, o) in out.iter_mut().enumerate() {
        *o += -p[k] * (logp[k] + h);
    }
}

/// `∂ KL(softmax(z) ‖ q) / ∂z` with `q` held fixed.
pub fn kl_logit_grad(logits: &[f64], q: &[f64], out: &mut [f64]) {
    let logp = log_softmax(logits);
    let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    // s_k = log p_k - log q_k; gradient is p_k (s_k - E_p[s])
    let s: Vec<f64> = logp
        .iter()
        .zip(q)
        .map(|(&lp, &qk)| lp - qk.max(PROB_FLOOR).ln())
        .collect();
    let mean: f64 = p.iter().zip(&s).map(|(a, b)| a * b).sum();
    for (k, o) in out.iter_mut().enumerate() {
        *o += p[k] * (s[k] - mean);
    }
}

/// Values of the classifier-side loss terms over one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhiLosses {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l6: f64,
}

/// Instances feeding the classifier-side terms: L1 uses `labelled`, L2 and L3
/// use `unlabelled`, L6 uses both.
#[derive(Debug, Clone, Copy)]
pub struct PhiBatch<'a> {
    pub labelled: &'a InstanceSet,
    pub unlabelled: &'a InstanceSet,
}

/// Value and gradient w.r.t. φ of the active classifier-side terms.
///
/// L3 targets `g(l)` and L6 targets `P_θ(y|l)` come from `lf` and are constants
/// here. Each instance is passed forward once, so all terms on that instance
/// share a dropout mask.
pub fn grad_classifier_losses<R: Rng>(
    params: &ClassifierParams,
    batch: PhiBatch<'_>,
    combo: &LossCombo,
    lf: &LfModelParams,
    mut dropout: Option<&mut Dropout<'_, R>>,
) -> Result<(PhiLosses, ClassifierParams), ClassifierError> {
    let mut losses = PhiLosses::default();
    let mut grads = params.zeros_like();
    let k = params.num_classes();
    let mut dz = vec![0.0; k];

    let use_l1 = combo.contains(LossTerm::L1);
    let use_l6 = combo.contains(LossTerm::L6);
    if use_l1 || use_l6 {
        let ys = batch.labelled.labels();
        for i in 0..batch.labelled.len() {
            let cache = params.forward_cached(batch.labelled.x(i), dropout.as_deref_mut())?;
            dz.iter_mut().for_each(|v| *v = 0.0);
            if use_l1 {
                let y = ys.expect("labelled split carries labels")[i];
                losses.l1 += cross_entropy(&cache.probs, y);
                cross_entropy_logit_grad(&cache.probs, y, &mut dz);
            }
            if use_l6 {
                let q = lf.posterior(batch.labelled.l(i));
                losses.l6 += kl_div(&cache.probs, &q);
                kl_logit_grad(&cache.logits, &q, &mut dz);
            }
            params.backward(&cache, &dz, &mut grads);
        }
    }

    let use_l2 = combo.contains(LossTerm::L2);
    let use_l3 = combo.contains(LossTerm::L3);
    if use_l2 || use_l3 || use_l6 {
        for i in 0..batch.unlabelled.len() {
            let cache = params.forward_cached(batch.unlabelled.x(i), dropout.as_deref_mut())?;
            dz.iter_mut().for_each(|v| *v = 0.0);
            let l = batch.unlabelled.l(i);
            if use_l2 {
                losses.l2 += entropy(&cache.probs);
                entropy_logit_grad(&cache.logits, &mut dz);
            }
            if use_l3 {
                let g = lf.predict_g(l);
                losses.l3 += cross_entropy(&cache.probs, g);
                cross_entropy_logit_grad(&cache.probs, g, &mut dz);
            }
            if use_l6 {
                let q = lf.posterior(l);
                losses.l6 += kl_div(&cache.probs, &q);
                kl_logit_grad(&cache.logits, &q, &mut dz);
            }
            params.backward(&cache, &dz, &mut grads);
        }
    }
    Ok((losses, grads))
}

// ---------------------------------------------------------------------------
// Adam

/// Flat views over the trainable tensors of a parameter container.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Parameters for ClassifierParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.w.as_slice().expect("standard layout"),
                    l.b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

impl Parameters for Array2<f64> {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.as_slice().expect("standard layout")]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_slice_mut().expect("standard layout")]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P, lr: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    state: &mut AdamState,
    grads: &P,
) -> Result<(), ClassifierError> {
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    let matches = params.len() == state.m.len()
        && grads.len() == state.m.len()
        && params
            .iter()
            .zip(&grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == m.len() && g.len() == m.len());
    if !matches {
        return Err(ClassifierError::Shape(
            "parameters, gradients and moments differ".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
