//! Generative model over LF firings and labels.
//!
//! For an instance with firing vector `l ∈ {0,1}^m` and label `y`,
//!
//! ```text
//! P(l, y) = (1/Z) Π_j ψ_j(l_j, y),   ψ_j(1, y) = exp(θ_jy),   ψ_j(0, y) = 1
//! ```
//!
//! LFs are conditionally independent given `y`, so the partition function
//! factorises: `Z = Σ_y Π_j (1 + exp(θ_jy))`. Everything here is evaluated in
//! log space.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InstanceSet;
use crate::numeric::{argmax, log_sum_exp, sigmoid, softmax, softplus};

/// Quality targets are clamped into `[QG_EPS, 1 - QG_EPS]` before taking logs.
pub const QG_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LfModelError {
    #[error("lf index {0} out of range (m = {1})")]
    LfIndex(usize, usize),
    #[error("class {0} out of range (K = {1})")]
    Class(usize, usize),
    #[error("firing vector has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("labels are required")]
    MissingLabels,
    #[error("quality targets are required for the quality-guide loss")]
    MissingQualityTargets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LfModelParams {
    /// m × K potentials.
    pub theta: Array2<f64>,
    pub lf_classes: Vec<usize>,
    pub quality_targets: Option<Vec<f64>>,
}

/// JSON checkpoint layout.
#[derive(Debug, Serialize, Deserialize)]
pub struct LfCheckpoint {
    pub theta: Vec<Vec<f64>>,
    pub lf_classes: Vec<usize>,
    pub quality_targets: Option<Vec<f64>>,
}

impl LfModelParams {
    /// All-zero potentials, which give uniform posteriors.
    pub fn zeros(num_lfs: usize, num_classes: usize, lf_classes: Vec<usize>) -> Self {
        LfModelParams {
            theta: Array2::zeros((num_lfs, num_classes)),
            lf_classes,
            quality_targets: None,
        }
    }

    pub fn with_quality_targets(mut self, q: Option<Vec<f64>>) -> Self {
        self.quality_targets = q;
        self
    }

    pub fn num_lfs(&self) -> usize {
        self.theta.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.theta.ncols()
    }

    pub fn to_checkpoint(&self) -> LfCheckpoint {
        LfCheckpoint {
            theta: self.theta.rows().into_iter().map(|r| r.to_vec()).collect(),
            lf_classes: self.lf_classes.clone(),
            quality_targets: self.quality_targets.clone(),
        }
    }

    pub fn from_checkpoint(ck: &LfCheckpoint) -> Result<Self, LfModelError> {
        let m = ck.theta.len();
        let k = ck.theta.first().map_or(0, Vec::len);
        let mut theta = Array2::zeros((m, k));
        for (j, row) in ck.theta.iter().enumerate() {
            if row.len() != k {
                return Err(LfModelError::Dimension {
                    expected: k,
                    found: row.len(),
                });
            }
            for (y, &v) in row.iter().enumerate() {
                theta[[j, y]] = v;
            }
        }
        Ok(LfModelParams {
            theta,
            lf_classes: ck.lf_classes.clone(),
            quality_targets: ck.quality_targets.clone(),
        })
    }

    fn check_firing(&self, l: ArrayView1<'_, u8>) -> Result<(), LfModelError> {
        if l.len() != self.num_lfs() {
            return Err(LfModelError::Dimension {
                expected: self.num_lfs(),
                found: l.len(),
            });
        }
        Ok(())
    }

    /// `log ψ_j(l, y)`: θ_jy when the LF fires, 0 when it abstains.
    pub fn log_potential(&self, j: usize, l: u8, y: usize) -> Result<f64, LfModelError> {
        if j >= self.num_lfs() {
            return Err(LfModelError::LfIndex(j, self.num_lfs()));
        }
        if y >= self.num_classes() {
            return Err(LfModelError::Class(y, self.num_classes()));
        }
        Ok(if l != 0 { self.theta[[j, y]] } else { 0.0 })
    }

    /// Per-class `Σ_j softplus(θ_jy)`, i.e. `log Π_j (1 + exp θ_jy)`.
    fn class_log_masses(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|y| self.theta.column(y).iter().map(|&t| softplus(t)).sum())
            .collect()
    }

    pub fn log_partition(&self) -> f64 {
        log_sum_exp(&self.class_log_masses())
    }

    /// Unnormalised per-class scores `Σ_j l_j θ_jy`.
    fn scores(&self, l: ArrayView1<'_, u8>) -> Vec<f64> {
        (0..self.num_classes())
            .map(|y| {
                l.iter()
                    .zip(self.theta.column(y))
                    .filter(|(&lj, _)| lj != 0)
                    .map(|(_, &t)| t)
                    .sum()
            })
            .collect()
    }

    pub fn log_joint(&self, l: ArrayView1<'_, u8>, y: usize) -> Result<f64, LfModelError> {
        self.check_firing(l)?;
        if y >= self.num_classes() {
            return Err(LfModelError::Class(y, self.num_classes()));
        }
        Ok(self.scores(l)[y] - self.log_partition())
    }

    /// `P(y | l)` for every class.
    pub fn posterior(&self, l: ArrayView1<'_, u8>) -> Vec<f64> {
        softmax(&self.scores(l))
    }

    /// Consensus label: argmax of the joint, lowest class on ties.
    pub fn predict_g(&self, l: ArrayView1<'_, u8>) -> usize {
        argmax(&self.scores(l))
    }

    pub fn predict_set(&self, set: &InstanceSet) -> Vec<usize> {
        (0..set.len()).map(|i| self.predict_g(set.l(i))).collect()
    }

    /// Supervised negative log likelihood `-Σ_i log P(l_i, y_i)`.
    pub fn ll_s(&self, set: &InstanceSet) -> Result<f64, LfModelError> {
        let ys = set.labels().ok_or(LfModelError::MissingLabels)?;
        let log_z = self.log_partition();
        Ok((0..set.len())
            .map(|i| log_z - self.scores(set.l(i))[ys[i]])
            .sum())
    }

    /// Unsupervised negative log likelihood `-Σ_i log Σ_y P(l_i, y)`.
    pub fn ll_u(&self, set: &InstanceSet) -> f64 {
        let log_z = self.log_partition();
        (0..set.len())
            .map(|i| log_z - log_sum_exp(&self.scores(set.l(i))))
            .sum()
    }

    /// Log numerators of `P(y | l_j = 1)` with every other LF marginalised out.
    fn precision_logits(&self, j: usize, masses: &[f64]) -> Vec<f64> {
        (0..self.num_classes())
            .map(|y| {
                let t = self.theta[[j, y]];
                t + masses[y] - softplus(t)
            })
            .collect()
    }

    /// `P(y = k_j | l_j = 1)`, the precision the model implies for LF `j`.
    pub fn model_precision(&self, j: usize) -> Result<f64, LfModelError> {
        if j >= self.num_lfs() {
            return Err(LfModelError::LfIndex(j, self.num_lfs()));
        }
        let a = self.precision_logits(j, &self.class_log_masses());
        Ok((a[self.lf_classes[j]] - log_sum_exp(&a)).exp())
    }

    /// `log p_j` and `log (1 - p_j)` computed without cancellation.
    fn log_precision_pair(&self, j: usize, masses: &[f64]) -> (Vec<f64>, f64, f64) {
        let a = self.precision_logits(j, masses);
        let k = self.lf_classes[j];
        let lse = log_sum_exp(&a);
        let others: Vec<f64> = a
            .iter()
            .enumerate()
            .filter(|&(y, _)| y != k)
            .map(|(_, &v)| v)
            .collect();
        let log_p = a[k] - lse;
        let log_not_p = log_sum_exp(&others) - lse;
        (a, log_p, log_not_p)
    }

    fn clamped_targets(&self) -> Result<Vec<f64>, LfModelError> {
        let q = self
            .quality_targets
            .as_ref()
            .ok_or(LfModelError::MissingQualityTargets)?;
        Ok(q.iter().map(|v| v.clamp(QG_EPS, 1.0 - QG_EPS)).collect())
    }

    /// Quality-guide loss: binary cross-entropy between each LF's target precision
    /// and the precision implied by the model, summed over LFs.
    pub fn qg_loss(&self) -> Result<f64, LfModelError> {
        let q = self.clamped_targets()?;
        let masses = self.class_log_masses();
        Ok((0..self.num_lfs())
            .map(|j| {
                let (_, log_p, log_not_p) = self.log_precision_pair(j, &masses);
                -(q[j] * log_p + (1.0 - q[j]) * log_not_p)
            })
            .sum())
    }

    // -----------------------------------------------------------------------
    // Gradients. Each `add_*` accumulates `scale · ∂term/∂θ` into `grad`.

    /// `∂ log Z / ∂θ_jy = softmax(masses)_y · σ(θ_jy)`.
    fn add_log_partition_grad(&self, grad: &mut Array2<f64>, scale: f64) {
        let w = softmax(&self.class_log_masses());
        for ((j, y), g) in grad.indexed_iter_mut() {
            *g += scale * w[y] * sigmoid(self.theta[[j, y]]);
        }
    }

    pub fn add_ll_s_grad(&self, set: &InstanceSet, grad: &mut Array2<f64>) -> Result<(), LfModelError> {
        let ys = set.labels().ok_or(LfModelError::MissingLabels)?;
        for i in 0..set.len() {
            for (j, &lj) in set.l(i).iter().enumerate() {
                if lj != 0 {
                    grad[[j, ys[i]]] -= 1.0;
                }
            }
        }
        self.add_log_partition_grad(grad, set.len() as f64);
        Ok(())
    }

    pub fn add_ll_u_grad(&self, set: &InstanceSet, grad: &mut Array2<f64>) {
        for i in 0..set.len() {
            let l = set.l(i);
            let post = self.posterior(l);
            for (j, &lj) in l.iter().enumerate() {
                if lj != 0 {
                    for (y, p) in post.iter().enumerate() {
                        grad[[j, y]] -= p;
                    }
                }
            }
        }
        self.add_log_partition_grad(grad, set.len() as f64);
    }

    pub fn add_qg_grad(&self, grad: &mut Array2<f64>) -> Result<(), LfModelError> {
        let q = self.clamped_targets()?;
        let masses = self.class_log_masses();
        let (m, kk) = (self.num_lfs(), self.num_classes());
        let sig = self.theta.mapv(sigmoid);
        for (j, &qj) in q.iter().enumerate() {
            let (a, log_p, log_not_p) = self.log_precision_pair(j, &masses);
            let pi = softmax(&a);
            let k = self.lf_classes[j];
            // d(loss)/d(a_y) = (-q + (1-q) p / (1-p)) (δ_{y,k} - π_y)
            let odds = (log_p - log_not_p).exp();
            let coef = -qj + (1.0 - qj) * odds;
            for y in 0..kk {
                let da = coef * ((y == k) as u8 as f64 - pi[y]);
                // a_y depends on θ_jy with unit slope and on θ_j'y through σ(θ_j'y).
                for jp in 0..m {
                    let slope = if jp == j { 1.0 } else { sig[[jp, y]] };
                    grad[[jp, y]] += da * slope;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `Σ_i KL(p_i ‖ P_θ(·|l_i))` with the `p_i` held fixed.
    pub fn add_kl_grad(&self, set: &InstanceSet, targets: &[Vec<f64>], grad: &mut Array2<f64>) {
        for (i, target) in targets.iter().enumerate().take(set.len()) {
            let l = set.l(i);
            let post = self.posterior(l);
            for (j, &lj) in l.iter().enumerate() {
                if lj != 0 {
                    for (y, (p, t)) in post.iter().zip(target).enumerate() {
                        grad[[j, y]] += p - t;
                    }
                }
            }
        }
    }
}
