mod common;

use common::{gradient_case_error, phi_grad_error, random_grad_case, theta_grad_error, PHI_TERMS, THETA_TERMS};
use ndarray::Array2;
use wsjoint::classifier::{grad_classifier_losses, Architecture, ClassifierParams, PhiBatch};
use wsjoint::joint::{total_loss, LossCombo, LossTerm};
use wsjoint::{InstanceSet, LfModelParams};

const TOL: f64 = 1e-5;

#[test]
fn every_term_matches_finite_differences() {
    for seed in 0..40 {
        let case = random_grad_case(seed);
        for t in PHI_TERMS {
            let e = phi_grad_error(&case, t);
            assert!(e < TOL, "seed {seed} φ {t}: {e:e}");
        }
        for t in THETA_TERMS {
            let e = theta_grad_error(&case, t);
            assert!(e < TOL, "seed {seed} θ {t}: {e:e}");
        }
    }
}

#[test]
fn worst_case_summary_is_consistent() {
    assert!(gradient_case_error(1234) < TOL);
}

#[test]
fn entropy_gradient_vanishes_at_uniform_prediction() {
    let params = ClassifierParams::zeros(Architecture::LogReg, 2, 3);
    let lf = LfModelParams::zeros(1, 3, vec![0]);
    let unl = InstanceSet::new(Array2::zeros((2, 2)), Array2::zeros((2, 1)), None).unwrap();
    let lab = InstanceSet::empty(2, 1, true);
    let batch = PhiBatch {
        labelled: &lab,
        unlabelled: &unl,
    };
    let (losses, grads) = grad_classifier_losses::<rand_chacha::ChaCha8Rng>(
        &params,
        batch,
        &LossCombo::new(&[LossTerm::L2]),
        &lf,
        None,
    )
    .unwrap();
    assert!((losses.l2 - 2.0 * 3f64.ln()).abs() < 1e-12);
    assert!(grads.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.abs() < 1e-15)));
}

#[test]
fn combined_loss_is_the_sum_of_its_terms() {
    let case = random_grad_case(99);
    let all = LossCombo::new(&LossTerm::ALL);
    let full = total_loss(&case.classifier, &case.lf, &case.bundle, &all).unwrap();
    let mut sum = 0.0;
    for t in LossTerm::ALL {
        let combo = if t == LossTerm::QG {
            LossCombo::new(&[LossTerm::L5, LossTerm::QG])
        } else {
            LossCombo::new(&[t])
        };
        let part = total_loss(&case.classifier, &case.lf, &case.bundle, &combo).unwrap();
        assert_eq!(part.terms[&t], full.terms[&t]);
        sum += part.terms[&t];
    }
    assert!((full.total - sum).abs() < 1e-12);
    assert_eq!(full.terms.len(), 7);
}
