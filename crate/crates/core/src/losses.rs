//! Classification, feature-distillation and prototype-calibration losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Classifier, ClassifierVars};
use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub gamma_proto: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kd: 10.0,
            gamma_proto: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kd >= 0.0 && self.gamma_proto >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Distance used for feature distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdDistance {
    /// `‖a − b‖²`
    #[default]
    Squared,
    /// `‖a − b‖`
    Euclidean,
}

/// Mean cross-entropy over the selected samples; zero (without gradient)
/// when none are selected.
pub fn masked_ce<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    mask: &[bool],
) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels, Some(mask))
}

/// Mean feature distance to the teacher over selected samples. The teacher
/// features are recorded as a constant, so no gradient reaches them.
pub fn kd_loss<T: Real>(
    tape: &mut Tape<T>,
    student: Var,
    teacher: &Tensor<T>,
    mask: &[bool],
    distance: KdDistance,
) -> Result<Var> {
    let t = tape.constant(teacher.detached());
    tape.row_distance(student, t, Some(mask), distance == KdDistance::Squared)
}

/// Cross-entropy of the classifier on an over-sampled prototype batch.
pub fn proto_loss<T: Real>(
    tape: &mut Tape<T>,
    classifier: ClassifierVars,
    prototypes: &Tensor<T>,
    labels: &[usize],
) -> Result<Var> {
    let p = tape.constant(prototypes.detached());
    let logits = Classifier::logits(tape, classifier, p)?;
    tape.softmax_cross_entropy(logits, labels, None)
}

/// `ce + λ·kd + γ·proto`; absent terms are skipped.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    ce: Var,
    kd: Option<Var>,
    proto: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut total = ce;
    if let Some(kd) = kd {
        let scaled = tape.scale(kd, lit(weights.lambda_kd));
        total = tape.add(total, scaled)?;
    }
    if let Some(proto) = proto {
        let scaled = tape.scale(proto, lit(weights.gamma_proto));
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn ce_mask_reductions() {
        let logits = t(&[4, 3], &[0.1, 2.0, -1.0, 1.5, 0.2, 0.0, -0.3, 0.4, 3.0, 1.0, 1.0, 1.0]);
        let labels = [1, 0, 2, 1];
        let mut tape = Tape::new();
        let z = tape.leaf(&logits);
        let full = tape.softmax_cross_entropy(z, &labels, None).unwrap();
        let all = masked_ce(&mut tape, z, &labels, &[true; 4]).unwrap();
        assert_eq!(tape.scalar(full), tape.scalar(all));
        let none = masked_ce(&mut tape, z, &labels, &[false; 4]).unwrap();
        assert_eq!(tape.scalar(none), 0.0);

        // subset oracle: CE on the two selected rows alone
        let half = masked_ce(&mut tape, z, &labels, &[true, false, false, true]).unwrap();
        let sub = t(&[2, 3], &[0.1, 2.0, -1.0, 1.0, 1.0, 1.0]);
        let zs = tape.leaf(&sub);
        let oracle = tape.softmax_cross_entropy(zs, &[1, 1], None).unwrap();
        assert!((tape.scalar(half) - tape.scalar(oracle)).abs() < 1e-15);
    }

    #[test]
    fn kd_cases() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[3.0, 4.0]));
        let same = kd_loss(&mut tape, a, &t(&[1, 2], &[3.0, 4.0]), &[true], KdDistance::Squared).unwrap();
        assert_eq!(tape.scalar(same), 0.0);
        let zero = t(&[1, 2], &[0.0, 0.0]);
        let sq = kd_loss(&mut tape, a, &zero, &[true], KdDistance::Squared).unwrap();
        assert_eq!(tape.scalar(sq), 25.0);
        let eu = kd_loss(&mut tape, a, &zero, &[true], KdDistance::Euclidean).unwrap();
        assert_eq!(tape.scalar(eu), 5.0);
        let empty = kd_loss(&mut tape, a, &zero, &[false], KdDistance::Squared).unwrap();
        assert_eq!(tape.scalar(empty), 0.0);
    }

    #[test]
    fn kd_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[3.0, 4.0]));
        assert!(kd_loss(&mut tape, a, &t(&[1, 3], &[0.0; 3]), &[true], KdDistance::Squared).is_err());
    }

    #[test]
    fn proto_loss_limits() {
        let mut c = Classifier::<f64>::empty(2);
        c.weight = t(&[2, 2], &[50.0, 0.0, 0.0, 50.0]);
        c.bias = t(&[2], &[0.0, 0.0]);
        let protos = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let vars = c.bind(&mut tape);
        let l = proto_loss(&mut tape, vars, &protos, &[0, 1]).unwrap();
        assert!(tape.scalar(l) < 1e-20);

        let mut u = Classifier::<f64>::empty(2);
        u.extend(3, &mut rand::rng()).unwrap();
        u.weight = Tensor::zeros(&[3, 2]);
        let vars = u.bind(&mut tape);
        let l = proto_loss(&mut tape, vars, &protos, &[0, 2]).unwrap();
        assert!((tape.scalar(l) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn total_arithmetic() {
        let mut tape = Tape::new();
        let ce = tape.constant(Tensor::scalar(0.5));
        let kd = tape.constant(Tensor::scalar(0.02));
        let pr = tape.constant(Tensor::scalar(0.1));
        let w = LossWeights::default();
        let total = total_loss(&mut tape, ce, Some(kd), Some(pr), &w).unwrap();
        assert!((tape.scalar(total) - 1.7f64).abs() < 1e-15);
        let zero = LossWeights {
            lambda_kd: 0.0,
            gamma_proto: 0.0,
        };
        let total = total_loss(&mut tape, ce, Some(kd), Some(pr), &zero).unwrap();
        assert_eq!(tape.scalar(total), 0.5);
        assert!(LossWeights { lambda_kd: -1.0, gamma_proto: 0.0 }.validate().is_err());
    }
}
