//! Elementwise activations plus per-vector softmax.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    /// Normalizes a whole vector; only valid as the final activation of a
    /// network and always paired with cross-entropy loss.
    Softmax,
}

impl ActivationKind {
    pub fn is_softmax(self) -> bool {
        matches!(self, ActivationKind::Softmax)
    }

    /// Applies the activation to a vector (softmax acts on the whole vector,
    /// everything else elementwise).
    pub fn apply(self, pre: &DVector<f64>) -> DVector<f64> {
        match self {
            ActivationKind::Identity => pre.clone(),
            ActivationKind::Relu => pre.map(|v| v.max(0.0)),
            ActivationKind::Tanh => pre.map(f64::tanh),
            ActivationKind::Sigmoid => pre.map(sigmoid),
            ActivationKind::Softmax => softmax(pre),
        }
    }

    /// Elementwise derivative evaluated at the pre-activation value.
    ///
    /// Softmax has no elementwise derivative; its gradient is folded into the
    /// cross-entropy loss in the trainer.
    pub fn derivative(self, pre: &DVector<f64>) -> DVector<f64> {
        match self {
            ActivationKind::Identity => DVector::from_element(pre.len(), 1.0),
            ActivationKind::Relu => pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            ActivationKind::Tanh => pre.map(|v| 1.0 - v.tanh().powi(2)),
            ActivationKind::Sigmoid => pre.map(|v| {
                let s = sigmoid(v);
                s * (1.0 - s)
            }),
            ActivationKind::Softmax => {
                panic!("softmax derivative is handled jointly with cross-entropy")
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softmax(pre: &DVector<f64>) -> DVector<f64> {
    let max = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = pre.map(|v| (v - max).exp());
    let sum: f64 = exps.iter().sum();
    exps / sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn relu_clips_negatives() {
        let x = DVector::from_vec(vec![-1.0, 0.0, 2.5]);
        let y = ActivationKind::Relu.apply(&x);
        assert_eq!(y.as_slice(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let y = ActivationKind::Softmax.apply(&x);
        assert_relative_eq!(y.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        let shifted = ActivationKind::Softmax.apply(&x.map(|v| v + 100.0));
        assert_relative_eq!((y - shifted).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let x = DVector::from_vec(vec![-0.7, 0.3, 1.2]);
        let h = 1e-6;
        for kind in [ActivationKind::Identity, ActivationKind::Relu, ActivationKind::Tanh, ActivationKind::Sigmoid] {
            let d = kind.derivative(&x);
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (kind.apply(&xp)[i] - kind.apply(&xm)[i]) / (2.0 * h);
                assert_relative_eq!(d[i], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn serde_names_are_lowercase() {
        assert_eq!(serde_json::to_string(&ActivationKind::Relu).unwrap(), "\"relu\"");
        let k: ActivationKind = serde_json::from_str("\"softmax\"").unwrap();
        assert_eq!(k, ActivationKind::Softmax);
    }
}
