//! Uncertainty-weighted joint loss for the segmentation + distance-map
//! regression task pair, plus the fixed-weight alternative.
//!
//! The learnable weights are log-scales `s = log(sigma)`, so both scales stay
//! positive by construction. The regression term is weighted by `1/sigma1`
//! (Laplacian likelihood) and the classification term by `1/sigma2^2`
//! (temperature-scaled softmax); the log-scale penalty `s1 + s2` keeps the
//! scales from growing without bound.

use crate::error::{Error, Result};
use crate::tensor::{out_grad, Node, Tape, Tensor};

/// Learnable log-scales for the two tasks, shared across the whole model.
#[derive(Clone)]
pub struct TaskWeights {
    /// log-scale of the regression (MAD) noise; sigma1 = exp(s1)
    pub s1: Tensor,
    /// log-scale of the segmentation temperature; sigma2 = exp(s2)
    pub s2: Tensor,
}

impl TaskWeights {
    /// Both log-scales start at 0, i.e. unit sigma and equal weighting.
    pub fn new() -> TaskWeights {
        TaskWeights {
            s1: Tensor::param(vec![1], vec![0.0]).expect("scalar"),
            s2: Tensor::param(vec![1], vec![0.0]).expect("scalar"),
        }
    }

    pub fn from_values(s1: f64, s2: f64) -> TaskWeights {
        TaskWeights {
            s1: Tensor::param(vec![1], vec![s1]).expect("scalar"),
            s2: Tensor::param(vec![1], vec![s2]).expect("scalar"),
        }
    }

    pub fn sigma1(&self) -> f64 {
        self.s1.item().exp()
    }

    pub fn sigma2(&self) -> f64 {
        self.s2.item().exp()
    }

    /// Effective loss weights as applied each step: (exp(-s1), exp(-2*s2)).
    pub fn effective_weights(&self) -> (f64, f64) {
        ((-self.s1.item()).exp(), (-2.0 * self.s2.item()).exp())
    }
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights::new()
    }
}

/// exp(-s1)*L1 + exp(-2*s2)*L2 + s1 + s2, differentiable in all four inputs.
pub fn joint_loss(
    tape: &mut Tape,
    l1_mad: &Tensor,
    l2_ce: &Tensor,
    weights: &TaskWeights,
) -> Result<Tensor> {
    for (name, t) in [("L1", l1_mad), ("L2", l2_ce)] {
        if t.numel() != 1 {
            return Err(Error::Usage(format!(
                "joint_loss expects scalar {name}, got shape {:?}",
                t.shape()
            )));
        }
    }
    let (l1, l2) = (l1_mad.item(), l2_ce.item());
    let (s1, s2) = (weights.s1.item(), weights.s2.item());
    let value = (-s1).exp() * l1 + (-2.0 * s2).exp() * l2 + s1 + s2;
    let out = Tensor::op_output(
        vec![1],
        vec![value],
        tape.wants_grad(&[l1_mad, l2_ce, &weights.s1, &weights.s2]),
    );
    if out.requires_grad() {
        tape.record(
            &out,
            Box::new(JointLossNode {
                l1: l1_mad.clone(),
                l2: l2_ce.clone(),
                s1: weights.s1.clone(),
                s2: weights.s2.clone(),
                out: out.clone(),
            }),
        );
    }
    Ok(out)
}

struct JointLossNode {
    l1: Tensor,
    l2: Tensor,
    s1: Tensor,
    s2: Tensor,
    out: Tensor,
}

impl Node for JointLossNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        let g = g[0];
        let (l1, l2) = (self.l1.item(), self.l2.item());
        let (s1, s2) = (self.s1.item(), self.s2.item());
        let w1 = (-s1).exp();
        let w2 = (-2.0 * s2).exp();
        if self.l1.requires_grad() {
            self.l1.accum_grad(&[g * w1]);
        }
        if self.l2.requires_grad() {
            self.l2.accum_grad(&[g * w2]);
        }
        if self.s1.requires_grad() {
            self.s1.accum_grad(&[g * (1.0 - w1 * l1)]);
        }
        if self.s2.requires_grad() {
            self.s2.accum_grad(&[g * (1.0 - 2.0 * w2 * l2)]);
        }
    }
}

/// w1*L1 + w2*L2 with fixed non-negative weights.
pub fn fixed_loss(tape: &mut Tape, l1_mad: &Tensor, l2_ce: &Tensor, w1: f64, w2: f64) -> Result<Tensor> {
    if w1 < 0.0 || w2 < 0.0 {
        return Err(Error::Usage(format!(
            "fixed_loss weights must be non-negative, got ({w1}, {w2})"
        )));
    }
    for (name, t) in [("L1", l1_mad), ("L2", l2_ce)] {
        if t.numel() != 1 {
            return Err(Error::Usage(format!(
                "fixed_loss expects scalar {name}, got shape {:?}",
                t.shape()
            )));
        }
    }
    let value = w1 * l1_mad.item() + w2 * l2_ce.item();
    let out = Tensor::op_output(vec![1], vec![value], tape.wants_grad(&[l1_mad, l2_ce]));
    if out.requires_grad() {
        tape.record(
            &out,
            Box::new(FixedLossNode {
                l1: l1_mad.clone(),
                l2: l2_ce.clone(),
                out: out.clone(),
                w1,
                w2,
            }),
        );
    }
    Ok(out)
}

struct FixedLossNode {
    l1: Tensor,
    l2: Tensor,
    out: Tensor,
    w1: f64,
    w2: f64,
}

impl Node for FixedLossNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        if self.l1.requires_grad() {
            self.l1.accum_grad(&[g[0] * self.w1]);
        }
        if self.l2.requires_grad() {
            self.l2.accum_grad(&[g[0] * self.w2]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff, max_rel_err};

    #[test]
    fn unit_sigmas_reduce_to_plain_sum() {
        let mut tape = Tape::no_grad();
        let w = TaskWeights::new();
        let l1 = Tensor::scalar(2.0);
        let l2 = Tensor::scalar(3.0);
        assert_eq!(joint_loss(&mut tape, &l1, &l2, &w).unwrap().item(), 5.0);
    }

    #[test]
    fn gradient_signs_flip_at_sigma_equals_l1() {
        // d/ds1 = 1 - exp(-s1)*L1: negative while sigma1 < L1, positive after
        let l1 = Tensor::scalar(2.0);
        let l2 = Tensor::scalar(0.0);
        for (s1, expect_neg) in [(0.0, true), (1.0, false)] {
            let w = TaskWeights::from_values(s1, 0.0);
            let mut tape = Tape::recording();
            let loss = joint_loss(&mut tape, &l1, &l2, &w).unwrap();
            tape.backward(&loss).unwrap();
            let g = w.s1.grad().unwrap()[0];
            assert_eq!(g < 0.0, expect_neg, "s1={s1} grad={g}");
        }
    }

    #[test]
    fn descent_on_log_scales_reaches_the_stationary_point() {
        // With L1 = 2 fixed: minimum at sigma1 = 2. With L2 = 3: sigma2^2 = 6.
        let l1 = Tensor::scalar(2.0);
        let l2 = Tensor::scalar(3.0);
        let w = TaskWeights::new();
        for _ in 0..10_000 {
            let mut tape = Tape::recording();
            let loss = joint_loss(&mut tape, &l1, &l2, &w).unwrap();
            tape.backward(&loss).unwrap();
            for s in [&w.s1, &w.s2] {
                let g = s.grad().unwrap()[0];
                s.data_mut()[0] -= 0.01 * g;
                s.clear_grad();
            }
        }
        assert!((w.sigma1() - 2.0).abs() < 1e-4, "sigma1 = {}", w.sigma1());
        assert!(
            (w.sigma2() * w.sigma2() - 6.0).abs() < 1e-3,
            "sigma2^2 = {}",
            w.sigma2() * w.sigma2()
        );
    }

    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        let l1 = Tensor::param(vec![1], vec![1.7]).unwrap();
        let l2 = Tensor::param(vec![1], vec![0.4]).unwrap();
        let w = TaskWeights::from_values(0.3, -0.2);
        let eval = || {
            let mut t = Tape::no_grad();
            joint_loss(&mut t, &l1, &l2, &w).unwrap().item()
        };
        let mut tape = Tape::recording();
        let loss = joint_loss(&mut tape, &l1, &l2, &w).unwrap();
        tape.backward(&loss).unwrap();
        for t in [&l1, &l2, &w.s1, &w.s2] {
            let err = max_rel_err(&t.grad().unwrap(), &finite_diff(t, 1e-7, eval), 1e-10);
            assert!(err < 1e-4, "joint loss grad err {err}");
        }
    }

    #[test]
    fn fixed_loss_values_and_linearity() {
        let mut tape = Tape::no_grad();
        let l1 = Tensor::scalar(2.0);
        let l2 = Tensor::scalar(3.0);
        assert_eq!(fixed_loss(&mut tape, &l1, &l2, 1.0, 1.0).unwrap().item(), 5.0);
        assert_eq!(fixed_loss(&mut tape, &l1, &l2, 0.0, 1.0).unwrap().item(), 3.0);
        // scaling L1 equals scaling w1 when the other term is absent
        let double_l1 = Tensor::scalar(4.0);
        let zero = Tensor::scalar(0.0);
        let a = fixed_loss(&mut tape, &double_l1, &zero, 1.0, 1.0).unwrap().item();
        let b = fixed_loss(&mut tape, &l1, &zero, 2.0, 1.0).unwrap().item();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_loss_rejects_negative_weights() {
        let mut tape = Tape::no_grad();
        let l1 = Tensor::scalar(1.0);
        let l2 = Tensor::scalar(1.0);
        assert!(matches!(
            fixed_loss(&mut tape, &l1, &l2, -0.5, 1.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn monotone_increasing_in_both_losses() {
        let mut tape = Tape::no_grad();
        let w = TaskWeights::from_values(0.4, -0.3);
        let base = joint_loss(&mut tape, &Tensor::scalar(1.0), &Tensor::scalar(1.0), &w)
            .unwrap()
            .item();
        let more1 = joint_loss(&mut tape, &Tensor::scalar(1.5), &Tensor::scalar(1.0), &w)
            .unwrap()
            .item();
        let more2 = joint_loss(&mut tape, &Tensor::scalar(1.0), &Tensor::scalar(1.5), &w)
            .unwrap()
            .item();
        assert!(more1 > base && more2 > base);
    }
}
