//! Channel softmax, cross-entropy, and mean-absolute-difference losses.

use super::{out_grad, Node, Tape, Tensor};
use crate::error::{Error, Result};

/// Per-pixel softmax over the channel axis, computed with max subtraction.
pub fn softmax_channels(tape: &mut Tape, logits: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let mut out = vec![0.0; b * c * plane];
    {
        let x = logits.data();
        for bi in 0..b {
            for p in 0..plane {
                let mut maxv = f64::NEG_INFINITY;
                for ch in 0..c {
                    maxv = maxv.max(x[(bi * c + ch) * plane + p]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (x[(bi * c + ch) * plane + p] - maxv).exp();
                    out[(bi * c + ch) * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[(bi * c + ch) * plane + p] /= z;
                }
            }
        }
    }
    let result = Tensor::op_output(vec![b, c, h, w], out, tape.wants_grad(&[logits]));
    if result.requires_grad() {
        tape.record(
            &result,
            Box::new(SoftmaxNode {
                logits: logits.clone(),
                out: result.clone(),
            }),
        );
    }
    Ok(result)
}

struct SoftmaxNode {
    logits: Tensor,
    out: Tensor,
}

impl Node for SoftmaxNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        if !self.logits.requires_grad() {
            return;
        }
        let (b, c, h, w) = self.logits.dims4().unwrap();
        let plane = h * w;
        let s = self.out.data();
        let mut gx = vec![0.0; b * c * plane];
        for bi in 0..b {
            for p in 0..plane {
                let mut dot = 0.0;
                for ch in 0..c {
                    let i = (bi * c + ch) * plane + p;
                    dot += g[i] * s[i];
                }
                for ch in 0..c {
                    let i = (bi * c + ch) * plane + p;
                    gx[i] = s[i] * (g[i] - dot);
                }
            }
        }
        drop(s);
        self.logits.accum_grad(&gx);
    }
}

/// Mean over all pixels of the negative log softmax probability of the true
/// class, in the numerically stable log-sum-exp form. `labels` is a flat
/// batch-major slice of length batch*h*w.
pub fn cross_entropy_loss(tape: &mut Tape, logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    let plane = h * w;
    if labels.len() != b * plane {
        return Err(Error::Dim(format!(
            "cross_entropy: {} labels for {} pixels",
            labels.len(),
            b * plane
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Label(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut total = 0.0;
    {
        let x = logits.data();
        for bi in 0..b {
            for p in 0..plane {
                let mut maxv = f64::NEG_INFINITY;
                for ch in 0..c {
                    maxv = maxv.max(x[(bi * c + ch) * plane + p]);
                }
                let mut lse = 0.0;
                for ch in 0..c {
                    lse += (x[(bi * c + ch) * plane + p] - maxv).exp();
                }
                let lse = maxv + lse.ln();
                let t = labels[bi * plane + p] as usize;
                total += lse - x[(bi * c + t) * plane + p];
            }
        }
    }
    let n = (b * plane) as f64;
    let result = Tensor::op_output(vec![1], vec![total / n], tape.wants_grad(&[logits]));
    if result.requires_grad() {
        tape.record(
            &result,
            Box::new(CrossEntropyNode {
                logits: logits.clone(),
                out: result.clone(),
                labels: labels.to_vec(),
            }),
        );
    }
    Ok(result)
}

struct CrossEntropyNode {
    logits: Tensor,
    out: Tensor,
    labels: Vec<u8>,
}

impl Node for CrossEntropyNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        if !self.logits.requires_grad() {
            return;
        }
        let (b, c, h, w) = self.logits.dims4().unwrap();
        let plane = h * w;
        let n = (b * plane) as f64;
        let x = self.logits.data();
        let mut gx = vec![0.0; b * c * plane];
        for bi in 0..b {
            for p in 0..plane {
                let mut maxv = f64::NEG_INFINITY;
                for ch in 0..c {
                    maxv = maxv.max(x[(bi * c + ch) * plane + p]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    z += (x[(bi * c + ch) * plane + p] - maxv).exp();
                }
                let t = self.labels[bi * plane + p] as usize;
                for ch in 0..c {
                    let i = (bi * c + ch) * plane + p;
                    let soft = (x[i] - maxv).exp() / z;
                    let ind = if ch == t { 1.0 } else { 0.0 };
                    gx[i] = g[0] * (soft - ind) / n;
                }
            }
        }
        drop(x);
        self.logits.accum_grad(&gx);
    }
}

/// Mean absolute difference; subgradient at 0 is 0.
pub fn mad_loss(tape: &mut Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Dim(format!(
            "mad_loss shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(p, t)| (p - t).abs())
        .sum();
    let result = Tensor::op_output(vec![1], vec![total / n], tape.wants_grad(&[pred, target]));
    if result.requires_grad() {
        tape.record(
            &result,
            Box::new(MadNode {
                pred: pred.clone(),
                target: target.clone(),
                out: result.clone(),
            }),
        );
    }
    Ok(result)
}

struct MadNode {
    pred: Tensor,
    target: Tensor,
    out: Tensor,
}

impl Node for MadNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        let n = self.pred.numel() as f64;
        let signs: Vec<f64> = self
            .pred
            .data()
            .iter()
            .zip(self.target.data().iter())
            .map(|(p, t)| {
                let d = p - t;
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        if self.pred.requires_grad() {
            let gp: Vec<f64> = signs.iter().map(|s| g[0] * s / n).collect();
            self.pred.accum_grad(&gp);
        }
        if self.target.requires_grad() {
            let gt: Vec<f64> = signs.iter().map(|s| -g[0] * s / n).collect();
            self.target.accum_grad(&gt);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use crate::tensor::gradcheck::{finite_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::no_grad();
        let x = Tensor::zeros(vec![1, 2, 1, 1]);
        let y = softmax_channels(&mut tape, &x).unwrap();
        assert_eq!(*y.data(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..24).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(vec![1, 3, 2, 4], vals.clone()).unwrap();
        let shifted: Vec<f64> = {
            let plane = 8;
            let mut v = vals.clone();
            for p in 0..plane {
                for c in 0..3 {
                    v[c * plane + p] += 17.5; // same constant for all channels of a pixel
                }
            }
            v
        };
        let xs = Tensor::from_vec(vec![1, 3, 2, 4], shifted).unwrap();
        let a = softmax_channels(&mut tape, &x).unwrap();
        let b = softmax_channels(&mut tape, &xs).unwrap();
        for (p, q) in a.data().iter().zip(b.data().iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(
            vec![2, 4, 3, 3],
            (0..72).map(|_| rng.random_range(-8.0..8.0)).collect(),
        )
        .unwrap();
        let y = softmax_channels(&mut tape, &x).unwrap();
        let d = y.data();
        let plane = 9;
        for bi in 0..2 {
            for p in 0..plane {
                let s: f64 = (0..4).map(|c| d[(bi * 4 + c) * plane + p]).sum();
                assert!((s - 1.0).abs() < 1e-6);
                for c in 0..4 {
                    let v = d[(bi * 4 + c) * plane + p];
                    assert!(v > 0.0 && v < 1.0);
                }
            }
        }
    }

    #[test]
    fn uniform_two_class_ce_is_ln2() {
        let mut tape = Tape::no_grad();
        let x = Tensor::zeros(vec![1, 2, 2, 2]);
        let loss = cross_entropy_loss(&mut tape, &x, &[0, 1, 1, 0]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_logit_drives_ce_to_zero() {
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(vec![1, 2, 1, 1], vec![1000.0, 0.0]).unwrap();
        let loss = cross_entropy_loss(&mut tape, &x, &[0]).unwrap();
        assert!(loss.item() < 1e-12);
        assert!(loss.item().is_finite());
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let mut tape = Tape::no_grad();
        let x = Tensor::zeros(vec![1, 2, 1, 1]);
        assert!(matches!(
            cross_entropy_loss(&mut tape, &x, &[2]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::param(
            vec![2, 3, 2, 2],
            (0..24).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let labels: Vec<u8> = (0..8).map(|_| rng.random_range(0..3u8)).collect();
        let eval = || {
            let mut t = Tape::no_grad();
            cross_entropy_loss(&mut t, &x, &labels).unwrap().item()
        };
        let mut tape = Tape::recording();
        let loss = cross_entropy_loss(&mut tape, &x, &labels).unwrap();
        tape.backward(&loss).unwrap();
        let err = max_rel_err(&x.grad().unwrap(), &finite_diff(&x, 1e-6, eval), 1e-10);
        assert!(err < 1e-4, "ce grad err {err}");
    }

    #[test]
    fn mad_basic_values() {
        let mut tape = Tape::no_grad();
        let p = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let t = Tensor::from_vec(vec![2], vec![0.0, 2.0]).unwrap();
        assert_eq!(mad_loss(&mut tape, &p, &t).unwrap().item(), 1.0);
        assert_eq!(mad_loss(&mut tape, &p, &p).unwrap().item(), 0.0);
    }

    #[test]
    fn mad_rejects_shape_mismatch() {
        let mut tape = Tape::no_grad();
        let p = Tensor::zeros(vec![2]);
        let t = Tensor::zeros(vec![3]);
        assert!(matches!(mad_loss(&mut tape, &p, &t), Err(Error::Dim(_))));
    }

    #[test]
    fn mad_gradient_matches_finite_differences_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // keep |pred - target| > 1e-3 so the kink is never straddled
        let pv: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..2.0)).collect();
        let tv: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..-0.5)).collect();
        let p = Tensor::param(vec![16], pv).unwrap();
        let t = Tensor::from_vec(vec![16], tv).unwrap();
        let eval = || {
            let mut tp = Tape::no_grad();
            mad_loss(&mut tp, &p, &t).unwrap().item()
        };
        let mut tape = Tape::recording();
        let loss = mad_loss(&mut tape, &p, &t).unwrap();
        tape.backward(&loss).unwrap();
        let err = max_rel_err(&p.grad().unwrap(), &finite_diff(&p, 1e-6, eval), 1e-10);
        assert!(err < 1e-4, "mad grad err {err}");
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::param(
            vec![1, 3, 2, 2],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        // weight channels unevenly so the Jacobian is exercised off-diagonal
        let w: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64) - 1.7).collect();
        let eval = || {
            let mut t = Tape::no_grad();
            let s = softmax_channels(&mut t, &x).unwrap();
            let v: f64 = s.data().iter().zip(&w).map(|(a, b)| a * b).sum();
            v
        };
        let mut tape = Tape::recording();
        let s = softmax_channels(&mut tape, &x).unwrap();
        let wt = Tensor::from_vec(vec![1, 3, 2, 2], w.clone()).unwrap();
        let loss = weighted_sum(&mut tape, &s, &wt);
        tape.backward(&loss).unwrap();
        let err = max_rel_err(&x.grad().unwrap(), &finite_diff(&x, 1e-6, eval), 1e-10);
        assert!(err < 1e-4, "softmax grad err {err}");
    }

    fn weighted_sum(tape: &mut Tape, a: &Tensor, w: &Tensor) -> Tensor {
        use super::super::{out_grad, Node};
        let v: f64 = a.data().iter().zip(w.data().iter()).map(|(x, y)| x * y).sum();
        let out = Tensor::op_output(vec![1], vec![v], tape.wants_grad(&[a]));
        struct Ws {
            a: Tensor,
            w: Tensor,
            out: Tensor,
        }
        impl Node for Ws {
            fn backward(&self) {
                let Some(g) = out_grad(&self.out) else { return };
                let gw: Vec<f64> = self.w.data().iter().map(|y| g[0] * y).collect();
                self.a.accum_grad(&gw);
            }
        }
        if out.requires_grad() {
            tape.record(
                &out,
                Box::new(Ws {
                    a: a.clone(),
                    w: w.clone(),
                    out: out.clone(),
                }),
            );
        }
        out
    }
}
