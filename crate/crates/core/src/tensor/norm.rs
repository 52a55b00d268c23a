//! Batch normalization over the channel axis of 4-D activations.

use super::{out_grad, Mode, Node, Tape, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization.
///
/// Train mode normalizes by batch statistics (biased variance) and updates
/// the running buffers in place with momentum [`BN_MOMENTUM`] (running
/// variance uses the unbiased estimate). Eval mode normalizes by the running
/// buffers; fresh buffers start at mean 0, variance 1.
pub fn batchnorm2d(
    tape: &mut Tape,
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::Dim(format!(
                "batchnorm {name} shape {:?}, expected [{c}]",
                t.shape()
            )));
        }
    }
    let n = b * h * w;
    let plane = h * w;

    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::Dim(
                    "batchnorm train mode needs batch*h*w >= 2".into(),
                ));
            }
            let x = input.data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for bi in 0..b {
                    let s = &x[(bi * c + ch) * plane..][..plane];
                    acc += s.iter().sum::<f64>();
                }
                mean[ch] = acc / n as f64;
                let mut sq = 0.0;
                for bi in 0..b {
                    let s = &x[(bi * c + ch) * plane..][..plane];
                    for &v in s {
                        let d = v - mean[ch];
                        sq += d * d;
                    }
                }
                var[ch] = sq / n as f64;
            }
            drop(x);
            {
                let mut rm = running_mean.data_mut();
                let mut rv = running_var.data_mut();
                let unbias = n as f64 / (n as f64 - 1.0);
                for ch in 0..c {
                    rm[ch] = (1.0 - BN_MOMENTUM) * rm[ch] + BN_MOMENTUM * mean[ch];
                    rv[ch] = (1.0 - BN_MOMENTUM) * rv[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.data().clone(), running_var.data().clone()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; b * c * plane];
    let mut out = vec![0.0; b * c * plane];
    {
        let x = input.data();
        let gd = gamma.data();
        let bd = beta.data();
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for p in 0..plane {
                    let xh = (x[off + p] - mean[ch]) * inv_std[ch];
                    xhat[off + p] = xh;
                    out[off + p] = gd[ch] * xh + bd[ch];
                }
            }
        }
    }
    let result = Tensor::op_output(
        vec![b, c, h, w],
        out,
        tape.wants_grad(&[input, gamma, beta]),
    );
    if result.requires_grad() {
        tape.record(
            &result,
            Box::new(BatchNormNode {
                input: input.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                out: result.clone(),
                xhat,
                inv_std,
                train: mode == Mode::Train,
            }),
        );
    }
    Ok(result)
}

struct BatchNormNode {
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    out: Tensor,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl Node for BatchNormNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        let (b, c, h, w) = self.input.dims4().unwrap();
        let plane = h * w;
        let n = (b * plane) as f64;

        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for p in 0..plane {
                    sum_g[ch] += g[off + p];
                    sum_gx[ch] += g[off + p] * self.xhat[off + p];
                }
            }
        }
        if self.beta.requires_grad() {
            self.beta.accum_grad(&sum_g);
        }
        if self.gamma.requires_grad() {
            self.gamma.accum_grad(&sum_gx);
        }
        if self.input.requires_grad() {
            let gd = self.gamma.data();
            let mut gx = vec![0.0; b * c * plane];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * plane;
                    let k = gd[ch] * self.inv_std[ch];
                    if self.train {
                        // batch statistics depend on x; the usual closed form
                        let mg = sum_g[ch] / n;
                        let mgx = sum_gx[ch] / n;
                        for p in 0..plane {
                            gx[off + p] = k * (g[off + p] - mg - self.xhat[off + p] * mgx);
                        }
                    } else {
                        for p in 0..plane {
                            gx[off + p] = k * g[off + p];
                        }
                    }
                }
            }
            drop(gd);
            self.input.accum_grad(&gx);
        }
    }
}
