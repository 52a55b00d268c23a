//! 2x2 max pooling with argmax indices, the matching sparse unpooling, and
//! nearest-neighbor upsampling.

use super::{out_grad, Node, Tape, Tensor};
use crate::error::{Error, Result};

/// Argmax positions recorded by [`maxpool2x2_with_indices`]. Each entry is
/// the flat index (0..4, row-major) of the selected element within its own
/// 2x2 window.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    pub shape: Vec<usize>,
    pub idx: Vec<u8>,
}

/// Non-overlapping 2x2 max pooling. Ties select the lowest flat window index.
pub fn maxpool2x2_with_indices(tape: &mut Tape, input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (b, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dim(format!(
            "maxpool2x2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * ho * wo];
    let mut idx = vec![0u8; b * c * ho * wo];
    {
        let x = input.data();
        for bc in 0..b * c {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            let dst_off = bc * ho * wo;
            for oi in 0..ho {
                for oj in 0..wo {
                    let base = (oi * 2) * w + oj * 2;
                    let window = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0usize;
                    for t in 1..4 {
                        if window[t] > window[best] {
                            best = t;
                        }
                    }
                    out[dst_off + oi * wo + oj] = window[best];
                    idx[dst_off + oi * wo + oj] = best as u8;
                }
            }
        }
    }
    let indices = PoolIndices {
        shape: vec![b, c, ho, wo],
        idx,
    };
    let result = Tensor::op_output(vec![b, c, ho, wo], out, tape.wants_grad(&[input]));
    if result.requires_grad() {
        tape.record(
            &result,
            Box::new(MaxPoolNode {
                input: input.clone(),
                out: result.clone(),
                indices: indices.clone(),
            }),
        );
    }
    Ok((result, indices))
}

struct MaxPoolNode {
    input: Tensor,
    out: Tensor,
    indices: PoolIndices,
}

impl Node for MaxPoolNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        if !self.input.requires_grad() {
            return;
        }
        let (b, c, h, w) = self.input.dims4().unwrap();
        let (ho, wo) = (h / 2, w / 2);
        let mut gx = vec![0.0; b * c * h * w];
        for bc in 0..b * c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let flat = bc * ho * wo + oi * wo + oj;
                    let t = self.indices.idx[flat] as usize;
                    let (du, dv) = (t / 2, t % 2);
                    gx[bc * h * w + (oi * 2 + du) * w + oj * 2 + dv] += g[flat];
                }
            }
        }
        self.input.accum_grad(&gx);
    }
}

/// Scatter each value to its recorded window position; zeros elsewhere.
pub fn max_unpool2x2(tape: &mut Tape, input: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    let (b, c, hi, wi) = input.dims4()?;
    if indices.shape != [b, c, hi, wi] {
        return Err(Error::Dim(format!(
            "unpool indices shape {:?} does not match input {:?}",
            indices.shape,
            input.shape()
        )));
    }
    let (h, w) = (hi * 2, wi * 2);
    let mut out = vec![0.0; b * c * h * w];
    {
        let x = input.data();
        for bc in 0..b * c {
            for oi in 0..hi {
                for oj in 0..wi {
                    let flat = bc * hi * wi + oi * wi + oj;
                    let t = indices.idx[flat] as usize;
                    if t > 3 {
                        return Err(Error::Corrupt(format!(
                            "pooling index {t} outside 2x2 window at element {flat}"
                        )));
                    }
                    let (du, dv) = (t / 2, t % 2);
                    out[bc * h * w + (oi * 2 + du) * w + oj * 2 + dv] = x[flat];
                }
            }
        }
    }
    let result = Tensor::op_output(vec![b, c, h, w], out, tape.wants_grad(&[input]));
    if result.requires_grad() {
        tape.record(
            &result,
            Box::new(MaxUnpoolNode {
                input: input.clone(),
                out: result.clone(),
                indices: indices.clone(),
            }),
        );
    }
    Ok(result)
}

struct MaxUnpoolNode {
    input: Tensor,
    out: Tensor,
    indices: PoolIndices,
}

impl Node for MaxUnpoolNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        if !self.input.requires_grad() {
            return;
        }
        let (b, c, hi, wi) = self.input.dims4().unwrap();
        let (h, w) = (hi * 2, wi * 2);
        let mut gx = vec![0.0; b * c * hi * wi];
        for bc in 0..b * c {
            for oi in 0..hi {
                for oj in 0..wi {
                    let flat = bc * hi * wi + oi * wi + oj;
                    let t = self.indices.idx[flat] as usize;
                    let (du, dv) = (t / 2, t % 2);
                    gx[flat] = g[bc * h * w + (oi * 2 + du) * w + oj * 2 + dv];
                }
            }
        }
        self.input.accum_grad(&gx);
    }
}

/// Replicate every pixel into a 2x2 block.
pub fn upsample_nearest2x(tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (ho, wo) = (h * 2, w * 2);
    let mut out = vec![0.0; b * c * ho * wo];
    {
        let x = input.data();
        for bc in 0..b * c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[bc * h * w + i * w + j];
                    let base = bc * ho * wo + (i * 2) * wo + j * 2;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + wo] = v;
                    out[base + wo + 1] = v;
                }
            }
        }
    }
    let result = Tensor::op_output(vec![b, c, ho, wo], out, tape.wants_grad(&[input]));
    if result.requires_grad() {
        tape.record(
            &result,
            Box::new(UpsampleNode {
                input: input.clone(),
                out: result.clone(),
            }),
        );
    }
    Ok(result)
}

struct UpsampleNode {
    input: Tensor,
    out: Tensor,
}

impl Node for UpsampleNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        if !self.input.requires_grad() {
            return;
        }
        let (b, c, h, w) = self.input.dims4().unwrap();
        let (ho, wo) = (h * 2, w * 2);
        let mut gx = vec![0.0; b * c * h * w];
        for bc in 0..b * c {
            for i in 0..h {
                for j in 0..w {
                    let base = bc * ho * wo + (i * 2) * wo + j * 2;
                    gx[bc * h * w + i * w + j] = g[base] + g[base + 1] + g[base + wo] + g[base + wo + 1];
                }
            }
        }
        self.input.accum_grad(&gx);
    }
}

#[cfg(test)]
mod tests {
    use super::super::{sum, Tape};
    use super::*;
    use crate::tensor::gradcheck::{finite_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_single_window() {
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2_with_indices(&mut tape, &x).unwrap();
        assert_eq!(*y.data(), vec![4.0]);
        assert_eq!(idx.idx, vec![3]);
    }

    #[test]
    fn pool_tie_picks_lowest_flat_index() {
        let mut tape = Tape::no_grad();
        let x = Tensor::full(vec![1, 1, 4, 4], 7.0);
        let (y, idx) = maxpool2x2_with_indices(&mut tape, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert!(idx.idx.iter().all(|&i| i == 0));
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let mut tape = Tape::no_grad();
        let x = Tensor::zeros(vec![1, 1, 3, 4]);
        assert!(matches!(
            maxpool2x2_with_indices(&mut tape, &x),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn unpool_places_value_at_recorded_slot() {
        let mut tape = Tape::no_grad();
        let v = Tensor::from_vec(vec![1, 1, 1, 1], vec![4.0]).unwrap();
        let idx = PoolIndices {
            shape: vec![1, 1, 1, 1],
            idx: vec![3],
        };
        let y = max_unpool2x2(&mut tape, &v, &idx).unwrap();
        assert_eq!(*y.data(), vec![0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn unpool_rejects_corrupt_index() {
        let mut tape = Tape::no_grad();
        let v = Tensor::from_vec(vec![1, 1, 1, 1], vec![4.0]).unwrap();
        let idx = PoolIndices {
            shape: vec![1, 1, 1, 1],
            idx: vec![9],
        };
        assert!(matches!(
            max_unpool2x2(&mut tape, &v, &idx),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn unpool_of_pool_preserves_max_and_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(
            vec![1, 2, 4, 4],
            (0..32).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let (pooled, idx) = maxpool2x2_with_indices(&mut tape, &x).unwrap();
        let restored = max_unpool2x2(&mut tape, &pooled, &idx).unwrap();
        let pooled_sum: f64 = pooled.data().iter().sum();
        let restored_sum: f64 = restored.data().iter().sum();
        assert!((pooled_sum - restored_sum).abs() < 1e-12);
        // the max of every window survives at its original location
        let xd = x.data();
        let rd = restored.data();
        for (i, &v) in rd.iter().enumerate() {
            if v != 0.0 {
                assert_eq!(v, xd[i]);
            }
        }
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(
            vec![2, 3, 4, 4],
            (0..96).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let up = upsample_nearest2x(&mut tape, &x).unwrap();
        let (down, _) = maxpool2x2_with_indices(&mut tape, &up).unwrap();
        assert_eq!(*down.data(), *x.data());
    }

    #[test]
    fn upsample_single_pixel() {
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = upsample_nearest2x(&mut tape, &x).unwrap();
        assert_eq!(*y.data(), vec![1.0; 4]);
    }

    #[test]
    fn pool_and_upsample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // keep values well separated so pooling argmaxes cannot flip under h
        let vals: Vec<f64> = (0..32).map(|_| rng.random_range(-4.0..4.0)).collect();
        let x = Tensor::param(vec![1, 2, 4, 4], vals).unwrap();

        let eval_pool = || {
            let mut t = Tape::no_grad();
            let (y, _) = maxpool2x2_with_indices(&mut t, &x).unwrap();
            sum(&mut t, &y).item()
        };
        let mut tape = Tape::recording();
        let (y, _) = maxpool2x2_with_indices(&mut tape, &x).unwrap();
        let loss = sum(&mut tape, &y);
        tape.backward(&loss).unwrap();
        let err = max_rel_err(&x.grad().unwrap(), &finite_diff(&x, 1e-6, eval_pool), 1e-8);
        assert!(err < 1e-4, "maxpool grad err {err}");

        x.clear_grad();
        let eval_up = || {
            let mut t = Tape::no_grad();
            let y = upsample_nearest2x(&mut t, &x).unwrap();
            let (p, _) = maxpool2x2_with_indices(&mut t, &y).unwrap();
            sum(&mut t, &p).item()
        };
        let mut tape = Tape::recording();
        let y = upsample_nearest2x(&mut tape, &x).unwrap();
        let (p, _) = maxpool2x2_with_indices(&mut tape, &y).unwrap();
        let loss = sum(&mut tape, &p);
        tape.backward(&loss).unwrap();
        let err = max_rel_err(&x.grad().unwrap(), &finite_diff(&x, 1e-6, eval_up), 1e-8);
        assert!(err < 1e-4, "upsample grad err {err}");
    }
}
