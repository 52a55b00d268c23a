//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every differentiable operation whose output requires a
//! gradient. [`Tape::backward`] replays the records once, in reverse order,
//! accumulating gradients additively onto every participating tensor. One
//! tape owns one computation graph and is single-threaded; tensors not
//! attached to a tape are plain values.

pub mod conv;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod pool;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv_transpose2d};
pub use loss::{cross_entropy_loss, mad_loss, softmax_channels};
pub use norm::batchnorm2d;
pub use pool::{max_unpool2x2, maxpool2x2_with_indices, upsample_nearest2x, PoolIndices};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Train/eval switch for mode-dependent operations (batch norm).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense n-dimensional tensor of `f64` values with an optional gradient
/// buffer. Cloning is cheap (shared storage); use [`Tensor::deep_copy`] for
/// an independent snapshot.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::make(shape, data, false))
    }

    /// Leaf tensor that participates in differentiation.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::make(shape, data, true))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::make(shape, vec![0.0; n], false)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::make(shape, vec![value; n], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(vec![1], vec![value], false)
    }

    /// Output of a recorded operation.
    pub(crate) fn op_output(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor::make(shape, data, requires_grad)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    /// Current gradient, cloned out of the tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Independent copy with fresh identity and no gradient.
    pub fn deep_copy(&self) -> Tensor {
        Tensor::make(
            self.inner.shape.clone(),
            self.inner.data.borrow().clone(),
            self.inner.requires_grad,
        )
    }

    /// Interpret as a 4-D activation (batch, channels, height, width).
    pub(crate) fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            [b, c, h, w] => Ok((*b, *c, *h, *w)),
            other => Err(Error::Dim(format!("expected 4-D tensor, got {other:?}"))),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) trait Node {
    fn backward(&self);
}

/// Records operations for one forward pass and replays them in reverse.
pub struct Tape {
    nodes: Vec<Box<dyn Node>>,
    produced: HashSet<u64>,
    recording: bool,
}

impl Tape {
    /// Tape that records differentiable operations.
    pub fn recording() -> Tape {
        Tape {
            nodes: Vec::new(),
            produced: HashSet::new(),
            recording: true,
        }
    }

    /// Tape that records nothing; forward values only.
    pub fn no_grad() -> Tape {
        Tape {
            nodes: Vec::new(),
            produced: HashSet::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn record(&mut self, output: &Tensor, node: Box<dyn Node>) {
        self.produced.insert(output.id());
        self.nodes.push(node);
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively onto
    /// every tensor that participated in a recorded operation; the tape is
    /// cleared afterwards.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !self.produced.contains(&loss.id()) {
            return Err(Error::Usage(
                "backward target was not produced on this tape".into(),
            ));
        }
        loss.accum_grad(&[1.0]);
        for node in self.nodes.iter().rev() {
            node.backward();
        }
        self.nodes.clear();
        self.produced.clear();
        Ok(())
    }
}

/// Gradient of the output of a node, if any path from the loss reached it.
pub(crate) fn out_grad(t: &Tensor) -> Option<Vec<f64>> {
    t.inner.grad.borrow().clone()
}

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

/// max(0, x) elementwise; subgradient at 0 is 0.
pub fn relu(tape: &mut Tape, x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    let out = Tensor::op_output(x.shape().to_vec(), data, tape.wants_grad(&[x]));
    if out.requires_grad() {
        tape.record(
            &out,
            Box::new(ReluNode {
                x: x.clone(),
                out: out.clone(),
            }),
        );
    }
    out
}

struct ReluNode {
    x: Tensor,
    out: Tensor,
}

impl Node for ReluNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        if self.x.requires_grad() {
            let xd = self.x.data();
            let gx: Vec<f64> = xd
                .iter()
                .zip(&g)
                .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                .collect();
            drop(xd);
            self.x.accum_grad(&gx);
        }
    }
}

/// Concatenate along the channel axis; `a` occupies the first channels.
pub fn concat_channels(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::Dim(format!(
            "concat_channels: batch/spatial mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = ha * wa;
    let mut data = vec![0.0; ba * (ca + cb) * plane];
    {
        let ad = a.data();
        let bd = b.data();
        for bi in 0..ba {
            let dst = &mut data[bi * (ca + cb) * plane..];
            dst[..ca * plane].copy_from_slice(&ad[bi * ca * plane..(bi + 1) * ca * plane]);
            dst[ca * plane..(ca + cb) * plane]
                .copy_from_slice(&bd[bi * cb * plane..(bi + 1) * cb * plane]);
        }
    }
    let out = Tensor::op_output(
        vec![ba, ca + cb, ha, wa],
        data,
        tape.wants_grad(&[a, b]),
    );
    if out.requires_grad() {
        tape.record(
            &out,
            Box::new(ConcatNode {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
                ca,
                cb,
                plane,
            }),
        );
    }
    Ok(out)
}

struct ConcatNode {
    a: Tensor,
    b: Tensor,
    out: Tensor,
    ca: usize,
    cb: usize,
    plane: usize,
}

impl Node for ConcatNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        let (ca, cb, plane) = (self.ca, self.cb, self.plane);
        let batch = self.a.shape()[0];
        if self.a.requires_grad() {
            let mut ga = vec![0.0; batch * ca * plane];
            for bi in 0..batch {
                ga[bi * ca * plane..(bi + 1) * ca * plane]
                    .copy_from_slice(&g[bi * (ca + cb) * plane..][..ca * plane]);
            }
            self.a.accum_grad(&ga);
        }
        if self.b.requires_grad() {
            let mut gb = vec![0.0; batch * cb * plane];
            for bi in 0..batch {
                gb[bi * cb * plane..(bi + 1) * cb * plane]
                    .copy_from_slice(&g[bi * (ca + cb) * plane..][ca * plane..(ca + cb) * plane]);
            }
            self.b.accum_grad(&gb);
        }
    }
}

/// Sum of all elements, as a scalar tensor.
pub fn sum(tape: &mut Tape, x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().sum();
    let out = Tensor::op_output(vec![1], vec![total], tape.wants_grad(&[x]));
    if out.requires_grad() {
        tape.record(
            &out,
            Box::new(SumNode {
                x: x.clone(),
                out: out.clone(),
            }),
        );
    }
    out
}

struct SumNode {
    x: Tensor,
    out: Tensor,
}

impl Node for SumNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        if self.x.requires_grad() {
            self.x.accum_grad(&vec![g[0]; self.x.numel()]);
        }
    }
}

/// Multiply every element by a constant.
pub fn scale(tape: &mut Tape, x: &Tensor, factor: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v * factor).collect();
    let out = Tensor::op_output(x.shape().to_vec(), data, tape.wants_grad(&[x]));
    if out.requires_grad() {
        tape.record(
            &out,
            Box::new(ScaleNode {
                x: x.clone(),
                out: out.clone(),
                factor,
            }),
        );
    }
    out
}

struct ScaleNode {
    x: Tensor,
    out: Tensor,
    factor: f64,
}

impl Node for ScaleNode {
    fn backward(&self) {
        let Some(g) = out_grad(&self.out) else { return };
        if self.x.requires_grad() {
            let gx: Vec<f64> = g.iter().map(|v| v * self.factor).collect();
            self.x.accum_grad(&gx);
        }
    }
}
