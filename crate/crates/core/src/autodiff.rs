//! Reverse-mode automatic differentiation on dynamically shaped `f64` tensors.
//!
//! Values are eagerly computed `ndarray` arrays; every operation records its
//! inputs so [`grad`] can walk the graph in reverse. Backward passes build
//! ordinary graph nodes, which makes gradients differentiable again: the
//! second-order path needed by the meta temperature update is just `grad`
//! applied to the output of a previous `grad`.
//!
//! Conventions:
//! - every node value is a standard-layout array (ops copy when needed),
//! - nodes whose inputs all carry `needs_grad == false` are folded into
//!   constants and keep no parents,
//! - shape errors are programmer errors and panic.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// A node in the computation graph. Cloning is cheap (reference count).
pub struct Var {
    node: Rc<Node>,
}

impl Clone for Var {
    fn clone(&self) -> Self {
        Var { node: Rc::clone(&self.node) }
    }
}

struct Node {
    id: u64,
    value: ArrayD<f64>,
    needs_grad: bool,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

/// Gradient rule of one operation. Contributions are built from `Var` ops so
/// they stay differentiable.
trait Backward {
    fn backward(&self, grad: &Var, inputs: &[Var], output: &Var) -> Vec<Option<Var>>;
}

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

fn make(value: ArrayD<f64>, parents: Vec<Var>, op: Box<dyn Backward>) -> Var {
    debug_assert!(value.is_standard_layout(), "op produced a non-standard layout");
    if parents.iter().any(|p| p.needs_grad()) {
        Var {
            node: Rc::new(Node { id: fresh_id(), value, needs_grad: true, parents, op: Some(op) }),
        }
    } else {
        Var::constant(value)
    }
}

impl Var {
    /// A node that never receives a gradient.
    pub fn constant(value: ArrayD<f64>) -> Var {
        Var {
            node: Rc::new(Node {
                id: fresh_id(),
                value,
                needs_grad: false,
                parents: Vec::new(),
                op: None,
            }),
        }
    }

    /// A differentiable leaf (parameter).
    pub fn leaf(value: ArrayD<f64>) -> Var {
        Var {
            node: Rc::new(Node {
                id: fresh_id(),
                value,
                needs_grad: true,
                parents: Vec::new(),
                op: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn needs_grad(&self) -> bool {
        self.node.needs_grad
    }

    /// The scalar held by a 0-d (or single-element) node.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.node.value.len(), 1);
        *self.node.value.iter().next().expect("empty tensor")
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.node.value.clone())
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

/// NumPy-style broadcast of two shapes; panics if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Broadcast classification for the element-wise fast paths.
enum BroadcastKind {
    /// Identical shapes.
    Same,
    /// Right side is a single scalar.
    ScalarRhs,
    /// Left side is a single scalar.
    ScalarLhs,
    /// `[N,C,H,W] op [1,C,1,1]`-style per-channel parameter.
    ChannelRhs,
    /// `[N,C,H,W] op [N,1,H,W]`-style per-pixel map.
    PixelRhs,
    Generic,
}

fn classify(a: &[usize], b: &[usize]) -> BroadcastKind {
    if a == b {
        return BroadcastKind::Same;
    }
    if b.iter().product::<usize>() == 1 {
        return BroadcastKind::ScalarRhs;
    }
    if a.iter().product::<usize>() == 1 {
        return BroadcastKind::ScalarLhs;
    }
    if a.len() == 4 && b.len() == 4 {
        if b[0] == 1 && b[1] == a[1] && b[2] == 1 && b[3] == 1 {
            return BroadcastKind::ChannelRhs;
        }
        if b[0] == a[0] && b[1] == 1 && b[2] == a[2] && b[3] == a[3] {
            return BroadcastKind::PixelRhs;
        }
    }
    BroadcastKind::Generic
}

fn bin_values(a: &Var, b: &Var, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let (av, bv) = (a.value(), b.value());
    match classify(av.shape(), bv.shape()) {
        BroadcastKind::Same => {
            let x = av.as_slice().unwrap();
            let y = bv.as_slice().unwrap();
            let out: Vec<f64> = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
            ArrayD::from_shape_vec(av.raw_dim(), out).unwrap()
        }
        BroadcastKind::ScalarRhs => {
            let q = *bv.iter().next().unwrap();
            av.mapv(|p| f(p, q))
        }
        BroadcastKind::ScalarLhs => {
            let p = *av.iter().next().unwrap();
            bv.mapv(|q| f(p, q))
        }
        BroadcastKind::ChannelRhs => {
            let s = av.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let x = av.as_slice().unwrap();
            let y = bv.as_slice().unwrap();
            let mut out = vec![0.0f64; x.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let q = y[ci];
                    for (o, &p) in out[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                        *o = f(p, q);
                    }
                }
            }
            ArrayD::from_shape_vec(av.raw_dim(), out).unwrap()
        }
        BroadcastKind::PixelRhs => {
            let s = av.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let x = av.as_slice().unwrap();
            let y = bv.as_slice().unwrap();
            let mut out = vec![0.0f64; x.len()];
            for ni in 0..n {
                let plane = &y[ni * hw..(ni + 1) * hw];
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for ((o, &p), &q) in
                        out[base..base + hw].iter_mut().zip(&x[base..base + hw]).zip(plane)
                    {
                        *o = f(p, q);
                    }
                }
            }
            ArrayD::from_shape_vec(av.raw_dim(), out).unwrap()
        }
        BroadcastKind::Generic => {
            let shape = broadcast_shape(av.shape(), bv.shape());
            let avb = av.broadcast(IxDyn(&shape)).expect("broadcast lhs");
            let bvb = bv.broadcast(IxDyn(&shape)).expect("broadcast rhs");
            let mut out = ArrayD::zeros(IxDyn(&shape));
            ndarray::Zip::from(&mut out).and(&avb).and(&bvb).for_each(|o, &x, &y| *o = f(x, y));
            out
        }
    }
}

/// Sum `value` down to `shape` (inverse of a broadcast).
fn reduce_value_to(value: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    match classify(value.shape(), shape) {
        BroadcastKind::ScalarRhs => {
            return ArrayD::from_elem(IxDyn(shape), value.sum());
        }
        BroadcastKind::ChannelRhs => {
            let s = value.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let x = value.as_slice().unwrap();
            let mut out = vec![0.0f64; c];
            for ni in 0..n {
                for (ci, acc) in out.iter_mut().enumerate() {
                    let base = (ni * c + ci) * hw;
                    *acc += x[base..base + hw].iter().sum::<f64>();
                }
            }
            return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        }
        BroadcastKind::PixelRhs => {
            let s = value.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let x = value.as_slice().unwrap();
            let mut out = vec![0.0f64; n * hw];
            for ni in 0..n {
                let plane = &mut out[ni * hw..(ni + 1) * hw];
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for (o, &p) in plane.iter_mut().zip(&x[base..base + hw]) {
                        *o += p;
                    }
                }
            }
            return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        }
        _ => {}
    }
    let mut v = value.clone();
    while v.ndim() > shape.len() {
        v = v.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in v.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if want == 1 && have != 1 {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(v.shape(), shape, "reduce_to produced wrong shape");
    v
}

/// Materialize a broadcast of `value` to `shape`.
fn broadcast_value_to(value: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    match classify(shape, value.shape()) {
        BroadcastKind::ScalarRhs => {
            let v = *value.iter().next().unwrap();
            return ArrayD::from_elem(IxDyn(shape), v);
        }
        BroadcastKind::ChannelRhs => {
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let y = value.as_slice().unwrap();
            let mut out = vec![0.0f64; n * c * hw];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    out[base..base + hw].fill(y[ci]);
                }
            }
            return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        }
        BroadcastKind::PixelRhs => {
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let y = value.as_slice().unwrap();
            let mut out = vec![0.0f64; n * c * hw];
            for ni in 0..n {
                let plane = &y[ni * hw..(ni + 1) * hw];
                for ci in 0..c {
                    out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].copy_from_slice(plane);
                }
            }
            return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        }
        _ => {}
    }
    value
        .broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", value.shape(), shape))
        .to_owned()
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

struct AddOp;
impl Backward for AddOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.reduce_to(inputs[0].shape())), Some(g.reduce_to(inputs[1].shape()))]
    }
}

struct SubOp;
impl Backward for SubOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![
            Some(g.reduce_to(inputs[0].shape())),
            Some(g.neg().reduce_to(inputs[1].shape())),
        ]
    }
}

struct MulOp;
impl Backward for MulOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![
            Some(g.mul(&inputs[1]).reduce_to(inputs[0].shape())),
            Some(g.mul(&inputs[0]).reduce_to(inputs[1].shape())),
        ]
    }
}

struct DivOp;
impl Backward for DivOp {
    fn backward(&self, g: &Var, inputs: &[Var], out: &Var) -> Vec<Option<Var>> {
        // d(a/b)/da = 1/b, d(a/b)/db = -a/b^2 = -out/b
        vec![
            Some(g.div(&inputs[1]).reduce_to(inputs[0].shape())),
            Some(g.mul(out).div(&inputs[1]).neg().reduce_to(inputs[1].shape())),
        ]
    }
}

struct AddScalarOp;
impl Backward for AddScalarOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone())]
    }
}

struct MulScalarOp(f64);
impl Backward for MulScalarOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul_scalar(self.0))]
    }
}

struct NegOp;
impl Backward for NegOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.neg())]
    }
}

struct ExpOp;
impl Backward for ExpOp {
    fn backward(&self, g: &Var, _inputs: &[Var], out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul(out))]
    }
}

struct LnOp;
impl Backward for LnOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.div(&inputs[0]))]
    }
}

struct SqrtOp;
impl Backward for SqrtOp {
    fn backward(&self, g: &Var, _inputs: &[Var], out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul_scalar(0.5).div(out))]
    }
}

struct SigmoidOp;
impl Backward for SigmoidOp {
    fn backward(&self, g: &Var, _inputs: &[Var], out: &Var) -> Vec<Option<Var>> {
        let one_minus = out.neg().add_scalar(1.0);
        vec![Some(g.mul(out).mul(&one_minus))]
    }
}

struct SoftplusOp;
impl Backward for SoftplusOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul(&inputs[0].sigmoid()))]
    }
}

/// Fixed 0/1 mask; used by relu and clamp whose derivative is piecewise
/// constant in the input value.
struct MaskOp(ArrayD<f64>);
impl Backward for MaskOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul(&Var::constant(self.0.clone())))]
    }
}

struct SumAllOp;
impl Backward for SumAllOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.broadcast_to(inputs[0].shape()))]
    }
}

struct SumAxisOp;
impl Backward for SumAxisOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.broadcast_to(inputs[0].shape()))]
    }
}

struct BroadcastToOp;
impl Backward for BroadcastToOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.reduce_to(inputs[0].shape()))]
    }
}

struct ReduceToOp;
impl Backward for ReduceToOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.broadcast_to(inputs[0].shape()))]
    }
}

struct ReshapeOp;
impl Backward for ReshapeOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.reshape(inputs[0].shape()))]
    }
}

struct PermuteOp(Vec<usize>);
impl Backward for PermuteOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        let mut inverse = vec![0usize; self.0.len()];
        for (i, &ax) in self.0.iter().enumerate() {
            inverse[ax] = i;
        }
        vec![Some(g.permute(&inverse))]
    }
}

/// C = A · B
struct MatmulOp;
impl Backward for MatmulOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.matmul_nt(&inputs[1])), Some(inputs[0].matmul_tn(g))]
    }
}

/// C = Aᵀ · B
struct MatmulTnOp;
impl Backward for MatmulTnOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(inputs[1].matmul_nt(g)), Some(inputs[0].matmul(g))]
    }
}

/// C = A · Bᵀ
struct MatmulNtOp;
impl Backward for MatmulNtOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.matmul(&inputs[1])), Some(g.matmul_tn(&inputs[0]))]
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

struct Im2ColOp(ConvGeom);
impl Backward for Im2ColOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.col2im(self.0))]
    }
}

struct Col2ImOp(ConvGeom);
impl Backward for Col2ImOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.im2col(self.0.k, self.0.pad))]
    }
}

struct ConcatOp {
    axis: usize,
    sizes: Vec<usize>,
}
impl Backward for ConcatOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        let mut start = 0usize;
        let mut grads = Vec::with_capacity(self.sizes.len());
        for &len in &self.sizes {
            grads.push(Some(g.narrow(self.axis, start, len)));
            start += len;
        }
        grads
    }
}

struct NarrowOp {
    axis: usize,
    start: usize,
}
impl Backward for NarrowOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.pad_zero(self.axis, self.start, inputs[0].shape()[self.axis]))]
    }
}

struct PadZeroOp {
    axis: usize,
    start: usize,
}
impl Backward for PadZeroOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.narrow(self.axis, self.start, inputs[0].shape()[self.axis]))]
    }
}

/// `[N*H*W, C]` pixel rows to `[N,C,H,W]` planes; its backward is the
/// inverse movement.
struct RowsToNchwOp {
    n: usize,
    h: usize,
    w: usize,
}
impl Backward for RowsToNchwOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.nchw_to_rows())]
    }
}

struct NchwToRowsOp;
impl Backward for NchwToRowsOp {
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        let s = inputs[0].shape();
        vec![Some(g.rows_to_nchw(s[0], s[2], s[3]))]
    }
}

struct UpsampleOp(usize);
impl Backward for UpsampleOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.block_sum(self.0))]
    }
}

struct BlockSumOp(usize);
impl Backward for BlockSumOp {
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.upsample_nearest(self.0))]
    }
}

// ---------------------------------------------------------------------------
// Var op surface
// ---------------------------------------------------------------------------

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let v = bin_values(self, other, |a, b| a + b);
        make(v, vec![self.clone(), other.clone()], Box::new(AddOp))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = bin_values(self, other, |a, b| a - b);
        make(v, vec![self.clone(), other.clone()], Box::new(SubOp))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = bin_values(self, other, |a, b| a * b);
        make(v, vec![self.clone(), other.clone()], Box::new(MulOp))
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = bin_values(self, other, |a, b| a / b);
        make(v, vec![self.clone(), other.clone()], Box::new(DivOp))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        make(self.value().mapv(|x| x + c), vec![self.clone()], Box::new(AddScalarOp))
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        make(self.value().mapv(|x| x * c), vec![self.clone()], Box::new(MulScalarOp(c)))
    }

    pub fn neg(&self) -> Var {
        make(self.value().mapv(|x| -x), vec![self.clone()], Box::new(NegOp))
    }

    pub fn exp(&self) -> Var {
        make(self.value().mapv(f64::exp), vec![self.clone()], Box::new(ExpOp))
    }

    pub fn ln(&self) -> Var {
        make(self.value().mapv(f64::ln), vec![self.clone()], Box::new(LnOp))
    }

    pub fn sqrt(&self) -> Var {
        make(self.value().mapv(f64::sqrt), vec![self.clone()], Box::new(SqrtOp))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        make(v, vec![self.clone()], Box::new(SigmoidOp))
    }

    /// `ln(1 + e^x)` evaluated stably.
    pub fn softplus(&self) -> Var {
        let v = self.value().mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        make(v, vec![self.clone()], Box::new(SoftplusOp))
    }

    pub fn relu(&self) -> Var {
        let mask = self.value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let v = self.value().mapv(|x| x.max(0.0));
        make(v, vec![self.clone()], Box::new(MaskOp(mask)))
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let mask = self.value().mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
        let v = self.value().mapv(|x| x.clamp(lo, hi));
        make(v, vec![self.clone()], Box::new(MaskOp(mask)))
    }

    pub fn sum_all(&self) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        make(v, vec![self.clone()], Box::new(SumAllOp))
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&self, axis: usize) -> Var {
        let v = if self.shape().len() == 4 && axis == 1 {
            let mut target = self.shape().to_vec();
            target[1] = 1;
            reduce_value_to(self.value(), &target)
        } else {
            self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis))
        };
        make(v, vec![self.clone()], Box::new(SumAxisOp))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let v = broadcast_value_to(self.value(), shape);
        make(v, vec![self.clone()], Box::new(BroadcastToOp))
    }

    /// Sum down to `shape` (the adjoint of broadcasting).
    pub fn reduce_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let v = reduce_value_to(self.value(), shape);
        make(v, vec![self.clone()], Box::new(ReduceToOp))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size");
        make(v, vec![self.clone()], Box::new(ReshapeOp))
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let v = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        make(v, vec![self.clone()], Box::new(PermuteOp(axes.to_vec())))
    }

    fn as_2d(&self) -> ndarray::ArrayView2<'_, f64> {
        self.value().view().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
    }

    /// `self · other` for 2-d tensors.
    pub fn matmul(&self, other: &Var) -> Var {
        let v = self.as_2d().dot(&other.as_2d()).into_dyn();
        make(v, vec![self.clone(), other.clone()], Box::new(MatmulOp))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Var) -> Var {
        let v = self.as_2d().t().dot(&other.as_2d()).into_dyn();
        make(v, vec![self.clone(), other.clone()], Box::new(MatmulTnOp))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Var) -> Var {
        let v = self.as_2d().dot(&other.as_2d().t()).into_dyn();
        make(v, vec![self.clone(), other.clone()], Box::new(MatmulNtOp))
    }

    /// Unfold `[N,C,H,W]` into `[N·H·W, C·k·k]` patches (stride 1).
    pub fn im2col(&self, k: usize, pad: usize) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 4, "im2col expects NCHW");
        let geom = ConvGeom { n: s[0], c: s[1], h: s[2], w: s[3], k, pad };
        assert_eq!(s[2] + 2 * pad + 1, s[2] + k, "im2col supports same-size output only");
        let v = im2col_value(self.value(), geom);
        make(v, vec![self.clone()], Box::new(Im2ColOp(geom)))
    }

    fn col2im(&self, geom: ConvGeom) -> Var {
        let v = col2im_value(self.value(), geom);
        make(v, vec![self.clone()], Box::new(Col2ImOp(geom)))
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shapes")
            .as_standard_layout()
            .to_owned();
        let sizes = parts.iter().map(|p| p.shape()[axis]).collect();
        make(v, parts.to_vec(), Box::new(ConcatOp { axis, sizes }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value()
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        make(v, vec![self.clone()], Box::new(NarrowOp { axis, start }))
    }

    fn pad_zero(&self, axis: usize, start: usize, full: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut v = ArrayD::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + self.shape()[axis]))
            .assign(self.value());
        make(v, vec![self.clone()], Box::new(PadZeroOp { axis, start }))
    }

    /// Rearrange `[N*H*W, C]` pixel rows into `[N,C,H,W]`.
    pub fn rows_to_nchw(&self, n: usize, h: usize, w: usize) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], n * h * w, "row count disagrees with target shape");
        let c = s[1];
        let hw = h * w;
        let src = self.value().as_slice().unwrap();
        let mut out = vec![0.0f64; n * c * hw];
        for ni in 0..n {
            for p in 0..hw {
                let row = &src[(ni * hw + p) * c..(ni * hw + p + 1) * c];
                for (ci, &v) in row.iter().enumerate() {
                    out[(ni * c + ci) * hw + p] = v;
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        make(v, vec![self.clone()], Box::new(RowsToNchwOp { n, h, w }))
    }

    /// Rearrange `[N,C,H,W]` into `[N*H*W, C]` pixel rows.
    pub fn nchw_to_rows(&self) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let src = self.value().as_slice().unwrap();
        let mut out = vec![0.0f64; n * c * hw];
        for ni in 0..n {
            for p in 0..hw {
                let row = &mut out[(ni * hw + p) * c..(ni * hw + p + 1) * c];
                for (ci, v) in row.iter_mut().enumerate() {
                    *v = src[(ni * c + ci) * hw + p];
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n * hw, c]), out).unwrap();
        make(v, vec![self.clone()], Box::new(NchwToRowsOp))
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Var {
        let v = upsample_value(self.value(), factor);
        make(v, vec![self.clone()], Box::new(UpsampleOp(factor)))
    }

    /// Sum over non-overlapping `factor × factor` blocks of `[N,C,H,W]`.
    pub fn block_sum(&self, factor: usize) -> Var {
        let v = block_sum_value(self.value(), factor);
        make(v, vec![self.clone()], Box::new(BlockSumOp(factor)))
    }

    /// Mean over non-overlapping 2x2 blocks.
    pub fn avg_pool2(&self) -> Var {
        self.block_sum(2).mul_scalar(0.25)
    }
}

// ---------------------------------------------------------------------------
// data-movement kernels
// ---------------------------------------------------------------------------

fn im2col_value(x: &ArrayD<f64>, g: ConvGeom) -> ArrayD<f64> {
    let ConvGeom { n, c, h, w, k, pad } = g;
    let src = x.as_slice().expect("im2col: non-contiguous input");
    let cols_w = c * k * k;
    let mut out = vec![0.0f64; n * h * w * cols_w];
    // writes are strictly sequential (one output row per pixel); interior
    // pixels copy k contiguous input elements per (channel, kernel-row)
    for ni in 0..n {
        let batch = &src[ni * c * h * w..(ni + 1) * c * h * w];
        for i in 0..h {
            for j in 0..w {
                let row = &mut out[((ni * h + i) * w + j) * cols_w..][..cols_w];
                let interior =
                    i >= pad && i + k <= h + pad && j >= pad && j + k <= w + pad;
                for ci in 0..c {
                    let plane = &batch[ci * h * w..(ci + 1) * h * w];
                    if interior {
                        for di in 0..k {
                            let si = i + di - pad;
                            let so = si * w + j - pad;
                            row[(ci * k + di) * k..(ci * k + di) * k + k]
                                .copy_from_slice(&plane[so..so + k]);
                        }
                    } else {
                        for di in 0..k {
                            let si = (i + di) as isize - pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let prow = &plane[si as usize * w..(si as usize + 1) * w];
                            for dj in 0..k {
                                let sj = (j + dj) as isize - pad as isize;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                row[(ci * k + di) * k + dj] = prow[sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n * h * w, cols_w]), out).unwrap()
}

fn col2im_value(cols: &ArrayD<f64>, g: ConvGeom) -> ArrayD<f64> {
    let ConvGeom { n, c, h, w, k, pad } = g;
    let src = cols.as_slice().expect("col2im: non-contiguous input");
    let cols_w = c * k * k;
    assert_eq!(cols.shape(), &[n * h * w, cols_w]);
    let mut out = vec![0.0f64; n * c * h * w];
    for ni in 0..n {
        let batch = &mut out[ni * c * h * w..(ni + 1) * c * h * w];
        for i in 0..h {
            for j in 0..w {
                let row = &src[((ni * h + i) * w + j) * cols_w..][..cols_w];
                let interior =
                    i >= pad && i + k <= h + pad && j >= pad && j + k <= w + pad;
                for ci in 0..c {
                    let plane = &mut batch[ci * h * w..(ci + 1) * h * w];
                    if interior {
                        for di in 0..k {
                            let si = i + di - pad;
                            let so = si * w + j - pad;
                            for (p, &v) in plane[so..so + k]
                                .iter_mut()
                                .zip(&row[(ci * k + di) * k..(ci * k + di) * k + k])
                            {
                                *p += v;
                            }
                        }
                    } else {
                        for di in 0..k {
                            let si = (i + di) as isize - pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for dj in 0..k {
                                let sj = (j + dj) as isize - pad as isize;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                plane[si as usize * w + sj as usize] +=
                                    row[(ci * k + di) * k + dj];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

fn upsample_value(x: &ArrayD<f64>, f: usize) -> ArrayD<f64> {
    let s = x.shape();
    assert_eq!(s.len(), 4);
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = x.as_slice().unwrap();
    let mut out = vec![0.0f64; n * c * h * f * w * f];
    let (oh, ow) = (h * f, w * f);
    for p in 0..n * c {
        let sp = &src[p * h * w..(p + 1) * h * w];
        let dp = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let si = i / f;
            for j in 0..ow {
                dp[i * ow + j] = sp[si * w + j / f];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap()
}

fn block_sum_value(x: &ArrayD<f64>, f: usize) -> ArrayD<f64> {
    let s = x.shape();
    assert_eq!(s.len(), 4);
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % f == 0 && w % f == 0, "block_sum: size not divisible by factor");
    let (oh, ow) = (h / f, w / f);
    let src = x.as_slice().unwrap();
    let mut out = vec![0.0f64; n * c * oh * ow];
    for p in 0..n * c {
        let sp = &src[p * h * w..(p + 1) * h * w];
        let dp = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            let oi = i / f;
            for j in 0..w {
                dp[oi * ow + j / f] += sp[i * w + j];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap()
}

// ---------------------------------------------------------------------------
// composite ops
// ---------------------------------------------------------------------------

/// Fused stable log-softmax. Backward is `g - softmax * sum(g)` built from
/// graph ops (softmax recovered as `exp(output)`), so it stays
/// differentiable to any order.
struct LogSoftmaxOp(usize);
impl Backward for LogSoftmaxOp {
    fn backward(&self, g: &Var, _inputs: &[Var], out: &Var) -> Vec<Option<Var>> {
        let sm = out.exp();
        let gsum = g.sum_axis_keep(self.0);
        vec![Some(g.sub(&sm.mul(&gsum)))]
    }
}

fn log_softmax_values(x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    if x.ndim() == 4 && axis == 1 {
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = x.as_slice().unwrap();
        let mut out = vec![0.0f64; src.len()];
        for ni in 0..n {
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(src[(ni * c + ci) * hw + p]);
                }
                let mut lse = 0.0;
                for ci in 0..c {
                    lse += (src[(ni * c + ci) * hw + p] - m).exp();
                }
                let lse = lse.ln() + m;
                for ci in 0..c {
                    let idx = (ni * c + ci) * hw + p;
                    out[idx] = src[idx] - lse;
                }
            }
        }
        return ArrayD::from_shape_vec(x.raw_dim(), out).unwrap();
    }
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        for v in lane.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Log-softmax along `axis`, numerically stable.
pub fn log_softmax(x: &Var, axis: usize) -> Var {
    let v = log_softmax_values(x.value(), axis);
    make(v, vec![x.clone()], Box::new(LogSoftmaxOp(axis)))
}

pub fn softmax(x: &Var, axis: usize) -> Var {
    log_softmax(x, axis).exp()
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

/// Gradients of a scalar `output` with respect to each var in `wrt`.
///
/// Returned vars are graph nodes; calling `grad` on a function of them
/// yields second-order derivatives. Vars in `wrt` with no path to `output`
/// get a zero gradient.
pub fn grad(output: &Var, wrt: &[&Var]) -> Vec<Var> {
    assert_eq!(output.value().len(), 1, "grad expects a scalar output");

    // Reachable sub-graph, gradient-carrying nodes only.
    let mut reachable: HashMap<u64, Var> = HashMap::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.needs_grad() || reachable.contains_key(&v.id()) {
            continue;
        }
        for p in &v.node.parents {
            stack.push(p.clone());
        }
        reachable.insert(v.id(), v);
    }

    // Node ids increase construction order, so descending id is a valid
    // reverse topological order.
    let mut order: Vec<u64> = reachable.keys().copied().collect();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.id(), Var::constant(ArrayD::from_elem(output.value().raw_dim(), 1.0)));

    for id in order {
        let var = &reachable[&id];
        let Some(g) = grads.get(&id).cloned() else { continue };
        let Some(op) = var.node.op.as_ref() else { continue };
        let contribs = op.backward(&g, &var.node.parents, var);
        debug_assert_eq!(contribs.len(), var.node.parents.len());
        for (parent, contrib) in var.node.parents.iter().zip(contribs) {
            if !parent.needs_grad() {
                continue;
            }
            let Some(c) = contrib else { continue };
            assert_eq!(
                c.shape(),
                parent.shape(),
                "backward produced wrong gradient shape"
            );
            grads
                .entry(parent.id())
                .and_modify(|acc| *acc = acc.add(&c))
                .or_insert(c);
        }
    }

    wrt.iter()
        .map(|w| {
            grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(ArrayD::zeros(w.value().raw_dim())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn leaf1(v: &[f64]) -> Var {
        Var::leaf(arr1(v).into_dyn())
    }

    /// Central finite differences of `f` at `x`.
    fn finite_diff(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn check_grad(f: &dyn Fn(&Var) -> Var, x: ArrayD<f64>, tol: f64) {
        let leaf = Var::leaf(x.clone());
        let out = f(&leaf);
        let g = grad(&out, &[&leaf]).remove(0);
        let fd = finite_diff(&|arr| f(&Var::constant(arr.clone())).item(), &x, 1e-5);
        for (a, n) in g.value().iter().zip(fd.iter()) {
            let denom = 1.0f64.max(n.abs());
            assert!(
                (a - n).abs() / denom < tol,
                "grad mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let x = arr1(&[0.3, -1.2, 2.0, 0.7]).into_dyn();
        check_grad(&|v| v.exp().sum_all(), x.clone(), 1e-7);
        check_grad(&|v| v.mul(v).sum_all(), x.clone(), 1e-7);
        check_grad(&|v| v.sigmoid().sum_all(), x.clone(), 1e-7);
        check_grad(&|v| v.softplus().sum_all(), x.clone(), 1e-7);
        check_grad(&|v| v.relu().sum_all(), x.clone(), 1e-6);
        check_grad(&|v| v.add_scalar(3.0).ln().sum_all(), x.clone(), 1e-7);
        check_grad(&|v| v.mul_scalar(0.5).clamp(-0.5, 0.9).sum_all(), x.clone(), 1e-6);
        check_grad(
            &|v| {
                let w = Var::constant(arr1(&[1.0, -2.0, 0.5, 3.0]).into_dyn());
                v.mul(&w).div(&v.mul(v).add_scalar(1.0)).sum_all()
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn broadcast_grads_reduce_correctly() {
        let a = Var::leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Var::leaf(arr1(&[10.0, 20.0]).into_dyn());
        let out = a.mul(&b).sum_all();
        let gs = grad(&out, &[&a, &b]);
        assert_eq!(gs[0].value().as_slice().unwrap(), &[10.0, 20.0, 10.0, 20.0]);
        // db sums over the broadcast rows: [1+3, 2+4]
        assert_eq!(gs[1].value().as_slice().unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_variants_match_finite_differences() {
        let a = arr2(&[[0.5, -1.0, 2.0], [1.5, 0.3, -0.7]]).into_dyn();
        let b = arr2(&[[1.0, 0.2], [-0.4, 0.9], [2.0, -1.0]]).into_dyn();
        let bi = Var::constant(b.clone());
        check_grad(&|v| v.matmul(&bi).mul(&v.matmul(&bi)).sum_all(), a.clone(), 1e-6);

        let av = Var::leaf(a.clone());
        let bv = Var::leaf(b.clone());
        let out = av.matmul(&bv).sum_all();
        let gs = grad(&out, &[&av, &bv]);
        let fd_a = finite_diff(
            &|arr| Var::constant(arr.clone()).matmul(&Var::constant(b.clone())).sum_all().item(),
            &a,
            1e-6,
        );
        for (x, y) in gs[0].value().iter().zip(fd_a.iter()) {
            assert!((x - y).abs() < 1e-6);
        }

        // tn/nt agree with explicit permute-then-matmul
        let t1 = av.matmul_tn(&av);
        let t2 = av.permute(&[1, 0]).matmul(&av);
        assert!(t1.value().iter().zip(t2.value()).all(|(a, b)| (a - b).abs() < 1e-12));
        let n1 = av.matmul_nt(&av);
        let n2 = av.matmul(&av.permute(&[1, 0]));
        assert!(n1.value().iter().zip(n2.value()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn im2col_and_pooling_are_exact_transpose_pairs() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 4, 4]),
            (0..32).map(|i| i as f64 * 0.37 - 3.0).collect(),
        )
        .unwrap();
        check_grad(&|v| v.im2col(3, 1).mul(&v.im2col(3, 1)).sum_all(), x.clone(), 1e-6);
        check_grad(&|v| v.avg_pool2().mul(&v.avg_pool2()).sum_all(), x.clone(), 1e-6);
        check_grad(
            &|v| v.upsample_nearest(2).mul(&v.upsample_nearest(2)).sum_all(),
            x.clone(),
            1e-6,
        );
        check_grad(
            &|v| {
                let parts = [v.narrow(1, 0, 1), v.narrow(1, 1, 1)];
                Var::concat(&parts, 1).mul(&v).sum_all()
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_check() {
        let x = arr2(&[[2.0, 0.0, -1.0], [0.3, 0.3, 0.3]]).into_dyn();
        let sm = softmax(&Var::constant(x.clone()), 1);
        for row in sm.value().view().into_dimensionality::<Ix2>().unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let target = Var::constant(arr2(&[[1.0, 0.0, 0.0], [0.0, 0.5, 0.5]]).into_dyn());
        check_grad(
            &|v| log_softmax(v, 1).mul(&target).sum_all().neg(),
            x,
            1e-6,
        );
    }

    #[test]
    fn second_order_grad_of_cube_is_six_x() {
        let x = Var::leaf(arr1(&[1.5]).into_dyn());
        let y = x.mul(&x).mul(&x).sum_all();
        let g1 = grad(&y, &[&x]).remove(0); // 3x^2
        let g2 = grad(&g1.sum_all(), &[&x]).remove(0); // 6x
        assert!((g1.value()[[0]] - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        assert!((g2.value()[[0]] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn second_order_through_inner_gradient_step() {
        // Toy bi-level problem: L_cal(th, psi) = (th - psi^2)^2,
        // th' = th - a * dL_cal/dth, L_out = th'^2.
        // dL_out/dpsi = 2 th' * (-a) * d/dpsi(2(th - psi^2)) = 2 th' * 4 a psi.
        let a = 0.3;
        let th0 = 0.8;
        let psi0 = 0.6;
        let psi = Var::leaf(arr1(&[psi0]).into_dyn());
        let th = Var::leaf(arr1(&[th0]).into_dyn());
        let diff = th.sub(&psi.mul(&psi));
        let l_cal = diff.mul(&diff).sum_all();
        let g_th = grad(&l_cal, &[&th]).remove(0);
        let th_new = th.sub(&g_th.mul_scalar(a));
        let l_out = th_new.mul(&th_new).sum_all();
        let g_psi = grad(&l_out, &[&psi]).remove(0);

        let th_new_expected = th0 - a * 2.0 * (th0 - psi0 * psi0);
        let expected = 2.0 * th_new_expected * 4.0 * a * psi0;
        assert!(
            (g_psi.value()[[0]] - expected).abs() < 1e-12,
            "got {} want {}",
            g_psi.value()[[0]],
            expected
        );
    }

    #[test]
    fn grad_is_zero_for_unreachable_leaf() {
        let x = leaf1(&[1.0, 2.0]);
        let y = leaf1(&[3.0]);
        let out = x.sum_all();
        let g = grad(&out, &[&y]).remove(0);
        assert_eq!(g.value().as_slice().unwrap(), &[0.0]);
    }
}
