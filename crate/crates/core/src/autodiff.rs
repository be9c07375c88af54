//! Define-by-run reverse-mode differentiation over a closed set of tensor
//! operators.
//!
//! Every operator evaluates eagerly when it is recorded, so a [`Graph`] is
//! both the forward computation and its tape. Tensors are flat row-major
//! buffers; each operator documents the shape it interprets its inputs with.
//! Constants (inputs, noise draws, targets) never receive gradients.

use std::fmt::Debug;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar the model can be evaluated in.
pub trait Real: Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Softplus,
    Gelu,
    Exp,
}

/// Padding used by [`Graph::conv2d`]: rows (latitude) replicate the edge
/// value, columns (longitude) wrap around.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T, T),
    Unary(Var, Unary),
    Gather(Var, Arc<[u32]>),
    Concat(Vec<Var>),
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Softmax { x: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, stats: Vec<(T, T)> },
    Conv2d { x: Var, w: Var, b: Var, shape: ConvShape },
    ChannelMean { x: Var, c: usize },
    ChannelMax { x: Var, argmax: Vec<u32> },
    BlockMean { x: Var, c: usize, h: usize, w: usize, p: usize },
    WeightedMse { pred: Var, target: Arc<[T]>, row_w: Arc<[T]>, h: usize, w: usize },
    Sum(Var),
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, param: usize) -> Option<&[T]> {
        self.grads.get(param).and_then(|g| g.as_deref())
    }

    pub fn into_inner(self) -> Vec<Option<Vec<T>>> {
        self.grads
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

const LN_EPS: f64 = 1e-5;

/// Builds the replicate/circular padded copy of a `[c, h, w]` field for a
/// `k × k` stencil (k odd).
fn pad_field<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = k / 2;
    let hp = h + 2 * r;
    let wp = w + 2 * r;
    let mut out = vec![T::zero(); c * hp * wp];
    for ch in 0..c {
        for pi in 0..hp {
            let si = (pi as isize - r as isize).clamp(0, h as isize - 1) as usize;
            let src = &x[(ch * h + si) * w..(ch * h + si + 1) * w];
            let dst = &mut out[(ch * hp + pi) * wp..(ch * hp + pi + 1) * wp];
            for (pj, d) in dst.iter_mut().enumerate() {
                let sj = (pj as isize - r as isize).rem_euclid(w as isize) as usize;
                *d = src[sj];
            }
        }
    }
    out
}

fn unpad_grad<T: Real>(gp: &[T], gx: &mut [T], c: usize, h: usize, w: usize, k: usize) {
    let r = k / 2;
    let hp = h + 2 * r;
    let wp = w + 2 * r;
    for ch in 0..c {
        for pi in 0..hp {
            let si = (pi as isize - r as isize).clamp(0, h as isize - 1) as usize;
            for pj in 0..wp {
                let sj = (pj as isize - r as isize).rem_euclid(w as isize) as usize;
                gx[(ch * h + si) * w + sj] += gp[(ch * hp + pi) * wp + pj];
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn constant(&mut self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), numel(shape), "constant shape");
        self.push(value, shape.to_vec(), Op::Constant, false)
    }

    pub fn param(&mut self, id: usize, value: &[T], shape: &[usize]) -> Var {
        assert_eq!(value.len(), numel(shape), "param shape");
        self.push(value.to_vec(), shape.to_vec(), Op::Param(id), true)
    }

    /// Reinterprets a node with a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), self.value(x).len(), "reshape element count");
        let idx: Arc<[u32]> = (0..numel(shape) as u32).collect();
        self.gather(x, idx, shape)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise operands must match");
        let out = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, Op::Affine(x, scale, shift), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Gelu => gelu,
            Unary::Exp => T::exp,
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, Op::Unary(x, kind), ng)
    }

    /// `out[i] = x[idx[i]]`. Covers reshapes, permutations, slicing and
    /// broadcasting (repeated indices).
    pub fn gather(&mut self, x: Var, idx: Arc<[u32]>, shape: &[usize]) -> Var {
        assert_eq!(idx.len(), numel(shape), "gather shape");
        let src = self.value(x);
        let out = idx.iter().map(|&i| src[i as usize]).collect();
        let ng = self.ng(x);
        self.push(out, shape.to_vec(), Op::Gather(x, idx), ng)
    }

    /// Concatenates flattened inputs along the leading axis. All inputs must
    /// share the trailing dimensions of the first.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail: Vec<usize> = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat trailing dims");
            lead += self.shape(p)[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, shape, Op::Concat(parts.to_vec()), ng)
    }

    /// `x: [rows, din]`, `w: [din, dout]`, optional `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let din = *xs.last().expect("linear input rank");
        let rows = self.value(x).len() / din.max(1);
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear weight rank");
        assert_eq!(ws[0], din, "linear inner dimension");
        let dout = ws[1];
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), dout, "linear bias");
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv);
            }
        }
        for r in 0..rows {
            let orow = &mut out[r * dout..(r + 1) * dout];
            for kk in 0..din {
                let a = xv[r * din + kk];
                if a != T::zero() {
                    axpy(a, &wv[kk * dout..(kk + 1) * dout], orow);
                }
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("rank") = dout;
        let ng = self.ng(x) || self.ng(w) || b.map_or(false, |b| self.ng(b));
        self.push(out, shape, Op::Linear { x, w, b, rows, din, dout }, ng)
    }

    /// Batched matrix product. `a: [batch, m, k]`; `b: [batch, k, n]`, or
    /// `[batch, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), batch * m * k, "bmm lhs");
        assert_eq!(bv.len(), batch * k * n, "bmm rhs");
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = &bv[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let arow = &ab[i * k..(i + 1) * k];
                let orow = &mut ob[i * n..(i + 1) * n];
                if trans_b {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o = dot(arow, &bb[j * k..(j + 1) * k]);
                    }
                } else {
                    for (p, &aip) in arow.iter().enumerate() {
                        axpy(aip, &bb[p * n..(p + 1) * n], orow);
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, vec![batch, m, n], Op::Bmm { a, b, batch, m, k, n, trans_b }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().expect("softmax rank");
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for (orow, xrow) in out.chunks_mut(cols).zip(xv.chunks(cols)) {
            let mx = xrow.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = (v - mx).exp();
                s += *o;
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, Op::Softmax { x, cols }, ng)
    }

    /// Layer normalisation over the last axis with learned scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let cols = *self.shape(x).last().expect("layer_norm rank");
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!(gv.len(), cols);
        assert_eq!(bv.len(), cols);
        let n = T::from_usize(cols).unwrap();
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(xv.len() / cols);
        for (orow, xrow) in out.chunks_mut(cols).zip(xv.chunks(cols)) {
            let mean = xrow.iter().copied().sum::<T>() / n;
            let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
            for (c, (o, &v)) in orow.iter_mut().zip(xrow).enumerate() {
                *o = (v - mean) * rstd * gv[c] + bv[c];
            }
            stats.push((mean, rstd));
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, shape, Op::LayerNorm { x, gamma, beta, cols, stats }, ng)
    }

    /// `k × k` convolution of a `[cin, h, w]` field to `[cout, h, w]` with
    /// replicate padding in rows and circular padding in columns.
    /// `w: [cout, cin, k, k]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "odd kernel");
        let xs = self.shape(x);
        assert_eq!(xs.len(), 3, "conv input rank");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w);
        assert_eq!(ws.len(), 4, "conv weight rank");
        assert_eq!((ws[1], ws[2], ws[3]), (cin, k, k), "conv weight shape");
        let cout = ws[0];
        let shape = ConvShape { cin, cout, h, w: wd, k };
        let xpad = pad_field(self.value(x), cin, h, wd, k);
        let (wv, bv) = (self.value(w), self.value(b));
        assert_eq!(bv.len(), cout, "conv bias");
        let (hp, wp) = (h + k - 1, wd + k - 1);
        let mut out = vec![T::zero(); cout * h * wd];
        for co in 0..cout {
            let ob = &mut out[co * h * wd..(co + 1) * h * wd];
            ob.iter_mut().for_each(|o| *o = bv[co]);
            for ci in 0..cin {
                for di in 0..k {
                    for dj in 0..k {
                        let wgt = wv[((co * cin + ci) * k + di) * k + dj];
                        if wgt == T::zero() {
                            continue;
                        }
                        for i in 0..h {
                            let src = &xpad[(ci * hp + i + di) * wp + dj..(ci * hp + i + di) * wp + dj + wd];
                            axpy(wgt, src, &mut ob[i * wd..(i + 1) * wd]);
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, vec![cout, h, wd], Op::Conv2d { x, w, b, shape }, ng)
    }

    /// Mean over the leading (channel) axis of `[c, ...]`, giving `[1, ...]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        let hw = self.value(x).len() / c;
        let xv = self.value(x);
        let mut out = vec![T::zero(); hw];
        for ch in 0..c {
            for (o, &v) in out.iter_mut().zip(&xv[ch * hw..(ch + 1) * hw]) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize(c).unwrap();
        out.iter_mut().for_each(|o| *o *= inv);
        let mut shape = xs;
        shape[0] = 1;
        let ng = self.ng(x);
        self.push(out, shape, Op::ChannelMean { x, c }, ng)
    }

    /// Max over the leading (channel) axis; ties go to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        let hw = self.value(x).len() / c;
        let xv = self.value(x);
        let mut out = xv[..hw].to_vec();
        let mut argmax = vec![0u32; hw];
        for ch in 1..c {
            for p in 0..hw {
                let v = xv[ch * hw + p];
                if v > out[p] {
                    out[p] = v;
                    argmax[p] = ch as u32;
                }
            }
        }
        let mut shape = xs;
        shape[0] = 1;
        let ng = self.ng(x);
        self.push(out, shape, Op::ChannelMax { x, argmax }, ng)
    }

    /// Per-channel mean over non-overlapping `p × p` windows, written back to
    /// every cell of its window (pool then nearest upsample). `x: [c, h, w]`.
    pub fn block_mean(&mut self, x: Var, p: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(h % p == 0 && w % p == 0, "block size must divide the field");
        let xv = self.value(x);
        let inv = T::one() / T::from_usize(p * p).unwrap();
        let mut out = vec![T::zero(); xv.len()];
        for ch in 0..c {
            for bi in 0..h / p {
                for bj in 0..w / p {
                    let mut s = T::zero();
                    for i in bi * p..(bi + 1) * p {
                        for j in bj * p..(bj + 1) * p {
                            s += xv[(ch * h + i) * w + j];
                        }
                    }
                    let m = s * inv;
                    for i in bi * p..(bi + 1) * p {
                        for j in bj * p..(bj + 1) * p {
                            out[(ch * h + i) * w + j] = m;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, xs, Op::BlockMean { x, c, h, w, p }, ng)
    }

    /// Latitude-weighted mean squared error against a constant target.
    /// `pred` is read as `[.., h, w]`; `row_w` holds one weight per row.
    pub fn weighted_mse(&mut self, pred: Var, target: Arc<[T]>, row_w: Arc<[T]>, h: usize, w: usize) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "loss target shape");
        assert_eq!(row_w.len(), h, "loss weights");
        assert_eq!(pv.len() % (h * w), 0, "loss grid shape");
        let mut s = T::zero();
        for (idx, (&p, &t)) in pv.iter().zip(target.iter()).enumerate() {
            let row = (idx / w) % h;
            let e = p - t;
            s += row_w[row] * e * e;
        }
        let loss = s / T::from_usize(pv.len()).unwrap();
        let ng = self.ng(pred);
        self.push(vec![loss], vec![1], Op::WeightedMse { pred, target, row_w, h, w }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![s], vec![1], Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar root; returns gradients of every parameter
    /// leaf reachable from it.
    pub fn backward(&self, root: Var) -> ParamGrads<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut pgrads: Vec<Option<Vec<T>>> = Vec::new();

        fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if pgrads.len() <= *id {
                        pgrads.resize_with(id + 1, || None);
                    }
                    match &mut pgrads[*id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        none => *none = Some(g),
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, &y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((x, &gy), &bb) in ga.iter_mut().zip(&g).zip(bv) {
                            *x += gy * bb;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for ((x, &gy), &aa) in gb.iter_mut().zip(&g).zip(av) {
                            *x += gy * aa;
                        }
                    }
                }
                Op::Affine(x, s, _) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(a, &b)| *a += *s * b);
                    }
                }
                Op::Unary(x, kind) => {
                    let xv = &nodes[x.0].value;
                    let yv = &node.value;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (j, a) in gx.iter_mut().enumerate() {
                            let d = match kind {
                                Unary::Sigmoid => yv[j] * (T::one() - yv[j]),
                                Unary::Softplus => sigmoid(xv[j]),
                                Unary::Gelu => gelu_grad(xv[j]),
                                Unary::Exp => yv[j],
                            };
                            *a += g[j] * d;
                        }
                    }
                }
                Op::Gather(x, idx) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (&ix, &gy) in idx.iter().zip(&g) {
                            gx[ix as usize] += gy;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        if let Some(gp) = slot(&mut grads, nodes, *p) {
                            gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, &b)| *a += b);
                        }
                        off += n;
                    }
                }
                Op::Linear { x, w, b, rows, din, dout } => {
                    let (rows, din, dout) = (*rows, *din, *dout);
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for r in 0..rows {
                            let grow = &g[r * dout..(r + 1) * dout];
                            for kk in 0..din {
                                gx[r * din + kk] += dot(grow, &wv[kk * dout..(kk + 1) * dout]);
                            }
                        }
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        for r in 0..rows {
                            let grow = &g[r * dout..(r + 1) * dout];
                            for kk in 0..din {
                                let a = xv[r * din + kk];
                                if a != T::zero() {
                                    axpy(a, grow, &mut gw[kk * dout..(kk + 1) * dout]);
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        if let Some(gb) = slot(&mut grads, nodes, *b) {
                            for grow in g.chunks(dout) {
                                gb.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                            }
                        }
                    }
                }
                Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for bi in 0..batch {
                            let bb = &bv[bi * k * n..(bi + 1) * k * n];
                            for i in 0..m {
                                let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                                let garow = &mut ga[(bi * m + i) * k..(bi * m + i + 1) * k];
                                if *trans_b {
                                    for (j, &gy) in grow.iter().enumerate() {
                                        axpy(gy, &bb[j * k..(j + 1) * k], garow);
                                    }
                                } else {
                                    for (p, ga_p) in garow.iter_mut().enumerate() {
                                        *ga_p += dot(grow, &bb[p * n..(p + 1) * n]);
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for bi in 0..batch {
                            let ab = &av[bi * m * k..(bi + 1) * m * k];
                            let gbb = &mut gb[bi * k * n..(bi + 1) * k * n];
                            for i in 0..m {
                                let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                                let arow = &ab[i * k..(i + 1) * k];
                                if *trans_b {
                                    for (j, &gy) in grow.iter().enumerate() {
                                        axpy(gy, arow, &mut gbb[j * k..(j + 1) * k]);
                                    }
                                } else {
                                    for (p, &aip) in arow.iter().enumerate() {
                                        axpy(aip, grow, &mut gbb[p * n..(p + 1) * n]);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Softmax { x, cols } => {
                    let yv = &node.value;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((gxr, yr), gr) in gx.chunks_mut(*cols).zip(yv.chunks(*cols)).zip(g.chunks(*cols)) {
                            let s = dot(gr, yr);
                            for ((a, &y), &gy) in gxr.iter_mut().zip(yr).zip(gr) {
                                *a += y * (gy - s);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, cols, stats } => {
                    let cols = *cols;
                    let xv = &nodes[x.0].value;
                    let gv = &nodes[gamma.0].value;
                    let n = T::from_usize(cols).unwrap();
                    if let Some(ggam) = slot(&mut grads, nodes, *gamma) {
                        for (r, &(mean, rstd)) in stats.iter().enumerate() {
                            for c in 0..cols {
                                ggam[c] += g[r * cols + c] * (xv[r * cols + c] - mean) * rstd;
                            }
                        }
                    }
                    if let Some(gbet) = slot(&mut grads, nodes, *beta) {
                        for gr in g.chunks(cols) {
                            gbet.iter_mut().zip(gr).for_each(|(a, &v)| *a += v);
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, &(mean, rstd)) in stats.iter().enumerate() {
                            let xr = &xv[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let mut sum_g = T::zero();
                            let mut sum_gx = T::zero();
                            for c in 0..cols {
                                let gh = gr[c] * gv[c];
                                let xh = (xr[c] - mean) * rstd;
                                sum_g += gh;
                                sum_gx += gh * xh;
                            }
                            let (mg, mgx) = (sum_g / n, sum_gx / n);
                            for c in 0..cols {
                                let gh = gr[c] * gv[c];
                                let xh = (xr[c] - mean) * rstd;
                                gx[r * cols + c] += rstd * (gh - mg - xh * mgx);
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, shape } => {
                    let ConvShape { cin, cout, h, w: wd, k } = *shape;
                    let (hp, wp) = (h + k - 1, wd + k - 1);
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for co in 0..cout {
                            gb[co] += g[co * h * wd..(co + 1) * h * wd].iter().copied().sum::<T>();
                        }
                    }
                    let need_w = nodes[w.0].needs_grad;
                    let need_x = nodes[x.0].needs_grad;
                    if need_w || need_x {
                        let xpad = pad_field(&nodes[x.0].value, cin, h, wd, k);
                        let wv = &nodes[w.0].value;
                        if need_w {
                            let gw = slot(&mut grads, nodes, *w).expect("weight grad");
                            for co in 0..cout {
                                let gb_ = &g[co * h * wd..(co + 1) * h * wd];
                                for ci in 0..cin {
                                    for di in 0..k {
                                        for dj in 0..k {
                                            let mut s = T::zero();
                                            for i in 0..h {
                                                let base = (ci * hp + i + di) * wp + dj;
                                                s += dot(&gb_[i * wd..(i + 1) * wd], &xpad[base..base + wd]);
                                            }
                                            gw[((co * cin + ci) * k + di) * k + dj] += s;
                                        }
                                    }
                                }
                            }
                        }
                        if need_x {
                            let mut gp = vec![T::zero(); cin * hp * wp];
                            for co in 0..cout {
                                let gb_ = &g[co * h * wd..(co + 1) * h * wd];
                                for ci in 0..cin {
                                    for di in 0..k {
                                        for dj in 0..k {
                                            let wgt = wv[((co * cin + ci) * k + di) * k + dj];
                                            if wgt == T::zero() {
                                                continue;
                                            }
                                            for i in 0..h {
                                                let base = (ci * hp + i + di) * wp + dj;
                                                axpy(wgt, &gb_[i * wd..(i + 1) * wd], &mut gp[base..base + wd]);
                                            }
                                        }
                                    }
                                }
                            }
                            let gx = slot(&mut grads, nodes, *x).expect("input grad");
                            unpad_grad(&gp, gx, cin, h, wd, k);
                        }
                    }
                }
                Op::ChannelMean { x, c } => {
                    let hw = g.len();
                    let inv = T::one() / T::from_usize(*c).unwrap();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ch in 0..*c {
                            for (a, &gy) in gx[ch * hw..(ch + 1) * hw].iter_mut().zip(&g) {
                                *a += gy * inv;
                            }
                        }
                    }
                }
                Op::ChannelMax { x, argmax } => {
                    let hw = g.len();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (p, &ch) in argmax.iter().enumerate() {
                            gx[ch as usize * hw + p] += g[p];
                        }
                    }
                }
                Op::BlockMean { x, c, h, w, p } => {
                    let (c, h, w, p) = (*c, *h, *w, *p);
                    let inv = T::one() / T::from_usize(p * p).unwrap();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ch in 0..c {
                            for bi in 0..h / p {
                                for bj in 0..w / p {
                                    let mut s = T::zero();
                                    for i in bi * p..(bi + 1) * p {
                                        for j in bj * p..(bj + 1) * p {
                                            s += g[(ch * h + i) * w + j];
                                        }
                                    }
                                    let m = s * inv;
                                    for i in bi * p..(bi + 1) * p {
                                        for j in bj * p..(bj + 1) * p {
                                            gx[(ch * h + i) * w + j] += m;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::WeightedMse { pred, target, row_w, h, w } => {
                    let pv = &nodes[pred.0].value;
                    let scale = T::lit(2.0) * g[0] / T::from_usize(pv.len()).unwrap();
                    if let Some(gp) = slot(&mut grads, nodes, *pred) {
                        for (idx, a) in gp.iter_mut().enumerate() {
                            let row = (idx / w) % h;
                            *a += scale * row_w[row] * (pv[idx] - target[idx]);
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|a| *a += g[0]);
                    }
                }
            }
        }
        ParamGrads { grads: pgrads }
    }
}
