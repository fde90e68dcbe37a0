//! Dynamic reverse-mode tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node holding
//! its value and, when any input is tracked, a closure mapping the output
//! gradient to input gradients. Node ids are creation order, which is a
//! topological order, so the backward sweep is a single reverse scan.
//! A tape is consumed by one call to [`Tape::backward`].

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Upper bound on column-matrix elements per convolution GEMM.
const COL_BUDGET: usize = 1 << 23;

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<(usize, Vec<T>)>>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Rc<Vec<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    bindings: RefCell<Vec<(String, usize)>>,
    consumed: Cell<bool>,
    no_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Convolution geometry over (time, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    bindings: Vec<(String, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf variable.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Accumulates gradients of every bound parameter into `params`.
    pub fn write_to(&self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, id) in &self.bindings {
            if let Some(g) = &self.grads[*id] {
                if let Ok(t) = params.get_mut(name) {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            no_grad: false,
        }
    }

    /// A tape that never tracks gradients, for pure forward evaluation.
    pub fn inference() -> Self {
        Tape {
            no_grad: true,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Result<Var<'_, T>> {
        check_finite(op, &value)?;
        let requires_grad = requires_grad && !self.no_grad;
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Ok(Var { tape: self, id })
    }

    /// Records a leaf; it is tracked iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Result<Var<'_, T>> {
        self.push(
            "leaf",
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad,
            None,
        )
    }

    /// Untracked leaf from raw parts.
    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        let t = Tensor::from_vec(shape, data)?;
        self.push("constant", t.shape().to_vec(), t.into_data(), false, None)
    }

    /// Records a named parameter so [`Gradients::write_to`] can route its gradient.
    pub fn param(&self, params: &ParamSet<T>, name: &str) -> Result<Var<'_, T>> {
        let v = self.leaf(params.get(name)?)?;
        self.bindings.borrow_mut().push((name.to_string(), v.id));
        Ok(v)
    }

    pub fn concat(&self, parts: &[Var<'_, T>], axis: usize) -> Result<Var<'_, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::dim("concat", axis, format!("rank is {}", base.len())));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != base.len() {
                return Err(Error::dim("concat", axis, "rank mismatch"));
            }
            for (ax, (&a, &b)) in s.iter().zip(&base).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::dim("concat", ax, format!("{a} vs {b}")));
                }
            }
            dims.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&dims) {
                out.extend_from_slice(&v[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<(usize, bool)> = parts.iter().map(|p| (p.id, p.requires_grad())).collect();
        let rg = ids.iter().any(|&(_, r)| r);
        let back = move |g: &[T]| {
            let mut res = Vec::new();
            let mut offset = 0;
            for (&(id, r), &d) in ids.iter().zip(&dims) {
                if r {
                    let mut gi = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        gi.extend_from_slice(&g[start..start + d * inner]);
                    }
                    res.push((id, gi));
                }
                offset += d;
            }
            res
        };
        self.push("concat", shape, out, rg, Some(Box::new(back)))
    }

    /// Runs reverse accumulation from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::State("tape already consumed by a backward pass".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients {
                grads,
                bindings: self.bindings.borrow().clone(),
            });
        }
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(f) = nodes[id].backward.take() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (parent, pg) in f(&g) {
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.borrow().clone(),
        })
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&self.shape(), self.value().to_vec()).expect("node shape is consistent")
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let y: Vec<T> = x.iter().map(|&v| f(v)).collect();
        let yr = Rc::new(y.clone());
        let id = self.id;
        let back = move |g: &[T]| {
            let gx = g
                .iter()
                .zip(x.iter().zip(yr.iter()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![(id, gx)]
        };
        self.tape
            .push(op, self.shape(), y, self.requires_grad(), Some(Box::new(back)))
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn scale(&self, c: T) -> Result<Var<'t, T>> {
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    fn same_shape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != b.len() {
            return Err(Error::dim(op, 0, format!("rank {} vs {}", a.len(), b.len())));
        }
        if let Some(ax) = a.iter().zip(&b).position(|(x, y)| x != y) {
            return Err(Error::dim(op, ax, format!("{} vs {}", a[ax], b[ax])));
        }
        Ok(())
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        self.same_shape(other, op)?;
        let (a, b) = (self.value(), other.value());
        let y = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        let (ia, ib) = (self.id, other.id);
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        let back = move |g: &[T]| {
            let mut res = Vec::with_capacity(2);
            if ra {
                let ga = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&g, (&x, &y))| g * da(x, y))
                    .collect();
                res.push((ia, ga));
            }
            if rb {
                let gb = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&g, (&x, &y))| g * db(x, y))
                    .collect();
                res.push((ib, gb));
            }
            res
        };
        self.tape
            .push(op, self.shape(), y, ra || rb, Some(Box::new(back)))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = x.len();
        let s = x.iter().copied().sum();
        let id = self.id;
        let back = move |g: &[T]| vec![(id, vec![g[0]; n])];
        self.tape
            .push("sum", vec![1], vec![s], self.requires_grad(), Some(Box::new(back)))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = self.value().len();
        self.sum()?.scale(T::one() / T::of(n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let n: usize = shape.iter().product();
        let x = self.value();
        if n != x.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                0,
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        let id = self.id;
        let back = move |g: &[T]| vec![(id, g.to_vec())];
        self.tape.push(
            "reshape",
            shape.to_vec(),
            x.to_vec(),
            self.requires_grad(),
            Some(Box::new(back)),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim("narrow", axis, format!("rank is {}", shape.len())));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                axis,
                format!("range {start}..{} outside extent {}", start + len, shape[axis]),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * dim + start) * inner;
            out.extend_from_slice(&x[s..s + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let id = self.id;
        let total = x.len();
        let back = move |g: &[T]| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                let s = (o * dim + start) * inner;
                gx[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(id, gx)]
        };
        self.tape
            .push("narrow", oshape, out, self.requires_grad(), Some(Box::new(back)))
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let xs = self.shape();
        let ws = w.shape();
        if ws.len() != 2 {
            return Err(Error::dim("linear", 0, format!("weight must be rank 2, got {ws:?}")));
        }
        let (dout, din) = (ws[0], ws[1]);
        let last = xs.len() - 1;
        if xs[last] != din {
            return Err(Error::dim(
                "linear",
                last,
                format!("input features {} vs weight {din}", xs[last]),
            ));
        }
        if let Some(b) = b {
            if b.shape() != [dout] {
                return Err(Error::dim("linear", 0, format!("bias {:?} vs {dout}", b.shape())));
            }
        }
        let x = self.value();
        let wv = w.value();
        let rows = x.len() / din;
        let mut y = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = b.value();
            for r in 0..rows {
                y[r * dout..(r + 1) * dout].copy_from_slice(&bv);
            }
        }
        T::gemm(
            rows,
            din,
            dout,
            &x,
            din as isize,
            1,
            &wv,
            1,
            din as isize,
            T::one(),
            &mut y,
            dout as isize,
            1,
        );
        let mut oshape = xs.clone();
        oshape[last] = dout;
        let (ix, iw) = (self.id, w.id);
        let (rx, rw) = (self.requires_grad(), w.requires_grad());
        let bid = b.map(|b| (b.id, b.requires_grad()));
        let rb = bid.is_some_and(|(_, r)| r);
        let back = move |g: &[T]| {
            let mut res = Vec::with_capacity(3);
            if rx {
                let mut gx = vec![T::zero(); rows * din];
                T::gemm(
                    rows, dout, din, g, dout as isize, 1, &wv, din as isize, 1, T::zero(),
                    &mut gx, din as isize, 1,
                );
                res.push((ix, gx));
            }
            if rw {
                let mut gw = vec![T::zero(); dout * din];
                T::gemm(
                    dout, rows, din, g, 1, dout as isize, &x, din as isize, 1, T::zero(),
                    &mut gw, din as isize, 1,
                );
                res.push((iw, gw));
            }
            if let Some((ib, true)) = bid {
                let mut gb = vec![T::zero(); dout];
                for r in 0..rows {
                    for (a, &v) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                        *a = *a + v;
                    }
                }
                res.push((ib, gb));
            }
            res
        };
        self.tape
            .push("linear", oshape, y, rx || rw || rb, Some(Box::new(back)))
    }

    /// Plain matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", 0, "operands must be rank 2"));
        }
        if sa[1] != sb[0] {
            return Err(Error::dim("matmul", 1, format!("{} vs {}", sa[1], sb[0])));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), other.value());
        let mut y = vec![T::zero(); m * n];
        T::gemm(m, k, n, &a, k as isize, 1, &b, n as isize, 1, T::zero(), &mut y, n as isize, 1);
        let (ia, ib) = (self.id, other.id);
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        let back = move |g: &[T]| {
            let mut res = Vec::new();
            if ra {
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, n as isize, 1, &b, 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                res.push((ia, ga));
            }
            if rb {
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, &a, 1, k as isize, g, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                res.push((ib, gb));
            }
            res
        };
        self.tape
            .push("matmul", vec![m, n], y, ra || rb, Some(Box::new(back)))
    }

    /// Batched 3-D convolution: `[N, C, T, H, W]` with weight `[O, C, kt, kh, kw]`.
    pub fn conv3d(&self, w: &Var<'t, T>, b: &Var<'t, T>, geom: ConvGeom) -> Result<Var<'t, T>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 5 {
            return Err(Error::dim("conv3d", 0, format!("input must be rank 5, got {xs:?}")));
        }
        if ws.len() != 5 {
            return Err(Error::dim("conv3d", 0, format!("weight must be rank 5, got {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::dim("conv3d", 1, format!("input channels {} vs weight {}", xs[1], ws[1])));
        }
        if b.shape() != [ws[0]] {
            return Err(Error::dim("conv3d", 0, format!("bias {:?} vs {} filters", b.shape(), ws[0])));
        }
        if geom.stride.contains(&0) {
            return Err(Error::Config("conv3d stride must be positive".into()));
        }
        let mut out_sp = [0usize; 3];
        for a in 0..3 {
            let padded = xs[2 + a] + 2 * geom.pad[a];
            if geom.kernel[a] != ws[2 + a] {
                return Err(Error::dim("conv3d", 2 + a, "kernel size disagrees with weight"));
            }
            if geom.kernel[a] > padded {
                return Err(Error::dim(
                    "conv3d",
                    2 + a,
                    format!("kernel {} exceeds padded extent {padded}", geom.kernel[a]),
                ));
            }
            out_sp[a] = (padded - geom.kernel[a]) / geom.stride[a] + 1;
        }
        let g3 = Im2Col {
            channels: xs[1],
            input: [xs[2], xs[3], xs[4]],
            output: out_sp,
            geom,
        };
        let (n, o) = (xs[0], ws[0]);
        let kdim = g3.rows();
        let p = g3.cols();
        let in_item = g3.channels * g3.input.iter().product::<usize>();
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let chunk = (COL_BUDGET / (kdim * p)).clamp(1, n);
        let mut y = vec![T::zero(); n * o * p];
        let mut col = vec![T::zero(); kdim * chunk * p];
        let mut tmp = vec![T::zero(); o * chunk * p];
        for first in (0..n).step_by(chunk) {
            let c = chunk.min(n - first);
            let width = c * p;
            for i in 0..c {
                let item = first + i;
                g3.fill(&x[item * in_item..(item + 1) * in_item], &mut col[i * p..], width);
            }
            T::gemm(o, kdim, width, &wv, kdim as isize, 1, &col, width as isize, 1, T::zero(), &mut tmp, width as isize, 1);
            for i in 0..c {
                for oc in 0..o {
                    let dst = &mut y[((first + i) * o + oc) * p..((first + i) * o + oc + 1) * p];
                    let src = &tmp[oc * width + i * p..oc * width + (i + 1) * p];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v + bv[oc];
                    }
                }
            }
        }
        let (ix, iw, ib) = (self.id, w.id, b.id);
        let (rx, rw, rb) = (self.requires_grad(), w.requires_grad(), b.requires_grad());
        let back = move |g: &[T]| {
            let mut res = Vec::new();
            let mut gw = vec![T::zero(); o * kdim];
            let mut gb = vec![T::zero(); o];
            let mut gx = if rx { vec![T::zero(); x.len()] } else { Vec::new() };
            let mut col = vec![T::zero(); kdim * chunk * p];
            let mut gcol = vec![T::zero(); o * chunk * p];
            for first in (0..n).step_by(chunk) {
                let c = chunk.min(n - first);
                let width = c * p;
                // gather the output gradient as [o, c·p]
                for i in 0..c {
                    for oc in 0..o {
                        let src = &g[((first + i) * o + oc) * p..((first + i) * o + oc + 1) * p];
                        gcol[oc * width + i * p..oc * width + (i + 1) * p].copy_from_slice(src);
                        if rb {
                            gb[oc] = gb[oc] + src.iter().copied().sum();
                        }
                    }
                }
                if rw {
                    for i in 0..c {
                        let item = first + i;
                        g3.fill(&x[item * in_item..(item + 1) * in_item], &mut col[i * p..], width);
                    }
                    T::gemm(o, width, kdim, &gcol, width as isize, 1, &col, 1, width as isize, T::one(), &mut gw, kdim as isize, 1);
                }
                if rx {
                    T::gemm(kdim, o, width, &wv, 1, kdim as isize, &gcol, width as isize, 1, T::zero(), &mut col, width as isize, 1);
                    for i in 0..c {
                        let item = first + i;
                        g3.scatter(&col[i * p..], &mut gx[item * in_item..(item + 1) * in_item], width);
                    }
                }
            }
            if rx {
                res.push((ix, gx));
            }
            if rw {
                res.push((iw, gw));
            }
            if rb {
                res.push((ib, gb));
            }
            res
        };
        let oshape = vec![n, o, out_sp[0], out_sp[1], out_sp[2]];
        self.tape
            .push("conv3d", oshape, y, rx || rw || rb, Some(Box::new(back)))
    }

    /// Batched 2-D max pooling over `[N, C, H, W]` without padding.
    pub fn maxpool2d(&self, kernel: [usize; 2], stride: [usize; 2]) -> Result<Var<'t, T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::dim("maxpool2d", 0, format!("input must be rank 4, got {xs:?}")));
        }
        if stride.contains(&0) {
            return Err(Error::Config("maxpool2d stride must be positive".into()));
        }
        for a in 0..2 {
            if kernel[a] == 0 || kernel[a] > xs[2 + a] {
                return Err(Error::dim(
                    "maxpool2d",
                    2 + a,
                    format!("kernel {} vs extent {}", kernel[a], xs[2 + a]),
                ));
            }
        }
        let (h, w) = (xs[2], xs[3]);
        let oh = (h - kernel[0]) / stride[0] + 1;
        let ow = (w - kernel[1]) / stride[1] + 1;
        let planes = xs[0] * xs[1];
        let x = self.value();
        let mut y = Vec::with_capacity(planes * oh * ow);
        let mut arg = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride[0] * w + ox * stride[1];
                    for ky in 0..kernel[0] {
                        let row = base + (oy * stride[0] + ky) * w + ox * stride[1];
                        for i in row..row + kernel[1] {
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    y.push(x[best]);
                    arg.push(best);
                }
            }
        }
        let id = self.id;
        let total = x.len();
        let back = move |g: &[T]| {
            let mut gx = vec![T::zero(); total];
            for (&i, &gv) in arg.iter().zip(g) {
                gx[i] = gx[i] + gv;
            }
            vec![(id, gx)]
        };
        self.tape.push(
            "maxpool2d",
            vec![xs[0], xs[1], oh, ow],
            y,
            self.requires_grad(),
            Some(Box::new(back)),
        )
    }

    /// Mean negative log-likelihood of `targets` under a row-wise softmax of `[B, K]` logits.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("softmax_cross_entropy", 0, format!("logits must be [batch, classes], got {s:?}")));
        }
        let (bsz, k) = (s[0], s[1]);
        if targets.len() != bsz {
            return Err(Error::dim(
                "softmax_cross_entropy",
                0,
                format!("{} targets for batch {bsz}", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target {bad} outside {k} classes")));
        }
        let x = self.value();
        let mut probs = vec![T::zero(); bsz * k];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lz = z.ln();
            for c in 0..k {
                probs[r * k + c] = (row[c] - m).exp() / z;
            }
            loss = loss + (lz - (row[t] - m));
        }
        let inv = T::one() / T::of(bsz as f64);
        loss = loss * inv;
        let id = self.id;
        let targets = targets.to_vec();
        let back = move |g: &[T]| {
            let scale = g[0] * inv;
            let mut gx = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                gx[r * k + t] = gx[r * k + t] - T::one();
            }
            gx.iter_mut().for_each(|v| *v = *v * scale);
            vec![(id, gx)]
        };
        self.tape.push(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            self.requires_grad(),
            Some(Box::new(back)),
        )
    }
}

/// Unfolding of one `[C, T, H, W]` item into a `[C·kt·kh·kw, To·Ho·Wo]` matrix.
#[derive(Clone, Copy)]
struct Im2Col {
    channels: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: ConvGeom,
}

impl Im2Col {
    fn rows(&self) -> usize {
        self.channels * self.geom.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Visits every run of in-bounds taps as `(column offset, input offset, length)`;
    /// within a run, column entries are consecutive and input entries are `stride[2]` apart.
    /// Rows of the column matrix are `row_stride` apart.
    #[inline]
    fn for_each_run(&self, row_stride: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [ti, hi, wi] = self.input;
        let [to, ho, wo] = self.output;
        let [kt, kh, kw] = self.geom.kernel;
        let [st, sh, sw] = self.geom.stride;
        let [pt, ph, pw] = self.geom.pad;
        let mut row = 0;
        for c in 0..self.channels {
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let base = row * row_stride;
                        row += 1;
                        // output columns whose tap lands inside [0, wi)
                        let lo = if pw > dx { (pw - dx).div_ceil(sw) } else { 0 };
                        let hi_x = if wi + pw > dx { (wi + pw - dx).div_ceil(sw).min(wo) } else { 0 };
                        if lo >= hi_x {
                            continue;
                        }
                        for ot in 0..to {
                            let t = (ot * st + dt) as isize - pt as isize;
                            if t < 0 || t >= ti as isize {
                                continue;
                            }
                            for oy in 0..ho {
                                let y = (oy * sh + dy) as isize - ph as isize;
                                if y < 0 || y >= hi as isize {
                                    continue;
                                }
                                let src_row = ((c * ti + t as usize) * hi + y as usize) * wi;
                                let dst_row = base + (ot * ho + oy) * wo;
                                f(dst_row + lo, src_row + lo * sw + dx - pw, hi_x - lo);
                            }
                        }
                    }
                }
            }
        }
    }

    fn fill<T: Scalar>(&self, input: &[T], col: &mut [T], row_stride: usize) {
        let p = self.cols();
        for r in 0..self.rows() {
            col[r * row_stride..r * row_stride + p].fill(T::zero());
        }
        let sw = self.geom.stride[2];
        self.for_each_run(row_stride, |dst, src, len| {
            let out = &mut col[dst..dst + len];
            if sw == 1 {
                out.copy_from_slice(&input[src..src + len]);
            } else {
                for (o, &v) in out.iter_mut().zip(input[src..].iter().step_by(sw)) {
                    *o = v;
                }
            }
        });
    }

    fn scatter<T: Scalar>(&self, col: &[T], grad: &mut [T], row_stride: usize) {
        let sw = self.geom.stride[2];
        self.for_each_run(row_stride, |dst, src, len| {
            for (&c, g) in col[dst..dst + len].iter().zip(grad[src..].iter_mut().step_by(sw)) {
                *g = *g + c;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap().tracked()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], vec![1., -2., 3., 0.5, 7., 9.])).unwrap();
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], vec![1., 2.])).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_and_single_use() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], vec![1., 2.])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], vec![1., 2.])).unwrap();
        let c = tape.constant(&[2], vec![3., 4.]).unwrap();
        let g = tape.backward(x.mul(&c).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[3.0, 4.0]);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn relu_definition() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[3], vec![-1., 0., 2.]).unwrap();
        assert_eq!(*x.relu().unwrap().value(), vec![0., 0., 2.]);
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(&[1, 2], vec![0., 0.]).unwrap();
        let v = l.softmax_cross_entropy(&[0]).unwrap().value()[0];
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        let l = tape.constant(&[1, 2], vec![1000., -1000.]).unwrap();
        let v = l.softmax_cross_entropy(&[0]).unwrap().value()[0];
        assert!(v.is_finite() && v < 1e-6);

        let l = tape.constant(&[1, 2], vec![1., 3.]).unwrap();
        let v = l.softmax_cross_entropy(&[1]).unwrap().value()[0];
        assert!((v - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.1269).abs() < 1e-4);

        let l = tape.constant(&[1, 2], vec![1e4, -1e4]).unwrap();
        assert!(l.softmax_cross_entropy(&[1]).unwrap().value()[0].is_finite());

        assert!(matches!(l.softmax_cross_entropy(&[2]), Err(Error::Index(_))));
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2, 3], (0..6).map(f64::from).collect())).unwrap();
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 2).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(*y.value(), *x.value());
        assert!(matches!(x.narrow(1, 2, 2), Err(Error::Dimension { axis: 1, .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[1], vec![f64::MAX]).unwrap();
        assert!(matches!(x.scale(10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn conv_shape_and_errors() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(&[1, 1, 1, 4, 4], vec![1.0; 16]).unwrap();
        let w = tape.constant(&[2, 1, 1, 3, 3], vec![1.0; 18]).unwrap();
        let b = tape.constant(&[2], vec![0.0; 2]).unwrap();
        let geom = ConvGeom {
            kernel: [1, 3, 3],
            stride: [1, 1, 1],
            pad: [0, 1, 1],
        };
        let y = x.conv3d(&w, &b, geom).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 1, 4, 4]);
        // corner sees a 2x2 patch, centre a full 3x3
        assert_eq!(y.value()[0], 4.0);
        assert_eq!(y.value()[5], 9.0);
        let bad = ConvGeom {
            stride: [1, 0, 1],
            ..geom
        };
        assert!(matches!(x.conv3d(&w, &b, bad), Err(Error::Config(_))));
    }
}
