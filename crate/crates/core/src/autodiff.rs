//! Reverse-mode automatic differentiation over dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records every operation of a forward pass as an append-only list
//! of nodes; [`Tape::backward`] walks the list in reverse and accumulates
//! gradients. Nodes only ever reference earlier nodes, so reverse index order
//! is a valid topological order.
//!
//! The primitive set is deliberately small: enough to express per-position
//! linear maps, batched attention, graph propagation and the loss reductions
//! used by the model. Elementwise binary ops broadcast with numpy alignment
//! rules (trailing axes), and their backward pass sums gradients over the
//! broadcast axes.

use ndarray::{concatenate, ArrayD, ArrayView2, ArrayView3, ArrayViewD, Axis, Ix2, Ix3, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// y = scale * x + shift; only `scale` matters for the backward pass.
    Affine {
        x: Var,
        scale: f64,
    },
    /// 2-d matrix product; `trans_b` multiplies by bᵀ.
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    /// [N,m,k] × [N,k,n] (or [N,n,k] when `trans_b`) → [N,m,n]
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    /// Shared left matrix: [p,q] × [N,q,w] → [N,p,w]
    MatMulLeft {
        m: Var,
        h: Var,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    BroadcastTo(Var),
    ConcatLast(Vec<Var>),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Pow {
        x: Var,
        exponent: f64,
    },
    SoftmaxLast(Var),
    /// Euclidean norm over the last axis (axis removed).
    L2NormLast(Var),
    /// Sum over the last axis, keeping it with length 1.
    SumLastKeep(Var),
    /// Sum of all elements → 0-d array.
    SumAll(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<ArrayD<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `shape` by collapsing axes it was broadcast over.
fn reduce_to(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    debug_assert_eq!(g.shape(), shape);
    g
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, delta: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

fn reshape_copy(a: ArrayViewD<'_, f64>, shape: &[usize]) -> ArrayD<f64> {
    debug_assert_eq!(a.len(), shape.iter().product::<usize>());
    ArrayD::from_shape_vec(IxDyn(shape), a.iter().copied().collect()).expect("reshape length")
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        a.iter().copied().next().unwrap()
    }

    fn view2(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d operand")
    }

    fn view3(&self, v: Var) -> ArrayView3<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3-d operand")
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let sh = broadcast_shape(self.value(a).shape(), self.value(b).shape());
        let av = self.value(a).broadcast(IxDyn(&sh)).expect("broadcast lhs");
        let bv = self.value(b).broadcast(IxDyn(&sh)).expect("broadcast rhs");
        let mut out = ArrayD::zeros(IxDyn(&sh));
        ndarray::Zip::from(&mut out)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| *o = f(x, y));
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).mapv(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false)
    }

    /// 2-d product `a · b` (or `a · bᵀ` when `trans_b`).
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.view2(a);
        let bv = self.view2(b);
        let out = if trans_b { av.dot(&bv.t()) } else { av.dot(&bv) };
        self.push(out.into_dyn(), Op::MatMul { a, b, trans_b })
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.view3(a);
        let bv = self.view3(b);
        let (n, m, _k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(n, bv.shape()[0], "batch sizes differ");
        let p = if trans_b { bv.shape()[1] } else { bv.shape()[2] };
        let mut out = ndarray::Array3::<f64>::zeros((n, m, p));
        for i in 0..n {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let r = if trans_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
            out.index_axis_mut(Axis(0), i).assign(&r);
        }
        self.push(out.into_dyn(), Op::BatchMatMul { a, b, trans_b })
    }

    /// Multiply every batch slice of `h` [N,q,w] by a shared matrix `m` [p,q].
    pub fn matmul_left(&mut self, m: Var, h: Var) -> Var {
        let mv = self.view2(m);
        let hv = self.view3(h);
        let (n, q, w) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
        assert_eq!(mv.shape()[1], q, "inner dims differ");
        let p = mv.shape()[0];
        let mut out = ndarray::Array3::<f64>::zeros((n, p, w));
        for i in 0..n {
            let r = mv.dot(&hv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&r);
        }
        self.push(out.into_dyn(), Op::MatMulLeft { m, h })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = reshape_copy(self.value(x).view(), shape);
        self.push(out, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let out = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .to_owned();
        self.push(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .broadcast(IxDyn(shape))
            .expect("broadcast_to")
            .to_owned();
        self.push(out, Op::BroadcastTo(x))
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let last = views[0].ndim() - 1;
        let out = concatenate(Axis(last), &views).expect("concat shapes");
        self.push(out, Op::ConcatLast(xs.to_vec()))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).mapv(f);
        self.push(out, op)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn powf(&mut self, x: Var, exponent: f64) -> Var {
        self.unary(x, Op::Pow { x, exponent }, |v| v.powf(exponent))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let last = out.ndim() - 1;
        for mut lane in out.lanes_mut(Axis(last)) {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxLast(x))
    }

    pub fn l2_norm_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let last = v.ndim() - 1;
        let out = v.map_axis(Axis(last), |lane| lane.dot(&lane).sqrt());
        self.push(out, Op::L2NormLast(x))
    }

    pub fn sum_last_keep(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let last = v.ndim() - 1;
        let out = v.sum_axis(Axis(last)).insert_axis(Axis(last));
        self.push(out, Op::SumLastKeep(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Op::SumAll(x),
        )
    }

    /// Distance from the nearest nonsmooth point among all recorded ops:
    /// |input| for ReLU, distance to either bound for clamp, the norm value
    /// itself for the last-axis Euclidean norm. Infinite when no such op was
    /// recorded. Gradient checks re-draw parameters when this is small.
    pub fn nonsmooth_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    // inputs that are exactly zero are structurally pinned
                    // (e.g. the antisymmetric graph diagonal) and never cross
                    // the kink under perturbation
                    for &v in self.value(*x).iter() {
                        if v != 0.0 {
                            margin = margin.min(v.abs());
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in self.value(*x).iter() {
                        margin = margin.min((v - lo).abs().min((v - hi).abs()));
                    }
                }
                Op::L2NormLast(_) => {
                    for &v in node.value.iter() {
                        margin = margin.min(v);
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Accumulate gradients of `root` with respect to every reachable node.
    ///
    /// Leaf gradients are retained in the returned [`Grads`]; interior
    /// gradients are dropped once propagated.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(ArrayD::ones(self.value(root).raw_dim()));

        for id in (0..=root.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    let ga = reduce_to(g.clone(), self.value(*a).shape());
                    accumulate(&mut grads[a.0], ga);
                    let gb = reduce_to(g, self.value(*b).shape());
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to(g.clone(), self.value(*a).shape());
                    accumulate(&mut grads[a.0], ga);
                    let gb = reduce_to(g.mapv(|v| -v), self.value(*b).shape());
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Mul(a, b) => {
                    let sh = g.shape().to_vec();
                    let av = self.value(*a).broadcast(IxDyn(&sh)).unwrap();
                    let bv = self.value(*b).broadcast(IxDyn(&sh)).unwrap();
                    let ga = reduce_to(&g * &bv, self.value(*a).shape());
                    accumulate(&mut grads[a.0], ga);
                    let gb = reduce_to(&g * &av, self.value(*b).shape());
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Affine { x, scale, .. } => {
                    accumulate(&mut grads[x.0], g.mapv(|v| v * scale));
                }
                Op::MatMul { a, b, trans_b } => {
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let av = self.view2(*a);
                    let bv = self.view2(*b);
                    if *trans_b {
                        // out = a · bᵀ
                        accumulate(&mut grads[a.0], gv.dot(&bv).into_dyn());
                        accumulate(&mut grads[b.0], gv.t().dot(&av).into_dyn());
                    } else {
                        accumulate(&mut grads[a.0], gv.dot(&bv.t()).into_dyn());
                        accumulate(&mut grads[b.0], av.t().dot(&gv).into_dyn());
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let av = self.view3(*a);
                    let bv = self.view3(*b);
                    let n = av.shape()[0];
                    let mut ga = ndarray::Array3::<f64>::zeros((n, av.shape()[1], av.shape()[2]));
                    let mut gb = ndarray::Array3::<f64>::zeros((n, bv.shape()[1], bv.shape()[2]));
                    for i in 0..n {
                        let gi = gv.index_axis(Axis(0), i);
                        let ai = av.index_axis(Axis(0), i);
                        let bi = bv.index_axis(Axis(0), i);
                        if *trans_b {
                            // out_i = a_i · b_iᵀ
                            ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi));
                            gb.index_axis_mut(Axis(0), i).assign(&gi.t().dot(&ai));
                        } else {
                            ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                            gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                        }
                    }
                    accumulate(&mut grads[a.0], ga.into_dyn());
                    accumulate(&mut grads[b.0], gb.into_dyn());
                }
                Op::MatMulLeft { m, h } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let mv = self.view2(*m);
                    let hv = self.view3(*h);
                    let n = hv.shape()[0];
                    let mut gm = ndarray::Array2::<f64>::zeros((mv.shape()[0], mv.shape()[1]));
                    let mut gh =
                        ndarray::Array3::<f64>::zeros((n, hv.shape()[1], hv.shape()[2]));
                    for i in 0..n {
                        let gi = gv.index_axis(Axis(0), i);
                        let hi = hv.index_axis(Axis(0), i);
                        gm += &gi.dot(&hi.t());
                        gh.index_axis_mut(Axis(0), i).assign(&mv.t().dot(&gi));
                    }
                    accumulate(&mut grads[m.0], gm.into_dyn());
                    accumulate(&mut grads[h.0], gh.into_dyn());
                }
                Op::Reshape(x) => {
                    let gx = reshape_copy(g.view(), self.value(*x).shape());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Permute { x, axes } => {
                    let inv = inverse_axes(axes);
                    let gx = g.view().permuted_axes(IxDyn(&inv)).to_owned();
                    accumulate(&mut grads[x.0], gx);
                }
                Op::BroadcastTo(x) => {
                    let gx = reduce_to(g, self.value(*x).shape());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatLast(xs) => {
                    let last = g.ndim() - 1;
                    let mut offset = 0usize;
                    for &x in xs {
                        let width = self.value(x).shape()[last];
                        let gx = g
                            .slice_axis(Axis(last), ndarray::Slice::from(offset..offset + width))
                            .to_owned();
                        accumulate(&mut grads[x.0], gx);
                        offset += width;
                    }
                }
                Op::Tanh(x) => {
                    let gx = &g * &node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Relu(x) => {
                    let gx = &g * &self.value(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Exp(x) => {
                    let gx = &g * &node.value;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Pow { x, exponent } => {
                    let gx = &g * &self.value(*x).mapv(|v| exponent * v.powf(exponent - 1.0));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SoftmaxLast(x) => {
                    // dx = y ⊙ (g − Σ_last(g ⊙ y))
                    let y = &node.value;
                    let gy = &g * y;
                    let last = y.ndim() - 1;
                    let dot = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                    let gx = y * &(&g - &dot.broadcast(y.raw_dim()).unwrap());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::L2NormLast(x) => {
                    let xv = self.value(*x);
                    let last = xv.ndim() - 1;
                    let safe = node.value.mapv(|y| 1.0 / y.max(1e-12));
                    let coeff = (&g * &safe).insert_axis(Axis(last));
                    let gx = xv * &coeff.broadcast(xv.raw_dim()).unwrap();
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SumLastKeep(x) => {
                    let xv = self.value(*x);
                    let gx = g.broadcast(xv.raw_dim()).unwrap().to_owned();
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SumAll(x) => {
                    let s = g.iter().copied().next().unwrap();
                    let gx = ArrayD::from_elem(self.value(*x).raw_dim(), s);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let gx = &g
                        * &self
                            .value(*x)
                            .mapv(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        Grads(grads)
    }
}

/// Per-position affine map: `x` [.., in] × `w` [in, out] + `b` [out].
///
/// `x` may be 2-d or 3-d; the leading axes are flattened for the product and
/// restored afterwards.
pub fn linear(t: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Var {
    let xsh = t.value(x).shape().to_vec();
    let (rows, cols): (usize, usize) = (
        xsh[..xsh.len() - 1].iter().product(),
        xsh[xsh.len() - 1],
    );
    let out_w = t.value(w).shape()[1];
    let flat = t.reshape(x, &[rows, cols]);
    let mut y = t.matmul(flat, w);
    if let Some(b) = b {
        y = t.add(y, b);
    }
    let mut out_shape = xsh;
    let n = out_shape.len();
    out_shape[n - 1] = out_w;
    t.reshape(y, &out_shape)
}

/// Like [`linear`] but multiplies by `wᵀ`, for weights stored as [out, in].
pub fn linear_t(t: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Var {
    let xsh = t.value(x).shape().to_vec();
    let (rows, cols): (usize, usize) = (
        xsh[..xsh.len() - 1].iter().product(),
        xsh[xsh.len() - 1],
    );
    let out_w = t.value(w).shape()[0];
    let flat = t.reshape(x, &[rows, cols]);
    let mut y = t.matmul_t(flat, w, true);
    if let Some(b) = b {
        y = t.add(y, b);
    }
    let mut out_shape = xsh;
    let n = out_shape.len();
    out_shape[n - 1] = out_w;
    t.reshape(y, &out_shape)
}
