//! Multivariate feature interaction: project observations to hidden
//! channels, learn a sparse directed interaction graph over those channels,
//! propagate each time step through the graph with restart, and read out a
//! depth-concatenated high-order feature.
//!
//! The graph mixes information across hidden channels only; no operation
//! here ever mixes across time steps or batch items.

use ndarray::{Array1, Array2, Array3};

use crate::autodiff::{linear_t, Tape, Var};
use crate::error::{Error, Result};

/// Affine map from observation space (d) to hidden space (d1); weight stored
/// as [d1, d].
#[derive(Clone, Debug)]
pub struct HiddenProjection {
    pub w_h: Array2<f64>,
    pub b_h: Array1<f64>,
}

/// Node embeddings and their mixing weights; `e1`/`e2` are [d1, d1],
/// `theta1`/`theta2` are [d1, d2].
#[derive(Clone, Debug)]
pub struct GraphLearner {
    pub e1: Array2<f64>,
    pub e2: Array2<f64>,
    pub theta1: Array2<f64>,
    pub theta2: Array2<f64>,
}

/// Dense scores, top-k sparsified adjacency, and the self-looped
/// symmetric-normalized propagation matrix derived from it.
#[derive(Clone, Debug)]
pub struct InteractionGraph {
    pub a_dense: Array2<f64>,
    pub a_sparse: Array2<f64>,
    pub a_hat: Array2<f64>,
}

/// Depth-concat readout weight, [(K+1)·d1, d1].
#[derive(Clone, Debug)]
pub struct Readout {
    pub w_ho: Array2<f64>,
}

pub(crate) fn shape3(t: &Tape, v: Var) -> (usize, usize, usize) {
    let s = t.value(v).shape();
    (s[0], s[1], s[2])
}

/// Eq-style hidden transform applied independently per time step:
/// [B, w, d] → [B, w, d1].
pub fn hidden_transform_var(t: &mut Tape, w_h: Var, b_h: Var, x: Var) -> Var {
    linear_t(t, x, w_h, Some(b_h))
}

pub fn hidden_transform(p: &HiddenProjection, x: &Array3<f64>) -> Result<Array3<f64>> {
    if p.w_h.ncols() != x.shape()[2] {
        return Err(Error::Shape(format!(
            "hidden projection expects {} channels, input has {}",
            p.w_h.ncols(),
            x.shape()[2]
        )));
    }
    let mut t = Tape::new();
    let xv = t.leaf(x.clone().into_dyn());
    let wv = t.leaf(p.w_h.clone().into_dyn());
    let bv = t.leaf(p.b_h.clone().into_dyn());
    let out = hidden_transform_var(&mut t, wv, bv, xv);
    Ok(t.value(out).clone().into_dimensionality().unwrap())
}

/// Asymmetric adjacency scores:
/// `A = ReLU(tanh(M1·M2ᵀ − M2·M1ᵀ))` with `Mi = tanh(Ei·Θi)`.
///
/// The difference of the two products is antisymmetric, so the diagonal is
/// exactly zero and entries lie in `[0, 1)`.
pub fn build_adjacency_var(t: &mut Tape, e1: Var, e2: Var, theta1: Var, theta2: Var) -> Var {
    let p1 = t.matmul(e1, theta1);
    let m1 = t.tanh(p1);
    let p2 = t.matmul(e2, theta2);
    let m2 = t.tanh(p2);
    let s12 = t.matmul_t(m1, m2, true);
    let s21 = t.matmul_t(m2, m1, true);
    let s = t.sub(s12, s21);
    let th = t.tanh(s);
    t.relu(th)
}

pub fn build_adjacency(g: &GraphLearner) -> Array2<f64> {
    let mut t = Tape::new();
    let e1 = t.leaf(g.e1.clone().into_dyn());
    let e2 = t.leaf(g.e2.clone().into_dyn());
    let th1 = t.leaf(g.theta1.clone().into_dyn());
    let th2 = t.leaf(g.theta2.clone().into_dyn());
    let a = build_adjacency_var(&mut t, e1, e2, th1, th2);
    t.value(a).clone().into_dimensionality().unwrap()
}

/// 0/1 mask of the k largest entries per row, ties broken by lowest column
/// index.
pub fn topk_mask(a: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let n = a.ncols();
    if k == 0 || k > n {
        return Err(Error::Validation(format!(
            "topk requires 1 <= k <= {n}, got {k}"
        )));
    }
    let mut mask = Array2::zeros(a.raw_dim());
    for (r, row) in a.rows().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            row[j]
                .partial_cmp(&row[i])
                .expect("finite adjacency entries")
                .then(i.cmp(&j))
        });
        for &c in order.iter().take(k) {
            mask[[r, c]] = 1.0;
        }
    }
    Ok(mask)
}

/// Keep the k largest entries per row at their values, zero the rest.
pub fn topk_sparsify(a: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let mask = topk_mask(a, k)?;
    Ok(a * &mask)
}

/// Add self-loops, compute row-sum degrees, and return
/// `D̃^{−1/2} (A + I) D̃^{−1/2}`. Degrees are ≥ 1, so this is always
/// well defined.
pub fn normalize_adjacency_var(t: &mut Tape, a_sparse: Var) -> Var {
    let n = t.value(a_sparse).shape()[0];
    let eye = t.leaf(Array2::<f64>::eye(n).into_dyn());
    let a_tilde = t.add(a_sparse, eye);
    let deg = t.sum_last_keep(a_tilde); // [n, 1]
    let s_col = t.powf(deg, -0.5);
    let s_row = t.reshape(s_col, &[n]);
    let scaled = t.mul(a_tilde, s_col);
    t.mul(scaled, s_row)
}

pub fn normalize_adjacency(a_sparse: &Array2<f64>) -> Result<Array2<f64>> {
    if a_sparse.iter().any(|&v| v < 0.0) {
        return Err(Error::Validation(
            "adjacency entries must be nonnegative".into(),
        ));
    }
    let mut t = Tape::new();
    let a = t.leaf(a_sparse.clone().into_dyn());
    let out = normalize_adjacency_var(&mut t, a);
    Ok(t.value(out).clone().into_dimensionality().unwrap())
}

/// Build the full graph triple from learner parameters.
pub fn interaction_graph(g: &GraphLearner, k: usize) -> Result<InteractionGraph> {
    let a_dense = build_adjacency(g);
    let a_sparse = topk_sparsify(&a_dense, k)?;
    let a_hat = normalize_adjacency(&a_sparse)?;
    Ok(InteractionGraph {
        a_dense,
        a_sparse,
        a_hat,
    })
}

/// Propagation with restart over channel axis:
/// `H_{k+1} = (1 − α)·Â·H_k + α·H_0`, returning `[H_0, …, H_K]`.
///
/// `h0` is [B, d1, w]; every step mixes channels only.
pub fn propagate_var(t: &mut Tape, a_hat: Var, h0: Var, alpha: f64, depth: usize) -> Vec<Var> {
    let mut hs = Vec::with_capacity(depth + 1);
    hs.push(h0);
    let mut h = h0;
    for _ in 0..depth {
        if alpha == 1.0 {
            // restart dominates completely; avoids a 0·(Â·H) product that
            // would still cost a matmul
            hs.push(h0);
            h = h0;
            continue;
        }
        let mixed = t.matmul_left(a_hat, h);
        let damped = t.affine(mixed, 1.0 - alpha, 0.0);
        let restart = t.affine(h0, alpha, 0.0);
        h = t.add(damped, restart);
        hs.push(h);
    }
    hs
}

pub fn propagate(
    a_hat: &Array2<f64>,
    h0: &Array3<f64>,
    alpha: f64,
    depth: usize,
) -> Result<Vec<Array3<f64>>> {
    if a_hat.ncols() != h0.shape()[1] {
        return Err(Error::Shape(format!(
            "propagation matrix is {}x{}, hidden tensor has {} channels",
            a_hat.nrows(),
            a_hat.ncols(),
            h0.shape()[1]
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let mut t = Tape::new();
    let a = t.leaf(a_hat.clone().into_dyn());
    let h = t.leaf(h0.clone().into_dyn());
    let hs = propagate_var(&mut t, a, h, alpha, depth);
    Ok(hs
        .into_iter()
        .map(|v| t.value(v).clone().into_dimensionality().unwrap())
        .collect())
}

/// Concatenate every depth output per time step and map back to d1:
/// `[H_0ᵀ | … | H_Kᵀ] · W_ho`, [B, w, (K+1)·d1] → [B, w, d1].
pub fn readout_var(t: &mut Tape, w_ho: Var, hs: &[Var]) -> Var {
    let transposed: Vec<Var> = hs.iter().map(|&h| t.permute(h, &[0, 2, 1])).collect();
    let cat = t.concat_last(&transposed);
    let (b, w, kd) = shape3(t, cat);
    let flat = t.reshape(cat, &[b * w, kd]);
    let out = t.matmul(flat, w_ho);
    let d1 = t.value(w_ho).shape()[1];
    t.reshape(out, &[b, w, d1])
}

pub fn readout(r: &Readout, hs: &[Array3<f64>]) -> Result<Array3<f64>> {
    let expected = r.w_ho.nrows();
    let got: usize = hs.iter().map(|h| h.shape()[1]).sum();
    if expected != got {
        return Err(Error::Shape(format!(
            "readout expects {expected} concatenated channels, got {got}"
        )));
    }
    let mut t = Tape::new();
    let w = t.leaf(r.w_ho.clone().into_dyn());
    let vars: Vec<Var> = hs.iter().map(|h| t.leaf(h.clone().into_dyn())).collect();
    let out = readout_var(&mut t, w, &vars);
    Ok(t.value(out).clone().into_dimensionality().unwrap())
}

/// Tape variables of every tensor in this module.
pub struct GraphFiVars {
    pub w_h: Var,
    pub b_h: Var,
    pub e1: Var,
    pub e2: Var,
    pub theta1: Var,
    pub theta2: Var,
    pub w_ho: Var,
}

pub struct FeatureInteractionOut {
    pub x_ho: Var,
    pub graph: InteractionGraph,
}

/// Full graph stage on an already-projected hidden tensor `x_h` [B, w, d1]:
/// rebuild the graph from the current embeddings, sparsify, normalize,
/// propagate, read out.
///
/// The top-k sparsification is a hard mask computed from the forward values;
/// gradients flow only through the kept entries.
pub fn feature_interaction_var(
    t: &mut Tape,
    v: &GraphFiVars,
    x_h: Var,
    k_topk: usize,
    alpha: f64,
    depth: usize,
) -> Result<FeatureInteractionOut> {
    let a_dense_var = build_adjacency_var(t, v.e1, v.e2, v.theta1, v.theta2);
    let a_dense: Array2<f64> = t
        .value(a_dense_var)
        .clone()
        .into_dimensionality()
        .unwrap();
    let mask = topk_mask(&a_dense, k_topk)?;
    let mask_var = t.leaf(mask.clone().into_dyn());
    let a_sparse_var = t.mul(a_dense_var, mask_var);
    let a_hat_var = normalize_adjacency_var(t, a_sparse_var);

    let h0 = t.permute(x_h, &[0, 2, 1]); // [B, d1, w]
    let hs = propagate_var(t, a_hat_var, h0, alpha, depth);
    let x_ho = readout_var(t, v.w_ho, &hs);

    let a_sparse = t
        .value(a_sparse_var)
        .clone()
        .into_dimensionality()
        .unwrap();
    let a_hat = t.value(a_hat_var).clone().into_dimensionality().unwrap();
    Ok(FeatureInteractionOut {
        x_ho,
        graph: InteractionGraph {
            a_dense,
            a_sparse,
            a_hat,
        },
    })
}

/// Write the sparse adjacency as "src dst weight" lines.
pub fn edge_list(a_sparse: &Array2<f64>) -> String {
    let mut out = String::new();
    for ((r, c), &v) in a_sparse.indexed_iter() {
        if v != 0.0 {
            out.push_str(&format!("{r} {c} {v}\n"));
        }
    }
    out
}
