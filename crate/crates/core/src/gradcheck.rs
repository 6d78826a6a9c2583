//! Central-difference gradient verification over a parameter registry.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{self, HifiConfig, LatentSampling, Variant};
use crate::params::ParamStore;

/// Norm-level relative error between an analytic and a numeric gradient:
/// `‖a − n‖ / max(‖a‖ + ‖n‖, floor)`. Zero when both vanish.
pub fn relative_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale.max(1e-12)
    }
}

/// Central differences of a scalar function of the parameters, elementwise.
pub fn finite_difference_grads<F>(
    params: &ParamStore,
    mut f: F,
    h: f64,
) -> Result<BTreeMap<String, ArrayD<f64>>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut out = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let mut grad = ArrayD::zeros(tensor.raw_dim());
        for idx in 0..tensor.len() {
            let mut plus = params.clone();
            plus.get_mut(name)?.as_slice_mut().unwrap()[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(name)?.as_slice_mut().unwrap()[idx] -= h;
            grad.as_slice_mut().unwrap()[idx] = (f(&plus)? - f(&minus)?) / (2.0 * h);
        }
        out.insert(name.to_string(), grad);
    }
    Ok(out)
}

/// Outcome of a whole-model gradient check.
pub struct GradCheckReport {
    /// Relative error per parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel: f64,
    /// Seeds rejected by the smoothness screen before one passed.
    pub redraws: usize,
}

/// The tiny verification instance: d=3, d1=4, w=4, single layer, single
/// head, K=1, batch 2.
pub fn tiny_config() -> HifiConfig {
    HifiConfig {
        w: 4,
        d: 3,
        d1: 4,
        d2: 4,
        d3: 6,
        d_k: 4,
        num_heads: 1,
        l: 1,
        alpha: 0.2,
        beta: 1.0,
        k_depth: 1,
        k_topk: 2,
        variant: Variant::Full,
        squared_recon: false,
    }
}

/// Top-k mask stability: among the positive adjacency entries of every row,
/// the kept/dropped gap must clear `margin`. Zero entries stay exactly zero
/// under small perturbations (their ReLU inputs are screened on the tape),
/// so ties among zeros are harmless.
fn topk_margins_ok(params: &ParamStore, cfg: &HifiConfig, margin: f64) -> Result<bool> {
    if !cfg.variant.uses_graph() {
        return Ok(true);
    }
    let get2 = |n: &str| -> Result<Array2<f64>> {
        Ok(params.get(n)?.clone().into_dimensionality().unwrap())
    };
    let learner = crate::graphfi::GraphLearner {
        e1: get2("graphfi.e1")?,
        e2: get2("graphfi.e2")?,
        theta1: get2("graphfi.theta1")?,
        theta2: get2("graphfi.theta2")?,
    };
    let dense = crate::graphfi::build_adjacency(&learner);
    for row in dense.rows() {
        let mut pos: Vec<f64> = row.iter().copied().filter(|&v| v > 0.0).collect();
        pos.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if pos.len() >= cfg.k_topk {
            let next = pos.get(cfg.k_topk).copied().unwrap_or(0.0);
            if pos[cfg.k_topk - 1] - next < margin {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Whole-model analytic gradients against central finite differences on the
/// tiny instance, with frozen latent noise. Parameters are re-drawn while
/// any ReLU input, clamp boundary distance, residual norm, or top-k margin
/// sits within 1e-3 of its kink.
pub fn whole_model_gradcheck(variant: Variant, base_seed: u64) -> Result<GradCheckReport> {
    let mut cfg = tiny_config();
    cfg.variant = variant;
    let b = 2usize;
    let h = 1e-5;
    let margin = 1e-3;

    let mut redraws = 0usize;
    let mut seed = base_seed;
    loop {
        seed += 1;
        let params = model::init_params(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let x = Array3::from_shape_fn((b, cfg.w, cfg.d), |_| rng.random_range(0.0..1.0));
        let eps = Array3::from_shape_fn((b, cfg.w, cfg.d1), |_| rng.random_range(-1.0..1.0));

        let smooth = {
            let mut pass = model::forward(&params, &cfg, &x, LatentSampling::Fixed(&eps))?;
            let _ = model::loss_vars(&mut pass, &cfg);
            pass.tape.nonsmooth_margin() >= margin && topk_margins_ok(&params, &cfg, margin)?
        };
        if !smooth {
            redraws += 1;
            if redraws > 500 {
                return Err(crate::error::Error::Validation(
                    "could not find a smooth gradcheck instance".into(),
                ));
            }
            continue;
        }

        let (_, analytic) = model::loss_and_grads(&params, &cfg, &x, LatentSampling::Fixed(&eps))?;
        let numeric = finite_difference_grads(
            &params,
            |p| {
                let mut pass = model::forward(p, &cfg, &x, LatentSampling::Fixed(&eps))?;
                let (total, _, _) = model::loss_vars(&mut pass, &cfg);
                Ok(pass.tape.scalar_value(total))
            },
            h,
        )?;

        let mut per_param = BTreeMap::new();
        let mut max_rel: f64 = 0.0;
        for (name, num) in &numeric {
            // normalizer constants are data carried with the model, not
            // trainables; they receive no gradient
            if name.starts_with("normalizer.") {
                continue;
            }
            let ana = analytic
                .get(name)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(num.raw_dim()));
            let rel = relative_error(&ana, num);
            max_rel = max_rel.max(rel);
            per_param.insert(name.clone(), rel);
        }
        return Ok(GradCheckReport {
            per_param,
            max_rel,
            redraws,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let report = whole_model_gradcheck(Variant::Full, 1000).unwrap();
        assert!(
            report.max_rel < 1e-3,
            "max relative error {} (per-param: {:?})",
            report.max_rel,
            report.per_param
        );
    }

    #[test]
    fn ablated_variants_also_pass_gradcheck() {
        for variant in [Variant::NoFi, Variant::NoVe, Variant::EncoderOnly] {
            let report = whole_model_gradcheck(variant, 2000).unwrap();
            assert!(
                report.max_rel < 1e-3,
                "{variant}: max relative error {}",
                report.max_rel
            );
        }
    }

    #[test]
    fn relative_error_handles_zero_gradients() {
        let a = ArrayD::zeros(ndarray::IxDyn(&[3]));
        let b = ArrayD::zeros(ndarray::IxDyn(&[3]));
        assert_eq!(relative_error(&a, &b), 0.0);
    }
}
