//! Variational encoding: map encoder outputs to per-time-step normal
//! distributions, sample once by reparameterization, and compute the KL
//! regularizer against the standard normal.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{linear_t, Tape, Var};
use crate::error::{Error, Result};

/// `log σ²` is clamped to this symmetric range to keep `exp` bounded during
/// early training.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Two independent affine heads, weights stored as [d1, d1] (y = W·x).
#[derive(Clone, Debug)]
pub struct VariationalHeads {
    pub w_mu: Array2<f64>,
    pub b_mu: Array1<f64>,
    pub w_sigma: Array2<f64>,
    pub b_sigma: Array1<f64>,
}

/// Mean / log-variance pair plus the latent sample drawn from them.
#[derive(Clone, Debug)]
pub struct LatentEncoding {
    pub mu: Array3<f64>,
    pub log_var: Array3<f64>,
    pub z: Array3<f64>,
    pub eps_seed: u64,
}

pub struct VarEncVars {
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
}

/// (mu, log_var) from the deterministic encoding; log_var clamped to
/// ±[`LOG_VAR_CLAMP`].
pub fn encode_distribution_var(t: &mut Tape, v: &VarEncVars, x_eo: Var) -> (Var, Var) {
    let mu = linear_t(t, x_eo, v.w_mu, Some(v.b_mu));
    let raw = linear_t(t, x_eo, v.w_sigma, Some(v.b_sigma));
    let log_var = t.clamp(raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
    (mu, log_var)
}

pub fn encode_distribution(
    heads: &VariationalHeads,
    x_eo: &Array3<f64>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    if heads.w_mu.ncols() != x_eo.shape()[2] {
        return Err(Error::Shape(format!(
            "variational heads expect width {}, input has {}",
            heads.w_mu.ncols(),
            x_eo.shape()[2]
        )));
    }
    let mut t = Tape::new();
    let vars = VarEncVars {
        w_mu: t.leaf(heads.w_mu.clone().into_dyn()),
        b_mu: t.leaf(heads.b_mu.clone().into_dyn()),
        w_sigma: t.leaf(heads.w_sigma.clone().into_dyn()),
        b_sigma: t.leaf(heads.b_sigma.clone().into_dyn()),
    };
    let x = t.leaf(x_eo.clone().into_dyn());
    let (mu, log_var) = encode_distribution_var(&mut t, &vars, x);
    Ok((
        t.value(mu).clone().into_dimensionality().unwrap(),
        t.value(log_var).clone().into_dimensionality().unwrap(),
    ))
}

/// One standard-normal draw per element.
pub fn draw_eps(b: usize, w: usize, d1: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn((b, w, d1), |_| rng.sample(StandardNormal))
}

/// `z = mu + exp(log_var / 2) ⊙ eps`; `eps` enters as a constant so
/// gradients flow to `mu` and `log_var` only.
pub fn reparameterize_var(t: &mut Tape, mu: Var, log_var: Var, eps: Var) -> Var {
    let half = t.affine(log_var, 0.5, 0.0);
    let sigma = t.exp(half);
    let noise = t.mul(sigma, eps);
    t.add(mu, noise)
}

pub fn reparameterize(
    mu: &Array3<f64>,
    log_var: &Array3<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f64>> {
    if mu.shape() != log_var.shape() {
        return Err(Error::Shape("mu and log_var shapes differ".into()));
    }
    let s = mu.shape();
    let eps = draw_eps(s[0], s[1], s[2], rng);
    let mut t = Tape::new();
    let muv = t.leaf(mu.clone().into_dyn());
    let lvv = t.leaf(log_var.clone().into_dyn());
    let epsv = t.leaf(eps.into_dyn());
    let z = reparameterize_var(&mut t, muv, lvv, epsv);
    Ok(t.value(z).clone().into_dimensionality().unwrap())
}

/// Closed-form KL to the standard normal, summed over latent dimension and
/// time, averaged over the batch:
/// `0.5 · Σ (mu² + exp(log_var) − log_var − 1)`.
pub fn kl_var(t: &mut Tape, mu: Var, log_var: Var) -> Var {
    let batch = t.value(mu).shape()[0] as f64;
    let mu2 = t.mul(mu, mu);
    let var = t.exp(log_var);
    let a = t.add(mu2, var);
    let b = t.sub(a, log_var);
    let c = t.affine(b, 1.0, -1.0);
    let total = t.sum_all(c);
    t.affine(total, 0.5 / batch, 0.0)
}

pub fn kl_to_standard_normal(mu: &Array3<f64>, log_var: &Array3<f64>) -> Result<f64> {
    if mu.shape() != log_var.shape() {
        return Err(Error::Shape("mu and log_var shapes differ".into()));
    }
    let mut t = Tape::new();
    let muv = t.leaf(mu.clone().into_dyn());
    let lvv = t.leaf(log_var.clone().into_dyn());
    let kl = kl_var(&mut t, muv, lvv);
    Ok(t.scalar_value(kl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand_chacha::rand_core::SeedableRng;

    fn rand3(a: usize, b: usize, c: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn((a, b, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_heads_give_standard_normal_params() {
        let heads = VariationalHeads {
            w_mu: Array2::zeros((3, 3)),
            b_mu: Array1::zeros(3),
            w_sigma: Array2::zeros((3, 3)),
            b_sigma: Array1::zeros(3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand3(2, 4, 3, &mut rng);
        let (mu, lv) = encode_distribution(&heads, &x).unwrap();
        assert!(mu.iter().all(|&v| v == 0.0));
        assert!(lv.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_var_clamps_at_ten() {
        let heads = VariationalHeads {
            w_mu: Array2::zeros((1, 1)),
            b_mu: Array1::zeros(1),
            w_sigma: Array2::zeros((1, 1)),
            b_sigma: arr1(&[25.0]),
        };
        let x = Array3::zeros((1, 1, 1));
        let (_, lv) = encode_distribution(&heads, &x).unwrap();
        assert_eq!(lv[[0, 0, 0]], 10.0);
    }

    #[test]
    fn heads_match_affine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = VariationalHeads {
            w_mu: Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0)),
            b_mu: arr1(&[0.1, -0.3]),
            w_sigma: Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0)),
            b_sigma: arr1(&[0.2, 0.4]),
        };
        let x = rand3(1, 2, 2, &mut rng);
        let (mu, lv) = encode_distribution(&heads, &x).unwrap();
        for t_ in 0..2 {
            for o in 0..2 {
                let mut m = heads.b_mu[o];
                let mut s = heads.b_sigma[o];
                for i in 0..2 {
                    m += heads.w_mu[[o, i]] * x[[0, t_, i]];
                    s += heads.w_sigma[[o, i]] * x[[0, t_, i]];
                }
                assert!((mu[[0, t_, o]] - m).abs() < 1e-12);
                assert!((lv[[0, t_, o]] - s.clamp(-10.0, 10.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reparameterize_is_deterministic_under_fixed_rng() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(7);
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let mu = Array3::from_elem((2, 3, 4), 0.3);
        let lv = Array3::from_elem((2, 3, 4), -0.5);
        let z1 = reparameterize(&mu, &lv, &mut rng1).unwrap();
        let z2 = reparameterize(&mu, &lv, &mut rng2).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn clamp_floor_collapses_noise_to_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu = Array3::from_elem((1, 2, 2), 1.5);
        let lv = Array3::from_elem((1, 2, 2), -LOG_VAR_CLAMP);
        let z = reparameterize(&mu, &lv, &mut rng).unwrap();
        // noise scale exp(−5) ≈ 6.7e−3
        for v in z.iter() {
            assert!((v - 1.5).abs() < 10.0 * (-5.0f64).exp());
        }
    }

    #[test]
    fn sample_moments_converge_to_mu_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mu = Array3::zeros((1, 1, 1));
        let lv = Array3::zeros((1, 1, 1));
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = reparameterize(&mu, &lv, &mut rng).unwrap()[[0, 0, 0]];
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn kl_zero_at_standard_normal() {
        let mu = Array3::zeros((2, 3, 4));
        let lv = Array3::zeros((2, 3, 4));
        assert_eq!(kl_to_standard_normal(&mu, &lv).unwrap(), 0.0);
    }

    #[test]
    fn kl_single_unit_mean_element_is_half() {
        let mu = Array3::from_elem((1, 1, 1), 1.0);
        let lv = Array3::zeros((1, 1, 1));
        let kl = kl_to_standard_normal(&mu, &lv).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        // E_{z~q}[log q(z) − log p(z)] estimated with 10^5 samples
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mu = Array3::from_shape_fn((1, 1, 4), |(_, _, i)| 0.3 * (i as f64 + 1.0) - 0.5);
        let lv = Array3::from_shape_fn((1, 1, 4), |(_, _, i)| 0.2 * (i as f64) - 0.4);
        let closed = kl_to_standard_normal(&mu, &lv).unwrap();

        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for i in 0..4 {
                let m = mu[[0, 0, i]];
                let s2 = lv[[0, 0, i]].exp();
                let eps: f64 = rng.sample(StandardNormal);
                let z = m + s2.sqrt() * eps;
                let log_q = -0.5 * ((z - m) * (z - m) / s2 + s2.ln() + (2.0 * std::f64::consts::PI).ln());
                let log_p = -0.5 * (z * z + (2.0 * std::f64::consts::PI).ln());
                acc += log_q - log_p;
            }
        }
        let mc = acc / n as f64;
        assert!(
            (mc - closed).abs() / closed.abs() < 0.02,
            "mc {mc} vs closed {closed}"
        );
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mu = rand3(1, 2, 3, &mut rng);
            let lv = rand3(1, 2, 3, &mut rng);
            let kl = kl_to_standard_normal(&mu, &lv).unwrap();
            assert!(kl >= 0.0);
            let nontrivial = mu.iter().any(|&v| v != 0.0) || lv.iter().any(|&v| v != 0.0);
            if nontrivial {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mu = rand3(1, 2, 3, &mut rng);
        let lv = rand3(1, 2, 3, &mut rng);

        let mut t = Tape::new();
        let muv = t.leaf(mu.clone().into_dyn());
        let lvv = t.leaf(lv.clone().into_dyn());
        let kl = kl_var(&mut t, muv, lvv);
        let grads = t.backward(kl);
        let gmu = grads.get(muv).unwrap().clone();
        let glv = grads.get(lvv).unwrap().clone();

        let h = 1e-6;
        for idx in 0..mu.len() {
            let mut p = mu.clone();
            let mut m = mu.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (kl_to_standard_normal(&p, &lv).unwrap()
                - kl_to_standard_normal(&m, &lv).unwrap())
                / (2.0 * h);
            let a = gmu.as_slice().unwrap()[idx];
            assert!((a - num).abs() / (a.abs() + num.abs()).max(1e-6) < 1e-6);
        }
        for idx in 0..lv.len() {
            let mut p = lv.clone();
            let mut m = lv.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (kl_to_standard_normal(&mu, &p).unwrap()
                - kl_to_standard_normal(&mu, &m).unwrap())
                / (2.0 * h);
            let a = glv.as_slice().unwrap()[idx];
            assert!((a - num).abs() / (a.abs() + num.abs()).max(1e-6) < 1e-6);
        }
    }
}
