//! Embedded invariant suite behind the `selfcheck` command: fast,
//! self-contained versions of the numerical checks that guard the model.

use std::time::Instant;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::eval;
use crate::gradcheck;
use crate::graphfi;
use crate::model::Variant;
use crate::varenc;

pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = (&'static str, Box<dyn Fn() -> Result<String, String>>);

fn gradient_check() -> Result<String, String> {
    let report = gradcheck::whole_model_gradcheck(Variant::Full, 31000)
        .map_err(|e| e.to_string())?;
    if report.max_rel < 1e-3 {
        Ok(format!(
            "max relative error {:.2e} ({} redraws)",
            report.max_rel, report.redraws
        ))
    } else {
        Err(format!("max relative error {:.2e} >= 1e-3", report.max_rel))
    }
}

fn softmax_rows() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let q = Array3::from_shape_fn((1, 6, 4), |_| rng.random_range(-2.0..2.0));
        let k = Array3::from_shape_fn((1, 5, 4), |_| rng.random_range(-2.0..2.0));
        let w = crate::attn::attention_weights(&q, &k).map_err(|e| e.to_string())?;
        for lane in w.lanes(ndarray::Axis(2)) {
            worst = worst.max((lane.sum() - 1.0).abs());
        }
    }
    if worst < 1e-6 {
        Ok(format!("worst row-sum deviation {worst:.2e}"))
    } else {
        Err(format!("row-sum deviation {worst:.2e} >= 1e-6"))
    }
}

fn kl_closed_form() -> Result<String, String> {
    // unit-mean single element: exactly 0.5
    let mu = Array3::from_elem((1, 1, 1), 1.0);
    let lv = Array3::zeros((1, 1, 1));
    let kl = varenc::kl_to_standard_normal(&mu, &lv).map_err(|e| e.to_string())?;
    if (kl - 0.5).abs() > 1e-12 {
        return Err(format!("KL(N(1,1)||N(0,1)) = {kl}, expected 0.5"));
    }
    // Monte-Carlo agreement on a random instance
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mu = Array3::from_shape_fn((1, 1, 4), |_| rng.random_range(-1.0..1.0));
    let lv = Array3::from_shape_fn((1, 1, 4), |_| rng.random_range(-0.8..0.8));
    let closed = varenc::kl_to_standard_normal(&mu, &lv).map_err(|e| e.to_string())?;
    let n = 100_000;
    let mut acc = 0.0;
    for _ in 0..n {
        for i in 0..4 {
            let m = mu[[0, 0, i]];
            let s2 = lv[[0, 0, i]].exp();
            let epsv: f64 = rng.sample(StandardNormal);
            let z = m + s2.sqrt() * epsv;
            let log_q = -0.5 * ((z - m) * (z - m) / s2 + s2.ln());
            let log_p = -0.5 * z * z;
            acc += log_q - log_p;
        }
    }
    let mc = acc / n as f64;
    let rel = (mc - closed).abs() / closed.abs();
    if rel < 0.02 {
        Ok(format!("closed {closed:.5} vs MC {mc:.5} (rel {rel:.3})"))
    } else {
        Err(format!("closed {closed:.5} vs MC {mc:.5} differs by {rel:.3} >= 2%"))
    }
}

fn point_adjust_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for case in 0..10_000 {
        let n = rng.random_range(1..120);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let pred: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.2))).collect();
        let fast = eval::point_adjust(&pred, &labels).map_err(|e| e.to_string())?;
        // per-element segment walk
        let mut slow = pred.clone();
        for i in 0..n {
            if labels[i] == 1 {
                let mut lo = i;
                while lo > 0 && labels[lo - 1] == 1 {
                    lo -= 1;
                }
                let mut hi = i;
                while hi + 1 < n && labels[hi + 1] == 1 {
                    hi += 1;
                }
                if (lo..=hi).any(|j| pred[j] == 1) {
                    slow[i] = 1;
                }
            }
        }
        if fast != slow {
            return Err(format!("case {case}: point_adjust disagrees with oracle"));
        }
    }
    Ok("10000 random cases match the segment-scan oracle".into())
}

fn graph_properties() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..200 {
        let d1 = 5;
        let g = graphfi::GraphLearner {
            e1: ndarray::Array2::from_shape_fn((d1, d1), |_| rng.random_range(-1.0..1.0)),
            e2: ndarray::Array2::from_shape_fn((d1, d1), |_| rng.random_range(-1.0..1.0)),
            theta1: ndarray::Array2::from_shape_fn((d1, 4), |_| rng.random_range(-1.0..1.0)),
            theta2: ndarray::Array2::from_shape_fn((d1, 4), |_| rng.random_range(-1.0..1.0)),
        };
        let a = graphfi::build_adjacency(&g);
        for i in 0..d1 {
            if a[[i, i]] != 0.0 {
                return Err(format!("nonzero diagonal entry {}", a[[i, i]]));
            }
        }
        if !a.iter().all(|&v| (0.0..1.0).contains(&v)) {
            return Err("adjacency entry outside [0, 1)".into());
        }
        let sparse = graphfi::topk_sparsify(&a, 2).map_err(|e| e.to_string())?;
        for row in sparse.rows() {
            if row.iter().filter(|&&v| v != 0.0).count() > 2 {
                return Err("row with more than k nonzeros".into());
            }
        }
    }
    let zero = ndarray::Array2::<f64>::zeros((6, 6));
    let a_hat = graphfi::normalize_adjacency(&zero).map_err(|e| e.to_string())?;
    if a_hat != ndarray::Array2::eye(6) {
        return Err("normalize of the zero matrix is not the identity".into());
    }
    Ok("diagonal, range, sparsity and normalization checks hold".into())
}

fn default_checks() -> Vec<Check> {
    vec![
        ("gradient-oracle", Box::new(gradient_check)),
        ("softmax-rows", Box::new(softmax_rows)),
        ("kl-closed-form", Box::new(kl_closed_form)),
        ("point-adjust", Box::new(point_adjust_oracle)),
        ("graph-properties", Box::new(graph_properties)),
    ]
}

pub fn run_checks(checks: Vec<Check>) -> Vec<CheckResult> {
    checks
        .into_iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let outcome = f();
            let seconds = t0.elapsed().as_secs_f64();
            match outcome {
                Ok(detail) => CheckResult {
                    name: name.to_string(),
                    passed: true,
                    detail,
                    seconds,
                },
                Err(detail) => CheckResult {
                    name: name.to_string(),
                    passed: false,
                    detail,
                    seconds,
                },
            }
        })
        .collect()
}

/// Run the full embedded suite.
pub fn run_all() -> Vec<CheckResult> {
    run_checks(default_checks())
}

pub fn render_table(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "[{}] {:<18} {:>7.2}s  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!(
        "{} checks, {} failed\n",
        results.len(),
        failed
    ));
    out
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        let results = run_checks(vec![
            ("softmax-rows", Box::new(softmax_rows)),
            ("kl-closed-form", Box::new(kl_closed_form)),
            ("graph-properties", Box::new(graph_properties)),
        ]);
        assert!(all_passed(&results), "{}", render_table(&results));
    }

    #[test]
    fn harness_reports_injected_failure() {
        let results = run_checks(vec![
            ("always-ok", Box::new(|| Ok("fine".into()))),
            ("broken-kl", Box::new(|| Err("constant off by 2".into()))),
        ]);
        assert!(!all_passed(&results));
        let table = render_table(&results);
        assert!(table.contains("[FAIL] broken-kl"), "{table}");
        assert!(table.contains("1 failed"), "{table}");
    }
}
