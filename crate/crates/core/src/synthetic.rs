//! Bundled synthetic benchmark: a coupled-sinusoid multivariate series with
//! injected spike and level-shift anomalies, plus the small model profile
//! used for the end-to-end check.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::{LabelSeries, RawSeries};
use crate::model::{HifiConfig, Variant};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub t_train: usize,
    pub t_test: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            t_train: 5000,
            t_test: 2000,
            channels: 5,
            seed: 7,
        }
    }
}

pub struct SyntheticData {
    pub train: RawSeries,
    pub test: RawSeries,
    pub labels: LabelSeries,
    /// Injected anomaly segments as [start, end) index pairs into the test
    /// split.
    pub segments: Vec<(usize, usize)>,
}

/// Three latent oscillators mixed into the channels, light observation
/// noise, and five injected anomalies in the test split: two spike bursts
/// and three level shifts.
pub fn generate(spec: &SyntheticSpec) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.channels;
    let periods = [23.0, 59.0, 97.0];
    let phases: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mixing: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let offsets: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let noise = 0.02;

    let sample = |t: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let osc: Vec<f64> = (0..3)
            .map(|k| ((t as f64) * std::f64::consts::TAU / periods[k] + phases[k]).sin())
            .collect();
        (0..d)
            .map(|c| {
                let mut v = offsets[c];
                for k in 0..3 {
                    v += mixing[c][k] * osc[k];
                }
                let n: f64 = rng.sample(StandardNormal);
                v + noise * n
            })
            .collect()
    };

    let mut train = Array2::zeros((spec.t_train, d));
    for t in 0..spec.t_train {
        let row = sample(t, &mut rng);
        for c in 0..d {
            train[[t, c]] = row[c];
        }
    }

    let mut test = Array2::zeros((spec.t_test, d));
    for t in 0..spec.t_test {
        let row = sample(spec.t_train + t, &mut rng);
        for c in 0..d {
            test[[t, c]] = row[c];
        }
    }

    // five anomaly segments, placed proportionally so shorter test splits
    // still carry all of them
    let at = |frac: f64| -> usize { ((spec.t_test as f64) * frac) as usize };
    let spike_a = (at(0.08), at(0.08) + 3);
    let shift_a = (at(0.22), at(0.22) + 85);
    let spike_b = (at(0.45), at(0.45) + 4);
    let shift_b = (at(0.60), at(0.60) + 70);
    let shift_c = (at(0.84), at(0.84) + 55);
    let segments = vec![spike_a, shift_a, spike_b, shift_b, shift_c];

    for (i, &(start, end)) in segments.iter().enumerate() {
        for t in start..end.min(spec.t_test) {
            match i {
                0 => {
                    for c in 0..d {
                        test[[t, c]] += if c % 2 == 0 { 3.8 } else { -3.4 };
                    }
                }
                1 => {
                    test[[t, 1 % d]] += 2.8;
                    test[[t, 3 % d]] += 2.4;
                    test[[t, 0]] -= 2.2;
                }
                2 => {
                    for c in 0..d {
                        test[[t, c]] += if c % 2 == 0 { 3.2 } else { -3.2 };
                    }
                }
                3 => {
                    test[[t, 0]] -= 2.6;
                    test[[t, 4 % d]] -= 2.8;
                    test[[t, 2 % d]] += 2.4;
                }
                _ => {
                    test[[t, 2 % d]] += 2.8;
                    test[[t, 1 % d]] -= 2.4;
                    test[[t, 4 % d]] += 2.2;
                }
            }
        }
    }

    let mut labels = vec![0u8; spec.t_test];
    for &(start, end) in &segments {
        for l in labels.iter_mut().take(end.min(spec.t_test)).skip(start) {
            *l = 1;
        }
    }

    SyntheticData {
        train: RawSeries {
            values: train,
            channel_names: None,
        },
        test: RawSeries {
            values: test,
            channel_names: None,
        },
        labels: LabelSeries { labels },
        segments,
    }
}

/// Small model profile for the synthetic end-to-end run: w=32, d1=16,
/// d3=32, K=2, 20 epochs, everything else at protocol defaults.
pub fn small_profile(d: usize, seed: u64) -> (HifiConfig, TrainConfig) {
    let cfg = HifiConfig {
        w: 32,
        d,
        d1: 16,
        d2: 16,
        d3: 32,
        d_k: 4,
        num_heads: 4,
        l: 2,
        alpha: 0.2,
        beta: 1.0,
        k_depth: 2,
        k_topk: 4,
        variant: Variant::Full,
        squared_recon: false,
    };
    let mut tcfg = TrainConfig::with_seed(seed);
    tcfg.epochs = 20;
    (cfg, tcfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_with_five_labelled_segments() {
        let spec = SyntheticSpec {
            t_train: 400,
            t_test: 300,
            channels: 5,
            seed: 7,
        };
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.train.values, b.train.values);
        assert_eq!(a.test.values, b.test.values);
        assert_eq!(a.labels.labels, b.labels.labels);
        assert_eq!(a.segments.len(), 5);

        // labels mark exactly the union of the segments
        let mut union = vec![false; spec.t_test];
        for &(s, e) in &a.segments {
            for m in union.iter_mut().take(e.min(spec.t_test)).skip(s) {
                *m = true;
            }
        }
        for (t, &flag) in union.iter().enumerate() {
            assert_eq!(a.labels.labels[t] == 1, flag, "t = {t}");
        }
        assert!(union.iter().any(|&f| f));
    }

    #[test]
    fn small_profile_is_valid_and_pinned() {
        let (cfg, tcfg) = small_profile(5, 7);
        cfg.validate().unwrap();
        tcfg.validate().unwrap();
        assert_eq!(cfg.w, 32);
        assert_eq!(cfg.d1, 16);
        assert_eq!(cfg.d3, 32);
        assert_eq!(cfg.k_depth, 2);
        assert_eq!(tcfg.epochs, 20);
        assert_eq!(tcfg.batch_size, 64);
        assert_eq!(tcfg.lr, 0.005);
    }
}
