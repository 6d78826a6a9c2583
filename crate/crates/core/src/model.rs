//! Full model assembly: configuration, parameter registry, forward pass over
//! all variants, loss, and anomaly scores.
//!
//! Pipeline of the full variant, per window batch X [B, w, d]:
//!
//! ```text
//! X ──hidden──► X_h ──graph──► X_ho ─┐
//!                 └────────────────── + P ──► X_in ──encoder──► X_eo
//! X_eo ──variational heads──► (mu, log_var) ──sample──► Z
//! Z ──decoder (Q = P)──► ──output head──► X_rec
//! ```

use std::collections::BTreeMap;

use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attn::{self, AttentionProj, LayerVars};
use crate::autodiff::{linear, Grads, Tape, Var};
use crate::dataio::WindowBatch;
use crate::error::{Error, Result};
use crate::graphfi::{self, GraphFiVars, InteractionGraph};
use crate::kv::{self, KvMap};
use crate::params::ParamStore;
use crate::varenc::{self, VarEncVars};

/// Ablation variants: each removes one or more stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Without the feature-interaction stage; `X_in = P + X_h`.
    NoFi,
    /// Without the variational stage; `Z = X_eo` and no KL term.
    NoVe,
    /// Both of the above.
    NoFiVe,
    /// Encoder only: four encoder layers feeding the output head directly.
    EncoderOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoFi,
        Variant::NoVe,
        Variant::NoFiVe,
        Variant::EncoderOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFi => "no_fi",
            Variant::NoVe => "no_ve",
            Variant::NoFiVe => "no_fi_ve",
            Variant::EncoderOnly => "encoder_only",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "no_fi" => Ok(Variant::NoFi),
            "no_ve" => Ok(Variant::NoVe),
            "no_fi_ve" => Ok(Variant::NoFiVe),
            "encoder_only" => Ok(Variant::EncoderOnly),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected full, no_fi, no_ve, no_fi_ve, encoder_only)"
            ))),
        }
    }

    pub fn uses_graph(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoVe)
    }

    pub fn uses_variational(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoFi)
    }

    pub fn uses_decoder(&self) -> bool {
        !matches!(self, Variant::EncoderOnly)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Model hyperparameters. `d` is derived from the data; everything else
/// defaults to the standard protocol values.
#[derive(Clone, Debug, PartialEq)]
pub struct HifiConfig {
    /// Sliding-window length.
    pub w: usize,
    /// Observed channel count (data derived).
    pub d: usize,
    /// Hidden width; also the graph node count.
    pub d1: usize,
    /// Embedding mixing width of the graph learner.
    pub d2: usize,
    /// Inner width of the nonlinear layers (256 for MSL-scale data, 128 otherwise).
    pub d3: usize,
    /// Per-head key/query width.
    pub d_k: usize,
    pub num_heads: usize,
    /// Encoder/decoder depth.
    pub l: usize,
    /// Restart weight of graph propagation.
    pub alpha: f64,
    /// KL weight in the loss.
    pub beta: f64,
    /// Maximum graph propagation depth (serialized as `K`).
    pub k_depth: usize,
    /// Kept entries per adjacency row.
    pub k_topk: usize,
    pub variant: Variant,
    /// Use squared per-step reconstruction error instead of the plain
    /// Euclidean norm. Off by default; the plain norm is the reference
    /// behavior.
    pub squared_recon: bool,
}

impl HifiConfig {
    /// Protocol defaults for a series with `d` channels.
    pub fn with_channels(d: usize) -> Self {
        HifiConfig {
            w: 100,
            d,
            d1: 64,
            d2: 64,
            d3: 128,
            d_k: 16,
            num_heads: 4,
            l: 2,
            alpha: 0.2,
            beta: 1.0,
            k_depth: 3,
            k_topk: 16,
            variant: Variant::Full,
            squared_recon: false,
        }
    }

    /// Same defaults with the wider nonlinear layers used for MSL-scale data.
    pub fn with_channels_msl(d: usize) -> Self {
        HifiConfig {
            d3: 256,
            ..Self::with_channels(d)
        }
    }

    /// Number of encoder layers actually stacked: the encoder-only variant
    /// replaces the l-layer encoder + l-layer decoder with a 2l-layer
    /// encoder (4 for the default l = 2).
    pub fn encoder_layers(&self) -> usize {
        if self.variant == Variant::EncoderOnly {
            2 * self.l
        } else {
            self.l
        }
    }

    pub fn decoder_layers(&self) -> usize {
        if self.variant.uses_decoder() {
            self.l
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.d == 0 || self.d1 == 0 || self.d2 == 0 || self.d3 == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.num_heads * self.d_k != self.d1 {
            return Err(Error::Config(format!(
                "num_heads * d_k must equal d1: {} * {} != {}",
                self.num_heads, self.d_k, self.d1
            )));
        }
        if self.k_topk == 0 || self.k_topk > self.d1 {
            return Err(Error::Config(format!(
                "k_topk must lie in [1, d1]: {} vs d1 {}",
                self.k_topk, self.d1
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        if self.l == 0 {
            return Err(Error::Config("l must be positive".into()));
        }
        Ok(())
    }

    /// Serialize under the `model` section, keys named as in the protocol.
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("model.w".into(), self.w.to_string());
        m.insert("model.d".into(), self.d.to_string());
        m.insert("model.d1".into(), self.d1.to_string());
        m.insert("model.d2".into(), self.d2.to_string());
        m.insert("model.d3".into(), self.d3.to_string());
        m.insert("model.d_k".into(), self.d_k.to_string());
        m.insert("model.num_heads".into(), self.num_heads.to_string());
        m.insert("model.l".into(), self.l.to_string());
        m.insert("model.alpha".into(), self.alpha.to_string());
        m.insert("model.beta".into(), self.beta.to_string());
        m.insert("model.K".into(), self.k_depth.to_string());
        m.insert("model.k_topk".into(), self.k_topk.to_string());
        m.insert("model.variant".into(), self.variant.to_string());
        m.insert("model.squared_recon".into(), self.squared_recon.to_string());
        m
    }

    /// Read back from a kv map; absent keys fall back to the defaults for
    /// `d` (which must be present).
    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let d: usize = kv::get_parsed(map, "model.d")?;
        let defaults = Self::with_channels(d);
        let cfg = HifiConfig {
            w: kv::get_parsed_or(map, "model.w", defaults.w)?,
            d,
            d1: kv::get_parsed_or(map, "model.d1", defaults.d1)?,
            d2: kv::get_parsed_or(map, "model.d2", defaults.d2)?,
            d3: kv::get_parsed_or(map, "model.d3", defaults.d3)?,
            d_k: kv::get_parsed_or(map, "model.d_k", defaults.d_k)?,
            num_heads: kv::get_parsed_or(map, "model.num_heads", defaults.num_heads)?,
            l: kv::get_parsed_or(map, "model.l", defaults.l)?,
            alpha: kv::get_parsed_or(map, "model.alpha", defaults.alpha)?,
            beta: kv::get_parsed_or(map, "model.beta", defaults.beta)?,
            k_depth: kv::get_parsed_or(map, "model.K", defaults.k_depth)?,
            k_topk: kv::get_parsed_or(map, "model.k_topk", defaults.k_topk)?,
            variant: match map.get("model.variant") {
                Some(s) => Variant::parse(s)?,
                None => Variant::Full,
            },
            squared_recon: kv::get_parsed_or(map, "model.squared_recon", false)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    FanIn(usize),
    Zeros,
    Ones,
    /// Standard normal scaled by 1/sqrt(d1), for the node embeddings.
    Embedding(usize),
}

/// Every tensor path with its shape and init rule, fixed by the config.
/// This is the single source of truth for init, checkpoint validation and
/// the registry containment checks.
fn tensor_spec(cfg: &HifiConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, d1, d2, d3) = (cfg.d, cfg.d1, cfg.d2, cfg.d3);
    let mut spec: Vec<(String, Vec<usize>, Init)> = Vec::new();
    // normalization constants travel with the model
    spec.push(("normalizer.min".into(), vec![d], Init::Zeros));
    spec.push(("normalizer.max".into(), vec![d], Init::Ones));
    spec.push(("hidden.w_h".into(), vec![d1, d], Init::FanIn(d)));
    spec.push(("hidden.b_h".into(), vec![d1], Init::Zeros));
    if cfg.variant.uses_graph() {
        spec.push(("graphfi.e1".into(), vec![d1, d1], Init::Embedding(d1)));
        spec.push(("graphfi.e2".into(), vec![d1, d1], Init::Embedding(d1)));
        spec.push(("graphfi.theta1".into(), vec![d1, d2], Init::FanIn(d1)));
        spec.push(("graphfi.theta2".into(), vec![d1, d2], Init::FanIn(d1)));
        spec.push((
            "graphfi.w_ho".into(),
            vec![(cfg.k_depth + 1) * d1, d1],
            Init::FanIn((cfg.k_depth + 1) * d1),
        ));
    }
    let mut layer_spec = |prefix: &str, count: usize| {
        for i in 0..count {
            let p = format!("{prefix}.{i}");
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                spec.push((format!("{p}.{w}"), vec![d1, d1], Init::FanIn(d1)));
            }
            spec.push((format!("{p}.ln1.gamma"), vec![d1], Init::Ones));
            spec.push((format!("{p}.ln1.beta"), vec![d1], Init::Zeros));
            spec.push((format!("{p}.nl.w1"), vec![d3, d1], Init::FanIn(d1)));
            spec.push((format!("{p}.nl.b1"), vec![d3], Init::Zeros));
            spec.push((format!("{p}.nl.w2"), vec![d1, d3], Init::FanIn(d3)));
            spec.push((format!("{p}.nl.b2"), vec![d1], Init::Zeros));
            spec.push((format!("{p}.ln2.gamma"), vec![d1], Init::Ones));
            spec.push((format!("{p}.ln2.beta"), vec![d1], Init::Zeros));
        }
    };
    layer_spec("attn.encoder", cfg.encoder_layers());
    layer_spec("attn.decoder", cfg.decoder_layers());
    if cfg.variant.uses_variational() {
        spec.push(("varenc.w_mu".into(), vec![d1, d1], Init::FanIn(d1)));
        spec.push(("varenc.b_mu".into(), vec![d1], Init::Zeros));
        spec.push(("varenc.w_sigma".into(), vec![d1, d1], Init::FanIn(d1)));
        spec.push(("varenc.b_sigma".into(), vec![d1], Init::Zeros));
    }
    spec.push(("output_head.w".into(), vec![d1, d], Init::FanIn(d1)));
    spec.push(("output_head.b".into(), vec![d], Init::Zeros));
    spec
}

/// Expected shape of every parameter path for this config.
pub fn shape_map(cfg: &HifiConfig) -> BTreeMap<String, Vec<usize>> {
    tensor_spec(cfg)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect()
}

/// Fresh parameters: fan-in-uniform weights, zero biases, unit norm gains,
/// scaled-normal embeddings. Values are snapped to the f32 grid so that
/// checkpoints round-trip exactly.
pub fn init_params(cfg: &HifiConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for (name, shape, init) in tensor_spec(cfg) {
        let t = match init {
            Init::FanIn(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random_range(-bound..bound))
            }
            Init::Zeros => ArrayD::zeros(IxDyn(&shape)),
            Init::Ones => ArrayD::ones(IxDyn(&shape)),
            Init::Embedding(d1) => {
                let scale = 1.0 / (d1 as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(&shape), |_| {
                    let n: f64 = rng.sample(StandardNormal);
                    n * scale
                })
            }
        };
        params.insert(name, t);
    }
    params.quantize_f32();
    params
}

/// Store the fitted normalizer constants in the registry.
pub fn set_normalizer(params: &mut ParamStore, n: &crate::dataio::Normalizer) -> Result<()> {
    let min = Array1::from_vec(n.min.clone()).into_dyn();
    let max = Array1::from_vec(n.max.clone()).into_dyn();
    if params.get("normalizer.min")?.shape() != min.shape() {
        return Err(Error::Shape(format!(
            "normalizer has {} channels, model expects {}",
            min.len(),
            params.get("normalizer.min")?.len()
        )));
    }
    *params.get_mut("normalizer.min")? = min;
    *params.get_mut("normalizer.max")? = max;
    params.quantize_f32();
    Ok(())
}

pub fn get_normalizer(params: &ParamStore) -> Result<crate::dataio::Normalizer> {
    Ok(crate::dataio::Normalizer {
        min: params.get("normalizer.min")?.iter().copied().collect(),
        max: params.get("normalizer.max")?.iter().copied().collect(),
    })
}

/// How the latent sample is produced during a forward pass.
pub enum LatentSampling<'a> {
    /// Draw fresh standard-normal noise from the given stream.
    Draw(&'a mut ChaCha8Rng),
    /// Use a fixed noise tensor (deterministic loss, e.g. gradient checks).
    Fixed(&'a Array3<f64>),
    /// Deterministic mode: `z = mu`.
    Mean,
}

/// Every intermediate of a forward pass, as plain arrays. Fields are absent
/// for variants that skip the producing stage.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub x_h: Array3<f64>,
    pub x_ho: Option<Array3<f64>>,
    pub x_in: Array3<f64>,
    pub x_eo: Array3<f64>,
    pub mu: Option<Array3<f64>>,
    pub log_var: Option<Array3<f64>>,
    pub z: Option<Array3<f64>>,
    pub x_rec: Array3<f64>,
}

/// A recorded forward pass: the tape, the bound parameter variables, the
/// input, and handles to the trace tensors.
pub struct ForwardPass {
    pub tape: Tape,
    pub binding: BTreeMap<String, Var>,
    pub x: Var,
    pub x_rec: Var,
    pub mu: Option<Var>,
    pub log_var: Option<Var>,
    trace_vars: TraceVars,
    pub graph: Option<InteractionGraph>,
}

struct TraceVars {
    x_h: Var,
    x_ho: Option<Var>,
    x_in: Var,
    x_eo: Var,
    z: Option<Var>,
}

fn to3(a: &ArrayD<f64>) -> Array3<f64> {
    a.clone().into_dimensionality().unwrap()
}

impl ForwardPass {
    pub fn trace(&self) -> ForwardTrace {
        let t = &self.tape;
        ForwardTrace {
            x_h: to3(t.value(self.trace_vars.x_h)),
            x_ho: self.trace_vars.x_ho.map(|v| to3(t.value(v))),
            x_in: to3(t.value(self.trace_vars.x_in)),
            x_eo: to3(t.value(self.trace_vars.x_eo)),
            mu: self.mu.map(|v| to3(t.value(v))),
            log_var: self.log_var.map(|v| to3(t.value(v))),
            z: self.trace_vars.z.map(|v| to3(t.value(v))),
            x_rec: to3(t.value(self.x_rec)),
        }
    }
}

fn bind_layer(binding: &BTreeMap<String, Var>, prefix: &str) -> Result<LayerVars> {
    let get = |suffix: &str| -> Result<Var> {
        binding
            .get(&format!("{prefix}.{suffix}"))
            .copied()
            .ok_or_else(|| Error::Validation(format!("missing parameter {prefix}.{suffix}")))
    };
    Ok(LayerVars {
        proj: AttentionProj {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_o: get("w_o")?,
        },
        ln1_gamma: get("ln1.gamma")?,
        ln1_beta: get("ln1.beta")?,
        nl_w1: get("nl.w1")?,
        nl_b1: get("nl.b1")?,
        nl_w2: get("nl.w2")?,
        nl_b2: get("nl.b2")?,
        ln2_gamma: get("ln2.gamma")?,
        ln2_beta: get("ln2.beta")?,
    })
}

/// Run the model on a window batch, recording the tape.
///
/// The interaction graph is rebuilt from the current embeddings on every
/// call; callers that score with frozen parameters simply reuse the returned
/// pass.
pub fn forward(
    params: &ParamStore,
    cfg: &HifiConfig,
    x: &Array3<f64>,
    latent: LatentSampling<'_>,
) -> Result<ForwardPass> {
    cfg.validate()?;
    let (b, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if w != cfg.w || d != cfg.d {
        return Err(Error::Shape(format!(
            "input windows are {w}x{d}, config expects {}x{}",
            cfg.w, cfg.d
        )));
    }
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let get = |name: &str| -> Result<Var> {
        binding
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    };

    let xv = tape.leaf(x.clone().into_dyn());
    let x_h = graphfi::hidden_transform_var(&mut tape, get("hidden.w_h")?, get("hidden.b_h")?, xv);

    let (x_ho, graph) = if cfg.variant.uses_graph() {
        let vars = GraphFiVars {
            w_h: get("hidden.w_h")?,
            b_h: get("hidden.b_h")?,
            e1: get("graphfi.e1")?,
            e2: get("graphfi.e2")?,
            theta1: get("graphfi.theta1")?,
            theta2: get("graphfi.theta2")?,
            w_ho: get("graphfi.w_ho")?,
        };
        let out =
            graphfi::feature_interaction_var(&mut tape, &vars, x_h, cfg.k_topk, cfg.alpha, cfg.k_depth)?;
        (Some(out.x_ho), Some(out.graph))
    } else {
        (None, None)
    };

    let pos = tape.leaf(attn::positional_encoding(cfg.w, cfg.d1).into_dyn());
    let x_in = {
        let base = tape.add(x_h, pos);
        match x_ho {
            Some(ho) => tape.add(base, ho),
            None => base,
        }
    };

    let enc_layers: Vec<LayerVars> = (0..cfg.encoder_layers())
        .map(|i| bind_layer(&binding, &format!("attn.encoder.{i}")))
        .collect::<Result<_>>()?;
    let x_eo = attn::encode_var(&mut tape, &enc_layers, x_in, cfg.num_heads);

    let (mu, log_var, z) = if cfg.variant.uses_variational() {
        let vv = VarEncVars {
            w_mu: get("varenc.w_mu")?,
            b_mu: get("varenc.b_mu")?,
            w_sigma: get("varenc.w_sigma")?,
            b_sigma: get("varenc.b_sigma")?,
        };
        let (mu, log_var) = varenc::encode_distribution_var(&mut tape, &vv, x_eo);
        let z = match latent {
            LatentSampling::Draw(rng) => {
                let eps = varenc::draw_eps(b, cfg.w, cfg.d1, rng);
                let eps_v = tape.leaf(eps.into_dyn());
                varenc::reparameterize_var(&mut tape, mu, log_var, eps_v)
            }
            LatentSampling::Fixed(eps) => {
                if eps.shape() != [b, cfg.w, cfg.d1] {
                    return Err(Error::Shape(format!(
                        "fixed eps has shape {:?}, expected [{b}, {}, {}]",
                        eps.shape(),
                        cfg.w,
                        cfg.d1
                    )));
                }
                let eps_v = tape.leaf(eps.clone().into_dyn());
                varenc::reparameterize_var(&mut tape, mu, log_var, eps_v)
            }
            LatentSampling::Mean => mu,
        };
        (Some(mu), Some(log_var), z)
    } else {
        (None, None, x_eo)
    };

    let pre_head = if cfg.variant.uses_decoder() {
        let dec_layers: Vec<LayerVars> = (0..cfg.decoder_layers())
            .map(|i| bind_layer(&binding, &format!("attn.decoder.{i}")))
            .collect::<Result<_>>()?;
        attn::decode_var(&mut tape, &dec_layers, z, pos, cfg.num_heads)
    } else {
        x_eo
    };
    let x_rec = linear(
        &mut tape,
        pre_head,
        get("output_head.w")?,
        Some(get("output_head.b")?),
    );

    Ok(ForwardPass {
        trace_vars: TraceVars {
            x_h,
            x_ho,
            x_in,
            x_eo,
            z: if cfg.variant.uses_decoder() { Some(z) } else { None },
        },
        tape,
        binding,
        x: xv,
        x_rec,
        mu,
        log_var,
        graph,
    })
}

/// The three reductions of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Reconstruction term on the tape: batch mean of the per-window sum of
/// per-step residual norms (squared norms when `squared` is set).
fn recon_var(tape: &mut Tape, x: Var, x_rec: Var, squared: bool) -> Var {
    let batch = tape.value(x).shape()[0] as f64;
    let diff = tape.sub(x, x_rec);
    let per_step = if squared {
        let sq = tape.mul(diff, diff);
        tape.sum_last_keep(sq)
    } else {
        tape.l2_norm_last(diff)
    };
    let total = tape.sum_all(per_step);
    tape.affine(total, 1.0 / batch, 0.0)
}

/// Loss on a recorded pass: `total = recon + beta * kl`.
pub fn loss_vars(pass: &mut ForwardPass, cfg: &HifiConfig) -> (Var, Var, Var) {
    let tape = &mut pass.tape;
    let recon = recon_var(tape, pass.x, pass.x_rec, cfg.squared_recon);
    let kl = match (pass.mu, pass.log_var) {
        (Some(mu), Some(log_var)) => varenc::kl_var(tape, mu, log_var),
        _ => tape.leaf(ArrayD::zeros(IxDyn(&[]))),
    };
    let weighted = tape.affine(kl, cfg.beta, 0.0);
    let total = tape.add(recon, weighted);
    (total, recon, kl)
}

/// Plain-array loss of a trace, for inspection and tests.
pub fn loss(trace: &ForwardTrace, x: &Array3<f64>, beta: f64, squared: bool) -> LossParts {
    let b = x.shape()[0] as f64;
    let mut recon = 0.0;
    for (xw, rw) in x.outer_iter().zip(trace.x_rec.outer_iter()) {
        for (xs, rs) in xw.outer_iter().zip(rw.outer_iter()) {
            let sq: f64 = xs
                .iter()
                .zip(rs.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            recon += if squared { sq } else { sq.sqrt() };
        }
    }
    recon /= b;
    let kl = match (&trace.mu, &trace.log_var) {
        (Some(mu), Some(lv)) => varenc::kl_to_standard_normal(mu, lv).unwrap(),
        _ => 0.0,
    };
    LossParts {
        total: recon + beta * kl,
        recon,
        kl,
    }
}

/// Per-window anomaly score: Euclidean norm of the residual at the window's
/// final step.
pub fn anomaly_score(trace: &ForwardTrace, x: &Array3<f64>) -> Vec<f64> {
    let w = x.shape()[1];
    x.outer_iter()
        .zip(trace.x_rec.outer_iter())
        .map(|(xw, rw)| {
            let xs = xw.row(w - 1);
            let rs = rw.row(w - 1);
            xs.iter()
                .zip(rs.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Forward + loss + backward in one step. Returns the loss parts and the
/// gradient of every parameter.
pub fn loss_and_grads(
    params: &ParamStore,
    cfg: &HifiConfig,
    x: &Array3<f64>,
    latent: LatentSampling<'_>,
) -> Result<(LossParts, BTreeMap<String, ArrayD<f64>>)> {
    let mut pass = forward(params, cfg, x, latent)?;
    let (total, recon, kl) = loss_vars(&mut pass, cfg);
    let parts = LossParts {
        total: pass.tape.scalar_value(total),
        recon: pass.tape.scalar_value(recon),
        kl: pass.tape.scalar_value(kl),
    };
    let mut grads: Grads = pass.tape.backward(total);
    let mut out = BTreeMap::new();
    for (name, var) in &pass.binding {
        if let Some(g) = grads.take(*var) {
            out.insert(name.clone(), g);
        }
    }
    Ok((parts, out))
}

/// Evaluate loss on a whole batch set without keeping tapes around.
pub fn batch_loss(
    params: &ParamStore,
    cfg: &HifiConfig,
    batch: &WindowBatch,
    latent: LatentSampling<'_>,
) -> Result<LossParts> {
    let mut pass = forward(params, cfg, &batch.windows, latent)?;
    let (total, recon, kl) = loss_vars(&mut pass, cfg);
    Ok(LossParts {
        total: pass.tape.scalar_value(total),
        recon: pass.tape.scalar_value(recon),
        kl: pass.tape.scalar_value(kl),
    })
}
