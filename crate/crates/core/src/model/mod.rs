//! Transformer vector-field estimator `v_t(x_t, condition; θ)`.
//!
//! Each frame of the noisy path point is concatenated with the matching
//! condition frame, projected to the model width and passed through a
//! grouped convolutional positional embedding. A sinusoidal embedding of
//! the flow time (with a learnable scale) is appended as one extra token.
//! The encoder is pre-norm with ALiBi attention bias and U-Net style skips
//! that pair layer `i` with layer `n − 1 − i`. The time token is dropped
//! before the output head.

pub mod checkpoint;
mod config;

pub use config::{VectorFieldModelConfig, checked_count_parameters, count_parameters, lora_parameter_count};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Learnable weights, addressed by module path.
pub type ModelParameters = ParamStore;

/// Projections that receive low-rank adaptors.
pub const LORA_TARGETS: [&str; 3] = ["q", "k", "v"];

/// Conditioning input for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// `[L × d_cond]`; masked audio, task feature, or zeros.
    pub cond_frames: Mat,
    /// Frame-aligned symbol ids.
    pub symbol_ids: Option<Vec<usize>>,
    pub cond_dropped: bool,
}

impl ConditionBundle {
    pub fn new(cond_frames: Mat) -> Self {
        ConditionBundle {
            cond_frames,
            symbol_ids: None,
            cond_dropped: false,
        }
    }

    pub fn with_symbols(cond_frames: Mat, symbol_ids: Vec<usize>) -> Result<Self> {
        if symbol_ids.len() != cond_frames.rows() {
            return Err(Error::shape(
                format!("{} symbols", cond_frames.rows()),
                symbol_ids.len(),
            ));
        }
        Ok(ConditionBundle {
            cond_frames,
            symbol_ids: Some(symbol_ids),
            cond_dropped: false,
        })
    }

    /// All-zero condition with no symbols.
    pub fn dropped(len: usize, d_cond: usize) -> Self {
        ConditionBundle {
            cond_frames: Mat::zeros(len, d_cond),
            symbol_ids: None,
            cond_dropped: true,
        }
    }

    pub fn len(&self) -> usize {
        self.cond_frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.cond_frames.rows() == 0
    }
}

/// Global affine map between log-Mel values and model space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for FeatureNorm {
    fn default() -> Self {
        FeatureNorm {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl FeatureNorm {
    /// Statistics over every entry of a corpus.
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a MelSpectrogram>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for m in corpus {
            for &v in m.values().data() {
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0 {
            return FeatureNorm::default();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(1e-12);
        FeatureNorm {
            mean,
            std: var.sqrt(),
        }
    }

    pub fn normalize(&self, m: &MelSpectrogram) -> Mat {
        m.values().map(|v| (v - self.mean) / self.std)
    }

    pub fn denormalize(&self, x: &Mat) -> Result<MelSpectrogram> {
        MelSpectrogram::new(x.map(|v| v * self.std + self.mean))
    }
}

#[derive(Clone, Debug)]
pub struct VectorFieldModel {
    config: VectorFieldModelConfig,
    params: ModelParameters,
    norm: FeatureNorm,
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

impl VectorFieldModel {
    /// Freshly initialised model.
    pub fn new<R: Rng + ?Sized>(config: VectorFieldModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let d = config.d_model;
        let d_in = config.d_feat + config.d_cond;
        p.insert("in_proj.weight", xavier(d_in, d, d_in, d, rng), true)?;
        p.insert("in_proj.bias", Mat::zeros(1, d), true)?;
        p.insert("time.scale", Mat::scalar(1.0), true)?;
        if config.conv_pos_kernel > 0 {
            let fan = d / config.conv_pos_groups * config.conv_pos_kernel;
            p.insert("conv_pos.weight", xavier(d, fan, fan, fan, rng), true)?;
            p.insert("conv_pos.bias", Mat::zeros(1, d), true)?;
        }
        for i in 0..config.n_layers {
            let pre = format!("layers.{i}");
            p.insert(format!("{pre}.ln1.gamma"), Mat::filled(1, d, 1.0), true)?;
            p.insert(format!("{pre}.ln1.beta"), Mat::zeros(1, d), true)?;
            for proj in ["q", "k", "v", "o"] {
                p.insert(format!("{pre}.attn.{proj}.weight"), xavier(d, d, d, d, rng), true)?;
                p.insert(format!("{pre}.attn.{proj}.bias"), Mat::zeros(1, d), true)?;
            }
            p.insert(format!("{pre}.ln2.gamma"), Mat::filled(1, d, 1.0), true)?;
            p.insert(format!("{pre}.ln2.beta"), Mat::zeros(1, d), true)?;
            let f = config.d_ffn;
            p.insert(format!("{pre}.ffn.w1"), xavier(d, f, d, f, rng), true)?;
            p.insert(format!("{pre}.ffn.b1"), Mat::zeros(1, f), true)?;
            p.insert(format!("{pre}.ffn.w2"), xavier(f, d, f, d, rng), true)?;
            p.insert(format!("{pre}.ffn.b2"), Mat::zeros(1, d), true)?;
        }
        if config.use_skip_connections {
            for j in config.n_layers / 2..config.n_layers {
                p.insert(format!("skips.{j}.weight"), xavier(2 * d, d, 2 * d, d, rng), true)?;
                p.insert(format!("skips.{j}.bias"), Mat::zeros(1, d), true)?;
            }
        }
        p.insert("final_ln.gamma", Mat::filled(1, d, 1.0), true)?;
        p.insert("final_ln.beta", Mat::zeros(1, d), true)?;
        p.insert("out_proj.weight", xavier(d, config.d_feat, d, config.d_feat, rng), true)?;
        p.insert("out_proj.bias", Mat::zeros(1, config.d_feat), true)?;

        let lora = config.lora_rank;
        let vocab = config.symbol_vocab_size;
        let mut model = VectorFieldModel {
            config: VectorFieldModelConfig {
                lora_rank: None,
                symbol_vocab_size: None,
                ..config
            },
            params: p,
            norm: FeatureNorm::default(),
        };
        if let Some(v) = vocab {
            model.enable_symbols(v, rng)?;
        }
        if let Some(r) = lora {
            model.apply_lora(r, rng)?;
        }
        Ok(model)
    }

    /// Rebuild a model from stored parameters, checking names and shapes
    /// against what `config` requires.
    pub fn from_parts(
        config: VectorFieldModelConfig,
        params: ModelParameters,
        norm: FeatureNorm,
    ) -> Result<Self> {
        config.validate()?;
        // Reject before building the reference, whose size the config dictates.
        if checked_count_parameters(&config) != Some(params.total_count()) {
            return Err(Error::invalid(format!(
                "{} stored values do not fit the model config",
                params.total_count()
            )));
        }
        let reference = VectorFieldModel::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        if reference.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for e in reference.params.entries() {
            let got = params
                .by_name(&e.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", e.name)))?;
            if got.shape() != e.value.shape() {
                return Err(Error::shape(
                    format!("{} {:?}", e.name, e.value.shape()),
                    format!("{:?}", got.shape()),
                ));
            }
        }
        if !params.all_finite() {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(VectorFieldModel {
            config,
            params,
            norm,
        })
    }

    pub fn config(&self) -> &VectorFieldModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParameters {
        &mut self.params
    }

    pub fn norm(&self) -> FeatureNorm {
        self.norm
    }

    pub fn set_norm(&mut self, norm: FeatureNorm) {
        self.norm = norm;
    }

    /// Add a symbol embedding table and a zero-initialised scalar gate.
    pub fn enable_symbols<R: Rng + ?Sized>(&mut self, vocab: usize, rng: &mut R) -> Result<()> {
        if vocab == 0 {
            return Err(Error::config("symbol vocabulary must be non-empty"));
        }
        if self.config.symbol_vocab_size.is_some() {
            return Err(Error::config("symbol conditioning already enabled"));
        }
        let d = self.config.d_model;
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let table = Mat::from_fn(vocab, d, |_, _| normal.sample(rng));
        self.params.insert("symbol.embedding", table, true)?;
        self.params.insert("symbol.gate", Mat::scalar(0.0), true)?;
        self.config.symbol_vocab_size = Some(vocab);
        Ok(())
    }

    /// Attach low-rank adaptors to the query/key/value projections of every
    /// layer and freeze all pre-existing weights except symbol parameters.
    /// The second factor starts at zero, so outputs are unchanged.
    pub fn apply_lora<R: Rng + ?Sized>(&mut self, rank: usize, rng: &mut R) -> Result<()> {
        let d = self.config.d_model;
        if rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        if rank > d {
            return Err(Error::config(format!("LoRA rank {rank} exceeds d_model {d}")));
        }
        if self.config.lora_rank.is_some() {
            return Err(Error::config("LoRA adaptors already attached"));
        }
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let adaptor = self.params.entry(id).name.starts_with("symbol.");
            self.params.set_trainable(id, adaptor);
        }
        let a = 1.0 / (d as f64).sqrt();
        for i in 0..self.config.n_layers {
            for proj in LORA_TARGETS {
                let pre = format!("layers.{i}.attn.{proj}");
                let down = Mat::from_fn(d, rank, |_, _| rng.random_range(-a..a));
                self.params.insert(format!("{pre}.lora_a"), down, true)?;
                self.params.insert(format!("{pre}.lora_b"), Mat::zeros(rank, d), true)?;
            }
        }
        self.config.lora_rank = Some(rank);
        Ok(())
    }

    /// Copy of the model with U-Net skips bypassed (skip weights unused).
    pub fn without_skips(&self) -> Self {
        let mut m = self.clone();
        m.config.use_skip_connections = false;
        m
    }

    fn check_inputs(&self, x_t: &Mat, t: f64, cond: &ConditionBundle) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("t = {t} is outside [0, 1]")));
        }
        let c = &self.config;
        if x_t.rows() == 0 {
            return Err(Error::invalid("empty input sequence"));
        }
        if x_t.cols() != c.d_feat {
            return Err(Error::shape(format!("{} feature bins", c.d_feat), x_t.cols()));
        }
        if cond.cond_frames.shape() != (x_t.rows(), c.d_cond) {
            return Err(Error::shape(
                format!("condition {:?}", (x_t.rows(), c.d_cond)),
                format!("{:?}", cond.cond_frames.shape()),
            ));
        }
        if let Some(ids) = &cond.symbol_ids {
            let vocab = c
                .symbol_vocab_size
                .ok_or_else(|| Error::invalid("symbols given but symbol conditioning is disabled"))?;
            if ids.len() != x_t.rows() {
                return Err(Error::shape(format!("{} symbols", x_t.rows()), ids.len()));
            }
            if let Some(bad) = ids.iter().find(|&&s| s >= vocab) {
                return Err(Error::invalid(format!("unknown symbol id {bad} (vocab {vocab})")));
            }
        }
        Ok(())
    }

    /// Evaluate the vector field; returns `[L × d_feat]`.
    pub fn forward(&self, x_t: &Mat, t: f64, cond: &ConditionBundle) -> Result<Mat> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward_on_tape(&mut tape, x_t, t, cond)?;
        Ok(tape.value(out).clone())
    }

    /// Field with the whole condition dropped.
    pub fn forward_unconditional(&self, x_t: &Mat, t: f64) -> Result<Mat> {
        let cond = ConditionBundle::dropped(x_t.rows(), self.config.d_cond);
        self.forward(x_t, t, &cond)
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w = tape.param(self.params.require(&format!("{prefix}.weight"))?);
        let b = tape.param(self.params.require(&format!("{prefix}.bias"))?);
        let y = tape.matmul(x, w);
        Ok(tape.add_row(y, b))
    }

    fn projection(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let y = self.linear(tape, x, prefix)?;
        if self.config.lora_rank.is_none() {
            return Ok(y);
        }
        let a = tape.param(self.params.require(&format!("{prefix}.lora_a"))?);
        let b = tape.param(self.params.require(&format!("{prefix}.lora_b"))?);
        let down = tape.matmul(x, a);
        let up = tape.matmul(down, b);
        Ok(tape.add(y, up))
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let g = tape.param(self.params.require(&format!("{prefix}.gamma"))?);
        let b = tape.param(self.params.require(&format!("{prefix}.beta"))?);
        Ok(tape.layer_norm(x, g, b))
    }

    fn attention(&self, tape: &mut Tape, x: Var, layer: usize, biases: &[Mat]) -> Result<Var> {
        let pre = format!("layers.{layer}.attn");
        let q = self.projection(tape, x, &format!("{pre}.q"))?;
        let k = self.projection(tape, x, &format!("{pre}.k"))?;
        let v = self.projection(tape, x, &format!("{pre}.v"))?;
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let s = tape.matmul_nt(qh, kh);
            let mut s = tape.scale(s, scale);
            if let Some(bias) = biases.get(h) {
                s = tape.add_const(s, bias);
            }
            let p = tape.softmax_rows(s);
            outs.push(tape.matmul(p, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.linear(tape, o, &format!("{pre}.o"))
    }

    fn block(&self, tape: &mut Tape, h: Var, layer: usize, biases: &[Mat]) -> Result<Var> {
        let pre = format!("layers.{layer}");
        let a = self.layer_norm(tape, h, &format!("{pre}.ln1"))?;
        let a = self.attention(tape, a, layer, biases)?;
        let h = tape.add(h, a);
        let f = self.layer_norm(tape, h, &format!("{pre}.ln2"))?;
        let w1 = tape.param(self.params.require(&format!("{pre}.ffn.w1"))?);
        let b1 = tape.param(self.params.require(&format!("{pre}.ffn.b1"))?);
        let w2 = tape.param(self.params.require(&format!("{pre}.ffn.w2"))?);
        let b2 = tape.param(self.params.require(&format!("{pre}.ffn.b2"))?);
        let f = tape.matmul(f, w1);
        let f = tape.add_row(f, b1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, b2);
        Ok(tape.add(h, f))
    }

    /// Record a forward pass on `tape` (for training).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x_t: &Mat,
        t: f64,
        cond: &ConditionBundle,
    ) -> Result<Var> {
        self.check_inputs(x_t, t, cond)?;
        let c = &self.config;
        let len = x_t.rows();
        let input = tape.constant(Mat::hstack(&[x_t, &cond.cond_frames])?);
        let mut h = self.linear(tape, input, "in_proj")?;

        if let (Some(ids), Some(_)) = (&cond.symbol_ids, c.symbol_vocab_size) {
            let table = tape.param(self.params.require("symbol.embedding")?);
            let gate = tape.param(self.params.require("symbol.gate")?);
            let e = tape.gather(table, ids);
            let e = tape.mul_scalar(e, gate);
            h = tape.add(h, e);
        }

        if c.conv_pos_kernel > 0 {
            let w = tape.param(self.params.require("conv_pos.weight")?);
            let b = tape.param(self.params.require("conv_pos.bias")?);
            let pos = tape.group_conv(h, w, b, c.conv_pos_groups, c.conv_pos_kernel);
            let pos = tape.gelu(pos);
            h = tape.add(h, pos);
        }

        let te = tape.constant(time_embedding(t, c.d_model));
        let scale = tape.param(self.params.require("time.scale")?);
        let te = tape.mul_scalar(te, scale);
        h = tape.concat_rows(&[h, te]);

        let biases = if c.alibi {
            alibi_biases(c.n_heads, len)
        } else {
            Vec::new()
        };
        let half = c.n_layers / 2;
        let mut saved = Vec::with_capacity(half);
        for i in 0..c.n_layers {
            if c.use_skip_connections {
                if i < half {
                    saved.push(h);
                } else {
                    let partner = saved[c.n_layers - 1 - i];
                    let cat = tape.concat_cols(&[h, partner]);
                    h = self.linear(tape, cat, &format!("skips.{i}"))?;
                }
            }
            h = self.block(tape, h, i, &biases)?;
        }
        let h = self.layer_norm(tape, h, "final_ln")?;
        let h = tape.slice_rows(h, 0, len);
        self.linear(tape, h, "out_proj")
    }
}

/// Sinusoidal embedding of the flow time, `[1 × dim]`. Time is stretched
/// by 1000 so the frequency ladder resolves `[0, 1]`.
pub fn time_embedding(t: f64, dim: usize) -> Mat {
    let half = dim / 2;
    let pos = 1000.0 * t;
    let mut e = Mat::zeros(1, dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        e.set(0, k, (pos * freq).sin());
        e.set(0, half + k, (pos * freq).cos());
    }
    e
}

/// Geometric ALiBi head slopes.
pub fn alibi_slopes(n_heads: usize) -> Vec<f64> {
    fn pow2(n: usize) -> Vec<f64> {
        let start = 2f64.powf(-8.0 / n as f64);
        (0..n).map(|i| start.powi(i as i32 + 1)).collect()
    }
    if n_heads.is_power_of_two() {
        return pow2(n_heads);
    }
    let closest = 1 << (usize::BITS - 1 - n_heads.leading_zeros());
    let mut slopes = pow2(closest);
    slopes.extend(pow2(2 * closest).into_iter().step_by(2).take(n_heads - closest));
    slopes
}

/// Attention biases over `len` frames plus the trailing time token, one
/// `[(len + 1) × (len + 1)]` matrix per head. Frame pairs get the symmetric
/// penalty `−slope · |i − j|`; the time token has no position, so every
/// bias to or from it is zero.
pub fn alibi_biases(n_heads: usize, len: usize) -> Vec<Mat> {
    alibi_slopes(n_heads)
        .into_iter()
        .map(|s| {
            Mat::from_fn(len + 1, len + 1, |i, j| {
                if i == len || j == len { 0.0 } else { -s * (i as f64 - j as f64).abs() }
            })
        })
        .collect()
}
