//! Transformer blocks over patch sequences: self-modulated LayerNorm,
//! multi-head attention, the positional-embedding residual, and a GELU
//! MLP, stacked `depth` times.
//!
//! The modulated LayerNorm computes gain and bias from the row's
//! positional embedding through two learned `[d, d]` maps initialized
//! to zero, so a freshly constructed block normalizes exactly like a
//! plain LayerNorm. The attention residual follows the form
//! `resid = pe + attn_out`; `ResidualMode::Conventional` switches to
//! the usual `input + attn_out` for ablation.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{attention_probs, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{linear_t, linear_value, Binder, Linear, LinearVars};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;
/// Initialization scale for projection weights and the embedding map.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualMode {
    /// Residual adds the positional embedding to the attention output.
    Paper,
    /// Residual adds the block input instead.
    Conventional,
}

impl ResidualMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResidualMode::Paper => "paper",
            ResidualMode::Conventional => "conventional",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ResidualMode::Paper),
            "conventional" => Ok(ResidualMode::Conventional),
            other => Err(Error::Config(format!(
                "unknown residual mode '{}' (expected paper|conventional)",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    pub residual_mode: ResidualMode,
    pub eps: f64,
}

impl TransformerConfig {
    /// Defaults: depth 5, heads 3, mlp_ratio 4, no dropout.
    pub fn with_dims(d: usize) -> Self {
        TransformerConfig {
            depth: 5,
            d,
            heads: 3,
            mlp_ratio: 4.0,
            dropout: 0.0,
            residual_mode: ResidualMode::Paper,
            eps: LAYERNORM_EPS,
        }
    }

    pub fn mlp_dim(&self) -> usize {
        (self.d as f64 * self.mlp_ratio).round() as usize
    }

    /// Depths covered by the reference ablation; other values work but
    /// callers should surface a warning.
    pub fn is_reference_depth(&self) -> bool {
        matches!(self.depth, 3 | 5 | 7)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("transformer depth must be >= 1".into()));
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.mlp_dim() == 0 {
            return Err(Error::Config(format!(
                "mlp_ratio {} collapses the hidden dim",
                self.mlp_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Modulation maps of one self-modulated LayerNorm: row gain is
/// `1 + emb . gain_map`, row bias is `emb . bias_map`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlnParams {
    pub gain_map: Tensor,
    pub bias_map: Tensor,
}

pub struct SlnVars {
    pub gain_map: Var,
    pub bias_map: Var,
}

impl SlnParams {
    pub fn zeroed(d: usize) -> Self {
        SlnParams {
            gain_map: Tensor::zeros(&[d, d]),
            bias_map: Tensor::zeros(&[d, d]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Binder, prefix: &str) -> SlnVars {
        SlnVars {
            gain_map: b.bind(tape, format!("{prefix}.gain_map"), &self.gain_map),
            bias_map: b.bind(tape, format!("{prefix}.bias_map"), &self.bias_map),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.gain_map"), &self.gain_map);
        f(&format!("{prefix}.bias_map"), &self.bias_map);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.gain_map"), &mut self.gain_map);
        f(&format!("{prefix}.bias_map"), &mut self.bias_map);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub sln1: SlnParams,
    pub sln2: SlnParams,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub mlp_fc1: Linear,
    pub mlp_fc2: Linear,
}

pub struct BlockVars {
    pub sln1: SlnVars,
    pub sln2: SlnVars,
    pub q_proj: LinearVars,
    pub k_proj: LinearVars,
    pub v_proj: LinearVars,
    pub out_proj: LinearVars,
    pub mlp_fc1: LinearVars,
    pub mlp_fc2: LinearVars,
}

impl BlockParams {
    pub fn init(cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        let m = cfg.mlp_dim();
        BlockParams {
            sln1: SlnParams::zeroed(d),
            sln2: SlnParams::zeroed(d),
            q_proj: Linear::init(d, d, INIT_STD, rng),
            k_proj: Linear::init(d, d, INIT_STD, rng),
            v_proj: Linear::init(d, d, INIT_STD, rng),
            out_proj: Linear::init(d, d, INIT_STD, rng),
            mlp_fc1: Linear::init(d, m, INIT_STD, rng),
            mlp_fc2: Linear::init(m, d, INIT_STD, rng),
        }
    }

    pub fn zeroed(cfg: &TransformerConfig) -> Self {
        let d = cfg.d;
        let m = cfg.mlp_dim();
        BlockParams {
            sln1: SlnParams::zeroed(d),
            sln2: SlnParams::zeroed(d),
            q_proj: Linear::zeros(d, d),
            k_proj: Linear::zeros(d, d),
            v_proj: Linear::zeros(d, d),
            out_proj: Linear::zeros(d, d),
            mlp_fc1: Linear::zeros(d, m),
            mlp_fc2: Linear::zeros(m, d),
        }
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Binder, prefix: &str) -> BlockVars {
        BlockVars {
            sln1: self.sln1.bind(tape, b, &format!("{prefix}.sln1")),
            sln2: self.sln2.bind(tape, b, &format!("{prefix}.sln2")),
            q_proj: self.q_proj.bind(tape, b, &format!("{prefix}.q_proj")),
            k_proj: self.k_proj.bind(tape, b, &format!("{prefix}.k_proj")),
            v_proj: self.v_proj.bind(tape, b, &format!("{prefix}.v_proj")),
            out_proj: self.out_proj.bind(tape, b, &format!("{prefix}.out_proj")),
            mlp_fc1: self.mlp_fc1.bind(tape, b, &format!("{prefix}.mlp_fc1")),
            mlp_fc2: self.mlp_fc2.bind(tape, b, &format!("{prefix}.mlp_fc2")),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.sln1.for_each(&format!("{prefix}.sln1"), f);
        self.sln2.for_each(&format!("{prefix}.sln2"), f);
        self.q_proj.for_each(&format!("{prefix}.q_proj"), f);
        self.k_proj.for_each(&format!("{prefix}.k_proj"), f);
        self.v_proj.for_each(&format!("{prefix}.v_proj"), f);
        self.out_proj.for_each(&format!("{prefix}.out_proj"), f);
        self.mlp_fc1.for_each(&format!("{prefix}.mlp_fc1"), f);
        self.mlp_fc2.for_each(&format!("{prefix}.mlp_fc2"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.sln1.for_each_mut(&format!("{prefix}.sln1"), f);
        self.sln2.for_each_mut(&format!("{prefix}.sln2"), f);
        self.q_proj.for_each_mut(&format!("{prefix}.q_proj"), f);
        self.k_proj.for_each_mut(&format!("{prefix}.k_proj"), f);
        self.v_proj.for_each_mut(&format!("{prefix}.v_proj"), f);
        self.out_proj.for_each_mut(&format!("{prefix}.out_proj"), f);
        self.mlp_fc1.for_each_mut(&format!("{prefix}.mlp_fc1"), f);
        self.mlp_fc2.for_each_mut(&format!("{prefix}.mlp_fc2"), f);
    }
}

/// Scalar parameter count of one block for the given config.
pub fn block_param_count(cfg: &TransformerConfig) -> usize {
    let d = cfg.d;
    let m = cfg.mlp_dim();
    4 * d * d            // two modulation map pairs
        + 4 * (d * d + d) // q/k/v/out projections
        + (d * m + m)     // mlp in
        + (m * d + d) // mlp out
}

/// Optional dropout state threaded through training forwards. `None`
/// (or p == 0) means no masking and no RNG consumption.
pub struct DropoutCtx<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn maybe_dropout(tape: &mut Tape, x: Var, ctx: &mut Option<&mut DropoutCtx>) -> Var {
    let Some(ctx) = ctx.as_deref_mut() else { return x };
    if ctx.p <= 0.0 {
        return x;
    }
    use rand::Rng;
    let keep_scale = 1.0 / (1.0 - ctx.p);
    let shape = tape.value(x).shape().to_vec();
    let numel: usize = shape.iter().product();
    let mask_data: Vec<f64> = (0..numel)
        .map(|_| {
            if ctx.rng.random::<f64>() < ctx.p {
                0.0
            } else {
                keep_scale
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask_data));
    tape.mul(x, mask)
}

/// LayerNorm over each row, then gain/bias computed from the row's
/// embedding: `out = norm(x) * (1 + emb.gain_map) + emb.bias_map`.
pub fn self_modulated_layer_norm_t(
    tape: &mut Tape,
    x: Var,
    emb: Var,
    sln: &SlnVars,
    eps: f64,
) -> Var {
    let normed = tape.row_norm(x, eps);
    let gain_part = tape.matmul(emb, sln.gain_map);
    let gain = tape.add_scalar(gain_part, 1.0);
    let bias = tape.matmul(emb, sln.bias_map);
    let scaled = tape.mul(normed, gain);
    tape.add(scaled, bias)
}

/// Scaled dot-product attention with per-head score normalization and
/// an output projection.
pub fn multi_head_attention_t(tape: &mut Tape, l: Var, blk: &BlockVars, heads: usize) -> Var {
    let q = linear_t(tape, l, &blk.q_proj);
    let k = linear_t(tape, l, &blk.k_proj);
    let v = linear_t(tape, l, &blk.v_proj);
    let attn = tape.attention(q, k, v, heads);
    linear_t(tape, attn, &blk.out_proj)
}

pub fn transformer_block_t(
    tape: &mut Tape,
    input: Var,
    pe: Var,
    blk: &BlockVars,
    cfg: &TransformerConfig,
    mut drop: Option<&mut DropoutCtx>,
) -> Var {
    let normed = self_modulated_layer_norm_t(tape, input, pe, &blk.sln1, cfg.eps);
    let attn_out = multi_head_attention_t(tape, normed, blk, cfg.heads);
    let attn_out = maybe_dropout(tape, attn_out, &mut drop);
    let resid = match cfg.residual_mode {
        ResidualMode::Paper => tape.add(pe, attn_out),
        ResidualMode::Conventional => tape.add(input, attn_out),
    };
    let normed2 = self_modulated_layer_norm_t(tape, resid, pe, &blk.sln2, cfg.eps);
    let hidden_pre = linear_t(tape, normed2, &blk.mlp_fc1);
    let hidden = tape.gelu(hidden_pre);
    let mlp_out = linear_t(tape, hidden, &blk.mlp_fc2);
    let mlp_out = maybe_dropout(tape, mlp_out, &mut drop);
    tape.add(resid, mlp_out)
}

/// Sequential composition of `depth` blocks with independent
/// parameters; the same positional embedding feeds every block.
pub fn transformer_stack_t(
    tape: &mut Tape,
    input: Var,
    pe: Var,
    blocks: &[BlockVars],
    cfg: &TransformerConfig,
    mut drop: Option<&mut DropoutCtx>,
) -> Var {
    let mut x = input;
    for blk in blocks {
        x = transformer_block_t(tape, x, pe, blk, cfg, drop.as_deref_mut());
    }
    x
}

/// Value-level wrappers over a scratch tape.
pub fn self_modulated_layer_norm(x: &Tensor, emb: &Tensor, sln: &SlnParams, eps: f64) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ev = tape.constant(emb.clone());
    let vars = sln.bind(&mut tape, &mut Binder::Frozen, "sln");
    let out = self_modulated_layer_norm_t(&mut tape, xv, ev, &vars, eps);
    tape.value(out).clone()
}

pub fn multi_head_attention(l: &Tensor, blk: &BlockParams, heads: usize) -> Tensor {
    let mut tape = Tape::new();
    let lv = tape.constant(l.clone());
    let vars = blk.bind(&mut tape, &mut Binder::Frozen, "blk");
    let out = multi_head_attention_t(&mut tape, lv, &vars, heads);
    tape.value(out).clone()
}

pub fn transformer_block(input: &Tensor, pe: &Tensor, blk: &BlockParams, cfg: &TransformerConfig) -> Tensor {
    let mut tape = Tape::new();
    let iv = tape.constant(input.clone());
    let pv = tape.constant(pe.clone());
    let vars = blk.bind(&mut tape, &mut Binder::Frozen, "blk");
    let out = transformer_block_t(&mut tape, iv, pv, &vars, cfg, None);
    tape.value(out).clone()
}

pub fn transformer_stack(
    input: &Tensor,
    pe: &Tensor,
    blocks: &[BlockParams],
    cfg: &TransformerConfig,
) -> Tensor {
    let mut tape = Tape::new();
    let iv = tape.constant(input.clone());
    let pv = tape.constant(pe.clone());
    let vars: Vec<_> = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| b.bind(&mut tape, &mut Binder::Frozen, &format!("blk{i}")))
        .collect();
    let out = transformer_stack_t(&mut tape, iv, pv, &vars, cfg, None);
    tape.value(out).clone()
}

/// Per-head attention probability matrices for the normalized input
/// `l`, after the block's query/key projections.
pub fn block_attention_probs(l: &Tensor, blk: &BlockParams, heads: usize) -> Vec<Tensor> {
    let q = linear_value(l, &blk.q_proj);
    let k = linear_value(l, &blk.k_proj);
    attention_probs(&q, &k, heads)
}
