//! ViT-style conditional discriminator. Input is the channel
//! concatenation of the bilinearly upsampled low-resolution image and a
//! candidate high-resolution image; output is a real/fake probability
//! (or a raw logit for the numerically fused BCE path used in
//! training). Encoder blocks are standard pre-LayerNorm transformer
//! blocks, not the modulated variant of the generator.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{attention_probs, Tape, Var};
use crate::autodiff::sigmoid_value;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::{linear_t, Binder, Linear, LinearVars, ParamTensors};
use crate::rng::{normal_tensor, rng_from_seed, sub_seed};
use crate::tensor::Tensor;
use crate::transformer::{INIT_STD, LAYERNORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub k: usize,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub eps: f64,
}

impl Default for DiscriminatorConfig {
    /// Mirrors the generator-side defaults: k=8, d=192, depth=5, heads=3.
    fn default() -> Self {
        DiscriminatorConfig {
            k: 8,
            d: 192,
            depth: 5,
            heads: 3,
            mlp_ratio: 4.0,
            eps: LAYERNORM_EPS,
        }
    }
}

impl DiscriminatorConfig {
    pub fn mlp_dim(&self) -> usize {
        (self.d as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.depth == 0 {
            return Err(Error::Config("discriminator k and depth must be >= 1".into()));
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "discriminator dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.mlp_dim() == 0 {
            return Err(Error::Config("discriminator mlp dim collapsed to zero".into()));
        }
        Ok(())
    }
}

/// Pre-LayerNorm encoder block parameters. LayerNorm gain/bias are
/// plain learned `[d]` vectors (gain starts at 1, bias at 0).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_fc1: Linear,
    pub mlp_fc2: Linear,
}

pub struct EncoderBlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub q_proj: LinearVars,
    pub k_proj: LinearVars,
    pub v_proj: LinearVars,
    pub out_proj: LinearVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_fc1: LinearVars,
    pub mlp_fc2: LinearVars,
}

impl EncoderBlockParams {
    fn init(cfg: &DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        let m = cfg.mlp_dim();
        EncoderBlockParams {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            q_proj: Linear::init(d, d, INIT_STD, rng),
            k_proj: Linear::init(d, d, INIT_STD, rng),
            v_proj: Linear::init(d, d, INIT_STD, rng),
            out_proj: Linear::init(d, d, INIT_STD, rng),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            mlp_fc1: Linear::init(d, m, INIT_STD, rng),
            mlp_fc2: Linear::init(m, d, INIT_STD, rng),
        }
    }

    fn bind(&self, tape: &mut Tape, b: &mut Binder, prefix: &str) -> EncoderBlockVars {
        EncoderBlockVars {
            ln1_gain: b.bind(tape, format!("{prefix}.ln1.gain"), &self.ln1_gain),
            ln1_bias: b.bind(tape, format!("{prefix}.ln1.bias"), &self.ln1_bias),
            q_proj: self.q_proj.bind(tape, b, &format!("{prefix}.q_proj")),
            k_proj: self.k_proj.bind(tape, b, &format!("{prefix}.k_proj")),
            v_proj: self.v_proj.bind(tape, b, &format!("{prefix}.v_proj")),
            out_proj: self.out_proj.bind(tape, b, &format!("{prefix}.out_proj")),
            ln2_gain: b.bind(tape, format!("{prefix}.ln2.gain"), &self.ln2_gain),
            ln2_bias: b.bind(tape, format!("{prefix}.ln2.bias"), &self.ln2_bias),
            mlp_fc1: self.mlp_fc1.bind(tape, b, &format!("{prefix}.mlp_fc1")),
            mlp_fc2: self.mlp_fc2.bind(tape, b, &format!("{prefix}.mlp_fc2")),
        }
    }

    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.ln1.gain"), &self.ln1_gain);
        f(&format!("{prefix}.ln1.bias"), &self.ln1_bias);
        self.q_proj.for_each(&format!("{prefix}.q_proj"), f);
        self.k_proj.for_each(&format!("{prefix}.k_proj"), f);
        self.v_proj.for_each(&format!("{prefix}.v_proj"), f);
        self.out_proj.for_each(&format!("{prefix}.out_proj"), f);
        f(&format!("{prefix}.ln2.gain"), &self.ln2_gain);
        f(&format!("{prefix}.ln2.bias"), &self.ln2_bias);
        self.mlp_fc1.for_each(&format!("{prefix}.mlp_fc1"), f);
        self.mlp_fc2.for_each(&format!("{prefix}.mlp_fc2"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.ln1.gain"), &mut self.ln1_gain);
        f(&format!("{prefix}.ln1.bias"), &mut self.ln1_bias);
        self.q_proj.for_each_mut(&format!("{prefix}.q_proj"), f);
        self.k_proj.for_each_mut(&format!("{prefix}.k_proj"), f);
        self.v_proj.for_each_mut(&format!("{prefix}.v_proj"), f);
        self.out_proj.for_each_mut(&format!("{prefix}.out_proj"), f);
        f(&format!("{prefix}.ln2.gain"), &mut self.ln2_gain);
        f(&format!("{prefix}.ln2.bias"), &mut self.ln2_bias);
        self.mlp_fc1.for_each_mut(&format!("{prefix}.mlp_fc1"), f);
        self.mlp_fc2.for_each_mut(&format!("{prefix}.mlp_fc2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorParams {
    pub cfg: DiscriminatorConfig,
    pub patch_embed: Linear,
    pub class_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<EncoderBlockParams>,
    pub head: Linear,
    pub height: usize,
    pub width: usize,
}

pub struct DiscVars {
    pub cfg: DiscriminatorConfig,
    pub patch_embed: LinearVars,
    pub class_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<EncoderBlockVars>,
    pub head: LinearVars,
}

impl DiscriminatorParams {
    /// Build for a fixed `height x width` input geometry. The head is
    /// zero-initialized so an untrained discriminator outputs exactly
    /// 0.5.
    pub fn init(height: usize, width: usize, cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !height.is_multiple_of(cfg.k) || !width.is_multiple_of(cfg.k) {
            return Err(Error::Geometry(format!(
                "discriminator geometry {}x{} not divisible by patch size {}",
                height, width, cfg.k
            )));
        }
        let n = (height / cfg.k) * (width / cfg.k);
        let mut rng = rng_from_seed(sub_seed(seed, "disc.init"));
        let patch_dim = cfg.k * cfg.k * 6;
        let patch_embed = Linear::init(patch_dim, cfg.d, INIT_STD, &mut rng);
        let class_token = normal_tensor(&mut rng, &[1, cfg.d], INIT_STD);
        let pos_embed = normal_tensor(&mut rng, &[n + 1, cfg.d], INIT_STD);
        let blocks = (0..cfg.depth)
            .map(|_| EncoderBlockParams::init(&cfg, &mut rng))
            .collect();
        let head = Linear::zeros(cfg.d, 1);
        Ok(DiscriminatorParams {
            cfg,
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            head,
            height,
            width,
        })
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Binder) -> DiscVars {
        DiscVars {
            cfg: self.cfg.clone(),
            patch_embed: self.patch_embed.bind(tape, b, "patch_embed"),
            class_token: b.bind(tape, "class_token".to_string(), &self.class_token),
            pos_embed: b.bind(tape, "pos_embed".to_string(), &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(tape, b, &format!("block{i}")))
                .collect(),
            head: self.head.bind(tape, b, "head"),
        }
    }

    fn check_input(&self, x6: &ImageTensor) -> Result<()> {
        if x6.channels() != 6 {
            return Err(Error::Geometry(format!(
                "discriminator expects a 6-channel conditioned input, got {} channels",
                x6.channels()
            )));
        }
        if x6.height() != self.height || x6.width() != self.width {
            return Err(Error::Geometry(format!(
                "discriminator built for {}x{}, got {}x{}",
                self.height,
                self.width,
                x6.height(),
                x6.width()
            )));
        }
        Ok(())
    }

    /// Raw logit for one conditioned input.
    pub fn discriminate_logit(&self, x6: &ImageTensor) -> Result<f64> {
        self.check_input(x6)?;
        let mut tape = Tape::new();
        let x = tape.constant(x6.tensor().clone());
        let vars = self.bind(&mut tape, &mut Binder::Frozen);
        let logit = discriminator_logit_t(&mut tape, &vars, x);
        Ok(tape.scalar(logit))
    }

    /// Real/fake probability in (0, 1).
    pub fn discriminate(&self, x6: &ImageTensor) -> Result<f64> {
        Ok(sigmoid_value(self.discriminate_logit(x6)?))
    }

    /// Attention probability matrices (per block, per head) for one
    /// input; inspection/testing hook.
    pub fn attention_probs_all_blocks(&self, x6: &ImageTensor) -> Result<Vec<Vec<Tensor>>> {
        self.check_input(x6)?;
        let mut tape = Tape::new();
        let x = tape.constant(x6.tensor().clone());
        let vars = self.bind(&mut tape, &mut Binder::Frozen);
        let mut seq = embed_tokens_t(&mut tape, &vars, x);
        let mut all = Vec::new();
        for blk in &vars.blocks {
            let normed = layer_norm_t(&mut tape, seq, blk.ln1_gain, blk.ln1_bias, vars.cfg.eps);
            let q = linear_t(&mut tape, normed, &blk.q_proj);
            let k = linear_t(&mut tape, normed, &blk.k_proj);
            all.push(attention_probs(tape.value(q), tape.value(k), vars.cfg.heads));
            seq = encoder_block_t(&mut tape, seq, blk, &vars.cfg);
        }
        Ok(all)
    }
}

impl ParamTensors for DiscriminatorParams {
    fn for_each_tensor(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.patch_embed.for_each(&format!("{prefix}patch_embed"), f);
        f(&format!("{prefix}class_token"), &self.class_token);
        f(&format!("{prefix}pos_embed"), &self.pos_embed);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.for_each(&format!("{prefix}block{i}"), f);
        }
        self.head.for_each(&format!("{prefix}head"), f);
    }

    fn for_each_tensor_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_embed.for_each_mut(&format!("{prefix}patch_embed"), f);
        f(&format!("{prefix}class_token"), &mut self.class_token);
        f(&format!("{prefix}pos_embed"), &mut self.pos_embed);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.for_each_mut(&format!("{prefix}block{i}"), f);
        }
        self.head.for_each_mut(&format!("{prefix}head"), f);
    }
}

/// Channel-wise concatenation `[x_up | y]`, in that fixed order.
pub fn concat_condition(x_up: &ImageTensor, y: &ImageTensor) -> Result<ImageTensor> {
    if x_up.height() != y.height() || x_up.width() != y.width() {
        return Err(Error::Geometry(format!(
            "conditioning shapes differ: {}x{} vs {}x{}",
            x_up.height(),
            x_up.width(),
            y.height(),
            y.width()
        )));
    }
    if x_up.channels() != 3 || y.channels() != 3 {
        return Err(Error::Geometry(format!(
            "conditioning expects two RGB images (got {} and {} channels)",
            x_up.channels(),
            y.channels()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(x_up.tensor().clone());
    let b = tape.constant(y.tensor().clone());
    let cat = tape.concat_channels(a, b);
    ImageTensor::from_tensor(tape.value(cat).clone())
}

fn layer_norm_t(tape: &mut Tape, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
    let normed = tape.row_norm(x, eps);
    let scaled = tape.mul_row(normed, gain);
    tape.add_row(scaled, bias)
}

fn encoder_block_t(tape: &mut Tape, x: Var, blk: &EncoderBlockVars, cfg: &DiscriminatorConfig) -> Var {
    let normed = layer_norm_t(tape, x, blk.ln1_gain, blk.ln1_bias, cfg.eps);
    let q = linear_t(tape, normed, &blk.q_proj);
    let k = linear_t(tape, normed, &blk.k_proj);
    let v = linear_t(tape, normed, &blk.v_proj);
    let attn = tape.attention(q, k, v, cfg.heads);
    let attn_out = linear_t(tape, attn, &blk.out_proj);
    let x = tape.add(x, attn_out);
    let normed2 = layer_norm_t(tape, x, blk.ln2_gain, blk.ln2_bias, cfg.eps);
    let hidden_pre = linear_t(tape, normed2, &blk.mlp_fc1);
    let hidden = tape.gelu(hidden_pre);
    let mlp_out = linear_t(tape, hidden, &blk.mlp_fc2);
    tape.add(x, mlp_out)
}

fn embed_tokens_t(tape: &mut Tape, disc: &DiscVars, x6: Var) -> Var {
    let patches = tape.image_to_patches(x6, disc.cfg.k);
    let tokens = linear_t(tape, patches, &disc.patch_embed);
    let seq = tape.concat_rows(&[disc.class_token, tokens]);
    tape.add(seq, disc.pos_embed)
}

/// Differentiable logit of one conditioned `[h, w, 6]` input.
pub fn discriminator_logit_t(tape: &mut Tape, disc: &DiscVars, x6: Var) -> Var {
    let mut seq = embed_tokens_t(tape, disc, x6);
    for blk in &disc.blocks {
        seq = encoder_block_t(tape, seq, blk, &disc.cfg);
    }
    let cls = tape.slice_rows(seq, 0, 1);
    let logit_row = linear_t(tape, cls, &disc.head);
    tape.sum(logit_row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::image::random_image;
    use crate::params::{load_named, named_tensors, ParamRegistry};
    use crate::rng::rng_from_seed;

    fn tiny_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            k: 8,
            d: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            eps: LAYERNORM_EPS,
        }
    }

    fn conditioned_input(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = rng_from_seed(seed);
        let a = random_image(&mut rng, h, w, 3);
        let b = random_image(&mut rng, h, w, 3);
        concat_condition(&a, &b).unwrap()
    }

    #[test]
    fn concat_keeps_order_and_shapes() {
        let mut rng = rng_from_seed(80);
        let a = random_image(&mut rng, 4, 6, 3);
        let b = random_image(&mut rng, 4, 6, 3);
        let ab = concat_condition(&a, &b).unwrap();
        assert_eq!((ab.height(), ab.width(), ab.channels()), (4, 6, 6));
        for y in 0..4 {
            for x in 0..6 {
                for c in 0..3 {
                    assert_eq!(ab.pixel(y, x, c), a.pixel(y, x, c));
                    assert_eq!(ab.pixel(y, x, c + 3), b.pixel(y, x, c));
                }
            }
        }
        let ba = concat_condition(&b, &a).unwrap();
        assert_ne!(ab, ba);
    }

    #[test]
    fn concat_rejects_shape_mismatch() {
        let a = ImageTensor::constant(4, 4, 3, 0.1);
        let b = ImageTensor::constant(4, 6, 3, 0.1);
        assert!(concat_condition(&a, &b).is_err());
    }

    #[test]
    fn probability_strictly_inside_unit_interval() {
        let disc = DiscriminatorParams::init(16, 16, tiny_cfg(), 81).unwrap();
        for seed in 0..5 {
            let x6 = conditioned_input(seed, 16, 16);
            let p = disc.discriminate(&x6).unwrap();
            assert!(p > 0.0 && p < 1.0, "p = {p}");
        }
    }

    #[test]
    fn zero_head_outputs_exactly_half() {
        let disc = DiscriminatorParams::init(16, 16, tiny_cfg(), 82).unwrap();
        let x6 = conditioned_input(7, 16, 16);
        assert_eq!(disc.discriminate_logit(&x6).unwrap(), 0.0);
        assert_eq!(disc.discriminate(&x6).unwrap(), 0.5);
    }

    #[test]
    fn encoder_attention_rows_sum_to_one() {
        let disc = DiscriminatorParams::init(16, 16, tiny_cfg(), 83).unwrap();
        let x6 = conditioned_input(9, 16, 16);
        let all = disc.attention_probs_all_blocks(&x6).unwrap();
        assert_eq!(all.len(), 2);
        for per_block in &all {
            assert_eq!(per_block.len(), 2);
            for probs in per_block {
                let n = probs.rows();
                assert_eq!(n, 5); // 4 patches + class token
                for i in 0..n {
                    let sum: f64 = probs.data()[i * n..(i + 1) * n].iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn prediction_depends_on_class_token() {
        let mut disc = DiscriminatorParams::init(16, 16, tiny_cfg(), 84).unwrap();
        // Give the zero head weights so the class pathway matters.
        let mut rng = rng_from_seed(85);
        disc.head = Linear::init(disc.cfg.d, 1, 0.5, &mut rng);
        let x6 = conditioned_input(11, 16, 16);
        let before = disc.discriminate(&x6).unwrap();
        disc.class_token = disc.class_token.map(|v| v + 0.5);
        let after = disc.discriminate(&x6).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn rejects_wrong_geometry_and_channels() {
        let disc = DiscriminatorParams::init(16, 16, tiny_cfg(), 86).unwrap();
        let wrong_size = conditioned_input(1, 24, 16);
        let err = disc.discriminate(&wrong_size).unwrap_err().to_string();
        assert!(err.contains("16x16") && err.contains("24x16"), "{err}");
        let rgb = ImageTensor::constant(16, 16, 3, 0.2);
        assert!(disc.discriminate(&rgb).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Contracted tiny config: 16x16 inputs, d=16, depth=2.
        let disc = DiscriminatorParams::init(16, 16, tiny_cfg(), 87).unwrap();
        let x6 = conditioned_input(13, 16, 16);

        let mut tape = Tape::new();
        let x = tape.constant(x6.tensor().clone());
        let mut reg = ParamRegistry::new();
        let vars = disc.bind(&mut tape, &mut Binder::Trainable(&mut reg));
        let logit = discriminator_logit_t(&mut tape, &vars, x);
        // Check through the fused stable BCE so the loss path is the
        // one training uses: softplus(logit) = BCE against target 0.
        let loss = tape.softplus(logit);
        let grads = tape.backward(loss);
        let analytic = reg.named_grads(&tape, &grads);

        let snapshot = named_tensors(&disc);
        let mut eval = |entries: &[(String, Tensor)]| -> f64 {
            let mut probe = disc.clone();
            load_named(&mut probe, entries).unwrap();
            let z = probe.discriminate_logit(&x6).unwrap();
            z.max(0.0) + (-z.abs()).exp().ln_1p()
        };
        check_gradients(&snapshot, &analytic, &mut eval, 1e-4).assert_below(1e-4);
    }

    #[test]
    fn bind_order_matches_traversal() {
        let disc = DiscriminatorParams::init(16, 16, tiny_cfg(), 88).unwrap();
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        disc.bind(&mut tape, &mut Binder::Trainable(&mut reg));
        let names: Vec<String> = named_tensors(&disc).into_iter().map(|(n, _)| n).collect();
        assert_eq!(reg.names(), names);
    }
}
