//! The reusable image-to-image block: split into patches, embed
//! positions, run the transformer stack, merge back. Spatial dimensions
//! are preserved; the output is not range-clamped here (the generator
//! clamps once at its output).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::Binder;
use crate::patch_ops::PositionalEmbedding;
use crate::rng::{normal_tensor, rng_from_seed};
use crate::tensor::Tensor;
use crate::transformer::{transformer_stack_t, BlockParams, BlockVars, DropoutCtx, TransformerConfig};

/// Regenerate the fixed random embedding source for an arbitrary patch
/// count. Rows are drawn from the seeded stream in order, so the same
/// seed always yields the same matrix.
pub fn embedding_source(seed: u64, n: usize, d: usize) -> Tensor {
    normal_tensor(&mut rng_from_seed(seed), &[n, d], 1.0)
}

/// One translator instance: a positional embedding sized for its build
/// geometry plus `depth` transformer blocks. The trainable tensors
/// (`w_pe` and the block parameters) are geometry-independent; only the
/// fixed random source depends on the patch count and is regenerated
/// from its seed when the translator runs at another geometry.
#[derive(Clone, Debug)]
pub struct PatchTranslatorParams {
    pub pe: PositionalEmbedding,
    pub blocks: Vec<BlockParams>,
    pub cfg: TransformerConfig,
    pub k: usize,
    pub height: usize,
    pub width: usize,
}

pub struct PtVars {
    pub w_pe: Var,
    pub blocks: Vec<BlockVars>,
    pub cfg: TransformerConfig,
    pub k: usize,
    pub pe_seed: u64,
}

impl PatchTranslatorParams {
    pub fn init(
        height: usize,
        width: usize,
        k: usize,
        cfg: TransformerConfig,
        pe_seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if k == 0 || !height.is_multiple_of(k) || !width.is_multiple_of(k) {
            return Err(Error::Geometry(format!(
                "translator geometry {}x{} not divisible by patch size {}",
                height, width, k
            )));
        }
        if cfg.d != k * k * 3 {
            return Err(Error::Config(format!(
                "embedding dim {} must equal k*k*3 = {} for {}px patches",
                cfg.d,
                k * k * 3,
                k
            )));
        }
        let n = (height / k) * (width / k);
        let pe = PositionalEmbedding::new(n, cfg.d, pe_seed)?;
        let blocks = (0..cfg.depth).map(|_| BlockParams::init(&cfg, rng)).collect();
        Ok(PatchTranslatorParams { pe, blocks, cfg, k, height, width })
    }

    /// Zero every trainable tensor (tests and the residual-identity
    /// checks rely on this producing the all-zero image function).
    pub fn zero_all(&mut self) {
        use crate::params::ParamTensors;
        self.for_each_tensor_mut("", &mut |_, t| *t = Tensor::zeros(t.shape()));
    }

    pub fn patch_count(&self) -> usize {
        (self.height / self.k) * (self.width / self.k)
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Binder, prefix: &str) -> PtVars {
        let w_pe = b.bind(tape, format!("{prefix}.pe.w_pe"), &self.pe.w_pe);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, blk)| blk.bind(tape, b, &format!("{prefix}.block{i}")))
            .collect();
        PtVars {
            w_pe,
            blocks,
            cfg: self.cfg.clone(),
            k: self.k,
            pe_seed: self.pe.seed(),
        }
    }

    /// Image -> image at the geometry this instance was built for.
    pub fn translate(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let (h, w) = (image.height(), image.width());
        if h != self.height || w != self.width {
            let actual_n = if h % self.k == 0 && w % self.k == 0 {
                ((h / self.k) * (w / self.k)).to_string()
            } else {
                format!("not a multiple of k={}", self.k)
            };
            return Err(Error::Geometry(format!(
                "translator built for {}x{} (n={}) got {}x{} (n={})",
                self.height,
                self.width,
                self.patch_count(),
                h,
                w,
                actual_n
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(image.tensor().clone());
        let vars = self.bind(&mut tape, &mut Binder::Frozen, "pt");
        let out = translate_on_tape(&mut tape, &vars, x, h, w, None);
        ImageTensor::from_tensor(tape.value(out).clone())
    }
}

impl crate::params::ParamTensors for PatchTranslatorParams {
    fn for_each_tensor(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.pe.w_pe"), &self.pe.w_pe);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.for_each(&format!("{prefix}.block{i}"), f);
        }
    }

    fn for_each_tensor_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.pe.w_pe"), &mut self.pe.w_pe);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.for_each_mut(&format!("{prefix}.block{i}"), f);
        }
    }
}

/// Differentiable translator application at the geometry of `x`
/// (`[h, w, 3]`, both divisible by `k`). The fixed random source for
/// the positional embedding is regenerated per geometry as a constant.
pub fn translate_on_tape(
    tape: &mut Tape,
    pt: &PtVars,
    x: Var,
    h: usize,
    w: usize,
    drop: Option<&mut DropoutCtx>,
) -> Var {
    let n = (h / pt.k) * (w / pt.k);
    let rv = tape.constant(embedding_source(pt.pe_seed, n, pt.cfg.d));
    let pe_table = tape.matmul(rv, pt.w_pe);
    let patches = tape.image_to_patches(x, pt.k);
    let translated = transformer_stack_t(tape, patches, pe_table, &pt.blocks, &pt.cfg, drop);
    tape.patches_to_image(translated, h, w, pt.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::image::random_image;
    use crate::params::{named_tensors, ParamRegistry};
    use crate::patch_ops::{merge_patches, split_into_patches, PatchSequence};
    use crate::rng::uniform_tensor;
    use crate::transformer::transformer_stack;

    fn small_cfg(k: usize, depth: usize) -> TransformerConfig {
        let d = k * k * 3;
        TransformerConfig {
            depth,
            heads: 3,
            mlp_ratio: 2.0,
            ..TransformerConfig::with_dims(d)
        }
    }

    #[test]
    fn preserves_spatial_shape() {
        let mut rng = rng_from_seed(50);
        let pt = PatchTranslatorParams::init(64, 64, 8, small_cfg(8, 1), 7, &mut rng).unwrap();
        let img = random_image(&mut rng, 64, 64, 3);
        let out = pt.translate(&img).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (64, 64, 3));
    }

    #[test]
    fn zeroed_translator_outputs_zero_image() {
        let mut rng = rng_from_seed(51);
        let mut pt = PatchTranslatorParams::init(16, 16, 4, small_cfg(4, 2), 8, &mut rng).unwrap();
        pt.zero_all();
        let img = random_image(&mut rng, 16, 16, 3);
        let out = pt.translate(&img).unwrap();
        assert_eq!(out, ImageTensor::zeros(16, 16, 3));
    }

    #[test]
    fn equals_manual_split_stack_merge_composition() {
        let mut rng = rng_from_seed(52);
        let pt = PatchTranslatorParams::init(16, 16, 8, small_cfg(8, 2), 9, &mut rng).unwrap();
        let img = random_image(&mut rng, 16, 16, 3);
        let out = pt.translate(&img).unwrap();

        let seq = split_into_patches(&img, 8).unwrap();
        let stacked = transformer_stack(&seq.vectors, &pt.pe.table(), &pt.blocks, &pt.cfg);
        let manual = merge_patches(
            &PatchSequence { vectors: stacked, ..seq },
            16,
            16,
        )
        .unwrap();
        assert_eq!(out, manual);
    }

    #[test]
    fn rejects_geometry_mismatch_naming_patch_counts() {
        let mut rng = rng_from_seed(53);
        let pt = PatchTranslatorParams::init(16, 16, 4, small_cfg(4, 1), 10, &mut rng).unwrap();
        let img = random_image(&mut rng, 24, 16, 3);
        let err = pt.translate(&img).unwrap_err().to_string();
        assert!(err.contains("n=16"), "{err}");
        assert!(err.contains("n=24"), "{err}");
    }

    #[test]
    fn rejects_mismatched_embedding_dim() {
        let mut rng = rng_from_seed(54);
        let mut cfg = small_cfg(4, 1);
        cfg.d = 24;
        assert!(PatchTranslatorParams::init(16, 16, 4, cfg, 11, &mut rng).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        // 16x16 input, rel err < 1e-4, h = 1e-4, double precision.
        let mut rng = rng_from_seed(55);
        let pt = PatchTranslatorParams::init(16, 16, 4, small_cfg(4, 2), 12, &mut rng).unwrap();
        let img = random_image(&mut rng, 16, 16, 3);
        let weights = uniform_tensor(&mut rng, &[16, 16, 3], -1.0, 1.0);

        let mut tape = Tape::new();
        let x = tape.param(img.tensor().clone());
        let vars = pt.bind(&mut tape, &mut Binder::Frozen, "pt");
        let out = translate_on_tape(&mut tape, &vars, x, 16, 16, None);
        let wv = tape.constant(weights.clone());
        let weighted = tape.mul(out, wv);
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss);
        let analytic = vec![("input".to_string(), grads.get(x).unwrap().clone())];

        let snapshot = vec![("input".to_string(), img.tensor().clone())];
        let mut eval = |entries: &[(String, Tensor)]| -> f64 {
            let probe = ImageTensor::from_tensor(entries[0].1.clone()).unwrap();
            let out = pt.translate(&probe).unwrap();
            out.tensor()
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        check_gradients(&snapshot, &analytic, &mut eval, 1e-4).assert_below(1e-4);
    }

    #[test]
    fn every_output_patch_reacts_to_any_input_patch() {
        // Attention mixes all patches, so a single-patch perturbation
        // must reach every output patch for a generic translator. The
        // probe moves one pixel of the patch; a uniform shift of the
        // whole patch would be erased by the row normalization.
        let mut rng = rng_from_seed(56);
        let k = 4;
        let pt = PatchTranslatorParams::init(16, 16, k, small_cfg(k, 2), 13, &mut rng).unwrap();
        let img = random_image(&mut rng, 16, 16, 3);
        let base = pt.translate(&img).unwrap();

        let grid = 16 / k;
        for target in 0..grid * grid {
            let (py, px) = (target / grid, target % grid);
            let perturbed = ImageTensor::from_fn(16, 16, 3, |y, x, c| {
                let probe_pixel = y == py * k && x == px * k && c == 0;
                img.pixel(y, x, c) + if probe_pixel { 0.5 } else { 0.0 }
            });
            let out = pt.translate(&perturbed).unwrap();
            for opy in 0..grid {
                for opx in 0..grid {
                    let mut max_change: f64 = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            for c in 0..3 {
                                let (y, x) = (opy * k + dy, opx * k + dx);
                                max_change = max_change
                                    .max((out.pixel(y, x, c) - base.pixel(y, x, c)).abs());
                            }
                        }
                    }
                    assert!(
                        max_change > 0.0,
                        "perturbing patch ({py},{px}) left output patch ({opy},{opx}) unchanged"
                    );
                }
            }
        }
    }

    #[test]
    fn bind_order_matches_traversal() {
        let mut rng = rng_from_seed(57);
        let pt = PatchTranslatorParams::init(16, 16, 4, small_cfg(4, 2), 14, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        pt.bind(&mut tape, &mut Binder::Trainable(&mut reg), "pt");
        let names: Vec<String> = named_tensors(&pt)
            .into_iter()
            .map(|(n, _)| format!("pt{n}"))
            .collect();
        assert_eq!(reg.names(), names);
    }
}
