//! The super-resolution generator: four patch translators arranged
//! around bilinear rescaling with skip connections. The network learns
//! a residual on top of the bilinearly upscaled input, so zeroing every
//! translator reduces the forward map to a plain clamped 2x upscale.
//! The 4x path applies the same parameters twice; no second parameter
//! set exists.


use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::{Binder, ParamTensors};
use crate::patch_translator::{translate_on_tape, PatchTranslatorParams, PtVars};
use crate::resample::bilinear_value;
use crate::rng::{rng_from_seed, sub_seed};
use crate::tensor::Tensor;
use crate::transformer::{DropoutCtx, TransformerConfig};

/// Bilinear x2 upscale (align-corners disabled, linear extrapolation at
/// the borders, so affine images resample exactly).
pub fn upsample2(image: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    ImageTensor::from_tensor(bilinear_value(image.tensor(), 2 * h, 2 * w))
}

/// Bilinear x0.5 downscale; each output pixel averages a 2x2 block.
pub fn downsample2(image: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    if h % 2 != 0 {
        return Err(Error::Geometry(format!("cannot halve odd height {}", h)));
    }
    if w % 2 != 0 {
        return Err(Error::Geometry(format!("cannot halve odd width {}", w)));
    }
    ImageTensor::from_tensor(bilinear_value(image.tensor(), h / 2, w / 2))
}

/// Trainable state of the 2x generator. `pt1` and `pt3` run at the
/// input geometry, `pt2` at half, `pt4` at double; all four share the
/// patch size but own independent parameters.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub pt1: PatchTranslatorParams,
    pub pt2: PatchTranslatorParams,
    pub pt3: PatchTranslatorParams,
    pub pt4: PatchTranslatorParams,
    pub base_height: usize,
    pub base_width: usize,
    pub k: usize,
}

pub struct GenVars {
    pub pt1: PtVars,
    pub pt2: PtVars,
    pub pt3: PtVars,
    pub pt4: PtVars,
    pub k: usize,
}

/// Intermediate feature handles of one 2x pass, used for shape tracing
/// and tests.
pub struct GenStages {
    pub feat_full: Var,
    pub feat_half: Var,
    pub feat_fused: Var,
    pub feat_out: Var,
    pub upscaled_input: Var,
    pub output: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub label: String,
    pub height: usize,
    pub width: usize,
}

impl GeneratorParams {
    /// Build at a base geometry; `base_height`/`base_width` must divide
    /// by `2k` so the half-resolution stage still aligns with patches.
    pub fn init(
        base_height: usize,
        base_width: usize,
        k: usize,
        cfg: TransformerConfig,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || !base_height.is_multiple_of(2 * k) || !base_width.is_multiple_of(2 * k) {
            return Err(Error::Geometry(format!(
                "generator base {}x{} must be divisible by 2k = {}",
                base_height,
                base_width,
                2 * k
            )));
        }
        let mut rng = rng_from_seed(sub_seed(seed, "gen.init"));
        let pt1 = PatchTranslatorParams::init(
            base_height,
            base_width,
            k,
            cfg.clone(),
            sub_seed(seed, "gen.pt1.pe"),
            &mut rng,
        )?;
        let pt2 = PatchTranslatorParams::init(
            base_height / 2,
            base_width / 2,
            k,
            cfg.clone(),
            sub_seed(seed, "gen.pt2.pe"),
            &mut rng,
        )?;
        let pt3 = PatchTranslatorParams::init(
            base_height,
            base_width,
            k,
            cfg.clone(),
            sub_seed(seed, "gen.pt3.pe"),
            &mut rng,
        )?;
        let pt4 = PatchTranslatorParams::init(
            2 * base_height,
            2 * base_width,
            k,
            cfg,
            sub_seed(seed, "gen.pt4.pe"),
            &mut rng,
        )?;
        Ok(GeneratorParams {
            pt1,
            pt2,
            pt3,
            pt4,
            base_height,
            base_width,
            k,
        })
    }

    pub fn zero_all(&mut self) {
        self.pt1.zero_all();
        self.pt2.zero_all();
        self.pt3.zero_all();
        self.pt4.zero_all();
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Binder) -> GenVars {
        GenVars {
            pt1: self.pt1.bind(tape, b, "pt1"),
            pt2: self.pt2.bind(tape, b, "pt2"),
            pt3: self.pt3.bind(tape, b, "pt3"),
            pt4: self.pt4.bind(tape, b, "pt4"),
            k: self.k,
        }
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        if image.channels() != 3 {
            return Err(Error::Geometry(format!(
                "generator expects RGB input, got {} channels",
                image.channels()
            )));
        }
        let (h, w) = (image.height(), image.width());
        if !h.is_multiple_of(2 * self.k) || !w.is_multiple_of(2 * self.k) {
            return Err(Error::Geometry(format!(
                "input {}x{} must be divisible by 2k = {}",
                h,
                w,
                2 * self.k
            )));
        }
        if !image.tensor().is_finite() {
            return Err(Error::Numeric("input image has non-finite pixels".into()));
        }
        Ok(())
    }

    /// One 2x pass at the input's geometry.
    pub fn forward_2x(&self, image: &ImageTensor) -> Result<ImageTensor> {
        self.check_input(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.tensor().clone());
        let vars = self.bind(&mut tape, &mut Binder::Frozen);
        let stages = forward_2x_stages_t(
            &mut tape,
            &vars,
            x,
            image.height(),
            image.width(),
            None,
        );
        ImageTensor::from_tensor(tape.value(stages.output).clone())
    }

    /// 2x pass plus the intermediate feature shapes.
    pub fn forward_2x_traced(&self, image: &ImageTensor) -> Result<(ImageTensor, Vec<StageTrace>)> {
        self.check_input(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.tensor().clone());
        let vars = self.bind(&mut tape, &mut Binder::Frozen);
        let stages = forward_2x_stages_t(
            &mut tape,
            &vars,
            x,
            image.height(),
            image.width(),
            None,
        );
        let trace = [
            ("translated_full", stages.feat_full),
            ("translated_half", stages.feat_half),
            ("translated_fused", stages.feat_fused),
            ("translated_out", stages.feat_out),
            ("output", stages.output),
        ]
        .into_iter()
        .map(|(label, var)| {
            let s = tape.value(var).shape();
            StageTrace {
                label: label.to_string(),
                height: s[0],
                width: s[1],
            }
        })
        .collect();
        Ok((ImageTensor::from_tensor(tape.value(stages.output).clone())?, trace))
    }

    /// Two weight-shared 2x passes; the second runs the same parameter
    /// set at doubled geometry (the positional sources regenerate from
    /// their seeds, the trainable manifest is untouched).
    pub fn forward_4x(&self, image: &ImageTensor) -> Result<ImageTensor> {
        self.check_input(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.tensor().clone());
        let vars = self.bind(&mut tape, &mut Binder::Frozen);
        let out = forward_4x_t(
            &mut tape,
            &vars,
            x,
            image.height(),
            image.width(),
            None,
        );
        ImageTensor::from_tensor(tape.value(out).clone())
    }
}

impl ParamTensors for GeneratorParams {
    fn for_each_tensor(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.pt1.for_each_tensor(&format!("{prefix}pt1"), f);
        self.pt2.for_each_tensor(&format!("{prefix}pt2"), f);
        self.pt3.for_each_tensor(&format!("{prefix}pt3"), f);
        self.pt4.for_each_tensor(&format!("{prefix}pt4"), f);
    }

    fn for_each_tensor_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.pt1.for_each_tensor_mut(&format!("{prefix}pt1"), f);
        self.pt2.for_each_tensor_mut(&format!("{prefix}pt2"), f);
        self.pt3.for_each_tensor_mut(&format!("{prefix}pt3"), f);
        self.pt4.for_each_tensor_mut(&format!("{prefix}pt4"), f);
    }
}

/// Differentiable 2x pass returning every stage. `h`, `w` must be
/// divisible by `2k` (checked by the public wrappers).
pub fn forward_2x_stages_t(
    tape: &mut Tape,
    g: &GenVars,
    x: Var,
    h: usize,
    w: usize,
    mut drop: Option<&mut DropoutCtx>,
) -> GenStages {
    let feat_full = translate_on_tape(tape, &g.pt1, x, h, w, drop.as_deref_mut());
    let half = tape.bilinear(feat_full, h / 2, w / 2);
    let feat_half = translate_on_tape(tape, &g.pt2, half, h / 2, w / 2, drop.as_deref_mut());
    let half_up = tape.bilinear(feat_half, h, w);
    let fused = tape.add(half_up, feat_full);
    let feat_fused = translate_on_tape(tape, &g.pt3, fused, h, w, drop.as_deref_mut());
    let fused_up = tape.bilinear(feat_fused, 2 * h, 2 * w);
    let upscaled_input = tape.bilinear(x, 2 * h, 2 * w);
    let skip = tape.add(fused_up, upscaled_input);
    let feat_out = translate_on_tape(tape, &g.pt4, skip, 2 * h, 2 * w, drop);
    let residual_sum = tape.add(feat_out, upscaled_input);
    let output = tape.clamp01(residual_sum);
    GenStages {
        feat_full,
        feat_half,
        feat_fused,
        feat_out,
        upscaled_input,
        output,
    }
}

pub fn forward_2x_t(
    tape: &mut Tape,
    g: &GenVars,
    x: Var,
    h: usize,
    w: usize,
    drop: Option<&mut DropoutCtx>,
) -> Var {
    forward_2x_stages_t(tape, g, x, h, w, drop).output
}

pub fn forward_4x_t(
    tape: &mut Tape,
    g: &GenVars,
    x: Var,
    h: usize,
    w: usize,
    mut drop: Option<&mut DropoutCtx>,
) -> Var {
    let first = forward_2x_t(tape, g, x, h, w, drop.as_deref_mut());
    forward_2x_t(tape, g, first, 2 * h, 2 * w, drop)
}
