//! Built-in verification suite behind the `selftest` CLI subcommand:
//! compact versions of the gradient checks and invariants, sized to
//! finish in well under a minute. Each check prints one PASS/FAIL line.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};

use crate::autodiff::Tape;
use crate::config::TrainConfig;
use crate::data::CorpusImage;
use crate::discriminator::{concat_condition, discriminator_logit_t, DiscriminatorConfig, DiscriminatorParams};
use crate::generator::{forward_2x_t, upsample2, GeneratorParams};
use crate::gradcheck::check_gradients;
use crate::image::{random_image, ImageTensor};
use crate::losses::{
    generator_adv_loss, reconstruction_loss, total_generator_loss, LossConfig,
};
use crate::metrics::{psnr, ssim};
use crate::optim::PlateauSchedule;
use crate::params::{load_named, manifest, named_tensors, Binder, ParamRegistry};
use crate::patch_ops::{merge_patches, split_into_patches};
use crate::patch_translator::{translate_on_tape, PatchTranslatorParams};
use crate::rng::{rng_from_seed, uniform_tensor};
use crate::tensor::Tensor;
use crate::training::TrainState;
use crate::transformer::{transformer_stack_t, BlockParams, TransformerConfig};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = (&'static str, fn() -> Result<String, String>);

fn tiny_transformer_cfg() -> TransformerConfig {
    TransformerConfig {
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        ..TransformerConfig::with_dims(8)
    }
}

fn tiny_translator_cfg(k: usize) -> TransformerConfig {
    TransformerConfig {
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        ..TransformerConfig::with_dims(k * k * 3)
    }
}

fn weighted_sum(t: &Tensor, w: &Tensor) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn check_patch_roundtrip() -> Result<String, String> {
    let mut rng = rng_from_seed(1001);
    for i in 0..100 {
        let (h, w) = ([8, 16, 32][i % 3], [16, 8, 32][i % 3]);
        let img = random_image(&mut rng, h, w, 3);
        let seq = split_into_patches(&img, 8).map_err(|e| e.to_string())?;
        let back = merge_patches(&seq, h, w).map_err(|e| e.to_string())?;
        if back != img {
            return Err(format!("roundtrip mismatch at image {i} ({h}x{w})"));
        }
    }
    Ok("100 random images, bit-exact".into())
}

fn check_transformer_gradients() -> Result<String, String> {
    let cfg = tiny_transformer_cfg();
    let mut rng = rng_from_seed(1002);
    let blocks: Vec<BlockParams> = (0..cfg.depth).map(|_| BlockParams::init(&cfg, &mut rng)).collect();
    let x = crate::rng::normal_tensor(&mut rng, &[4, cfg.d], 0.5);
    let pe = crate::rng::normal_tensor(&mut rng, &[4, cfg.d], 0.5);
    let w = uniform_tensor(&mut rng, &[4, cfg.d], -1.0, 1.0);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.constant(pe.clone());
    let mut reg = ParamRegistry::new();
    let vars: Vec<_> = {
        let mut b = Binder::Trainable(&mut reg);
        blocks
            .iter()
            .enumerate()
            .map(|(i, blk)| blk.bind(&mut tape, &mut b, &format!("block{i}")))
            .collect()
    };
    let out = transformer_stack_t(&mut tape, xv, pv, &vars, &cfg, None);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv);
    let loss = tape.sum(prod);
    let grads = tape.backward(loss);
    let analytic = reg.named_grads(&tape, &grads);

    struct Probe(Vec<BlockParams>);
    impl crate::params::ParamTensors for Probe {
        fn for_each_tensor(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
            for (i, b) in self.0.iter().enumerate() {
                b.for_each(&format!("{p}block{i}"), f);
            }
        }
        fn for_each_tensor_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            for (i, b) in self.0.iter_mut().enumerate() {
                b.for_each_mut(&format!("{p}block{i}"), f);
            }
        }
    }
    let snapshot = named_tensors(&Probe(blocks.clone()));
    let mut eval = |entries: &[(String, Tensor)]| -> f64 {
        let mut probe = Probe(blocks.clone());
        load_named(&mut probe, entries).unwrap();
        let out = crate::transformer::transformer_stack(&x, &pe, &probe.0, &cfg);
        weighted_sum(&out, &w)
    };
    let rep = check_gradients(&snapshot, &analytic, &mut eval, 1e-4);
    if rep.max_rel_err < 1e-4 {
        Ok(format!("max rel err {:.2e} over {} components", rep.max_rel_err, rep.checked))
    } else {
        Err(format!("rel err {:.2e} at {}", rep.max_rel_err, rep.worst))
    }
}

fn check_translator_input_gradient() -> Result<String, String> {
    let mut rng = rng_from_seed(1003);
    let pt = PatchTranslatorParams::init(8, 8, 2, tiny_translator_cfg(2), 11, &mut rng)
        .map_err(|e| e.to_string())?;
    let img = random_image(&mut rng, 8, 8, 3);
    let w = uniform_tensor(&mut rng, &[8, 8, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.param(img.tensor().clone());
    let vars = pt.bind(&mut tape, &mut Binder::Frozen, "pt");
    let out = translate_on_tape(&mut tape, &vars, x, 8, 8, None);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv);
    let loss = tape.sum(prod);
    let grads = tape.backward(loss);
    let analytic = vec![("input".to_string(), grads.get(x).unwrap().clone())];
    let snapshot = vec![("input".to_string(), img.tensor().clone())];
    let mut eval = |entries: &[(String, Tensor)]| -> f64 {
        let probe = ImageTensor::from_tensor(entries[0].1.clone()).unwrap();
        weighted_sum(pt.translate(&probe).unwrap().tensor(), &w)
    };
    let rep = check_gradients(&snapshot, &analytic, &mut eval, 1e-4);
    if rep.max_rel_err < 1e-4 {
        Ok(format!("max rel err {:.2e}", rep.max_rel_err))
    } else {
        Err(format!("rel err {:.2e} at {}", rep.max_rel_err, rep.worst))
    }
}

fn check_generator_gradients() -> Result<String, String> {
    let gen = GeneratorParams::init(8, 8, 2, tiny_translator_cfg(2), 1004).map_err(|e| e.to_string())?;
    let mut rng = rng_from_seed(1005);
    let img = ImageTensor::from_tensor(uniform_tensor(&mut rng, &[8, 8, 3], 0.3, 0.7)).unwrap();
    let w = uniform_tensor(&mut rng, &[16, 16, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(img.tensor().clone());
    let mut reg = ParamRegistry::new();
    let vars = gen.bind(&mut tape, &mut Binder::Trainable(&mut reg));
    let out = forward_2x_t(&mut tape, &vars, x, 8, 8, None);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv);
    let loss = tape.sum(prod);
    let grads = tape.backward(loss);
    let analytic = reg.named_grads(&tape, &grads);
    let snapshot = named_tensors(&gen);
    let mut eval = |entries: &[(String, Tensor)]| -> f64 {
        let mut probe = gen.clone();
        load_named(&mut probe, entries).unwrap();
        weighted_sum(probe.forward_2x(&img).unwrap().tensor(), &w)
    };
    let rep = check_gradients(&snapshot, &analytic, &mut eval, 1e-4);
    if rep.max_rel_err < 1e-4 {
        Ok(format!("max rel err {:.2e} over {} params", rep.max_rel_err, rep.checked))
    } else {
        Err(format!("rel err {:.2e} at {}", rep.max_rel_err, rep.worst))
    }
}

fn check_discriminator_gradients() -> Result<String, String> {
    let cfg = DiscriminatorConfig { k: 8, d: 16, depth: 2, heads: 2, mlp_ratio: 2.0, ..DiscriminatorConfig::default() };
    let disc = DiscriminatorParams::init(16, 16, cfg, 1006).map_err(|e| e.to_string())?;
    let mut rng = rng_from_seed(1007);
    let a = random_image(&mut rng, 16, 16, 3);
    let b = random_image(&mut rng, 16, 16, 3);
    let x6 = concat_condition(&a, &b).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let x = tape.constant(x6.tensor().clone());
    let mut reg = ParamRegistry::new();
    let vars = disc.bind(&mut tape, &mut Binder::Trainable(&mut reg));
    let logit = discriminator_logit_t(&mut tape, &vars, x);
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
    let rep = check_gradients(&snapshot, &analytic, &mut eval, 1e-4);
    if rep.max_rel_err < 1e-4 {
        Ok(format!("max rel err {:.2e} over {} params", rep.max_rel_err, rep.checked))
    } else {
        Err(format!("rel err {:.2e} at {}", rep.max_rel_err, rep.worst))
    }
}

fn check_loss_identities() -> Result<String, String> {
    let cfg = LossConfig::default();
    let mut rng = rng_from_seed(1008);
    let y_ref = random_image(&mut rng, 8, 8, 3);
    let y_out = random_image(&mut rng, 8, 8, 3);
    let zero = ImageTensor::zeros(8, 8, 3);
    let reference = reconstruction_loss(&y_ref, &y_out, &zero, &cfg).map_err(|e| e.to_string())?;
    for seed in 0..3 {
        let x_up = random_image(&mut rng_from_seed(seed), 8, 8, 3);
        let v = reconstruction_loss(&y_ref, &y_out, &x_up, &cfg).map_err(|e| e.to_string())?;
        if (v - reference).abs() >= 1e-9 {
            return Err(format!("x_up invariance broken: {v} vs {reference}"));
        }
    }
    if reconstruction_loss(&y_ref, &y_ref, &zero, &cfg).map_err(|e| e.to_string())? != 0.0 {
        return Err("self loss not zero".into());
    }
    let half = generator_adv_loss(&[0.5]).map_err(|e| e.to_string())?;
    if (half - std::f64::consts::LN_2).abs() >= 1e-6 {
        return Err(format!("BCE(0.5) = {half}, expected ln 2"));
    }
    if total_generator_loss(1.0, 0.0, &cfg) != 0.4 || total_generator_loss(0.0, 1.0, &cfg) != 0.6 {
        return Err("composite weights not 0.4/0.6".into());
    }
    Ok("x_up cancellation, fixed points, 0.4/0.6 weights".into())
}

fn check_residual_identity() -> Result<String, String> {
    let mut rng = rng_from_seed(1009);
    let mut gen = GeneratorParams::init(8, 8, 2, tiny_translator_cfg(2), 1010).map_err(|e| e.to_string())?;
    gen.zero_all();
    let img = random_image(&mut rng, 8, 8, 3);
    let out = gen.forward_2x(&img).map_err(|e| e.to_string())?;
    let expect = upsample2(&img).map_err(|e| e.to_string())?.clamp01();
    if out != expect {
        return Err("zeroed generator is not the clamped bilinear upscale".into());
    }
    Ok("zeroed stacks reduce to clamped bilinear x2".into())
}

fn check_weight_sharing() -> Result<String, String> {
    let gen = GeneratorParams::init(8, 8, 2, tiny_translator_cfg(2), 1011).map_err(|e| e.to_string())?;
    let before = manifest(&gen);
    let mut rng = rng_from_seed(1012);
    let img = random_image(&mut rng, 8, 8, 3);
    gen.forward_4x(&img).map_err(|e| e.to_string())?;
    if manifest(&gen) != before {
        return Err("4x pass altered the parameter manifest".into());
    }
    Ok(format!("{} tensors, identical for 2x and 4x", before.len()))
}

fn check_schedule() -> Result<String, String> {
    let mut sched = PlateauSchedule::new(2e-4, 0.2, 30, 1e-6);
    sched.set_baseline(1.0);
    let mut triggers = Vec::new();
    for epoch in 1..=60 {
        if sched.observe(1.0) {
            triggers.push(epoch);
        }
    }
    if triggers != vec![30, 60] {
        return Err(format!("triggers at {triggers:?}, expected [30, 60]"));
    }
    if (sched.lr - 8e-6).abs() > 1e-18 {
        return Err(format!("lr after two cuts is {}", sched.lr));
    }
    Ok("2e-4 -> 4e-5 at 30 -> 8e-6 at 60".into())
}

fn check_metric_oracles() -> Result<String, String> {
    let a = ImageTensor::constant(16, 16, 3, 0.5);
    let b = ImageTensor::constant(16, 16, 3, 0.6);
    let p = psnr(&a, &b, 1.0).map_err(|e| e.to_string())?;
    if (p - 20.0).abs() >= 1e-6 {
        return Err(format!("uniform-0.1 PSNR = {p}"));
    }
    let mut rng = rng_from_seed(1013);
    let img = random_image(&mut rng, 16, 16, 3);
    if ssim(&img, &img).map_err(|e| e.to_string())? != 1.0 {
        return Err("SSIM(a, a) != 1".into());
    }
    let c = random_image(&mut rng, 16, 16, 3);
    let lhs = ssim(&img, &c).map_err(|e| e.to_string())?;
    let rhs = ssim(&c, &img).map_err(|e| e.to_string())?;
    if (lhs - rhs).abs() >= 1e-9 {
        return Err("SSIM asymmetric".into());
    }
    Ok("20 dB fixed point, SSIM identity and symmetry".into())
}

fn check_training_determinism() -> Result<String, String> {
    let cfg = TrainConfig {
        scale: 2,
        crop_lr: 8,
        k: 2,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        batch_size: 1,
        disc_dim: 8,
        seed: 1014,
        ..TrainConfig::default()
    };
    let mut rng = rng_from_seed(1015);
    let corpus = vec![CorpusImage {
        id: "a".into(),
        image: random_image(&mut rng, 16, 16, 3),
    }];
    let run = || -> Result<Vec<u8>, String> {
        let mut state = TrainState::new(cfg.clone()).map_err(|e| e.to_string())?;
        for _ in 0..2 {
            let batch = state.sample_batch(&corpus).map_err(|e| e.to_string())?;
            state.train_step(&batch).map_err(|e| e.to_string())?;
        }
        Ok(state.to_checkpoint().to_bytes())
    };
    if run()? != run()? {
        return Err("two identical runs diverged".into());
    }
    Ok("2-step micro-run is bit-identical".into())
}

const CHECKS: &[Check] = &[
    ("patch_roundtrip", check_patch_roundtrip),
    ("transformer_gradients", check_transformer_gradients),
    ("translator_input_gradient", check_translator_input_gradient),
    ("generator_gradients", check_generator_gradients),
    ("discriminator_gradients", check_discriminator_gradients),
    ("loss_identities", check_loss_identities),
    ("residual_identity", check_residual_identity),
    ("weight_sharing", check_weight_sharing),
    ("plateau_schedule", check_schedule),
    ("metric_oracles", check_metric_oracles),
    ("training_determinism", check_training_determinism),
];

/// Run every check, printing one line each; returns the results.
pub fn run_all(out: &mut dyn Write) -> Vec<CheckResult> {
    let mut results = Vec::with_capacity(CHECKS.len());
    for (name, check) in CHECKS {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let _ = writeln!(
            out,
            "{} {} - {}",
            if passed { "PASS" } else { "FAIL" },
            name,
            detail
        );
        results.push(CheckResult { name, passed, detail });
    }
    results
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_suite_passes() {
        let mut sink = Vec::new();
        let results = run_all(&mut sink);
        let report = String::from_utf8_lossy(&sink).to_string();
        assert!(all_passed(&results), "{report}");
        assert_eq!(results.len(), CHECKS.len());
    }
}
