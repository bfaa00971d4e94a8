//! Acceptance suite: every release criterion as one test, each printing
//! a PASS line with its measured numbers (visible with --nocapture).
//! Criteria with wall-clock budgets serialize on a shared lock so
//! parallel test scheduling cannot distort their timing.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use patchsr::autodiff::Tape;
use patchsr::config::TrainConfig;
use patchsr::data::{synthesize_lr, CorpusImage};
use patchsr::discriminator::{concat_condition, discriminator_logit_t, DiscriminatorConfig, DiscriminatorParams};
use patchsr::generator::{forward_2x_t, upsample2, GeneratorParams};
use patchsr::gradcheck::check_gradients;
use patchsr::image::{random_image, ImageTensor};
use patchsr::losses::{
    bce_logits_t, generator_adv_loss, reconstruction_loss, reconstruction_loss_t,
    total_generator_loss, total_generator_loss_t, LossConfig,
};
use patchsr::metrics::{psnr, psnr_capped, ssim};
use patchsr::optim::PlateauSchedule;
use patchsr::params::{load_named, named_tensors, Binder, ParamRegistry, ParamTensors};
use patchsr::patch_ops::{merge_patches, split_into_patches};
use patchsr::patch_translator::{translate_on_tape, PatchTranslatorParams};
use patchsr::resample::bicubic_resize;
use patchsr::rng::{normal_tensor, rng_from_seed, uniform_tensor};
use patchsr::tensor::Tensor;
use patchsr::training::TrainState;
use patchsr::transformer::{transformer_stack, transformer_stack_t, BlockParams, TransformerConfig};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|e| e.into_inner())
}

fn weighted_sum(t: &Tensor, w: &Tensor) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn criterion_01_patch_roundtrip_thousand_images() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = rng_from_seed(101);
    let sizes = [8usize, 16, 64, 256];
    for i in 0..1000 {
        let side = sizes[i % sizes.len()];
        let img = random_image(&mut rng, side, side, 3);
        let seq = split_into_patches(&img, 8).unwrap();
        assert_eq!(seq.n() * seq.d(), side * side * 3);
        let back = merge_patches(&seq, side, side).unwrap();
        assert_eq!(back, img, "roundtrip failed at image {i} ({side}px)");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}, budget 10 s");
    println!(
        "criterion 1 PASS - merge(split(.)) exact on 1000 images across {{8,16,64,256}} in {:.2?}",
        elapsed
    );
}

struct BlockStack(Vec<BlockParams>);

impl ParamTensors for BlockStack {
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

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;

    // Transformer stack at the contracted tiny config.
    {
        let cfg = TransformerConfig {
            depth: 2,
            heads: 2,
            mlp_ratio: 4.0,
            ..TransformerConfig::with_dims(8)
        };
        let mut rng = rng_from_seed(201);
        let stack =
            BlockStack((0..cfg.depth).map(|_| BlockParams::init(&cfg, &mut rng)).collect());
        let x = normal_tensor(&mut rng, &[4, cfg.d], 0.5);
        let pe = normal_tensor(&mut rng, &[4, cfg.d], 0.5);
        let w = uniform_tensor(&mut rng, &[4, cfg.d], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = tape.constant(pe.clone());
        let mut reg = ParamRegistry::new();
        let vars: Vec<_> = {
            let mut b = Binder::Trainable(&mut reg);
            stack.0.iter().enumerate().map(|(i, blk)| blk.bind(&mut tape, &mut b, &format!("block{i}"))).collect()
        };
        let out = transformer_stack_t(&mut tape, xv, pv, &vars, &cfg, None);
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);
        let analytic = reg.named_grads(&tape, &grads);
        let snapshot = named_tensors(&stack);
        let mut eval = |entries: &[(String, Tensor)]| -> f64 {
            let mut probe =
                BlockStack((0..cfg.depth).map(|_| BlockParams::zeroed(&cfg)).collect());
            load_named(&mut probe, entries).unwrap();
            weighted_sum(&transformer_stack(&x, &pe, &probe.0, &cfg), &w)
        };
        let rep = check_gradients(&snapshot, &analytic, &mut eval, 1e-4);
        rep.assert_below(1e-4);
        worst = worst.max(rep.max_rel_err);
    }

    // Patch translator: gradient w.r.t. the input image at 16x16.
    {
        let cfg = TransformerConfig {
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            ..TransformerConfig::with_dims(4 * 4 * 3)
        };
        let mut rng = rng_from_seed(202);
        let pt = PatchTranslatorParams::init(16, 16, 4, cfg, 19, &mut rng).unwrap();
        let img = random_image(&mut rng, 16, 16, 3);
        let w = uniform_tensor(&mut rng, &[16, 16, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.param(img.tensor().clone());
        let vars = pt.bind(&mut tape, &mut Binder::Frozen, "pt");
        let out = translate_on_tape(&mut tape, &vars, x, 16, 16, None);
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
        rep.assert_below(1e-4);
        worst = worst.max(rep.max_rel_err);
    }

    // Full generator, every parameter.
    {
        let cfg = TransformerConfig {
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            ..TransformerConfig::with_dims(2 * 2 * 3)
        };
        let gen = GeneratorParams::init(8, 8, 2, cfg, 203).unwrap();
        let mut rng = rng_from_seed(204);
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
        rep.assert_below(1e-4);
        worst = worst.max(rep.max_rel_err);
    }

    // Discriminator at the contracted tiny config, through the fused BCE.
    {
        let cfg = DiscriminatorConfig {
            k: 8,
            d: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            ..DiscriminatorConfig::default()
        };
        let disc = DiscriminatorParams::init(16, 16, cfg, 205).unwrap();
        let mut rng = rng_from_seed(206);
        let a = random_image(&mut rng, 16, 16, 3);
        let b = random_image(&mut rng, 16, 16, 3);
        let x6 = concat_condition(&a, &b).unwrap();
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
        rep.assert_below(1e-4);
        worst = worst.max(rep.max_rel_err);
    }

    // Total generator objective w.r.t. the generated image.
    {
        let mut rng = rng_from_seed(207);
        let y_ref = random_image(&mut rng, 2, 2, 3);
        let x_up = random_image(&mut rng, 2, 2, 3);
        let y_out = ImageTensor::from_fn(2, 2, 3, |y, x, c| {
            y_ref.pixel(y, x, c) + if (y + x + c) % 2 == 0 { 0.11 } else { -0.13 }
        });
        let probe_w = uniform_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
        let cfg = LossConfig::default();
        let run = |img: &Tensor| -> (f64, Option<Tensor>) {
            let mut tape = Tape::new();
            let yo = tape.param(img.clone());
            let yr = tape.constant(y_ref.tensor().clone());
            let xu = tape.constant(x_up.tensor().clone());
            let rec = reconstruction_loss_t(&mut tape, yr, yo, xu, &cfg);
            let w = tape.constant(probe_w.clone());
            let prod = tape.mul(yo, w);
            let z = tape.mean(prod);
            let adv = bce_logits_t(&mut tape, &[z], true);
            let total = total_generator_loss_t(&mut tape, adv, rec, &cfg);
            let grads = tape.backward(total);
            (tape.scalar(total), grads.get(yo).cloned())
        };
        let (_, grad) = run(y_out.tensor());
        let analytic = vec![("y_out".to_string(), grad.unwrap())];
        let snapshot = vec![("y_out".to_string(), y_out.tensor().clone())];
        let mut eval = |entries: &[(String, Tensor)]| run(&entries[0].1).0;
        let rep = check_gradients(&snapshot, &analytic, &mut eval, 1e-4);
        rep.assert_below(1e-4);
        worst = worst.max(rep.max_rel_err);
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}, budget 2 min");
    println!(
        "criterion 2 PASS - five finite-difference checks, worst rel err {:.2e}, in {:.2?}",
        worst, elapsed
    );
}

#[test]
fn criterion_03_loss_identities() {
    let _guard = serial();
    let cfg = LossConfig::default();
    let mut rng = rng_from_seed(301);
    let y_ref = random_image(&mut rng, 8, 8, 3);
    let y_out = random_image(&mut rng, 8, 8, 3);
    let zero = ImageTensor::zeros(8, 8, 3);
    let reference = reconstruction_loss(&y_ref, &y_out, &zero, &cfg).unwrap();
    for seed in 0..8 {
        let x_up = random_image(&mut rng_from_seed(seed), 8, 8, 3);
        let v = reconstruction_loss(&y_ref, &y_out, &x_up, &cfg).unwrap();
        assert!(
            (v - reference).abs() < 1e-9,
            "x_up invariance violated: {v} vs {reference}"
        );
    }
    assert_eq!(reconstruction_loss(&y_ref, &y_ref, &zero, &cfg).unwrap(), 0.0);
    let half = generator_adv_loss(&[0.5]).unwrap();
    assert!((half - std::f64::consts::LN_2).abs() < 1e-6);
    assert_eq!(total_generator_loss(1.0, 0.0, &cfg), 0.4);
    assert_eq!(total_generator_loss(0.0, 1.0, &cfg), 0.6);
    assert_eq!(total_generator_loss(1.0, 1.0, &cfg), 1.0);
    println!(
        "criterion 3 PASS - x_up cancellation at 1e-9, L_R(y,y)=0, BCE(0.5)=ln2, 0.4/0.6 weights exact"
    );
}

#[test]
fn criterion_04_residual_identity_at_zero_init() {
    let _guard = serial();
    let cfg = TransformerConfig {
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        ..TransformerConfig::with_dims(2 * 2 * 3)
    };
    let mut gen = GeneratorParams::init(8, 8, 2, cfg, 401).unwrap();
    gen.zero_all();
    let mut rng = rng_from_seed(402);
    let img = random_image(&mut rng, 8, 8, 3);
    let two_x = gen.forward_2x(&img).unwrap();
    assert_eq!(two_x, upsample2(&img).unwrap().clamp01());
    let four_x = gen.forward_4x(&img).unwrap();
    let composed = upsample2(&upsample2(&img).unwrap().clamp01()).unwrap().clamp01();
    assert_eq!(four_x, composed);
    println!(
        "criterion 4 PASS - zeroed stacks give exactly the clamped bilinear x2 (and its self-composition at x4)"
    );
}

#[test]
fn criterion_05_weight_sharing_manifest_identical() {
    let _guard = serial();
    let cfg = TransformerConfig {
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        ..TransformerConfig::with_dims(2 * 2 * 3)
    };
    let gen = GeneratorParams::init(8, 8, 2, cfg, 501).unwrap();
    let mut rng = rng_from_seed(502);
    let img = random_image(&mut rng, 8, 8, 3);

    let manifest_for = |gen: &GeneratorParams| -> Vec<u8> {
        let mut bytes = Vec::new();
        for (name, t) in named_tensors(gen) {
            bytes.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                bytes.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    };
    let before = manifest_for(&gen);
    let _ = gen.forward_2x(&img).unwrap();
    let after_2x = manifest_for(&gen);
    let _ = gen.forward_4x(&img).unwrap();
    let after_4x = manifest_for(&gen);
    assert_eq!(before, after_2x);
    assert_eq!(before, after_4x, "4x use must not change the parameter manifest");

    // The 4x pass also binds no additional trainable tensors.
    let mut tape = Tape::new();
    let x = tape.constant(img.tensor().clone());
    let mut reg = ParamRegistry::new();
    let vars = gen.bind(&mut tape, &mut Binder::Trainable(&mut reg));
    let bound = reg.len();
    let _ = patchsr::generator::forward_4x_t(&mut tape, &vars, x, 8, 8, None);
    assert_eq!(reg.len(), bound);
    println!(
        "criterion 5 PASS - 2x and 4x share one byte-identical parameter manifest ({} tensors)",
        named_tensors(&gen).len()
    );
}

#[test]
fn criterion_06_shape_traces() {
    let _guard = serial();
    // Stage sequence at a small geometry.
    let tiny = TransformerConfig {
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        ..TransformerConfig::with_dims(2 * 2 * 3)
    };
    let gen = GeneratorParams::init(16, 16, 2, tiny, 601).unwrap();
    let mut rng = rng_from_seed(602);
    let img = random_image(&mut rng, 16, 16, 3);
    let (_, trace) = gen.forward_2x_traced(&img).unwrap();
    let shapes: Vec<(usize, usize)> = trace.iter().map(|s| (s.height, s.width)).collect();
    assert_eq!(
        shapes,
        vec![(16, 16), (8, 8), (16, 16), (32, 32), (32, 32)],
        "stage sequence must be H,W -> H/2,W/2 -> H,W -> 2H,2W"
    );

    // Reference I/O shapes with the reference patch size: 128 -> 256 -> 512.
    let cfg = TransformerConfig {
        depth: 1,
        ..TransformerConfig::with_dims(192)
    };
    let gen = GeneratorParams::init(128, 128, 8, cfg, 603).unwrap();
    let lr = random_image(&mut rng, 128, 128, 3);
    let (sr2, trace) = gen.forward_2x_traced(&lr).unwrap();
    assert_eq!((sr2.height(), sr2.width()), (256, 256));
    let shapes: Vec<(usize, usize)> = trace.iter().map(|s| (s.height, s.width)).collect();
    assert_eq!(
        shapes,
        vec![(128, 128), (64, 64), (128, 128), (256, 256), (256, 256)]
    );
    let sr4 = gen.forward_4x(&lr).unwrap();
    assert_eq!((sr4.height(), sr4.width()), (512, 512));
    println!("criterion 6 PASS - stage shapes H->H/2->H->2H and reference I/O 128 -> 256 -> 512");
}

#[test]
fn criterion_07_overfit_smoke_test() {
    let _guard = serial();
    let start = Instant::now();
    // Single 64x64 image dominated by a 2px checkerboard: bicubic
    // downsampling aliases it away, so the upscale baseline is weak and
    // the network must memorize the residual through its positional
    // embeddings to win.
    let hr = ImageTensor::from_fn(64, 64, 3, |y, x, c| {
        let chk = if ((y / 2) + (x / 2)) % 2 == 0 { 0.85 } else { 0.15 };
        (chk + 0.001 * y as f64 + 0.02 * c as f64).clamp(0.0, 1.0)
    });
    let (lr, hr_aligned) = synthesize_lr(&hr, 2).unwrap();
    let bicubic_up = ImageTensor::from_tensor(
        bicubic_resize(lr.tensor(), 64, 64).map(|v| v.clamp(0.0, 1.0)),
    )
    .unwrap();
    let baseline = psnr(&bicubic_up, &hr_aligned, 1.0).unwrap();

    let cfg = TrainConfig {
        scale: 2,
        crop_lr: 32,
        depth: 3,
        batch_size: 1,
        seed: 42,
        ..TrainConfig::default()
    };
    let corpus = vec![CorpusImage { id: "smoke".into(), image: hr }];
    let mut state = TrainState::new(cfg).unwrap();
    let mut first_rec = f64::NAN;
    let mut last_rec = f64::NAN;
    for step in 0..300 {
        let batch = state.sample_batch(&corpus).unwrap();
        let losses = state.train_step(&batch).unwrap();
        if step == 0 {
            first_rec = losses.gen_rec;
        }
        last_rec = losses.gen_rec;
    }
    let sr = state.gen.forward_2x(&lr).unwrap();
    let final_psnr = psnr(&sr, &hr_aligned, 1.0).unwrap();
    let elapsed = start.elapsed();

    assert!(
        last_rec <= 0.5 * first_rec,
        "L_R fell only from {first_rec:.5} to {last_rec:.5}"
    );
    assert!(
        final_psnr >= baseline + 3.0,
        "PSNR {final_psnr:.2} dB did not beat bicubic {baseline:.2} dB by 3"
    );
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}, budget 10 min");
    println!(
        "criterion 7 PASS - 300 steps: L_R {first_rec:.4} -> {last_rec:.4} ({:.0}% drop), PSNR {final_psnr:.2} dB vs bicubic {baseline:.2} dB, in {:.1?}",
        100.0 * (1.0 - last_rec / first_rec),
        elapsed
    );
}

#[test]
fn criterion_08_metric_oracles() {
    let _guard = serial();
    // Fixed points.
    let a = ImageTensor::constant(16, 16, 3, 0.4);
    let b = ImageTensor::constant(16, 16, 3, 0.5);
    let twenty = psnr(&a, &b, 1.0).unwrap();
    assert!((twenty - 20.0).abs() < 1e-6, "{twenty}");
    let mut rng = rng_from_seed(801);
    let img = random_image(&mut rng, 16, 16, 3);
    assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    assert_eq!(psnr_capped(&img, &img, 1.0).unwrap(), 100.0);

    // Twenty random pairs against scalar-loop oracles.
    for pair in 0..20 {
        let x = random_image(&mut rng, 13, 14, 3);
        let y = random_image(&mut rng, 13, 14, 3);
        let mut mse = 0.0;
        for yy in 0..13 {
            for xx in 0..14 {
                for c in 0..3 {
                    let d = x.pixel(yy, xx, c) - y.pixel(yy, xx, c);
                    mse += d * d;
                }
            }
        }
        mse /= (13 * 14 * 3) as f64;
        let psnr_oracle = 10.0 * (1.0 / mse).log10();
        assert!(
            (psnr(&x, &y, 1.0).unwrap() - psnr_oracle).abs() < 1e-6,
            "pair {pair} psnr"
        );
        let ssim_oracle = direct_window_ssim(&x, &y);
        assert!(
            (ssim(&x, &y).unwrap() - ssim_oracle).abs() < 1e-6,
            "pair {pair} ssim"
        );
    }
    println!("criterion 8 PASS - 20 dB fixed point, SSIM identity, 20 random pairs vs scalar oracles at 1e-6");
}

/// Direct (non-separable) 11x11 Gaussian-window SSIM oracle.
fn direct_window_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let sigma = 1.5f64;
    let mut win = [0.0f64; 11];
    let mut total = 0.0;
    for (i, w) in win.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *w = (-d * d / (2.0 * sigma * sigma)).exp();
        total += *w;
    }
    for w in &mut win {
        *w /= total;
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let (oh, ow) = (h - 10, w - 10);
    let mut chans = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut eaa, mut ebb, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = win[dy] * win[dx];
                        let va = a.pixel(oy + dy, ox + dx, c);
                        let vb = b.pixel(oy + dy, ox + dx, c);
                        ma += wt * va;
                        mb += wt * vb;
                        eaa += wt * va * va;
                        ebb += wt * vb * vb;
                        eab += wt * va * vb;
                    }
                }
                let (sa, sb, sab) = (eaa - ma * ma, ebb - mb * mb, eab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * sab + c2))
                    / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
            }
        }
        chans += acc / (oh * ow) as f64;
    }
    chans / ch as f64
}

#[test]
fn criterion_09_plateau_schedule_trigger_epochs() {
    let _guard = serial();
    let mut sched = PlateauSchedule::new(2e-4, 0.2, 30, 1e-6);
    sched.set_baseline(1.0);
    let mut lr_at = Vec::new();
    for epoch in 1..=60 {
        sched.observe(1.0);
        lr_at.push((epoch, sched.lr));
    }
    for (epoch, lr) in &lr_at {
        let expect = match epoch {
            1..=29 => 2e-4,
            30..=59 => 4e-5,
            _ => 8e-6,
        };
        assert!(
            (lr - expect).abs() < 1e-18,
            "epoch {epoch}: lr {lr:e}, expected {expect:e}"
        );
    }
    println!("criterion 9 PASS - lr 2e-4 -> 4e-5 at epoch 30 -> 8e-6 at epoch 60, exactly");
}

#[test]
fn criterion_10_determinism_and_resume() {
    let _guard = serial();
    let cfg = TrainConfig {
        scale: 2,
        crop_lr: 8,
        k: 2,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        batch_size: 1,
        disc_dim: 8,
        seed: 1001,
        ..TrainConfig::default()
    };
    let mut rng = rng_from_seed(1002);
    let corpus = vec![
        CorpusImage { id: "a".into(), image: random_image(&mut rng, 24, 24, 3) },
        CorpusImage { id: "b".into(), image: random_image(&mut rng, 24, 24, 3) },
    ];
    let run_steps = |state: &mut TrainState, n: usize| {
        for _ in 0..n {
            let batch = state.sample_batch(&corpus).unwrap();
            state.train_step(&batch).unwrap();
        }
    };

    // Fresh runs agree bit for bit.
    let mut s1 = TrainState::new(cfg.clone()).unwrap();
    run_steps(&mut s1, 10);
    let mut s2 = TrainState::new(cfg.clone()).unwrap();
    run_steps(&mut s2, 10);
    let continuous = s1.to_checkpoint().to_bytes();
    assert_eq!(continuous, s2.to_checkpoint().to_bytes());

    // Interrupt at 5, resume through the serialized checkpoint.
    let mut s3 = TrainState::new(cfg.clone()).unwrap();
    run_steps(&mut s3, 5);
    let bytes = s3.to_checkpoint().to_bytes();
    let ck = patchsr::checkpoint::Checkpoint::from_bytes(&bytes).unwrap();
    let mut s4 = TrainState::from_checkpoint(ck, Some(&cfg)).unwrap();
    run_steps(&mut s4, 5);
    assert_eq!(
        continuous,
        s4.to_checkpoint().to_bytes(),
        "resumed run diverged from the uninterrupted one"
    );
    println!("criterion 10 PASS - fixed-seed runs bit-identical; checkpoint resume matches over 10 steps");
}
