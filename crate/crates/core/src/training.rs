//! Alternating GAN optimization: one discriminator update then one
//! generator update per step, Adam with the reference hyperparameters,
//! plateau-scheduled learning rate, deterministic batch sampling, and
//! exact checkpoint/resume.
//!
//! Batches are drawn i.i.d. from the training corpus (each draw picks
//! an image, then an aligned random crop), so the whole data stream is
//! a pure function of the RNG position; an "epoch" is a fixed number of
//! steps. That makes resume-from-checkpoint bit-exact: restoring
//! parameters, moments, counters and the RNG position reproduces the
//! uninterrupted run step for step.
//!
//! At 4x scale the default is frozen composition: the optimization
//! trains the 2x mapping (on 2x pairs at the configured crop) and the
//! 4x output comes from applying the trained model twice. The
//! `finetune_4x` switch instead differentiates through the composed 4x
//! forward end-to-end.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{AdamSnapshot, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{augment_pair, sample_training_pair, synthesize_lr, CorpusImage, PairedSample};
use crate::discriminator::{discriminator_logit_t, DiscriminatorConfig, DiscriminatorParams};
use crate::error::{Error, Result};
use crate::generator::{forward_2x_t, forward_4x_t, GeneratorParams};
use crate::losses::{
    bce_logits_t, discriminator_loss_t, reconstruction_loss, reconstruction_loss_t,
    total_generator_loss_t,
};
use crate::optim::{clip_grad_norm, Adam, AdamState, PlateauSchedule};
use crate::params::{load_named, named_tensors, Binder, ParamRegistry};
use crate::rng::sub_seed;
use crate::transformer::DropoutCtx;

#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub disc: f64,
    pub gen_adv: f64,
    pub gen_rec: f64,
    pub gen_total: f64,
}

/// Complete optimization state; serializable to a [`Checkpoint`] and
/// exactly restorable.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub gen: GeneratorParams,
    pub disc: DiscriminatorParams,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub schedule: PlateauSchedule,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let crop = cfg.resolved_crop();
        let gen = GeneratorParams::init(crop, crop, cfg.k, cfg.transformer_config(), cfg.seed)?;
        let out_size = cfg.training_scale() * crop;
        let disc_cfg = DiscriminatorConfig {
            k: cfg.k,
            d: cfg.disc_dim,
            depth: cfg.depth,
            heads: cfg.heads,
            ..DiscriminatorConfig::default()
        };
        let disc = DiscriminatorParams::init(out_size, out_size, disc_cfg, cfg.seed)?;
        let opt_g = Adam::init_state(&gen);
        let opt_d = Adam::init_state(&disc);
        let schedule = PlateauSchedule::new(
            cfg.lr0,
            cfg.plateau_factor,
            cfg.plateau_patience,
            cfg.improve_tol,
        );
        let rng = crate::rng::rng_from_seed(sub_seed(cfg.seed, "train.data"));
        Ok(TrainState {
            cfg,
            gen,
            disc,
            opt_g,
            opt_d,
            schedule,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    fn adam(&self) -> Adam {
        Adam::new(self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)
    }

    fn check_batch(&self, batch: &[PairedSample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let crop = self.cfg.resolved_crop();
        let ts = self.cfg.training_scale();
        for s in batch {
            s.validate()?;
            if s.scale != ts || s.lr.height() != crop || s.lr.width() != crop {
                return Err(Error::Geometry(format!(
                    "batch sample {} is {}x{} at scale {}, expected {}px crops at scale {}",
                    s.source_id,
                    s.lr.height(),
                    s.lr.width(),
                    s.scale,
                    crop,
                    ts
                )));
            }
        }
        Ok(())
    }

    /// Upsampled-input conditioning image for one sample.
    fn upscale_chain(tape: &mut Tape, x: Var, h: usize, w: usize, scale: usize) -> Var {
        let up2 = tape.bilinear(x, 2 * h, 2 * w);
        if scale == 4 {
            tape.bilinear(up2, 4 * h, 4 * w)
        } else {
            up2
        }
    }

    fn generated_t(
        &self,
        tape: &mut Tape,
        gvars: &crate::generator::GenVars,
        x: Var,
        h: usize,
        w: usize,
        drop: Option<&mut DropoutCtx>,
    ) -> Var {
        if self.cfg.training_scale() == 4 {
            forward_4x_t(tape, gvars, x, h, w, drop)
        } else {
            forward_2x_t(tape, gvars, x, h, w, drop)
        }
    }

    /// One discriminator update on a batch; the generator contributes
    /// detached (constant) samples. Returns the discriminator loss.
    pub fn discriminator_step(&mut self, batch: &[PairedSample]) -> Result<f64> {
        self.check_batch(batch)?;
        let crop = self.cfg.resolved_crop();
        let mut tape = Tape::new();
        let gvars = self.gen.bind(&mut tape, &mut Binder::Frozen);
        let mut reg = ParamRegistry::new();
        let dvars = self.disc.bind(&mut tape, &mut Binder::Trainable(&mut reg));
        let mut fake_logits = Vec::with_capacity(batch.len());
        let mut real_logits = Vec::with_capacity(batch.len());
        for sample in batch {
            let x = tape.constant(sample.lr.tensor().clone());
            let y_ref = tape.constant(sample.hr.tensor().clone());
            let x_up = Self::upscale_chain(&mut tape, x, crop, crop, sample.scale);
            let y_gen = self.generated_t(&mut tape, &gvars, x, crop, crop, None);
            let fake = tape.concat_channels(x_up, y_gen);
            let real = tape.concat_channels(x_up, y_ref);
            fake_logits.push(discriminator_logit_t(&mut tape, &dvars, fake));
            real_logits.push(discriminator_logit_t(&mut tape, &dvars, real));
        }
        let loss = discriminator_loss_t(&mut tape, &fake_logits, &real_logits);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(self.non_finite(batch, "discriminator loss", loss_val));
        }
        let grads = tape.backward(loss);
        let mut named = reg.named_grads(&tape, &grads);
        clip_grad_norm(&mut named, self.cfg.clip_norm);
        self.adam()
            .step(&mut self.opt_d, self.schedule.lr, &mut self.disc, &named)?;
        Ok(loss_val)
    }

    /// One generator update on a batch; the discriminator participates
    /// frozen. Returns (adversarial, reconstruction, total).
    pub fn generator_step(&mut self, batch: &[PairedSample]) -> Result<(f64, f64, f64)> {
        self.check_batch(batch)?;
        let crop = self.cfg.resolved_crop();
        let loss_cfg = self.cfg.loss_config();
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let gvars = self.gen.bind(&mut tape, &mut Binder::Trainable(&mut reg));
        let dvars = self.disc.bind(&mut tape, &mut Binder::Frozen);
        // Dropout draws from a local copy of the state RNG; the
        // advanced position is folded back afterwards so resume stays
        // exact.
        let use_dropout = self.cfg.dropout > 0.0;
        let mut drop_rng = self.rng.clone();
        let mut fake_logits = Vec::with_capacity(batch.len());
        let mut rec_terms = Vec::with_capacity(batch.len());
        {
            let mut drop_ctx = if use_dropout {
                Some(DropoutCtx { p: self.cfg.dropout, rng: &mut drop_rng })
            } else {
                None
            };
            for sample in batch {
                let x = tape.constant(sample.lr.tensor().clone());
                let y_ref = tape.constant(sample.hr.tensor().clone());
                let x_up = Self::upscale_chain(&mut tape, x, crop, crop, sample.scale);
                let y_gen = self.generated_t(&mut tape, &gvars, x, crop, crop, drop_ctx.as_mut());
                let fake = tape.concat_channels(x_up, y_gen);
                fake_logits.push(discriminator_logit_t(&mut tape, &dvars, fake));
                rec_terms.push(reconstruction_loss_t(&mut tape, y_ref, y_gen, x_up, &loss_cfg));
            }
        }
        if use_dropout {
            self.rng = drop_rng;
        }
        let adv = bce_logits_t(&mut tape, &fake_logits, true);
        let rec = tape.mean_scalars(&rec_terms);
        let total = total_generator_loss_t(&mut tape, adv, rec, &loss_cfg);
        let (adv_v, rec_v, total_v) = (tape.scalar(adv), tape.scalar(rec), tape.scalar(total));
        if !total_v.is_finite() {
            return Err(self.non_finite(batch, "generator loss", total_v));
        }
        let grads = tape.backward(total);
        let mut named = reg.named_grads(&tape, &grads);
        clip_grad_norm(&mut named, self.cfg.clip_norm);
        self.adam()
            .step(&mut self.opt_g, self.schedule.lr, &mut self.gen, &named)?;
        Ok((adv_v, rec_v, total_v))
    }

    fn non_finite(&self, batch: &[PairedSample], what: &str, value: f64) -> Error {
        let ids: Vec<&str> = batch.iter().map(|s| s.source_id.as_str()).collect();
        Error::Numeric(format!(
            "{} became {} at step {} (batch: {})",
            what,
            value,
            self.step + 1,
            ids.join(", ")
        ))
    }

    /// One full optimization step: discriminator update, then generator
    /// update.
    pub fn train_step(&mut self, batch: &[PairedSample]) -> Result<StepLosses> {
        let disc = self.discriminator_step(batch)?;
        let (gen_adv, gen_rec, gen_total) = self.generator_step(batch)?;
        self.step += 1;
        Ok(StepLosses { disc, gen_adv, gen_rec, gen_total })
    }

    /// Draw a deterministic batch of aligned crops from the corpus.
    pub fn sample_batch(&mut self, corpus: &[CorpusImage]) -> Result<Vec<PairedSample>> {
        if corpus.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let crop = self.cfg.resolved_crop();
        let ts = self.cfg.training_scale();
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        let mut failures = 0;
        while batch.len() < self.cfg.batch_size {
            let idx = self.rng.random_range(0..corpus.len());
            let img = &corpus[idx];
            match sample_training_pair(
                &img.image,
                &img.id,
                ts,
                crop,
                self.cfg.crop_mode,
                &mut self.rng,
            )? {
                Some(mut pair) => {
                    if self.cfg.augment {
                        augment_pair(&mut pair, &mut self.rng);
                    }
                    batch.push(pair)
                }
                None => {
                    failures += 1;
                    if failures > 10 * corpus.len() {
                        return Err(Error::Data(format!(
                            "no corpus image admits a {}px LR crop at scale {}",
                            crop, ts
                        )));
                    }
                }
            }
        }
        Ok(batch)
    }

    /// Mean reconstruction loss over a validation set, evaluated on
    /// whole images (center-cropped to the geometry the model accepts).
    pub fn validate(&self, val: &[CorpusImage]) -> Result<f64> {
        if val.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let ts = self.cfg.training_scale();
        let mut acc = 0.0;
        for img in val {
            let multiple = ts * 2 * self.cfg.k;
            let (h, w) = (img.image.height(), img.image.width());
            let (ch, cw) = (h - h % multiple, w - w % multiple);
            if ch == 0 || cw == 0 {
                return Err(Error::Data(format!(
                    "validation image {} ({}x{}) smaller than one {}px tile",
                    img.id, h, w, multiple
                )));
            }
            let hr = img.image.crop((h - ch) / 2, (w - cw) / 2, ch, cw);
            let (lr, hr) = synthesize_lr(&hr, ts)?;
            let y_gen = if ts == 4 {
                self.gen.forward_4x(&lr)?
            } else {
                self.gen.forward_2x(&lr)?
            };
            let mut x_up = crate::generator::upsample2(&lr)?;
            if ts == 4 {
                x_up = crate::generator::upsample2(&x_up)?;
            }
            acc += reconstruction_loss(&hr, &y_gen, &x_up, &self.cfg.loss_config())?;
        }
        Ok(acc / val.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.cfg.canonical_text(),
            epoch: self.epoch,
            step: self.step,
            lr: self.schedule.lr,
            best: self.schedule.best,
            since_improve: self.schedule.since_improve,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            gen: named_tensors(&self.gen),
            disc: named_tensors(&self.disc),
            opt_g: AdamSnapshot::from_state(&self.opt_g),
            opt_d: AdamSnapshot::from_state(&self.opt_d),
        }
    }

    /// Restore a state from a checkpoint. When `expected` is given, the
    /// checkpoint's config must match it exactly (differences are named).
    pub fn from_checkpoint(ck: Checkpoint, expected: Option<&TrainConfig>) -> Result<TrainState> {
        let cfg = ck.config()?;
        if let Some(want) = expected {
            let diff = want.diff_keys(&cfg);
            if !diff.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config differs on: {}",
                    diff.join(", ")
                )));
            }
        }
        let mut state = TrainState::new(cfg)?;
        load_named(&mut state.gen, &ck.gen)?;
        load_named(&mut state.disc, &ck.disc)?;
        state.opt_g = ck.opt_g.into_state()?;
        state.opt_d = ck.opt_d.into_state()?;
        state.schedule.lr = ck.lr;
        state.schedule.best = ck.best;
        state.schedule.since_improve = ck.since_improve;
        state.rng = rng_from_parts(ck.rng_seed, ck.rng_word_pos);
        state.epoch = ck.epoch;
        state.step = ck.step;
        Ok(state)
    }
}

fn rng_from_parts(seed: [u8; 32], word_pos: u128) -> ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    rng
}

/// Split a corpus into train/validation deterministically: the last
/// `max(1, round(f * n))` images (lexicographic order) are held out.
/// A single-image corpus is its own validation set.
pub fn split_corpus(corpus: &[CorpusImage], val_fraction: f64) -> (Vec<CorpusImage>, Vec<CorpusImage>) {
    if corpus.len() <= 1 {
        return (corpus.to_vec(), corpus.to_vec());
    }
    let n_val = ((corpus.len() as f64 * val_fraction).round() as usize)
        .clamp(1, corpus.len() - 1);
    let cut = corpus.len() - n_val;
    (corpus[..cut].to_vec(), corpus[cut..].to_vec())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs_run: u64,
    pub steps_run: u64,
    pub final_val: f64,
    pub best_val: f64,
    pub final_lr: f64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Full training run: epochs of deterministic steps, per-epoch
/// validation driving the plateau schedule and best-checkpoint copy,
/// CSV step log, and atomic checkpointing. When `explicit_val` is
/// given it is used as the held-out set; otherwise a fraction of the
/// corpus is carved off deterministically.
pub fn run_training(
    mut state: TrainState,
    corpus: &[CorpusImage],
    explicit_val: Option<&[CorpusImage]>,
    out_dir: &Path,
    mut log: impl FnMut(&str),
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let (train, val) = match explicit_val {
        Some(v) if !v.is_empty() => (corpus.to_vec(), v.to_vec()),
        _ => split_corpus(corpus, state.cfg.val_fraction),
    };
    let steps_per_epoch = if state.cfg.steps_per_epoch > 0 {
        state.cfg.steps_per_epoch
    } else {
        train.len().div_ceil(state.cfg.batch_size)
    };
    let log_path = out_dir.join("train_log.csv");
    let mut csv = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if csv.metadata()?.len() == 0 {
        writeln!(csv, "step,l_d,l_g,l_r,lr")?;
    }

    if state.epoch == 0 && state.schedule.best.is_none() {
        let baseline = state.validate(&val)?;
        state.schedule.set_baseline(baseline);
        log(&format!("baseline validation L_R = {baseline:.6}"));
    }

    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut best_val = state.schedule.best.unwrap_or(f64::INFINITY);
    let mut final_val = best_val;

    let start_epoch = state.epoch;
    for epoch in start_epoch + 1..=state.cfg.max_epochs as u64 {
        for _ in 0..steps_per_epoch {
            let batch = state.sample_batch(&train)?;
            let losses = state.train_step(&batch)?;
            writeln!(
                csv,
                "{},{:.9},{:.9},{:.9},{:.9e}",
                state.step, losses.disc, losses.gen_adv, losses.gen_rec, state.schedule.lr
            )?;
        }
        state.epoch = epoch;
        let val_loss = state.validate(&val)?;
        final_val = val_loss;
        let improved = val_loss < best_val - state.cfg.improve_tol;
        if improved {
            best_val = val_loss;
        }
        let reduced = state.schedule.observe(val_loss);
        if reduced {
            log(&format!(
                "epoch {epoch}: no improvement for {} epochs, lr -> {:.3e}",
                state.cfg.plateau_patience, state.schedule.lr
            ));
        }
        state.to_checkpoint().save(&last_path)?;
        if improved {
            state.to_checkpoint().save(&best_path)?;
        }
        if state.cfg.checkpoint_every > 0 && (epoch as usize).is_multiple_of(state.cfg.checkpoint_every) {
            state.to_checkpoint().save(&out_dir.join(format!("epoch_{epoch:04}.ckpt")))?;
        }
        log(&format!(
            "epoch {epoch}: val L_R = {val_loss:.6}{}",
            if improved { " (improved)" } else { "" }
        ));
    }
    if !best_path.exists() {
        state.to_checkpoint().save(&best_path)?;
    }
    Ok(TrainSummary {
        epochs_run: state.epoch - start_epoch,
        steps_run: state.step,
        final_val,
        best_val,
        final_lr: state.schedule.lr,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    })
}
