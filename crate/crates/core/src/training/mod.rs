//! Optimization: learning-rate schedule, Adam, gradient clipping, the
//! training loop, validation and checkpointing.

mod checkpoint;

pub use checkpoint::Checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use s2st_numerics::{Graph, ParamStore};

use crate::config::Preset;
use crate::corpus::{make_batch, stream_rng, Batch, BatchOptions, Prefetcher, TrainingExample};
use crate::error::{Error, Result};
use crate::model::{l2_norm_sq, LossBreakdown, Model};
use crate::nn::{is_bias, ModelRng};

pub const METRICS_HEADER: &str = "step,phoneme_ce,duration_l2,spec_loss,total,lr,accuracy";
pub const VALIDATION_HEADER: &str = "step,accuracy,spec_loss,duration_error_frames";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VALIDATION_FILE: &str = "validation.csv";

const DATA_STREAM: u64 = 0x00da_7a00;
const MODEL_STREAM: u64 = 0x00d0_0700;

/// `peak · min(step / warmup, sqrt(warmup / step))`.
pub fn lr_schedule(step: usize, peak_lr: f64, warmup_steps: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

/// Adam with bias correction; moments are kept per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64) -> Adam {
        let zeros = || store.iter().map(|(_, p)| vec![0.0f32; p.value.len()]).collect();
        Adam { m: zeros(), v: zeros(), t: 0, beta1, beta2, eps }
    }

    /// Applies one update from the gradients stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (id, p) in store.iter_mut() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                value[i] = (value[i] as f64 - update) as f32;
            }
        }
    }
}

/// Global L2 norm of the stored gradients.
pub fn grad_norm(store: &ParamStore<f32>) -> f64 {
    store.iter().map(|(_, p)| p.grad.sum_squares()).sum::<f64>().sqrt()
}

/// Rescales stored gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, p) in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Adds the gradient of `weight · Σ‖w‖²` over non-bias parameters.
pub fn add_l2_gradient(store: &mut ParamStore<f32>, weight: f64) {
    if weight == 0.0 {
        return;
    }
    let k = (2.0 * weight) as f32;
    for (_, p) in store.iter_mut() {
        if is_bias(&p.name) {
            continue;
        }
        let (value, grad) = (p.value.data().to_vec(), p.grad.data_mut());
        for (g, w) in grad.iter_mut().zip(value) {
            *g += k * w;
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepReport {
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValidationMetrics {
    /// Teacher-forced phoneme accuracy, EOS included.
    pub accuracy: f64,
    /// Post-net mean squared error in log-mel units.
    pub spec_mse: f64,
    /// Mean absolute difference between summed durations and target
    /// lengths, frames.
    pub duration_error_frames: f64,
    pub items: usize,
}

/// Batch for `step`, a pure function of the pool, the configuration and
/// the step number.
pub fn batch_for_step(pool: &[TrainingExample], preset: &Preset, step: usize) -> Result<Batch> {
    if pool.is_empty() {
        return Err(Error::Data("empty training pool".into()));
    }
    let tc = &preset.train;
    let mut rng = stream_rng(tc.seed ^ DATA_STREAM, step as u64);
    let n = tc.batch_size.min(pool.len());
    let idx = sample(&mut rng, pool.len(), n).into_vec();
    let opts = BatchOptions { concat_aug_prob: tc.concat_aug_prob, spec_augment: Some(tc.spec_augment.clone()) };
    make_batch(pool, &idx, &opts, &mut rng)
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam,
    /// Number of completed steps.
    pub step: usize,
    pub skipped_steps: usize,
    pub best_accuracy: f64,
}

impl Trainer {
    pub fn new(preset: &Preset) -> Result<Trainer> {
        let (model, store) = Model::build(preset)?;
        let t = &preset.train;
        let adam = Adam::new(&store, t.adam_beta1, t.adam_beta2, t.adam_eps);
        Ok(Trainer { model, store, adam, step: 0, skipped_steps: 0, best_accuracy: f64::NEG_INFINITY })
    }

    pub fn preset(&self) -> &Preset {
        &self.model.preset
    }

    /// Restores a trainer; `expected` (when given) must share the
    /// checkpoint's configuration fingerprint.
    pub fn from_checkpoint(ckpt: Checkpoint, expected: Option<&Preset>) -> Result<Trainer> {
        if let Some(p) = expected {
            if p.fingerprint() != ckpt.fingerprint {
                return Err(Error::Checkpoint(format!(
                    "configuration fingerprint {:016x} does not match checkpoint {:016x}",
                    p.fingerprint(),
                    ckpt.fingerprint
                )));
            }
        }
        let mut preset = ckpt.preset.clone();
        if let Some(p) = expected {
            // run-length settings are outside the fingerprint
            preset.train.max_steps = p.train.max_steps;
            preset.train.eval_every = p.train.eval_every;
            preset.train.prefetch = p.train.prefetch;
        }
        let (model, fresh) = Model::build(&preset)?;
        let names: Vec<_> = fresh.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
        let stored: Vec<_> = ckpt.params.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
        if names != stored {
            return Err(Error::Checkpoint("stored parameters do not match the model layout".into()));
        }
        Ok(Trainer {
            model,
            store: ckpt.params,
            adam: ckpt.adam,
            step: ckpt.step,
            skipped_steps: ckpt.skipped_steps,
            best_accuracy: ckpt.best_accuracy,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let preset = self.model.preset.clone();
        Checkpoint {
            step: self.step,
            seed: preset.train.seed,
            fingerprint: preset.fingerprint(),
            skipped_steps: self.skipped_steps,
            best_accuracy: self.best_accuracy,
            preset,
            params: self.store.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Forward, backward and update on `batch` as step `self.step + 1`.
    pub fn train_on(&mut self, batch: &Batch) -> Result<StepReport> {
        let step = self.step + 1;
        let tc = self.model.preset.train.clone();
        let lr = lr_schedule(step, tc.peak_lr, tc.warmup_steps);
        let mut rng: ModelRng = stream_rng(tc.seed ^ MODEL_STREAM, step as u64);
        let l2 = l2_norm_sq(&self.store);
        let (grads, out_breakdown, accuracy) = {
            let mut g = Graph::new(&self.store, true);
            let out = self.model.forward_train(&mut g, l2, batch, &mut rng)?;
            let grads = g.backward(out.loss)?;
            (grads, out.breakdown, out.accuracy())
        };
        self.store.zero_grads();
        self.store.accumulate(&grads)?;
        add_l2_gradient(&mut self.store, tc.l2_reg_weight);
        let mut report = StepReport { step, breakdown: out_breakdown, lr, accuracy, ..Default::default() };
        let finite = out_breakdown.total.is_finite() && grads.all_finite();
        if finite {
            report.grad_norm = clip_gradients(&mut self.store, tc.clip_norm);
            report.clipped = tc.clip_norm > 0.0 && report.grad_norm > tc.clip_norm;
            self.adam.step(&mut self.store, lr);
        } else {
            report.skipped = true;
            self.skipped_steps += 1;
        }
        self.step = step;
        Ok(report)
    }

    /// Loss breakdown of the next step without updating anything.
    pub fn peek_next(&self, pool: &[TrainingExample]) -> Result<LossBreakdown> {
        let step = self.step + 1;
        let batch = batch_for_step(pool, self.preset(), step)?;
        let mut rng: ModelRng = stream_rng(self.preset().train.seed ^ MODEL_STREAM, step as u64);
        let mut g = Graph::new(&self.store, true);
        Ok(self.model.forward_train(&mut g, l2_norm_sq(&self.store), &batch, &mut rng)?.breakdown)
    }

    pub fn train_step(&mut self, pool: &[TrainingExample]) -> Result<StepReport> {
        let batch = batch_for_step(pool, self.preset(), self.step + 1)?;
        self.train_on(&batch)
    }
}

/// Teacher-forced validation in inference mode, parallel over batches.
pub fn validate(model: &Model, store: &ParamStore<f32>, pool: &[TrainingExample], batch_size: usize) -> Result<ValidationMetrics> {
    if pool.is_empty() {
        return Err(Error::Data("empty validation pool".into()));
    }
    let opts = BatchOptions { concat_aug_prob: 0.0, spec_augment: None };
    let chunks: Vec<Vec<usize>> = (0..pool.len()).collect::<Vec<_>>().chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len());
    let per_worker = chunks.len().div_ceil(workers);
    let results: Vec<Result<(usize, usize, f64, f64, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per_worker)
            .map(|group| {
                let opts = &opts;
                s.spawn(move || -> Result<(usize, usize, f64, f64, f64)> {
                    let (mut correct, mut counted, mut sq, mut cells, mut dur) = (0, 0, 0.0, 0.0, 0.0);
                    for idx in group {
                        let batch = make_batch(pool, idx, opts, &mut stream_rng(0, 0))?;
                        let mut g = Graph::new(store, false);
                        let out = model.forward_train(&mut g, 0.0, &batch, &mut stream_rng(0, 0))?;
                        correct += out.correct;
                        counted += out.counted;
                        let after = model.output_norm.denormalize(g.value(out.spectrogram.after_postnet).data());
                        let c = batch.tgt_channels;
                        for (i, (&a, &t)) in after.iter().zip(&batch.tgt).enumerate() {
                            if batch.tgt_mask[i / c] > 0.0 {
                                sq += ((a - t) as f64).powi(2);
                                cells += 1.0;
                            }
                        }
                        let d = g.value(out.spectrogram.durations.durations).data();
                        let l = batch.phon_len;
                        for (b, &tl) in batch.tgt_lens.iter().enumerate() {
                            let s: f64 = d[b * l..(b + 1) * l].iter().map(|&x| x as f64).sum();
                            dur += (s - tl as f64).abs();
                        }
                    }
                    Ok((correct, counted, sq, cells, dur))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("validation worker panicked")).collect()
    });
    let (mut correct, mut counted, mut sq, mut cells, mut dur) = (0, 0, 0.0, 0.0, 0.0);
    for r in results {
        let (a, b, c, d, e) = r?;
        correct += a;
        counted += b;
        sq += c;
        cells += d;
        dur += e;
    }
    Ok(ValidationMetrics {
        accuracy: correct as f64 / counted.max(1) as f64,
        spec_mse: sq / cells.max(1.0),
        duration_error_frames: dur / pool.len() as f64,
        items: pool.len(),
    })
}

/// Where and how a training run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub log_every: usize,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub skipped_steps: usize,
    pub clipped_steps: usize,
    pub last: Option<StepReport>,
    pub validations: Vec<(usize, ValidationMetrics)>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

/// Runs (or resumes) training up to `train.max_steps`, validating and
/// checkpointing every `train.eval_every` steps.
pub fn train(preset: &Preset, train_pool: Arc<Vec<TrainingExample>>, valid_pool: &[TrainingExample], opts: &RunOptions) -> Result<TrainSummary> {
    fs::create_dir_all(&opts.out_dir)?;
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::from_checkpoint(Checkpoint::load(path)?, Some(preset))?,
        None => Trainer::new(preset)?,
    };
    let preset = trainer.preset().clone();
    let tc = preset.train.clone();
    let metrics = opts.out_dir.join(METRICS_FILE);
    let validation = opts.out_dir.join(VALIDATION_FILE);
    let last_path = opts.out_dir.join(LAST_CHECKPOINT);
    let best_path = opts.out_dir.join(BEST_CHECKPOINT);
    let mut summary = TrainSummary {
        steps: trainer.step,
        skipped_steps: trainer.skipped_steps,
        clipped_steps: 0,
        last: None,
        validations: Vec::new(),
        last_checkpoint: last_path.clone(),
        best_checkpoint: best_path.exists().then(|| best_path.clone()),
    };
    let start = trainer.step + 1;
    let batches = {
        let pool = Arc::clone(&train_pool);
        let p = preset.clone();
        Prefetcher::spawn(start..tc.max_steps + 1, tc.prefetch, move |step| batch_for_step(&pool, &p, step))
    };
    for batch in batches {
        let report = trainer.train_on(&batch?)?;
        let b = report.breakdown;
        append_line(
            &metrics,
            METRICS_HEADER,
            &format!("{},{},{},{},{},{},{}", report.step, b.phoneme_ce, b.duration_l2, b.spec_loss, b.total, report.lr, report.accuracy),
        )?;
        if report.clipped {
            summary.clipped_steps += 1;
        }
        if report.skipped {
            eprintln!("step {}: non-finite loss or gradient, update skipped", report.step);
        }
        if opts.log_every > 0 && report.step % opts.log_every == 0 {
            eprintln!(
                "step {} total {:.4} ce {:.4} dur {:.4} spec {:.4} acc {:.3} lr {:.2e} |g| {:.3}",
                report.step, b.total, b.phoneme_ce, b.duration_l2, b.spec_loss, report.accuracy, report.lr, report.grad_norm
            );
        }
        summary.last = Some(report);
        let at_eval = tc.eval_every > 0 && report.step % tc.eval_every == 0;
        if at_eval || report.step == tc.max_steps {
            if !valid_pool.is_empty() {
                let v = validate(&trainer.model, &trainer.store, valid_pool, tc.batch_size)?;
                append_line(
                    &validation,
                    VALIDATION_HEADER,
                    &format!("{},{},{},{}", report.step, v.accuracy, v.spec_mse, v.duration_error_frames),
                )?;
                eprintln!("step {} validation accuracy {:.4} spec mse {:.4} duration error {:.2} frames", report.step, v.accuracy, v.spec_mse, v.duration_error_frames);
                summary.validations.push((report.step, v));
                if v.accuracy > trainer.best_accuracy {
                    trainer.best_accuracy = v.accuracy;
                    trainer.checkpoint().save(&best_path)?;
                    summary.best_checkpoint = Some(best_path.clone());
                }
            }
            trainer.checkpoint().save(&last_path)?;
        }
    }
    if trainer.step < start {
        trainer.checkpoint().save(&last_path)?;
    }
    summary.steps = trainer.step;
    summary.skipped_steps = trainer.skipped_steps;
    Ok(summary)
}
