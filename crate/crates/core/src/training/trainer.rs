//! The minibatch loop: shuffled epochs, per-example timesteps, checkpointing and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::TrainConfig;
use super::importance::{entropy, sample_from, sample_uniform, ImportanceState};
use super::loss::{batch_loss, ExampleNoise, LossBreakdown, LossItem, LossOptions};
use super::optim::{optimizer_step, AdamHyper, AdamState};
use crate::denoiser::{init_params, DropoutCtx, Gradients, ModelParams};
use crate::diffusion::PairedExample;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tokenizer::Vocab;

const STREAM_STEP: u64 = 1;
const STREAM_EPOCH: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

/// SplitMix64-style mixing of a seed with stream coordinates.
pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, stream, 0), a, b))
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub p_t_entropy: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub applied: bool,
}

#[derive(Serialize)]
struct EvalLine<'a> {
    step: u64,
    split: &'a str,
    #[serde(flatten)]
    loss: LossBreakdown,
}

pub struct Trainer {
    config: TrainConfig,
    schedule: NoiseSchedule,
    params: ModelParams,
    opt: AdamState,
    importance: ImportanceState,
    vocab_text: String,
    vocab_hash: String,
    train: Vec<PairedExample>,
    valid: Vec<PairedExample>,
    step: u64,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

fn check_examples(examples: &[PairedExample], seq_len: usize, vocab_size: usize, what: &str) -> Result<()> {
    for ex in examples {
        if ex.seq_len() != seq_len {
            return Err(Error::Data(format!(
                "{what} example has layout length {} but max_len is {seq_len}",
                ex.seq_len()
            )));
        }
        if ex.ids.iter().any(|&id| id as usize >= vocab_size) {
            return Err(Error::Data(format!("{what} example has ids outside the vocab")));
        }
    }
    Ok(())
}

impl Trainer {
    /// Fresh run; parameters are initialized from `config.seed`.
    pub fn new(config: TrainConfig, vocab: &Vocab, train: Vec<PairedExample>, valid: Vec<PairedExample>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        check_examples(&train, config.max_len, vocab.len(), "training")?;
        check_examples(&valid, config.max_len, vocab.len(), "validation")?;
        let schedule = config.schedule_params().build()?;
        let params = init_params(&config.model_config(vocab.len()), config.seed)?;
        let opt = AdamState::new(&params);
        Ok(Trainer {
            importance: ImportanceState::new(schedule.steps()),
            schedule,
            params,
            opt,
            vocab_text: vocab.to_text(),
            vocab_hash: vocab.hash(),
            train,
            valid,
            step: 0,
            epoch_cache: None,
            config,
        })
    }

    /// Continues the run stored in `ckpt`, which must carry its training config and optimizer.
    pub fn resume(ckpt: Checkpoint, train: Vec<PairedExample>, valid: Vec<PairedExample>) -> Result<Self> {
        let Checkpoint {
            meta,
            params,
            optimizer,
        } = ckpt;
        let config = meta
            .train
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training config to resume".into()))?;
        let opt = optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let vocab_text = meta
            .vocab
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocab".into()))?;
        if train.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        check_examples(&train, config.max_len, params.config.vocab_size, "training")?;
        check_examples(&valid, config.max_len, params.config.vocab_size, "validation")?;
        let schedule = meta.schedule.build()?;
        let importance = meta
            .importance
            .unwrap_or_else(|| ImportanceState::new(schedule.steps()));
        if importance.steps() != schedule.steps() {
            return Err(Error::Checkpoint("importance state does not match the schedule".into()));
        }
        Ok(Trainer {
            config,
            schedule,
            params,
            opt,
            importance,
            vocab_text,
            vocab_hash: meta.vocab_hash,
            train,
            valid,
            step: meta.step,
            epoch_cache: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn importance(&self) -> &ImportanceState {
        &self.importance
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: self.params.config,
                schedule: self.config.schedule_params(),
                vocab_hash: self.vocab_hash.clone(),
                vocab: Some(self.vocab_text.clone()),
                train: Some(self.config.clone()),
                step: self.step,
                adam_step: self.opt.step,
                importance: Some(self.importance.clone()),
            },
            params: self.params.clone(),
            optimizer: Some(self.opt.clone()),
        }
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            learn_padding: self.config.learn_padding,
        }
    }

    /// Dataset index of the `i`-th example of the current step.
    fn example_index(&mut self, i: usize) -> usize {
        let n = self.train.len() as u64;
        let global = self.step * self.config.batch_size as u64 + i as u64;
        let epoch = global / n;
        if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.train.len()).collect();
            perm.shuffle(&mut rng_for(self.config.seed, STREAM_EPOCH, epoch, 0));
            self.epoch_cache = Some((epoch, perm));
        }
        self.epoch_cache.as_ref().unwrap().1[(global % n) as usize]
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let bs = self.config.batch_size;
        let d = self.params.config.d_emb;
        let probs = self.importance.probs();
        let mut picks = Vec::with_capacity(bs);
        for i in 0..bs {
            let idx = self.example_index(i);
            let mut rng = rng_for(self.config.seed, STREAM_STEP, self.step, i as u64);
            let (t, weight) = if self.config.importance_sampling {
                sample_from(&probs, &mut rng)
            } else {
                sample_uniform(self.schedule.steps(), &mut rng)
            };
            let noise = ExampleNoise::sample(self.train[idx].seq_len(), d, &mut rng);
            picks.push((idx, t, weight, noise));
        }
        let items: Vec<LossItem<'_>> = picks
            .iter()
            .map(|(idx, t, weight, noise)| LossItem {
                example: &self.train[*idx],
                t: *t,
                weight: *weight,
                noise,
            })
            .collect();

        let workers = self.config.workers.clamp(1, bs);
        let chunk = bs.div_ceil(workers);
        let run_chunk = |c: usize, part: &[LossItem<'_>]| -> Result<(Vec<LossBreakdown>, Gradients)> {
            let mut drng = rng_for(self.config.seed, STREAM_DROPOUT, self.step, c as u64);
            let dropout = (self.config.dropout > 0.0).then(|| DropoutCtx {
                rate: self.config.dropout,
                rng: &mut drng,
            });
            let (losses, grads) =
                batch_loss(&self.params, &self.schedule, part, self.loss_options(), dropout, true)?;
            let mut g = grads.expect("gradients requested");
            g.scale(part.len() as f64 / bs as f64);
            Ok((losses, g))
        };
        let results: Vec<Result<(Vec<LossBreakdown>, Gradients)>> = if workers == 1 {
            vec![run_chunk(0, &items)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = items
                    .chunks(chunk)
                    .enumerate()
                    .map(|(c, part)| s.spawn(move || run_chunk(c, part)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("training worker panicked"))
                    .collect()
            })
        };
        let mut losses = Vec::with_capacity(bs);
        let mut grads: Option<Gradients> = None;
        for r in results {
            let (l, g) = r?;
            losses.extend(l);
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        let grads = grads.expect("at least one chunk");

        for ((_, t, _, _), l) in picks.iter().zip(&losses) {
            self.importance.update(*t, l.diffusion_term());
        }
        let lr = self.config.lr_at(self.step);
        let hyper = AdamHyper {
            clip_norm: self.config.clip_norm,
            ..AdamHyper::default()
        };
        let outcome = optimizer_step(&mut self.params, &grads, &mut self.opt, &hyper, lr);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss: LossBreakdown::mean(&losses),
            p_t_entropy: entropy(&probs),
            lr,
            grad_norm: outcome.grad_norm,
            applied: outcome.applied,
        })
    }

    /// Mean loss over `examples` at fixed, seed-derived timesteps and noise. Independent of the
    /// training position, so successive evaluations are comparable.
    pub fn evaluate(&self, examples: &[PairedExample]) -> Result<LossBreakdown> {
        evaluate_loss(&self.params, &self.schedule, examples, self.loss_options(), self.config.seed, self.config.batch_size)
    }

    pub fn evaluate_valid(&self) -> Result<Option<LossBreakdown>> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        self.evaluate(&self.valid).map(Some)
    }

    /// Trains until `config.steps` optimizer steps have been taken, logging one JSON object per
    /// line to `log` and writing checkpoints into `out_dir`.
    pub fn run(&mut self, out_dir: Option<&Path>, mut log: Option<&mut dyn Write>) -> Result<Checkpoint> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.step < self.config.steps {
            let report = self.train_step()?;
            let s = report.step;
            if let Some(w) = log.as_deref_mut() {
                if s % self.config.log_every.max(1) == 0 || s == self.config.steps {
                    writeln!(w, "{}", serde_json::to_string(&report)?).map_err(|e| Error::io("metrics log", e))?;
                }
            }
            if s % self.config.log_every.max(1) == 0 {
                info!(
                    "step {s}: total {:.4} mse {:.4} round {:.4} lr {:.2e}",
                    report.loss.total,
                    report.loss.diffusion_term(),
                    report.loss.round_nll,
                    report.lr
                );
            }
            if !report.applied {
                warn!("step {s}: update skipped");
            }
            if self.config.eval_every > 0 && s % self.config.eval_every == 0 {
                if let Some(loss) = self.evaluate_valid()? {
                    info!("step {s}: held-out total {:.4}", loss.total);
                    if let Some(w) = log.as_deref_mut() {
                        let line = EvalLine {
                            step: s,
                            split: "valid",
                            loss,
                        };
                        writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io("metrics log", e))?;
                    }
                }
            }
            if let Some(dir) = out_dir {
                if self.config.checkpoint_every > 0 && s % self.config.checkpoint_every == 0 {
                    let ckpt = self.checkpoint();
                    ckpt.save(&dir.join(format!("step-{s}.ckpt")))?;
                    ckpt.save(&dir.join("last.ckpt"))?;
                }
            }
        }
        let ckpt = self.checkpoint();
        if let Some(dir) = out_dir {
            ckpt.save(&final_checkpoint_path(dir))?;
            ckpt.save(&dir.join("last.ckpt"))?;
        }
        Ok(ckpt)
    }
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.ckpt")
}

/// Seed-determined held-out loss: example `i` is scored at a uniformly drawn `t` with noise from
/// its own stream.
pub fn evaluate_loss(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    examples: &[PairedExample],
    opts: LossOptions,
    seed: u64,
    batch_size: usize,
) -> Result<LossBreakdown> {
    let d = params.config.d_emb;
    let drawn: Vec<(usize, ExampleNoise)> = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = rng_for(seed, STREAM_EVAL, i as u64, 0);
            let (t, _) = sample_uniform(schedule.steps(), &mut rng);
            (t, ExampleNoise::sample(ex.seq_len(), d, &mut rng))
        })
        .collect();
    let mut all = Vec::with_capacity(examples.len());
    let idx: Vec<usize> = (0..examples.len()).collect();
    for part in idx.chunks(batch_size.max(1)) {
        let items: Vec<LossItem<'_>> = part
            .iter()
            .map(|&i| LossItem {
                example: &examples[i],
                t: drawn[i].0,
                weight: 1.0,
                noise: &drawn[i].1,
            })
            .collect();
        all.extend(batch_loss(params, schedule, &items, opts, None, false)?.0);
    }
    Ok(LossBreakdown::mean(&all))
}
