//! Anchored reverse-process sampling, candidate generation and minimum-Bayes-risk selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{anchor_in_place, posterior_mean, source_layout, standard_normal, LatentState};
use crate::error::{Error, Result};
use crate::metrics::bleu;
use crate::schedule::NoiseSchedule;
use crate::tensor::Matrix;
use crate::tokenizer::{is_special, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Inference steps `K ≤ T`.
    pub steps: usize,
    /// Snap target rows of `ẑ_0` to their nearest embedding at every step.
    pub clamp: bool,
    pub candidates: usize,
    pub seed: u64,
}

impl SampleConfig {
    pub fn validate(&self, trained_steps: usize) -> Result<()> {
        if self.steps < 2 || self.steps > trained_steps {
            return Err(Error::Config(format!(
                "sampling steps must be in 2..={trained_steps}, got {}",
                self.steps
            )));
        }
        if self.candidates == 0 {
            return Err(Error::Config("need at least one candidate".into()));
        }
        Ok(())
    }

    /// The schedule sampling runs on: `full` itself, or its respacing to `steps`.
    pub fn schedule(&self, full: &NoiseSchedule) -> Result<NoiseSchedule> {
        self.validate(full.steps())?;
        if self.steps == full.steps() {
            Ok(full.clone())
        } else {
            full.respace(self.steps)
        }
    }
}

/// One step `z_t → z_{t−1}` for a batch of chains sharing a layout length.
///
/// `noise[i]` is the Gaussian draw for chain `i` (ignored at `t = 1`, which emits the mean).
/// The source rows of the result are reset to `x0_rows[i]`.
pub fn reverse_step_with_noise<D: Denoiser + ?Sized>(
    model: &D,
    states: &mut [LatentState],
    schedule: &NoiseSchedule,
    x0_rows: &[Matrix],
    noise: &[Matrix],
    clamp: bool,
) -> Result<()> {
    let Some(first) = states.first() else {
        return Ok(());
    };
    let t = first.t;
    let seq_len = first.z.rows;
    let d = first.z.cols;
    if t == 0 || t > schedule.steps() {
        return Err(Error::Config(format!("reverse step from t = {t}")));
    }
    if states.iter().any(|s| s.t != t || s.z.shape() != (seq_len, d)) {
        return Err(Error::Config("chains in a batch must share t and shape".into()));
    }
    let mut z = Matrix::zeros(states.len() * seq_len, d);
    let mut mask = Vec::with_capacity(states.len() * seq_len);
    for (i, s) in states.iter().enumerate() {
        z.data[i * seq_len * d..(i + 1) * seq_len * d].copy_from_slice(&s.z.data);
        mask.extend_from_slice(&s.pad_mask);
    }
    let ts = vec![schedule.timestep(t); states.len()];
    let pred = model.predict(&z, seq_len, &ts, &mask);
    let post = schedule.posterior(t);
    for (i, s) in states.iter_mut().enumerate() {
        let mut z0_hat = Matrix::from_vec(seq_len, d, pred.data[i * seq_len * d..(i + 1) * seq_len * d].to_vec());
        if clamp {
            let table = model.embedding();
            for r in s.boundary..seq_len {
                let id = table.nearest(z0_hat.row(r));
                z0_hat.row_mut(r).copy_from_slice(table.row(id));
            }
        }
        let mut next = if t == 1 {
            z0_hat
        } else {
            let mut mu = posterior_mean(&s.z, &z0_hat, t, schedule);
            let sd = post.variance.sqrt();
            let start = s.boundary * d;
            for (m, e) in mu.data[start..].iter_mut().zip(&noise[i].data[start..]) {
                *m += sd * e;
            }
            mu
        };
        anchor_in_place(&mut next, s.boundary, &x0_rows[i])?;
        s.z = next;
        s.t = t - 1;
    }
    Ok(())
}

/// Single-chain reverse step drawing its noise from `rng`.
pub fn reverse_step<D: Denoiser + ?Sized>(
    model: &D,
    state: &LatentState,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    x0_rows: &Matrix,
    clamp: bool,
) -> Result<LatentState> {
    let noise = standard_normal(state.z.rows, state.z.cols, rng);
    let mut states = [state.clone()];
    reverse_step_with_noise(model, &mut states, schedule, std::slice::from_ref(x0_rows), &[noise], clamp)?;
    let [out] = states;
    Ok(out)
}

/// One chain to run: a source and the seed of its noise stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainRequest {
    pub src_ids: Vec<u32>,
    pub seed: u64,
}

/// Chains stepped together in one denoiser call.
pub const GENERATE_CHUNK: usize = 256;

/// Runs every chain from `y_T ~ N(0, I)` down to `z_0` and returns the decoded targets.
///
/// Each chain draws from its own `ChaCha8Rng` seeded with its `seed`, so results do not depend
/// on how chains are batched.
pub fn generate_batch<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    requests: &[ChainRequest],
    clamp: bool,
) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(GENERATE_CHUNK) {
        out.extend(generate_chunk(model, schedule, chunk, clamp)?);
    }
    Ok(out)
}

fn generate_chunk<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    requests: &[ChainRequest],
    clamp: bool,
) -> Result<Vec<Vec<u32>>> {
    let seq_len = model.max_len();
    let d = model.embedding().dim();
    let mut rngs = Vec::with_capacity(requests.len());
    let mut x0 = Vec::with_capacity(requests.len());
    let mut states = Vec::with_capacity(requests.len());
    for req in requests {
        let layout = source_layout(&req.src_ids, seq_len)?;
        if let Some(&bad) = layout.iter().find(|&&id| id as usize >= model.embedding().vocab_size()) {
            return Err(Error::Data(format!("token id {bad} outside the model vocab")));
        }
        let boundary = layout.len();
        let x = model.source_embedding().embed(&layout);
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let mut z = standard_normal(seq_len, d, &mut rng);
        anchor_in_place(&mut z, boundary, &x)?;
        states.push(LatentState {
            z,
            t: schedule.steps(),
            boundary,
            pad_mask: vec![false; seq_len],
        });
        x0.push(x);
        rngs.push(rng);
    }
    for _ in 0..schedule.steps() {
        let noise: Vec<Matrix> = if states[0].t > 1 {
            rngs.iter_mut().map(|r| standard_normal(seq_len, d, r)).collect()
        } else {
            vec![Matrix::zeros(seq_len, d); states.len()]
        };
        reverse_step_with_noise(model, &mut states, schedule, &x0, &noise, clamp)?;
    }
    Ok(states
        .iter()
        .map(|s| finish_tokens(&model.embedding().decode_tokens(&s.y_rows())))
        .collect())
}

/// Cuts at the first EOS and drops special tokens.
pub fn finish_tokens(ids: &[u32]) -> Vec<u32> {
    ids.iter()
        .take_while(|&&id| id != EOS)
        .copied()
        .filter(|&id| !is_special(id))
        .collect()
}

/// Decodes one target for `src_ids` with the given seed.
pub fn generate<D: Denoiser + ?Sized>(
    model: &D,
    src_ids: &[u32],
    schedule: &NoiseSchedule,
    clamp: bool,
    seed: u64,
) -> Result<Vec<u32>> {
    let req = ChainRequest {
        src_ids: src_ids.to_vec(),
        seed,
    };
    Ok(generate_batch(model, schedule, &[req], clamp)?.remove(0))
}

/// `|S|` candidates per source, candidate `c` seeded with `seed + c`.
pub fn generate_candidates<D: Denoiser + ?Sized>(
    model: &D,
    full_schedule: &NoiseSchedule,
    sources: &[Vec<u32>],
    cfg: &SampleConfig,
) -> Result<Vec<Vec<Vec<u32>>>> {
    let schedule = cfg.schedule(full_schedule)?;
    let requests: Vec<ChainRequest> = sources
        .iter()
        .flat_map(|src| {
            (0..cfg.candidates).map(move |c| ChainRequest {
                src_ids: src.clone(),
                seed: cfg.seed.wrapping_add(c as u64),
            })
        })
        .collect();
    let flat = generate_batch(model, &schedule, &requests, cfg.clamp)?;
    Ok(flat.chunks(cfg.candidates).map(|c| c.to_vec()).collect())
}

/// Picks the candidate with the highest mean BLEU against the others (lowest expected risk
/// under negative BLEU). `utility[i][j] = BLEU(c_i, {c_j})`, with a zero diagonal. Ties go to
/// the lowest index; a single candidate yields index 0 and an empty matrix.
pub fn mbr_select<T: Eq + std::hash::Hash, C: AsRef<[T]>>(candidates: &[C]) -> Result<(usize, Matrix)> {
    match candidates.len() {
        0 => return Err(Error::Config("MBR selection over an empty candidate set".into())),
        1 => return Ok((0, Matrix::zeros(0, 0))),
        _ => {}
    }
    let n = candidates.len();
    let mut utility = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                utility.data[i * n + j] = bleu(candidates[i].as_ref(), &[candidates[j].as_ref()]);
            }
        }
    }
    Ok((select_from_utility(&utility), utility))
}

/// Index of the row with the largest off-diagonal mean; lowest index on ties.
pub fn select_from_utility(utility: &Matrix) -> usize {
    let n = utility.rows;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..n {
        let score: f64 = (0..n).filter(|&j| j != i).map(|j| utility.get(i, j)).sum::<f64>() / (n - 1).max(1) as f64;
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}
