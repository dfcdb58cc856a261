//! The simplified variational objective and its gradient with respect to every parameter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{backward, forward, DropoutCtx, Gradients, ModelParams};
use crate::diffusion::{standard_normal, PairedExample};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{log_sum_exp, Matrix};
use crate::tokenizer::PAD;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_y: f64,
    pub mse_t1: f64,
    pub round_nll: f64,
    #[serde(rename = "reg_zT")]
    pub reg_zt: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The per-step diffusion term, `mse_y` or `mse_t1`.
    pub fn diffusion_term(&self) -> f64 {
        self.mse_y + self.mse_t1
    }

    pub fn is_finite(&self) -> bool {
        [self.mse_y, self.mse_t1, self.round_nll, self.reg_zt, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.mse_y += b.mse_y / n;
            out.mse_t1 += b.mse_t1 / n;
            out.round_nll += b.round_nll / n;
            out.reg_zt += b.reg_zt / n;
            out.total += b.total / n;
        }
        out
    }
}

/// Which positions enter attention and the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossOptions {
    /// Train target-side padding as content: pad rows are attended to and scored like any
    /// other target token. When false they are masked out of attention and every loss term.
    pub learn_padding: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { learn_padding: true }
    }
}

/// Gaussian draws for one example: `anchor` perturbs `Emb(w)` into `z_0`, `forward` noises the
/// target half into `z_t`. Both are `seq_len × d_emb`; source rows are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleNoise {
    pub anchor: Matrix,
    pub forward: Matrix,
}

impl ExampleNoise {
    pub fn sample<R: Rng + ?Sized>(seq_len: usize, d: usize, rng: &mut R) -> Self {
        ExampleNoise {
            anchor: standard_normal(seq_len, d, rng),
            forward: standard_normal(seq_len, d, rng),
        }
    }

    pub fn zeros(seq_len: usize, d: usize) -> Self {
        ExampleNoise {
            anchor: Matrix::zeros(seq_len, d),
            forward: Matrix::zeros(seq_len, d),
        }
    }
}

/// One example of a training batch.
pub struct LossItem<'a> {
    pub example: &'a PairedExample,
    pub t: usize,
    /// Importance weight multiplying this example's total.
    pub weight: f64,
    pub noise: &'a ExampleNoise,
}

/// Evaluates the objective on a batch. With `with_grads`, also returns the gradient of
/// `(1/B)·Σ weight_i·total_i`.
pub fn batch_loss(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    items: &[LossItem<'_>],
    opts: LossOptions,
    dropout: Option<DropoutCtx<'_>>,
    with_grads: bool,
) -> Result<(Vec<LossBreakdown>, Option<Gradients>)> {
    let cfg = &params.config;
    let d = cfg.d_emb;
    let batch = items.len();
    if batch == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let seq_len = items[0].example.seq_len();
    if items.iter().any(|it| it.example.seq_len() != seq_len) {
        return Err(Error::Config("batch mixes layout lengths".into()));
    }
    let table = &params.embedding;
    let src_table = params.source_table();
    let frozen = params.frozen_source.is_some();
    let ab_final = schedule.alpha_bar(schedule.steps());
    let beta0_std = schedule.beta0().sqrt();

    // assemble z_0 target rows, z_t and the attention mask
    let n = batch * seq_len;
    let mut y0 = Matrix::zeros(n, d);
    let mut zt = Matrix::zeros(n, d);
    let mut mask = vec![false; n];
    let mut ts = Vec::with_capacity(batch);
    for (b, it) in items.iter().enumerate() {
        let ex = it.example;
        if !(1..=schedule.steps()).contains(&it.t) {
            return Err(Error::Config(format!("timestep {} out of range", it.t)));
        }
        ts.push(it.t);
        let ab = schedule.alpha_bar(it.t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (r, &id) in ex.ids.iter().enumerate() {
            let row = b * seq_len + r;
            if !opts.learn_padding && id == PAD {
                mask[row] = true;
            }
            if r < ex.boundary {
                zt.row_mut(row).copy_from_slice(src_table.row(id));
            } else {
                let e = table.row(id);
                let a = it.noise.anchor.row(r);
                let f = it.noise.forward.row(r);
                let y = y0.row_mut(row);
                for j in 0..d {
                    y[j] = e[j] + beta0_std * a[j];
                }
                let y = y0.row(row).to_vec();
                let z = zt.row_mut(row);
                for j in 0..d {
                    z[j] = sa * y[j] + sb * f[j];
                }
            }
        }
    }

    let (pred, cache) = forward(params, &zt, seq_len, &ts, &mask, dropout)?;

    let mut out = Vec::with_capacity(batch);
    let mut d_pred = Matrix::zeros(n, d);
    let mut d_y0 = Matrix::zeros(n, d);
    let mut grads = with_grads.then(|| Gradients::zeros_like(params));
    let mut probs = vec![0.0; table.vocab_size()];

    for (b, it) in items.iter().enumerate() {
        let ex = it.example;
        let scale = it.weight / batch as f64;
        let counted = |id: u32| opts.learn_padding || id != PAD;
        let n_y = ex.ids[ex.boundary..].iter().filter(|&&id| counted(id)).count().max(1) as f64;
        let n_round = ex.ids.iter().filter(|&&id| counted(id)).count().max(1) as f64;
        let mut lb = LossBreakdown::default();

        for (r, &id) in ex.ids.iter().enumerate() {
            if !counted(id) {
                continue;
            }
            let row = b * seq_len + r;
            let zhat = pred.row(row);

            if r >= ex.boundary {
                // diffusion term against y_0 (t ≥ 2) or the clean embedding (t = 1)
                let target: Vec<f64> = if it.t >= 2 {
                    y0.row(row).to_vec()
                } else {
                    table.row(id).to_vec()
                };
                let sq: f64 = zhat.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
                if it.t >= 2 {
                    lb.mse_y += sq / n_y;
                } else {
                    lb.mse_t1 += sq / n_y;
                }
                let y = y0.row(row);
                lb.reg_zt += ab_final * y.iter().map(|v| v * v).sum::<f64>() / n_y;

                if let Some(g) = grads.as_mut() {
                    let k = 2.0 * scale / n_y;
                    for j in 0..d {
                        let diff = k * (zhat[j] - target[j]);
                        d_pred.data[row * d + j] += diff;
                        if it.t >= 2 {
                            d_y0.data[row * d + j] -= diff;
                        } else {
                            g.embedding.data[id as usize * d + j] -= diff;
                        }
                        d_y0.data[row * d + j] += k * ab_final * y[j];
                    }
                }
            }

            // rounding term on the latent z_0 (not the prediction): softmax over −‖z_0 − e_v‖².
            // Scoring ẑ_0 instead gives no push apart to tokens the model cannot tell apart,
            // since their logits tie at the mean prediction.
            let is_src = r < ex.boundary;
            let round_table = if is_src { src_table } else { table };
            let z0: &[f64] = if is_src { src_table.row(id) } else { y0.row(row) };
            for (v, p) in probs.iter_mut().enumerate() {
                let e = round_table.row(v as u32);
                *p = -z0.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            let lse = log_sum_exp(&probs);
            lb.round_nll += (lse - probs[id as usize]) / n_round;
            if let Some(g) = grads.as_mut() {
                let trainable = !is_src || !frozen;
                if !trainable {
                    continue;
                }
                for (v, p) in probs.iter_mut().enumerate() {
                    *p = (*p - lse).exp();
                    let dlogit = (*p - if v as u32 == id { 1.0 } else { 0.0 }) * scale / n_round;
                    if dlogit == 0.0 {
                        continue;
                    }
                    let e = round_table.row(v as u32);
                    for j in 0..d {
                        let diff = 2.0 * dlogit * (z0[j] - e[j]);
                        if is_src {
                            g.embedding.data[id as usize * d + j] -= diff;
                        } else {
                            d_y0.data[row * d + j] -= diff;
                        }
                        g.embedding.data[v * d + j] += diff;
                    }
                }
            }
        }
        lb.total = lb.mse_y + lb.mse_t1 + lb.round_nll + lb.reg_zt;
        if !lb.is_finite() {
            return Err(Error::NonFinite {
                tensor: format!("loss {lb:?}"),
            });
        }
        out.push(lb);
    }

    let Some(mut g) = grads else {
        return Ok((out, None));
    };
    let (g_net, dz) = backward(params, &cache, &d_pred)?;
    g.weights = g_net.weights;
    for (b, it) in items.iter().enumerate() {
        let ex = it.example;
        let sa = schedule.alpha_bar(it.t).sqrt();
        for (r, &id) in ex.ids.iter().enumerate() {
            let row = b * seq_len + r;
            let dst = &mut g.embedding.data[id as usize * d..(id as usize + 1) * d];
            if r < ex.boundary {
                if !frozen {
                    dst.iter_mut().zip(dz.row(row)).for_each(|(a, b)| *a += b);
                }
            } else {
                for j in 0..d {
                    dst[j] += sa * dz.get(row, j) + d_y0.get(row, j);
                }
            }
        }
    }
    Ok((out, Some(g)))
}

/// Loss of a single example at step `t`, drawing its noise from `rng`.
pub fn compute_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    example: &PairedExample,
    t: usize,
    opts: LossOptions,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let noise = ExampleNoise::sample(example.seq_len(), params.config.d_emb, rng);
    let item = LossItem {
        example,
        t,
        weight: 1.0,
        noise: &noise,
    };
    let (mut out, _) = batch_loss(params, schedule, &[item], opts, None, false)?;
    Ok(out.remove(0))
}
