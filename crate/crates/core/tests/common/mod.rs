#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqdiff::denoiser::{init_params, ModelConfig, ModelParams};
use seqdiff::diffusion::PairedExample;
use seqdiff::schedule::{build_sqrt_schedule, NoiseSchedule};
use seqdiff::training::{batch_loss, ExampleNoise, LossItem, LossOptions};

/// The small model used for finite-difference checks.
pub fn gradcheck_config(freeze: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_emb: 8,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_len: 10,
        dropout: 0.0,
        freeze_source_embedding: freeze,
    }
}

/// Central-difference formula: the classic two-point quotient (error O(h²)) or the five-point
/// stencil (error O(h⁴)).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    TwoPoint,
    FivePoint,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares the analytic gradient of the batch objective with central differences over every
/// trainable scalar. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(freeze: bool, learn_padding: bool, stencil: Stencil, h: f64, floor: f64) -> GradCheck {
    let cfg = gradcheck_config(freeze);
    let mut params = init_params(&cfg, 11).unwrap();
    // push the weights away from their small init so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // a trained-scale embedding table instead of the tiny init
    for v in params.embedding.matrix.data.iter_mut() {
        *v += rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng);
    }
    let schedule = build_sqrt_schedule(50, 1e-4).unwrap();
    let examples = vec![
        PairedExample::new(vec![5, 6, 7], vec![8, 9], 10).unwrap(),
        PairedExample::new(vec![10, 11], vec![12, 13, 14, 15], 10).unwrap(),
        PairedExample::new(vec![16], vec![17, 18], 10).unwrap(),
    ];
    let ts = [1usize, 17, 50];
    let weights = [1.0, 0.7, 1.9];
    let noises: Vec<ExampleNoise> = examples
        .iter()
        .map(|e| ExampleNoise::sample(e.seq_len(), cfg.d_emb, &mut rng))
        .collect();
    let opts = LossOptions { learn_padding };
    let objective = |p: &ModelParams| -> f64 {
        let items = items(&examples, &ts, &weights, &noises);
        let (losses, _) = batch_loss(p, &schedule, &items, opts, None, false).unwrap();
        losses
            .iter()
            .zip(&weights)
            .map(|(l, w)| w * l.total)
            .sum::<f64>()
            / losses.len() as f64
    };
    let (_, grads) = batch_loss(&params, &schedule, &items(&examples, &ts, &weights, &noises), opts, None, true).unwrap();
    let grads = grads.unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().map(|m| m.data.clone()).collect();

    let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.to_string()).collect();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        for i in 0..len {
            let orig = params.named_tensors()[ti].1.data[i];
            let mut at = |x: f64| {
                params.named_tensors_mut()[ti].1.data[i] = x;
                objective(&params)
            };
            let numeric = match stencil {
                Stencil::TwoPoint => (at(orig + h) - at(orig - h)) / (2.0 * h),
                Stencil::FivePoint => {
                    (-at(orig + 2.0 * h) + 8.0 * at(orig + h) - 8.0 * at(orig - h) + at(orig - 2.0 * h)) / (12.0 * h)
                }
            };
            params.named_tensors_mut()[ti].1.data[i] = orig;
            let a = analytic[ti][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
            out.checked += 1;
        }
    }
    out
}

fn items<'a>(
    examples: &'a [PairedExample],
    ts: &[usize],
    weights: &[f64],
    noises: &'a [ExampleNoise],
) -> Vec<LossItem<'a>> {
    examples
        .iter()
        .zip(ts)
        .zip(weights)
        .zip(noises)
        .map(|(((example, &t), &weight), noise)| LossItem {
            example,
            t,
            weight,
            noise,
        })
        .collect()
}

pub fn schedule(steps: usize) -> NoiseSchedule {
    build_sqrt_schedule(steps, 1e-4).unwrap()
}
