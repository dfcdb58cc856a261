use super::{slot, timestep_embedding, DropoutCtx, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{linear, softmax_in_place, Matrix};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) struct LayerCache {
    pub ln1: LayerNormCache,
    pub a: Vec<f64>,
    pub qkv: Vec<f64>,
    /// Attention probabilities, `[batch][head][query][key]`.
    pub probs: Vec<f64>,
    pub ctx: Vec<f64>,
    pub drop1: Option<Vec<f64>>,
    pub ln2: LayerNormCache,
    pub c: Vec<f64>,
    pub f1: Vec<f64>,
    pub g: Vec<f64>,
    pub drop2: Option<Vec<f64>>,
}

/// Activations recorded by [`forward`] for the backward pass.
pub struct ForwardCache {
    pub(crate) batch: usize,
    pub(crate) seq_len: usize,
    pub(crate) z: Vec<f64>,
    pub(crate) sin_emb: Vec<f64>,
    pub(crate) t1: Vec<f64>,
    pub(crate) a1: Vec<f64>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) lnf: LayerNormCache,
    pub(crate) hf: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], n: usize, d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * gain[j] + bias[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Runs the denoiser on `ts.len()` sequences of `seq_len` rows stacked in `z`.
///
/// `pad_mask[i]` true removes row `i` from every attention key set. When `dropout` is given,
/// residual-branch dropout is applied with masks drawn from its RNG.
pub fn forward(
    params: &ModelParams,
    z: &Matrix,
    seq_len: usize,
    ts: &[usize],
    pad_mask: &[bool],
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<(Matrix, ForwardCache)> {
    let cfg = &params.config;
    let batch = ts.len();
    let n = batch * seq_len;
    if seq_len > cfg.max_len {
        return Err(Error::Config(format!(
            "sequence length {seq_len} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if z.rows != n || z.cols != cfg.d_emb {
        return Err(Error::Config(format!(
            "denoiser input has shape {:?}, expected ({n}, {})",
            z.shape(),
            cfg.d_emb
        )));
    }
    if pad_mask.len() != n {
        return Err(Error::Config(format!("pad mask has {} entries, expected {n}", pad_mask.len())));
    }
    let dm = cfg.d_model;
    let dh = cfg.head_dim();
    let heads = cfg.n_heads;
    let dff = cfg.d_ff;
    let dropout_on = dropout.as_ref().is_some_and(|d| d.rate > 0.0);

    let mut h = linear(
        &z.data,
        n,
        &params.w(slot::IN_W).data,
        Some(&params.w(slot::IN_B).data),
        cfg.d_emb,
        dm,
    );

    let sin_emb: Vec<f64> = ts.iter().flat_map(|&t| timestep_embedding(t, dm)).collect();
    let t1 = linear(
        &sin_emb,
        batch,
        &params.w(slot::T1_W).data,
        Some(&params.w(slot::T1_B).data),
        dm,
        dm,
    );
    let a1: Vec<f64> = t1.iter().map(|&x| x * sigmoid(x)).collect();
    let temb = linear(
        &a1,
        batch,
        &params.w(slot::T2_W).data,
        Some(&params.w(slot::T2_B).data),
        dm,
        dm,
    );
    let pos = &params.w(slot::POS).data;
    for b in 0..batch {
        for l in 0..seq_len {
            let row = &mut h[(b * seq_len + l) * dm..(b * seq_len + l + 1) * dm];
            for j in 0..dm {
                row[j] += pos[l * dm + j] + temb[b * dm + j];
            }
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let w = |k: usize| &params.w(slot::layer(layer, k)).data;
        let (a, ln1) = layer_norm(&h, n, dm, w(slot::LN1_G), w(slot::LN1_B));
        let qkv = linear(&a, n, w(slot::QKV_W), Some(w(slot::QKV_B)), dm, 3 * dm);

        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut ctx = vec![0.0; n * dm];
        for b in 0..batch {
            for hd in 0..heads {
                let base = (b * heads + hd) * seq_len * seq_len;
                for qi in 0..seq_len {
                    let qrow = &qkv[(b * seq_len + qi) * 3 * dm + hd * dh..][..dh];
                    let scores = &mut probs[base + qi * seq_len..base + (qi + 1) * seq_len];
                    for (ki, s) in scores.iter_mut().enumerate() {
                        if pad_mask[b * seq_len + ki] {
                            *s = f64::NEG_INFINITY;
                            continue;
                        }
                        let krow = &qkv[(b * seq_len + ki) * 3 * dm + dm + hd * dh..][..dh];
                        *s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    softmax_in_place(scores);
                    let out = &mut ctx[(b * seq_len + qi) * dm + hd * dh..][..dh];
                    for (ki, &p) in scores.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &qkv[(b * seq_len + ki) * 3 * dm + 2 * dm + hd * dh..][..dh];
                        for (o, v) in out.iter_mut().zip(vrow) {
                            *o += p * v;
                        }
                    }
                }
            }
        }

        let mut o = linear(&ctx, n, w(slot::ATTN_OUT_W), Some(w(slot::ATTN_OUT_B)), dm, dm);
        let drop1 = if dropout_on {
            let m = dropout.as_mut().unwrap().mask(n * dm);
            o.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
            Some(m)
        } else {
            None
        };
        h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);

        let (c, ln2) = layer_norm(&h, n, dm, w(slot::LN2_G), w(slot::LN2_B));
        let f1 = linear(&c, n, w(slot::FF1_W), Some(w(slot::FF1_B)), dm, dff);
        let g: Vec<f64> = f1.iter().map(|&x| gelu(x)).collect();
        let mut f2 = linear(&g, n, w(slot::FF2_W), Some(w(slot::FF2_B)), dff, dm);
        let drop2 = if dropout_on {
            let m = dropout.as_mut().unwrap().mask(n * dm);
            f2.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
            Some(m)
        } else {
            None
        };
        h.iter_mut().zip(&f2).for_each(|(x, y)| *x += y);

        layers.push(LayerCache {
            ln1,
            a,
            qkv,
            probs,
            ctx,
            drop1,
            ln2,
            c,
            f1,
            g,
            drop2,
        });
    }

    let nl = cfg.n_layers;
    let (hf, lnf) = layer_norm(
        &h,
        n,
        dm,
        &params.w(slot::tail(nl, slot::LNF_G)).data,
        &params.w(slot::tail(nl, slot::LNF_B)).data,
    );
    let out = linear(
        &hf,
        n,
        &params.w(slot::tail(nl, slot::OUT_W)).data,
        Some(&params.w(slot::tail(nl, slot::OUT_B)).data),
        dm,
        cfg.d_emb,
    );
    let out = Matrix::from_vec(n, cfg.d_emb, out);
    if !out.is_finite() {
        return Err(Error::NonFinite {
            tensor: "denoiser output".into(),
        });
    }
    let cache = ForwardCache {
        batch,
        seq_len,
        z: z.data.clone(),
        sin_emb,
        t1,
        a1,
        layers,
        lnf,
        hf,
    };
    Ok((out, cache))
}
