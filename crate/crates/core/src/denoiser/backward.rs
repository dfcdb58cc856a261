use super::forward::{gelu_grad, sigmoid, ForwardCache, LayerNormCache};
use super::{slot, Gradients, ModelParams};
use crate::error::Result;
use crate::tensor::{linear_backward, Matrix};

fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    gain: &[f64],
    d: usize,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = cache.rstd.len();
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Splits the gradient buffer so one weight can be read while its gradient slots are written.
fn grad_pair(grads: &mut [Matrix], w: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(w < b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[w].data, &mut hi[0].data)
}

/// Reverse-mode pass through the recorded forward.
///
/// Given `∂L/∂ẑ_0` returns gradients for every trainable tensor (the embedding block is left
/// at zero; the denoiser never reads the table directly) and `∂L/∂z_t`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, d_out: &Matrix) -> Result<(Gradients, Matrix)> {
    let cfg = &params.config;
    let n = cache.batch * cache.seq_len;
    let (batch, seq_len) = (cache.batch, cache.seq_len);
    let dm = cfg.d_model;
    let dh = cfg.head_dim();
    let heads = cfg.n_heads;
    let dff = cfg.d_ff;
    let nl = cfg.n_layers;
    assert_eq!(d_out.shape(), (n, cfg.d_emb), "output gradient shape");

    let mut grads = Gradients::zeros_like(params);
    let g = &mut grads.weights;

    let (dw, db) = grad_pair(g, slot::tail(nl, slot::OUT_W), slot::tail(nl, slot::OUT_B));
    let dhf = linear_backward(
        &cache.hf,
        n,
        &params.w(slot::tail(nl, slot::OUT_W)).data,
        &d_out.data,
        dm,
        cfg.d_emb,
        dw,
        Some(db),
    );
    let (dgain, dbias) = grad_pair(g, slot::tail(nl, slot::LNF_G), slot::tail(nl, slot::LNF_B));
    let mut dh_res = layer_norm_backward(
        &dhf,
        &cache.lnf,
        &params.w(slot::tail(nl, slot::LNF_G)).data,
        dm,
        dgain,
        dbias,
    );

    let scale = 1.0 / (dh as f64).sqrt();
    for layer in (0..nl).rev() {
        let lc = &cache.layers[layer];
        let w = |k: usize| &params.w(slot::layer(layer, k)).data;
        let gi = |k: usize| slot::layer(layer, k);

        // feed-forward branch
        let mut df2 = dh_res.clone();
        if let Some(m) = &lc.drop2 {
            df2.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let (dw, db) = grad_pair(g, gi(slot::FF2_W), gi(slot::FF2_B));
        let mut dgelu = linear_backward(&lc.g, n, w(slot::FF2_W), &df2, dff, dm, dw, Some(db));
        dgelu.iter_mut().zip(&lc.f1).for_each(|(d, &x)| *d *= gelu_grad(x));
        let (dw, db) = grad_pair(g, gi(slot::FF1_W), gi(slot::FF1_B));
        let dc = linear_backward(&lc.c, n, w(slot::FF1_W), &dgelu, dm, dff, dw, Some(db));
        let (dgain, dbias) = grad_pair(g, gi(slot::LN2_G), gi(slot::LN2_B));
        let dx = layer_norm_backward(&dc, &lc.ln2, w(slot::LN2_G), dm, dgain, dbias);
        dh_res.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);

        // attention branch
        let mut dout = dh_res.clone();
        if let Some(m) = &lc.drop1 {
            dout.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let (dw, db) = grad_pair(g, gi(slot::ATTN_OUT_W), gi(slot::ATTN_OUT_B));
        let dctx = linear_backward(&lc.ctx, n, w(slot::ATTN_OUT_W), &dout, dm, dm, dw, Some(db));

        let mut dqkv = vec![0.0; n * 3 * dm];
        let mut dp = vec![0.0; seq_len];
        for b in 0..batch {
            for hd in 0..heads {
                let base = (b * heads + hd) * seq_len * seq_len;
                for qi in 0..seq_len {
                    let p = &lc.probs[base + qi * seq_len..base + (qi + 1) * seq_len];
                    let dctx_row = &dctx[(b * seq_len + qi) * dm + hd * dh..][..dh];
                    // dP = dctx · Vᵀ ; dV += Pᵀ · dctx
                    let mut dot = 0.0;
                    for ki in 0..seq_len {
                        if p[ki] == 0.0 {
                            dp[ki] = 0.0;
                            continue;
                        }
                        let vidx = (b * seq_len + ki) * 3 * dm + 2 * dm + hd * dh;
                        let vrow = &lc.qkv[vidx..vidx + dh];
                        dp[ki] = dctx_row.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        dot += dp[ki] * p[ki];
                        let dv = &mut dqkv[vidx..vidx + dh];
                        for (x, y) in dv.iter_mut().zip(dctx_row) {
                            *x += p[ki] * y;
                        }
                    }
                    let qidx = (b * seq_len + qi) * 3 * dm + hd * dh;
                    for ki in 0..seq_len {
                        if p[ki] == 0.0 {
                            continue;
                        }
                        let ds = p[ki] * (dp[ki] - dot) * scale;
                        let kidx = (b * seq_len + ki) * 3 * dm + dm + hd * dh;
                        for j in 0..dh {
                            dqkv[qidx + j] += ds * lc.qkv[kidx + j];
                            dqkv[kidx + j] += ds * lc.qkv[qidx + j];
                        }
                    }
                }
            }
        }
        let (dw, db) = grad_pair(g, gi(slot::QKV_W), gi(slot::QKV_B));
        let da = linear_backward(&lc.a, n, w(slot::QKV_W), &dqkv, dm, 3 * dm, dw, Some(db));
        let (dgain, dbias) = grad_pair(g, gi(slot::LN1_G), gi(slot::LN1_B));
        let dx = layer_norm_backward(&da, &lc.ln1, w(slot::LN1_G), dm, dgain, dbias);
        dh_res.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }

    // h = in_proj(z) + pos[l] + temb[b]
    let dpos = &mut g[slot::POS].data;
    let mut dtemb = vec![0.0; batch * dm];
    for b in 0..batch {
        for l in 0..seq_len {
            let row = &dh_res[(b * seq_len + l) * dm..(b * seq_len + l + 1) * dm];
            for j in 0..dm {
                dpos[l * dm + j] += row[j];
                dtemb[b * dm + j] += row[j];
            }
        }
    }
    let (dw, db) = grad_pair(g, slot::IN_W, slot::IN_B);
    let dz = linear_backward(&cache.z, n, &params.w(slot::IN_W).data, &dh_res, cfg.d_emb, dm, dw, Some(db));

    let (dw, db) = grad_pair(g, slot::T2_W, slot::T2_B);
    let mut da1 = linear_backward(&cache.a1, batch, &params.w(slot::T2_W).data, &dtemb, dm, dm, dw, Some(db));
    da1.iter_mut().zip(&cache.t1).for_each(|(d, &x)| {
        let s = sigmoid(x);
        *d *= s * (1.0 + x * (1.0 - s));
    });
    let (dw, db) = grad_pair(g, slot::T1_W, slot::T1_B);
    linear_backward(&cache.sin_emb, batch, &params.w(slot::T1_W).data, &da1, dm, dm, dw, Some(db));

    // Non-finite gradients are passed through; the optimizer decides to skip the step.
    let dz = Matrix::from_vec(n, cfg.d_emb, dz);
    Ok((grads, dz))
}
