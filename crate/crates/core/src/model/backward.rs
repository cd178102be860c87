//! Hand-derived reverse pass through the decoder.
//!
//! Rounding to the half format is treated as identity for differentiation;
//! gradient tensors themselves are rounded wherever a forward intermediate
//! would be.

use super::forward::{forward_impl, gelu_grad, BlockCache, FloatKernel, LayerNormOutput, Mode};
use super::{ModelConfig, Parameters};
use crate::error::Result;
use crate::tensor::{emulate_half, matmul, HalfFormat, Tensor};

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    dst.data_mut().iter_mut().zip(src.data()).for_each(|(a, b)| *a += b);
}

fn column_sums(dy: &Tensor, fmt: HalfFormat) -> Tensor {
    let mut out = Tensor::zeros(1, dy.cols());
    for i in 0..dy.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(dy.row(i)) {
            *o += v;
        }
    }
    out.round_in_place(fmt);
    out
}

/// Gradients of `y = x W + b`; returns `dx` and accumulates `dW`, `db`.
fn linear_backward(
    dy: &Tensor,
    x: &Tensor,
    w: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
    fmt: HalfFormat,
) -> Result<Tensor> {
    accumulate(dw, &matmul(&x.transpose(), dy, fmt)?);
    accumulate(db, &column_sums(dy, fmt));
    matmul(dy, &w.transpose(), fmt)
}

fn layer_norm_backward(
    dout: &Tensor,
    ln: &LayerNormOutput,
    gain: &Tensor,
    dgain: &mut Tensor,
    dbias: &mut Tensor,
    fmt: HalfFormat,
) -> Tensor {
    let h = |v: f32| emulate_half(v, fmt);
    let (t, d) = dout.shape();
    let g: Vec<f32> = gain.data().iter().map(|&v| h(v)).collect();
    let mut dx = Tensor::zeros(t, d);
    let mut dg = vec![0.0f32; d];
    let mut dbv = vec![0.0f32; d];
    let mut dn = vec![0.0f32; d];
    for i in 0..t {
        let go = dout.row(i);
        let n = ln.normalized.row(i);
        let mut mean_dn = 0.0f32;
        let mut mean_dn_n = 0.0f32;
        for j in 0..d {
            dg[j] += go[j] * n[j];
            dbv[j] += go[j];
            dn[j] = h(go[j] * g[j]);
            mean_dn += dn[j];
            mean_dn_n += dn[j] * n[j];
        }
        mean_dn = h(mean_dn / d as f32);
        mean_dn_n = h(mean_dn_n / d as f32);
        let r = ln.rstd[i];
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = h(r * (dn[j] - mean_dn - n[j] * mean_dn_n));
        }
    }
    for ((a, b), (c, e)) in dgain.data_mut().iter_mut().zip(&dg).zip(dbias.data_mut().iter_mut().zip(&dbv)) {
        *a += h(*b);
        *c += h(*e);
    }
    dx
}

fn add_rounded(dst: &mut Tensor, src: &Tensor, fmt: HalfFormat) {
    dst.data_mut().iter_mut().zip(src.data()).for_each(|(a, &b)| *a = emulate_half(*a + b, fmt));
}

fn apply_mask(dy: &Tensor, mask: &Option<Vec<f32>>, fmt: HalfFormat) -> Tensor {
    match mask {
        Some(m) => {
            let mut out = dy.clone();
            out.data_mut().iter_mut().zip(m).for_each(|(v, &k)| *v = emulate_half(*v * k, fmt));
            out
        }
        None => dy.clone(),
    }
}

fn attention_backward(dattn: &Tensor, cache: &BlockCache, cfg: &ModelConfig, fmt: HalfFormat) -> Result<Tensor> {
    let (t, d, dh) = (cache.qkv.rows(), cfg.d_model, cfg.d_head());
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dqkv = Tensor::zeros(t, 3 * d);
    for head in 0..cfg.n_heads {
        let q = cache.qkv.column_slice(head * dh, dh);
        let k = cache.qkv.column_slice(d + head * dh, dh);
        let v = cache.qkv.column_slice(2 * d + head * dh, dh);
        let p = &cache.probs[head];
        let d_o = dattn.column_slice(head * dh, dh);
        let dp = matmul(&d_o, &v.transpose(), fmt)?;
        let dv = matmul(&p.transpose(), &d_o, fmt)?;
        let mut ds = Tensor::zeros(t, t);
        for i in 0..t {
            let (prow, dprow) = (p.row(i), dp.row(i));
            let dot: f32 = prow.iter().zip(dprow).map(|(a, b)| a * b).sum();
            for (j, out) in ds.row_mut(i).iter_mut().enumerate().take(i + 1) {
                let g = emulate_half(prow[j] * (dprow[j] - dot), fmt);
                *out = emulate_half(g * scale, fmt);
            }
        }
        let dq = matmul(&ds, &k, fmt)?;
        let dk = matmul(&ds.transpose(), &q, fmt)?;
        dqkv.set_column_slice(head * dh, &dq);
        dqkv.set_column_slice(d + head * dh, &dk);
        dqkv.set_column_slice(2 * d + head * dh, &dv);
    }
    Ok(dqkv)
}

/// Loss and parameter gradients of the mean NLL, accumulated into `grads`
/// after multiplying by `scale`.
///
/// Dropout masks come from `mode`, so the pass is paired with the forward
/// pass that used the same mode.
pub fn backward_into(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    targets: &[u32],
    mode: Mode,
    fmt: HalfFormat,
    scale: f32,
    grads: &mut Parameters,
) -> Result<f64> {
    let (out, cache) = forward_impl(params, cfg, tokens, mode, fmt, &FloatKernel { fmt }, false, true)?;
    let cache = cache.expect("cache requested");
    let logits = out.logits;
    let loss = super::nll_loss(&logits, targets)?;
    grads.check_matches(cfg)?;
    let ln_fmt = fmt.layernorm_format();
    let t = tokens.len();

    // d loss / d logits = (softmax - onehot) / t
    let mut dlogits = Tensor::zeros(t, cfg.vocab_size);
    let coef = scale / t as f32;
    for i in 0..t {
        let row = logits.row(i);
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let sum: f64 = row.iter().map(|&z| (z as f64 - m).exp()).sum();
        for (j, g) in dlogits.row_mut(i).iter_mut().enumerate() {
            let p = ((row[j] as f64 - m).exp() / sum) as f32;
            let y = if j == targets[i] as usize { 1.0 } else { 0.0 };
            *g = emulate_half((p - y) * coef, fmt);
        }
    }

    let lnf_in = cache.lnf.out.to_half(fmt);
    accumulate(&mut grads.output_embedding, &matmul(&lnf_in.transpose(), &dlogits, fmt)?);
    let dlnf = matmul(&dlogits, &params.output_embedding.transpose(), fmt)?;
    let mut dx = layer_norm_backward(
        &dlnf,
        &cache.lnf,
        &params.final_ln_gain,
        &mut grads.final_ln_gain,
        &mut grads.final_ln_bias,
        ln_fmt,
    );

    for (l, bc) in cache.blocks.iter().enumerate().rev() {
        let bp = &params.blocks[l];
        let gb = &mut grads.blocks[l];

        let ddown = apply_mask(&dx, &bc.mask2, fmt);
        let dact = linear_backward(&ddown, &bc.act, &bp.mlp_down_w, &mut gb.mlp_down_w, &mut gb.mlp_down_b, fmt)?;
        let mut dup = dact;
        dup.data_mut()
            .iter_mut()
            .zip(bc.up.data())
            .for_each(|(g, &u)| *g = emulate_half(*g * gelu_grad(u), fmt));
        let m_in = bc.ln2.out.to_half(fmt);
        let dm = linear_backward(&dup, &m_in, &bp.mlp_up_w, &mut gb.mlp_up_w, &mut gb.mlp_up_b, fmt)?;
        let dx_ln2 = layer_norm_backward(&dm, &bc.ln2, &bp.ln2_gain, &mut gb.ln2_gain, &mut gb.ln2_bias, ln_fmt);
        add_rounded(&mut dx, &dx_ln2, fmt);

        let dy = apply_mask(&dx, &bc.mask1, fmt);
        let dattn = linear_backward(&dy, &bc.attn, &bp.attn_out_w, &mut gb.attn_out_w, &mut gb.attn_out_b, fmt)?;
        let dqkv = attention_backward(&dattn, bc, cfg, fmt)?;
        let a_in = bc.ln1.out.to_half(fmt);
        let da = linear_backward(&dqkv, &a_in, &bp.attn_kqv_w, &mut gb.attn_kqv_w, &mut gb.attn_kqv_b, fmt)?;
        let dx_ln1 = layer_norm_backward(&da, &bc.ln1, &bp.ln1_gain, &mut gb.ln1_gain, &mut gb.ln1_bias, ln_fmt);
        add_rounded(&mut dx, &dx_ln1, fmt);
    }

    for (i, &tok) in tokens.iter().enumerate() {
        let g = dx.row(i);
        for (a, &b) in grads.input_embedding.row_mut(tok as usize).iter_mut().zip(g) {
            *a += b;
        }
        for (a, &b) in grads.positional_embedding.row_mut(i).iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(loss)
}

/// Mean NLL and its exact gradients for one sequence.
pub fn backward(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    targets: &[u32],
    mode: Mode,
    fmt: HalfFormat,
) -> Result<(f64, Parameters)> {
    let mut grads = Parameters::zeros(cfg);
    let loss = backward_into(params, cfg, tokens, targets, mode, fmt, 1.0, &mut grads)?;
    Ok((loss, grads))
}
