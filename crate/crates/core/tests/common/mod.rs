//! Straight-line f64 reference decoder used as an oracle. Shares only the
//! parameter container with the crate; all arithmetic is written out here.
#![allow(dead_code)]

use ptq_core::model::{ModelConfig, Parameters};
use ptq_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

fn vecf(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, &x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn ln(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mu) * r * g[j] + b[j]).collect()
        })
        .collect()
}

fn erf(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 is too coarse; integrate the series instead.
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0;
    if x.abs() > 6.0 {
        return x.signum();
    }
    loop {
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-17 {
            break;
        }
        n += 1.0;
        term *= -x * x / n;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / 2f64.sqrt()))
}

fn linear(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let bias = vecf(b);
    mm(x, &to_mat(w))
        .into_iter()
        .map(|r| r.iter().zip(&bias).map(|(a, c)| a + c).collect())
        .collect()
}

/// Eval-mode logits of the reference decoder.
pub fn reference_logits(p: &Parameters, cfg: &ModelConfig, tokens: &[u32]) -> Mat {
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let eps = cfg.ln_eps as f64;
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            (0..d)
                .map(|j| p.input_embedding.get(t as usize, j) as f64 + p.positional_embedding.get(i, j) as f64)
                .collect()
        })
        .collect();
    let t = tokens.len();
    for b in &p.blocks {
        let a = ln(&x, &vecf(&b.ln1_gain), &vecf(&b.ln1_bias), eps);
        let qkv = linear(&a, &b.attn_kqv_w, &b.attn_kqv_b);
        let mut att = vec![vec![0.0; d]; t];
        for h in 0..cfg.n_heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..dh).map(|c| qkv[i][h * dh + c] * qkv[j][d + h * dh + c]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for c in 0..dh {
                    att[i][h * dh + c] =
                        (0..=i).map(|j| (scores[j] - m).exp() / z * qkv[j][2 * d + h * dh + c]).sum();
                }
            }
        }
        let y = linear(&att, &b.attn_out_w, &b.attn_out_b);
        for i in 0..t {
            for j in 0..d {
                x[i][j] += y[i][j];
            }
        }
        let m = ln(&x, &vecf(&b.ln2_gain), &vecf(&b.ln2_bias), eps);
        let u: Mat = linear(&m, &b.mlp_up_w, &b.mlp_up_b)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let dn = linear(&u, &b.mlp_down_w, &b.mlp_down_b);
        for i in 0..t {
            for j in 0..d {
                x[i][j] += dn[i][j];
            }
        }
    }
    let f = ln(&x, &vecf(&p.final_ln_gain), &vecf(&p.final_ln_bias), eps);
    mm(&f, &to_mat(&p.output_embedding))
}

/// Mean NLL of the reference decoder.
pub fn reference_loss(p: &Parameters, cfg: &ModelConfig, tokens: &[u32], targets: &[u32]) -> f64 {
    let z = reference_logits(p, cfg, tokens);
    let mut total = 0.0;
    for (row, &t) in z.iter().zip(targets) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    total / targets.len() as f64
}
