mod common;

use proptest::prelude::*;
use ptq_core::model::{
    forward, forward_quantized, forward_with, layer_norm, nll_loss, LinearKernel, LinearSite, Mode, ModelConfig,
    Parameters, QuantScheme,
};
use ptq_core::quant::{dequantize, quantize_symmetric, QuantAxis, QuantBits};
use ptq_core::rng::SplitMix64;
use ptq_core::{matmul, Error, HalfFormat, Tensor};

fn small_cfg() -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 16, n_heads: 4, d_ff: 32, vocab_size: 256, max_seq: 16, ln_eps: 1e-5, dropout_p: 0.0 }
}

fn bytes(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

#[test]
fn zero_parameters_give_uniform_softmax() {
    let c = small_cfg();
    let p = Parameters::zeros(&c);
    let tokens = bytes("hello");
    let out = forward(&p, &c, &tokens, Mode::Eval, HalfFormat::None, false).unwrap();
    assert_eq!(out.logits.shape(), (5, 256));
    assert!(out.logits.data().iter().all(|&z| z == 0.0));
    let loss = nll_loss(&out.logits, &bytes("ello!")).unwrap();
    assert!((loss - 256f64.ln()).abs() < 1e-9);
}

#[test]
fn zero_dropout_train_matches_eval_bitwise() {
    let c = small_cfg();
    let p = Parameters::init(&c, 3).unwrap();
    let tokens = bytes("bit exact?");
    for fmt in [HalfFormat::None, HalfFormat::Bf16, HalfFormat::Fp16] {
        let e = forward(&p, &c, &tokens, Mode::Eval, fmt, true).unwrap();
        let t = forward(&p, &c, &tokens, Mode::Train { dropout_key: 77 }, fmt, true).unwrap();
        assert_eq!(e.logits, t.logits);
        assert_eq!(e.trace, t.trace);
    }
}

#[test]
fn single_block_matches_straight_line_reference() {
    let c = ModelConfig { n_layers: 1, d_model: 4, n_heads: 2, d_ff: 8, vocab_size: 256, max_seq: 8, ln_eps: 1e-5, dropout_p: 0.0 };
    let mut p = Parameters::init_with_std(&c, 21, 0.5).unwrap();
    let mut rng = SplitMix64::new(4);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += (rng.next_f64() as f32 - 0.5) * 0.2;
        }
    }
    let tokens = bytes("abcab");
    let got = forward(&p, &c, &tokens, Mode::Eval, HalfFormat::None, false).unwrap().logits;
    let want = common::reference_logits(&p, &c, &tokens);
    for i in 0..tokens.len() {
        for j in 0..256 {
            assert!((got.get(i, j) as f64 - want[i][j]).abs() < 1e-5, "({i},{j})");
        }
    }
}

#[test]
fn multi_block_matches_reference() {
    let c = small_cfg();
    let p = Parameters::init_with_std(&c, 8, 0.2).unwrap();
    let tokens = bytes("reference check!");
    let got = forward(&p, &c, &tokens, Mode::Eval, HalfFormat::None, false).unwrap().logits;
    let want = common::reference_logits(&p, &c, &tokens);
    for i in 0..tokens.len() {
        for j in 0..256 {
            assert!((got.get(i, j) as f64 - want[i][j]).abs() < 1e-4);
        }
    }
}

#[test]
fn causal_logits_ignore_future_tokens() {
    let c = small_cfg();
    let p = Parameters::init_with_std(&c, 5, 0.1).unwrap();
    let a = bytes("causal masks");
    let mut b = a.clone();
    for v in &mut b[6..] {
        *v = 255 - *v;
    }
    for fmt in [HalfFormat::None, HalfFormat::Fp16] {
        let la = forward(&p, &c, &a, Mode::Eval, fmt, false).unwrap().logits;
        let lb = forward(&p, &c, &b, Mode::Eval, fmt, false).unwrap().logits;
        for i in 0..6 {
            assert_eq!(la.row(i), lb.row(i));
        }
        assert_ne!(la.row(6), lb.row(6));
    }
}

#[test]
fn vocabulary_permutation_leaves_loss_unchanged() {
    let c = small_cfg();
    let p = Parameters::init_with_std(&c, 6, 0.1).unwrap();
    let perm: Vec<u32> = (0..256u32).map(|i| (i * 97 + 13) % 256).collect();
    let mut q = p.clone();
    for old in 0..256 {
        let new = perm[old] as usize;
        q.input_embedding.row_mut(new).copy_from_slice(p.input_embedding.row(old));
        for r in 0..c.d_model {
            q.output_embedding.set(r, new, p.output_embedding.get(r, old));
        }
    }
    let seq = bytes("permutation test");
    let (tokens, targets) = (&seq[..15], &seq[1..]);
    let pt: Vec<u32> = tokens.iter().map(|&t| perm[t as usize]).collect();
    let pg: Vec<u32> = targets.iter().map(|&t| perm[t as usize]).collect();
    let l1 = nll_loss(&forward(&p, &c, tokens, Mode::Eval, HalfFormat::None, false).unwrap().logits, targets).unwrap();
    let l2 = nll_loss(&forward(&q, &c, &pt, Mode::Eval, HalfFormat::None, false).unwrap().logits, &pg).unwrap();
    assert!((l1 - l2).abs() < 1e-6);
}

#[test]
fn dropout_is_unbiased_in_expectation() {
    // Large embeddings and small block outputs keep the downstream layernorm
    // near-linear in the dropped residual branch.
    let c = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 16, vocab_size: 16, max_seq: 4, ln_eps: 1e-5, dropout_p: 0.2 };
    let mut p = Parameters::init_with_std(&c, 2, 0.005).unwrap();
    let mut rng = SplitMix64::new(99);
    for v in p.input_embedding.data_mut().iter_mut().chain(p.output_embedding.data_mut()) {
        *v = (rng.next_f64() as f32 - 0.5) * 4.0;
    }
    let tokens = [1u32, 5, 9];
    let eval = forward(&p, &c, &tokens, Mode::Eval, HalfFormat::None, false).unwrap().logits;
    let n = 10_000;
    let mut sum = vec![0.0f64; eval.len()];
    let mut sq = vec![0.0f64; eval.len()];
    for k in 0..n {
        let l = forward(&p, &c, &tokens, Mode::Train { dropout_key: k }, HalfFormat::None, false).unwrap().logits;
        for (i, &v) in l.data().iter().enumerate() {
            sum[i] += v as f64;
            sq[i] += (v as f64).powi(2);
        }
    }
    let mut varied = 0;
    for (i, &e) in eval.data().iter().enumerate() {
        let mean = sum[i] / n as f64;
        let var = (sq[i] / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        if se > 0.0 {
            varied += 1;
        }
        assert!((mean - e as f64).abs() <= 3.0 * se + 1e-6, "logit {i}: mean {mean} eval {e} se {se}");
    }
    assert!(varied > 0);
}

#[test]
fn forward_errors() {
    let c = small_cfg();
    let p = Parameters::zeros(&c);
    assert!(matches!(forward(&p, &c, &[], Mode::Eval, HalfFormat::None, false), Err(Error::Domain(_))));
    assert!(matches!(forward(&p, &c, &[256], Mode::Eval, HalfFormat::None, false), Err(Error::Domain(_))));
    let long = vec![1u32; 17];
    assert!(matches!(forward(&p, &c, &long, Mode::Eval, HalfFormat::None, false), Err(Error::Shape(_))));
    assert!(matches!(forward_quantized(&p, &c, &[300], QuantScheme::Int8W8A8, false), Err(Error::Domain(_))));
}

#[test]
fn capture_records_both_sites_per_block() {
    let c = small_cfg();
    let p = Parameters::init(&c, 1).unwrap();
    let tokens = bytes("capture");
    let out = forward(&p, &c, &tokens, Mode::Eval, HalfFormat::None, true).unwrap();
    let trace = out.trace.unwrap();
    assert_eq!(trace.layers.len(), 2 * c.n_layers);
    for site in [LinearSite::AttnKqv, LinearSite::MlpUp] {
        let blocks: Vec<usize> = trace.site_inputs(site).map(|l| l.block).collect();
        assert_eq!(blocks, vec![0, 1]);
    }
    for l in &trace.layers {
        assert_eq!(l.input.shape(), (7, 16));
    }
    let q = forward_quantized(&p, &c, &tokens, QuantScheme::Int8W8A8, true).unwrap();
    assert_eq!(q.trace.unwrap().layers.len(), 4);
    assert!(forward(&p, &c, &tokens, Mode::Eval, HalfFormat::None, false).unwrap().trace.is_none());
}

#[test]
fn quantized_zero_weights_match_float() {
    let c = small_cfg();
    let mut p = Parameters::init(&c, 4).unwrap();
    for b in &mut p.blocks {
        for w in [&mut b.attn_kqv_w, &mut b.attn_out_w, &mut b.mlp_up_w, &mut b.mlp_down_w] {
            w.data_mut().fill(0.0);
        }
        b.attn_out_b.data_mut().fill(0.01);
        b.mlp_down_b.data_mut().fill(-0.02);
    }
    let tokens = bytes("zero weights");
    let f = forward(&p, &c, &tokens, Mode::Eval, HalfFormat::None, false).unwrap().logits;
    for s in QuantScheme::ALL {
        assert_eq!(forward_quantized(&p, &c, &tokens, s, false).unwrap().logits, f);
    }
}

#[test]
fn one_by_one_int8_layers_are_exact() {
    // Each linear input is 127 times a dyadic value, so every scale is exact.
    let c = ModelConfig { n_layers: 1, d_model: 1, n_heads: 1, d_ff: 1, vocab_size: 4, max_seq: 2, ln_eps: 1e-5, dropout_p: 0.0 };
    let mut p = Parameters::zeros(&c);
    let b = &mut p.blocks[0];
    b.ln1_bias.set(0, 0, 127.0 / 64.0);
    b.attn_kqv_w = Tensor::from_vec(1, 3, vec![127.0 / 128.0, -127.0 / 32.0, 127.0 / 128.0]).unwrap();
    b.attn_out_w.set(0, 0, -127.0 / 256.0);
    b.ln2_bias.set(0, 0, 0.5);
    b.mlp_down_b.set(0, 0, 0.25);
    p.final_ln_bias.set(0, 0, 1.5);
    p.output_embedding = Tensor::from_vec(1, 4, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let f = forward(&p, &c, &[2], Mode::Eval, HalfFormat::None, true).unwrap();
    let q = forward_quantized(&p, &c, &[2], QuantScheme::Int8W8A8, true).unwrap();
    assert_eq!(f.logits, q.logits);
    assert_eq!(f.trace, q.trace);
}

/// Float linears against quantize-then-dequantize substitutes.
struct Substituted;

impl LinearKernel for Substituted {
    fn linear(&self, _block: usize, _site: LinearSite, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, Error> {
        let xd = dequantize(&quantize_symmetric(x, QuantAxis::PerRow, QuantBits::Int8)?);
        let wd = dequantize(&quantize_symmetric(w, QuantAxis::PerColumn, QuantBits::Int8)?);
        let mut y = matmul(&xd, &wd, HalfFormat::None)?;
        for i in 0..y.rows() {
            for (v, &bb) in y.row_mut(i).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        Ok(y)
    }

    fn output_projection(&self, x: &Tensor, w: &Tensor) -> Result<Tensor, Error> {
        matmul(x, w, HalfFormat::None)
    }
}

struct Int4Substituted;

impl LinearKernel for Int4Substituted {
    fn linear(&self, _block: usize, _site: LinearSite, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, Error> {
        let wd = dequantize(&quantize_symmetric(w, QuantAxis::PerColumn, QuantBits::Int4)?);
        let mut y = matmul(x, &wd, HalfFormat::None)?;
        for i in 0..y.rows() {
            for (v, &bb) in y.row_mut(i).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        Ok(y)
    }

    fn output_projection(&self, x: &Tensor, w: &Tensor) -> Result<Tensor, Error> {
        matmul(x, w, HalfFormat::None)
    }
}

#[test]
fn quantized_forward_matches_substitution_oracle() {
    let c = small_cfg();
    let p = Parameters::init(&c, 12).unwrap();
    let tokens = bytes("substitute me");
    let q8 = forward_quantized(&p, &c, &tokens, QuantScheme::Int8W8A8, false).unwrap().logits;
    let s8 = forward_with(&p, &c, &tokens, Mode::Eval, HalfFormat::None, &Substituted, false).unwrap().logits;
    let q4 = forward_quantized(&p, &c, &tokens, QuantScheme::Int4WeightOnly, false).unwrap().logits;
    let s4 = forward_with(&p, &c, &tokens, Mode::Eval, HalfFormat::None, &Int4Substituted, false).unwrap().logits;
    for (a, b) in q8.data().iter().zip(s8.data()).chain(q4.data().iter().zip(s4.data())) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    let f = forward(&p, &c, &tokens, Mode::Eval, HalfFormat::None, false).unwrap().logits;
    assert_ne!(q8, f);
}

#[test]
fn nll_examples() {
    let uniform = Tensor::zeros(3, 256);
    assert!((nll_loss(&uniform, &[0, 100, 255]).unwrap() - 5.545177444479562).abs() < 1e-9);

    let mut margin = Tensor::zeros(2, 5);
    margin.set(0, 3, 1e4);
    margin.set(1, 0, 1e4);
    assert!(nll_loss(&margin, &[3, 0]).unwrap() < 1e-12);

    let mut rng = SplitMix64::new(17);
    let logits = Tensor::from_fn(3, 5, |_, _| (rng.next_f64() as f32 - 0.5) * 6.0);
    let targets = [4u32, 0, 2];
    let mut naive = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        let z: f64 = logits.row(i).iter().map(|&v| (v as f64).exp()).sum();
        naive -= ((logits.get(i, t as usize) as f64).exp() / z).ln();
    }
    naive /= 3.0;
    assert!((nll_loss(&logits, &targets).unwrap() - naive).abs() < 1e-6);

    assert!(nll_loss(&logits, &[0, 1]).is_err());
    assert!(nll_loss(&logits, &[0, 1, 5]).is_err());
}

proptest! {
    #[test]
    fn layernorm_normalizes(rows in prop::collection::vec(prop::collection::vec(-50.0f32..50.0, 16), 1..6)) {
        prop_assume!(rows.iter().all(|r| {
            let m = r.iter().sum::<f32>() / 16.0;
            r.iter().map(|v| (v - m).powi(2)).sum::<f32>() / 16.0 > 0.2
        }));
        let x = Tensor::from_rows(&rows).unwrap();
        let g = Tensor::filled(1, 16, 1.0);
        let b = Tensor::zeros(1, 16);
        let ln = layer_norm(&x, &g, &b, 1e-5, HalfFormat::None);
        for i in 0..x.rows() {
            let r = ln.normalized.row(i);
            let mean = r.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
