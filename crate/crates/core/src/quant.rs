//! One-shot symmetric quantization.
//!
//! Vector-wise INT8 follows the `s_x ⊙ (X_Q W_Q) ⊙ s_w` recipe: activations
//! get one scale per row (token), weights one scale per column (output
//! unit). INT4 is column-wise and weight-only. Codes are symmetric in
//! `[-Q, Q]` with `Q = 127` or `Q = 7`; ties round to even and an all-zero
//! vector gets scale 1.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::tensor::{matmul, HalfFormat, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantAxis {
    PerRow,
    PerColumn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantBits {
    Int8,
    Int4,
}

impl QuantBits {
    /// Largest code magnitude.
    pub fn q_max(self) -> i32 {
        match self {
            QuantBits::Int8 => 127,
            QuantBits::Int4 => 7,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            QuantBits::Int8 => 8,
            QuantBits::Int4 => 4,
        }
    }
}

/// Integer payload, either one byte per code or two signed nibbles per byte.
#[derive(Debug, Clone, PartialEq)]
enum Codes {
    Int8(Vec<i8>),
    /// Element `2k` in the low nibble and `2k + 1` in the high nibble of byte `k`.
    Int4Packed(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    axis: QuantAxis,
    bits: QuantBits,
    scales: Vec<f32>,
    codes: Codes,
}

fn pack_int4(codes: &[i8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = (pair[0] as u8) & 0x0f;
            let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0f);
            lo | (hi << 4)
        })
        .collect()
}

#[inline]
fn unpack_nibble(byte: u8, high: bool) -> i8 {
    let nib = if high { byte >> 4 } else { byte & 0x0f };
    // sign-extend the 4-bit two's complement value
    ((nib << 4) as i8) >> 4
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn axis(&self) -> QuantAxis {
        self.axis
    }

    pub fn bits(&self) -> QuantBits {
        self.bits
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Code at `(i, j)`.
    #[inline]
    pub fn code(&self, i: usize, j: usize) -> i8 {
        let idx = i * self.cols + j;
        match &self.codes {
            Codes::Int8(c) => c[idx],
            Codes::Int4Packed(p) => unpack_nibble(p[idx / 2], idx % 2 == 1),
        }
    }

    /// All codes, row-major, unpacked to one byte each.
    pub fn codes(&self) -> Vec<i8> {
        match &self.codes {
            Codes::Int8(c) => c.clone(),
            Codes::Int4Packed(p) => (0..self.rows * self.cols)
                .map(|idx| unpack_nibble(p[idx / 2], idx % 2 == 1))
                .collect(),
        }
    }

    /// Size of the integer payload in bytes.
    pub fn payload_bytes(&self) -> usize {
        match &self.codes {
            Codes::Int8(c) => c.len(),
            Codes::Int4Packed(p) => p.len(),
        }
    }

    /// Scale that applies to entry `(i, j)`.
    #[inline]
    pub fn scale_at(&self, i: usize, j: usize) -> f32 {
        match self.axis {
            QuantAxis::PerRow => self.scales[i],
            QuantAxis::PerColumn => self.scales[j],
        }
    }

    /// Assemble from unpacked codes, validating ranges and scales.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        axis: QuantAxis,
        bits: QuantBits,
        scales: Vec<f32>,
        codes: Vec<i8>,
    ) -> Result<Self> {
        if codes.len() != rows * cols {
            return shape_err(format!("{} codes for {rows}x{cols}", codes.len()));
        }
        let want = match axis {
            QuantAxis::PerRow => rows,
            QuantAxis::PerColumn => cols,
        };
        if scales.len() != want {
            return shape_err(format!("{} scales, expected {want}", scales.len()));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return domain_err("scales must be positive and finite");
        }
        let q = bits.q_max();
        if codes.iter().any(|&c| (c as i32).abs() > q) {
            return domain_err(format!("code outside [-{q}, {q}]"));
        }
        let codes = match bits {
            QuantBits::Int8 => Codes::Int8(codes),
            QuantBits::Int4 => Codes::Int4Packed(pack_int4(&codes)),
        };
        Ok(Self { rows, cols, axis, bits, scales, codes })
    }
}

fn ensure_finite(x: &Tensor) -> Result<()> {
    if !x.all_finite() {
        return domain_err("cannot quantize a tensor with non-finite entries");
    }
    Ok(())
}

/// Scale and codes for one vector.
fn quantize_vector(values: impl Iterator<Item = f32> + Clone, q_max: i32) -> (f32, Vec<i8>) {
    let max_abs = values.clone().fold(0.0f32, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return (1.0, values.map(|_| 0).collect());
    }
    let scale = max_abs / q_max as f32;
    let codes = values
        .map(|v| {
            let q = (v as f64 / scale as f64).round_ties_even() as i32;
            q.clamp(-q_max, q_max) as i8
        })
        .collect();
    (scale, codes)
}

/// Symmetric quantization with one scale per row or per column.
pub fn quantize_symmetric(x: &Tensor, axis: QuantAxis, bits: QuantBits) -> Result<QuantizedTensor> {
    ensure_finite(x)?;
    let (rows, cols) = x.shape();
    let q_max = bits.q_max();
    let mut codes = vec![0i8; rows * cols];
    let scales = match axis {
        QuantAxis::PerRow => (0..rows)
            .map(|i| {
                let (s, c) = quantize_vector(x.row(i).iter().copied(), q_max);
                codes[i * cols..(i + 1) * cols].copy_from_slice(&c);
                s
            })
            .collect(),
        QuantAxis::PerColumn => (0..cols)
            .map(|j| {
                let (s, c) = quantize_vector((0..rows).map(|i| x.get(i, j)), q_max);
                for (i, v) in c.into_iter().enumerate() {
                    codes[i * cols + j] = v;
                }
                s
            })
            .collect(),
    };
    QuantizedTensor::from_parts(rows, cols, axis, bits, scales, codes)
}

/// Element-wise `q · s`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    Tensor::from_fn(q.rows, q.cols, |i, j| q.code(i, j) as f32 * q.scale_at(i, j))
}

/// Column-wise INT4 weight quantization for weight-only inference.
pub fn quantize_weights_int4(w: &Tensor) -> Result<QuantizedTensor> {
    quantize_symmetric(w, QuantAxis::PerColumn, QuantBits::Int4)
}

/// Exact integer product `X_Q · W_Q` with 32-bit accumulation.
pub fn integer_matmul(x: &QuantizedTensor, w: &QuantizedTensor) -> Result<Vec<i32>> {
    if x.cols != w.rows {
        return shape_err(format!(
            "quantized matmul inner dimensions differ: {:?} x {:?}",
            x.shape(),
            w.shape()
        ));
    }
    let xc = x.codes();
    let wc = w.codes();
    let (t, h, o) = (x.rows, x.cols, w.cols);
    let mut acc = vec![0i32; t * o];
    for i in 0..t {
        let out = &mut acc[i * o..(i + 1) * o];
        for k in 0..h {
            let a = xc[i * h + k] as i32;
            if a == 0 {
                continue;
            }
            for (c, &b) in out.iter_mut().zip(&wc[k * o..(k + 1) * o]) {
                *c += a * b as i32;
            }
        }
    }
    Ok(acc)
}

/// `s_x ⊙ (X_Q W_Q) ⊙ s_w` for an activation quantized per row and a weight
/// quantized per column.
pub fn rescale_product(x: &QuantizedTensor, w: &QuantizedTensor) -> Result<Tensor> {
    if x.axis != QuantAxis::PerRow || w.axis != QuantAxis::PerColumn {
        return shape_err("vector-wise product needs per-row activations and per-column weights");
    }
    let acc = integer_matmul(x, w)?;
    let o = w.cols;
    Ok(Tensor::from_fn(x.rows, o, |i, j| {
        (acc[i * o + j] as f32 * x.scales[i]) * w.scales[j]
    }))
}

/// Vector-wise INT8 matmul against an already quantized weight.
pub fn quantized_matmul_prepared(x: &Tensor, w: &QuantizedTensor) -> Result<Tensor> {
    if x.cols() != w.rows {
        return shape_err(format!(
            "quantized matmul inner dimensions differ: {:?} x {:?}",
            x.shape(),
            w.shape()
        ));
    }
    let xq = quantize_symmetric(x, QuantAxis::PerRow, QuantBits::Int8)?;
    rescale_product(&xq, w)
}

/// Vector-wise INT8 matmul: quantize `x` per row and `w` per column,
/// multiply in integers, rescale.
pub fn quantized_matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.cols() != w.rows() {
        return shape_err(format!(
            "quantized matmul inner dimensions differ: {:?} x {:?}",
            x.shape(),
            w.shape()
        ));
    }
    let wq = quantize_symmetric(w, QuantAxis::PerColumn, QuantBits::Int8)?;
    quantized_matmul_prepared(x, &wq)
}

/// Float matmul against dequantized INT4 weights (activations stay float).
pub fn weight_only_matmul(x: &Tensor, w: &QuantizedTensor) -> Result<Tensor> {
    matmul(x, &dequantize(w), HalfFormat::None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f32]) -> Tensor {
        Tensor::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    /// Independent scalar mapping used as the oracle for the examples.
    fn scalar_quant(v: &[f64], q: f64) -> (f64, Vec<i64>) {
        let m = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if m == 0.0 {
            return (1.0, vec![0; v.len()]);
        }
        let s = m / q;
        let codes = v
            .iter()
            .map(|x| {
                let r = x / s;
                let f = r.floor();
                let diff = r - f;
                let n = if diff > 0.5 || (diff == 0.5 && (f as i64) % 2 != 0) { f + 1.0 } else { f };
                n as i64
            })
            .collect();
        (s, codes)
    }

    #[test]
    fn int8_row_example() {
        let q = quantize_symmetric(&row(&[2.0, -4.0, 1.0]), QuantAxis::PerRow, QuantBits::Int8).unwrap();
        assert_eq!(q.codes(), vec![64, -127, 32]);
        assert_eq!(q.scales(), &[4.0f32 / 127.0]);
        let (s, oracle) = scalar_quant(&[2.0, -4.0, 1.0], 127.0);
        assert_eq!(oracle, vec![64, -127, 32]);
        assert!((s - q.scales()[0] as f64).abs() < 1e-8);
    }

    #[test]
    fn zero_row_uses_unit_scale() {
        let q = quantize_symmetric(&Tensor::zeros(2, 3), QuantAxis::PerRow, QuantBits::Int8).unwrap();
        assert_eq!(q.scales(), &[1.0, 1.0]);
        assert!(q.codes().iter().all(|&c| c == 0));
        assert_eq!(dequantize(&q), Tensor::zeros(2, 3));
    }

    #[test]
    fn int4_extreme_is_exact() {
        let q = quantize_symmetric(&row(&[5.0]), QuantAxis::PerRow, QuantBits::Int4).unwrap();
        assert_eq!(q.codes(), vec![7]);
        assert_eq!(q.scales(), &[5.0f32 / 7.0]);
        assert_eq!(dequantize(&q).get(0, 0), 5.0);
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantizedTensor::from_parts(1, 1, QuantAxis::PerRow, QuantBits::Int8, vec![4.0 / 127.0], vec![127])
            .unwrap();
        assert_eq!(dequantize(&q).get(0, 0), 4.0);
    }

    #[test]
    fn int4_column_examples() {
        let w = Tensor::from_vec(3, 1, vec![7.0, -7.0, 0.0]).unwrap();
        let q = quantize_weights_int4(&w).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.codes(), vec![7, -7, 0]);
        let c = Tensor::filled(5, 2, -0.37);
        assert_eq!(dequantize(&quantize_weights_int4(&c).unwrap()), c);
    }

    #[test]
    fn int4_packing_roundtrip_all_codes() {
        let codes: Vec<i8> = (-7..=7).collect();
        let q = QuantizedTensor::from_parts(1, 15, QuantAxis::PerRow, QuantBits::Int4, vec![1.0], codes.clone())
            .unwrap();
        assert_eq!(q.payload_bytes(), 8);
        assert_eq!(q.codes(), codes);
    }

    #[test]
    fn rejects_non_finite_and_bad_parts() {
        let bad = row(&[1.0, f32::NAN]);
        assert!(quantize_symmetric(&bad, QuantAxis::PerRow, QuantBits::Int8).is_err());
        assert!(quantize_weights_int4(&row(&[f32::INFINITY])).is_err());
        assert!(QuantizedTensor::from_parts(1, 1, QuantAxis::PerRow, QuantBits::Int4, vec![1.0], vec![8]).is_err());
        assert!(QuantizedTensor::from_parts(1, 1, QuantAxis::PerRow, QuantBits::Int8, vec![0.0], vec![1]).is_err());
    }

    #[test]
    fn eq1_single_element_is_exact() {
        let x = row(&[4.0]);
        let w = row(&[2.0]);
        assert_eq!(quantized_matmul(&x, &w).unwrap().get(0, 0), 8.0);
        let z = quantized_matmul(&Tensor::zeros(3, 4), &Tensor::filled(4, 2, 0.5)).unwrap();
        assert_eq!(z, Tensor::zeros(3, 2));
        assert!(quantized_matmul(&Tensor::zeros(3, 4), &Tensor::zeros(3, 2)).is_err());
    }

    fn tensor_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-100.0f32..100.0, r * c)
                .prop_map(move |d| Tensor::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn error_bound_and_sign(x in tensor_strategy(6, 9), int4 in any::<bool>(), per_col in any::<bool>()) {
            let bits = if int4 { QuantBits::Int4 } else { QuantBits::Int8 };
            let axis = if per_col { QuantAxis::PerColumn } else { QuantAxis::PerRow };
            let q = quantize_symmetric(&x, axis, bits).unwrap();
            let d = dequantize(&q);
            for i in 0..x.rows() {
                for j in 0..x.cols() {
                    let c = q.code(i, j) as i32;
                    prop_assert!(c.abs() <= bits.q_max());
                    let v = x.get(i, j);
                    if v > 0.0 { prop_assert!(c >= 0); }
                    if v < 0.0 { prop_assert!(c <= 0); }
                    let s = q.scale_at(i, j);
                    prop_assert!((v as f64 - c as f64 * s as f64).abs() <= s as f64 / 2.0);
                    prop_assert_eq!(d.get(i, j), c as f32 * s);
                }
            }
        }

        #[test]
        fn scale_equivariance(x in tensor_strategy(5, 5), k in 0u32..6) {
            // powers of two keep scaling exact, so codes must be identical
            let c = 2f32.powi(k as i32 - 2);
            let a = quantize_symmetric(&x, QuantAxis::PerRow, QuantBits::Int8).unwrap();
            let b = quantize_symmetric(&x.scale(c), QuantAxis::PerRow, QuantBits::Int8).unwrap();
            prop_assert_eq!(a.codes(), b.codes());
            for (sa, sb) in a.scales().iter().zip(b.scales()) {
                if *sa != 1.0 || *sb != 1.0 {
                    prop_assert_eq!(sa * c, *sb);
                }
            }
        }

        #[test]
        fn integer_path_matches_wide_bruteforce(x in tensor_strategy(4, 7), seed in 0u64..1000) {
            let w = Tensor::from_fn(x.cols(), 3, |i, j| ((i * 7 + j * 13) as u64 ^ seed) as f32 % 11.0 - 5.0);
            let xq = quantize_symmetric(&x, QuantAxis::PerRow, QuantBits::Int8).unwrap();
            let wq = quantize_symmetric(&w, QuantAxis::PerColumn, QuantBits::Int8).unwrap();
            let acc = integer_matmul(&xq, &wq).unwrap();
            for i in 0..x.rows() {
                for j in 0..3 {
                    let wide: i128 = (0..x.cols()).map(|k| xq.code(i, k) as i128 * wq.code(k, j) as i128).sum();
                    prop_assert_eq!(acc[i * 3 + j] as i128, wide);
                }
            }
        }
    }
}
