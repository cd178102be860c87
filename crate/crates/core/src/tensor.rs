//! Dense row-major 2-D `f32` tensors and software half-precision emulation.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Arithmetic format used by the forward and backward passes.
///
/// Master weights are always 32-bit; a half format only decides how
/// intermediate values are rounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HalfFormat {
    /// Pure 32-bit arithmetic.
    #[default]
    None,
    Bf16,
    Fp16,
    /// fp16 everywhere except layernorm arithmetic, which stays 32-bit.
    Fp16Ln32,
}

impl HalfFormat {
    pub fn is_half(self) -> bool {
        self != HalfFormat::None
    }

    /// Format that layernorm arithmetic runs in.
    pub fn layernorm_format(self) -> HalfFormat {
        match self {
            HalfFormat::Fp16Ln32 => HalfFormat::None,
            other => other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HalfFormat::None => "none",
            HalfFormat::Bf16 => "bf16",
            HalfFormat::Fp16 => "fp16",
            HalfFormat::Fp16Ln32 => "fp16-ln32",
        }
    }
}

impl std::str::FromStr for HalfFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "fp32" => Ok(HalfFormat::None),
            "bf16" => Ok(HalfFormat::Bf16),
            "fp16" => Ok(HalfFormat::Fp16),
            "fp16-ln32" => Ok(HalfFormat::Fp16Ln32),
            other => Err(Error::Config(format!("unknown half format `{other}`"))),
        }
    }
}

impl std::fmt::Display for HalfFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Largest finite fp16 value.
pub const FP16_MAX: f32 = 65504.0;

/// Round `x` to bfloat16 (round-to-nearest-even) and widen back.
#[inline]
pub fn round_bf16(x: f32) -> f32 {
    let bits = x.to_bits();
    if x.is_nan() {
        // keep sign and payload, force quiet bit
        return f32::from_bits(bits | 0x0040_0000);
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7fff + lsb) & 0xffff_0000;
    f32::from_bits(rounded)
}

/// Round `x` to IEEE binary16 (round-to-nearest-even) and widen back.
#[inline]
pub fn round_fp16(x: f32) -> f32 {
    if x.is_nan() {
        return f32::from_bits(x.to_bits() | 0x0040_0000);
    }
    let bits = x.to_bits();
    let sign = bits & 0x8000_0000;
    let abs_bits = bits & 0x7fff_ffff;
    // 65520 is the midpoint between 65504 and 2^16; ties go to the even 2^16.
    if abs_bits >= 0x477f_f000 {
        return f32::from_bits(sign | 0x7f80_0000);
    }
    if abs_bits >= 0x3880_0000 {
        // normal binary16 range: keep 10 mantissa bits
        let lsb = (abs_bits >> 13) & 1;
        let r = abs_bits.wrapping_add(0x0fff + lsb) & !0x1fff;
        return f32::from_bits(sign | r);
    }
    // subnormal binary16: multiples of 2^-24
    let scaled = f32::from_bits(abs_bits) * 16_777_216.0;
    let r = scaled.round_ties_even() * (1.0 / 16_777_216.0);
    f32::from_bits(sign | r.to_bits())
}

/// Round `x` to the given half format; identity for [`HalfFormat::None`].
#[inline]
pub fn emulate_half(x: f32, fmt: HalfFormat) -> f32 {
    match fmt {
        HalfFormat::None => x,
        HalfFormat::Bf16 => round_bf16(x),
        HalfFormat::Fp16 | HalfFormat::Fp16Ln32 => round_fp16(x),
    }
}

/// Dense row-major 2-D tensor of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|x| x * c)
    }

    /// Element-wise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Round every element to `fmt`.
    pub fn to_half(&self, fmt: HalfFormat) -> Tensor {
        if fmt.is_half() {
            self.map(|x| emulate_half(x, fmt))
        } else {
            self.clone()
        }
    }

    pub fn round_in_place(&mut self, fmt: HalfFormat) {
        if fmt.is_half() {
            self.data.iter_mut().for_each(|x| *x = emulate_half(*x, fmt));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    /// Columns `start..start+width` as a new tensor.
    pub fn column_slice(&self, start: usize, width: usize) -> Tensor {
        let mut out = Tensor::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Write `src` into columns `start..start+src.cols`.
    pub fn set_column_slice(&mut self, start: usize, src: &Tensor) {
        for i in 0..self.rows {
            let w = src.cols;
            self.row_mut(i)[start..start + w].copy_from_slice(src.row(i));
        }
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }
}

/// `a · b` with 32-bit accumulation in ascending inner-index order.
///
/// When `fmt` is a half format, both operands are rounded to it before the
/// product and the output is rounded after.
pub fn matmul(a: &Tensor, b: &Tensor, fmt: HalfFormat) -> Result<Tensor> {
    if a.cols != b.rows {
        return shape_err(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = if fmt.is_half() {
        matmul_raw(&a.to_half(fmt), &b.to_half(fmt))
    } else {
        matmul_raw(a, b)
    };
    out.round_in_place(fmt);
    Ok(out)
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (t, h, o) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(t, o);
    // Four output rows share each pass over a row of `b`; every element still
    // accumulates in ascending inner index.
    let mut i = 0;
    while i + 4 <= t {
        let (r0, rest) = out.data[i * o..(i + 4) * o].split_at_mut(o);
        let (r1, rest) = rest.split_at_mut(o);
        let (r2, r3) = rest.split_at_mut(o);
        for k in 0..h {
            let brow = &b.data[k * o..(k + 1) * o];
            let (a0, a1, a2, a3) =
                (a.data[i * h + k], a.data[(i + 1) * h + k], a.data[(i + 2) * h + k], a.data[(i + 3) * h + k]);
            for j in 0..o {
                let bv = brow[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..t {
        let arow = &a.data[i * h..(i + 1) * h];
        let orow = &mut out.data[i * o..(i + 1) * o];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b.data[k * o..(k + 1) * o];
            for (c, &bv) in orow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_examples() {
        assert_eq!(emulate_half(1.0, HalfFormat::Bf16), 1.0);
        assert_eq!(emulate_half(100000.0, HalfFormat::Fp16), f32::INFINITY);
        assert_eq!(emulate_half(-100000.0, HalfFormat::Fp16), f32::NEG_INFINITY);
        assert_eq!(emulate_half(1.003_906_25, HalfFormat::Bf16), 1.0);
        assert_eq!(emulate_half(1.234, HalfFormat::None), 1.234);
        assert_eq!(emulate_half(65504.0, HalfFormat::Fp16), 65504.0);
        assert_eq!(emulate_half(65519.99, HalfFormat::Fp16), 65504.0);
        assert_eq!(emulate_half(65520.0, HalfFormat::Fp16), f32::INFINITY);
        assert!(emulate_half(f32::NAN, HalfFormat::Fp16).is_nan());
        assert!(emulate_half(f32::NAN, HalfFormat::Bf16).is_nan());
        assert_eq!(emulate_half(f32::INFINITY, HalfFormat::Bf16), f32::INFINITY);
        assert_eq!(emulate_half(f32::MAX, HalfFormat::Bf16), f32::INFINITY);
    }

    #[test]
    fn fp16_subnormals() {
        let min_sub = 2f32.powi(-24);
        assert_eq!(round_fp16(min_sub), min_sub);
        // half of the smallest subnormal ties to zero (even)
        assert_eq!(round_fp16(min_sub * 0.5), 0.0);
        assert_eq!(round_fp16(min_sub * 0.75), min_sub);
        assert_eq!(round_fp16(min_sub * 1.5), 2.0 * min_sub);
        assert_eq!(round_fp16(-min_sub * 0.25).to_bits(), (-0.0f32).to_bits());
        // largest subnormal rounds up into the smallest normal
        assert_eq!(round_fp16(2f32.powi(-14) - 2f32.powi(-26)), 2f32.powi(-14));
    }

    #[test]
    fn matmul_examples() {
        let m = Tensor::from_fn(3, 3, |i, j| (i * 3 + j) as f32 - 4.0);
        assert_eq!(matmul(&Tensor::identity(3), &m, HalfFormat::None).unwrap(), m);
        let m43 = Tensor::from_fn(4, 3, |i, j| (i + j) as f32);
        assert_eq!(
            matmul(&Tensor::zeros(2, 4), &m43, HalfFormat::None).unwrap(),
            Tensor::zeros(2, 3)
        );
        assert!(matches!(
            matmul(&Tensor::zeros(2, 3), &m43, HalfFormat::None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matmul_half_rounds_output() {
        let a = Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(2, 1, vec![1.0, 0.003]).unwrap();
        let out = matmul(&a, &b, HalfFormat::Bf16).unwrap();
        assert_eq!(out.get(0, 0), round_bf16(1.0 + round_bf16(0.003)));
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
