//! Dense f64 matrices and the activation/normalization primitives used by the
//! encoder, the entity attention layer, and training.
//!
//! Everything is plain row-major `Vec<f64>` math. Backward passes elsewhere in
//! the crate are hand-derived and validated against [`grad_check`], so all
//! learned math stays in 64-bit floats.

use crate::error::{KprError, Result};
use crate::rng::Rng;

/// Train/eval switch for operations whose behavior differs (dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense row-major matrix of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(KprError::Shape(format!(
                "from_vec: {} values do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_row(row: &[f64]) -> Matrix {
        Matrix {
            rows: 1,
            cols: row.len(),
            data: row.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Components drawn i.i.d. uniform in [lo, hi).
    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of row `r` as a 1xC matrix.
    pub fn row_matrix(&self, r: usize) -> Matrix {
        Matrix::from_row(self.row(r))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn shape(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(KprError::Shape(format!(
                "matmul: {} * {}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(lhs.iter()) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(KprError::Shape(format!(
                "{op}: {} vs {}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, c: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Column sums as a 1xC matrix (bias gradients).
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn squared_sum(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.squared_sum().sqrt()
    }

    /// Dot product of two 1xN matrices.
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        if self.rows != 1 || other.rows != 1 || self.cols != other.cols {
            return Err(KprError::Shape(format!(
                "dot: {} . {}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(KprError::Numeric(format!(
                "non-finite values in {context} ({})",
                self.shape()
            )))
        }
    }
}

/// 64-bit FNV-1a, used for bitwise checksums of parameter and embedding state.
#[derive(Clone, Debug)]
pub struct Fnv64 {
    state: u64,
}

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64 {
            state: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write(&v.to_bits().to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

/// Bitwise checksum over a sequence of matrices, shape-sensitive.
pub fn checksum_matrices<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> u64 {
    let mut h = Fnv64::new();
    for m in mats {
        h.write_u64(m.rows() as u64);
        h.write_u64(m.cols() as u64);
        for &v in m.data() {
            h.write_f64(v);
        }
    }
    h.finish()
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Per-row layer normalization with population variance.
///
/// Each row is centered, divided by sqrt(var + eps), scaled by `gain` and
/// shifted by `bias` (both 1xC).
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    layer_norm_with_cache(x, gain, bias, eps).map(|(out, _)| out)
}

/// Forward state needed by [`layer_norm_backward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
    pub gain: Matrix,
}

pub fn layer_norm_with_cache(
    x: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if d == 0 {
        return Err(KprError::Parameter("layer_norm: empty rows".into()));
    }
    if gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d {
        return Err(KprError::Shape(format!(
            "layer_norm: x {}x{d}, gain {}x{}, bias {}x{}",
            x.rows(),
            gain.rows(),
            gain.cols(),
            bias.rows(),
            bias.cols()
        )));
    }
    if eps < 0.0 {
        return Err(KprError::Parameter("layer_norm: eps must be >= 0".into()));
    }
    let mut out = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat.set(r, c, h);
            out.set(r, c, h * gain.get(0, c) + bias.get(0, c));
        }
    }
    out.ensure_finite("layer_norm output")?;
    let cache = LayerNormCache {
        xhat,
        inv_std,
        gain: gain.clone(),
    };
    Ok((out, cache))
}

/// Gradients of layer_norm: returns (d_x, d_gain, d_bias).
pub fn layer_norm_backward(
    d_out: &Matrix,
    cache: &LayerNormCache,
) -> Result<(Matrix, Matrix, Matrix)> {
    let rows = cache.xhat.rows();
    let d = cache.xhat.cols();
    if d_out.rows() != rows || d_out.cols() != d {
        return Err(KprError::Shape(format!(
            "layer_norm_backward: upstream {}x{}, cache {rows}x{d}",
            d_out.rows(),
            d_out.cols()
        )));
    }
    let mut dx = Matrix::zeros(rows, d);
    let mut dgain = Matrix::zeros(1, d);
    let mut dbias = Matrix::zeros(1, d);
    for r in 0..rows {
        let is = cache.inv_std[r];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let dy = d_out.get(r, c);
            let h = cache.xhat.get(r, c);
            dgain.set(0, c, dgain.get(0, c) + dy * h);
            dbias.set(0, c, dbias.get(0, c) + dy);
            let dxhat = dy * cache.gain.get(0, c);
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * h;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            let dxhat = d_out.get(r, c) * cache.gain.get(0, c);
            let h = cache.xhat.get(r, c);
            dx.set(r, c, is * (dxhat - mean_dxhat - h * mean_dxhat_xhat));
        }
    }
    Ok((dx, dgain, dbias))
}

/// Mask of inverted-dropout factors: each entry is 0 with probability p and
/// 1/(1-p) otherwise.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Result<Matrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(KprError::Parameter(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    let keep = 1.0 / (1.0 - p);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = if rng.next_f64() < p { 0.0 } else { keep };
    }
    Ok(m)
}

/// Inverted dropout. Eval mode returns the input unchanged and draws nothing
/// from the generator.
pub fn dropout(x: &Matrix, p: f64, mode: Mode, rng: &mut Rng) -> Result<Matrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(KprError::Parameter(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    match mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train => {
            if p == 0.0 {
                return Ok(x.clone());
            }
            let mask = dropout_mask(x.rows(), x.cols(), p, rng)?;
            x.hadamard(&mask)
        }
    }
}

/// Elementwise sigmoid(x - ln(length) + 1) over a 1xN score row.
///
/// The bias grows with the attended sequence length so that each weight is
/// judged against how many rows compete for attention.
pub fn sigmoid_length_bias(scores: &Matrix, length: usize) -> Result<Matrix> {
    if length == 0 {
        return Err(KprError::Parameter(
            "sigmoid_length_bias: length must be >= 1".into(),
        ));
    }
    let bias = (length as f64).ln() - 1.0;
    let out = scores.map(|v| sigmoid(v - bias));
    out.ensure_finite("sigmoid_length_bias output")?;
    Ok(out)
}

/// Max-subtracted softmax over a single 1xN row.
pub fn softmax_row(scores: &Matrix) -> Result<Matrix> {
    if scores.rows() != 1 || scores.cols() == 0 {
        return Err(KprError::Shape(format!(
            "softmax_row expects a non-empty 1xN row, got {}x{}",
            scores.rows(),
            scores.cols()
        )));
    }
    Ok(softmax_rows(scores))
}

/// Row-wise max-subtracted softmax for any matrix.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..scores.cols() {
            let e = (row[c] - max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..scores.cols() {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}

/// Backward of row-wise softmax: given dL/dp and p, returns dL/ds.
pub fn softmax_rows_backward(d_probs: &Matrix, probs: &Matrix) -> Result<Matrix> {
    d_probs.check_same_shape(probs, "softmax_rows_backward")?;
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let inner: f64 = (0..probs.cols())
            .map(|c| d_probs.get(r, c) * probs.get(r, c))
            .sum();
        for c in 0..probs.cols() {
            out.set(r, c, probs.get(r, c) * (d_probs.get(r, c) - inner));
        }
    }
    Ok(out)
}

/// Compare an analytic gradient against central finite differences.
///
/// Returns the maximum over coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(mut f: F, point: &Matrix, analytic: &Matrix, h: f64) -> Result<f64>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if analytic.rows() != point.rows() || analytic.cols() != point.cols() {
        return Err(KprError::Shape(format!(
            "grad_check: point {}x{}, analytic {}x{}",
            point.rows(),
            point.cols(),
            analytic.rows(),
            analytic.cols()
        )));
    }
    if h <= 0.0 {
        return Err(KprError::Parameter("grad_check: step must be > 0".into()));
    }
    let mut worst: f64 = 0.0;
    let mut x = point.clone();
    for i in 0..point.data().len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = f(&x)?;
        x.data_mut()[i] = orig - h;
        let down = f(&x)?;
        x.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(KprError::Numeric(format!(
                "grad_check: non-finite objective near coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
