//! Dense f32 kernels: matrix product, softmax, RMS normalization, rotary
//! positions and causal attention.
//!
//! Every reduction runs in ascending index order so results are
//! bit-reproducible between runs and between the chunked and undivided paths.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Row-major f32 matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(contract(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(contract("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Mat {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Mat {
        assert!(
            start <= end && end <= self.cols,
            "column range out of bounds"
        );
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Mat {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Overwrite columns `start..start+src.cols` with `src`.
    pub fn set_cols(&mut self, start: usize, src: &Mat) {
        assert_eq!(self.rows, src.rows);
        assert!(start + src.cols <= self.cols);
        for r in 0..self.rows {
            let cols = self.cols;
            self.data[r * cols + start..r * cols + start + src.cols].copy_from_slice(src.row(r));
        }
    }

    /// Overwrite rows `start..start+src.rows` with `src`.
    pub fn set_rows(&mut self, start: usize, src: &Mat) {
        assert_eq!(self.cols, src.cols);
        assert!(start + src.rows <= self.rows);
        self.data[start * self.cols..(start + src.rows) * self.cols].copy_from_slice(&src.data);
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(contract("vstack column mismatch"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(contract(format!(
                "add shape mismatch {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(contract(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        // i-k-j order: each output element still accumulates over k ascending.
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// In-place softmax of `scale * row` with max subtraction.
pub fn softmax_in_place(row: &mut [f32], scale: f32) {
    let mut max = f32::NEG_INFINITY;
    for x in row.iter_mut() {
        *x *= scale;
        max = max.max(*x);
    }
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub fn row_softmax(m: &Mat, scale: f32) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), scale);
    }
    out
}

pub fn rms_norm(x: &Mat, gain: &[f32], eps: f32) -> Result<Mat> {
    if gain.len() != x.cols {
        return Err(contract(format!(
            "rms_norm gain length {} != {} columns",
            gain.len(),
            x.cols
        )));
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mut ss = 0.0f32;
        for v in row.iter() {
            ss += v * v;
        }
        let inv = 1.0 / (ss / row.len() as f32 + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    Ok(out)
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotation angle for coordinate pair `pair` of a `width`-wide head.
#[inline]
pub fn rope_angle(position: f64, pair: usize, width: usize, theta_base: f64) -> f64 {
    position * theta_base.powf(-2.0 * pair as f64 / width as f64)
}

fn rotate_row(row: &mut [f32], position: f64, theta_base: f64) {
    let width = row.len();
    for p in 0..width / 2 {
        let (sin, cos) = rope_angle(position, p, width, theta_base).sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        let (x0, x1) = (row[2 * p], row[2 * p + 1]);
        row[2 * p] = x0 * cos - x1 * sin;
        row[2 * p + 1] = x0 * sin + x1 * cos;
    }
}

/// Rotary embedding over consecutive coordinate pairs, treating each row as a
/// single head.
pub fn apply_rope(x: &Mat, positions: &[usize], theta_base: f64) -> Result<Mat> {
    apply_rope_heads(x, positions, theta_base, 1)
}

/// Rotary embedding applied independently to each of `n_heads` column blocks.
pub fn apply_rope_heads(
    x: &Mat,
    positions: &[usize],
    theta_base: f64,
    n_heads: usize,
) -> Result<Mat> {
    let shifts: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    rotate_heads(x, &shifts, theta_base, n_heads)
}

/// Like [`apply_rope_heads`] but with signed (possibly negative) offsets, used
/// to move cached keys to new positions.
pub fn rotate_heads(x: &Mat, shifts: &[f64], theta_base: f64, n_heads: usize) -> Result<Mat> {
    if shifts.len() != x.rows {
        return Err(contract(format!(
            "rope: {} positions for {} rows",
            shifts.len(),
            x.rows
        )));
    }
    if n_heads == 0 || !x.cols.is_multiple_of(n_heads) || !(x.cols / n_heads).is_multiple_of(2) {
        return Err(contract(format!(
            "rope: {} columns cannot form {n_heads} even-width heads",
            x.cols
        )));
    }
    let width = x.cols / n_heads;
    let mut out = x.clone();
    for (r, &pos) in shifts.iter().enumerate() {
        let row = out.row_mut(r);
        for h in 0..n_heads {
            rotate_row(&mut row[h * width..(h + 1) * width], pos, theta_base);
        }
    }
    Ok(out)
}

/// Work performed by the attention kernel, counted as it happens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttnWork {
    pub score_macs: u64,
    pub av_macs: u64,
    pub softmax_elems: u64,
    /// Position range `[start, end)`; score and value MACs between a query
    /// and a key both inside it are also added to `window_macs`.
    pub window: Option<(usize, usize)>,
    pub window_macs: u64,
    /// Score and value MACs of the full square window block, i.e. what a
    /// kernel that computes every pair and then masks would spend on it.
    pub window_block_macs: u64,
}

impl AttnWork {
    pub fn with_window(start: usize, end: usize) -> Self {
        Self {
            window: Some((start, end)),
            ..Self::default()
        }
    }
}

/// Single-head causal attention with `1/sqrt(d)` scaling. Query row `i` sits
/// at position `q_offset + i` and sees keys `0..=q_offset + i`.
pub fn causal_attention(q: &Mat, k: &Mat, v: &Mat, q_offset: usize) -> Result<Mat> {
    let mut work = AttnWork::default();
    causal_attention_counted(q, k, v, q_offset, &mut work)
}

pub fn causal_attention_counted(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    q_offset: usize,
    work: &mut AttnWork,
) -> Result<Mat> {
    if q.cols != k.cols {
        return Err(contract(format!(
            "attention: query width {} != key width {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(contract(format!(
            "attention: {} keys but {} values",
            k.rows, v.rows
        )));
    }
    if q_offset + q.rows > k.rows {
        return Err(contract(format!(
            "attention: queries reach position {} but only {} keys",
            q_offset + q.rows,
            k.rows
        )));
    }
    let scale = 1.0 / (q.cols as f32).sqrt();
    let mut out = Mat::zeros(q.rows, v.cols);
    let mut scores = Vec::with_capacity(k.rows);
    for i in 0..q.rows {
        let visible = q_offset + i + 1;
        let qi = q.row(i);
        scores.clear();
        scores.extend((0..visible).map(|j| dot(qi, k.row(j))));
        softmax_in_place(&mut scores, scale);
        let orow = out.row_mut(i);
        for (j, &p) in scores.iter().enumerate() {
            for (o, &x) in orow.iter_mut().zip(v.row(j)) {
                *o += p * x;
            }
        }
        work.score_macs += (visible * q.cols) as u64;
        work.av_macs += (visible * v.cols) as u64;
        work.softmax_elems += visible as u64;
        if let Some((lo, hi)) = work.window {
            let pos = q_offset + i;
            if (lo..hi).contains(&pos) {
                let keys = visible.min(hi) - lo;
                work.window_macs += (keys * (q.cols + v.cols)) as u64;
                work.window_block_macs += ((hi - lo) * (q.cols + v.cols)) as u64;
            }
        }
    }
    Ok(out)
}

/// Multi-head causal attention over column blocks of width `cols / n_heads`.
/// Output heads are concatenated in head order.
pub fn multi_head_causal_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    n_heads: usize,
    q_offset: usize,
    work: &mut AttnWork,
) -> Result<Mat> {
    if n_heads == 0 || !q.cols.is_multiple_of(n_heads) || !v.cols.is_multiple_of(n_heads) {
        return Err(contract(format!(
            "attention: widths {}/{} not divisible into {n_heads} heads",
            q.cols, v.cols
        )));
    }
    let dq = q.cols / n_heads;
    let dv = v.cols / n_heads;
    let mut out = Mat::zeros(q.rows, v.cols);
    for h in 0..n_heads {
        let o = causal_attention_counted(
            &q.slice_cols(h * dq, (h + 1) * dq),
            &k.slice_cols(h * dq, (h + 1) * dq),
            &v.slice_cols(h * dv, (h + 1) * dv),
            q_offset,
            work,
        )?;
        out.set_cols(h * dv, &o);
    }
    Ok(out)
}
