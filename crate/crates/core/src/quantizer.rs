//! Symmetric INT8 quantization with offline error-minimizing transforms.
//!
//! Orientation: a linear layer computes `W · X` with `W` of shape
//! `out × in` and `X` of shape `in × tokens`. Weights are quantized per
//! output channel (row of `W`), activations per token (column of `X`).
//! The integer kernel works on the transposes, `Xᵀ (tokens × in)` times
//! `Wᵀ (in × out)`, where those become per-row and per-column scales.
//!
//! Scale search moves magnitude between the two operands along the input
//! dimension: `W · diag(s)` and `diag(s)⁻¹ · X` multiply to the same product
//! but quantize differently. Losses are Frobenius norms.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const QMAX: f64 = 127.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix values must be finite"));
        }
        Ok(RealMatrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        RealMatrix { rows, cols, values }
    }

    /// Standard normal entries.
    pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> RealMatrix {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = RealMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.values[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F`.
    pub fn distance(&self, other: &RealMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self · diag(d)`: column `j` scaled by `d[j]`.
    pub fn scale_cols(&self, d: &[f64]) -> RealMatrix {
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) * d[j])
    }

    /// `diag(d) · self`: row `i` scaled by `d[i]`.
    pub fn scale_rows(&self, d: &[f64]) -> RealMatrix {
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) * d[i])
    }

    pub fn col_abs_max(&self, j: usize) -> f64 {
        (0..self.rows).map(|i| self.get(i, j).abs()).fold(0.0, f64::max)
    }

    pub fn row_abs_max(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn abs_max(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Reads a matrix written as a `rows,cols` header line followed by the
/// values in row-major order, comma or newline separated. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_matrix_csv(text: &str) -> Result<RealMatrix> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Shape("empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|f| f.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Shape(format!("header `{header}` is not `rows,cols`")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Shape(format!("header `{header}` is not `rows,cols`")));
    };
    let mut values = Vec::with_capacity(rows * cols);
    for line in lines {
        for f in line.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            values.push(
                f.parse::<f64>()
                    .map_err(|_| Error::Shape(format!("`{f}` is not a number")))?,
            );
        }
    }
    RealMatrix::new(rows, cols, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One scale per row.
    PerToken,
    /// One scale per column.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
    pub scales: Vec<f64>,
    pub granularity: Granularity,
}

impl QuantizedTensor {
    #[inline]
    pub fn scale_at(&self, i: usize, j: usize) -> f64 {
        match self.granularity {
            Granularity::PerToken => self.scales[i],
            Granularity::PerChannel => self.scales[j],
        }
    }

    pub fn dequantize(&self) -> RealMatrix {
        RealMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.codes[i * self.cols + j] as f64 * self.scale_at(i, j)
        })
    }
}

fn scale_for(absmax: f64) -> f64 {
    if absmax > 0.0 {
        absmax / QMAX
    } else {
        1.0
    }
}

#[inline]
fn encode(v: f64, scale: f64) -> i8 {
    (v / scale).round().clamp(-QMAX, QMAX) as i8
}

pub fn quantize_per_token(x: &RealMatrix) -> QuantizedTensor {
    let scales: Vec<f64> = (0..x.rows).map(|i| scale_for(x.row_abs_max(i))).collect();
    let codes = (0..x.rows * x.cols)
        .map(|idx| encode(x.values[idx], scales[idx / x.cols]))
        .collect();
    QuantizedTensor {
        rows: x.rows,
        cols: x.cols,
        codes,
        scales,
        granularity: Granularity::PerToken,
    }
}

pub fn quantize_per_channel(w: &RealMatrix) -> QuantizedTensor {
    let scales: Vec<f64> = (0..w.cols).map(|j| scale_for(w.col_abs_max(j))).collect();
    let codes = (0..w.rows * w.cols)
        .map(|idx| encode(w.values[idx], scales[idx % w.cols]))
        .collect();
    QuantizedTensor {
        rows: w.rows,
        cols: w.cols,
        codes,
        scales,
        granularity: Granularity::PerChannel,
    }
}

/// `Xq (tokens × in, per token) · Wq (in × out, per channel)` with integer
/// accumulation and one dequantizing multiply per output.
pub fn int8_matmul_reference(xq: &QuantizedTensor, wq: &QuantizedTensor) -> Result<RealMatrix> {
    if xq.granularity != Granularity::PerToken || wq.granularity != Granularity::PerChannel {
        return Err(Error::Granularity(format!(
            "expected per-token activations times per-channel weights, got {:?} x {:?}",
            xq.granularity, wq.granularity
        )));
    }
    if xq.cols != wq.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            xq.rows, xq.cols, wq.rows, wq.cols
        )));
    }
    let (m, k, n) = (xq.rows, xq.cols, wq.cols);
    let mut out = RealMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut acc: i64 = 0;
            for p in 0..k {
                acc += xq.codes[i * k + p] as i64 * wq.codes[p * n + j] as i64;
            }
            out.values[i * n + j] = acc as f64 * (xq.scales[i] * wq.scales[j]);
        }
    }
    Ok(out)
}

/// Quantized `W · X` (out × tokens) through the integer kernel.
pub fn quantized_product(w: &RealMatrix, x: &RealMatrix) -> Result<RealMatrix> {
    if w.cols != x.rows {
        return Err(Error::Shape(format!(
            "W is {}x{}, X is {}x{}",
            w.rows, w.cols, x.rows, x.cols
        )));
    }
    let xq = quantize_per_token(&x.transpose());
    let wq = quantize_per_channel(&w.transpose());
    Ok(int8_matmul_reference(&xq, &wq)?.transpose())
}

/// `‖Q(W) Q(X) − W X‖_F`.
pub fn quantization_error(w: &RealMatrix, x: &RealMatrix) -> Result<f64> {
    let exact = w.matmul(x)?;
    Ok(quantized_product(w, x)?.distance(&exact))
}

/// `L(s) = ‖Q(W·diag(s)) Q(diag(s)⁻¹·X) − W X‖_F` against a precomputed
/// exact product.
pub fn scale_loss(w: &RealMatrix, x: &RealMatrix, s: &[f64], exact: &RealMatrix) -> Result<f64> {
    let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
    Ok(quantized_product(&w.scale_cols(s), &x.scale_rows(&inv))?.distance(exact))
}

/// 64 log-spaced points over `[2⁻⁴, 2⁴]`.
pub fn default_scale_grid() -> Vec<f64> {
    log_grid(64, -4.0, 4.0)
}

pub fn log_grid(points: usize, lo_exp2: f64, hi_exp2: f64) -> Vec<f64> {
    if points == 1 {
        return vec![lo_exp2.exp2()];
    }
    (0..points)
        .map(|i| (lo_exp2 + (hi_exp2 - lo_exp2) * i as f64 / (points - 1) as f64).exp2())
        .collect()
}

/// `k/40` for `k = 1..=40`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=40).map(|k| k as f64 / 40.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleSearchResult {
    /// Per input channel.
    pub s: Vec<f64>,
    pub loss: f64,
    pub loss_at_one: f64,
    /// `curves[j][g]`: loss with channel `j` set to `grid[g]`, the channels
    /// before `j` at their chosen values and those after it at 1.
    pub curves: Vec<Vec<f64>>,
}

/// Index of the smallest loss; ties go to the earlier index.
fn argmin(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate().skip(1) {
        if l < losses[best] {
            best = i;
        }
    }
    best
}

/// Coordinate-wise grid search for `s`. Channels are visited in order;
/// each takes the grid value with the smallest loss (smaller `s` on ties)
/// if that strictly beats its current value, so `L(s*) ≤ L(1)`.
pub fn scale_search(w: &RealMatrix, x: &RealMatrix, grid: &[f64]) -> Result<ScaleSearchResult> {
    if grid.is_empty() || grid.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
        return Err(Error::invalid("scale grid must be nonempty and positive"));
    }
    if w.cols != x.rows {
        return Err(Error::Shape(format!(
            "W is {}x{}, X is {}x{}",
            w.rows, w.cols, x.rows, x.cols
        )));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let exact = w.matmul(x)?;
    let mut s = vec![1.0; w.cols];
    let loss_at_one = scale_loss(w, x, &s, &exact)?;
    let mut current = loss_at_one;
    let mut curves = Vec::with_capacity(w.cols);
    for j in 0..w.cols {
        let mut curve = Vec::with_capacity(sorted.len());
        let keep = s[j];
        for &g in &sorted {
            s[j] = g;
            curve.push(scale_loss(w, x, &s, &exact)?);
        }
        let b = argmin(&curve);
        if curve[b] < current {
            s[j] = sorted[b];
            current = curve[b];
        } else {
            s[j] = keep;
        }
        curves.push(curve);
    }
    Ok(ScaleSearchResult {
        s,
        loss: current,
        loss_at_one,
        curves,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipSearchResult {
    pub alpha: f64,
    pub loss: f64,
    pub loss_at_one: f64,
    /// Loss per grid point, in grid order.
    pub curve: Vec<f64>,
}

/// Clamps every entry to `[α·min, α·max]` of the block.
pub fn clip_block(w: &RealMatrix, alpha: f64) -> RealMatrix {
    let lo = w.values.iter().copied().fold(f64::INFINITY, f64::min) * alpha;
    let hi = w.values.iter().copied().fold(f64::NEG_INFINITY, f64::max) * alpha;
    RealMatrix {
        rows: w.rows,
        cols: w.cols,
        values: w.values.iter().map(|v| v.clamp(lo.min(hi), hi.max(lo))).collect(),
    }
}

/// `‖W X − Q(clip(W, α)) X‖_F` with per-output-channel weight quantization
/// and exact activations.
pub fn clip_loss(w_block: &RealMatrix, x: &RealMatrix, alpha: f64, exact: &RealMatrix) -> Result<f64> {
    let wq = quantize_per_channel(&clip_block(w_block, alpha).transpose())
        .dequantize()
        .transpose();
    Ok(wq.matmul(x)?.distance(exact))
}

/// Grid search for the block clipping factor; ties go to the larger α.
pub fn block_clip_search(w_block: &RealMatrix, x: &RealMatrix, alpha_grid: &[f64]) -> Result<ClipSearchResult> {
    if alpha_grid.is_empty() {
        return Err(Error::invalid("alpha grid is empty"));
    }
    if alpha_grid.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
        return Err(Error::invalid("alpha values must lie in (0, 1]"));
    }
    let exact = w_block.matmul(x)?;
    let curve: Vec<f64> = alpha_grid
        .iter()
        .map(|&a| clip_loss(w_block, x, a, &exact))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for i in 1..curve.len() {
        if curve[i] < curve[best] || (curve[i] == curve[best] && alpha_grid[i] > alpha_grid[best]) {
            best = i;
        }
    }
    Ok(ClipSearchResult {
        alpha: alpha_grid[best],
        loss: curve[best],
        loss_at_one: clip_loss(w_block, x, 1.0, &exact)?,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothingTransform {
    /// `W' = W · diag(d)`, `X' = diag(d)⁻¹ · X`.
    pub d: Vec<f64>,
}

/// Per input channel `j`, `d_j = sqrt(max|X_j·| / max|W_·j|)`, so both
/// operands end up with the same channel range. Channels with a zero side
/// keep `d_j = 1`.
pub fn outlier_suppress(w: &RealMatrix, x: &RealMatrix) -> Result<(RealMatrix, RealMatrix, SmoothingTransform)> {
    if w.cols != x.rows {
        return Err(Error::Shape(format!(
            "W is {}x{}, X is {}x{}",
            w.rows, w.cols, x.rows, x.cols
        )));
    }
    let d: Vec<f64> = (0..w.cols)
        .map(|j| {
            let xm = x.row_abs_max(j);
            let wm = w.col_abs_max(j);
            if xm > 0.0 && wm > 0.0 {
                (xm / wm).sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
    Ok((w.scale_cols(&d), x.scale_rows(&inv), SmoothingTransform { d }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineResult {
    pub naive_error: f64,
    pub search_error: f64,
    pub full_error: f64,
    pub alphas: Vec<f64>,
}

/// Errors of three recipes on one layer: plain max-abs quantization; scale
/// search alone; smoothing, then scale search, then per-block clipping of
/// the transformed weights (`block_rows` output channels per block).
pub fn compare_recipes(
    w: &RealMatrix,
    x: &RealMatrix,
    scale_grid: &[f64],
    alpha_grid: &[f64],
    block_rows: usize,
) -> Result<PipelineResult> {
    if block_rows == 0 {
        return Err(Error::invalid("block_rows must be positive"));
    }
    let exact = w.matmul(x)?;
    let naive_error = quantized_product(w, x)?.distance(&exact);
    let search_error = scale_search(w, x, scale_grid)?.loss;

    let (w1, x1, _) = outlier_suppress(w, x)?;
    let s = scale_search(&w1, &x1, scale_grid)?.s;
    let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
    let w2 = w1.scale_cols(&s);
    let x2 = x1.scale_rows(&inv);
    let mut w3 = w2.clone();
    let mut alphas = Vec::new();
    for start in (0..w2.rows).step_by(block_rows) {
        let end = (start + block_rows).min(w2.rows);
        let block = RealMatrix::from_fn(end - start, w2.cols, |i, j| w2.get(start + i, j));
        let r = block_clip_search(&block, &x2, alpha_grid)?;
        let clipped = clip_block(&block, r.alpha);
        for i in 0..block.rows {
            for j in 0..block.cols {
                w3.set(start + i, j, clipped.get(i, j));
            }
        }
        alphas.push(r.alpha);
    }
    let full_error = quantized_product(&w3, &x2)?.distance(&exact);
    Ok(PipelineResult {
        naive_error,
        search_error,
        full_error,
        alphas,
    })
}

/// A layer with a few activation channels far larger than the rest, the
/// case smoothing is designed for. `W` is `out × in`, `X` is `in × tokens`.
pub fn synthetic_outlier_layer(seed: u64, out: usize, inp: usize, tokens: usize) -> (RealMatrix, RealMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = RealMatrix::random(out, inp, &mut rng);
    let mut x = RealMatrix::random(inp, tokens, &mut rng);
    let outliers = (inp / 8).max(1);
    for _ in 0..outliers {
        let c = rng.random_range(0..inp);
        let gain = 20.0 + 80.0 * rng.random::<f64>();
        for t in 0..tokens {
            let v = x.get(c, t) * gain;
            x.set(c, t, v);
        }
    }
    (w, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpPath {
    Int8Path,
    HighPrecisionPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpDesc {
    pub name: String,
    pub flops: f64,
    /// One of `ffn_matmul`, `attention_matmul`, `moe_expert`, `matmul`,
    /// `normalization`, `gating`, `softmax`, `embedding`.
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantScheme {
    pub assignment: BTreeMap<String, OpPath>,
    pub block_rows: usize,
    pub search_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
}

impl QuantScheme {
    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Matmul-class ops at or above `min_int8_flops` take the INT8 path; the
/// rest, and every precision-sensitive class, stay in high precision.
pub fn classify_operators(ops: &[OpDesc], min_int8_flops: f64) -> Result<QuantScheme> {
    let mut assignment = BTreeMap::new();
    for op in ops {
        let path = match op.tag.as_str() {
            "ffn_matmul" | "attention_matmul" | "moe_expert" | "matmul" => {
                if op.flops >= min_int8_flops {
                    OpPath::Int8Path
                } else {
                    OpPath::HighPrecisionPath
                }
            }
            "normalization" | "gating" | "softmax" | "embedding" => OpPath::HighPrecisionPath,
            other => return Err(Error::UnknownOpClass(other.to_string())),
        };
        if assignment.insert(op.name.clone(), path).is_some() {
            return Err(Error::invalid(format!("operator `{}` listed twice", op.name)));
        }
    }
    Ok(QuantScheme {
        assignment,
        block_rows: 1,
        search_grid: default_scale_grid(),
        alpha_grid: default_alpha_grid(),
    })
}
