//! Dense numeric kernels shared by the rest of the crate.
//!
//! Values are stored as `f32`; every reduction (matrix products, convolution
//! windows, norms) accumulates in `f64` with a fixed loop order so results are
//! reproducible bit for bit on a given platform.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Error, Result};

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Dense `height × width × channels` grid, row-major and channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Wraps `data`, checking its length and that every value is finite.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "grid {}x{}x{} needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial cells, `height × width`.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        let idx = (y * self.width + x) * self.channels + c;
        self.data[idx] = value;
    }

    /// Channel vector stored at cell `(y, x)`.
    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn same_spatial(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Returns `true` when every value is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
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

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
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
}

/// `a · b` for `a: n×c`, `b: c×m`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err!(
            "matmul {}x{} by {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        ));
    }
    let bt = b.transpose();
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data: matmul_nt(&a.data, &bt.data, a.rows, b.cols, a.cols),
    })
}

/// `a · btᵀ` over raw row-major buffers: `a` is `n×k`, `bt` is `m×k`.
///
/// The inner `k` loop always runs in ascending order with an `f64`
/// accumulator, so [`matmul`] and callers that already hold the transposed
/// operand get identical bits.
const LANES: usize = 8;

/// f64 dot product over eight interleaved partial sums, combined in a fixed
/// order. Same result on every run; the compiler can vectorize it.
fn dot_lanes(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += f64::from(x[l]) * f64::from(y[l]);
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += f64::from(*x) * f64::from(*y);
    }
    acc.iter().sum::<f64>() + tail
}

pub(crate) fn matmul_nt(a: &[f32], bt: &[f32], n: usize, m: usize, k: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(bt.len(), m * k);
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let col = &bt[j * k..(j + 1) * k];
            out[i * m + j] = dot_lanes(row, col) as f32;
        }
    }
    out
}

/// 3×3 convolution weights, laid out `out × in × 3 × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    out_channels: usize,
    in_channels: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv3x3 {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if weights.len() != out_channels * in_channels * 9 {
            return Err(shape_err!(
                "conv weights {}x{}x3x3 need {} values, got {}",
                out_channels,
                in_channels,
                out_channels * in_channels * 9,
                weights.len()
            ));
        }
        if bias.len() != out_channels {
            return Err(shape_err!(
                "conv bias needs {} values, got {}",
                out_channels,
                bias.len()
            ));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conv weights"));
        }
        Ok(Self {
            out_channels,
            in_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            weights: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }
}

/// Same-padded (zero padding 1, stride 1) 3×3 convolution.
pub fn conv3x3_forward(input: &Grid, conv: &Conv3x3) -> Result<Grid> {
    if input.channels != conv.in_channels {
        return Err(shape_err!(
            "conv expects {} input channels, grid has {}",
            conv.in_channels,
            input.channels
        ));
    }
    let (h, w, cin, cout) = (input.height, input.width, conv.in_channels, conv.out_channels);
    let mut out = Grid::zeros(h, w, cout);
    // Patch layout matches the kernel's `in × 3 × 3` inner layout.
    let mut patch = vec![0.0f32; cin * 9];
    for y in 0..h {
        for x in 0..w {
            patch.iter_mut().for_each(|v| *v = 0.0);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = input.cell(sy as usize, sx as usize);
                    for (ci, &v) in src.iter().enumerate() {
                        patch[ci * 9 + ky * 3 + kx] = v;
                    }
                }
            }
            let dst = out.cell_mut(y, x);
            for (co, slot) in dst.iter_mut().enumerate() {
                let kernel = &conv.weights[co * cin * 9..(co + 1) * cin * 9];
                let mut acc = f64::from(conv.bias[co]);
                for (wv, pv) in kernel.iter().zip(&patch) {
                    acc += f64::from(*wv) * f64::from(*pv);
                }
                *slot = acc as f32;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    sigmoid_f64(f64::from(x)) as f32
}

pub fn sigmoid_grid(g: &Grid) -> Grid {
    g.map(sigmoid)
}

pub fn relu_grid(g: &Grid) -> Grid {
    g.map(|v| v.max(0.0))
}

pub fn l2_norm(v: &[f32]) -> f64 {
    libm::sqrt(v.iter().map(|&x| f64::from(x) * f64::from(x)).sum())
}

/// Scales `v` to unit length in place. Vectors with norm at or below
/// [`NORM_EPS`] are left untouched.
pub fn l2_normalize_in_place(v: &mut [f32]) {
    let norm = l2_norm(v);
    if norm <= NORM_EPS {
        return;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
}

pub fn l2_normalize(v: &[f32]) -> Vec<f32> {
    let mut out = v.to_vec();
    l2_normalize_in_place(&mut out);
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    dot_lanes(&a[..n], &b[..n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0f64; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i * b.cols() + j] += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
                }
            }
        }
        out
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Direct six-loop convolution used as the reference.
    fn direct_conv(input: &Grid, conv: &Conv3x3) -> Vec<f64> {
        let (h, w) = (input.height() as isize, input.width() as isize);
        let (cin, cout) = (conv.in_channels(), conv.out_channels());
        let mut out = vec![0.0f64; (h * w) as usize * cout];
        for co in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = f64::from(conv.bias()[co]);
                    for ci in 0..cin {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, x + kx);
                                if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                    continue;
                                }
                                let wi = ((co * cin + ci) * 3 + (ky + 1) as usize) * 3
                                    + (kx + 1) as usize;
                                acc += f64::from(conv.weights()[wi])
                                    * f64::from(input.get(sy as usize, sx as usize, ci));
                            }
                        }
                    }
                    out[((y * w + x) as usize) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_times_b_is_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_matrix(&mut rng, 3, 5);
        assert_eq!(matmul(&Matrix::identity(3), &b).unwrap(), b);
    }

    #[test]
    fn small_hand_product() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 8, 16);
        let b = random_matrix(&mut rng, 16, 8);
        let c = matmul(&a, &b).unwrap();
        for (got, want) in c.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((f64::from(*got) - want).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_many_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (n, k, m) = (
                rng.random_range(1..=32),
                rng.random_range(1..=32),
                rng.random_range(1..=32),
            );
            let a = random_matrix(&mut rng, n, k);
            let b = random_matrix(&mut rng, k, m);
            let c = matmul(&a, &b).unwrap();
            for (got, want) in c.data().iter().zip(naive_matmul(&a, &b)) {
                assert!((f64::from(*got) - want).abs() < 1e-5);
            }
            assert_eq!(matmul(&a, &Matrix::identity(k)).is_err(), false);
            let ai = matmul(&a, &Matrix::identity(k)).unwrap();
            assert_eq!(ai, a);
        }
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = (0..4 * 5 * 2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let input = Grid::from_vec(4, 5, 2, data).unwrap();
        let conv = Conv3x3::new(3, 2, vec![0.0; 3 * 2 * 9], vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv3x3_forward(&input, &conv).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (4, 5, 3));
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.cell(y, x), &[0.5, -1.0, 2.0]);
            }
        }
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..6 * 4).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let input = Grid::from_vec(6, 4, 1, data).unwrap();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let conv = Conv3x3::new(1, 1, w, vec![0.0]).unwrap();
        assert_eq!(conv3x3_forward(&input, &conv).unwrap(), input);
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let data = (0..5 * 5 * 2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let input = Grid::from_vec(5, 5, 2, data).unwrap();
            let w = (0..3 * 2 * 9).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let b = (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let conv = Conv3x3::new(3, 2, w, b).unwrap();
            let out = conv3x3_forward(&input, &conv).unwrap();
            for (got, want) in out.data().iter().zip(direct_conv(&input, &conv)) {
                assert!((f64::from(*got) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Grid::zeros(3, 3, 2);
        let conv = Conv3x3::zeros(1, 3);
        assert!(conv3x3_forward(&input, &conv).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid_f64(libm::log(3.0)) - 0.75).abs() < 1e-12);
        let tiny = sigmoid(-100.0);
        assert!(tiny > 0.0 && tiny <= 1e-6);
        assert_eq!(sigmoid(100.0), 1.0);
        assert!(!sigmoid(-1e30).is_nan());
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn grid_rejects_bad_length_and_nan() {
        assert!(Grid::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Grid::from_vec(1, 1, 1, vec![f32::NAN]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sigmoid_symmetric_and_open(x in -60.0f32..60.0) {
                let s = sigmoid(x);
                prop_assert!(s > 0.0 && s < 1.0 || x.abs() > 16.0);
                prop_assert!((f64::from(s) + f64::from(sigmoid(-x)) - 1.0).abs() < 1e-6);
            }

            #[test]
            fn normalized_norm_is_zero_or_one(v in proptest::collection::vec(-100.0f32..100.0, 1..64)) {
                let n = l2_norm(&l2_normalize(&v));
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
            }
        }
    }
}
