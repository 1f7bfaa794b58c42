//! Dense `f32` kernels: feature maps, vectors, matrices and the handful of
//! operations the filter, the fusion stage and the toy detector are built from.
//!
//! Layout is row-major with channels outermost (`data[(c * h + y) * w + x]`).
//! Reductions (means, standard deviations, dot products) accumulate in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("spatial size {height}x{width} is below the required {min}x{min}")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("cannot pool {from_h}x{from_w} onto {to_h}x{to_w}: grids do not divide evenly")]
    NotDivisible { from_h: usize, from_w: usize, to_h: usize, to_w: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension must be positive")]
    Empty,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Pyramid level a map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L2,
    L3,
    L4,
    Fused,
}

impl Level {
    /// The three backbone levels, finest first.
    pub const PYRAMID: [Level; 3] = [Level::L2, Level::L3, Level::L4];

    pub fn tag(self) -> u32 {
        match self {
            Level::L2 => 2,
            Level::L3 => 3,
            Level::L4 => 4,
            Level::Fused => 0,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            2 => Some(Level::L2),
            3 => Some(Level::L3),
            4 => Some(Level::L4),
            0 => Some(Level::Fused),
            _ => None,
        }
    }
}

fn all_finite(data: &[f32]) -> bool {
    data.iter().all(|v| v.is_finite())
}

/// Rank-3 `channels x height x width` map tagged with its pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    level: Level,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        level: Level,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::Empty);
        }
        if data.len() != channels * height * width {
            return Err(TensorError::Shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(TensorError::NonFinite("feature map"));
        }
        Ok(Self { channels, height, width, data, level })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, level: Level) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width], level)
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        level: Level,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data, level)
    }

    // Internal constructor for kernels whose output is finite by construction.
    pub(crate) fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        level: Level,
    ) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self { channels, height, width, data, level }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn with_level(mut self, level: Level) -> Self {
        self.level = level;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    fn map_channels(&self, mut f: impl FnMut(&[f32], &mut [f32])) -> FeatureMap {
        let n = self.plane_len();
        let mut out = vec![0.0f32; self.data.len()];
        for (src, dst) in self.data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            f(src, dst);
        }
        FeatureMap::from_parts(self.channels, self.height, self.width, out, self.level)
    }
}

/// Dense vector; the dimension is always at least one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(TensorError::Empty);
        }
        if !all_finite(&data) {
            return Err(TensorError::NonFinite("vector"));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub(crate) fn from_parts(data: Vec<f32>) -> Self {
        debug_assert!(!data.is_empty());
        Self(data)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::Empty);
        }
        if data.len() != rows * cols {
            return Err(TensorError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(TensorError::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
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

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Eight independent lanes keep the f64 accumulation vectorizable.
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += f64::from(x[l]) * f64::from(y[l]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn mean_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| f64::from(v)).sum::<f64>() / xs.len() as f64
}

/// Elementwise `max(x, 0)`.
pub fn relu(m: &FeatureMap) -> FeatureMap {
    m.map_channels(|src, dst| {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s.max(0.0);
        }
    })
}

/// Per-channel spatial mean and population standard deviation.
pub(crate) fn channel_moments(plane: &[f32]) -> (f64, f64) {
    let mean = mean_f64(plane);
    let var = plane
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / plane.len() as f64;
    (mean, var.sqrt())
}

/// Per channel: `(x - mean) / (std + eps)` over the spatial plane.
pub fn spatial_standardize(m: &FeatureMap, eps: f32) -> FeatureMap {
    debug_assert!(eps > 0.0);
    let eps = f64::from(eps);
    m.map_channels(|src, dst| {
        let (mean, std) = channel_moments(src);
        let denom = std + eps;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((f64::from(s) - mean) / denom) as f32;
        }
    })
}

/// Per-channel spatial mean; `dim == channels`.
pub fn spatial_average(m: &FeatureMap) -> Vector {
    let out = (0..m.channels).map(|c| mean_f64(m.channel(c)) as f32).collect();
    Vector::from_parts(out)
}

/// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
pub fn max_pool2(m: &FeatureMap) -> Result<FeatureMap> {
    if m.height < 2 || m.width < 2 {
        return Err(TensorError::TooSmall { height: m.height, width: m.width, min: 2 });
    }
    let (oh, ow) = (m.height / 2, m.width / 2);
    let mut out = Vec::with_capacity(m.channels * oh * ow);
    for c in 0..m.channels {
        let plane = m.channel(c);
        for y in 0..oh {
            let r0 = &plane[(2 * y) * m.width..];
            let r1 = &plane[(2 * y + 1) * m.width..];
            for x in 0..ow {
                let v = r0[2 * x].max(r0[2 * x + 1]).max(r1[2 * x]).max(r1[2 * x + 1]);
                out.push(v);
            }
        }
    }
    Ok(FeatureMap::from_parts(m.channels, oh, ow, out, m.level))
}

/// Per-channel maximum over the whole plane, kept as a `channels x 1 x 1` map.
pub fn global_max_pool(m: &FeatureMap) -> FeatureMap {
    let out = (0..m.channels)
        .map(|c| m.channel(c).iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    FeatureMap::from_parts(m.channels, 1, 1, out, m.level)
}

/// `a` followed by `b`.
pub fn concat(a: &Vector, b: &Vector) -> Vector {
    let mut out = Vec::with_capacity(a.dim() + b.dim());
    out.extend_from_slice(a.as_slice());
    out.extend_from_slice(b.as_slice());
    Vector::from_parts(out)
}

/// `w * x + b`.
pub fn affine(w: &Matrix, b: &Vector, x: &Vector) -> Result<Vector> {
    if x.dim() != w.cols {
        return Err(TensorError::Shape(format!(
            "input of dim {} for a {}x{} weight",
            x.dim(),
            w.rows,
            w.cols
        )));
    }
    if b.dim() != w.rows {
        return Err(TensorError::Shape(format!(
            "bias of dim {} for a {}x{} weight",
            b.dim(),
            w.rows,
            w.cols
        )));
    }
    let out = (0..w.rows)
        .map(|r| (dot(w.row(r), x.as_slice()) + f64::from(b.0[r])) as f32)
        .collect();
    Ok(Vector::from_parts(out))
}

/// Two-way softmax with max subtraction.
pub fn softmax2(logits: [f32; 2]) -> [f32; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = f64::from(logits[0] - m).exp();
    let e1 = f64::from(logits[1] - m).exp();
    let s = e0 + e1;
    [(e0 / s) as f32, (e1 / s) as f32]
}

/// Block-average pooling onto a `target_h x target_w` grid.
pub fn downsample_avg(m: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    if target_h == 0
        || target_w == 0
        || m.height % target_h != 0
        || m.width % target_w != 0
    {
        return Err(TensorError::NotDivisible {
            from_h: m.height,
            from_w: m.width,
            to_h: target_h,
            to_w: target_w,
        });
    }
    let (bh, bw) = (m.height / target_h, m.width / target_w);
    if bh == 1 && bw == 1 {
        return Ok(m.clone());
    }
    let norm = (bh * bw) as f64;
    let mut out = Vec::with_capacity(m.channels * target_h * target_w);
    for c in 0..m.channels {
        let plane = m.channel(c);
        for ty in 0..target_h {
            for tx in 0..target_w {
                let mut acc = 0.0f64;
                for y in ty * bh..(ty + 1) * bh {
                    let row = &plane[y * m.width + tx * bw..y * m.width + (tx + 1) * bw];
                    acc += row.iter().map(|&v| f64::from(v)).sum::<f64>();
                }
                out.push((acc / norm) as f32);
            }
        }
    }
    Ok(FeatureMap::from_parts(m.channels, target_h, target_w, out, m.level))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, Level::L4, |_, _, _| rng.random_range(-3.0..3.0)).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn relu_sign_cases() {
        let m = FeatureMap::new(1, 2, 2, vec![-1.0, 2.0, 0.0, -3.0], Level::L4).unwrap();
        assert_eq!(relu(&m).data(), &[0.0, 2.0, 0.0, 0.0]);
        let z = FeatureMap::zeros(3, 2, 2, Level::L2).unwrap();
        assert_eq!(relu(&z), z);
    }

    #[test]
    fn relu_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_map(&mut rng, 4, 5, 5);
        let out = relu(&m);
        for c in 0..4 {
            for y in 0..5 {
                for x in 0..5 {
                    let v = m.get(c, y, x);
                    assert_eq!(out.get(c, y, x), if v > 0.0 { v } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn standardize_constant_and_two_valued() {
        let m = FeatureMap::new(1, 2, 2, vec![5.0; 4], Level::L4).unwrap();
        assert_eq!(spatial_standardize(&m, 1e-5).data(), &[0.0; 4]);
        let m = FeatureMap::new(1, 2, 2, vec![0.0, 2.0, 0.0, 2.0], Level::L4).unwrap();
        for (v, e) in spatial_standardize(&m, 1e-5).data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((v - e).abs() < 1e-4, "{v} vs {e}");
        }
    }

    #[test]
    fn standardize_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_map(&mut rng, 8, 6, 6);
        let out = spatial_standardize(&m, 1e-5);
        for c in 0..8 {
            let mut sum = 0.0f64;
            for y in 0..6 {
                for x in 0..6 {
                    sum += m.get(c, y, x) as f64;
                }
            }
            let mean = sum / 36.0;
            let mut ss = 0.0f64;
            for y in 0..6 {
                for x in 0..6 {
                    ss += (m.get(c, y, x) as f64 - mean).powi(2);
                }
            }
            let std = (ss / 36.0).sqrt();
            let mut out_mean = 0.0f64;
            for y in 0..6 {
                for x in 0..6 {
                    let e = (m.get(c, y, x) as f64 - mean) / (std + 1e-5);
                    assert!(rel_close(out.get(c, y, x) as f64, e, 1e-5));
                    out_mean += out.get(c, y, x) as f64;
                }
            }
            assert!((out_mean / 36.0).abs() < 1e-5);
        }
    }

    #[test]
    fn spatial_average_cases() {
        let m = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], Level::L4).unwrap();
        assert_eq!(spatial_average(&m).as_slice(), &[2.5]);
        let z = FeatureMap::zeros(7, 3, 3, Level::L4).unwrap();
        assert_eq!(spatial_average(&z), Vector::zeros(7).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(&mut rng, 5, 7, 3);
        let avg = spatial_average(&m);
        for c in 0..5 {
            let mut acc = 0.0f64;
            for y in 0..7 {
                for x in 0..3 {
                    acc += m.get(c, y, x) as f64;
                }
            }
            assert!((avg.as_slice()[c] as f64 - acc / 21.0).abs() < 1e-6);
        }
    }

    #[test]
    fn max_pool_cases() {
        let m = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], Level::L4).unwrap();
        assert_eq!(max_pool2(&m).unwrap().data(), &[4.0]);

        let c = FeatureMap::new(2, 4, 6, vec![1.5; 48], Level::L4).unwrap();
        let p = max_pool2(&c).unwrap();
        assert_eq!((p.channels(), p.height(), p.width()), (2, 2, 3));
        assert!(p.data().iter().all(|&v| v == 1.5));

        let one_row = FeatureMap::zeros(1, 1, 4, Level::L4).unwrap();
        assert!(matches!(max_pool2(&one_row), Err(TensorError::TooSmall { .. })));
    }

    #[test]
    fn max_pool_odd_grid_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_map(&mut rng, 1, 5, 5);
        let p = max_pool2(&m).unwrap();
        assert_eq!((p.height(), p.width()), (2, 2));
        for y in 0..2 {
            for x in 0..2 {
                let mut best = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(m.get(0, 2 * y + dy, 2 * x + dx));
                    }
                }
                assert_eq!(p.get(0, y, x), best);
            }
        }
    }

    #[test]
    fn concat_cases() {
        let a = Vector::new(vec![1.0, 2.0]).unwrap();
        let b = Vector::new(vec![3.0]).unwrap();
        assert_eq!(concat(&a, &b).as_slice(), &[1.0, 2.0, 3.0]);
        let z = Vector::zeros(1).unwrap();
        assert_eq!(concat(&z, &z).as_slice(), &[0.0, 0.0]);
        assert_eq!(Vector::new(vec![]), Err(TensorError::Empty));
    }

    #[test]
    fn affine_cases() {
        let x = Vector::new(vec![2.0, 3.0]).unwrap();
        let id = Matrix::identity(2).unwrap();
        assert_eq!(affine(&id, &Vector::zeros(2).unwrap(), &x).unwrap(), x);
        let w = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let b = Vector::new(vec![1.0]).unwrap();
        assert_eq!(affine(&w, &b, &x).unwrap().as_slice(), &[6.0]);
        assert!(affine(&w, &b, &Vector::zeros(3).unwrap()).is_err());
        assert!(affine(&w, &Vector::zeros(2).unwrap(), &x).is_err());
    }

    #[test]
    fn affine_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rows, cols) = (512, 128);
        let w: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = affine(
            &Matrix::new(rows, cols, w.clone()).unwrap(),
            &Vector::new(b.clone()).unwrap(),
            &Vector::new(x.clone()).unwrap(),
        )
        .unwrap();
        for r in 0..rows {
            let mut acc = b[r] as f64;
            for c in 0..cols {
                acc += w[r * cols + c] as f64 * x[c] as f64;
            }
            assert!(rel_close(out.as_slice()[r] as f64, acc, 1e-5));
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax2([0.0, 0.0]), [0.5, 0.5]);
        let p = softmax2([1000.0, 0.0]);
        assert!(p[0] > 0.999_999 && p[1] >= 0.0 && p[1] < 1e-6);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn downsample_cases() {
        let m = FeatureMap::new(1, 4, 4, vec![3.0; 16], Level::L2).unwrap();
        let d = downsample_avg(&m, 2, 2).unwrap();
        assert_eq!(d.data(), &[3.0; 4]);
        let m = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], Level::L2).unwrap();
        assert_eq!(downsample_avg(&m, 1, 1).unwrap().data(), &[2.5]);
        assert!(matches!(downsample_avg(&m, 3, 3), Err(TensorError::NotDivisible { .. })));
    }

    #[test]
    fn downsample_matches_block_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_map(&mut rng, 2, 8, 8);
        let d = downsample_avg(&m, 2, 2).unwrap();
        for c in 0..2 {
            for ty in 0..2 {
                for tx in 0..2 {
                    let mut acc = 0.0f64;
                    for y in 0..4 {
                        for x in 0..4 {
                            acc += m.get(c, ty * 4 + y, tx * 4 + x) as f64;
                        }
                    }
                    assert!(rel_close(d.get(c, ty, tx) as f64, acc / 16.0, 1e-6));
                }
            }
        }
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(FeatureMap::new(1, 2, 2, vec![0.0; 3], Level::L4).is_err());
        assert!(FeatureMap::new(1, 1, 1, vec![f32::NAN], Level::L4).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Vector::new(vec![f32::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            z in -50.0f32..50.0, c in -50.0f32..50.0
        ) {
            let p = softmax2([z, 0.0]);
            let q = softmax2([z + c, c]);
            prop_assert!(((p[0] + p[1]) as f64 - 1.0).abs() < 1e-6);
            prop_assert!(p[0] > 0.0 || z < -40.0);
            prop_assert!((p[0] - q[0]).abs() < 1e-5);
        }

        #[test]
        fn kernels_keep_channels_and_stay_finite(
            c in 1usize..6, h in 2usize..9, w in 2usize..9, seed in 0u64..1000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_map(&mut rng, c, h, w);
            for out in [relu(&m), spatial_standardize(&m, 1e-5), max_pool2(&m).unwrap()] {
                prop_assert_eq!(out.channels(), c);
                prop_assert!(out.data().iter().all(|v| v.is_finite()));
            }
            prop_assert_eq!(spatial_average(&m).dim(), c);
        }
    }
}
