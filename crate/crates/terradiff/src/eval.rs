//! Evaluation metrics: Fréchet distance between Gaussian fits of image
//! features, and the directional-gradient seam metric for tiled canvases.

use crate::error::{Error, Result};
use crate::tiler::TileGrid;
use image::RgbImage;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Deterministic image -> feature-vector map.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    fn features(&self, img: &RgbImage) -> Vec<f64>;
    /// Stable identifier recorded in evaluation reports.
    fn id(&self) -> String;
}

/// Small fixed-seed random-feature extractor: resize to 32x32, one random
/// 3x3 conv with ReLU, 4x4 average pooling, then a fixed random projection
/// with tanh. Hermetic stand-in for a pre-trained network; only relative
/// comparisons under the same extractor are meaningful.
pub struct HermeticExtractor {
    seed: u64,
    conv_w: Vec<f64>, // [C_OUT][3][3][3]
    proj: Vec<f64>,   // [DIM][C_OUT*8*8]
}

const HERM_CONV_OUT: usize = 8;
const HERM_DIM: usize = 64;
const HERM_SIDE: usize = 32;

impl HermeticExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let conv_w = crate::nd::Tensor::randn(&[HERM_CONV_OUT * 3 * 9], &mut rng)
            .scale(1.0 / (27f64).sqrt())
            .data;
        let pooled = HERM_CONV_OUT * 8 * 8;
        let proj = crate::nd::Tensor::randn(&[HERM_DIM * pooled], &mut rng)
            .scale(1.0 / (pooled as f64).sqrt())
            .data;
        HermeticExtractor { seed, conv_w, proj }
    }
}

impl FeatureExtractor for HermeticExtractor {
    fn dim(&self) -> usize {
        HERM_DIM
    }

    fn id(&self) -> String {
        format!("hermetic-randconv-v1-seed{}", self.seed)
    }

    fn features(&self, img: &RgbImage) -> Vec<f64> {
        let side = HERM_SIDE;
        let resized = image::imageops::resize(img, side as u32, side as u32, image::imageops::FilterType::Triangle);
        let mut x = vec![0.0f64; 3 * side * side];
        for (px, p) in resized.pixels().enumerate() {
            for c in 0..3 {
                x[c * side * side + px] = p.0[c] as f64 / 255.0;
            }
        }
        // random 3x3 conv, zero pad, ReLU
        let mut conv = vec![0.0f64; HERM_CONV_OUT * side * side];
        for co in 0..HERM_CONV_OUT {
            for y in 0..side {
                for xx in 0..side {
                    let mut acc = 0.0;
                    for ci in 0..3 {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let (sy, sx) = (y + dy, xx + dx);
                                if sy >= 1 && sy <= side && sx >= 1 && sx <= side {
                                    acc += self.conv_w[co * 27 + ci * 9 + dy * 3 + dx]
                                        * x[ci * side * side + (sy - 1) * side + sx - 1];
                                }
                            }
                        }
                    }
                    conv[co * side * side + y * side + xx] = acc.max(0.0);
                }
            }
        }
        // 4x4 average pool -> 8x8 per channel
        let pooled_side = side / 4;
        let mut pooled = vec![0.0f64; HERM_CONV_OUT * pooled_side * pooled_side];
        for co in 0..HERM_CONV_OUT {
            for py in 0..pooled_side {
                for px in 0..pooled_side {
                    let mut acc = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            acc += conv[co * side * side + (py * 4 + dy) * side + px * 4 + dx];
                        }
                    }
                    pooled[co * pooled_side * pooled_side + py * pooled_side + px] = acc / 16.0;
                }
            }
        }
        // fixed random projection + tanh
        let mut out = vec![0.0f64; HERM_DIM];
        for (d, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, p) in pooled.iter().enumerate() {
                acc += self.proj[d * pooled.len() + j] * p;
            }
            *o = acc.tanh();
        }
        out
    }
}

/// Streaming Gaussian fit of a feature distribution (mean + covariance),
/// mergeable across shards.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureStats {
    pub dim: usize,
    pub count: usize,
    mean: Vec<f64>,
    /// Sum of outer products of centered deviations (row-major dim x dim).
    m2: Vec<f64>,
}

impl FeatureStats {
    pub fn new(dim: usize) -> Self {
        FeatureStats { dim, count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim * dim] }
    }

    /// Build directly from moments (closed-form oracles in tests).
    pub fn from_moments(mean: Vec<f64>, sigma: Vec<f64>, count: usize) -> Result<Self> {
        let dim = mean.len();
        if sigma.len() != dim * dim {
            return Err(Error::ShapeMismatch("sigma must be dim x dim".into()));
        }
        if count < 2 {
            return Err(Error::InvalidInput("count must be >= 2".into()));
        }
        let m2 = sigma.iter().map(|v| v * (count - 1) as f64).collect();
        Ok(FeatureStats { dim, count, mean, m2 })
    }

    /// Welford update with the outer-product extension.
    pub fn push(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.dim, "feature dim mismatch");
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = v.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        let delta2: Vec<f64> = v.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.m2[i * self.dim + j] += delta[i] * delta2[j];
            }
        }
    }

    /// Associative merge of two shards (Chan et al. parallel update).
    pub fn merge(&self, other: &FeatureStats) -> Result<FeatureStats> {
        if self.dim != other.dim {
            return Err(Error::ShapeMismatch("merging stats of different dims".into()));
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let mean: Vec<f64> = self
            .mean
            .iter()
            .zip(&delta)
            .map(|(a, d)| a + d * nb / n)
            .collect();
        let mut m2 = vec![0.0; self.dim * self.dim];
        for i in 0..self.dim {
            for j in 0..self.dim {
                let k = i * self.dim + j;
                m2[k] = self.m2[k] + other.m2[k] + delta[i] * delta[j] * na * nb / n;
            }
        }
        Ok(FeatureStats { dim: self.dim, count: self.count + other.count, mean, m2 })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mean
    }

    /// Sample covariance; requires at least two observations.
    pub fn sigma(&self) -> Result<Vec<f64>> {
        if self.count < 2 {
            return Err(Error::InvalidInput(format!(
                "covariance undefined for {} image(s)",
                self.count
            )));
        }
        let denom = (self.count - 1) as f64;
        Ok(self.m2.iter().map(|v| v / denom).collect())
    }
}

/// Fit feature statistics over an image set. Extraction runs in parallel;
/// accumulation is sequential in input order, so results are deterministic.
pub fn extract_features(images: &[RgbImage], extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 images for covariance, got {}",
            images.len()
        )));
    }
    let feats: Vec<Vec<f64>> = images.par_iter().map(|img| extractor.features(img)).collect();
    let mut stats = FeatureStats::new(extractor.dim());
    for f in &feats {
        stats.push(f);
    }
    Ok(stats)
}

/// Principal square root of a symmetric PSD matrix; tiny negative
/// eigenvalues from round-off are clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between the two Gaussian fits:
/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::ShapeMismatch(format!("feature dims {} vs {}", a.dim, b.dim)));
    }
    let d = a.dim;
    let sa = DMatrix::from_row_slice(d, d, &a.sigma()?);
    let sb = DMatrix::from_row_slice(d, d, &b.sigma()?);
    if a.mu().iter().chain(b.mu()).any(|v| !v.is_finite())
        || sa.iter().chain(sb.iter()).any(|v| !v.is_finite())
    {
        return Err(Error::InvalidInput("non-finite feature statistics".into()));
    }
    let mean_term: f64 = a
        .mu()
        .iter()
        .zip(b.mu())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    // Tr((Sa Sb)^{1/2}) via the symmetric form sqrt(Sa)·Sb·sqrt(Sa)
    let sqrt_a = sqrtm_psd(&sa);
    let inner = &sqrt_a * &sb * &sqrt_a;
    let tr_sqrt: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Directional seam gradients of a tiled canvas, 8-bit scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamMetrics {
    /// Mean |I(p) - I(q)| across vertical seam lines (left-right pairs).
    pub horizontal: f64,
    /// Mean |I(p) - I(q)| across horizontal seam lines (top-bottom pairs).
    pub vertical: f64,
    pub average: f64,
}

/// Measure discontinuities at the naive-paste tile boundaries (interior
/// stride multiples) of the grid.
pub fn seam_gradient(canvas: &RgbImage, grid: &TileGrid) -> Result<SeamMetrics> {
    let (w, h) = (canvas.width() as usize, canvas.height() as usize);
    if (w, h) != (grid.canvas_w, grid.canvas_h) {
        return Err(Error::Geometry(format!(
            "canvas {w}x{h} does not match grid {}x{}",
            grid.canvas_w, grid.canvas_h
        )));
    }
    let stride = grid.stride;
    let mut h_sum = 0.0;
    let mut h_cnt = 0usize;
    for col in 1..grid.cols {
        let x = col * stride;
        for y in 0..h {
            let p = canvas.get_pixel((x - 1) as u32, y as u32);
            let q = canvas.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                h_sum += (p.0[c] as f64 - q.0[c] as f64).abs();
                h_cnt += 1;
            }
        }
    }
    let mut v_sum = 0.0;
    let mut v_cnt = 0usize;
    for row in 1..grid.rows {
        let y = row * stride;
        for x in 0..w {
            let p = canvas.get_pixel(x as u32, (y - 1) as u32);
            let q = canvas.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                v_sum += (p.0[c] as f64 - q.0[c] as f64).abs();
                v_cnt += 1;
            }
        }
    }
    let horizontal = if h_cnt == 0 { 0.0 } else { h_sum / h_cnt as f64 };
    let vertical = if v_cnt == 0 { 0.0 } else { v_sum / v_cnt as f64 };
    Ok(SeamMetrics { horizontal, vertical, average: 0.5 * (horizontal + vertical) })
}

/// Report emitted by the `evaluate` command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub seam_horizontal: Option<f64>,
    pub seam_vertical: Option<f64>,
    pub seam_average: Option<f64>,
    pub n_real: usize,
    pub n_generated: usize,
    pub extractor_id: String,
}
