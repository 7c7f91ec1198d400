//! High-order degradation pipeline that synthesizes (low-res, high-res)
//! training pairs: each stage applies blur, resize, additive noise and a
//! real JPEG round-trip, and `order` stages are chained so the final output
//! is exactly `1/final_scale` of the input on each side.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::FilterType;
use image::{Rgb32FImage, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    /// Number of chained simple degradation stages.
    pub order: usize,
    /// Odd kernel sizes the blur sampler may pick from.
    pub kernel_size_choices: Vec<usize>,
    pub blur_sigma_range: (f64, f64),
    /// Probability of drawing a windowed-sinc kernel instead of a Gaussian.
    pub sinc_prob: f64,
    pub sinc_cutoff_range: (f64, f64),
    /// Probability that a Gaussian draw is anisotropic.
    pub aniso_prob: f64,
    /// Intermediate-stage resize factor range (output = input × r).
    pub resize_range: (f64, f64),
    /// Gaussian read-noise σ range on the 8-bit scale.
    pub gaussian_noise_sigma_range: (f64, f64),
    pub poisson_scale_range: (f64, f64),
    pub gray_noise_prob: f64,
    pub jpeg_quality_range: (u8, u8),
    /// Overall downscale factor between the pair members.
    pub final_scale: usize,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            order: 2,
            kernel_size_choices: vec![7, 9, 11, 13, 15, 17, 19, 21],
            blur_sigma_range: (0.2, 3.0),
            sinc_prob: 0.1,
            sinc_cutoff_range: (PI / 3.0, PI),
            aniso_prob: 0.4,
            resize_range: (0.5, 2.0),
            gaussian_noise_sigma_range: (1.0, 25.0),
            poisson_scale_range: (0.05, 2.5),
            gray_noise_prob: 0.5,
            jpeg_quality_range: (30, 95),
            final_scale: 4,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let (qlo, qhi) = self.jpeg_quality_range;
        if qlo < 1 || qhi > 100 || qlo > qhi {
            return Err(Error::InvalidConfig(format!("jpeg_quality_range ({qlo},{qhi}) not within [1,100]")));
        }
        if self.order == 0 {
            return Err(Error::InvalidConfig("order must be >= 1".into()));
        }
        if self.final_scale == 0 {
            return Err(Error::InvalidConfig("final_scale must be >= 1".into()));
        }
        if self.kernel_size_choices.iter().any(|&k| k % 2 == 0 || k == 0) {
            return Err(Error::InvalidConfig("kernel sizes must be odd".into()));
        }
        if self.blur_sigma_range.0 <= 0.0 || self.resize_range.0 <= 0.0 {
            return Err(Error::InvalidConfig("ranges must be positive".into()));
        }
        Ok(())
    }

    /// Bicubic-only ablation baseline: one stage, delta kernel, exact
    /// bicubic downscale, no noise, near-lossless JPEG.
    pub fn bicubic_only(final_scale: usize, seed: u64) -> Self {
        DegradationConfig {
            order: 1,
            kernel_size_choices: vec![1],
            blur_sigma_range: (1e-6, 1e-6),
            sinc_prob: 0.0,
            aniso_prob: 0.0,
            gaussian_noise_sigma_range: (0.0, 0.0),
            poisson_scale_range: (0.0, 0.0),
            gray_noise_prob: 0.0,
            jpeg_quality_range: (100, 100),
            final_scale,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    IsotropicGaussian,
    AnisotropicGaussian,
    Sinc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub size: usize,
    /// σ_x for Gaussians; unused for sinc.
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Rotation in radians (anisotropic Gaussian only).
    pub rotation: f64,
    /// Angular cutoff for the windowed sinc.
    pub cutoff: f64,
}

impl KernelSpec {
    pub fn isotropic(size: usize, sigma: f64) -> Self {
        KernelSpec { kind: KernelKind::IsotropicGaussian, size, sigma_x: sigma, sigma_y: sigma, rotation: 0.0, cutoff: 0.0 }
    }

    pub fn anisotropic(size: usize, sigma_x: f64, sigma_y: f64, rotation: f64) -> Self {
        KernelSpec { kind: KernelKind::AnisotropicGaussian, size, sigma_x, sigma_y, rotation, cutoff: 0.0 }
    }

    pub fn sinc(size: usize, cutoff: f64) -> Self {
        KernelSpec { kind: KernelKind::Sinc, size, sigma_x: 0.0, sigma_y: 0.0, rotation: 0.0, cutoff }
    }
}

/// Build a normalized 2-D blur kernel (row-major `size`×`size`).
pub fn make_blur_kernel(spec: &KernelSpec) -> Result<Vec<f64>> {
    if spec.size % 2 == 0 || spec.size == 0 {
        return Err(Error::InvalidInput(format!("kernel size {} must be odd", spec.size)));
    }
    match spec.kind {
        KernelKind::IsotropicGaussian | KernelKind::AnisotropicGaussian => {
            if spec.sigma_x <= 0.0 || spec.sigma_y <= 0.0 {
                return Err(Error::InvalidInput("blur sigma must be positive".into()));
            }
        }
        KernelKind::Sinc => {
            if spec.cutoff <= 0.0 {
                return Err(Error::InvalidInput("sinc cutoff must be positive".into()));
            }
        }
    }
    let half = (spec.size / 2) as isize;
    let mut k = Vec::with_capacity(spec.size * spec.size);
    for dy in -half..=half {
        for dx in -half..=half {
            let (x, y) = (dx as f64, dy as f64);
            let v = match spec.kind {
                KernelKind::IsotropicGaussian => (-(x * x + y * y) / (2.0 * spec.sigma_x * spec.sigma_x)).exp(),
                KernelKind::AnisotropicGaussian => {
                    let (c, s) = (spec.rotation.cos(), spec.rotation.sin());
                    let u = x * c + y * s;
                    let w = -x * s + y * c;
                    (-(u * u / (2.0 * spec.sigma_x * spec.sigma_x) + w * w / (2.0 * spec.sigma_y * spec.sigma_y))).exp()
                }
                KernelKind::Sinc => {
                    let r = (x * x + y * y).sqrt();
                    let sinc = if r == 0.0 { 1.0 } else { (spec.cutoff * r).sin() / (spec.cutoff * r) };
                    // Hann window over the kernel radius keeps the tails tame
                    let window = if half == 0 {
                        1.0
                    } else {
                        0.5 * (1.0 + (PI * r / (half as f64 + 1.0)).cos()).max(0.0)
                    };
                    sinc * window
                }
            };
            k.push(v);
        }
    }
    let sum: f64 = k.iter().sum();
    if sum.abs() < 1e-12 {
        return Err(Error::InvalidInput("degenerate kernel (zero sum)".into()));
    }
    for v in &mut k {
        *v /= sum;
    }
    Ok(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMethod {
    Nearest,
    Bilinear,
    Bicubic,
}

impl ResizeMethod {
    fn filter(self) -> FilterType {
        match self {
            ResizeMethod::Nearest => FilterType::Nearest,
            ResizeMethod::Bilinear => FilterType::Triangle,
            ResizeMethod::Bicubic => FilterType::CatmullRom,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian {
        /// σ on the 8-bit scale.
        sigma: f64,
    },
    Poisson {
        scale: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Gray noise shares one draw across the three channels.
    pub gray: bool,
}

/// Everything one stage does, fully materialized so a sidecar can replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub kernel: KernelSpec,
    /// Output dims after the resize step.
    pub out_w: usize,
    pub out_h: usize,
    pub resize: ResizeMethod,
    pub noise: NoiseSpec,
    pub jpeg_quality: u8,
    /// Seed for this stage's noise draw.
    pub noise_seed: u64,
}

/// JSON sidecar recording every sampled parameter of a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSidecar {
    pub seed: u64,
    pub final_scale: usize,
    pub hr_w: usize,
    pub hr_h: usize,
    pub stages: Vec<StageParams>,
}

fn to_f32(img: &RgbImage) -> Rgb32FImage {
    let mut out = Rgb32FImage::new(img.width(), img.height());
    for (o, p) in out.pixels_mut().zip(img.pixels()) {
        for c in 0..3 {
            o.0[c] = p.0[c] as f32 / 255.0;
        }
    }
    out
}

fn to_u8(img: &Rgb32FImage) -> RgbImage {
    let mut out = RgbImage::new(img.width(), img.height());
    for (o, p) in out.pixels_mut().zip(img.pixels()) {
        for c in 0..3 {
            o.0[c] = (p.0[c] as f64 * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Convolve with reflect padding; kernel is `size`×`size` row-major.
fn convolve(img: &Rgb32FImage, kernel: &[f64], size: usize) -> Rgb32FImage {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let half = (size / 2) as isize;
    let reflect = |v: isize, n: isize| -> isize {
        let mut v = v;
        while v < 0 || v >= n {
            if v < 0 {
                v = -v - 1;
            }
            if v >= n {
                v = 2 * n - 1 - v;
            }
        }
        v
    };
    let mut out = Rgb32FImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for dy in -half..=half {
                for dx in -half..=half {
                    let kv = kernel[((dy + half) * (size as isize) + dx + half) as usize];
                    let p = img.get_pixel(reflect(x + dx, w) as u32, reflect(y + dy, h) as u32);
                    for c in 0..3 {
                        acc[c] += kv * p.0[c] as f64;
                    }
                }
            }
            out.put_pixel(x as u32, y as u32, image::Rgb([acc[0] as f32, acc[1] as f32, acc[2] as f32]));
        }
    }
    out
}

fn add_noise(img: &mut Rgb32FImage, spec: &NoiseSpec, seed: u64) {
    use rand::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    match spec.kind {
        NoiseKind::Gaussian { sigma } => {
            if sigma <= 0.0 {
                return;
            }
            let dist = Normal::new(0.0, sigma / 255.0).expect("valid sigma");
            for p in img.pixels_mut() {
                if spec.gray {
                    let n = dist.sample(&mut rng) as f32;
                    for c in 0..3 {
                        p.0[c] = (p.0[c] + n).clamp(0.0, 1.0);
                    }
                } else {
                    for c in 0..3 {
                        p.0[c] = (p.0[c] + dist.sample(&mut rng) as f32).clamp(0.0, 1.0);
                    }
                }
            }
        }
        NoiseKind::Poisson { scale } => {
            if scale <= 0.0 {
                return;
            }
            // photon count budget: larger scale means noisier output
            let events = 255.0 / scale;
            let shot = |v: f64, rng: &mut ChaCha12Rng| -> f64 {
                let lam = (v * events).max(1e-9);
                let d = Poisson::new(lam).expect("positive lambda");
                d.sample(rng) / events
            };
            for p in img.pixels_mut() {
                if spec.gray {
                    let lum = (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / 3.0;
                    let delta = shot(lum, &mut rng) - lum;
                    for c in 0..3 {
                        p.0[c] = (p.0[c] as f64 + delta).clamp(0.0, 1.0) as f32;
                    }
                } else {
                    for c in 0..3 {
                        p.0[c] = shot(p.0[c] as f64, &mut rng).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
}

/// Encode to JPEG at the given quality and decode back.
pub fn jpeg_round_trip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let mut buf = Vec::new();
    let mut enc = JpegEncoder::new_with_quality(&mut buf, quality);
    enc.encode(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)?;
    Ok(image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?.to_rgb8())
}

/// One simple degradation stage: blur, resize, noise, JPEG round-trip.
pub fn simple_degrade(x: &RgbImage, stage: &StageParams) -> Result<RgbImage> {
    if stage.out_w == 0 || stage.out_h == 0 {
        return Err(Error::InvalidInput("resize target below one pixel".into()));
    }
    let kernel = make_blur_kernel(&stage.kernel)?;
    let f = to_f32(x);
    let blurred = convolve(&f, &kernel, stage.kernel.size);
    let resized = image::imageops::resize(&blurred, stage.out_w as u32, stage.out_h as u32, stage.resize.filter());
    let mut noisy = resized;
    add_noise(&mut noisy, &stage.noise, stage.noise_seed);
    jpeg_round_trip(&to_u8(&noisy), stage.jpeg_quality)
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Sample the full per-pair degradation plan from the config.
pub fn sample_plan(cfg: &DegradationConfig, hr_w: usize, hr_h: usize, seed: u64) -> Result<Vec<StageParams>> {
    use rand::SeedableRng;
    cfg.validate()?;
    if hr_w % cfg.final_scale != 0 || hr_h % cfg.final_scale != 0 {
        return Err(Error::InvalidInput(format!(
            "high-res dims {hr_w}x{hr_h} not divisible by final_scale {}",
            cfg.final_scale
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (mut w, mut h) = (hr_w, hr_h);
    let mut stages = Vec::with_capacity(cfg.order);
    for stage_idx in 0..cfg.order {
        let size = cfg.kernel_size_choices[rng.gen_range(0..cfg.kernel_size_choices.len())];
        let kernel = if rng.gen_bool(cfg.sinc_prob) {
            KernelSpec::sinc(size, sample_range(&mut rng, cfg.sinc_cutoff_range))
        } else if rng.gen_bool(cfg.aniso_prob) {
            KernelSpec::anisotropic(
                size,
                sample_range(&mut rng, cfg.blur_sigma_range),
                sample_range(&mut rng, cfg.blur_sigma_range),
                rng.gen_range(0.0..PI),
            )
        } else {
            KernelSpec::isotropic(size, sample_range(&mut rng, cfg.blur_sigma_range))
        };
        let last = stage_idx == cfg.order - 1;
        let (out_w, out_h) = if last {
            (hr_w / cfg.final_scale, hr_h / cfg.final_scale)
        } else {
            let r = sample_range(&mut rng, cfg.resize_range);
            let ow = ((w as f64) * r).round() as usize;
            let oh = ((h as f64) * r).round() as usize;
            if ow == 0 || oh == 0 {
                return Err(Error::InvalidInput("resize produced sub-1-pixel dims".into()));
            }
            (ow, oh)
        };
        let methods = [ResizeMethod::Nearest, ResizeMethod::Bilinear, ResizeMethod::Bicubic];
        let resize = methods[rng.gen_range(0..methods.len())];
        let gray = rng.gen_bool(cfg.gray_noise_prob);
        let kind = if rng.gen_bool(0.5) {
            NoiseKind::Gaussian { sigma: sample_range(&mut rng, cfg.gaussian_noise_sigma_range) }
        } else {
            NoiseKind::Poisson { scale: sample_range(&mut rng, cfg.poisson_scale_range) }
        };
        let (qlo, qhi) = cfg.jpeg_quality_range;
        let jpeg_quality = if qhi > qlo { rng.gen_range(qlo..=qhi) } else { qlo };
        stages.push(StageParams {
            kernel,
            out_w,
            out_h,
            resize,
            noise: NoiseSpec { kind, gray },
            jpeg_quality,
            noise_seed: rng.gen(),
        });
        (w, h) = (out_w, out_h);
    }
    Ok(stages)
}

/// Apply a pre-sampled plan, asserting size bookkeeping at each boundary.
pub fn apply_plan(x_hr: &RgbImage, stages: &[StageParams]) -> Result<RgbImage> {
    let mut cur = x_hr.clone();
    for stage in stages {
        cur = simple_degrade(&cur, stage)?;
        debug_assert_eq!((cur.width() as usize, cur.height() as usize), (stage.out_w, stage.out_h));
    }
    Ok(cur)
}

/// Synthesize one training pair. All stochastic choices derive from
/// `cfg.seed` combined (xor) with `pair_seed`, so a corpus can be processed
/// in any order.
pub fn degrade_pair(x_hr: &RgbImage, cfg: &DegradationConfig, pair_seed: u64) -> Result<(RgbImage, PairSidecar)> {
    let seed = cfg.seed ^ pair_seed;
    let (hr_w, hr_h) = (x_hr.width() as usize, x_hr.height() as usize);
    let stages = sample_plan(cfg, hr_w, hr_h, seed)?;
    let x_lr = apply_plan(x_hr, &stages)?;
    assert_eq!(x_lr.width() as usize, hr_w / cfg.final_scale);
    assert_eq!(x_lr.height() as usize, hr_h / cfg.final_scale);
    Ok((x_lr, PairSidecar { seed, final_scale: cfg.final_scale, hr_w, hr_h, stages }))
}

/// Plain bicubic downscale used by the ablation baseline and the augment
/// workflow (no blur/noise/JPEG).
pub fn bicubic_downscale(x: &RgbImage, scale: usize) -> Result<RgbImage> {
    if scale == 0 || (x.width() as usize) < scale || (x.height() as usize) < scale {
        return Err(Error::InvalidInput("bicubic downscale below one pixel".into()));
    }
    let f = to_f32(x);
    let out = image::imageops::resize(&f, x.width() / scale as u32, x.height() / scale as u32, FilterType::CatmullRom);
    Ok(to_u8(&out))
}

/// Stable per-image seed so corpus-level parallelism is order-independent.
pub fn seed_for_path(path: &Path) -> u64 {
    let digest = Sha256::digest(path.to_string_lossy().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
