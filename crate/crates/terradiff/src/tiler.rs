//! Self-cascading multi-stage generation and unbounded sliding-window
//! tiling with shared or quadrant-constrained initial noise.
//!
//! A stage upsamples its conditioning canvas by N: the output canvas is
//! carved into half-overlapping windows, each window runs the full reverse
//! trajectory from its assigned initial noise, and results are folded into
//! the canvas with a linear cross-fade whose weights sum to one everywhere.

use crate::error::{Error, Result};
use crate::imgio;
use crate::nd::Tensor;
use crate::schedule::{ddim_step, NoiseSchedule, SamplerConfig};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// One ×N refinement step of the cascade.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StageSpec {
    /// Stage index within the cascade.
    pub k: usize,
    /// Input spatial resolution, m/pixel.
    pub s_in: f64,
    /// Output spatial resolution, m/pixel (s_in / n).
    pub s_out: f64,
    /// Per-stage upscale factor.
    pub n: usize,
    /// Generation window edge in output pixels.
    pub window: usize,
}

impl StageSpec {
    pub fn new(k: usize, s_in: f64, n: usize, window: usize) -> Result<Self> {
        let spec = StageSpec { k, s_in, s_out: s_in / n as f64, n, window };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidConfig("stage upscale factor must be >= 2".into()));
        }
        if (self.s_out * self.n as f64 - self.s_in).abs() > 1e-9 * self.s_in.abs() {
            return Err(Error::InvalidConfig(format!(
                "resolution bookkeeping violated: s_out {} x N {} != s_in {}",
                self.s_out, self.n, self.s_in
            )));
        }
        if self.window == 0 || self.window % 2 != 0 {
            return Err(Error::InvalidConfig("window must be positive and even".into()));
        }
        // the condition crop and its stride must be whole input pixels
        if self.window % (2 * self.n) != 0 {
            return Err(Error::InvalidConfig(format!(
                "window {} must be divisible by 2N = {}",
                self.window,
                2 * self.n
            )));
        }
        if self.s_in <= 0.0 {
            return Err(Error::InvalidConfig("s_in must be positive".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.window / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlacement {
    pub row: usize,
    pub col: usize,
    pub y0: usize,
    pub x0: usize,
}

/// Row-major half-overlapping window layout over an output canvas.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub window: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub tiles: Vec<TilePlacement>,
}

/// Plan the half-overlap sliding-window grid. Canvas dims must be
/// stride-aligned: dim = window + k·stride.
pub fn plan_tiles(canvas_h: usize, canvas_w: usize, window: usize) -> Result<TileGrid> {
    if window == 0 || window % 2 != 0 {
        return Err(Error::Geometry(format!("window {window} must be positive and even")));
    }
    if canvas_h < window || canvas_w < window {
        return Err(Error::Geometry(format!(
            "canvas {canvas_h}x{canvas_w} smaller than window {window}"
        )));
    }
    let stride = window / 2;
    if (canvas_h - window) % stride != 0 || (canvas_w - window) % stride != 0 {
        return Err(Error::Geometry(format!(
            "canvas {canvas_h}x{canvas_w} not aligned to stride {stride}"
        )));
    }
    let rows = (canvas_h - window) / stride + 1;
    let cols = (canvas_w - window) / stride + 1;
    let mut tiles = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            tiles.push(TilePlacement { row, col, y0: row * stride, x0: col * stride });
        }
    }
    Ok(TileGrid { canvas_h, canvas_w, window, stride, rows, cols, tiles })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    SharedAll,
    QuadrantConstrained,
    Independent,
}

/// Initial-noise assignment for every window of a grid.
///
/// Quadrant-constrained plans are stored as a canvas-level field of
/// stride×stride noise blocks; window (r, c) views blocks (r, c), (r, c+1),
/// (r+1, c), (r+1, c+1) as its four quadrants, which makes every pairwise
/// neighbor constraint hold bitwise and the induced canvas field
/// single-valued by construction.
#[derive(Clone, Debug)]
pub struct NoisePlan {
    pub mode: NoiseMode,
    pub seed: u64,
    window: usize,
    stride: usize,
    rows: usize,
    cols: usize,
    /// SharedAll: the single window array. QuadrantConstrained: the
    /// (rows+1)·(cols+1) block field, row-major.
    storage: Vec<Tensor>,
}

pub fn make_noise_plan(grid: &TileGrid, mode: NoiseMode, seed: u64) -> NoisePlan {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let w = grid.window;
    let s = grid.stride;
    let storage = match mode {
        NoiseMode::SharedAll => vec![Tensor::randn(&[1, 3, w, w], &mut rng)],
        NoiseMode::QuadrantConstrained => (0..(grid.rows + 1) * (grid.cols + 1))
            .map(|_| Tensor::randn(&[1, 3, s, s], &mut rng))
            .collect(),
        NoiseMode::Independent => Vec::new(),
    };
    NoisePlan { mode, seed, window: w, stride: s, rows: grid.rows, cols: grid.cols, storage }
}

impl NoisePlan {
    /// Initial noise for window (row, col); [1, 3, window, window].
    pub fn noise_for(&self, row: usize, col: usize) -> Tensor {
        assert!(row < self.rows && col < self.cols, "tile index out of grid");
        let w = self.window;
        let s = self.stride;
        match self.mode {
            NoiseMode::SharedAll => self.storage[0].clone(),
            NoiseMode::Independent => {
                // one independent stream per tile, derived from the plan seed
                let mut rng =
                    ChaCha12Rng::seed_from_u64(self.seed ^ ((row as u64) << 32 | col as u64 + 1));
                Tensor::randn(&[1, 3, w, w], &mut rng)
            }
            NoiseMode::QuadrantConstrained => {
                let mut out = Tensor::zeros(&[1, 3, w, w]);
                for (qi, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let block = &self.storage[(row + dr) * (self.cols + 1) + col + dc];
                    let (oy, ox) = ((qi / 2) * s, (qi % 2) * s);
                    for c in 0..3 {
                        for y in 0..s {
                            for x in 0..s {
                                out.data[c * w * w + (oy + y) * w + ox + x] =
                                    block.data[c * s * s + y * s + x];
                            }
                        }
                    }
                }
                out
            }
        }
    }

    /// Materialize every tile's noise in grid order (test/inspection aid).
    pub fn assignments(&self, grid: &TileGrid) -> Vec<Tensor> {
        grid.tiles.iter().map(|t| self.noise_for(t.row, t.col)).collect()
    }
}

/// The generation-time model surface: encode a condition block once, then
/// predict noise at each reverse step. Implementations must be pure
/// functions of their inputs (the injectivity contract behind tiling).
pub trait WindowModel: Sync {
    /// Per-stage upscale factor N.
    fn upscale(&self) -> usize;
    /// Encode the low-res condition block into window-aligned features.
    fn encode(&self, x_lr_block: &RgbImage, s_in: f64) -> Result<Tensor>;
    /// Predict the noise content of `x_t` at timestep `t`.
    fn predict(&self, x_t: &Tensor, cond_features: &Tensor, s_in: f64, t: usize) -> Result<Tensor>;
}

/// Run the full DDIM reverse trajectory for one window from the assigned
/// initial noise. Tiled generation requires eta = 0: the result must be a
/// pure function of (noise, condition).
pub fn generate_window(
    x_lr_block: &RgbImage,
    s_in: f64,
    noise: &Tensor,
    model: &dyn WindowModel,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<Tensor> {
    if sampler.eta != 0.0 {
        return Err(Error::InvalidConfig(format!(
            "tiled generation requires eta = 0 for determinism, got {}",
            sampler.eta
        )));
    }
    let (_, _, h, w) = noise.dims4();
    let n = model.upscale();
    if (x_lr_block.width() as usize * n, x_lr_block.height() as usize * n) != (w, h) {
        return Err(Error::Geometry(format!(
            "condition block {}x{} times N={n} does not match window {w}x{h}",
            x_lr_block.width(),
            x_lr_block.height()
        )));
    }
    let cond = model.encode(x_lr_block, s_in)?;
    let mut x = noise.clone();
    let steps = &sampler.step_indices;
    let unused = Tensor::zeros(&[0]);
    for i in (0..steps.len()).rev() {
        let t = steps[i];
        let t_prev = if i == 0 { 0 } else { steps[i - 1] };
        let eps = model.predict(&x, &cond, s_in, t)?;
        x = ddim_step(&x, &eps, t, t_prev, 0.0, sched, &unused)?;
    }
    Ok(x)
}

/// Cross-fade weight profile along one axis for a tile at `index` of
/// `count`: a linear ramp over the overlap on each interior-facing side,
/// flat 1 elsewhere. Adjacent ramps sum to exactly 1.
fn axis_weights(window: usize, stride: usize, index: usize, count: usize) -> Vec<f64> {
    let ov = window - stride;
    let denom = (ov + 1) as f64;
    let mut w = vec![1.0; window];
    if index > 0 {
        for (j, wj) in w.iter_mut().take(ov).enumerate() {
            *wj = (j + 1) as f64 / denom;
        }
    }
    if index + 1 < count {
        for j in 0..ov {
            w[window - ov + j] = (ov - j) as f64 / denom;
        }
    }
    w
}

/// Fold one generated tile into the canvas accumulator.
fn fold_tile(canvas: &mut Tensor, tile: &Tensor, grid: &TileGrid, place: &TilePlacement) {
    let (h, w) = (grid.canvas_h, grid.canvas_w);
    let win = grid.window;
    let wx = axis_weights(win, grid.stride, place.col, grid.cols);
    let wy = axis_weights(win, grid.stride, place.row, grid.rows);
    for c in 0..3 {
        for y in 0..win {
            let row_w = wy[y];
            let cy = place.y0 + y;
            for x in 0..win {
                canvas.data[c * h * w + cy * w + place.x0 + x] +=
                    tile.data[c * win * win + y * win + x] * row_w * wx[x];
            }
        }
    }
}

/// Combine per-tile images into a canvas by linear cross-fade.
pub fn stitch(tiles: &[Tensor], grid: &TileGrid) -> Result<Tensor> {
    if tiles.len() != grid.tiles.len() {
        return Err(Error::Geometry(format!(
            "expected {} tiles, got {}",
            grid.tiles.len(),
            tiles.len()
        )));
    }
    let mut canvas = Tensor::zeros(&[1, 3, grid.canvas_h, grid.canvas_w]);
    for (tile, place) in tiles.iter().zip(&grid.tiles) {
        let (_, c, h, w) = tile.dims4();
        if (c, h, w) != (3, grid.window, grid.window) {
            return Err(Error::Geometry("tile does not match grid window".into()));
        }
        fold_tile(&mut canvas, tile, grid, place);
    }
    Ok(canvas)
}

/// Reflection-pad an image on the right/bottom.
fn reflect_pad(img: &RgbImage, pad_w: usize, pad_h: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (nw, nh) = (w + pad_w, h + pad_h);
    let reflect = |v: usize, n: usize| -> usize {
        if v < n {
            v
        } else {
            n - 2 - (v - n).min(n - 2)
        }
    };
    let mut out = RgbImage::new(nw as u32, nh as u32);
    for y in 0..nh {
        for x in 0..nw {
            out.put_pixel(x as u32, y as u32, *img.get_pixel(reflect(x, w) as u32, reflect(y, h) as u32));
        }
    }
    out
}

/// JSON sidecar describing one stage's output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSidecar {
    pub stage: usize,
    pub s_out: f64,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub window: usize,
    pub noise_mode: NoiseMode,
    pub seed: u64,
}

/// Generate one ×N stage over a whole canvas: plan tiles, assign noise,
/// generate each window from its condition crop, cross-fade into the
/// output. Tiles are folded one at a time; the peak working set is one
/// window plus the canvas accumulator.
pub fn run_stage(
    x_lr_canvas: &RgbImage,
    stage: &StageSpec,
    mode: NoiseMode,
    seed: u64,
    model: &dyn WindowModel,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<(RgbImage, StageSidecar)> {
    stage.validate()?;
    if model.upscale() != stage.n {
        return Err(Error::InvalidConfig("model upscale factor differs from stage N".into()));
    }
    let n = stage.n;
    let (in_w, in_h) = (x_lr_canvas.width() as usize, x_lr_canvas.height() as usize);
    let (out_w, out_h) = (in_w * n, in_h * n);
    let in_stride = stage.stride() / n;
    let in_window = stage.window / n;
    // pad the input so the scaled canvas is window + k*stride on each side
    let pad_to = |dim: usize| -> usize {
        if dim <= in_window {
            in_window
        } else {
            in_window + (dim - in_window).div_ceil(in_stride) * in_stride
        }
    };
    let (pw, ph) = (pad_to(in_w), pad_to(in_h));
    let padded = if (pw, ph) == (in_w, in_h) {
        x_lr_canvas.clone()
    } else {
        reflect_pad(x_lr_canvas, pw - in_w, ph - in_h)
    };
    let grid = plan_tiles(ph * n, pw * n, stage.window)?;
    let plan = make_noise_plan(&grid, mode, seed);
    let mut canvas = Tensor::zeros(&[1, 3, grid.canvas_h, grid.canvas_w]);
    for place in &grid.tiles {
        let block = imgio::crop(&padded, place.x0 / n, place.y0 / n, in_window, in_window);
        let noise = plan.noise_for(place.row, place.col);
        let tile = generate_window(&block, stage.s_in, &noise, model, sched, sampler)?;
        fold_tile(&mut canvas, &tile, &grid, place);
    }
    let full = imgio::from_model(&canvas);
    let out = imgio::crop(&full, 0, 0, out_w, out_h);
    let sidecar = StageSidecar {
        stage: stage.k,
        s_out: stage.s_out,
        canvas_h: out_h,
        canvas_w: out_w,
        grid_rows: grid.rows,
        grid_cols: grid.cols,
        window: stage.window,
        noise_mode: mode,
        seed,
    };
    Ok((out, sidecar))
}

/// Run a chained cascade; returns the seed canvas plus every stage output
/// with its resolution and sidecar.
#[allow(clippy::too_many_arguments)]
pub fn run_cascade(
    x0_seed: &RgbImage,
    s0: f64,
    stages: &[StageSpec],
    mode: NoiseMode,
    seed: u64,
    model: &dyn WindowModel,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<Vec<(RgbImage, f64, Option<StageSidecar>)>> {
    let mut s = s0;
    for st in stages {
        if (st.s_in - s).abs() > 1e-9 * s.abs() {
            return Err(Error::InvalidConfig(format!(
                "resolution chain mismatch: stage {} expects s_in {}, previous output is {s}",
                st.k, st.s_in
            )));
        }
        s = st.s_out;
    }
    let mut outputs = vec![(x0_seed.clone(), s0, None)];
    for (i, st) in stages.iter().enumerate() {
        let cur = &outputs[i].0;
        // each stage derives its noise stream from the cascade seed
        let (img, sidecar) = run_stage(cur, st, mode, seed.wrapping_add(st.k as u64), model, sched, sampler)?;
        outputs.push((img, st.s_out, Some(sidecar)));
    }
    Ok(outputs)
}
