//! Model assembly, the training loop (AdamW + gradient accumulation +
//! perception-prioritized weighting), and self-describing checkpoints.

use crate::conditioning::{combine_embeddings, CondEncoder, ConditionBundle, Conditioner, ConditioningConfig, RrdbConfig};
use crate::dataset::{DatasetManifest, Split};
use crate::degradation::{degrade_pair, DegradationConfig};
use crate::denoiser::{DenoiserConfig, UNet};
use crate::error::{Error, Result};
use crate::imgio;
use crate::nd::Tensor;
use crate::nn::{Params, TapeCtx};
use crate::schedule::{p2_weight, q_sample, NoiseSchedule, P2Config};
use crate::tiler::WindowModel;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_max: crate::schedule::DEFAULT_T,
            beta_min: crate::schedule::DEFAULT_BETA_MIN,
            beta_max: crate::schedule::DEFAULT_BETA_MAX,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_min, self.beta_max)
    }
}

/// Everything needed to reconstruct the network deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Per-stage upscale factor N.
    pub upscale: usize,
    pub denoiser: DenoiserConfig,
    pub conditioning: ConditioningConfig,
    pub rrdb: RrdbConfig,
    pub schedule: ScheduleConfig,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            upscale: 4,
            denoiser: DenoiserConfig::default(),
            conditioning: ConditioningConfig::default(),
            rrdb: RrdbConfig::default(),
            schedule: ScheduleConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.rrdb.features != self.denoiser.cond_channels {
            return Err(Error::InvalidConfig(format!(
                "rrdb features {} must equal denoiser cond_channels {}",
                self.rrdb.features, self.denoiser.cond_channels
            )));
        }
        if self.conditioning.embed_dim != self.denoiser.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "conditioning embed_dim {} must equal denoiser embed_dim {}",
                self.conditioning.embed_dim, self.denoiser.embed_dim
            )));
        }
        if !self.upscale.is_power_of_two() || self.upscale < 2 {
            return Err(Error::InvalidConfig(format!("upscale {} must be a power of two >= 2", self.upscale)));
        }
        Ok(())
    }

    /// A small configuration suitable for CPU tests and toy trainings.
    pub fn toy(upscale: usize) -> Self {
        ModelConfig {
            upscale,
            denoiser: DenoiserConfig {
                base_channels: 8,
                channel_mults: vec![1, 2],
                num_res_blocks: 1,
                attention_levels: vec![],
                cond_channels: 8,
                embed_dim: 16,
            },
            conditioning: ConditioningConfig {
                embed_dim: 16,
                ..Default::default()
            },
            rrdb: RrdbConfig { num_blocks: 1, features: 8 },
            // endpoints rescaled so the terminal cumulative alpha stays
            // near zero at the short horizon (sum of betas ~ 7.75)
            schedule: ScheduleConfig { t_max: 50, beta_min: 0.01, beta_max: 0.3 },
            init_seed: 0,
        }
    }
}

/// The full generative stack: condition encoder, embedding MLPs, U-Net,
/// parameter store and noise schedule.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    pub conditioner: Conditioner,
    pub encoder: CondEncoder,
    pub unet: UNet,
    pub sched: NoiseSchedule,
}

impl Model {
    /// Construction order is fixed so parameter registry order (and hence
    /// checkpoints) is deterministic for a given config.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.init_seed);
        let encoder = CondEncoder::new(&mut params, cfg.rrdb.clone(), &mut rng);
        let conditioner = Conditioner::new(&mut params, cfg.conditioning.clone(), &mut rng);
        let unet = UNet::new(&mut params, cfg.denoiser.clone(), &mut rng)?;
        let sched = cfg.schedule.build()?;
        Ok(Model { cfg, params, conditioner, encoder, unet, sched })
    }
}

impl WindowModel for Model {
    fn upscale(&self) -> usize {
        self.cfg.upscale
    }

    fn encode(&self, x_lr_block: &RgbImage, _s_in: f64) -> Result<Tensor> {
        let x = imgio::to_model(x_lr_block);
        self.encoder.fwd(&self.params, &x, self.cfg.upscale)
    }

    fn predict(&self, x_t: &Tensor, cond_features: &Tensor, s_in: f64, t: usize) -> Result<Tensor> {
        let e_s = self.conditioner.embed_resolution(&self.params, s_in)?;
        let e_t = self.conditioner.embed_timestep(&self.params, t)?;
        let bundle = ConditionBundle {
            cond_features: cond_features.clone(),
            embed: combine_embeddings(&e_s, &e_t)?,
            spatial_resolution: s_in,
        };
        self.unet.predict_noise(&self.params, x_t, &bundle)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_accum: usize,
    pub batch_per_device: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub p2: P2Config,
    pub degradation: DegradationConfig,
    /// High-resolution crop edge; must be divisible by the upscale factor.
    pub crop: usize,
    /// Optimizer steps per epoch (each consumes grad_accum × batch crops).
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-6,
            epochs: 30,
            grad_accum: 8,
            batch_per_device: 1,
            weight_decay: 0.0,
            seed: 0,
            p2: P2Config::default(),
            degradation: DegradationConfig::default(),
            crop: 256,
            steps_per_epoch: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model_cfg: &ModelConfig) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.epochs == 0
            || self.grad_accum == 0
            || self.batch_per_device == 0
            || self.steps_per_epoch == 0
        {
            return Err(Error::InvalidConfig("training hyperparameters must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        self.degradation.validate()?;
        if self.degradation.final_scale != model_cfg.upscale {
            return Err(Error::InvalidConfig(format!(
                "degradation final_scale {} must equal model upscale {}",
                self.degradation.final_scale, model_cfg.upscale
            )));
        }
        if self.crop == 0 || self.crop % model_cfg.upscale != 0 {
            return Err(Error::InvalidConfig("crop must be a positive multiple of the upscale factor".into()));
        }
        let div = 1 << model_cfg.denoiser.num_down();
        if self.crop % div != 0 {
            return Err(Error::InvalidConfig(format!("crop must be divisible by 2^{}", model_cfg.denoiser.num_down())));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &Params, lr: f64, weight_decay: f64) -> Self {
        let m = (0..params.len()).map(|i| Tensor::zeros(&params.value(i).shape)).collect();
        let v = (0..params.len()).map(|i| Tensor::zeros(&params.value(i).shape)).collect();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(i);
            for j in 0..p.data.len() {
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g.data[j];
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g.data[j] * g.data[j];
                let m_hat = m.data[j] / bc1;
                let v_hat = v.data[j] / bc2;
                p.data[j] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.data[j]);
            }
        }
    }
}

/// One drawn training example: a high-res crop, its degraded condition,
/// timestep and target noise.
pub struct TrainExample {
    pub x_hr: Tensor,
    pub x_lr: RgbImage,
    /// Conditioning resolution fed to the embedding (s_hr × N).
    pub s_cond: f64,
    pub t: usize,
    pub eps: Tensor,
}

/// Sample one example from the manifest: random crop with random flips,
/// degradation pair, uniform timestep, fresh target noise.
pub fn draw_example(
    entries: &[&crate::dataset::ManifestEntry],
    cfg: &TrainConfig,
    model: &Model,
    rng: &mut ChaCha12Rng,
) -> Result<TrainExample> {
    let entry = entries[rng.gen_range(0..entries.len())];
    let img = imgio::load_rgb(&entry.path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < cfg.crop || h < cfg.crop {
        return Err(Error::Dataset(format!(
            "image {} ({w}x{h}) smaller than crop {}",
            entry.path.display(),
            cfg.crop
        )));
    }
    let x0 = rng.gen_range(0..=w - cfg.crop);
    let y0 = rng.gen_range(0..=h - cfg.crop);
    let mut crop = imgio::crop(&img, x0, y0, cfg.crop, cfg.crop);
    if rng.gen_bool(0.5) {
        crop = image::imageops::flip_horizontal(&crop);
    }
    if rng.gen_bool(0.5) {
        crop = image::imageops::flip_vertical(&crop);
    }
    let (x_lr, _sidecar) = degrade_pair(&crop, &cfg.degradation, rng.gen())?;
    let t = rng.gen_range(1..=model.sched.t_max);
    let x_hr = imgio::to_model(&crop);
    let eps = Tensor::randn(&x_hr.shape, rng);
    Ok(TrainExample { x_hr, x_lr, s_cond: entry.resolution * model.cfg.upscale as f64, t, eps })
}

/// Loss and parameter gradients for one example (full tape forward through
/// the condition encoder, embedding MLPs and U-Net).
pub fn example_loss_and_grads(model: &Model, ex: &TrainExample, p2: &P2Config) -> Result<(f64, Vec<Tensor>)> {
    let x_t = q_sample(&ex.x_hr, ex.t, &ex.eps, &model.sched)?;
    let weight = p2_weight(ex.t, &model.sched, p2)?;
    let mut cx = TapeCtx::new(&model.params);
    let x_lr = cx.tape.leaf(imgio::to_model(&ex.x_lr));
    let cond = model.encoder.fwd_t(&mut cx, x_lr, model.cfg.upscale)?;
    let e_s = model.conditioner.embed_resolution_t(&mut cx, ex.s_cond)?;
    let e_t = model.conditioner.embed_timestep_t(&mut cx, ex.t)?;
    let embed = cx.tape.add(e_s, e_t);
    let x_t_var = cx.tape.leaf(x_t);
    let pred = model.unet.predict_noise_t(&mut cx, x_t_var, cond, embed);
    let eps_var = cx.tape.leaf(ex.eps.clone());
    let diff = cx.tape.sub(pred, eps_var);
    let sq = cx.tape.mul(diff, diff);
    let mse = cx.tape.mean_all(sq);
    let loss = cx.tape.scale(mse, weight);
    let value = cx.tape.data(loss).data[0];
    let grads = cx.param_grads(&model.params, loss);
    Ok((value, grads))
}

/// One optimizer step over grad_accum × batch_per_device examples; returns
/// the mean weighted loss. The gradient applied is the mean of per-example
/// gradients regardless of how they are split between batch and
/// accumulation, which is what makes the two decompositions equivalent.
pub fn train_step(
    model: &mut Model,
    entries: &[&crate::dataset::ManifestEntry],
    cfg: &TrainConfig,
    opt: &mut AdamW,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let total = cfg.grad_accum * cfg.batch_per_device;
    let mut acc: Vec<Tensor> =
        (0..model.params.len()).map(|i| Tensor::zeros(&model.params.value(i).shape)).collect();
    let mut loss_sum = 0.0;
    for _ in 0..cfg.grad_accum {
        for _ in 0..cfg.batch_per_device {
            let ex = draw_example(entries, cfg, model, rng)?;
            let (loss, grads) = example_loss_and_grads(model, &ex, &cfg.p2)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at t={}", ex.t)));
            }
            loss_sum += loss;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.add_assign(g);
            }
        }
    }
    let scale = 1.0 / total as f64;
    for a in &mut acc {
        *a = a.scale(scale);
    }
    opt.step(&mut model.params, &acc);
    Ok(loss_sum * scale)
}

/// Full training run. Per-step losses are returned; if `run_dir` is given,
/// a checkpoint is written after every epoch (and retained on abort).
pub fn train(
    model: &mut Model,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<Vec<f64>> {
    cfg.validate(&model.cfg)?;
    let entries = manifest.split(Split::Train);
    if entries.is_empty() {
        return Err(Error::Dataset("manifest has no train split".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.params, cfg.learning_rate, cfg.weight_decay);
    let mut losses = Vec::new();
    let mut step_counter = 0u64;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            match train_step(model, &entries, cfg, &mut opt, &mut rng) {
                Ok(loss) => {
                    losses.push(loss);
                    step_counter += 1;
                }
                Err(e) => {
                    // abort, leaving the last epoch snapshot in place
                    return Err(e);
                }
            }
        }
        if let Some(dir) = run_dir {
            save_checkpoint(&dir.join(format!("epoch{epoch:04}.ckpt")), model, step_counter)?;
            let epoch_losses = &losses[losses.len() - cfg.steps_per_epoch..];
            let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
            let val_fid = validation_fid(model, manifest, cfg)?;
            let record = serde_json::json!({
                "epoch": epoch,
                "steps": step_counter,
                "mean_loss": mean_loss,
                "val_fid": val_fid,
            });
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("metrics.jsonl"))?;
            writeln!(f, "{record}")?;
        }
    }
    Ok(losses)
}

/// Maximum number of held-out images scored per validation pass.
const VAL_FID_IMAGES: usize = 16;

/// Hermetic-extractor FID between held-out crops and the model's
/// reconstructions of their degraded low-res counterparts. Returns `None`
/// when the manifest has no validation split.
pub fn validation_fid(model: &Model, manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Option<f64>> {
    use crate::eval::{extract_features, fid, HermeticExtractor};
    let val = manifest.split(Split::Val);
    if val.is_empty() {
        return Ok(None);
    }
    let sampler = crate::schedule::SamplerConfig::uniform(&model.sched, model.sched.t_max.min(10), 0.0)?;
    let mut real = Vec::new();
    let mut generated = Vec::new();
    for (i, entry) in val.iter().take(VAL_FID_IMAGES).enumerate() {
        let img = imgio::load_rgb(&entry.path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w < cfg.crop || h < cfg.crop {
            continue;
        }
        let crop = imgio::crop(&img, (w - cfg.crop) / 2, (h - cfg.crop) / 2, cfg.crop, cfg.crop);
        let (x_lr, _) = degrade_pair(&crop, &cfg.degradation, i as u64)?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x76616c /* "val" */ ^ i as u64);
        let noise = Tensor::randn(&[1, 3, cfg.crop, cfg.crop], &mut rng);
        let s_cond = entry.resolution * model.cfg.upscale as f64;
        let window =
            crate::tiler::generate_window(&x_lr, s_cond, &noise, model, &model.sched, &sampler)?;
        real.push(crop);
        generated.push(imgio::from_model(&window));
    }
    if real.is_empty() {
        return Ok(None);
    }
    let extractor = HermeticExtractor::new(0);
    let a = extract_features(&real, &extractor)?;
    let b = extract_features(&generated, &extractor)?;
    Ok(Some(fid(&a, &b)?))
}

const CKPT_MAGIC: &[u8; 8] = b"TDCKPT01";
pub const CKPT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    format_version: u32,
    model_cfg: ModelConfig,
    step: u64,
    params: Vec<(String, Vec<usize>)>,
}

/// Single-file checkpoint: magic, JSON header (configs, step, parameter
/// table), then raw little-endian f64 data per parameter in registry
/// order. Exact round-trip by construction.
pub fn save_checkpoint(path: &Path, model: &Model, step: u64) -> Result<()> {
    let header = CkptHeader {
        format_version: CKPT_FORMAT_VERSION,
        model_cfg: model.cfg.clone(),
        step,
        params: (0..model.params.len())
            .map(|i| (model.params.name(i).to_string(), model.params.value(i).shape.clone()))
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for i in 0..model.params.len() {
        for v in &model.params.value(i).data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, u64)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
    f.read_exact(&mut header_bytes)?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)?;
    if header.format_version != CKPT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format_version {}", header.format_version)));
    }
    let mut model = Model::new(header.model_cfg)?;
    if header.params.len() != model.params.len() {
        return Err(Error::Checkpoint("parameter table does not match reconstructed model".into()));
    }
    for (i, (name, shape)) in header.params.iter().enumerate() {
        if model.params.name(i) != name || &model.params.value(i).shape != shape {
            return Err(Error::Checkpoint(format!("parameter {i} mismatch: {name} {shape:?}")));
        }
        let p = model.params.value_mut(i);
        for v in &mut p.data {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
    }
    Ok((model, header.step))
}
