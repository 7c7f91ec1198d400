//! Conditioning signals: frequency encodings of spatial resolution and
//! timestep, their MLP projections, the low-resolution feature branch, and
//! scale-shift feature modulation.

use crate::error::{Error, Result};
use crate::nd::{ops, Tensor, VarId};
use crate::nn::{Conv2d, Linear, Params, TapeCtx};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sinusoidal frequency-encoding parameters. Frequencies are
/// f_i = omega^(-i/n), i = 1..n, strictly decreasing down to 1/omega.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FrequencyEncoderConfig {
    pub omega: f64,
    pub n: usize,
}

impl Default for FrequencyEncoderConfig {
    fn default() -> Self {
        FrequencyEncoderConfig { omega: 1e4, n: 64 }
    }
}

impl FrequencyEncoderConfig {
    pub fn out_dim(&self) -> usize {
        2 * self.n
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (1..=self.n)
            .map(|i| self.omega.powf(-(i as f64) / self.n as f64))
            .collect()
    }
}

/// [cos(v f_1), sin(v f_1), ..., cos(v f_n), sin(v f_n)] as a [1, 2n] tensor.
pub fn frequency_encode(value: f64, cfg: &FrequencyEncoderConfig) -> Result<Tensor> {
    if !value.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite encoding input {value}")));
    }
    let mut data = Vec::with_capacity(cfg.out_dim());
    for f in cfg.frequencies() {
        data.push((value * f).cos());
        data.push((value * f).sin());
    }
    Ok(Tensor::from_vec(&[1, cfg.out_dim()], data))
}

/// Two-layer MLP projecting a frequency encoding to the embedding space.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EmbedMlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl EmbedMlp {
    pub fn new<R: Rng>(ps: &mut Params, name: &str, in_dim: usize, d: usize, rng: &mut R) -> Self {
        EmbedMlp {
            l1: Linear::new(ps, &format!("{name}.l1"), in_dim, d, rng),
            l2: Linear::new(ps, &format!("{name}.l2"), d, d, rng),
        }
    }

    pub fn fwd(&self, ps: &Params, x: &Tensor) -> Tensor {
        self.l2.fwd(ps, &ops::silu(&self.l1.fwd(ps, x)))
    }

    pub fn fwd_t(&self, cx: &mut TapeCtx, x: VarId) -> VarId {
        let h = self.l1.fwd_t(cx, x);
        let h = cx.tape.silu(h);
        self.l2.fwd_t(cx, h)
    }
}

/// Residual dense block: five 3x3 convs with dense connections and a
/// residually scaled output, the ESRGAN building unit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseBlock {
    convs: Vec<Conv2d>,
}

const RESIDUAL_SCALE: f64 = 0.2;

impl DenseBlock {
    fn new<R: Rng>(ps: &mut Params, name: &str, f: usize, g: usize, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        for i in 0..4 {
            convs.push(Conv2d::new(ps, &format!("{name}.c{i}"), f + i * g, g, 3, 1, 1, rng));
        }
        convs.push(Conv2d::new(ps, &format!("{name}.c4"), f + 4 * g, f, 3, 1, 1, rng));
        DenseBlock { convs }
    }

    fn fwd(&self, ps: &Params, x: &Tensor) -> Tensor {
        let mut feat = x.clone();
        for conv in &self.convs[..4] {
            let h = ops::silu(&conv.fwd(ps, &feat));
            feat = ops::concat_chan(&feat, &h);
        }
        let out = self.convs[4].fwd(ps, &feat);
        x.add(&out.scale(RESIDUAL_SCALE))
    }

    fn fwd_t(&self, cx: &mut TapeCtx, x: VarId) -> VarId {
        let mut feat = x;
        for conv in &self.convs[..4] {
            let h = conv.fwd_t(cx, feat);
            let h = cx.tape.silu(h);
            feat = cx.tape.concat_chan(feat, h);
        }
        let out = self.convs[4].fwd_t(cx, feat);
        let out = cx.tape.scale(out, RESIDUAL_SCALE);
        cx.tape.add(x, out)
    }
}

/// Residual-in-residual dense block: three dense blocks under a second
/// residual scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Rrdb {
    blocks: [DenseBlock; 3],
}

impl Rrdb {
    fn new<R: Rng>(ps: &mut Params, name: &str, f: usize, g: usize, rng: &mut R) -> Self {
        Rrdb {
            blocks: [
                DenseBlock::new(ps, &format!("{name}.d0"), f, g, rng),
                DenseBlock::new(ps, &format!("{name}.d1"), f, g, rng),
                DenseBlock::new(ps, &format!("{name}.d2"), f, g, rng),
            ],
        }
    }

    fn fwd(&self, ps: &Params, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.fwd(ps, &h);
        }
        x.add(&h.sub(x).scale(RESIDUAL_SCALE))
    }

    fn fwd_t(&self, cx: &mut TapeCtx, x: VarId) -> VarId {
        let mut h = x;
        for b in &self.blocks {
            h = b.fwd_t(cx, h);
        }
        let d = cx.tape.sub(h, x);
        let d = cx.tape.scale(d, RESIDUAL_SCALE);
        cx.tape.add(x, d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrdbConfig {
    pub num_blocks: usize,
    pub features: usize,
}

impl Default for RrdbConfig {
    fn default() -> Self {
        // smallest configuration that preserves the architecture family
        RrdbConfig { num_blocks: 4, features: 32 }
    }
}

/// RRDB-style encoder for the low-resolution conditioning image followed by
/// nearest-upsample + conv rounds that bring the features to the target
/// spatial size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CondEncoder {
    pub cfg: RrdbConfig,
    conv_in: Conv2d,
    blocks: Vec<Rrdb>,
    conv_trunk: Conv2d,
    up_convs: Vec<Conv2d>, // one per 2x upsampling round, built for N = 4
}

impl CondEncoder {
    pub fn new<R: Rng>(ps: &mut Params, cfg: RrdbConfig, rng: &mut R) -> Self {
        let f = cfg.features;
        let g = (f / 2).max(1);
        let conv_in = Conv2d::new(ps, "enc.in", 3, f, 3, 1, 1, rng);
        let blocks = (0..cfg.num_blocks)
            .map(|i| Rrdb::new(ps, &format!("enc.rrdb{i}"), f, g, rng))
            .collect();
        let conv_trunk = Conv2d::new(ps, "enc.trunk", f, f, 3, 1, 1, rng);
        let up_convs = (0..2)
            .map(|i| Conv2d::new(ps, &format!("enc.up{i}"), f, f, 3, 1, 1, rng))
            .collect();
        CondEncoder { cfg, conv_in, blocks, conv_trunk, up_convs }
    }

    fn rounds(&self, scale: usize) -> Result<usize> {
        match scale {
            2 => Ok(1),
            4 => Ok(2),
            _ => Err(Error::InvalidInput(format!("unsupported upscale factor {scale}"))),
        }
    }

    /// F_up(E_lr(x_lr)): feature map at `scale` times the input size.
    pub fn fwd(&self, ps: &Params, x_lr: &Tensor, scale: usize) -> Result<Tensor> {
        let (_, c, _, _) = x_lr.dims4();
        if c != 3 {
            return Err(Error::InvalidInput(format!("conditioning image must be RGB, got {c} channels")));
        }
        let rounds = self.rounds(scale)?;
        let base = self.conv_in.fwd(ps, x_lr);
        let mut h = base.clone();
        for b in &self.blocks {
            h = b.fwd(ps, &h);
        }
        let mut h = base.add(&self.conv_trunk.fwd(ps, &h));
        for conv in &self.up_convs[..rounds] {
            h = ops::silu(&conv.fwd(ps, &ops::nearest_up2(&h)));
        }
        Ok(h)
    }

    pub fn fwd_t(&self, cx: &mut TapeCtx, x_lr: VarId, scale: usize) -> Result<VarId> {
        let rounds = self.rounds(scale)?;
        let base = self.conv_in.fwd_t(cx, x_lr);
        let mut h = base;
        for b in &self.blocks {
            h = b.fwd_t(cx, h);
        }
        let trunk = self.conv_trunk.fwd_t(cx, h);
        let mut h = cx.tape.add(base, trunk);
        for conv in &self.up_convs[..rounds] {
            let up = cx.tape.nearest_up2(h);
            let c = conv.fwd_t(cx, up);
            h = cx.tape.silu(c);
        }
        Ok(h)
    }
}

/// Per-step conditioning: spatially aligned low-res features plus the summed
/// resolution/timestep embedding.
#[derive(Clone, Debug)]
pub struct ConditionBundle {
    pub cond_features: Tensor,
    pub embed: Tensor,
    pub spatial_resolution: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningConfig {
    pub freq: FrequencyEncoderConfig,
    /// Embedding dimension D.
    pub embed_dim: usize,
    pub rrdb: RrdbConfig,
}

impl PartialEq for FrequencyEncoderConfig {
    fn eq(&self, other: &Self) -> bool {
        self.omega == other.omega && self.n == other.n
    }
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        ConditioningConfig {
            freq: FrequencyEncoderConfig::default(),
            embed_dim: 128,
            rrdb: RrdbConfig::default(),
        }
    }
}

/// The full conditioning branch: resolution MLP, timestep MLP, image encoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conditioner {
    pub cfg: ConditioningConfig,
    pub mlp_res: EmbedMlp,
    pub mlp_time: EmbedMlp,
    pub encoder: CondEncoder,
}

impl Conditioner {
    pub fn new<R: Rng>(ps: &mut Params, cfg: ConditioningConfig, rng: &mut R) -> Self {
        let in_dim = cfg.freq.out_dim();
        Conditioner {
            cfg,
            mlp_res: EmbedMlp::new(ps, "emb.res", in_dim, cfg.embed_dim, rng),
            mlp_time: EmbedMlp::new(ps, "emb.time", in_dim, cfg.embed_dim, rng),
            encoder: CondEncoder::new(ps, cfg.rrdb, rng),
        }
    }

    pub fn embed_resolution(&self, ps: &Params, s: f64) -> Result<Tensor> {
        if s <= 0.0 {
            return Err(Error::InvalidInput(format!("spatial resolution must be > 0, got {s}")));
        }
        Ok(self.mlp_res.fwd(ps, &frequency_encode(s, &self.cfg.freq)?))
    }

    pub fn embed_timestep(&self, ps: &Params, t: usize) -> Result<Tensor> {
        Ok(self.mlp_time.fwd(ps, &frequency_encode(t as f64, &self.cfg.freq)?))
    }

    pub fn embed_resolution_t(&self, cx: &mut TapeCtx, s: f64) -> Result<VarId> {
        if s <= 0.0 {
            return Err(Error::InvalidInput(format!("spatial resolution must be > 0, got {s}")));
        }
        let enc = frequency_encode(s, &self.cfg.freq)?;
        let v = cx.tape.leaf(enc);
        Ok(self.mlp_res.fwd_t(cx, v))
    }

    pub fn embed_timestep_t(&self, cx: &mut TapeCtx, t: usize) -> Result<VarId> {
        let enc = frequency_encode(t as f64, &self.cfg.freq)?;
        let v = cx.tape.leaf(enc);
        Ok(self.mlp_time.fwd_t(cx, v))
    }
}

/// Elementwise sum of the two embeddings.
pub fn combine_embeddings(e_s: &Tensor, e_t: &Tensor) -> Result<Tensor> {
    if !e_s.same_shape(e_t) {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims {:?} vs {:?}",
            e_s.shape, e_t.shape
        )));
    }
    Ok(e_s.add(e_t))
}

/// Checked FiLM modulation (see `nd::ops::scale_shift`).
pub fn scale_shift(h: &Tensor, e: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = h.dims4();
    let (_, d) = e.dims2();
    if d != 2 * c {
        return Err(Error::ShapeMismatch(format!(
            "embedding length {d} does not match 2x channels {c}"
        )));
    }
    Ok(ops::scale_shift(h, e))
}
