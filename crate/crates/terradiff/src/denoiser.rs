//! U-Net noise predictor conditioned on low-resolution image features (by
//! input concatenation) and the resolution/timestep embedding (by per-block
//! scale-shift modulation).

use crate::conditioning::ConditionBundle;
use crate::error::{Error, Result};
use crate::nd::{ops, Tensor, VarId};
use crate::nn::{AttentionBlock, Conv2d, GroupNorm, Linear, Params, TapeCtx};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Per-level channel multiplier; length = num_down + 1.
    pub channel_mults: Vec<usize>,
    pub num_res_blocks: usize,
    /// Levels receiving self-attention blocks.
    pub attention_levels: Vec<usize>,
    /// Channel width of the conditioning feature branch.
    pub cond_channels: usize,
    /// Embedding dimension D of the conditioning vector.
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        let channel_mults = vec![1, 2, 4, 8, 8];
        DenoiserConfig {
            base_channels: 32,
            attention_levels: attention_levels_for(&channel_mults),
            channel_mults,
            num_res_blocks: 3,
            cond_channels: 32,
            embed_dim: 128,
        }
    }
}

/// Levels whose multiplier is 8, the full-scale attention placement.
pub fn attention_levels_for(mults: &[usize]) -> Vec<usize> {
    mults
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| (m == 8).then_some(i))
        .collect()
}

impl DenoiserConfig {
    pub fn num_down(&self) -> usize {
        self.channel_mults.len() - 1
    }

    /// Reference full-scale configuration (not meant to be instantiated in
    /// tests; see `param_count`).
    pub fn full_scale() -> Self {
        let channel_mults = vec![1, 2, 4, 8, 8];
        DenoiserConfig {
            base_channels: 152,
            attention_levels: attention_levels_for(&channel_mults),
            channel_mults,
            num_res_blocks: 3,
            cond_channels: 64,
            embed_dim: 608,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::InvalidConfig("channel_mults must be non-empty".into()));
        }
        if self.base_channels == 0 || self.num_res_blocks == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("denoiser dimensions must be positive".into()));
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.channel_mults.len()) {
            return Err(Error::InvalidConfig(format!("attention level {l} out of range")));
        }
        Ok(())
    }

    /// Total learnable scalar count of a UNet built from this config.
    /// Computed analytically so the full-scale figure can be reported
    /// without instantiating ~6e8 parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0usize;
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let lin = |cin: usize, cout: usize| cout * cin + cout;
        let norm = |c: usize| 2 * c;
        let attn = |c: usize| norm(c) + 4 * conv(c, c, 1);
        let resblock = |cin: usize, cout: usize| {
            let mut r = norm(cin) + conv(cin, cout, 3) + lin(self.embed_dim, 2 * cout) + norm(cout) + conv(cout, cout, 3);
            if cin != cout {
                r += conv(cin, cout, 1);
            }
            r
        };
        let l = self.channel_mults.len();
        let ch: Vec<usize> = self.channel_mults.iter().map(|m| m * self.base_channels).collect();
        n += conv(3 + self.cond_channels, ch[0], 3); // stem
        let mut prev = ch[0];
        for i in 0..l {
            for _ in 0..self.num_res_blocks {
                n += resblock(prev, ch[i]);
                prev = ch[i];
                if self.attention_levels.contains(&i) {
                    n += attn(ch[i]);
                }
            }
            if i < l - 1 {
                n += conv(ch[i], ch[i], 3); // downsample
            }
        }
        n += resblock(ch[l - 1], ch[l - 1]);
        if self.attention_levels.contains(&(l - 1)) {
            n += attn(ch[l - 1]);
        }
        n += resblock(ch[l - 1], ch[l - 1]);
        let mut h = ch[l - 1];
        for i in (0..l).rev() {
            for j in 0..self.num_res_blocks {
                // the skip concat widens only the first block of each level
                let cin = if j == 0 { h + ch[i] } else { ch[i] };
                n += resblock(cin, ch[i]);
                h = ch[i];
                if self.attention_levels.contains(&i) {
                    n += attn(ch[i]);
                }
            }
            if i > 0 {
                n += conv(ch[i], ch[i], 3); // upsample conv
            }
        }
        n += norm(ch[0]) + conv(ch[0], 3, 3);
        n
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng>(ps: &mut Params, name: &str, cin: usize, cout: usize, d: usize, rng: &mut R) -> Self {
        ResBlock {
            norm1: GroupNorm::new(ps, &format!("{name}.n1"), cin),
            conv1: Conv2d::new(ps, &format!("{name}.c1"), cin, cout, 3, 1, 1, rng),
            emb_proj: Linear::new(ps, &format!("{name}.emb"), d, 2 * cout, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.n2"), cout),
            conv2: Conv2d::zeroed(ps, &format!("{name}.c2"), cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
        }
    }

    fn fwd(&self, ps: &Params, x: &Tensor, emb: &Tensor) -> Tensor {
        let h = self.conv1.fwd(ps, &ops::silu(&self.norm1.fwd(ps, x)));
        let e = self.emb_proj.fwd(ps, &ops::silu(emb));
        let h = ops::scale_shift(&self.norm2.fwd(ps, &h), &e);
        let h = self.conv2.fwd(ps, &ops::silu(&h));
        let xs = match &self.skip {
            Some(s) => s.fwd(ps, x),
            None => x.clone(),
        };
        xs.add(&h)
    }

    fn fwd_t(&self, cx: &mut TapeCtx, x: VarId, emb: VarId) -> VarId {
        let h = self.norm1.fwd_t(cx, x);
        let h = cx.tape.silu(h);
        let h = self.conv1.fwd_t(cx, h);
        let e = cx.tape.silu(emb);
        let e = self.emb_proj.fwd_t(cx, e);
        let h = self.norm2.fwd_t(cx, h);
        let h = cx.tape.scale_shift(h, e);
        let h = cx.tape.silu(h);
        let h = self.conv2.fwd_t(cx, h);
        let xs = match &self.skip {
            Some(s) => s.fwd_t(cx, x),
            None => x,
        };
        cx.tape.add(xs, h)
    }
}

#[derive(Clone, Debug)]
struct LevelBlock {
    res: ResBlock,
    attn: Option<AttentionBlock>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: DenoiserConfig,
    stem: Conv2d,
    down: Vec<Vec<LevelBlock>>,
    downsamples: Vec<Option<Conv2d>>,
    mid1: ResBlock,
    mid_attn: Option<AttentionBlock>,
    mid2: ResBlock,
    up: Vec<Vec<LevelBlock>>,
    upsamples: Vec<Option<Conv2d>>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new<R: Rng>(ps: &mut Params, cfg: DenoiserConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.channel_mults.len();
        let ch: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_channels).collect();
        let d = cfg.embed_dim;
        let stem = Conv2d::new(ps, "unet.stem", 3 + cfg.cond_channels, ch[0], 3, 1, 1, rng);
        let mut down = Vec::new();
        let mut downsamples = Vec::new();
        let mut prev = ch[0];
        for i in 0..l {
            let mut blocks = Vec::new();
            for j in 0..cfg.num_res_blocks {
                let res = ResBlock::new(ps, &format!("unet.d{i}.{j}"), prev, ch[i], d, rng);
                prev = ch[i];
                let attn = cfg
                    .attention_levels
                    .contains(&i)
                    .then(|| AttentionBlock::new(ps, &format!("unet.d{i}.{j}.attn"), ch[i], rng));
                blocks.push(LevelBlock { res, attn });
            }
            down.push(blocks);
            downsamples.push(
                (i < l - 1).then(|| Conv2d::new(ps, &format!("unet.down{i}"), ch[i], ch[i], 3, 2, 1, rng)),
            );
        }
        let mid1 = ResBlock::new(ps, "unet.mid1", ch[l - 1], ch[l - 1], d, rng);
        let mid_attn = cfg
            .attention_levels
            .contains(&(l - 1))
            .then(|| AttentionBlock::new(ps, "unet.mid.attn", ch[l - 1], rng));
        let mid2 = ResBlock::new(ps, "unet.mid2", ch[l - 1], ch[l - 1], d, rng);
        let mut up = Vec::new();
        let mut upsamples = Vec::new();
        let mut h = ch[l - 1];
        for i in (0..l).rev() {
            let mut blocks = Vec::new();
            for j in 0..cfg.num_res_blocks {
                let cin = if j == 0 { h + ch[i] } else { ch[i] };
                let res = ResBlock::new(ps, &format!("unet.u{i}.{j}"), cin, ch[i], d, rng);
                h = ch[i];
                let attn = cfg
                    .attention_levels
                    .contains(&i)
                    .then(|| AttentionBlock::new(ps, &format!("unet.u{i}.{j}.attn"), ch[i], rng));
                blocks.push(LevelBlock { res, attn });
            }
            up.push(blocks);
            upsamples.push((i > 0).then(|| Conv2d::new(ps, &format!("unet.up{i}"), ch[i], ch[i], 3, 1, 1, rng)));
        }
        let out_norm = GroupNorm::new(ps, "unet.out.norm", ch[0]);
        let out_conv = Conv2d::zeroed(ps, "unet.out.conv", ch[0], 3, 3, 1, 1);
        Ok(UNet {
            cfg,
            stem,
            down,
            downsamples,
            mid1,
            mid_attn,
            mid2,
            up,
            upsamples,
            out_norm,
            out_conv,
        })
    }

    fn check_input(&self, x_t: &Tensor, cond: &ConditionBundle) -> Result<()> {
        let (_, c, h, w) = x_t.dims4();
        if c != 3 {
            return Err(Error::InvalidInput(format!("x_t must be RGB, got {c} channels")));
        }
        let div = 1 << self.cfg.num_down();
        if h % div != 0 || w % div != 0 {
            return Err(Error::InvalidInput(format!(
                "spatial size {h}x{w} not divisible by 2^{}",
                self.cfg.num_down()
            )));
        }
        let (_, cc, ch, cw) = cond.cond_features.dims4();
        if (ch, cw) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "condition features {ch}x{cw} misaligned with x_t {h}x{w}"
            )));
        }
        if cc != self.cfg.cond_channels {
            return Err(Error::ShapeMismatch(format!(
                "condition channels {cc} != configured {}",
                self.cfg.cond_channels
            )));
        }
        if cond.embed.dims2().1 != self.cfg.embed_dim {
            return Err(Error::ShapeMismatch("embedding dim mismatch".into()));
        }
        Ok(())
    }

    /// Predict the noise content of `x_t` under the given conditioning.
    pub fn predict_noise(&self, ps: &Params, x_t: &Tensor, cond: &ConditionBundle) -> Result<Tensor> {
        self.check_input(x_t, cond)?;
        let emb = &cond.embed;
        let mut h = self.stem.fwd(ps, &ops::concat_chan(x_t, &cond.cond_features));
        let mut skips = Vec::new();
        for (i, level) in self.down.iter().enumerate() {
            for blk in level {
                h = blk.res.fwd(ps, &h, emb);
                if let Some(a) = &blk.attn {
                    h = a.fwd(ps, &h);
                }
            }
            skips.push(h.clone());
            if let Some(dsc) = &self.downsamples[i] {
                h = dsc.fwd(ps, &h);
            }
        }
        h = self.mid1.fwd(ps, &h, emb);
        if let Some(a) = &self.mid_attn {
            h = a.fwd(ps, &h);
        }
        h = self.mid2.fwd(ps, &h, emb);
        for (ui, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("skip per level");
            h = ops::concat_chan(&h, &skip);
            for blk in level {
                h = blk.res.fwd(ps, &h, emb);
                if let Some(a) = &blk.attn {
                    h = a.fwd(ps, &h);
                }
            }
            if let Some(upc) = &self.upsamples[ui] {
                h = ops::silu(&upc.fwd(ps, &ops::nearest_up2(&h)));
            }
        }
        h = ops::silu(&self.out_norm.fwd(ps, &h));
        Ok(self.out_conv.fwd(ps, &h))
    }

    /// Training-path forward; `cond_features` and `embed` are tape vars so
    /// gradients flow into the conditioning branch.
    pub fn predict_noise_t(
        &self,
        cx: &mut TapeCtx,
        x_t: VarId,
        cond_features: VarId,
        embed: VarId,
    ) -> VarId {
        let mut h = cx.tape.concat_chan(x_t, cond_features);
        h = self.stem.fwd_t(cx, h);
        let mut skips = Vec::new();
        for (i, level) in self.down.iter().enumerate() {
            for blk in level {
                h = blk.res.fwd_t(cx, h, embed);
                if let Some(a) = &blk.attn {
                    h = a.fwd_t(cx, h);
                }
            }
            skips.push(h);
            if let Some(dsc) = &self.downsamples[i] {
                h = dsc.fwd_t(cx, h);
            }
        }
        h = self.mid1.fwd_t(cx, h, embed);
        if let Some(a) = &self.mid_attn {
            h = a.fwd_t(cx, h);
        }
        h = self.mid2.fwd_t(cx, h, embed);
        for (ui, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("skip per level");
            h = cx.tape.concat_chan(h, skip);
            for blk in level {
                h = blk.res.fwd_t(cx, h, embed);
                if let Some(a) = &blk.attn {
                    h = a.fwd_t(cx, h);
                }
            }
            if let Some(upc) = &self.upsamples[ui] {
                let u = cx.tape.nearest_up2(h);
                let c = upc.fwd_t(cx, u);
                h = cx.tape.silu(c);
            }
        }
        let n = self.out_norm.fwd_t(cx, h);
        let s = cx.tape.silu(n);
        self.out_conv.fwd_t(cx, s)
    }

    /// ParamIds of every per-block embedding projection, exposed so tests can
    /// zero them and check conditioning invariance.
    pub fn embedding_projection_params(&self) -> Vec<crate::nn::ParamId> {
        let mut ids = Vec::new();
        let mut push = |r: &ResBlock| {
            ids.push(r.emb_proj.w);
            ids.push(r.emb_proj.b);
        };
        for level in &self.down {
            for b in level {
                push(&b.res);
            }
        }
        push(&self.mid1);
        push(&self.mid2);
        for level in &self.up {
            for b in level {
                push(&b.res);
            }
        }
        ids
    }
}
