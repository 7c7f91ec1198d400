//! Parameter store and the layer building blocks shared by the denoiser
//! and the conditioning branch.
//!
//! Every layer has two forward paths: `fwd` evaluates against a plain
//! [`Params`] store (inference, no graph retained), `fwd_t` records onto a
//! [`Tape`] for training. Both call the same kernels in `nd::ops`.

use crate::nd::{ops, Tape, Tensor, VarId};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat store of named learnable tensors.
#[derive(Default, Clone)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

/// Binds a tape to a parameter store so layers can resolve `ParamId`s to
/// tape variables. Every parameter becomes a leaf up front, keeping leaf
/// order identical to store order (the optimizer relies on this).
pub struct TapeCtx {
    pub tape: Tape,
    param_vars: Vec<VarId>,
}

impl TapeCtx {
    pub fn new(params: &Params) -> Self {
        let mut tape = Tape::new();
        let param_vars = (0..params.len()).map(|i| tape.leaf(params.value(i).clone())).collect();
        TapeCtx { tape, param_vars }
    }

    pub fn param(&self, id: ParamId) -> VarId {
        self.param_vars[id.0]
    }

    /// Gradients for every parameter, in store order. Missing slots (params
    /// not touched by the graph) come back as zeros.
    pub fn param_grads(&self, params: &Params, root: VarId) -> Vec<Tensor> {
        let grads = self.tape.backward(root);
        self.param_vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&params.value(i).shape))
            })
            .collect()
    }
}

fn kaiming<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, rng).scale(1.0 / (fan_in as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        ps: &mut Params,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.register(&format!("{name}.w"), kaiming(&[cout, cin, k, k], cin * k * k, rng));
        let b = ps.register(&format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv2d { w, b, stride, pad }
    }

    /// Zero-initialized variant, used for output layers so a freshly built
    /// network starts as the identity-ish map.
    pub fn zeroed(ps: &mut Params, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let w = ps.register(&format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
        let b = ps.register(&format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv2d { w, b, stride, pad }
    }

    pub fn fwd(&self, ps: &Params, x: &Tensor) -> Tensor {
        ops::conv2d(x, ps.get(self.w), ps.get(self.b), self.stride, self.pad)
    }

    pub fn fwd_t(&self, cx: &mut TapeCtx, x: VarId) -> VarId {
        let (w, b) = (cx.param(self.w), cx.param(self.b));
        cx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut Params, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let w = ps.register(&format!("{name}.w"), kaiming(&[cout, cin], cin, rng));
        let b = ps.register(&format!("{name}.b"), Tensor::zeros(&[cout]));
        Linear { w, b }
    }

    pub fn zeroed(ps: &mut Params, name: &str, cin: usize, cout: usize) -> Self {
        let w = ps.register(&format!("{name}.w"), Tensor::zeros(&[cout, cin]));
        let b = ps.register(&format!("{name}.b"), Tensor::zeros(&[cout]));
        Linear { w, b }
    }

    pub fn fwd(&self, ps: &Params, x: &Tensor) -> Tensor {
        ops::linear(x, ps.get(self.w), ps.get(self.b))
    }

    pub fn fwd_t(&self, cx: &mut TapeCtx, x: VarId) -> VarId {
        let (w, b) = (cx.param(self.w), cx.param(self.b));
        cx.tape.linear(x, w, b)
    }
}

/// Largest divisor of `c` that is at most 8, used as the group count.
pub fn norm_groups(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(ps: &mut Params, name: &str, c: usize) -> Self {
        let gamma = ps.register(&format!("{name}.gamma"), Tensor::ones(&[c]));
        let beta = ps.register(&format!("{name}.beta"), Tensor::zeros(&[c]));
        GroupNorm { gamma, beta, groups: norm_groups(c) }
    }

    pub fn fwd(&self, ps: &Params, x: &Tensor) -> Tensor {
        ops::group_norm(x, ps.get(self.gamma), ps.get(self.beta), self.groups, NORM_EPS)
    }

    pub fn fwd_t(&self, cx: &mut TapeCtx, x: VarId) -> VarId {
        let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
        cx.tape.group_norm(x, g, b, self.groups, NORM_EPS)
    }
}

/// Single-head self-attention over flattened spatial positions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub norm: GroupNorm,
    pub to_q: Conv2d,
    pub to_k: Conv2d,
    pub to_v: Conv2d,
    pub proj: Conv2d,
    pub channels: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng>(ps: &mut Params, name: &str, c: usize, rng: &mut R) -> Self {
        AttentionBlock {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c),
            to_q: Conv2d::new(ps, &format!("{name}.q"), c, c, 1, 1, 0, rng),
            to_k: Conv2d::new(ps, &format!("{name}.k"), c, c, 1, 1, 0, rng),
            to_v: Conv2d::new(ps, &format!("{name}.v"), c, c, 1, 1, 0, rng),
            proj: Conv2d::zeroed(ps, &format!("{name}.proj"), c, c, 1, 1, 0),
            channels: c,
        }
    }

    pub fn fwd(&self, ps: &Params, x: &Tensor) -> Tensor {
        let (b, c, h, w) = x.dims4();
        let n = h * w;
        let hn = self.norm.fwd(ps, x);
        let q = self.to_q.fwd(ps, &hn).reshaped(&[b, c, n]);
        let k = self.to_k.fwd(ps, &hn).reshaped(&[b, c, n]);
        let v = self.to_v.fwd(ps, &hn).reshaped(&[b, c, n]);
        let qt = ops::transpose_12(&q); // [b, n, c]
        let attn = ops::softmax_last(&ops::bmm(&qt, &k).scale(1.0 / (c as f64).sqrt())); // [b, n, n]
        let vt = ops::transpose_12(&v); // [b, n, c]
        let out = ops::transpose_12(&ops::bmm(&attn, &vt)).reshaped(&[b, c, h, w]);
        self.proj.fwd(ps, &out).add(x)
    }

    pub fn fwd_t(&self, cx: &mut TapeCtx, x: VarId) -> VarId {
        let (b, c, h, w) = cx.tape.data(x).dims4();
        let n = h * w;
        let hn = self.norm.fwd_t(cx, x);
        let q = self.to_q.fwd_t(cx, hn);
        let q = cx.tape.reshape(q, &[b, c, n]);
        let k = self.to_k.fwd_t(cx, hn);
        let k = cx.tape.reshape(k, &[b, c, n]);
        let v = self.to_v.fwd_t(cx, hn);
        let v = cx.tape.reshape(v, &[b, c, n]);
        let qt = cx.tape.transpose_12(q);
        let scores = cx.tape.bmm(qt, k);
        let scores = cx.tape.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = cx.tape.softmax_last(scores);
        let vt = cx.tape.transpose_12(v);
        let out = cx.tape.bmm(attn, vt);
        let out = cx.tape.transpose_12(out);
        let out = cx.tape.reshape(out, &[b, c, h, w]);
        let out = self.proj.fwd_t(cx, out);
        cx.tape.add(out, x)
    }
}
