//! Reverse-mode tape over the kernels in [`super::ops`].

use super::ops;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    datas: Vec<Tensor>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.datas.push(t);
        self.nodes.push(Node { parents: vec![], back: None });
        VarId(self.datas.len() - 1)
    }

    pub fn data(&self, id: VarId) -> &Tensor {
        &self.datas[id.0]
    }

    fn push(&mut self, data: Tensor, parents: Vec<usize>, back: BackFn) -> VarId {
        self.datas.push(data);
        self.nodes.push(Node { parents, back: Some(back) });
        VarId(self.datas.len() - 1)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let d = self.datas[a.0].add(&self.datas[b.0]);
        self.push(d, vec![a.0, b.0], Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let d = self.datas[a.0].sub(&self.datas[b.0]);
        self.push(d, vec![a.0, b.0], Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)]))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let d = self.datas[a.0].mul(&self.datas[b.0]);
        self.push(
            d,
            vec![a.0, b.0],
            Box::new(|g, p, _| vec![g.mul(p[1]), g.mul(p[0])]),
        )
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let d = self.datas[a.0].scale(c);
        self.push(d, vec![a.0], Box::new(move |g, _, _| vec![g.scale(c)]))
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let d = ops::silu(&self.datas[a.0]);
        self.push(d, vec![a.0], Box::new(|g, p, _| vec![ops::silu_backward(p[0], g)]))
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let d = ops::conv2d(&self.datas[x.0], &self.datas[w.0], &self.datas[b.0], stride, pad);
        self.push(
            d,
            vec![x.0, w.0, b.0],
            Box::new(move |g, p, _| {
                let (dx, dw, db) = ops::conv2d_backward(p[0], p[1], g, stride, pad);
                vec![dx, dw, db]
            }),
        )
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let d = ops::linear(&self.datas[x.0], &self.datas[w.0], &self.datas[b.0]);
        self.push(
            d,
            vec![x.0, w.0, b.0],
            Box::new(|g, p, _| {
                let (dx, dw, db) = ops::linear_backward(p[0], p[1], g);
                vec![dx, dw, db]
            }),
        )
    }

    pub fn group_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, groups: usize, eps: f64) -> VarId {
        let d = ops::group_norm(&self.datas[x.0], &self.datas[gamma.0], &self.datas[beta.0], groups, eps);
        self.push(
            d,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |g, p, _| {
                let (dx, dgamma, dbeta) = ops::group_norm_backward(p[0], p[1], g, groups, eps);
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    pub fn nearest_up2(&mut self, x: VarId) -> VarId {
        let d = ops::nearest_up2(&self.datas[x.0]);
        self.push(d, vec![x.0], Box::new(|g, p, _| vec![ops::nearest_up2_backward(p[0], g)]))
    }

    pub fn concat_chan(&mut self, a: VarId, b: VarId) -> VarId {
        let ca = self.datas[a.0].shape[1];
        let cb = self.datas[b.0].shape[1];
        let d = ops::concat_chan(&self.datas[a.0], &self.datas[b.0]);
        self.push(
            d,
            vec![a.0, b.0],
            Box::new(move |g, _, _| {
                let (da, db) = ops::concat_chan_backward(ca, cb, g);
                vec![da, db]
            }),
        )
    }

    pub fn scale_shift(&mut self, h: VarId, e: VarId) -> VarId {
        let d = ops::scale_shift(&self.datas[h.0], &self.datas[e.0]);
        self.push(
            d,
            vec![h.0, e.0],
            Box::new(|g, p, _| {
                let (dh, de) = ops::scale_shift_backward(p[0], p[1], g);
                vec![dh, de]
            }),
        )
    }

    pub fn bmm(&mut self, a: VarId, b: VarId) -> VarId {
        let d = ops::bmm(&self.datas[a.0], &self.datas[b.0]);
        self.push(
            d,
            vec![a.0, b.0],
            Box::new(|g, p, _| {
                let (da, db) = ops::bmm_backward(p[0], p[1], g);
                vec![da, db]
            }),
        )
    }

    pub fn transpose_12(&mut self, a: VarId) -> VarId {
        let d = ops::transpose_12(&self.datas[a.0]);
        self.push(d, vec![a.0], Box::new(|g, _, _| vec![ops::transpose_12(g)]))
    }

    pub fn softmax_last(&mut self, a: VarId) -> VarId {
        let d = ops::softmax_last(&self.datas[a.0]);
        self.push(
            d,
            vec![a.0],
            Box::new(|g, _, out| vec![ops::softmax_last_backward(out, g)]),
        )
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let old_shape = self.datas[a.0].shape.clone();
        let d = self.datas[a.0].clone().reshaped(shape);
        self.push(
            d,
            vec![a.0],
            Box::new(move |g, _, _| vec![g.clone().reshaped(&old_shape)]),
        )
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let d = ops::mean_all(&self.datas[a.0]);
        self.push(d, vec![a.0], Box::new(|g, p, _| vec![ops::mean_all_backward(p[0], g)]))
    }

    /// Backpropagate from a scalar root; returns one gradient slot per node.
    pub fn backward(&self, root: VarId) -> Vec<Option<Tensor>> {
        assert_eq!(self.datas[root.0].len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.datas.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                let parent_data: Vec<&Tensor> =
                    self.nodes[i].parents.iter().map(|&p| &self.datas[p]).collect();
                let pgrads = back(&g, &parent_data, &self.datas[i]);
                for (&p, pg) in self.nodes[i].parents.iter().zip(pgrads) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            } else {
                grads[i] = Some(g); // keep leaf gradients
            }
        }
        grads
    }
}
