//! Dynamic reverse-mode autodiff over 2-D f64 tensors.
//!
//! A `Graph` is a tape of nodes built during one forward pass. Every op
//! records a closure that maps the upstream gradient to gradients for its
//! parents. `backward` walks the tape in reverse from a scalar root and
//! accumulates gradients of parameter leaves into a `GradStore`.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use super::param::{GradStore, ParamId, ParamStore};

pub type NodeId = usize;

type BackFn = Box<dyn Fn(&Array2<f64>) -> Vec<Array2<f64>> + Send>;

struct Node {
    value: Arc<Array2<f64>>,
    parents: Vec<NodeId>,
    backward: Option<BackFn>,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &mut self,
        value: Array2<f64>,
        parents: Vec<NodeId>,
        backward: Option<BackFn>,
        param: Option<ParamId>,
    ) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            parents,
            backward,
            param,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.dim(), (1, 1));
        self.nodes[id].value[[0, 0]]
    }

    fn arc(&self, id: NodeId) -> Arc<Array2<f64>> {
        Arc::clone(&self.nodes[id].value)
    }

    // ---- leaves ----

    pub fn constant(&mut self, v: Array2<f64>) -> NodeId {
        self.push(v, vec![], None, None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(
            store.value(id).as_ref().clone(),
            vec![],
            None,
            Some(id),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.arc(a), self.arc(b));
        let out = va.dot(vb.as_ref());
        let (ca, cb) = (Arc::clone(&va), Arc::clone(&vb));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g.dot(&cb.t()), ca.t().dot(g)]
            })),
            None,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let va = self.arc(a);
        self.push(
            va.t().to_owned(),
            vec![a],
            Some(Box::new(|g| vec![g.t().to_owned()])),
            None,
        )
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a].value.as_ref() + self.nodes[b].value.as_ref();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
            None,
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a].value.as_ref() - self.nodes[b].value.as_ref();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g| vec![g.clone(), -g])),
            None,
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.arc(a), self.arc(b));
        let out = va.as_ref() * vb.as_ref();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g * vb.as_ref(), g * va.as_ref()]
            })),
            None,
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a].value.as_ref() * c;
        self.push(out, vec![a], Some(Box::new(move |g| vec![g * c])), None)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a].value.as_ref() + c;
        self.push(out, vec![a], Some(Box::new(|g| vec![g.clone()])), None)
    }

    // ---- broadcasts (column vector over time axis) ----

    /// x (C,T) + b (C,1), b broadcast over columns.
    pub fn add_col(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let vb = self.arc(b);
        let out = self.nodes[x].value.as_ref() + vb.as_ref();
        self.push(
            out,
            vec![x, b],
            Some(Box::new(|g| {
                let gb = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![g.clone(), gb]
            })),
            None,
        )
    }

    /// x (C,T) * s (C,1), s broadcast over columns.
    pub fn mul_col(&mut self, x: NodeId, scl: NodeId) -> NodeId {
        let (vx, vs) = (self.arc(x), self.arc(scl));
        let out = vx.as_ref() * vs.as_ref();
        self.push(
            out,
            vec![x, scl],
            Some(Box::new(move |g| {
                let gx = g * vs.as_ref();
                let gs = (g * vx.as_ref()).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![gx, gs]
            })),
            None,
        )
    }

    /// Repeat a (C,1) column T times to (C,T).
    pub fn broadcast_col(&mut self, h: NodeId, t: usize) -> NodeId {
        let vh = self.arc(h);
        let (c, _) = vh.dim();
        let out = vh.broadcast((c, t)).unwrap().to_owned();
        self.push(
            out,
            vec![h],
            Some(Box::new(|g| {
                vec![g.sum_axis(Axis(1)).insert_axis(Axis(1))]
            })),
            None,
        )
    }

    // ---- structure ----

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.arc(a), self.arc(b));
        let ra = va.nrows();
        let out = ndarray::concatenate(Axis(0), &[va.view(), vb.view()]).unwrap();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![
                    g.slice(s![..ra, ..]).to_owned(),
                    g.slice(s![ra.., ..]).to_owned(),
                ]
            })),
            None,
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.arc(a), self.arc(b));
        let ca = va.ncols();
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).unwrap();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![
                    g.slice(s![.., ..ca]).to_owned(),
                    g.slice(s![.., ca..]).to_owned(),
                ]
            })),
            None,
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> NodeId {
        let vx = self.arc(x);
        let dim = vx.dim();
        let out = vx.slice(s![r0..r1, ..]).to_owned();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Array2::zeros(dim);
                gx.slice_mut(s![r0..r1, ..]).assign(g);
                vec![gx]
            })),
            None,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> NodeId {
        let vx = self.arc(x);
        let dim = vx.dim();
        let out = vx.slice(s![.., c0..c1]).to_owned();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Array2::zeros(dim);
                gx.slice_mut(s![.., c0..c1]).assign(g);
                vec![gx]
            })),
            None,
        )
    }

    pub fn pad_cols(&mut self, x: NodeId, left: usize, right: usize) -> NodeId {
        let vx = self.arc(x);
        let (c, t) = vx.dim();
        let mut out = Array2::zeros((c, t + left + right));
        out.slice_mut(s![.., left..left + t]).assign(vx.as_ref());
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                vec![g.slice(s![.., left..left + t]).to_owned()]
            })),
            None,
        )
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vx = self.arc(x);
        let out = vx.mapv(|v| v.max(0.0));
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                vec![g * &vx.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })]
            })),
            None,
        )
    }

    /// min(x, 0); combined with `relu` and `mul_col` this builds PReLU.
    pub fn neg_part(&mut self, x: NodeId) -> NodeId {
        let vx = self.arc(x);
        let out = vx.mapv(|v| v.min(0.0));
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                vec![g * &vx.mapv(|v| if v < 0.0 { 1.0 } else { 0.0 })]
            })),
            None,
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vx = self.arc(x);
        let out = vx.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y = Arc::new(out.clone());
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                vec![g * &y.mapv(|s| s * (1.0 - s))]
            })),
            None,
        )
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let vx = self.arc(x);
        let out = vx.mapv(f64::tanh);
        let y = Arc::new(out.clone());
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![g * &y.mapv(|s| 1.0 - s * s)])),
            None,
        )
    }

    /// Softmax over each column (entries of one column sum to 1).
    pub fn softmax_cols(&mut self, x: NodeId) -> NodeId {
        let vx = self.arc(x);
        let mut out = Array2::zeros(vx.dim());
        for (j, col) in vx.axis_iter(Axis(1)).enumerate() {
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = col.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (i, e) in exps.iter().enumerate() {
                out[[i, j]] = e / sum;
            }
        }
        let y = Arc::new(out.clone());
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Array2::zeros(g.dim());
                for j in 0..g.ncols() {
                    let dot: f64 = (0..g.nrows()).map(|i| g[[i, j]] * y[[i, j]]).sum();
                    for i in 0..g.nrows() {
                        gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                vec![gx]
            })),
            None,
        )
    }

    // ---- normalization ----

    /// Per-column zero-mean/unit-variance (layer norm core, without gain/bias).
    pub fn normalize_cols(&mut self, x: NodeId, eps: f64) -> NodeId {
        let vx = self.arc(x);
        let c = vx.nrows() as f64;
        let mut out = Array2::zeros(vx.dim());
        let mut inv_std = Vec::with_capacity(vx.ncols());
        for j in 0..vx.ncols() {
            let col = vx.column(j);
            let mu = col.sum() / c;
            let var = col.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for i in 0..vx.nrows() {
                out[[i, j]] = (vx[[i, j]] - mu) * is;
            }
        }
        let y = Arc::new(out.clone());
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let n = g.nrows() as f64;
                let mut gx = Array2::zeros(g.dim());
                for j in 0..g.ncols() {
                    let mean_g: f64 = g.column(j).sum() / n;
                    let mean_gy: f64 =
                        (0..g.nrows()).map(|i| g[[i, j]] * y[[i, j]]).sum::<f64>() / n;
                    for i in 0..g.nrows() {
                        gx[[i, j]] = inv_std[j] * (g[[i, j]] - mean_g - y[[i, j]] * mean_gy);
                    }
                }
                vec![gx]
            })),
            None,
        )
    }

    /// Zero-mean/unit-variance over all entries (global layer norm core).
    pub fn normalize_global(&mut self, x: NodeId, eps: f64) -> NodeId {
        let vx = self.arc(x);
        let n = vx.len() as f64;
        let mu = vx.sum() / n;
        let var = vx.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let out = vx.mapv(|v| (v - mu) * inv_std);
        let y = Arc::new(out.clone());
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let n = g.len() as f64;
                let mean_g = g.sum() / n;
                let mean_gy = (g * y.as_ref()).sum() / n;
                let gx = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gi, &yi)| inv_std * (gi - mean_g - yi * mean_gy))
                    .collect::<Vec<_>>();
                vec![Array2::from_shape_vec(g.dim(), gx).unwrap()]
            })),
            None,
        )
    }

    // ---- convolution primitives ----

    /// Depthwise 1-D conv along columns: x (C, Tp) with kernel w (C, P) and
    /// dilation d. No implicit padding; output has Tp - d*(P-1) columns.
    pub fn depthwise_conv(&mut self, x: NodeId, w: NodeId, dilation: usize) -> NodeId {
        let (vx, vw) = (self.arc(x), self.arc(w));
        let (c, tp) = vx.dim();
        let p = vw.ncols();
        let t0 = tp - dilation * (p - 1);
        let mut out = Array2::zeros((c, t0));
        for k in 0..p {
            let off = k * dilation;
            out += &(&vx.slice(s![.., off..off + t0]) * &vw.slice(s![.., k..k + 1]));
        }
        let (cx, cw) = (Arc::clone(&vx), Arc::clone(&vw));
        self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g| {
                let mut gx = Array2::zeros((c, tp));
                let mut gw = Array2::zeros((c, p));
                for k in 0..p {
                    let off = k * dilation;
                    gx.slice_mut(s![.., off..off + t0])
                        .scaled_add(1.0, &(g * &cw.slice(s![.., k..k + 1])));
                    let prod = (g * &cx.slice(s![.., off..off + t0])).sum_axis(Axis(1));
                    gw.column_mut(k).assign(&prod);
                }
                vec![gx, gw]
            })),
            None,
        )
    }

    /// Overlap-add of frame signals: frames (L, K) laid out at `stride`
    /// offsets, producing a (1, (K-1)*stride + L) signal.
    pub fn overlap_add(&mut self, frames: NodeId, stride: usize) -> NodeId {
        let vf = self.arc(frames);
        let (l, k) = vf.dim();
        let t = (k - 1) * stride + l;
        let mut out = Array2::zeros((1, t));
        for j in 0..k {
            for i in 0..l {
                out[[0, j * stride + i]] += vf[[i, j]];
            }
        }
        self.push(
            out,
            vec![frames],
            Some(Box::new(move |g| {
                let mut gf = Array2::zeros((l, k));
                for j in 0..k {
                    for i in 0..l {
                        gf[[i, j]] = g[[0, j * stride + i]];
                    }
                }
                vec![gf]
            })),
            None,
        )
    }

    // ---- reductions and scalar ops ----

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let vx = self.arc(x);
        let dim = vx.dim();
        let out = Array2::from_elem((1, 1), vx.sum());
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                vec![Array2::from_elem(dim, g[[0, 0]])]
            })),
            None,
        )
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// sum(x * c) for a constant array c.
    pub fn dot_const(&mut self, x: NodeId, c: Arc<Array2<f64>>) -> NodeId {
        let vx = self.arc(x);
        let out = Array2::from_elem((1, 1), (vx.as_ref() * c.as_ref()).sum());
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![c.as_ref() * g[[0, 0]]])),
            None,
        )
    }

    /// y = x * s where s is a (1,1) node.
    pub fn scale_node(&mut self, x: NodeId, scl: NodeId) -> NodeId {
        let (vx, vs) = (self.arc(x), self.arc(scl));
        let sv = vs[[0, 0]];
        let out = vx.as_ref() * sv;
        self.push(
            out,
            vec![x, scl],
            Some(Box::new(move |g| {
                let gs = Array2::from_elem((1, 1), (g * vx.as_ref()).sum());
                vec![g * sv, gs]
            })),
            None,
        )
    }

    pub fn div_scalar_nodes(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.scalar(a), self.scalar(b));
        let out = Array2::from_elem((1, 1), va / vb);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let gv = g[[0, 0]];
                vec![
                    Array2::from_elem((1, 1), gv / vb),
                    Array2::from_elem((1, 1), -gv * va / (vb * vb)),
                ]
            })),
            None,
        )
    }

    pub fn ln_scalar(&mut self, a: NodeId) -> NodeId {
        let va = self.scalar(a);
        let out = Array2::from_elem((1, 1), va.ln());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Array2::from_elem((1, 1), g[[0, 0]] / va)]
            })),
            None,
        )
    }

    /// Cross-entropy of a logit column (C,1) against a class index:
    /// logsumexp(logits) - logits[target].
    pub fn cross_entropy_logits(&mut self, logits: NodeId, target: usize) -> NodeId {
        let vl = self.arc(logits);
        debug_assert_eq!(vl.ncols(), 1);
        let max = vl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + vl.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let out = Array2::from_elem((1, 1), lse - vl[[target, 0]]);
        self.push(
            out,
            vec![logits],
            Some(Box::new(move |g| {
                let gv = g[[0, 0]];
                let mut gl = vl.mapv(|v| (v - lse).exp() * gv);
                gl[[target, 0]] -= gv;
                vec![gl]
            })),
            None,
        )
    }

    // ---- backward ----

    /// Reverse pass from a (1,1) root. Parameter-leaf gradients are
    /// accumulated into `grads` (which must be aligned with the store the
    /// leaves came from).
    pub fn backward(&self, root: NodeId, grads: &mut GradStore) {
        assert_eq!(self.nodes[root].value.dim(), (1, 1), "root must be scalar");
        let mut node_grads: Vec<Option<Array2<f64>>> = (0..=root).map(|_| None).collect();
        node_grads[root] = Some(Array2::ones((1, 1)));
        for id in (0..=root).rev() {
            let Some(g) = node_grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Some(pid) = node.param {
                grads.grads[pid] += &g;
            }
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut node_grads[*pid] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
    }
}
