use super::kernels::{conv2d, conv2d_backward, upsample2x, upsample2x_backward};
use super::{ops, Conv, Exec, LayerNorm, ParamStore, Prelu, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Conv { x: usize, layer: Conv },
    Add(usize, usize),
    Gate { gate: usize, x: usize },
    Concat(Vec<usize>),
    ChannelPool(usize),
    Sigmoid(usize),
    LayerNorm { x: usize, ln: LayerNorm, mean: f32, inv_std: f32 },
    Prelu { x: usize, p: Prelu },
    Upsample(usize),
    Clamp(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording executor. Values of every node are retained until the graph is
/// dropped.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Backpropagates the given output gradients and accumulates parameter
    /// gradients into `grads` (shaped like the parameter store).
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>, grads: &mut [Vec<f32>]) {
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let accumulate = |adj: &mut Vec<Option<Tensor>>, i: usize, g: Tensor| match &mut adj[i] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        };
        for (id, g) in seeds {
            assert!(g.same_shape(&self.nodes[id.0].value), "seed gradient shape mismatch");
            accumulate(&mut adj, id.0, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv { x, layer } => {
                    let need_dx = !matches!(self.nodes[*x].op, Op::Input);
                    let (w_id, b_id) = (layer.weight.0, layer.bias.0);
                    let mut dw = std::mem::take(&mut grads[w_id]);
                    let mut db = std::mem::take(&mut grads[b_id]);
                    let dx = conv2d_backward(
                        self.val(*x),
                        self.params.get(layer.weight),
                        &dy,
                        &layer.geom,
                        &mut dw,
                        Some(&mut db),
                        need_dx,
                    );
                    grads[w_id] = dw;
                    grads[b_id] = db;
                    if let Some(dx) = dx {
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, dy.clone());
                    accumulate(&mut adj, *b, dy);
                }
                Op::Gate { gate, x } => {
                    let (g, xv) = (self.val(*gate), self.val(*x));
                    let mut dg = Tensor::zeros(1, g.h, g.w);
                    for c in 0..xv.c {
                        for ((d, &dyv), &xvv) in dg.data.iter_mut().zip(dy.plane(c)).zip(xv.plane(c)) {
                            *d += dyv * xvv;
                        }
                    }
                    let dx = ops::gate(g, &dy);
                    accumulate(&mut adj, *gate, dg);
                    accumulate(&mut adj, *x, dx);
                }
                Op::Concat(parts) => {
                    let n = dy.plane_len();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.val(p).c;
                        let slice = dy.data[offset * n..(offset + c) * n].to_vec();
                        accumulate(&mut adj, p, Tensor::from_vec(c, dy.h, dy.w, slice));
                        offset += c;
                    }
                }
                Op::ChannelPool(x) => {
                    let xv = self.val(*x);
                    let n = xv.plane_len();
                    let (d_avg, d_max) = dy.data.split_at(n);
                    let inv = 1.0 / xv.c as f32;
                    let mut dx = Tensor::zeros(xv.c, xv.h, xv.w);
                    for p in 0..n {
                        let mut arg = 0;
                        for c in 1..xv.c {
                            if xv.data[c * n + p] > xv.data[arg * n + p] {
                                arg = c;
                            }
                        }
                        for c in 0..xv.c {
                            dx.data[c * n + p] = d_avg[p] * inv;
                        }
                        dx.data[arg * n + p] += d_max[p];
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = dy;
                    dx.data.iter_mut().zip(&node.value.data).for_each(|(d, s)| *d *= s * (1.0 - s));
                    accumulate(&mut adj, *x, dx);
                }
                Op::LayerNorm { x, ln, mean, inv_std } => {
                    let xv = self.val(*x);
                    let n = xv.plane_len();
                    let gamma = self.params.get(ln.gamma);
                    let (gid, bid) = (ln.gamma.0, ln.beta.0);
                    let mut dxhat = vec![0.0f32; xv.data.len()];
                    let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
                    for c in 0..xv.c {
                        let (mut dg, mut dbt) = (0.0f64, 0.0f64);
                        for p in 0..n {
                            let k = c * n + p;
                            let xhat = (xv.data[k] - mean) * inv_std;
                            let d = dy.data[k];
                            dg += (d * xhat) as f64;
                            dbt += d as f64;
                            let dh = d * gamma[c];
                            dxhat[k] = dh;
                            sum_d += dh as f64;
                            sum_dx += (dh * xhat) as f64;
                        }
                        grads[gid][c] += dg as f32;
                        grads[bid][c] += dbt as f32;
                    }
                    let count = xv.data.len() as f64;
                    let (mean_d, mean_dx) = ((sum_d / count) as f32, (sum_dx / count) as f32);
                    let mut dx = Tensor::zeros(xv.c, xv.h, xv.w);
                    for (k, d) in dx.data.iter_mut().enumerate() {
                        let xhat = (xv.data[k] - mean) * inv_std;
                        *d = inv_std * (dxhat[k] - mean_d - xhat * mean_dx);
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Prelu { x, p } => {
                    let xv = self.val(*x);
                    let slope = self.params.get(p.slope);
                    let sid = p.slope.0;
                    let mut dx = dy;
                    for c in 0..xv.c {
                        let mut ds = 0.0f64;
                        for (d, &v) in dx.plane_mut(c).iter_mut().zip(xv.plane(c)) {
                            if v < 0.0 {
                                ds += (*d * v) as f64;
                                *d *= slope[c];
                            }
                        }
                        grads[sid][c] += ds as f32;
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Upsample(x) => {
                    let xv = self.val(*x);
                    accumulate(&mut adj, *x, upsample2x_backward(&dy, xv.h, xv.w));
                }
                Op::Clamp(x) => {
                    // Gradient passes inside [0, 1], and outside it only when
                    // descent would move the value back toward the range.
                    let mut dy = dy;
                    for (g, &v) in dy.data.iter_mut().zip(&self.val(*x).data) {
                        if (v > 1.0 && *g < 0.0) || (v < 0.0 && *g > 0.0) {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut adj, *x, dy)
                }
            }
        }
    }
}

impl Exec for Graph<'_> {
    type Var = NodeId;

    fn params(&self) -> &ParamStore {
        self.params
    }

    fn tensor<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn conv(&mut self, x: &NodeId, layer: &Conv) -> NodeId {
        let (w, b) = (self.params.get(layer.weight), self.params.get(layer.bias));
        let value = conv2d(self.val(x.0), w, Some(b), &layer.geom);
        self.push(value, Op::Conv { x: x.0, layer: *layer })
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let value = ops::add(self.val(a.0), self.val(b.0));
        self.push(value, Op::Add(a.0, b.0))
    }

    fn gate(&mut self, gate: &NodeId, x: &NodeId) -> NodeId {
        let value = ops::gate(self.val(gate.0), self.val(x.0));
        self.push(value, Op::Gate { gate: gate.0, x: x.0 })
    }

    fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(p.0)).collect();
        let value = ops::concat(&refs);
        self.push(value, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    fn channel_pool(&mut self, x: &NodeId) -> NodeId {
        let value = ops::channel_pool(self.val(x.0));
        self.push(value, Op::ChannelPool(x.0))
    }

    fn sigmoid(&mut self, x: &NodeId) -> NodeId {
        let value = ops::sigmoid(self.val(x.0));
        self.push(value, Op::Sigmoid(x.0))
    }

    fn layer_norm(&mut self, x: &NodeId, ln: &LayerNorm) -> NodeId {
        let (value, mean, inv_std) = ops::layer_norm(self.val(x.0), ln, self.params);
        self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                ln: *ln,
                mean,
                inv_std,
            },
        )
    }

    fn prelu(&mut self, x: &NodeId, p: &Prelu) -> NodeId {
        let value = ops::prelu(self.val(x.0), p, self.params);
        self.push(value, Op::Prelu { x: x.0, p: *p })
    }

    fn upsample2x(&mut self, x: &NodeId) -> NodeId {
        let value = upsample2x(self.val(x.0));
        self.push(value, Op::Upsample(x.0))
    }

    fn clamp01(&mut self, x: &NodeId) -> NodeId {
        let value = ops::clamp01(self.val(x.0));
        self.push(value, Op::Clamp(x.0))
    }
}
