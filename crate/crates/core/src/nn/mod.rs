//! A small reverse-mode differentiation engine for single-sample CNNs.
//!
//! Network code is written once against [`Exec`]. [`Eval`] runs it eagerly and
//! drops intermediates as soon as they go out of scope; [`Graph`] records a
//! tape for backpropagation.

mod graph;
pub mod kernels;
mod params;
mod tensor;

use std::rc::Rc;

pub use graph::{Graph, NodeId};
pub use kernels::ConvGeom;
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    /// Registers a biased convolution with Kaiming-uniform taps, using the
    /// PReLU gain for negative slope `slope`.
    pub fn register(store: &mut ParamStore, name: &str, geom: ConvGeom, slope: f32) -> Self {
        let fan_in = geom.patch_len();
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f32)).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            &[geom.out_c, geom.in_c, geom.k, geom.k],
            Init::KaimingUniform { fan_in, bound },
        );
        let bias = store.register(format!("{name}.bias"), &[geom.out_c], Init::Constant { value: 0.0 });
        Self { weight, bias, geom }
    }
}

/// Layer normalization over (channel, height, width) with per-channel affine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), &[channels], Init::Constant { value: 1.0 }),
            beta: store.register(format!("{name}.beta"), &[channels], Init::Constant { value: 0.0 }),
        }
    }
}

/// PReLU with one learned slope per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize, init: f32) -> Self {
        Self {
            slope: store.register(format!("{name}.slope"), &[channels], Init::Constant { value: init }),
        }
    }
}

pub trait Exec {
    type Var: Clone;

    fn params(&self) -> &ParamStore;
    fn tensor<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;

    fn conv(&mut self, x: &Self::Var, layer: &Conv) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    /// Multiplies every channel of `x` by the single-channel `gate`.
    fn gate(&mut self, gate: &Self::Var, x: &Self::Var) -> Self::Var;
    fn concat(&mut self, parts: &[Self::Var]) -> Self::Var;
    /// Two channels: mean and max over the input channels.
    fn channel_pool(&mut self, x: &Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var;
    fn layer_norm(&mut self, x: &Self::Var, ln: &LayerNorm) -> Self::Var;
    fn prelu(&mut self, x: &Self::Var, p: &Prelu) -> Self::Var;
    fn upsample2x(&mut self, x: &Self::Var) -> Self::Var;
    /// Clamp to `[0, 1]`; the recorded gradient passes straight through.
    fn clamp01(&mut self, x: &Self::Var) -> Self::Var;
}

pub(crate) mod ops {
    use super::{LayerNorm, ParamStore, Prelu, Tensor, LAYER_NORM_EPS};

    pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.same_shape(b), "add shape mismatch");
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        Tensor::from_vec(a.c, a.h, a.w, data)
    }

    pub fn gate(g: &Tensor, x: &Tensor) -> Tensor {
        assert!(g.c == 1 && g.h == x.h && g.w == x.w, "gate shape mismatch");
        let mut out = x.clone();
        for c in 0..x.c {
            out.plane_mut(c).iter_mut().zip(&g.data).for_each(|(v, g)| *v *= g);
        }
        out
    }

    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].h, parts[0].w);
        assert!(parts.iter().all(|p| p.h == h && p.w == w), "concat spatial mismatch");
        let c = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(c * h * w);
        parts.iter().for_each(|p| data.extend_from_slice(&p.data));
        Tensor::from_vec(c, h, w, data)
    }

    pub fn channel_pool(x: &Tensor) -> Tensor {
        let n = x.plane_len();
        let mut out = Tensor::zeros(2, x.h, x.w);
        let (avg, max) = out.data.split_at_mut(n);
        max.copy_from_slice(x.plane(0));
        avg.copy_from_slice(x.plane(0));
        for c in 1..x.c {
            for ((a, m), &v) in avg.iter_mut().zip(max.iter_mut()).zip(x.plane(c)) {
                *a += v;
                if v > *m {
                    *m = v;
                }
            }
        }
        let inv = 1.0 / x.c as f32;
        avg.iter_mut().for_each(|a| *a *= inv);
        out
    }

    pub fn sigmoid(x: &Tensor) -> Tensor {
        let data = x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        Tensor::from_vec(x.c, x.h, x.w, data)
    }

    /// Returns the output plus `(mean, inv_std)`.
    pub fn layer_norm(x: &Tensor, ln: &LayerNorm, params: &ParamStore) -> (Tensor, f32, f32) {
        let n = x.data.len() as f64;
        let mean = x.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv_std = (1.0 / (var + LAYER_NORM_EPS as f64).sqrt()) as f32;
        let mean = mean as f32;
        let (gamma, beta) = (params.get(ln.gamma), params.get(ln.beta));
        let mut out = x.clone();
        for c in 0..x.c {
            let (g, b) = (gamma[c], beta[c]);
            out.plane_mut(c).iter_mut().for_each(|v| *v = g * ((*v - mean) * inv_std) + b);
        }
        (out, mean, inv_std)
    }

    pub fn prelu(x: &Tensor, p: &Prelu, params: &ParamStore) -> Tensor {
        let slope = params.get(p.slope);
        let mut out = x.clone();
        for c in 0..x.c {
            let a = slope[c];
            out.plane_mut(c).iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= a
                }
            });
        }
        out
    }

    pub fn clamp01(x: &Tensor) -> Tensor {
        let data = x.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Tensor::from_vec(x.c, x.h, x.w, data)
    }
}

/// Eager inference executor.
pub struct Eval<'p> {
    params: &'p ParamStore,
}

impl<'p> Eval<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params }
    }

    pub fn input(&self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }
}

impl Exec for Eval<'_> {
    type Var = Rc<Tensor>;

    fn params(&self) -> &ParamStore {
        self.params
    }

    fn tensor<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn conv(&mut self, x: &Rc<Tensor>, layer: &Conv) -> Rc<Tensor> {
        let (w, b) = (self.params.get(layer.weight), self.params.get(layer.bias));
        Rc::new(kernels::conv2d(x, w, Some(b), &layer.geom))
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(ops::add(a, b))
    }

    fn gate(&mut self, gate: &Rc<Tensor>, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(ops::gate(gate, x))
    }

    fn concat(&mut self, parts: &[Rc<Tensor>]) -> Rc<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        Rc::new(ops::concat(&refs))
    }

    fn channel_pool(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(ops::channel_pool(x))
    }

    fn sigmoid(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(ops::sigmoid(x))
    }

    fn layer_norm(&mut self, x: &Rc<Tensor>, ln: &LayerNorm) -> Rc<Tensor> {
        Rc::new(ops::layer_norm(x, ln, self.params).0)
    }

    fn prelu(&mut self, x: &Rc<Tensor>, p: &Prelu) -> Rc<Tensor> {
        Rc::new(ops::prelu(x, p, self.params))
    }

    fn upsample2x(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(kernels::upsample2x(x))
    }

    fn clamp01(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(ops::clamp01(x))
    }
}
