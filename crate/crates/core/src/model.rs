//! The double-domain guided network.
//!
//! Layout, with `S` scales and `c_s = base_channels · 2^s` channels at scale `s`:
//!
//! ```text
//! [low ; grad] ──stem──┬─ peripheral encoder: ScCAM, stride-2 conv, ... ─┐ skips e_s
//!                      ├─ GEM: encoder ScCAMs → decoder ScCAMs → 1-ch head (+ grad)
//!                      └─ CEM: encoder ScCAMs → decoder ScCAMs → 3-ch head (+ low)
//! fusion decoder, per scale from coarsest: concat(up(prev), e_s, gem_s, cem_s)
//!   → 1×1 merge → ScCAM;  3-ch head (+ low) → clamp → final
//! ```
//!
//! Every ScCAM ends in a residual add, and every head adds its input back,
//! so an all-zero parameter set maps `(low, grad)` to `(low, low, grad)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GradientMap, Image};
use crate::nn::{Conv, ConvGeom, Eval, Exec, Graph, LayerNorm, NodeId, ParamStore, Prelu, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub num_scales: usize,
    pub use_sam: bool,
    pub use_scm: bool,
    pub use_gem: bool,
    pub use_cem: bool,
    pub prelu_init: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            num_scales: 3,
            use_sam: true,
            use_scm: true,
            use_gem: true,
            use_cem: true,
            prelu_init: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::arg("base_channels must be at least 1"));
        }
        if !(1..=8).contains(&self.num_scales) {
            return Err(Error::arg(format!("num_scales must be in 1..=8, got {}", self.num_scales)));
        }
        if !self.prelu_init.is_finite() {
            return Err(Error::arg("prelu_init must be finite"));
        }
        Ok(())
    }

    /// ScCAMs per path: one per scale on each of the encoder and decoder side.
    pub fn blocks_per_path(&self) -> usize {
        2 * self.num_scales
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Input height and width must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.num_scales - 1)
    }
}

/// Standard convolution module: 3×3 conv → layer norm → PReLU. Without SCM
/// the norm is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Scm {
    conv: Conv,
    norm: Option<LayerNorm>,
    act: Prelu,
}

impl Scm {
    pub fn register(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, cfg: &ModelConfig) -> Self {
        let geom = ConvGeom { in_c, out_c, k: 3, stride: 1 };
        Self {
            conv: Conv::register(store, &format!("{name}.conv"), geom, cfg.prelu_init),
            norm: cfg.use_scm.then(|| LayerNorm::register(store, &format!("{name}.norm"), out_c)),
            act: Prelu::register(store, &format!("{name}.act"), out_c, cfg.prelu_init),
        }
    }

    fn apply<E: Exec>(&self, e: &mut E, x: &E::Var) -> E::Var {
        let y = e.conv(x, &self.conv);
        let y = match &self.norm {
            Some(norm) => e.layer_norm(&y, norm),
            None => y,
        };
        e.prelu(&y, &self.act)
    }

    pub fn forward(&self, params: &ParamStore, x: &Tensor) -> Tensor {
        let mut e = Eval::new(params);
        let x = e.input(x.clone());
        unwrap_rc(self.apply(&mut e, &x))
    }
}

/// Spatial attention: channel mean and max → 7×7 conv → sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Sam {
    conv: Conv,
}

impl Sam {
    pub fn register(store: &mut ParamStore, name: &str) -> Self {
        let geom = ConvGeom { in_c: 2, out_c: 1, k: 7, stride: 1 };
        Self {
            conv: Conv::register(store, &format!("{name}.conv"), geom, 0.0),
        }
    }

    fn apply<E: Exec>(&self, e: &mut E, x: &E::Var) -> E::Var {
        let pooled = e.channel_pool(x);
        let logits = e.conv(&pooled, &self.conv);
        e.sigmoid(&logits)
    }

    pub fn forward(&self, params: &ParamStore, x: &Tensor) -> Tensor {
        let mut e = Eval::new(params);
        let x = e.input(x.clone());
        unwrap_rc(self.apply(&mut e, &x))
    }
}

/// Self-calibrated convolution with attention.
///
/// `t = f1x1(x)`; upper = SCM(SAM(t) ⊙ f3x3(t)); lower = SCM(SCM(t));
/// out = f1x1([upper; lower]) + x.
#[derive(Debug, Clone, PartialEq)]
pub struct ScCam {
    reduce: Conv,
    spatial: Conv,
    sam: Option<Sam>,
    upper: Scm,
    lower: [Scm; 2],
    fuse: Conv,
}

impl ScCam {
    pub fn register(store: &mut ParamStore, name: &str, c: usize, cfg: &ModelConfig) -> Self {
        let slope = cfg.prelu_init;
        Self {
            reduce: Conv::register(store, &format!("{name}.reduce"), ConvGeom { in_c: c, out_c: c, k: 1, stride: 1 }, slope),
            spatial: Conv::register(store, &format!("{name}.spatial"), ConvGeom { in_c: c, out_c: c, k: 3, stride: 1 }, slope),
            sam: cfg.use_sam.then(|| Sam::register(store, &format!("{name}.sam"))),
            upper: Scm::register(store, &format!("{name}.upper"), c, c, cfg),
            lower: [
                Scm::register(store, &format!("{name}.lower0"), c, c, cfg),
                Scm::register(store, &format!("{name}.lower1"), c, c, cfg),
            ],
            fuse: Conv::register(store, &format!("{name}.fuse"), ConvGeom { in_c: 2 * c, out_c: c, k: 1, stride: 1 }, slope),
        }
    }

    fn apply<E: Exec>(&self, e: &mut E, x: &E::Var) -> E::Var {
        let t = e.conv(x, &self.reduce);
        let spatial = e.conv(&t, &self.spatial);
        let gated = match &self.sam {
            Some(sam) => {
                let attention = sam.apply(e, &t);
                e.gate(&attention, &spatial)
            }
            None => spatial,
        };
        let upper = self.upper.apply(e, &gated);
        let lower = self.lower[0].apply(e, &t);
        let lower = self.lower[1].apply(e, &lower);
        let both = e.concat(&[upper, lower]);
        let fused = e.conv(&both, &self.fuse);
        e.add(&fused, x)
    }

    pub fn forward(&self, params: &ParamStore, x: &Tensor) -> Tensor {
        let mut e = Eval::new(params);
        let x = e.input(x.clone());
        unwrap_rc(self.apply(&mut e, &x))
    }

    pub fn sam(&self) -> Option<&Sam> {
        self.sam.as_ref()
    }
}

fn unwrap_rc(t: std::rc::Rc<Tensor>) -> Tensor {
    std::rc::Rc::try_unwrap(t).unwrap_or_else(|rc| (*rc).clone())
}

fn down_conv(store: &mut ParamStore, name: &str, cfg: &ModelConfig, s: usize) -> Conv {
    let geom = ConvGeom { in_c: cfg.channels(s), out_c: cfg.channels(s + 1), k: 3, stride: 2 };
    Conv::register(store, name, geom, cfg.prelu_init)
}

/// 3×3 conv applied after bilinear upsampling, from scale `s + 1` to `s`.
fn up_conv(store: &mut ParamStore, name: &str, cfg: &ModelConfig, s: usize) -> Conv {
    let geom = ConvGeom { in_c: cfg.channels(s + 1), out_c: cfg.channels(s), k: 3, stride: 1 };
    Conv::register(store, name, geom, cfg.prelu_init)
}

/// Multi-scale ScCAM encoder (shared shape of the peripheral encoder and the
/// encoder half of each branch).
#[derive(Debug, Clone, PartialEq)]
struct Encoder {
    blocks: Vec<ScCam>,
    down: Vec<Conv>,
}

impl Encoder {
    fn register(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Self {
        let s_max = cfg.num_scales;
        Self {
            blocks: (0..s_max)
                .map(|s| ScCam::register(store, &format!("{name}.enc{s}"), cfg.channels(s), cfg))
                .collect(),
            down: (0..s_max - 1).map(|s| down_conv(store, &format!("{name}.down{s}"), cfg, s)).collect(),
        }
    }

    /// Per-scale features, finest first.
    fn apply<E: Exec>(&self, e: &mut E, x: &E::Var) -> Vec<E::Var> {
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for (s, block) in self.blocks.iter().enumerate() {
            let f = block.apply(e, &cur);
            if let Some(down) = self.down.get(s) {
                cur = e.conv(&f, down);
            }
            feats.push(f);
        }
        feats
    }
}

/// GEM or CEM: an encoder-decoder with additive skips and its own output head.
#[derive(Debug, Clone, PartialEq)]
struct Branch {
    encoder: Encoder,
    up: Vec<Conv>,
    dec: Vec<ScCam>,
    head: Conv,
}

impl Branch {
    fn register(store: &mut ParamStore, name: &str, cfg: &ModelConfig, out_c: usize) -> Self {
        let s_max = cfg.num_scales;
        let encoder = Encoder::register(store, name, cfg);
        let up = (0..s_max - 1).map(|s| up_conv(store, &format!("{name}.up{s}"), cfg, s)).collect();
        let dec = (0..s_max)
            .map(|s| ScCam::register(store, &format!("{name}.dec{s}"), cfg.channels(s), cfg))
            .collect();
        let head = Conv::register(
            store,
            &format!("{name}.head"),
            ConvGeom { in_c: cfg.channels(0), out_c, k: 3, stride: 1 },
            cfg.prelu_init,
        );
        Self { encoder, up, dec, head }
    }

    /// Returns decoder features per scale (finest first) and the head output.
    fn apply<E: Exec>(&self, e: &mut E, x: &E::Var) -> (Vec<E::Var>, E::Var) {
        let enc = self.encoder.apply(e, x);
        let s_max = enc.len();
        let mut dec: Vec<Option<E::Var>> = vec![None; s_max];
        let mut cur = self.dec[s_max - 1].apply(e, &enc[s_max - 1]);
        dec[s_max - 1] = Some(cur.clone());
        for s in (0..s_max - 1).rev() {
            let up = e.upsample2x(&cur);
            let up = e.conv(&up, &self.up[s]);
            let merged = e.add(&up, &enc[s]);
            cur = self.dec[s].apply(e, &merged);
            dec[s] = Some(cur.clone());
        }
        let head = e.conv(&cur, &self.head);
        (dec.into_iter().map(|d| d.expect("every scale decoded")).collect(), head)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Network {
    stem: Conv,
    encoder: Encoder,
    gem: Option<Branch>,
    cem: Option<Branch>,
    merge: Vec<Conv>,
    up: Vec<Conv>,
    dec: Vec<ScCam>,
    head: Conv,
}

/// Raw executor handles for the three outputs.
pub struct Outputs<V> {
    pub final_image: V,
    pub coarse: Option<V>,
    pub grad_pred: Option<V>,
}

impl Network {
    fn register(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let s_max = cfg.num_scales;
        let slope = cfg.prelu_init;
        let stem = Conv::register(store, "stem", ConvGeom { in_c: 4, out_c: cfg.channels(0), k: 3, stride: 1 }, slope);
        let encoder = Encoder::register(store, "periph", cfg);
        let gem = cfg.use_gem.then(|| Branch::register(store, "gem", cfg, 1));
        let cem = cfg.use_cem.then(|| Branch::register(store, "cem", cfg, 3));
        let branches = cfg.use_gem as usize + cfg.use_cem as usize;
        let merge = (0..s_max)
            .map(|s| {
                let c = cfg.channels(s);
                let upstream = usize::from(s + 1 < s_max);
                let in_c = c * (1 + branches + upstream);
                Conv::register(store, &format!("fusion.merge{s}"), ConvGeom { in_c, out_c: c, k: 1, stride: 1 }, slope)
            })
            .collect();
        let up = (0..s_max - 1).map(|s| up_conv(store, &format!("fusion.up{s}"), cfg, s)).collect();
        let dec = (0..s_max)
            .map(|s| ScCam::register(store, &format!("fusion.dec{s}"), cfg.channels(s), cfg))
            .collect();
        let head = Conv::register(store, "fusion.head", ConvGeom { in_c: cfg.channels(0), out_c: 3, k: 3, stride: 1 }, slope);
        Self {
            stem,
            encoder,
            gem,
            cem,
            merge,
            up,
            dec,
            head,
        }
    }

    fn apply<E: Exec>(&self, e: &mut E, low: &E::Var, grad: &E::Var) -> Outputs<E::Var> {
        let input = e.concat(&[low.clone(), grad.clone()]);
        let stem = e.conv(&input, &self.stem);
        let skips = self.encoder.apply(e, &stem);
        let gem = self.gem.as_ref().map(|b| b.apply(e, &stem));
        let cem = self.cem.as_ref().map(|b| b.apply(e, &stem));

        let s_max = skips.len();
        let mut cur: Option<E::Var> = None;
        for s in (0..s_max).rev() {
            let mut parts = Vec::with_capacity(4);
            if let Some(prev) = cur.take() {
                let up = e.upsample2x(&prev);
                parts.push(e.conv(&up, &self.up[s]));
            }
            parts.push(skips[s].clone());
            if let Some((feats, _)) = &gem {
                parts.push(feats[s].clone());
            }
            if let Some((feats, _)) = &cem {
                parts.push(feats[s].clone());
            }
            let cat = e.concat(&parts);
            drop(parts);
            let merged = e.conv(&cat, &self.merge[s]);
            cur = Some(self.dec[s].apply(e, &merged));
        }
        drop(skips);
        let head = e.conv(&cur.expect("at least one scale"), &self.head);
        let residual = e.add(&head, low);
        let final_image = e.clamp01(&residual);

        let coarse = cem.map(|(_, head)| {
            let residual = e.add(&head, low);
            e.clamp01(&residual)
        });
        let grad_pred = gem.map(|(_, head)| e.add(&head, grad));
        Outputs {
            final_image,
            coarse,
            grad_pred,
        }
    }
}

/// Network outputs: the enhanced image, the CEM coarse image and the GEM
/// gradient estimate (absent when the corresponding branch is ablated).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub final_image: Image,
    pub coarse: Option<Image>,
    pub grad_pred: Option<GradientMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    params: ParamStore,
    net: Network,
}

/// Builds a model with deterministic Kaiming-uniform initialization.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(config, seed)
}

/// Exact number of scalar parameters.
pub fn count_params(model: &Model) -> usize {
    model.params.scalar_count()
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::uninitialized(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.params.initialize(&mut rng);
        Ok(model)
    }

    /// Every weight, bias, norm affine term and PReLU slope set to zero.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        let mut model = Self::uninitialized(config, 0)?;
        model.params.zero_all();
        Ok(model)
    }

    /// Architecture with constant-initialized parameters only; used when the
    /// values are about to be overwritten from a checkpoint.
    pub(crate) fn uninitialized(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = Network::register(&mut params, config);
        Ok(Self {
            config: config.clone(),
            seed,
            params,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn check_input(&self, low: &Image, grad: &GradientMap) -> Result<()> {
        if low.channels() != 3 {
            return Err(Error::arg(format!("network input must have 3 channels, got {}", low.channels())));
        }
        if low.height() != grad.height() || low.width() != grad.width() {
            return Err(Error::arg(format!(
                "gradient map {}x{} does not match image {}x{}",
                grad.height(),
                grad.width(),
                low.height(),
                low.width()
            )));
        }
        let d = self.config.size_divisor();
        if low.height() % d != 0 || low.width() % d != 0 {
            return Err(Error::arg(format!(
                "image {}x{} is not divisible by {d}; pad the input first",
                low.height(),
                low.width()
            )));
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(&self, low: &Image, grad: &GradientMap) -> Result<ForwardOutput> {
        self.check_input(low, grad)?;
        let (h, w) = (low.height(), low.width());
        let mut e = Eval::new(&self.params);
        let low_v = e.input(image_tensor(low));
        let grad_v = e.input(gradient_tensor(grad));
        let out = self.net.apply(&mut e, &low_v, &grad_v);
        drop((low_v, grad_v));
        let to_image = |t: std::rc::Rc<Tensor>| Image::from_clamped(h, w, 3, unwrap_rc(t).data);
        Ok(ForwardOutput {
            final_image: to_image(out.final_image)?,
            coarse: out.coarse.map(to_image).transpose()?,
            grad_pred: out.grad_pred.map(|t| GradientMap::new(h, w, unwrap_rc(t).data)).transpose()?,
        })
    }

    /// Records a forward pass on `graph` for training.
    pub fn forward_graph(&self, graph: &mut Graph<'_>, low: &Image, grad: &GradientMap) -> Result<Outputs<NodeId>> {
        self.check_input(low, grad)?;
        let low_v = graph.input(image_tensor(low));
        let grad_v = graph.input(gradient_tensor(grad));
        Ok(self.net.apply(graph, &low_v, &grad_v))
    }

    /// Rough peak working-set size of an inference pass, in bytes.
    pub fn inference_bytes(&self, height: usize, width: usize) -> usize {
        // Roughly two dozen live full-resolution feature maps at the finest
        // scale, with a geometric tail for the coarser ones.
        let finest = height * width * self.config.base_channels * std::mem::size_of::<f32>();
        finest * 24 + (64 << 20)
    }
}

pub(crate) fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_vec(img.channels(), img.height(), img.width(), img.data().to_vec())
}

pub(crate) fn gradient_tensor(grad: &GradientMap) -> Tensor {
    Tensor::from_vec(1, grad.height(), grad.width(), grad.data().to_vec())
}
