//! Training objective: ℓ2 gradient-map consistency, ℓ2 coarse image loss and
//! an SSIM-based final loss, combined by fixed weights.
//!
//! Every loss has a `*_with_grad` form returning the gradient with respect
//! to the prediction, which the trainer feeds into backpropagation.

use serde::{Deserialize, Serialize};

use crate::datagen::PairedSample;
use crate::error::{Error, Result};
use crate::image::{GradientMap, Image};
use crate::model::ForwardOutput;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 0.2, w2: 0.2, w3: 0.6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::arg(format!("loss weight {name} must be a nonnegative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// How the three per-channel SSIM values enter the final loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalLossForm {
    /// `1 − mean_c SSIM_c`; zero at a perfect reconstruction.
    #[default]
    Mean,
    /// `1 − Σ_c SSIM_c`; reaches −2 at a perfect reconstruction.
    LiteralSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lap: f64,
    pub coarse: f64,
    #[serde(rename = "final")]
    pub final_: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(lap: f64, coarse: f64, final_: f64, w: &LossWeights) -> Self {
        Self {
            lap,
            coarse,
            final_,
            total: w.w1 * lap + w.w2 * coarse + w.w3 * final_,
        }
    }
}

fn check_same(what: &str, a: (usize, usize, usize), b: (usize, usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::arg(format!("{what}: prediction {a:?} and target {b:?} differ in shape")));
    }
    Ok(())
}

/// Mean squared residual summed over channels: `(1/N) Σ_p Σ_c (x − y)²`.
fn pixel_l2(pred: &[f32], target: &[f32], pixels: usize) -> (f64, Vec<f32>) {
    let n = pixels as f64;
    let mut sum = 0.0f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            sum += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    (sum / n, grad)
}

pub fn loss_lap(pred: &GradientMap, gt: &GradientMap) -> Result<f64> {
    loss_lap_with_grad(pred, gt).map(|(v, _)| v)
}

pub fn loss_lap_with_grad(pred: &GradientMap, gt: &GradientMap) -> Result<(f64, Vec<f32>)> {
    check_same("gradient loss", (1, pred.height(), pred.width()), (1, gt.height(), gt.width()))?;
    Ok(pixel_l2(pred.data(), gt.data(), pred.height() * pred.width()))
}

pub fn loss_coarse(pred: &Image, gt: &Image) -> Result<f64> {
    loss_coarse_with_grad(pred, gt).map(|(v, _)| v)
}

pub fn loss_coarse_with_grad(pred: &Image, gt: &Image) -> Result<(f64, Vec<f32>)> {
    check_same("coarse loss", dims(pred), dims(gt))?;
    Ok(pixel_l2(pred.data(), gt.data(), pred.pixel_count()))
}

fn dims(img: &Image) -> (usize, usize, usize) {
    (img.channels(), img.height(), img.width())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable "valid" Gaussian filtering: output is `(h − 10) × (w − 10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|j| g[j] * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for i in 0..SSIM_WINDOW {
                rows[(y + i) * ow + x] += g[i] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for j in 0..SSIM_WINDOW {
                out[y * w + x + j] += g[j] * v;
            }
        }
    }
    out
}

fn check_ssim_input(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<()> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::arg(format!("SSIM inputs must both be {h}x{w}")));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Mean local SSIM of two single-channel maps (11×11 Gaussian window,
/// σ = 1.5, dynamic range 1, windows fully inside the image).
pub fn ssim_channel(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    ssim_channel_impl(a, b, h, w, false).map(|(v, _)| v)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_channel_with_grad(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<(f64, Vec<f64>)> {
    ssim_channel_impl(a, b, h, w, true).map(|(v, g)| (v, g.expect("requested")))
}

fn ssim_channel_impl(a: &[f32], b: &[f32], h: usize, w: usize, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_ssim_input(a, b, h, w)?;
    let g = gaussian_window();
    let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&a64, h, w, &g);
    let mu_b = filter_valid(&b64, h, w, &g);
    let e_aa = filter_valid(&sq(&a64, &a64), h, w, &g);
    let e_bb = filter_valid(&sq(&b64, &b64), h, w, &g);
    let e_ab = filter_valid(&sq(&a64, &b64), h, w, &g);

    let m = mu_a.len();
    let inv_m = 1.0 / m as f64;
    let mut total = 0.0;
    let (mut d_mu, mut d_aa, mut d_ab) = if want_grad {
        (vec![0.0; m], vec![0.0; m], vec![0.0; m])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for k in 0..m {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let var_a = e_aa[k] - ma * ma;
        let var_b = e_bb[k] - mb * mb;
        let cov = e_ab[k] - ma * mb;
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = var_a + var_b + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let denom = b1 * b2;
            d_mu[k] = inv_m
                * (2.0 * mb * a2 / denom - 2.0 * mb * a1 / denom - 2.0 * ma * s / b1 + 2.0 * ma * s / b2);
            d_aa[k] = -inv_m * s / b2;
            d_ab[k] = inv_m * 2.0 * a1 / denom;
        }
    }
    let value = total * inv_m;
    if !want_grad {
        return Ok((value, None));
    }
    let g_mu = filter_valid_adjoint(&d_mu, h, w, &g);
    let g_aa = filter_valid_adjoint(&d_aa, h, w, &g);
    let g_ab = filter_valid_adjoint(&d_ab, h, w, &g);
    let grad = (0..h * w)
        .map(|p| g_mu[p] + 2.0 * a64[p] * g_aa[p] + b64[p] * g_ab[p])
        .collect();
    Ok((value, Some(grad)))
}

/// Mean over channels of [`ssim_channel`].
pub fn ssim_mean(a: &Image, b: &Image) -> Result<f64> {
    check_same("SSIM", dims(a), dims(b))?;
    let (h, w) = (a.height(), a.width());
    let mut sum = 0.0;
    for c in 0..a.channels() {
        sum += ssim_channel(a.plane(c), b.plane(c), h, w)?;
    }
    Ok(sum / a.channels() as f64)
}

pub fn loss_final(pred: &Image, gt: &Image) -> Result<f64> {
    loss_final_with_grad(pred, gt, FinalLossForm::Mean).map(|(v, _)| v)
}

pub fn loss_final_with_grad(pred: &Image, gt: &Image, form: FinalLossForm) -> Result<(f64, Vec<f32>)> {
    check_same("final loss", dims(pred), dims(gt))?;
    let (h, w) = (pred.height(), pred.width());
    let scale = match form {
        FinalLossForm::Mean => 1.0 / pred.channels() as f64,
        FinalLossForm::LiteralSum => 1.0,
    };
    let mut ssim_sum = 0.0;
    let mut grad = Vec::with_capacity(pred.data().len());
    for c in 0..pred.channels() {
        let (s, g) = ssim_channel_with_grad(pred.plane(c), gt.plane(c), h, w)?;
        ssim_sum += s;
        grad.extend(g.into_iter().map(|v| (-scale * v) as f32));
    }
    Ok((1.0 - scale * ssim_sum, grad))
}

/// Gradients of the weighted total with respect to each network output.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub final_image: Vec<f32>,
    pub coarse: Option<Vec<f32>>,
    pub grad_pred: Option<Vec<f32>>,
}

fn scaled(mut g: Vec<f32>, w: f64) -> Vec<f32> {
    g.iter_mut().for_each(|v| *v = (*v as f64 * w) as f32);
    g
}

/// Weighted joint loss and its gradients. A branch output may only be
/// missing when its weight is zero.
pub fn loss_total_with_grads(
    out: &ForwardOutput,
    sample: &PairedSample,
    w: &LossWeights,
    form: FinalLossForm,
) -> Result<(LossBreakdown, OutputGrads)> {
    w.validate()?;
    let mut grads = OutputGrads::default();
    let lap = match (&out.grad_pred, w.w1 > 0.0) {
        (Some(pred), _) => {
            let (v, g) = loss_lap_with_grad(pred, &sample.grad_gt)?;
            grads.grad_pred = (w.w1 > 0.0).then(|| scaled(g, w.w1));
            v
        }
        (None, false) => 0.0,
        (None, true) => return Err(Error::arg("gradient loss weight is nonzero but the GEM branch is disabled")),
    };
    let coarse = match (&out.coarse, w.w2 > 0.0) {
        (Some(pred), _) => {
            let (v, g) = loss_coarse_with_grad(pred, &sample.normal)?;
            grads.coarse = (w.w2 > 0.0).then(|| scaled(g, w.w2));
            v
        }
        (None, false) => 0.0,
        (None, true) => return Err(Error::arg("coarse loss weight is nonzero but the CEM branch is disabled")),
    };
    let (final_, g) = loss_final_with_grad(&out.final_image, &sample.normal, form)?;
    grads.final_image = scaled(g, w.w3);
    Ok((LossBreakdown::combine(lap, coarse, final_, w), grads))
}

pub fn loss_total(out: &ForwardOutput, sample: &PairedSample, w: &LossWeights) -> Result<LossBreakdown> {
    loss_total_with_grads(out, sample, w, FinalLossForm::Mean).map(|(b, _)| b)
}
