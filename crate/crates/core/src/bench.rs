//! Inference timing over a fixed set of resolutions.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhance::enhance_image;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Model;

/// Width × height rows of the running-time table.
pub const DEFAULT_RESOLUTIONS: [(usize, usize); 4] = [(800, 600), (1080, 720), (2560, 1440), (3840, 2160)];

/// Published per-image seconds for the default rows, shown for reference.
pub const PUBLISHED_SECONDS: [f64; 4] = [0.021, 0.021, 0.023, 0.027];

/// Environment variable selecting the compute device.
pub const DEVICE_ENV: &str = "DDNET_DEVICE";

/// Resolves the compute device. Only the CPU backend exists.
pub fn resolve_device() -> Result<String> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok("cpu".into()),
        Ok(v) if v.trim().is_empty() || v.trim().eq_ignore_ascii_case("cpu") => Ok("cpu".into()),
        Ok(v) => Err(Error::Device(format!("device `{v}` is not available; this build supports only `cpu`"))),
    }
}

/// Parses `WxH`.
pub fn parse_resolution(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::arg(format!("resolution `{text}` is not WxH"));
    let (w, h) = text.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.parse().map_err(|_| bad())?;
    let h: usize = h.parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    pub resolutions: Vec<(usize, usize)>,
    pub warmup: usize,
    pub repeats: usize,
    pub tile: Option<usize>,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            resolutions: DEFAULT_RESOLUTIONS.to_vec(),
            warmup: 1,
            repeats: 3,
            tile: None,
            seed: 0,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::arg("no resolutions to benchmark"));
        }
        if self.warmup < 1 {
            return Err(Error::arg("warmup must be at least 1"));
        }
        if self.repeats < 3 {
            return Err(Error::arg("repeats must be at least 3"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub width: usize,
    pub height: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub fps: f64,
    pub repeats: usize,
    pub warmup: usize,
    /// Published time for this resolution, when it is a default row.
    pub published_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub device: String,
    pub model: String,
    /// Checkpoint the model was loaded from, when known.
    pub checkpoint: Option<String>,
    pub tile: Option<usize>,
    pub rows: Vec<BenchRow>,
}

fn noise_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * width * height).map(|_| rng.gen::<f32>() * 0.3).collect();
    Image::new(height, width, 3, data).expect("sized buffer")
}

/// Times whole-image enhancement (gradient extraction included) on seeded
/// noise inputs, one row per resolution.
pub fn run_benchmark(model: &Model, opts: &BenchOptions) -> Result<BenchmarkReport> {
    opts.validate()?;
    let device = resolve_device()?;
    let mut rows = Vec::with_capacity(opts.resolutions.len());
    for &(width, height) in &opts.resolutions {
        let input = noise_image(width, height, opts.seed);
        for _ in 0..opts.warmup {
            enhance_image(model, &input, opts.tile)?;
        }
        let mut times = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let start = Instant::now();
            let out = enhance_image(model, &input, opts.tile)?;
            times.push(start.elapsed().as_secs_f64());
            drop(out);
        }
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
        let published = DEFAULT_RESOLUTIONS
            .iter()
            .position(|&r| r == (width, height))
            .map(|i| PUBLISHED_SECONDS[i]);
        rows.push(BenchRow {
            label: format!("{width}x{height}"),
            width,
            height,
            mean_seconds: mean,
            std_seconds: std,
            fps: 1.0 / mean,
            repeats: opts.repeats,
            warmup: opts.warmup,
            published_seconds: published,
        });
    }
    let c = model.config();
    Ok(BenchmarkReport {
        device,
        model: format!("base_channels={} num_scales={} seed={}", c.base_channels, c.num_scales, model.seed()),
        checkpoint: None,
        tile: opts.tile,
        rows,
    })
}

impl BenchmarkReport {
    /// Plain-text table. Published times are an annotation column only.
    pub fn to_table(&self) -> String {
        let mut out = format!("device: {}  model: {}", self.device, self.model);
        if let Some(c) = &self.checkpoint {
            out.push_str(&format!("  checkpoint: {c}"));
        }
        if let Some(t) = self.tile {
            out.push_str(&format!("  tile: {t}"));
        }
        out.push('\n');
        out.push_str(&format!(
            "{:<11} {:>10} {:>10} {:>9}   {}\n",
            "resolution", "mean (s)", "std (s)", "fps", "published DDNet (s, reference only)"
        ));
        for r in &self.rows {
            let published = r.published_seconds.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<11} {:>10.4} {:>10.4} {:>9.2}   {}\n",
                r.label, r.mean_seconds, r.std_seconds, r.fps, published
            ));
        }
        out
    }
}
