//! Whole-image and tiled inference.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{load_image, save_image, GradientMap, Image};
use crate::log_ops::extract_gradient;
use crate::model::Model;

/// Overlap between neighbouring tiles, in pixels.
pub const TILE_OVERLAP: usize = 32;

/// Environment variable overriding the inference memory budget in bytes.
pub const BUDGET_ENV: &str = "DDNET_MAX_INFER_BYTES";
const DEFAULT_BUDGET: usize = 3 << 30;

pub fn inference_budget() -> usize {
    std::env::var(BUDGET_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_BUDGET)
}

fn padding(n: usize, d: usize) -> (usize, usize) {
    let total = n.div_ceil(d) * d - n;
    (total / 2, total - total / 2)
}

/// Reflect-pads to the size divisor, runs the network and crops back.
fn run_padded(model: &Model, low: &Image, grad: &GradientMap, check_budget: bool) -> Result<Image> {
    let d = model.config().size_divisor();
    let (h, w) = (low.height(), low.width());
    let (top, bottom) = padding(h, d);
    let (left, right) = padding(w, d);
    let (ph, pw) = (h + top + bottom, w + left + right);
    if check_budget {
        let need = model.inference_bytes(ph, pw);
        let budget = inference_budget();
        if need > budget {
            return Err(Error::Resource(format!(
                "a {w}x{h} image needs about {} MiB, over the {} MiB budget; retry with --tile 512",
                need >> 20,
                budget >> 20
            )));
        }
    }
    let out = model.forward(
        &low.pad_reflect(top, bottom, left, right),
        &grad.pad_reflect(top, bottom, left, right),
    )?;
    out.final_image.crop(top, left, h, w)
}

/// Tile origins along one axis: stride `tile - overlap`, last tile flush
/// with the far edge.
fn tile_starts(n: usize, tile: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let stride = tile - TILE_OVERLAP;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < n).collect();
    starts.push(n - tile);
    starts
}

/// Blend weight ramping linearly over the overlap at each tile edge.
fn feather(len: usize) -> Vec<f32> {
    let ramp = (TILE_OVERLAP + 1) as f32;
    (0..len)
        .map(|i| {
            let edge = i.min(len - 1 - i) + 1;
            (edge as f32 / ramp).min(1.0)
        })
        .collect()
}

/// Enhances a low-light image of any size. With `tile`, the image is
/// processed in overlapping tiles of that edge length and blended; the
/// gradient map is always computed on the full image.
pub fn enhance_image(model: &Model, low: &Image, tile: Option<usize>) -> Result<Image> {
    let low = low.to_rgb();
    let grad = extract_gradient(&low);
    let Some(tile) = tile else {
        return run_padded(model, &low, &grad, true);
    };
    if tile <= 2 * TILE_OVERLAP {
        return Err(Error::arg(format!("tile size must exceed {}", 2 * TILE_OVERLAP)));
    }
    let (h, w) = (low.height(), low.width());
    let mut acc = vec![0.0f32; 3 * h * w];
    let mut weight = vec![0.0f32; h * w];
    for &y0 in &tile_starts(h, tile) {
        for &x0 in &tile_starts(w, tile) {
            let (th, tw) = (tile.min(h), tile.min(w));
            let out = run_padded(model, &low.crop(y0, x0, th, tw)?, &grad.crop(y0, x0, th, tw)?, true)?;
            let (fy, fx) = (feather(th), feather(tw));
            for y in 0..th {
                for x in 0..tw {
                    let wgt = fy[y] * fx[x];
                    let i = (y0 + y) * w + x0 + x;
                    weight[i] += wgt;
                    for c in 0..3 {
                        acc[c * h * w + i] += wgt * out.get(c, y, x);
                    }
                }
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        *v /= weight[i % (h * w)];
    }
    Image::from_clamped(h, w, 3, acc)
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Input files for `input`: the file itself, or the images in a directory
/// (sorted, non-recursive).
pub fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::arg(format!("{} contains no png/jpg images", input.display())));
    }
    Ok(files)
}

/// Enhances a file or a directory of files into `<output>/<stem>.png`. A
/// single input may instead name an explicit `.png`/`.jpg` output file.
pub fn enhance_path(model: &Model, input: &Path, output: &Path, tile: Option<usize>) -> Result<Vec<PathBuf>> {
    let files = collect_inputs(input)?;
    let mut written = Vec::with_capacity(files.len());
    for file in &files {
        let dest = if !input.is_dir() && is_image_file(output) {
            output.to_path_buf()
        } else {
            let stem = file.file_stem().unwrap_or_default();
            output.join(stem).with_extension("png")
        };
        let enhanced = enhance_image(model, &load_image(file)?, tile)?;
        save_image(&enhanced, &dest)?;
        written.push(dest);
    }
    Ok(written)
}

/// Writes the display form of an image's gradient map.
pub fn gradmap_path(input: &Path, output: &Path) -> Result<()> {
    let grad = extract_gradient(&load_image(input)?);
    save_image(&grad.to_display(), output)
}
