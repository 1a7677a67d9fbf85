//! Laplacian-of-Gaussian kernels and the gradient-map extractor that guides
//! the network.

use crate::error::{Error, Result};
use crate::image::{to_luma, GradientMap, Image};

/// Square odd-sized correlation kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::arg(format!("kernel size must be odd, got {size}")));
        }
        if taps.len() != size * size {
            return Err(Error::arg(format!("{size}x{size} kernel needs {} taps", size * size)));
        }
        Ok(Self { size, taps })
    }

    fn from_rows<const N: usize>(rows: [[f64; N]; N]) -> Self {
        Self {
            size: N,
            taps: rows.iter().flatten().copied().collect(),
        }
    }

    /// Single 1 at the center.
    pub fn identity(size: usize) -> Result<Self> {
        let mut taps = vec![0.0; size * size];
        taps[size * size / 2] = 1.0;
        Self::new(size, taps)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn tap(&self, row: usize, col: usize) -> f64 {
        self.taps[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Sum of the positive taps: the largest response on inputs in `[0, 1]`.
    pub fn positive_mass(&self) -> f64 {
        self.taps.iter().filter(|t| **t > 0.0).sum()
    }

    /// Full 2-D convolution of two kernels (the composite kernel of applying
    /// both in sequence away from borders).
    pub fn compose(&self, other: &Kernel) -> Kernel {
        let size = self.size + other.size - 1;
        let mut taps = vec![0.0; size * size];
        for i in 0..self.size {
            for j in 0..self.size {
                for k in 0..other.size {
                    for l in 0..other.size {
                        taps[(i + k) * size + j + l] += self.tap(i, j) * other.tap(k, l);
                    }
                }
            }
        }
        Kernel { size, taps }
    }
}

/// Discrete second-derivative kernel `[[0,1,0],[1,-4,1],[0,1,0]]`.
pub fn laplacian_kernel() -> Kernel {
    Kernel::from_rows([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
}

/// The fixed 5×5 integer LoG kernel used in production.
pub fn log_kernel() -> Kernel {
    Kernel::from_rows([
        [0.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 1.0, 2.0, 1.0, 0.0],
        [1.0, 2.0, -16.0, 2.0, 1.0],
        [0.0, 1.0, 2.0, 1.0, 0.0],
        [0.0, 0.0, 1.0, 0.0, 0.0],
    ])
}

fn check_sampling(sigma: f64, size: usize) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::arg(format!("sigma must be positive, got {sigma}")));
    }
    if size % 2 == 0 {
        return Err(Error::arg(format!("kernel size must be odd, got {size}")));
    }
    Ok(())
}

fn sample_radial(size: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut taps = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (u, v) = (i as f64 - c, j as f64 - c);
            taps.push(f(u * u + v * v));
        }
    }
    taps
}

/// Sampled 2-D Gaussian, renormalized to unit sum.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Kernel> {
    check_sampling(sigma, size)?;
    let two_s2 = 2.0 * sigma * sigma;
    let mut taps = sample_radial(size, |r2| (-r2 / two_s2).exp() / (std::f64::consts::PI * two_s2));
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Kernel::new(size, taps)
}

/// Sampled continuous LoG, mean-subtracted to zero sum. Validation only;
/// [`log_kernel`] is the production kernel.
pub fn log_kernel_analytic(sigma: f64, size: usize) -> Result<Kernel> {
    check_sampling(sigma, size)?;
    let s2 = sigma * sigma;
    let scale = -1.0 / (std::f64::consts::PI * s2 * s2);
    let mut taps = sample_radial(size, |r2| {
        let q = r2 / (2.0 * s2);
        scale * (1.0 - q) * (-q).exp()
    });
    let mean = taps.iter().sum::<f64>() / taps.len() as f64;
    taps.iter_mut().for_each(|t| *t -= mean);
    Kernel::new(size, taps)
}

/// Same-size correlation (no kernel flip) with replicate border padding.
pub fn convolve2d(map: &[f32], height: usize, width: usize, kernel: &Kernel) -> Vec<f32> {
    assert_eq!(map.len(), height * width, "map shape mismatch");
    let r = kernel.radius() as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0f64;
            for dy in -r..=r {
                let row = clamp(y as isize + dy, height) * width;
                let krow = ((dy + r) as usize) * kernel.size;
                for dx in -r..=r {
                    let t = kernel.taps[krow + (dx + r) as usize];
                    if t != 0.0 {
                        acc += t * map[row + clamp(x as isize + dx, width)] as f64;
                    }
                }
            }
            out[y * width + x] = acc as f32;
        }
    }
    out
}

/// LoG gradient map of the image's luma.
pub fn extract_gradient(img: &Image) -> GradientMap {
    let luma = to_luma(img);
    let data = convolve2d(luma.data(), img.height(), img.width(), &log_kernel());
    GradientMap::new(img.height(), img.width(), data).expect("shape preserved")
}
