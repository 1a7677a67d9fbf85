//! Full-reference quality metrics and mean ± std aggregation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::csv_error;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::ssim_mean;

/// Reported for bit-identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// PSNR in dB for dynamic range 1.0, over all pixels and channels.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::arg("PSNR inputs differ in shape"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// SSIM averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_mean(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population mean and standard deviation; rows are ordered by id.
pub fn aggregate(mut rows: Vec<MetricRow>) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::arg("cannot aggregate an empty metric set"));
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let (psnr_mean, psnr_std) = mean_std(rows.iter().map(|r| r.psnr));
    let (ssim_mean, ssim_std) = mean_std(rows.iter().map(|r| r.ssim));
    Ok(MetricReport {
        per_image: rows,
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
    })
}

impl MetricReport {
    /// `21.86±4.36`-style summary.
    pub fn summary(&self) -> String {
        format!(
            "PSNR {:.2}±{:.2} dB  SSIM {:.3}±{:.3}  ({} images)",
            self.psnr_mean,
            self.psnr_std,
            self.ssim_mean,
            self.ssim_std,
            self.per_image.len()
        )
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for row in &self.per_image {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Summary statistics without the per-image rows.
    pub fn write_summary_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let summary = serde_json::json!({
            "images": self.per_image.len(),
            "psnr_mean": self.psnr_mean,
            "psnr_std": self.psnr_std,
            "ssim_mean": self.ssim_mean,
            "ssim_std": self.ssim_std,
        });
        let text = serde_json::to_string_pretty(&summary).expect("plain JSON value");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(id: &str, psnr: f64) -> MetricRow {
        MetricRow {
            id: id.into(),
            psnr,
            ssim: 0.5,
        }
    }

    #[test]
    fn psnr_examples() {
        let zero = Image::constant(4, 4, 3, 0.0).unwrap();
        let half = Image::constant(4, 4, 3, 0.5).unwrap();
        assert_eq!(psnr(&zero, &zero).unwrap(), 99.0);
        assert!((psnr(&zero, &half).unwrap() - 6.0206).abs() < 1e-4);
        let tenth = Image::constant(4, 4, 3, 0.1).unwrap();
        assert!((psnr(&zero, &tenth).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&zero, &Image::constant(4, 4, 1, 0.0).unwrap()).is_err());
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Image::from_fn(16, 16, 3, |_, _, _| rng.gen()).unwrap();
        let b = Image::from_fn(16, 16, 3, |_, _, _| rng.gen()).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let by_channel: f64 = (0..3)
            .map(|c| crate::losses::ssim_channel(a.plane(c), b.plane(c), 16, 16).unwrap())
            .sum::<f64>()
            / 3.0;
        assert_eq!(ssim(&a, &b).unwrap(), by_channel);
        assert!(ssim(&Image::constant(10, 20, 3, 0.1).unwrap(), &Image::constant(10, 20, 3, 0.1).unwrap()).is_err());
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let base = Image::from_fn(24, 24, 3, |c, y, x| ((x + 2 * y + c) % 9) as f32 / 10.0 + 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise: Vec<f32> = (0..base.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.005f32, 0.01, 0.02, 0.04] {
            let data = base.data().iter().zip(&noise).map(|(v, n)| v + amp * n).collect();
            let noisy = Image::from_clamped(24, 24, 3, data).unwrap();
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            assert_eq!(p, psnr(&noisy, &base).unwrap());
            last = p;
        }
    }

    #[test]
    fn aggregate_examples() {
        let single = aggregate(vec![row("a", 12.0)]).unwrap();
        assert_eq!(single.psnr_std, 0.0);
        let two = aggregate(vec![row("b", 20.0), row("a", 10.0)]).unwrap();
        assert_eq!((two.psnr_mean, two.psnr_std), (15.0, 5.0));
        assert_eq!(two.per_image[0].id, "a");
        assert!(aggregate(vec![]).is_err());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let report = aggregate(vec![row("x,1", 10.0), row("y", 30.0)]).unwrap();
        report.write_csv(dir.path().join("m.csv")).unwrap();
        report.write_summary_json(dir.path().join("m.json")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert!(csv.starts_with("id,psnr,ssim\n\"x,1\",10.0,0.5"));
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(json["psnr_mean"], 20.0);
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant_and_recomputable(values in proptest::collection::vec(0.0f64..60.0, 1..20), rot in 0usize..20) {
            let rows: Vec<_> = values.iter().enumerate().map(|(i, &v)| row(&format!("{i:03}"), v)).collect();
            let mut rotated = rows.clone();
            let k = rot % rows.len();
            rotated.rotate_left(k);
            let a = aggregate(rows).unwrap();
            let b = aggregate(rotated).unwrap();
            prop_assert_eq!(&a, &b);
            let again = aggregate(a.per_image.clone()).unwrap();
            prop_assert!((again.psnr_mean - a.psnr_mean).abs() < 1e-12);
            prop_assert!((again.psnr_std - a.psnr_std).abs() < 1e-12);
            prop_assert!(a.psnr_std >= 0.0);
        }
    }
}
