//! Full-reference evaluation: PSNR, SSIM, per-pixel error maps, and
//! dataset-level reports.

use crate::cem::CrfParams;
use crate::error::{Error, Result};
use crate::iem;
use crate::imageio::{self, Checkpoint, Dataset, ImageU8};
use crate::optim::TrainMode;
use crate::tensor::Tensor;
use std::path::Path;

/// Finite PSNR values above this are reported as-is but capped in aggregates,
/// and the infinite sentinel (identical images) enters aggregates at the cap.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB over clamped values; `None` is the
/// infinite sentinel for exactly matching images.
pub fn psnr(y: &Tensor, reference: &Tensor) -> Result<Option<f64>> {
    if y.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "psnr needs matching shapes, got {:?} and {:?}",
            y.shape(),
            reference.shape()
        )));
    }
    let mut mse = 0.0f64;
    for (a, b) in y.data().iter().zip(reference.data()) {
        let d = a.clamp(0.0, 1.0) as f64 - b.clamp(0.0, 1.0) as f64;
        mse += d * d;
    }
    mse /= y.numel() as f64;
    if mse == 0.0 {
        return Ok(None);
    }
    Ok(Some(-10.0 * mse.log10()))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Separable valid-mode Gaussian filtering of an H×W plane.
fn gauss_filter(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = gaussian_window();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0f64; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * plane[y * w + x + k];
            }
            horiz[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0f64; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * horiz[(y + k) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1; per-channel values averaged.
pub fn ssim(y: &Tensor, reference: &Tensor) -> Result<f64> {
    if y.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "ssim needs matching shapes, got {:?} and {:?}",
            y.shape(),
            reference.shape()
        )));
    }
    let (c, h, w) = y.chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let mut total = 0.0f64;
    for ch in 0..c {
        let a: Vec<f64> = y.channel(ch).iter().map(|v| v.clamp(0.0, 1.0) as f64).collect();
        let b: Vec<f64> = reference.channel(ch).iter().map(|v| v.clamp(0.0, 1.0) as f64).collect();
        let a2: Vec<f64> = a.iter().map(|v| v * v).collect();
        let b2: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let mu_a = gauss_filter(&a, h, w);
        let mu_b = gauss_filter(&b, h, w);
        let e_a2 = gauss_filter(&a2, h, w);
        let e_b2 = gauss_filter(&b2, h, w);
        let e_ab = gauss_filter(&ab, h, w);
        let mut acc = 0.0f64;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_a2[i] - ma * ma;
            let vb = e_b2[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Grayscale map of channel-mean absolute error, scaled so `max_err` → white.
pub fn error_map(y: &Tensor, reference: &Tensor, max_err: f32) -> Result<ImageU8> {
    if y.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "error map needs matching shapes, got {:?} and {:?}",
            y.shape(),
            reference.shape()
        )));
    }
    let (c, h, w) = y.chw()?;
    let n = h * w;
    let mut pixels = vec![0u8; 3 * n];
    for i in 0..n {
        let mut err = 0.0f32;
        for ch in 0..c {
            err += (y.data()[ch * n + i] - reference.data()[ch * n + i]).abs();
        }
        err /= c as f32;
        let byte = ((err / max_err).clamp(0.0, 1.0) * 255.0).round() as u8;
        pixels[3 * i] = byte;
        pixels[3 * i + 1] = byte;
        pixels[3 * i + 2] = byte;
    }
    ImageU8::new(w, h, pixels)
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: Option<f64>,
    pub ssim: f64,
}

/// Per-image metrics plus capped aggregate means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    /// Assemble a report; infinite PSNR enters the mean at the 100 dB cap.
    pub fn from_rows(method: String, dataset: String, rows: Vec<EvalRow>) -> EvalReport {
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows
            .iter()
            .map(|r| r.psnr.unwrap_or(PSNR_CAP_DB).min(PSNR_CAP_DB))
            .sum::<f64>()
            / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        EvalReport { method, dataset, rows, mean_psnr, mean_ssim }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim\n");
        for r in &self.rows {
            let p = match r.psnr {
                Some(v) => format!("{v:.6}"),
                None => "inf".into(),
            };
            out.push_str(&format!("{},{p},{:.6}\n", r.name, r.ssim));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method,
            "dataset": self.dataset,
            "metric_conventions": {
                "psnr": "clamped unquantized values, MSE over all pixels and channels, inf capped at 100 dB in aggregates",
                "ssim": "per-channel RGB mean, 11x11 Gaussian window sigma 1.5, K1 0.01, K2 0.03, dynamic range 1",
            },
            "per_image": self.rows.iter().map(|r| serde_json::json!({
                "name": r.name,
                "psnr_db": r.psnr,
                "ssim": r.ssim,
            })).collect::<Vec<_>>(),
            "aggregate": {
                "mean_psnr_db": self.mean_psnr,
                "mean_ssim": self.mean_ssim,
                "images": self.rows.len(),
            },
        })
    }
}

/// Enhance one image with a trained model: infer the illumination, then apply
/// the configured camera response (or the plain baseline for iem_only).
/// Returns (enhanced image clamped to [0, 1], illumination map).
pub fn enhance(ckpt: &Checkpoint, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let t = iem::infer_illumination(x, &ckpt.enh)?;
    let y = match ckpt.mode() {
        TrainMode::IemOnly => crate::cem::apply_baseline(x, &t)?,
        _ => {
            let theta = CrfParams {
                a: ckpt.theta_a,
                b: ckpt.theta_b,
                variant: ckpt.variant(),
                trainable: false,
            };
            crate::cem::apply(x, &t, &theta)?
        }
    };
    Ok((y.map(|v| v.clamp(0.0, 1.0)), t))
}

/// Evaluate a checkpoint over a test split with references, optionally
/// writing `<stem>_err.png` error maps.
pub fn eval_dataset(
    ckpt: &Checkpoint,
    ds: &Dataset,
    error_map_dir: Option<&Path>,
) -> Result<EvalReport> {
    if ds.entries.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let mut rows = Vec::with_capacity(ds.entries.len());
    for entry in &ds.entries {
        let reference_path = entry.reference.as_ref().ok_or_else(|| {
            Error::Data(format!(
                "image {} has no reference; full-reference evaluation needs test/high",
                entry.stem
            ))
        })?;
        let x = imageio::to_tensor(&imageio::load_image(&entry.low)?);
        let reference = imageio::to_tensor(&imageio::load_image(reference_path)?);
        let (y, _) = enhance(ckpt, &x)?;
        let row = EvalRow {
            name: entry.stem.clone(),
            psnr: psnr(&y, &reference)?,
            ssim: ssim(&y, &reference)?,
        };
        if let Some(dir) = error_map_dir {
            let map = error_map(&y, &reference, 0.5)?;
            imageio::save_image_u8(&map, &dir.join(format!("{}_err.png", entry.stem)))?;
        }
        rows.push(row);
    }
    let method = format!("{}+{}", ckpt.mode().name(), ckpt.variant().name());
    let dataset = ds.root.display().to_string();
    Ok(EvalReport::from_rows(method, dataset, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossConfig;
    use crate::optim::TrainConfig;
    use crate::rng;
    use crate::tensor::Tensor;
    use rand::Rng;
    use std::fs;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = rng::stream(seed, "metrics-test");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = rand_tensor(vec![3, 8, 8], 1);
        assert_eq!(psnr(&a, &a).unwrap(), None);
        let y = Tensor::full(vec![3, 4, 4], 0.3);
        let r = Tensor::full(vec![3, 4, 4], 0.2);
        let v = psnr(&y, &r).unwrap().unwrap();
        assert!((v - 20.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn psnr_matches_oracle_and_is_symmetric() {
        let y = rand_tensor(vec![3, 7, 9], 2);
        let r = rand_tensor(vec![3, 7, 9], 3);
        let mut mse = 0.0f64;
        for (a, b) in y.data().iter().zip(r.data()) {
            mse += (*a as f64 - *b as f64).powi(2);
        }
        mse /= y.numel() as f64;
        let want = 10.0 * (1.0 / mse).log10();
        let got = psnr(&y, &r).unwrap().unwrap();
        assert!((got - want).abs() < 1e-6);
        assert_eq!(psnr(&y, &r).unwrap(), psnr(&r, &y).unwrap());
        assert!(psnr(&y, &rand_tensor(vec![3, 9, 7], 4)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = rand_tensor(vec![3, 8, 8], 5);
        let noise = rand_tensor(vec![3, 8, 8], 6);
        let mut last = f64::INFINITY;
        for amp in [0.02f32, 0.05, 0.1, 0.2, 0.4] {
            let noisy = Tensor::new(
                base.shape().to_vec(),
                base.data()
                    .iter()
                    .zip(noise.data())
                    .map(|(b, n)| (b + amp * (n - 0.5)).clamp(0.0, 1.0))
                    .collect(),
            )
            .unwrap();
            let v = psnr(&noisy, &base).unwrap().unwrap();
            assert!(v < last, "amp {amp}: {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = rand_tensor(vec![3, 16, 16], 7);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images_and_mismatch() {
        let a = rand_tensor(vec![3, 10, 16], 8);
        assert!(matches!(ssim(&a, &a), Err(Error::Shape(_))));
        let b = rand_tensor(vec![3, 16, 16], 9);
        let c = rand_tensor(vec![3, 16, 17], 10);
        assert!(ssim(&b, &c).is_err());
    }

    #[test]
    fn ssim_anticorrelation_sanity() {
        // Structured fixture: smooth diagonal ramp with a bump.
        let mut data = vec![0.0f32; 3 * 16 * 16];
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let v = (y + x) as f32 / 30.0 + if (y / 4 + x / 4) % 2 == 0 { 0.2 } else { 0.0 };
                    data[(c * 16 + y) * 16 + x] = v.min(1.0);
                }
            }
        }
        let r = Tensor::new(vec![3, 16, 16], data).unwrap();
        let y = r.map(|v| 1.0 - v);
        let s = ssim(&y, &r).unwrap();
        assert!(s < 0.5, "{s}");
    }

    #[test]
    fn ssim_matches_straight_line_oracle() {
        let y = rand_tensor(vec![3, 16, 16], 11);
        let r = rand_tensor(vec![3, 16, 16], 12);

        // Direct 2D windowed implementation, no separability.
        let g1 = gaussian_window();
        let mut w2 = [[0.0f64; 11]; 11];
        for i in 0..11 {
            for j in 0..11 {
                w2[i][j] = g1[i] * g1[j];
            }
        }
        let mut total = 0.0f64;
        for c in 0..3 {
            let pa = y.channel(c);
            let pb = r.channel(c);
            let mut acc = 0.0f64;
            let mut count = 0usize;
            for oy in 0..6 {
                for ox in 0..6 {
                    let (mut ma, mut mb, mut ea2, mut eb2, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let a = pa[(oy + i) * 16 + ox + j] as f64;
                            let b = pb[(oy + i) * 16 + ox + j] as f64;
                            ma += w2[i][j] * a;
                            mb += w2[i][j] * b;
                            ea2 += w2[i][j] * a * a;
                            eb2 += w2[i][j] * b * b;
                            eab += w2[i][j] * a * b;
                        }
                    }
                    let (va, vb, cov) = (ea2 - ma * ma, eb2 - mb * mb, eab - ma * mb);
                    acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        let want = total / 3.0;
        let got = ssim(&y, &r).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        let swapped = ssim(&r, &y).unwrap();
        assert!((got - swapped).abs() < 1e-12);
    }

    #[test]
    fn error_map_examples_and_oracle() {
        let a = rand_tensor(vec![3, 5, 5], 13);
        let black = error_map(&a, &a, 0.5).unwrap();
        assert!(black.pixels.iter().all(|&b| b == 0));

        let y = Tensor::full(vec![3, 4, 4], 0.75);
        let r = Tensor::full(vec![3, 4, 4], 0.5);
        let mid = error_map(&y, &r, 0.5).unwrap();
        assert!(mid.pixels.iter().all(|&b| b == 128));

        let b = rand_tensor(vec![3, 5, 5], 14);
        let map = error_map(&a, &b, 0.5).unwrap();
        for i in 0..25 {
            let err = (0..3)
                .map(|c| (a.data()[c * 25 + i] - b.data()[c * 25 + i]).abs())
                .sum::<f32>()
                / 3.0;
            let want = ((err / 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
            assert_eq!(map.pixels[3 * i], want);
            assert_eq!(map.pixels[3 * i + 1], want);
        }
    }

    #[test]
    fn report_aggregates_and_serialization() {
        let rows = vec![
            EvalRow { name: "a".into(), psnr: Some(18.5), ssim: 0.8 },
            EvalRow { name: "b".into(), psnr: None, ssim: 0.9 },
            EvalRow { name: "c".into(), psnr: Some(120.0), ssim: 0.7 },
        ];
        let rep = EvalReport::from_rows("m".into(), "d".into(), rows);
        // Sentinel and 120 dB both enter the mean at the 100 dB cap.
        assert!((rep.mean_psnr - (18.5 + 100.0 + 100.0) / 3.0).abs() < 1e-9);
        assert!((rep.mean_ssim - 0.8).abs() < 1e-9);

        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "name,psnr_db,ssim");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("b,inf,"));

        let json = rep.to_json();
        assert_eq!(json["aggregate"]["images"], 3);
        assert!(json["per_image"][1]["psnr_db"].is_null());
        assert!((json["aggregate"]["mean_psnr_db"].as_f64().unwrap() - rep.mean_psnr).abs() < 1e-12);
    }

    fn identity_checkpoint() -> Checkpoint {
        let (_, selfcal) = crate::iem::init_weights(0);
        let enh = crate::iem::EnhNetWeights {
            blocks: (0..4)
                .map(|_| crate::iem::ConvLayer {
                    kernels: Tensor::zeros(vec![3, 3, 3, 3]),
                    bias: Tensor::zeros(vec![3]),
                })
                .collect(),
        };
        Checkpoint {
            train_cfg: TrainConfig {
                mode: TrainMode::IemOnly,
                variant: crate::cem::CrfVariant::None,
                theta_a: 0.0,
                theta_b: 0.0,
                ..Default::default()
            },
            loss_cfg: LossConfig::default(),
            theta_a: 0.0,
            theta_b: 0.0,
            enh,
            selfcal,
        }
    }

    fn write_pair(root: &Path, stem: &str, low: &Tensor, high: &Tensor) {
        fs::create_dir_all(root.join("test/low")).unwrap();
        fs::create_dir_all(root.join("test/high")).unwrap();
        imageio::save_image(low, &root.join(format!("test/low/{stem}.ppm"))).unwrap();
        imageio::save_image(high, &root.join(format!("test/high/{stem}.ppm"))).unwrap();
    }

    #[test]
    fn eval_produces_finite_rows_matching_direct_metric_calls() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = identity_checkpoint();
        let mut tensors = Vec::new();
        for (i, stem) in ["s1", "s2", "s3"].iter().enumerate() {
            let high = rand_tensor(vec![3, 16, 16], 20 + i as u64);
            let low = high.map(|v| 0.4 * v);
            write_pair(dir.path(), stem, &low, &high);
            tensors.push((low, high));
        }
        let ds = imageio::scan_dataset(dir.path(), imageio::Split::Test).unwrap();
        let maps = dir.path().join("maps");
        fs::create_dir_all(&maps).unwrap();
        let rep = eval_dataset(&ckpt, &ds, Some(&maps)).unwrap();
        assert_eq!(rep.rows.len(), 3);

        let mut mean_psnr = 0.0;
        let mut mean_ssim = 0.0;
        for (row, (low, high)) in rep.rows.iter().zip(&tensors) {
            // Quantization: metrics are computed on decoded 8-bit fixtures.
            let low8 = imageio::to_tensor(&imageio::from_tensor(low).unwrap());
            let high8 = imageio::to_tensor(&imageio::from_tensor(high).unwrap());
            let (y, _) = enhance(&ckpt, &low8).unwrap();
            assert_eq!(row.psnr, psnr(&y, &high8).unwrap());
            assert_eq!(row.ssim, ssim(&y, &high8).unwrap());
            assert!(row.ssim.is_finite());
            mean_psnr += row.psnr.unwrap().min(PSNR_CAP_DB) / 3.0;
            mean_ssim += row.ssim / 3.0;
        }
        assert!((rep.mean_psnr - mean_psnr).abs() < 1e-9);
        assert!((rep.mean_ssim - mean_ssim).abs() < 1e-9);
        for stem in ["s1", "s2", "s3"] {
            assert!(maps.join(format!("{stem}_err.png")).is_file());
        }

        // Determinism: a second evaluation reproduces the report exactly.
        let rep2 = eval_dataset(&ckpt, &ds, None).unwrap();
        assert_eq!(rep.rows, rep2.rows);
    }

    #[test]
    fn eval_on_clean_identity_setup_is_finite() {
        let dir = tempfile::tempdir().unwrap();
        let img = rand_tensor(vec![3, 16, 16], 30);
        write_pair(dir.path(), "clean", &img, &img);
        let ds = imageio::scan_dataset(dir.path(), imageio::Split::Test).unwrap();
        let rep = eval_dataset(&identity_checkpoint(), &ds, None).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert!(rep.rows[0].ssim.is_finite());
        assert!(rep.mean_psnr.is_finite());
    }

    #[test]
    fn eval_requires_references() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("test/low")).unwrap();
        imageio::save_image(&rand_tensor(vec![3, 16, 16], 31), &dir.path().join("test/low/a.ppm"))
            .unwrap();
        let ds = imageio::scan_dataset(dir.path(), imageio::Split::Test).unwrap();
        let err = eval_dataset(&identity_checkpoint(), &ds, None).unwrap_err();
        assert!(format!("{err}").contains("reference"));
    }
}
