//! Y-channel PSNR/SSIM, kernel errors, and the evaluation harnesses.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EvalSet;
use crate::error::{DanError, Result};
use crate::imaging::{bicubic_upscale, ImagePlane};
use crate::kernels::{dirac_kernel, BlurKernel, PcaBasis};
use crate::network::Dan;
use crate::param::ParamStore;

/// Reported PSNR of identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Color transform recorded in every report.
pub const Y_TRANSFORM: &str = "ITU-R BT.601 video range: Y = 16/255 + (65.481 R + 128.553 G + 24.966 B)/255";

fn shaved_y(a: &ImagePlane, b: &ImagePlane, shave: usize) -> Result<(ImagePlane, ImagePlane)> {
    if a.shape() != b.shape() {
        return Err(DanError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w, _) = a.shape();
    if 2 * shave >= h || 2 * shave >= w {
        return Err(DanError::Sizing(format!("shave {shave} leaves nothing of {h}×{w}")));
    }
    let crop = |im: &ImagePlane| im.to_y().crop(shave, shave, h - 2 * shave, w - 2 * shave);
    Ok((crop(a)?, crop(b)?))
}

/// Mean squared Y difference after shaving `shave` pixels off each border.
pub fn mse_y(a: &ImagePlane, b: &ImagePlane, shave: usize) -> Result<f64> {
    let (ya, yb) = shaved_y(a, b, shave)?;
    Ok(ya.data().iter().zip(yb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ya.data().len() as f64)
}

/// `10·log10(1/MSE)` on the Y channel, capped at [`PSNR_CAP`].
pub fn psnr_y(a: &ImagePlane, b: &ImagePlane, shave: usize) -> Result<f64> {
    let mse = mse_y(a, b, shave)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| win[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| win[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM on the Y channel (11×11 Gaussian window, σ 1.5).
pub fn ssim_y(a: &ImagePlane, b: &ImagePlane, shave: usize) -> Result<f64> {
    let (ya, yb) = shaved_y(a, b, shave)?;
    let (h, w) = (ya.height(), ya.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DanError::Sizing(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let win = gaussian_window();
    let (pa, pb) = (ya.data(), yb.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(pb).map(|(x, y)| f(*x, *y)).collect() };
    let mu_a = filter_valid(pa, h, w, &win);
    let mu_b = filter_valid(pb, h, w, &win);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &win);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &win);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &win);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Kernel errors in the complete and the reduced space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelErrorReport {
    /// Mean absolute difference of the kernel entries.
    pub l1_complete: f64,
    /// Mean absolute difference of the PCA coordinates.
    pub l1_reduced: f64,
}

pub fn kernel_error(pred: &BlurKernel, gt: &BlurKernel, basis: &PcaBasis) -> Result<KernelErrorReport> {
    if pred.size() != gt.size() {
        return Err(DanError::Shape(format!("kernel sizes {} vs {}", pred.size(), gt.size())));
    }
    let mean_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    let (rp, rg) = (basis.reduce(pred)?, basis.reduce(gt)?);
    Ok(KernelErrorReport {
        l1_complete: mean_abs(pred.data(), gt.data()),
        l1_reduced: mean_abs(rp.coords(), rg.coords()),
    })
}

/// Metrics of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub kernel: Option<KernelErrorReport>,
    /// Width of the GT kernel when it is isotropic-like (for grouping).
    pub gt_sigma: Option<f64>,
}

/// Per-image metrics with their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub shave: usize,
    pub color_transform: String,
    pub mean_psnr_y: f64,
    pub mean_ssim_y: f64,
    pub mean_kernel_l1_complete: Option<f64>,
    pub mean_kernel_l1_reduced: Option<f64>,
    pub images: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn new(method: impl Into<String>, shave: usize, images: Vec<ImageMetrics>) -> Self {
        let n = images.len().max(1) as f64;
        let kernel_mean = |f: fn(&KernelErrorReport) -> f64| -> Option<f64> {
            let ks: Vec<f64> = images.iter().filter_map(|m| m.kernel.as_ref().map(f)).collect();
            (!ks.is_empty() && ks.len() == images.len()).then(|| ks.iter().sum::<f64>() / n)
        };
        MetricReport {
            method: method.into(),
            shave,
            color_transform: Y_TRANSFORM.into(),
            mean_psnr_y: images.iter().map(|m| m.psnr_y).sum::<f64>() / n,
            mean_ssim_y: images.iter().map(|m| m.ssim_y).sum::<f64>() / n,
            mean_kernel_l1_complete: kernel_mean(|k| k.l1_complete),
            mean_kernel_l1_reduced: kernel_mean(|k| k.l1_reduced),
            images,
        }
    }

    /// Per-image CSV with a commented header recording the protocol.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# method={} shave={} y={}\n", self.method, self.shave, self.color_transform);
        s.push_str("image,psnr_y,ssim_y,kernel_l1_complete,kernel_l1_reduced,gt_sigma\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.8}"));
        for m in &self.images {
            s.push_str(&format!(
                "{},{:.6},{:.8},{},{},{}\n",
                m.name,
                m.psnr_y,
                m.ssim_y,
                opt(m.kernel.map(|k| k.l1_complete)),
                opt(m.kernel.map(|k| k.l1_reduced)),
                opt(m.gt_sigma)
            ));
        }
        s
    }

    /// Mean kernel errors grouped by GT width.
    pub fn kernel_error_by_sigma(&self) -> Vec<(f64, KernelErrorReport)> {
        let mut groups: Vec<(f64, Vec<KernelErrorReport>)> = Vec::new();
        for m in &self.images {
            if let (Some(s), Some(k)) = (m.gt_sigma, m.kernel) {
                match groups.iter_mut().find(|(g, _)| (g - s).abs() < 1e-9) {
                    Some((_, v)) => v.push(k),
                    None => groups.push((s, vec![k])),
                }
            }
        }
        groups.sort_by(|a, b| a.0.total_cmp(&b.0));
        groups
            .into_iter()
            .map(|(s, v)| {
                let n = v.len() as f64;
                (
                    s,
                    KernelErrorReport {
                        l1_complete: v.iter().map(|k| k.l1_complete).sum::<f64>() / n,
                        l1_reduced: v.iter().map(|k| k.l1_reduced).sum::<f64>() / n,
                    },
                )
            })
            .collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        write_text(&dir.join(format!("{stem}.csv")), &self.to_csv())?;
        write_text(
            &dir.join(format!("{stem}.json")),
            &serde_json::to_string_pretty(self).expect("plain report"),
        )
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DanError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| DanError::io(path, e))
}

/// Width of a kernel estimated from its second moment (isotropic reading).
pub fn kernel_sigma(k: &BlurKernel) -> f64 {
    let n = k.size();
    let c = (n / 2) as f64;
    let mut m2 = 0.0;
    for r in 0..n {
        for col in 0..n {
            m2 += k.get(r, col) * ((r as f64 - c).powi(2) + (col as f64 - c).powi(2));
        }
    }
    (m2 / 2.0).sqrt()
}

fn image_metrics(name: &str, sr: &ImagePlane, hr: &ImagePlane, shave: usize, kernel: Option<KernelErrorReport>, gt: Option<&BlurKernel>) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        name: name.to_string(),
        psnr_y: psnr_y(sr, hr, shave)?,
        ssim_y: ssim_y(sr, hr, shave)?,
        kernel,
        gt_sigma: gt.map(kernel_sigma),
    })
}

/// Blind evaluation: `iterations` alternating steps per image.
pub fn evaluate_blind(dan: &Dan, params: &ParamStore, set: &EvalSet, iterations: usize, shave: usize) -> Result<MetricReport> {
    Ok(iteration_sweep_reports(dan, params, set, iterations, shave)?.pop().expect("iterations ≥ 1"))
}

/// Bicubic upscaling baseline (no kernel estimate).
pub fn evaluate_bicubic(set: &EvalSet, shave: usize) -> Result<MetricReport> {
    let images = set
        .items
        .par_iter()
        .map(|it| {
            let sr = bicubic_upscale(&it.lr, set.scale)?.clamped();
            image_metrics(&it.name, &sr, &it.hr, shave, None, it.kernel.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new("bicubic", shave, images))
}

/// Kernel error of always predicting the Dirac kernel.
pub fn dirac_baseline(set: &EvalSet, basis: &PcaBasis) -> Result<KernelErrorReport> {
    let mut acc = KernelErrorReport {
        l1_complete: 0.0,
        l1_reduced: 0.0,
    };
    let mut n = 0.0;
    for it in &set.items {
        let gt = it.kernel.as_ref().ok_or_else(|| DanError::InvalidArgument(format!("{} has no GT kernel", it.name)))?;
        let e = kernel_error(&dirac_kernel(gt.size())?, gt, basis)?;
        acc.l1_complete += e.l1_complete;
        acc.l1_reduced += e.l1_reduced;
        n += 1.0;
    }
    if n == 0.0 {
        return Err(DanError::InvalidArgument("empty evaluation set".into()));
    }
    acc.l1_complete /= n;
    acc.l1_reduced /= n;
    Ok(acc)
}

/// Non-blind evaluation: one Restorer pass conditioned on the GT kernel.
pub fn non_blind_eval(dan: &Dan, params: &ParamStore, set: &EvalSet, shave: usize) -> Result<MetricReport> {
    let images = set
        .items
        .par_iter()
        .map(|it| {
            let gt = it.kernel.as_ref().ok_or_else(|| DanError::InvalidArgument(format!("{} has no GT kernel", it.name)))?;
            let reduced = dan.basis().reduce(gt)?;
            let sr = dan.restorer_forward(params, &it.lr, &reduced)?;
            image_metrics(&it.name, &sr, &it.hr, shave, None, Some(gt))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new("non-blind", shave, images))
}

/// One [`MetricReport`] per `T = 1..=max_t`, computed from a single
/// `max_t`-step unrolling per image (the trace at `t` is the `T = t` result).
pub fn iteration_sweep_reports(dan: &Dan, params: &ParamStore, set: &EvalSet, max_t: usize, shave: usize) -> Result<Vec<MetricReport>> {
    if set.is_empty() {
        return Err(DanError::InvalidArgument("empty evaluation set".into()));
    }
    let per_image = set
        .items
        .par_iter()
        .map(|it| {
            let (_, _, trace) = dan.dan_forward(params, &it.lr, max_t)?;
            trace
                .iter()
                .map(|st| {
                    let kerr = match &it.kernel {
                        Some(gt) => Some(kernel_error(&st.kernel, gt, dan.basis())?),
                        None => None,
                    };
                    image_metrics(&it.name, &st.sr, &it.hr, shave, kerr, it.kernel.as_ref())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..max_t)
        .map(|t| {
            let images = per_image.iter().map(|v| v[t].clone()).collect();
            MetricReport::new(format!("dan-T{}", t + 1), shave, images)
        })
        .collect())
}

/// One row of an iteration sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub iterations: usize,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub kernel_l1_complete: Option<f64>,
}

/// PSNR/SSIM for every `T` in `t_range`.
pub fn iteration_sweep(
    dan: &Dan,
    params: &ParamStore,
    set: &EvalSet,
    t_range: std::ops::RangeInclusive<usize>,
    shave: usize,
) -> Result<Vec<SweepRow>> {
    if *t_range.start() == 0 || t_range.is_empty() {
        return Err(DanError::InvalidArgument("iteration range must start at ≥ 1".into()));
    }
    let reports = iteration_sweep_reports(dan, params, set, *t_range.end(), shave)?;
    Ok(t_range
        .map(|t| {
            let r = &reports[t - 1];
            SweepRow {
                iterations: t,
                psnr_y: r.mean_psnr_y,
                ssim_y: r.mean_ssim_y,
                kernel_l1_complete: r.mean_kernel_l1_complete,
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("iterations,psnr_y,ssim_y,kernel_l1_complete\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.8},{}\n",
            r.iterations,
            r.psnr_y,
            r.ssim_y,
            r.kernel_l1_complete.map_or(String::new(), |v| format!("{v:.8}"))
        ));
    }
    s
}

/// Model complexity and speed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub params: usize,
    /// Multiply-accumulates for one `input_h×input_w` LR image.
    pub macs: u64,
    /// `2 × macs`.
    pub flops: u64,
    pub input_h: usize,
    pub input_w: usize,
    pub iterations: usize,
    /// Mean wall-clock seconds per image over the timed set (0 if none).
    pub sec_per_image: f64,
    pub timed_images: usize,
}

/// Parameter count, analytic MACs for the declared LR size, and the mean
/// inference time over `images`.
pub fn benchmark(dan: &Dan, params: &ParamStore, images: &[ImagePlane], input: (usize, usize), iterations: usize) -> Result<BenchReport> {
    let macs = dan.analytic_macs(input.0, input.1, iterations);
    let mut total = 0.0;
    for im in images {
        let t = Instant::now();
        dan.dan_forward(params, im, iterations)?;
        total += t.elapsed().as_secs_f64();
    }
    Ok(BenchReport {
        params: params.num_scalars(),
        macs,
        flops: 2 * macs,
        input_h: input.0,
        input_w: input.1,
        iterations,
        sec_per_image: if images.is_empty() { 0.0 } else { total / images.len() as f64 },
        timed_images: images.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ColorSpace;
    use crate::kernels::{fit_family_basis, isotropic_gaussian, KernelFamilySpec, ReducedKernel};

    fn textured(h: usize, w: usize, seed: usize) -> ImagePlane {
        ImagePlane::from_fn(h, w, ColorSpace::Rgb, |y, x, c| {
            (((y * 13 + x * 7 + c * 3 + seed * 5) % 17) as f64 / 16.0) * 0.8 + 0.1
        })
        .unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = textured(8, 8, 0);
        assert_eq!(psnr_y(&a, &a, 0).unwrap(), PSNR_CAP);
        let y1 = ImagePlane::filled(6, 6, ColorSpace::Y, 0.5).unwrap();
        let y2 = ImagePlane::filled(6, 6, ColorSpace::Y, 0.6).unwrap();
        assert!((psnr_y(&y1, &y2, 1).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr_y(&y1, &textured(6, 6, 0), 0).is_err());
    }

    #[test]
    fn only_luma_enters() {
        let a = textured(12, 12, 1);
        // perturbation orthogonal to the luma weights
        let (wr, wg) = (65.481, 128.553);
        let d = ImagePlane::from_fn(12, 12, ColorSpace::Rgb, |_, _, c| match c {
            0 => 0.01 * wg / wr,
            1 => -0.01,
            _ => 0.0,
        })
        .unwrap();
        let b = ImagePlane::new(12, 12, ColorSpace::Rgb, a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect()).unwrap();
        assert!(mse_y(&a, &b, 0).unwrap() < 1e-20);
    }

    #[test]
    fn ssim_examples() {
        let a = textured(16, 16, 2);
        assert_eq!(ssim_y(&a, &a, 0).unwrap(), 1.0);
        let neg = ImagePlane::from_fn(16, 16, ColorSpace::Rgb, |y, x, c| 1.0 - a.get(y, x, c)).unwrap();
        assert!(ssim_y(&a, &neg, 0).unwrap() < 1.0);
        assert!(ssim_y(&textured(10, 10, 0), &textured(10, 10, 1), 0).is_err());
    }

    #[test]
    fn kernel_error_examples() {
        let basis = fit_family_basis(&KernelFamilySpec::isotropic(7, 0.3, 2.0), 200, 4, 5).unwrap();
        let k = isotropic_gaussian(7, 1.2).unwrap();
        let e = kernel_error(&k, &k, &basis).unwrap();
        assert_eq!((e.l1_complete, e.l1_reduced), (0.0, 0.0));
        let r = basis.reduce(&k).unwrap();
        let mut shifted = r.coords().to_vec();
        shifted[0] += 1.0;
        let k2 = basis.expand(&ReducedKernel::new(shifted).unwrap()).unwrap();
        let e = kernel_error(&k, &k2, &basis).unwrap();
        // f32-rounded components are orthonormal to ~1e-7
        assert!((e.l1_reduced - 1.0 / 4.0).abs() < 1e-6, "{}", e.l1_reduced);
        assert!(kernel_error(&k, &isotropic_gaussian(5, 1.0).unwrap(), &basis).is_err());
    }

    #[test]
    fn kernel_sigma_recovers_gaussian_width() {
        let k = isotropic_gaussian(21, 1.7).unwrap();
        assert!((kernel_sigma(&k) - 1.7).abs() < 0.01);
    }

    #[test]
    fn report_means_and_csv() {
        let ims = vec![
            ImageMetrics {
                name: "a".into(),
                psnr_y: 30.0,
                ssim_y: 0.9,
                kernel: None,
                gt_sigma: Some(1.0),
            },
            ImageMetrics {
                name: "b".into(),
                psnr_y: 32.0,
                ssim_y: 0.7,
                kernel: None,
                gt_sigma: None,
            },
        ];
        let r = MetricReport::new("x", 2, ims);
        assert_eq!(r.mean_psnr_y, 31.0);
        assert!((r.mean_ssim_y - 0.8).abs() < 1e-12);
        assert_eq!(r.mean_kernel_l1_complete, None);
        assert_eq!(r.to_csv().lines().count(), 4);
    }
}
