//! Blur kernels: synthesis for both degradation settings, PCA reduction,
//! and the binary kernel/basis containers.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DanError, Result};
use crate::imaging::{save_png, ColorSpace, ImagePlane};
use crate::ops::{gemm, Mat};
use crate::tensor::Tensor;

/// A square point-spread function stored row-major.
///
/// Synthesized kernels are non-negative and sum to one. Kernels
/// reconstructed from PCA coordinates ([`PcaBasis::expand`]) are not
/// renormalized and may violate both; check [`BlurKernel::is_normalized`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    data: Vec<f64>,
}

fn check_odd(size: usize) -> Result<()> {
    if size.is_multiple_of(2) {
        return Err(DanError::InvalidArgument(format!("kernel size must be odd, got {size}")));
    }
    Ok(())
}

impl BlurKernel {
    /// Wraps weights that already form a normalized kernel.
    pub fn from_weights(size: usize, data: Vec<f64>) -> Result<Self> {
        let k = Self::reconstruction(size, data)?;
        if !k.is_normalized() {
            return Err(DanError::InvalidArgument(format!(
                "kernel weights must be non-negative and sum to one (sum {})",
                k.sum()
            )));
        }
        Ok(k)
    }

    /// Scales non-negative weights to sum to one.
    pub fn normalize(size: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(DanError::InvalidArgument("kernel weights must be finite and non-negative".into()));
        }
        let total: f64 = data.iter().sum();
        if total <= 0.0 {
            return Err(DanError::InvalidArgument("kernel weights sum to zero".into()));
        }
        data.iter_mut().for_each(|v| *v /= total);
        Self::reconstruction(size, data)
    }

    /// Wraps arbitrary finite weights without normalization checks.
    pub fn reconstruction(size: usize, data: Vec<f64>) -> Result<Self> {
        check_odd(size)?;
        if data.len() != size * size {
            return Err(DanError::Shape(format!("{size}×{size} kernel needs {} values, got {}", size * size, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DanError::InvalidArgument("kernel weights must be finite".into()));
        }
        Ok(BlurKernel { size, data })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Non-negative entries summing to `1 ± 1e-6`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| *v >= 0.0) && (self.sum() - 1.0).abs() <= 1e-6
    }

    /// The kernel as a `1×size²×1×1` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.data.len(), 1, 1], self.data.clone()).expect("shape")
    }

    /// Mean absolute difference between two same-size kernels.
    pub fn l1(&self, other: &BlurKernel) -> Result<f64> {
        if self.size != other.size {
            return Err(DanError::Shape(format!("kernel sizes {} vs {}", self.size, other.size)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64)
    }

    /// Min-max normalized grayscale image, each cell magnified `zoom` times.
    pub fn heatmap(&self, zoom: usize) -> ImagePlane {
        let zoom = zoom.max(1);
        let lo = self.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = self.size * zoom;
        ImagePlane::from_fn(n, n, ColorSpace::Y, |y, x, _| (self.get(y / zoom, x / zoom) - lo) / span).expect("non-empty")
    }

    pub fn save_heatmap(&self, path: impl AsRef<Path>, zoom: usize) -> Result<()> {
        save_png(path, &self.heatmap(zoom))
    }
}

/// The identity kernel: one at the center, zero elsewhere.
pub fn dirac_kernel(size: usize) -> Result<BlurKernel> {
    check_odd(size)?;
    let mut data = vec![0.0; size * size];
    let c = (size - 1) / 2;
    data[c * size + c] = 1.0;
    BlurKernel::from_weights(size, data)
}

/// Isotropic Gaussian sampled on the integer pixel grid and normalized.
pub fn isotropic_gaussian(size: usize, sigma: f64) -> Result<BlurKernel> {
    check_odd(size)?;
    if !(sigma > 0.0) {
        return Err(DanError::InvalidArgument(format!("gaussian width must be positive, got {sigma}")));
    }
    let c = ((size - 1) / 2) as f64;
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            data.push((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
        }
    }
    BlurKernel::normalize(size, data)
}

/// Rotated anisotropic Gaussian with per-pixel multiplicative noise.
///
/// The covariance is `R(θ)·diag(ax1², ax2²)·R(θ)ᵀ`; each pixel is then
/// multiplied by an independent factor uniform on `[1 − mult_noise_max, 1]`
/// drawn from `seed`, and the result is normalized.
pub fn anisotropic_gaussian(size: usize, ax1: f64, ax2: f64, theta: f64, mult_noise_max: f64, seed: u64) -> Result<BlurKernel> {
    check_odd(size)?;
    if !(ax1 > 0.0 && ax2 > 0.0) {
        return Err(DanError::InvalidArgument(format!("axis lengths must be positive, got {ax1}, {ax2}")));
    }
    if !(0.0..=1.0).contains(&mult_noise_max) {
        return Err(DanError::InvalidArgument(format!("multiplicative noise must lie in [0,1], got {mult_noise_max}")));
    }
    let (s, co) = theta.sin_cos();
    // inverse covariance = R·diag(1/ax1², 1/ax2²)·Rᵀ
    let (l1, l2) = (1.0 / (ax1 * ax1), 1.0 / (ax2 * ax2));
    let a = co * co * l1 + s * s * l2;
    let b = co * s * (l1 - l2);
    let d = s * s * l1 + co * co * l2;
    let c = ((size - 1) / 2) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 - c, i as f64 - c);
            let q = a * x * x + 2.0 * b * x * y + d * y * y;
            let mut v = (-0.5 * q).exp();
            if mult_noise_max > 0.0 {
                v *= 1.0 - mult_noise_max * rng.random::<f64>();
            }
            data.push(v);
        }
    }
    BlurKernel::normalize(size, data)
}

/// Inclusive evenly spaced test widths for the eight Gaussian8 kernels.
pub fn gaussian8_sigmas(scale: usize) -> Result<[f64; 8]> {
    let (lo, hi) = match scale {
        2 => (0.80, 1.60),
        3 => (1.35, 2.40),
        4 => (1.80, 3.20),
        _ => return Err(DanError::InvalidArgument(format!("Gaussian8 is defined for scales 2, 3, 4, not {scale}"))),
    };
    let mut out = [0.0; 8];
    for (i, v) in out.iter_mut().enumerate() {
        *v = lo + (hi - lo) * i as f64 / 7.0;
    }
    Ok(out)
}

/// The eight isotropic 21×21 test kernels for `scale`.
pub fn gaussian8(scale: usize) -> Result<Vec<BlurKernel>> {
    gaussian8_sigmas(scale)?.iter().map(|&s| isotropic_gaussian(21, s)).collect()
}

/// Kernel family tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Isotropic,
    Anisotropic,
}

/// Parameter ranges of a random kernel family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelFamilySpec {
    pub family: KernelFamily,
    pub size: usize,
    /// Width interval (isotropic) or axis-length interval (anisotropic).
    pub width_range: (f64, f64),
    /// Rotation interval in radians (anisotropic only).
    pub rotation_range: (f64, f64),
    pub mult_noise_max: f64,
}

/// Parameters a kernel was drawn with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelParams {
    Isotropic { sigma: f64 },
    Anisotropic { ax1: f64, ax2: f64, theta: f64, noise_seed: u64 },
}

impl KernelParams {
    pub fn sigma(&self) -> Option<f64> {
        match self {
            KernelParams::Isotropic { sigma } => Some(*sigma),
            KernelParams::Anisotropic { .. } => None,
        }
    }
}

impl KernelFamilySpec {
    /// Isotropic Gaussians of width uniform on `[lo, hi]`.
    pub fn isotropic(size: usize, lo: f64, hi: f64) -> Self {
        KernelFamilySpec {
            family: KernelFamily::Isotropic,
            size,
            width_range: (lo, hi),
            rotation_range: (0.0, 0.0),
            mult_noise_max: 0.0,
        }
    }

    /// Setting 1: 21×21 isotropic kernels, width range by scale.
    pub fn setting1(scale: usize) -> Result<Self> {
        let hi = match scale {
            1 | 2 => 2.0,
            3 => 3.0,
            4 => 4.0,
            _ => return Err(DanError::InvalidArgument(format!("unsupported scale {scale}"))),
        };
        Ok(Self::isotropic(21, 0.2, hi))
    }

    /// Setting 2: noisy anisotropic kernels, 11×11 for ×2 and 31×31 for ×4.
    pub fn setting2(scale: usize) -> Result<Self> {
        let size = match scale {
            1 | 2 => 11,
            3 => 21,
            4 => 31,
            _ => return Err(DanError::InvalidArgument(format!("unsupported scale {scale}"))),
        };
        Ok(KernelFamilySpec {
            family: KernelFamily::Anisotropic,
            size,
            width_range: (0.6, 5.0),
            rotation_range: (-PI, PI),
            mult_noise_max: 0.25,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_odd(self.size)?;
        let (lo, hi) = self.width_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(DanError::Config(format!("kernel width range ({lo}, {hi}) must be positive and ordered")));
        }
        if !(0.0..=1.0).contains(&self.mult_noise_max) {
            return Err(DanError::Config(format!("mult_noise_max {} outside [0,1]", self.mult_noise_max)));
        }
        Ok(())
    }

    /// Draws the parameters of one kernel.
    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> KernelParams {
        let (lo, hi) = self.width_range;
        let width = |rng: &mut R| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        match self.family {
            KernelFamily::Isotropic => KernelParams::Isotropic { sigma: width(rng) },
            KernelFamily::Anisotropic => {
                let ax1 = width(rng);
                let ax2 = width(rng);
                let (tlo, thi) = self.rotation_range;
                let theta = if thi > tlo { rng.random_range(tlo..=thi) } else { tlo };
                KernelParams::Anisotropic {
                    ax1,
                    ax2,
                    theta,
                    noise_seed: rng.next_u64(),
                }
            }
        }
    }

    /// Builds the kernel described by `params`.
    pub fn build(&self, params: &KernelParams) -> Result<BlurKernel> {
        match *params {
            KernelParams::Isotropic { sigma } => isotropic_gaussian(self.size, sigma),
            KernelParams::Anisotropic { ax1, ax2, theta, noise_seed } => {
                anisotropic_gaussian(self.size, ax1, ax2, theta, self.mult_noise_max, noise_seed)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(BlurKernel, KernelParams)> {
        let params = self.sample_params(rng);
        Ok((self.build(&params)?, params))
    }
}

/// PCA coordinates of a kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedKernel {
    coords: Vec<f64>,
}

impl ReducedKernel {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(DanError::InvalidArgument("reduced kernel must be finite".into()));
        }
        Ok(ReducedKernel { coords })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// The coordinates as a `1×d×1×1` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.coords.len(), 1, 1], self.coords.clone()).expect("shape")
    }
}

/// Mean and top principal directions of a kernel population.
///
/// Values are rounded to `f32` precision when fitted, so the basis survives
/// the on-disk container bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    size: usize,
    mean: Vec<f64>,
    /// `d × size²`, row-major.
    components: Vec<f64>,
    d: usize,
}

fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

impl PcaBasis {
    pub fn from_parts(size: usize, mean: Vec<f64>, components: Vec<f64>, d: usize) -> Result<Self> {
        check_odd(size)?;
        let dim = size * size;
        if mean.len() != dim || components.len() != d * dim || d == 0 {
            return Err(DanError::Shape(format!(
                "basis for {size}×{size} kernels with d={d} needs {dim} mean and {} component values",
                d * dim
            )));
        }
        Ok(PcaBasis { size, mean, components, d })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.components[i * n..(i + 1) * n]
    }

    /// `coords = components · (flatten(kernel) − mean)`.
    pub fn reduce(&self, kernel: &BlurKernel) -> Result<ReducedKernel> {
        if kernel.size() != self.size {
            return Err(DanError::Shape(format!("kernel size {} vs basis size {}", kernel.size(), self.size)));
        }
        let centered: Vec<f64> = kernel.data().iter().zip(&self.mean).map(|(k, m)| k - m).collect();
        let coords = (0..self.d)
            .map(|i| self.component(i).iter().zip(&centered).map(|(c, v)| c * v).sum())
            .collect();
        ReducedKernel::new(coords)
    }

    /// `mean + componentsᵀ · coords`, not renormalized.
    pub fn expand(&self, reduced: &ReducedKernel) -> Result<BlurKernel> {
        if reduced.dim() != self.d {
            return Err(DanError::Shape(format!("reduced dimension {} vs basis dimension {}", reduced.dim(), self.d)));
        }
        let mut data = self.mean.clone();
        for (i, &c) in reduced.coords().iter().enumerate() {
            for (v, b) in data.iter_mut().zip(self.component(i)) {
                *v += c * b;
            }
        }
        BlurKernel::reconstruction(self.size, data)
    }

    /// Weight `d×size²×1×1` and bias `d×1×1×1` of the reduction as a
    /// pointwise affine map.
    pub fn affine_tensors(&self) -> (Tensor, Tensor) {
        let n = self.size * self.size;
        let w = Tensor::from_vec([self.d, n, 1, 1], self.components.clone()).expect("shape");
        let bias = (0..self.d)
            .map(|i| -self.component(i).iter().zip(&self.mean).map(|(c, m)| c * m).sum::<f64>())
            .collect();
        let b = Tensor::from_vec([self.d, 1, 1, 1], bias).expect("shape");
        (w, b)
    }

    /// Largest deviation of `components · componentsᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.d {
            for j in 0..self.d {
                let dot: f64 = self.component(i).iter().zip(self.component(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    /// Writes the basis in the `PCAB` container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(16 + 4 * (self.mean.len() + self.components.len()));
        buf.extend_from_slice(b"PCAB");
        buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.size as u16).to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        for v in self.mean.iter().chain(&self.components) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        write_file(path, &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let (size, d) = parse_header(&bytes, b"PCAB", path)?;
        let n = size * size;
        let values = parse_f32s(&bytes[16..], n * (1 + d), path)?;
        let (mean, comps) = values.split_at(n);
        PcaBasis::from_parts(size, mean.to_vec(), comps.to_vec(), d)
    }
}

/// Fits the top-`d` principal directions of the flattened kernels.
pub fn pca_fit(samples: &[BlurKernel], d: usize) -> Result<PcaBasis> {
    let first = samples
        .first()
        .ok_or_else(|| DanError::InvalidArgument("PCA needs at least one sample".into()))?;
    let size = first.size();
    let dim = size * size;
    if d == 0 || samples.len() < d {
        return Err(DanError::InvalidArgument(format!("PCA with d={d} needs at least {d} samples, got {}", samples.len())));
    }
    if d > dim {
        return Err(DanError::InvalidArgument(format!("d={d} exceeds kernel dimension {dim}")));
    }
    if let Some(k) = samples.iter().find(|k| k.size() != size) {
        return Err(DanError::Shape(format!("mixed kernel sizes {} and {size}", k.size())));
    }
    let n = samples.len();
    let mut mean = vec![0.0; dim];
    for k in samples {
        for (m, v) in mean.iter_mut().zip(k.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Vec::with_capacity(n * dim);
    for k in samples {
        centered.extend(k.data().iter().zip(&mean).map(|(v, m)| v - m));
    }
    let mut cov = vec![0.0; dim * dim];
    let x = Mat::new(&centered, n, dim);
    gemm(x.t(), x, &mut cov, 0.0);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &cov));
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(d * dim);
    for &col in order.iter().take(d) {
        let v = eig.eigenvectors.column(col);
        // sign convention: largest-magnitude entry positive
        let pivot = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|x| to_f32_precision(sign * x)));
    }
    let mean = mean.into_iter().map(to_f32_precision).collect();
    PcaBasis::from_parts(size, mean, components, d)
}

/// Fits a basis over `count` kernels drawn from `family` with `seed`.
pub fn fit_family_basis(family: &KernelFamilySpec, count: usize, d: usize, seed: u64) -> Result<PcaBasis> {
    family.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| family.sample(&mut rng).map(|(k, _)| k))
        .collect::<Result<Vec<_>>>()?;
    pca_fit(&samples, d)
}

const CONTAINER_VERSION: u16 = 1;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| DanError::io(path, e))?;
    f.write_all(bytes).map_err(|e| DanError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DanError::io(path, e))?;
    Ok(bytes)
}

fn parse_header(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(DanError::Format(format!(
            "{}: not a {} container",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CONTAINER_VERSION {
        return Err(DanError::Format(format!("{}: unsupported container version {version}", path.display())));
    }
    let size = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let count = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    Ok((size, count))
}

fn parse_f32s(bytes: &[u8], count: usize, path: &Path) -> Result<Vec<f64>> {
    if bytes.len() != 4 * count {
        return Err(DanError::Format(format!(
            "{}: expected {count} float32 values, found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes kernels of one size to a `BKRN` container.
pub fn save_kernels(path: impl AsRef<Path>, kernels: &[BlurKernel]) -> Result<()> {
    let path = path.as_ref();
    let size = kernels.first().map_or(1, |k| k.size());
    if kernels.iter().any(|k| k.size() != size) {
        return Err(DanError::Shape("all kernels in a container must share one size".into()));
    }
    let mut buf = Vec::with_capacity(16 + 4 * size * size * kernels.len());
    buf.extend_from_slice(b"BKRN");
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(size as u16).to_le_bytes());
    buf.extend_from_slice(&(kernels.len() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for k in kernels {
        for v in k.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_file(path, &buf)
}

/// Reads a `BKRN` container. Entries are taken as stored (float32).
pub fn load_kernels(path: impl AsRef<Path>) -> Result<Vec<BlurKernel>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let (size, count) = parse_header(&bytes, b"BKRN", path)?;
    let values = parse_f32s(&bytes[16..], count * size * size, path)?;
    values
        .chunks(size * size)
        .map(|c| BlurKernel::reconstruction(size, c.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirac_examples() {
        let k = dirac_kernel(21).unwrap();
        assert_eq!(k.get(10, 10), 1.0);
        assert_eq!(k.sum(), 1.0);
        assert_eq!(dirac_kernel(1).unwrap().data(), &[1.0]);
        assert_eq!(dirac_kernel(11).unwrap().get(5, 5), 1.0);
        assert!(dirac_kernel(4).is_err());
    }

    #[test]
    fn isotropic_symmetry_and_sum() {
        for sigma in [0.2, 1.8, 3.2] {
            let k = isotropic_gaussian(21, sigma).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-6);
            for i in 0..21 {
                for j in 0..21 {
                    assert!((k.get(i, j) - k.get(j, i)).abs() < 1e-15);
                    assert!((k.get(i, j) - k.get(20 - i, j)).abs() < 1e-15);
                }
            }
        }
        assert!(isotropic_gaussian(21, 0.0).is_err());
        assert!(isotropic_gaussian(21, -1.0).is_err());
    }

    #[test]
    fn isotropic_center_value_closed_form() {
        // independent evaluation: Σ exp(−r²/8) over the 21×21 grid
        let mut z = 0.0;
        for i in -10i32..=10 {
            for j in -10i32..=10 {
                z += (-((i * i + j * j) as f64) / 8.0).exp();
            }
        }
        let k = isotropic_gaussian(21, 2.0).unwrap();
        assert!((k.get(10, 10) - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn anisotropic_degenerates_to_isotropic() {
        let a = anisotropic_gaussian(15, 1.7, 1.7, 0.9, 0.0, 1).unwrap();
        let b = isotropic_gaussian(15, 1.7).unwrap();
        let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff < 1e-6);
        assert!(anisotropic_gaussian(15, 0.0, 1.0, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn anisotropic_noise_is_seeded() {
        let a = anisotropic_gaussian(11, 2.0, 1.0, 0.3, 0.25, 5).unwrap();
        let b = anisotropic_gaussian(11, 2.0, 1.0, 0.3, 0.25, 5).unwrap();
        let c = anisotropic_gaussian(11, 2.0, 1.0, 0.3, 0.25, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.is_normalized());
    }

    #[test]
    fn gaussian8_ranges() {
        let s4 = gaussian8_sigmas(4).unwrap();
        let want = [1.8, 2.0, 2.2, 2.4, 2.6, 2.8, 3.0, 3.2];
        for (a, b) in s4.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let s2 = gaussian8_sigmas(2).unwrap();
        assert_eq!(s2[0], 0.80);
        assert_eq!(s2[7], 1.60);
        assert!(gaussian8(5).is_err());
        assert!(gaussian8(3).unwrap().iter().all(|k| k.is_normalized() && k.size() == 21));
    }

    #[test]
    fn pca_reduce_expand_algebra() {
        let basis = fit_family_basis(&KernelFamilySpec::isotropic(11, 0.2, 2.0), 300, 4, 3).unwrap();
        assert!(basis.orthonormality_error() < 1e-5);
        let mean = BlurKernel::reconstruction(11, basis.mean().to_vec()).unwrap();
        assert!(basis.reduce(&mean).unwrap().coords().iter().all(|c| c.abs() < 1e-12));
        let shifted: Vec<f64> = basis.mean().iter().zip(basis.component(2)).map(|(m, c)| m + c).collect();
        let r = basis.reduce(&BlurKernel::reconstruction(11, shifted).unwrap()).unwrap();
        for (i, c) in r.coords().iter().enumerate() {
            let want = if i == 2 { 1.0 } else { 0.0 };
            assert!((c - want).abs() < 1e-5, "{i}: {c}");
        }
        let zero = ReducedKernel::new(vec![0.0; 4]).unwrap();
        assert_eq!(basis.expand(&zero).unwrap().data(), basis.mean());
        assert!(basis.expand(&ReducedKernel::new(vec![0.0; 3]).unwrap()).is_err());
        assert!(basis.reduce(&dirac_kernel(21).unwrap()).is_err());
    }

    #[test]
    fn pca_rejects_too_few_samples() {
        let ks = vec![dirac_kernel(5).unwrap(); 3];
        assert!(pca_fit(&ks, 4).is_err());
    }

    #[test]
    fn containers_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ks = gaussian8(4).unwrap();
        let p = dir.path().join("k.bkrn");
        save_kernels(&p, &ks).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"BKRN");
        assert_eq!(bytes.len(), 16 + 8 * 441 * 4);
        let back = load_kernels(&p).unwrap();
        assert_eq!(back.len(), 8);
        for (a, b) in ks.iter().zip(&back) {
            assert!(a.l1(b).unwrap() < 1e-8);
        }
        let basis = fit_family_basis(&KernelFamilySpec::setting1(2).unwrap(), 200, 6, 9).unwrap();
        let bp = dir.path().join("b.pcab");
        basis.save(&bp).unwrap();
        assert_eq!(PcaBasis::load(&bp).unwrap(), basis);
        assert!(matches!(PcaBasis::load(&p), Err(DanError::Format(_))));
    }
}
