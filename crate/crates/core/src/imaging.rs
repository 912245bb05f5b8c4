//! Image planes and the blur → subsample → noise degradation model.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DanError, Result};
use crate::kernels::BlurKernel;
use crate::tensor::Tensor;

/// Channel interpretation of an [`ImagePlane`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ColorSpace {
    Rgb,
    /// Single luminance channel.
    Y,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb => 3,
            ColorSpace::Y => 1,
        }
    }
}

/// An `H×W×C` image with real intensities, interleaved (`C` fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    color: ColorSpace,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, color: ColorSpace, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DanError::Sizing(format!("image must be non-empty, got {height}×{width}")));
        }
        if data.len() != height * width * color.channels() {
            return Err(DanError::Shape(format!(
                "{height}×{width}×{} image needs {} values, got {}",
                color.channels(),
                height * width * color.channels(),
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(DanError::InvalidArgument(format!("non-finite pixel value {v}")));
        }
        Ok(ImagePlane {
            height,
            width,
            color,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: ColorSpace, value: f64) -> Result<Self> {
        Self::new(height, width, color, vec![value; height * width * color.channels()])
    }

    /// Builds an image by evaluating `f(row, col, channel)`.
    pub fn from_fn(height: usize, width: usize, color: ColorSpace, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let c = color.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self::new(height, width, color, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    #[inline]
    pub fn color(&self) -> ColorSpace {
        self.color
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels() + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let ch = self.channels();
        self.data[(y * self.width + x) * ch + c] = v;
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f64 {
        assert_eq!(self.shape(), other.shape(), "image shape mismatch");
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImagePlane> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(DanError::Sizing(format!(
                "crop {height}×{width} at ({top},{left}) outside {}×{} image",
                self.height, self.width
            )));
        }
        ImagePlane::from_fn(height, width, self.color, |y, x, c| self.get(top + y, left + x, c))
    }

    /// Center-crops both dimensions down to multiples of `s`.
    pub fn crop_to_multiple(&self, s: usize) -> Result<ImagePlane> {
        if s == 0 {
            return Err(DanError::InvalidArgument("scale must be ≥ 1".into()));
        }
        let h = self.height / s * s;
        let w = self.width / s * s;
        if h == 0 || w == 0 {
            return Err(DanError::Sizing(format!("{}×{} image smaller than scale {s}", self.height, self.width)));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    pub fn flip_horizontal(&self) -> ImagePlane {
        ImagePlane::from_fn(self.height, self.width, self.color, |y, x, c| self.get(y, self.width - 1 - x, c))
            .expect("same shape")
    }

    /// Luminance plane (ITU-R BT.601, video range) as a single-channel image.
    pub fn to_y(&self) -> ImagePlane {
        match self.color {
            ColorSpace::Y => self.clone(),
            ColorSpace::Rgb => {
                let data = self.data.chunks(3).map(|p| rgb_to_y(p[0], p[1], p[2])).collect();
                ImagePlane {
                    height: self.height,
                    width: self.width,
                    color: ColorSpace::Y,
                    data,
                }
            }
        }
    }

    /// `1×C×H×W` tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        let c = self.channels();
        let hw = self.height * self.width;
        let mut out = vec![0.0; c * hw];
        for (i, px) in self.data.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * hw + i] = v;
            }
        }
        Tensor::from_vec([1, c, self.height, self.width], out).expect("shape")
    }

    /// Batch item `n` of a `N×C×H×W` tensor as an image (values are not
    /// clamped).
    pub fn from_tensor(t: &Tensor, n: usize, color: ColorSpace) -> Result<ImagePlane> {
        let [_, c, h, w] = t.shape();
        if c != color.channels() {
            return Err(DanError::Shape(format!("{c}-channel tensor as {color:?} image")));
        }
        let item = t.item(n);
        ImagePlane::from_fn(h, w, color, |y, x, ch| item[(ch * h + y) * w + x])
    }
}

/// Luma of one `[0,1]` RGB pixel: `16/255 + (65.481 R + 128.553 G + 24.966 B)/255`.
#[inline]
pub fn rgb_to_y(r: f64, g: f64, b: f64) -> f64 {
    (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

/// Additive white Gaussian noise description.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation in `[0,1]` intensity units.
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { sigma: 0.0, seed: 0 }
    }
}

/// Convolution with replicate padding, without clamping.
pub fn convolve2d_unclamped(image: &ImagePlane, kernel: &BlurKernel) -> Result<ImagePlane> {
    check_kernel_fits(image, kernel)?;
    let (h, w, c) = image.shape();
    let mut out = ImagePlane::filled(h, w, image.color, 0.0)?;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set(y, x, ch, blur_at(image, kernel, y, x, ch));
            }
        }
    }
    Ok(out)
}

fn check_kernel_fits(image: &ImagePlane, kernel: &BlurKernel) -> Result<()> {
    let size = kernel.size();
    if size > image.height.min(image.width) {
        return Err(DanError::Sizing(format!(
            "kernel {size}×{size} larger than {}×{} image",
            image.height, image.width
        )));
    }
    Ok(())
}

fn check_normalized(kernel: &BlurKernel) -> Result<()> {
    let sum = kernel.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(DanError::InvalidArgument(format!("blur kernel must sum to one, sums to {sum}")));
    }
    Ok(())
}

/// One output sample of the replicate-padded convolution:
/// `Σ k[a,b] · in[y − (a − r), x − (b − r)]`.
#[inline]
fn blur_at(image: &ImagePlane, kernel: &BlurKernel, y: usize, x: usize, ch: usize) -> f64 {
    let size = kernel.size();
    let r = (size / 2) as isize;
    let (h, w) = (image.height as isize, image.width as isize);
    let k = kernel.data();
    let mut acc = 0.0;
    for a in 0..size {
        let sy = (y as isize - (a as isize - r)).clamp(0, h - 1) as usize;
        for b in 0..size {
            let kv = k[a * size + b];
            if kv == 0.0 {
                continue;
            }
            let sx = (x as isize - (b as isize - r)).clamp(0, w - 1) as usize;
            acc += kv * image.get(sy, sx, ch);
        }
    }
    acc
}

/// Blurs every channel with `kernel` (true convolution, replicate padding).
pub fn convolve2d(image: &ImagePlane, kernel: &BlurKernel) -> Result<ImagePlane> {
    check_normalized(kernel)?;
    Ok(convolve2d_unclamped(image, kernel)?.clamped())
}

/// Keeps the upper-left pixel of every `s×s` block.
pub fn downsample(image: &ImagePlane, s: usize) -> Result<ImagePlane> {
    if s == 0 {
        return Err(DanError::InvalidArgument("scale must be ≥ 1".into()));
    }
    if !image.height.is_multiple_of(s) || !image.width.is_multiple_of(s) {
        return Err(DanError::Sizing(format!(
            "{}×{} image not divisible by scale {s}",
            image.height, image.width
        )));
    }
    ImagePlane::from_fn(image.height / s, image.width / s, image.color, |y, x, c| image.get(s * y, s * x, c))
}

/// Adds seeded i.i.d. Gaussian noise and clamps to `[0, 1]`.
pub fn add_awgn(image: &ImagePlane, noise: &NoiseSpec) -> Result<ImagePlane> {
    if !(noise.sigma >= 0.0) {
        return Err(DanError::InvalidArgument(format!("noise sigma must be ≥ 0, got {}", noise.sigma)));
    }
    if noise.sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| DanError::InvalidArgument(e.to_string()))?;
    let mut out = image.clone();
    for v in &mut out.data {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// The full degradation `y = (x ⊗ k)↓s + n`.
///
/// Only the retained samples of the blurred image are evaluated; the result
/// is bit-identical to composing [`convolve2d`], [`downsample`] and
/// [`add_awgn`].
pub fn degrade(hr: &ImagePlane, kernel: &BlurKernel, s: usize, noise: &NoiseSpec) -> Result<ImagePlane> {
    check_normalized(kernel)?;
    check_kernel_fits(hr, kernel)?;
    if s == 0 || !hr.height.is_multiple_of(s) || !hr.width.is_multiple_of(s) {
        return Err(DanError::Sizing(format!("{}×{} image not divisible by scale {s}", hr.height, hr.width)));
    }
    let lr = ImagePlane::from_fn(hr.height / s, hr.width / s, hr.color, |y, x, c| {
        blur_at(hr, kernel, s * y, s * x, c).clamp(0.0, 1.0)
    })?;
    add_awgn(&lr, noise)
}

/// Cubic convolution weight with `a = −0.5`.
fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        1.5 * ax.powi(3) - 2.5 * ax.powi(2) + 1.0
    } else if ax < 2.0 {
        -0.5 * ax.powi(3) + 2.5 * ax.powi(2) - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Per-output-index taps for upscaling one axis by `s`.
fn cubic_taps(len: usize, s: usize) -> Vec<[(usize, f64); 4]> {
    (0..len * s)
        .map(|u| {
            let x = (u as f64 + 0.5) / s as f64 - 0.5;
            let base = x.floor() as isize;
            let mut taps = [(0usize, 0.0f64); 4];
            let mut total = 0.0;
            for (t, slot) in taps.iter_mut().enumerate() {
                let i = base - 1 + t as isize;
                let wgt = cubic(x - i as f64);
                *slot = (i.clamp(0, len as isize - 1) as usize, wgt);
                total += wgt;
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Bicubic upscaling by an integer factor (pixel-center aligned, replicate
/// borders), clamped to `[0, 1]`.
pub fn bicubic_upscale(image: &ImagePlane, s: usize) -> Result<ImagePlane> {
    if s == 0 {
        return Err(DanError::InvalidArgument("scale must be ≥ 1".into()));
    }
    let (h, w, _) = image.shape();
    let rows = cubic_taps(h, s);
    let cols = cubic_taps(w, s);
    let wide = ImagePlane::from_fn(h, w * s, image.color, |y, x, c| {
        cols[x].iter().map(|&(i, wt)| wt * image.get(y, i, c)).sum()
    })?;
    Ok(ImagePlane::from_fn(h * s, w * s, image.color, |y, x, c| {
        rows[y].iter().map(|&(i, wt)| wt * wide.get(i, x, c)).sum()
    })?
    .clamped())
}

/// Reads an 8- or 16-bit PNG. Grayscale files become [`ColorSpace::Y`],
/// everything else RGB; alpha is dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| DanError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_)
    );
    let data: Vec<f64> = match (gray, sixteen) {
        (true, false) => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        (true, true) => img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        (false, false) => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        (false, true) => img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    };
    ImagePlane::new(h, w, if gray { ColorSpace::Y } else { ColorSpace::Rgb }, data)
}

/// Writes the image as an 8-bit PNG (values clamped and rounded).
pub fn save_png(path: impl AsRef<Path>, image: &ImagePlane) -> Result<()> {
    save_png_depth(path, image, 8)
}

/// Writes the image as an 8- or 16-bit PNG.
pub fn save_png_depth(path: impl AsRef<Path>, image: &ImagePlane, bits: u8) -> Result<()> {
    let path = path.as_ref();
    let (h, w, _) = image.shape();
    let q = |v: f64, max: f64| (v.clamp(0.0, 1.0) * max).round();
    let result = match (image.color, bits) {
        (ColorSpace::Y, 8) => ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, image.data.iter().map(|&v| q(v, 255.0) as u8).collect::<Vec<_>>())
            .expect("buffer size")
            .save(path),
        (ColorSpace::Rgb, 8) => ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, image.data.iter().map(|&v| q(v, 255.0) as u8).collect::<Vec<_>>())
            .expect("buffer size")
            .save(path),
        (ColorSpace::Y, 16) => ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, image.data.iter().map(|&v| q(v, 65535.0) as u16).collect::<Vec<_>>())
            .expect("buffer size")
            .save(path),
        (ColorSpace::Rgb, 16) => ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, image.data.iter().map(|&v| q(v, 65535.0) as u16).collect::<Vec<_>>())
            .expect("buffer size")
            .save(path),
        _ => return Err(DanError::InvalidArgument(format!("unsupported PNG bit depth {bits}"))),
    };
    result.map_err(|source| DanError::Image {
        path: path.to_path_buf(),
        source,
    })
}
