//! Training-pair synthesis, HR patch pools, and evaluation-set building.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DanError, Result};
use crate::imaging::{degrade, load_png, save_png, ColorSpace, ImagePlane, NoiseSpec};
use crate::kernels::{load_kernels, save_kernels, BlurKernel, KernelFamilySpec, KernelParams, PcaBasis, ReducedKernel};

/// HR tile size when cutting training images into patches.
pub const HR_TILE: usize = 256;
/// Stride between HR tiles.
pub const HR_TILE_STRIDE: usize = 192;

/// How LR images are produced from HR images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub scale: usize,
    pub kernels: KernelFamilySpec,
    /// AWGN standard deviation in `[0,1]` units.
    pub noise_sigma: f64,
    /// Side length of the LR training crop.
    pub lr_patch: usize,
    /// Random horizontal flips of the HR patch.
    pub flip: bool,
}

impl DegradationSpec {
    pub fn new(scale: usize, kernels: KernelFamilySpec) -> Self {
        DegradationSpec {
            scale,
            kernels,
            noise_sigma: 0.0,
            lr_patch: 64,
            flip: false,
        }
    }

    /// Setting 1: isotropic 21×21 kernels.
    pub fn setting1(scale: usize) -> Result<Self> {
        Ok(Self::new(scale, KernelFamilySpec::setting1(scale)?))
    }

    /// Setting 2: noisy anisotropic kernels.
    pub fn setting2(scale: usize) -> Result<Self> {
        Ok(Self::new(scale, KernelFamilySpec::setting2(scale)?))
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.size
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.scale) {
            return Err(DanError::Config(format!("scale must be in 1..=4, got {}", self.scale)));
        }
        self.kernels.validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DanError::Config(format!("noise sigma {} must be ≥ 0", self.noise_sigma)));
        }
        if self.lr_patch == 0 {
            return Err(DanError::Config("lr_patch must be positive".into()));
        }
        Ok(())
    }

    /// Draws the sample-level randomness for `seed`: the kernel, its
    /// parameters, and the noise seed.
    pub fn sample_kernel(&self, seed: u64) -> Result<(BlurKernel, KernelParams, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, p) = self.kernels.sample(&mut rng)?;
        Ok((k, p, rng.next_u64()))
    }
}

/// One synthesized training pair.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub lr: ImagePlane,
    pub hr: ImagePlane,
    pub kernel: BlurKernel,
    pub reduced: ReducedKernel,
    pub params: KernelParams,
    pub seed: u64,
    /// Upper-left corner of the crop in LR coordinates.
    pub offset: (usize, usize),
    pub flipped: bool,
}

impl TrainSample {
    /// Re-synthesizes from the source patch with the recorded seed and
    /// checks that every field is bit-identical.
    pub fn verify(&self, hr_patch: &ImagePlane, spec: &DegradationSpec, basis: &PcaBasis) -> Result<bool> {
        let again = synth_pair(hr_patch, spec, basis, self.seed)?;
        Ok(again.lr == self.lr
            && again.hr == self.hr
            && again.kernel == self.kernel
            && again.reduced == self.reduced
            && again.offset == self.offset)
    }
}

/// Degrades `hr_patch` with a freshly sampled kernel and crops aligned
/// LR / HR windows. Deterministic in `seed`.
pub fn synth_pair(hr_patch: &ImagePlane, spec: &DegradationSpec, basis: &PcaBasis, seed: u64) -> Result<TrainSample> {
    spec.validate()?;
    let s = spec.scale;
    let p = spec.lr_patch;
    if hr_patch.height() < p * s || hr_patch.width() < p * s {
        return Err(DanError::Sizing(format!(
            "HR patch {}×{} is smaller than {}×{} (LR patch {p} at ×{s})",
            hr_patch.height(),
            hr_patch.width(),
            p * s,
            p * s
        )));
    }
    let (kernel, params, noise_seed) = spec.sample_kernel(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let flipped = spec.flip && rng.random_bool(0.5);
    let src = hr_patch.crop_to_multiple(s)?;
    let src = if flipped { src.flip_horizontal() } else { src };
    let noise = NoiseSpec {
        sigma: spec.noise_sigma,
        seed: rng.next_u64(),
    };
    let lr_full = degrade(&src, &kernel, s, &noise)?;
    let top = rng.random_range(0..=lr_full.height() - p);
    let left = rng.random_range(0..=lr_full.width() - p);
    let lr = lr_full.crop(top, left, p, p)?;
    let hr = src.crop(top * s, left * s, p * s, p * s)?;
    let reduced = basis.reduce(&kernel)?;
    Ok(TrainSample {
        lr,
        hr,
        kernel,
        reduced,
        params,
        seed,
        offset: (top, left),
        flipped,
    })
}

/// Seed of sample `index` under `global_seed` (SplitMix64 finalizer).
pub fn sample_seed(global_seed: u64, index: u64) -> u64 {
    let mut z = global_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A pool of HR training patches.
#[derive(Clone, Debug, Default)]
pub struct PatchPool {
    patches: Vec<ImagePlane>,
}

impl PatchPool {
    pub fn new(patches: Vec<ImagePlane>) -> Result<Self> {
        if patches.is_empty() {
            return Err(DanError::InvalidArgument("patch pool is empty".into()));
        }
        Ok(PatchPool { patches })
    }

    /// Procedurally generated patches, deterministic in `seed`.
    pub fn procedural(count: usize, size: usize, seed: u64) -> Result<Self> {
        let patches = (0..count as u64)
            .into_par_iter()
            .map(|i| procedural_patch(size, sample_seed(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(patches)
    }

    /// Tiles every PNG in `dir` (sorted by name) into `tile×tile` patches.
    pub fn from_dir(dir: impl AsRef<Path>, tile: usize, stride: usize) -> Result<Self> {
        let mut patches = Vec::new();
        for path in list_pngs(dir.as_ref())? {
            let img = load_png(&path)?;
            patches.extend(tile_image(&img, tile, stride)?);
        }
        Self::new(patches)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[ImagePlane] {
        &self.patches
    }

    /// Splits off the last `count` patches (e.g. as held-out data).
    pub fn split_off(&mut self, count: usize) -> Result<PatchPool> {
        if count >= self.patches.len() {
            return Err(DanError::InvalidArgument(format!(
                "cannot hold out {count} of {} patches",
                self.patches.len()
            )));
        }
        let rest = self.patches.split_off(self.patches.len() - count);
        PatchPool::new(rest)
    }

    /// The `batch_size` samples of batch number `batch_index`.
    ///
    /// Sample `i` of the run uses seed `sample_seed(global_seed, i)`, so the
    /// result does not depend on how many worker threads synthesize it.
    pub fn batch(
        &self,
        spec: &DegradationSpec,
        basis: &PcaBasis,
        global_seed: u64,
        batch_index: u64,
        batch_size: usize,
    ) -> Result<Vec<TrainSample>> {
        let first = batch_index * batch_size as u64;
        (first..first + batch_size as u64)
            .into_par_iter()
            .map(|i| {
                let seed = sample_seed(global_seed, i);
                // the patch choice uses a separate stream from the kernel draw
                let which = (sample_seed(seed, u64::MAX) % self.patches.len() as u64) as usize;
                synth_pair(&self.patches[which], spec, basis, seed)
            })
            .collect()
    }
}

/// Cuts an image into `tile×tile` patches on a `stride` grid; images smaller
/// than a tile yield one center crop of the largest fitting square.
pub fn tile_image(img: &ImagePlane, tile: usize, stride: usize) -> Result<Vec<ImagePlane>> {
    if tile == 0 || stride == 0 {
        return Err(DanError::InvalidArgument("tile and stride must be positive".into()));
    }
    if img.height() < tile || img.width() < tile {
        let side = img.height().min(img.width());
        return Ok(vec![img.crop((img.height() - side) / 2, (img.width() - side) / 2, side, side)?]);
    }
    let starts = |len: usize| -> Vec<usize> { (0..=(len - tile)).step_by(stride).collect() };
    let mut out = Vec::new();
    for top in starts(img.height()) {
        for left in starts(img.width()) {
            out.push(img.crop(top, left, tile, tile)?);
        }
    }
    Ok(out)
}

/// A synthetic natural-ish RGB patch: a smooth color gradient, a few
/// gratings, and sharp-edged rectangles and discs.
pub fn procedural_patch(size: usize, seed: u64) -> Result<ImagePlane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = size as f64;
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let base = [color(&mut rng), color(&mut rng)];
    let grad_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let gratings: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..=3))
        .map(|_| {
            let freq = rng.random_range(0.05..0.6);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.05..0.25);
            (freq, angle, phase, amp, color(&mut rng))
        })
        .collect();
    enum Shape {
        Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
        Disc { cy: f64, cx: f64, r: f64 },
    }
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.random_range(3..=8))
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                let (y0, x0) = (rng.random_range(-0.2..1.0) * sz, rng.random_range(-0.2..1.0) * sz);
                let (h, w) = (rng.random_range(0.1..0.6) * sz, rng.random_range(0.1..0.6) * sz);
                Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
            } else {
                Shape::Disc {
                    cy: rng.random_range(0.0..sz),
                    cx: rng.random_range(0.0..sz),
                    r: rng.random_range(0.05..0.35) * sz,
                }
            };
            (shape, color(&mut rng))
        })
        .collect();
    let (ga_s, ga_c) = grad_angle.sin_cos();
    ImagePlane::from_fn(size, size, ColorSpace::Rgb, |y, x, c| {
        let (yf, xf) = (y as f64, x as f64);
        let t = (((yf * ga_s + xf * ga_c) / sz) * 0.5 + 0.5).clamp(0.0, 1.0);
        let mut v = base[0][c] * (1.0 - t) + base[1][c] * t;
        for (freq, angle, phase, amp, col) in &gratings {
            let u = yf * angle.sin() + xf * angle.cos();
            v += amp * (col[c] - 0.5) * 2.0 * (freq * u + phase).sin();
        }
        for (shape, col) in &shapes {
            let inside = match *shape {
                Shape::Rect { y0, x0, y1, x1 } => yf >= y0 && yf < y1 && xf >= x0 && xf < x1,
                Shape::Disc { cy, cx, r } => (yf - cy).powi(2) + (xf - cx).powi(2) <= r * r,
            };
            if inside {
                v = 0.25 * v + 0.75 * col[c];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// Sorted list of `*.png` files in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| DanError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DanError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(DanError::InvalidArgument(format!("no PNG images in {}", dir.display())));
    }
    Ok(out)
}

/// One line of an evaluation-set manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// LR image path relative to the set directory.
    pub lr: String,
    /// Cropped HR image path relative to the set directory.
    pub hr: String,
    /// Index into `kernels.bkrn`.
    pub kernel: usize,
    pub scale: usize,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const KERNELS_FILE: &str = "kernels.bkrn";

/// Degrades every HR image in `hr_dir` with every kernel and writes the
/// LR images, the cropped HR references, the kernel container, and a
/// JSON-lines manifest into `out_dir`.
pub fn build_eval_set(
    hr_dir: impl AsRef<Path>,
    spec: &DegradationSpec,
    kernels: &[BlurKernel],
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<Vec<ManifestRecord>> {
    spec.validate()?;
    if kernels.is_empty() {
        return Err(DanError::InvalidArgument("no kernels to degrade with".into()));
    }
    let out = out_dir.as_ref();
    let s = spec.scale;
    for sub in ["lr", "hr"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| DanError::io(out.join(sub), e))?;
    }
    let sources = list_pngs(hr_dir.as_ref())?;
    let mut records = Vec::new();
    for (i, path) in sources.iter().enumerate() {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let hr = load_png(path)?.crop_to_multiple(s)?;
        let hr_rel = format!("hr/{stem}.png");
        save_png(out.join(&hr_rel), &hr)?;
        let lrs = kernels
            .par_iter()
            .enumerate()
            .map(|(j, k)| {
                let noise = NoiseSpec {
                    sigma: spec.noise_sigma,
                    seed: sample_seed(seed, (i * kernels.len() + j) as u64),
                };
                degrade(&hr, k, s, &noise)
            })
            .collect::<Result<Vec<_>>>()?;
        for (j, lr) in lrs.iter().enumerate() {
            let lr_rel = format!("lr/{stem}_k{j}.png");
            save_png(out.join(&lr_rel), lr)?;
            records.push(ManifestRecord {
                lr: lr_rel,
                hr: hr_rel.clone(),
                kernel: j,
                scale: s,
            });
        }
    }
    save_kernels(out.join(KERNELS_FILE), kernels)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("plain record"));
        text.push('\n');
    }
    let mpath = out.join(MANIFEST_FILE);
    let mut f = fs::File::create(&mpath).map_err(|e| DanError::io(&mpath, e))?;
    f.write_all(text.as_bytes()).map_err(|e| DanError::io(&mpath, e))?;
    Ok(records)
}

/// An evaluation image with its reference and (optionally) its GT kernel.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub name: String,
    pub lr: ImagePlane,
    pub hr: ImagePlane,
    pub kernel: Option<BlurKernel>,
}

/// A loaded or synthesized evaluation set.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub scale: usize,
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    /// Loads a directory written by [`build_eval_set`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| DanError::io(&mpath, e))?;
        let kernels = load_kernels(dir.join(KERNELS_FILE))?;
        let mut items = Vec::new();
        let mut scale = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| DanError::Format(format!("{}:{}: {e}", mpath.display(), n + 1)))?;
            if *scale.get_or_insert(r.scale) != r.scale {
                return Err(DanError::Format(format!("{}: mixed scales", mpath.display())));
            }
            let kernel = kernels.get(r.kernel).cloned().ok_or_else(|| {
                DanError::Format(format!("{}:{}: kernel index {} out of range", mpath.display(), n + 1, r.kernel))
            })?;
            items.push(EvalItem {
                name: Path::new(&r.lr).file_stem().and_then(|s| s.to_str()).unwrap_or("item").to_string(),
                lr: load_png(dir.join(&r.lr))?,
                hr: load_png(dir.join(&r.hr))?,
                kernel: Some(kernel),
            });
        }
        let scale = scale.ok_or_else(|| DanError::Format(format!("{}: empty manifest", mpath.display())))?;
        Ok(EvalSet { scale, items })
    }

    /// Held-out synthetic pairs drawn from `pool` with seeds disjoint from
    /// training (`sample_seed(seed, i)` for a distinct `seed`).
    pub fn synthetic(pool: &PatchPool, spec: &DegradationSpec, basis: &PcaBasis, count: usize, seed: u64) -> Result<Self> {
        let samples = pool.batch(spec, basis, seed, 0, count)?;
        let items = samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| EvalItem {
                name: format!("synthetic_{i:03}"),
                lr: s.lr,
                hr: s.hr,
                kernel: Some(s.kernel),
            })
            .collect();
        Ok(EvalSet { scale: spec.scale, items })
    }

    /// LR PNGs of a directory without references (inference only).
    pub fn lr_only(dir: impl AsRef<Path>) -> Result<Vec<(String, ImagePlane)>> {
        list_pngs(dir.as_ref())?
            .into_iter()
            .map(|p| {
                let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
                Ok((name, load_png(&p)?))
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::downsample;
    use crate::kernels::{dirac_kernel, fit_family_basis, gaussian8};

    fn basis(size: usize) -> PcaBasis {
        fit_family_basis(&KernelFamilySpec::isotropic(size, 0.2, 2.0), 200, 10, 2).unwrap()
    }

    fn toy_spec() -> DegradationSpec {
        DegradationSpec {
            lr_patch: 8,
            ..DegradationSpec::new(2, KernelFamilySpec::isotropic(11, 0.2, 2.0))
        }
    }

    #[test]
    fn synth_pair_crops_aligned_windows() {
        let spec = toy_spec();
        let b = basis(11);
        let patch = procedural_patch(40, 1).unwrap();
        let s = synth_pair(&patch, &spec, &b, 17).unwrap();
        assert_eq!(s.lr.shape(), (8, 8, 3));
        assert_eq!(s.hr.shape(), (16, 16, 3));
        let (top, left) = s.offset;
        assert_eq!(s.hr.get(0, 0, 1), patch.get(2 * top, 2 * left, 1));
        assert!(s.verify(&patch, &spec, &b).unwrap());
        assert!(synth_pair(&procedural_patch(15, 1).unwrap(), &spec, &b, 17).is_err());
    }

    #[test]
    fn noise_free_lr_matches_degraded_hr_away_from_the_border() {
        let spec = toy_spec();
        let b = basis(11);
        let patch = procedural_patch(48, 3).unwrap();
        let s = synth_pair(&patch, &spec, &b, 5).unwrap();
        let again = degrade(&s.hr, &s.kernel, 2, &NoiseSpec::none()).unwrap();
        // radius 5 at ×2 reaches 3 LR pixels into the crop
        for y in 3..5 {
            for x in 3..5 {
                for c in 0..3 {
                    assert_eq!(again.get(y, x, c).to_bits(), s.lr.get(y, x, c).to_bits());
                }
            }
        }
    }

    #[test]
    fn batches_are_reproducible_and_seeds_differ() {
        let spec = toy_spec();
        let b = basis(11);
        let pool = PatchPool::procedural(4, 24, 9).unwrap();
        let a = pool.batch(&spec, &b, 1, 3, 4).unwrap();
        let c = pool.batch(&spec, &b, 1, 3, 4).unwrap();
        assert!(a.iter().zip(&c).all(|(x, y)| x.lr == y.lr && x.kernel == y.kernel));
        let seeds: std::collections::HashSet<u64> = a.iter().map(|s| s.seed).collect();
        assert_eq!(seeds.len(), 4);
        assert_ne!(a[0].kernel, a[1].kernel);
    }

    #[test]
    fn tiling_uses_stride_and_falls_back_to_center_square() {
        let img = procedural_patch(500, 1).unwrap();
        assert_eq!(tile_image(&img, 256, 192).unwrap().len(), 4);
        let small = ImagePlane::filled(100, 60, ColorSpace::Rgb, 0.3).unwrap();
        let t = tile_image(&small, 256, 192).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].shape(), (60, 60, 3));
    }

    #[test]
    fn eval_set_with_dirac_is_plain_subsampling_and_reproducible() {
        let hr_dir = tempfile::tempdir().unwrap();
        for i in 0..2 {
            save_png(hr_dir.path().join(format!("img{i}.png")), &procedural_patch(30 + i, i as u64).unwrap()).unwrap();
        }
        let spec = DegradationSpec::setting1(4).unwrap();
        let mut kernels = gaussian8(4).unwrap();
        kernels.push(dirac_kernel(21).unwrap());
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        let r1 = build_eval_set(hr_dir.path(), &spec, &kernels, out1.path(), 7).unwrap();
        build_eval_set(hr_dir.path(), &spec, &kernels, out2.path(), 7).unwrap();
        assert_eq!(r1.len(), 18);
        for f in [MANIFEST_FILE, KERNELS_FILE, "lr/img1_k3.png"] {
            assert_eq!(fs::read(out1.path().join(f)).unwrap(), fs::read(out2.path().join(f)).unwrap());
        }
        let set = EvalSet::load(out1.path()).unwrap();
        let dirac = set.items.iter().find(|it| it.name == "img0_k8").unwrap();
        assert_eq!(dirac.lr, downsample(&dirac.hr, 4).unwrap());
        assert_eq!(set.scale, 4);
    }
}
