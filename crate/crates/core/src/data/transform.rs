//! Training augmentation and evaluation preprocessing.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Image, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [123.68, 116.779, 103.939];
pub const IMAGENET_STD: [f32; 3] = [58.393, 57.12, 57.375];

/// Eigen-decomposition of the RGB pixel covariance. `eigvec[i][j]` is
/// component `i` of eigenvector `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaBasis {
    pub eigval: [f32; 3],
    pub eigvec: [[f32; 3]; 3],
}

impl Default for PcaBasis {
    fn default() -> Self {
        Self {
            eigval: [55.46, 4.794, 1.148],
            eigvec: [
                [-0.5675, 0.7192, 0.4009],
                [-0.5808, -0.0045, -0.8140],
                [-0.5836, -0.6948, 0.4203],
            ],
        }
    }
}

impl PcaBasis {
    /// RGB offset `eigvec * (coeffs * eigval)`.
    pub fn offset(&self, coeffs: [f32; 3]) -> [f32; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..3)
                .map(|j| self.eigvec[i][j] * coeffs[j] * self.eigval[j])
                .sum();
        }
        out
    }

    /// Estimates the basis from at most `max_pixels` evenly strided pixels.
    pub fn estimate(ds: &Dataset, max_pixels: usize) -> Result<Self> {
        let total: usize = ds
            .samples
            .iter()
            .map(|s| s.image.height * s.image.width)
            .sum();
        if total == 0 {
            return Err(Error::InvalidArgument(
                "cannot estimate color PCA from an empty dataset".into(),
            ));
        }
        let stride = total.div_ceil(max_pixels.max(1)).max(1);
        let mut sum = [0.0f64; 3];
        let mut outer = [[0.0f64; 3]; 3];
        let mut n = 0usize;
        let mut k = 0usize;
        for s in &ds.samples {
            for px in s.image.data.chunks_exact(3) {
                if k.is_multiple_of(stride) {
                    for i in 0..3 {
                        sum[i] += px[i] as f64;
                        for j in 0..3 {
                            outer[i][j] += px[i] as f64 * px[j] as f64;
                        }
                    }
                    n += 1;
                }
                k += 1;
            }
        }
        let nf = n as f64;
        let cov = Matrix3::from_fn(|i, j| outer[i][j] / nf - sum[i] / nf * sum[j] / nf);
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = Self {
            eigval: [0.0; 3],
            eigvec: [[0.0; 3]; 3],
        };
        for (j, &src) in order.iter().enumerate() {
            // eigenvalues of the pixel covariance are variances; the noise uses standard deviations
            basis.eigval[j] = eig.eigenvalues[src].max(0.0).sqrt() as f32;
            for i in 0..3 {
                basis.eigvec[i][j] = eig.eigenvectors[(i, src)] as f32;
            }
        }
        Ok(basis)
    }

    /// Reads the cached basis at `path`, computing and writing it if absent.
    pub fn load_or_estimate(path: &Path, ds: &Dataset, max_pixels: usize) -> Result<Self> {
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Ok(serde_json::from_str(&text)?);
        }
        let basis = Self::estimate(ds, max_pixels)?;
        std::fs::write(path, serde_json::to_string_pretty(&basis)?)
            .map_err(|e| Error::io(path, e))?;
        Ok(basis)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CropMode {
    /// Random area fraction and aspect ratio, resized to the output size.
    RandomResized { area: [f64; 2], ratio: [f64; 2] },
    /// Zero-pad by `padding` on every side and take a random window.
    Pad { padding: usize },
    /// Resize the whole image.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop: CropMode,
    pub size: usize,
    pub flip_prob: f64,
    /// Range for brightness, saturation and hue coefficients; `None` disables.
    pub jitter: Option<[f32; 2]>,
    /// Standard deviation of the PCA noise coefficients; zero disables.
    pub pca_std: f32,
    #[serde(default)]
    pub pca: PcaBasis,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl AugmentConfig {
    pub fn imagenet(size: usize) -> Self {
        Self {
            crop: CropMode::RandomResized {
                area: [0.08, 1.0],
                ratio: [3.0 / 4.0, 4.0 / 3.0],
            },
            size,
            flip_prob: 0.5,
            jitter: Some([0.6, 1.4]),
            pca_std: 0.1,
            pca: PcaBasis::default(),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Small-image recipe: 4-pixel pad crop, flip, normalize.
    pub fn desk(size: usize) -> Self {
        Self {
            crop: CropMode::Pad { padding: 4 },
            size,
            flip_prob: 0.5,
            jitter: None,
            pca_std: 0.0,
            pca: PcaBasis::default(),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// No augmentation at all; only resize and normalize.
    pub fn identity(size: usize) -> Self {
        Self {
            crop: CropMode::Full,
            size,
            flip_prob: 0.0,
            jitter: None,
            pca_std: 0.0,
            pca: PcaBasis::default(),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if let CropMode::RandomResized { area, ratio } = self.crop {
            if !(area[0] > 0.0 && area[0] <= area[1] && area[1] <= 1.0) {
                return bad("area range must satisfy 0 < lo <= hi <= 1");
            }
            if !(ratio[0] > 0.0 && ratio[0] <= ratio[1]) {
                return bad("aspect-ratio range must satisfy 0 < lo <= hi");
            }
        }
        if self.size == 0 {
            return bad("output size must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip probability must lie in [0, 1]");
        }
        if let Some([lo, hi]) = self.jitter {
            if !(lo >= 0.0 && lo <= hi) {
                return bad("jitter range must satisfy 0 <= lo <= hi");
            }
        }
        if self.pca_std.is_nan() || self.pca_std < 0.0 {
            return bad("pca_std must be non-negative");
        }
        if self.std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return bad("normalization std must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Resize so the shorter edge has this length, keeping aspect ratio.
    pub resize_shorter: Option<usize>,
    /// Center crop side.
    pub crop: Option<usize>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl EvalConfig {
    pub fn imagenet() -> Self {
        Self {
            resize_shorter: Some(256),
            crop: Some(224),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn desk() -> Self {
        Self {
            resize_shorter: None,
            crop: None,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// A crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Samples a crop with area fraction and aspect ratio (w/h) drawn uniformly
/// from the given ranges. After ten rejected draws, falls back to the largest
/// centered crop whose ratio lies in range.
pub fn sample_crop(
    height: usize,
    width: usize,
    area: [f64; 2],
    ratio: [f64; 2],
    rng: &mut impl Rng,
) -> Rect {
    let total = (height * width) as f64;
    for _ in 0..10 {
        let target = total * rng.random_range(area[0]..=area[1]);
        let r = rng.random_range(ratio[0]..=ratio[1]);
        let w = (target * r).sqrt().round() as usize;
        let h = (target / r).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            return Rect { y, x, h, w };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < ratio[0] {
        (
            ((width as f64 / ratio[0]).round() as usize).clamp(1, height),
            width,
        )
    } else if in_ratio > ratio[1] {
        (
            height,
            ((height as f64 * ratio[1]).round() as usize).clamp(1, width),
        )
    } else {
        (height, width)
    };
    Rect {
        y: (height - h) / 2,
        x: (width - w) / 2,
        h,
        w,
    }
}

/// Bilinear resampling of `rect` to `out_h x out_w`, half-pixel centers.
pub fn crop_resize(img: &Image, rect: Rect, out_h: usize, out_w: usize) -> Image {
    if rect.h == out_h && rect.w == out_w {
        let mut data = Vec::with_capacity(out_h * out_w * 3);
        for y in rect.y..rect.y + rect.h {
            let row = (y * img.width + rect.x) * 3;
            data.extend_from_slice(&img.data[row..row + rect.w * 3]);
        }
        return Image {
            height: out_h,
            width: out_w,
            data,
        };
    }
    let sy = rect.h as f64 / out_h as f64;
    let sx = rect.w as f64 / out_w as f64;
    let axis = |o: usize, scale: f64, len: usize| {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|o| axis(o, sx, rect.w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, sy, rect.h);
        for &(x0, x1, fx) in &cols {
            let p = |y: usize, x: usize| img.pixel(rect.y + y, rect.x + x);
            let (a, b, c, d) = (p(y0, x0), p(y0, x1), p(y1, x0), p(y1, x1));
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bot = c[ch] + (d[ch] - c[ch]) * fx;
                data.push(top + (bot - top) * fy);
            }
        }
    }
    Image {
        height: out_h,
        width: out_w,
        data,
    }
}

pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    let full = Rect {
        y: 0,
        x: 0,
        h: img.height,
        w: img.width,
    };
    crop_resize(img, full, out_h, out_w)
}

/// Extents after scaling the shorter edge to `shorter`, rounded half away from zero.
pub fn shorter_edge_extent(height: usize, width: usize, shorter: usize) -> (usize, usize) {
    let scale = shorter as f64 / height.min(width) as f64;
    if height <= width {
        (shorter, ((width as f64 * scale).round() as usize).max(1))
    } else {
        (((height as f64 * scale).round() as usize).max(1), shorter)
    }
}

pub fn center_rect(height: usize, width: usize, side: usize) -> Rect {
    let h = side.min(height);
    let w = side.min(width);
    Rect {
        y: (height - h) / 2,
        x: (width - w) / 2,
        h,
        w,
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            data.extend(img.pixel(y, x));
        }
    }
    Image {
        height: img.height,
        width: img.width,
        data,
    }
}

fn pad_crop(img: &Image, padding: usize, size: usize, rng: &mut impl Rng) -> Image {
    let ph = img.height + 2 * padding;
    let pw = img.width + 2 * padding;
    let (oh, ow) = (size.min(ph), size.min(pw));
    let y0 = rng.random_range(0..=ph - oh);
    let x0 = rng.random_range(0..=pw - ow);
    let mut out = Image::filled(oh, ow, [0.0; 3]);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = (
                (y0 + y) as isize - padding as isize,
                (x0 + x) as isize - padding as isize,
            );
            if sy >= 0 && sx >= 0 && (sy as usize) < img.height && (sx as usize) < img.width {
                let i = (y * ow + x) * 3;
                out.data[i..i + 3].copy_from_slice(&img.pixel(sy as usize, sx as usize));
            }
        }
    }
    if (oh, ow) == (size, size) {
        out
    } else {
        resize(&out, size, size)
    }
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn mat3_mul(a: &[[f32; 3]; 3], b: &[[f32; 3]; 3]) -> [[f32; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// RGB-to-RGB matrix rotating chroma in YIQ space by `angle` radians.
pub fn hue_matrix(angle: f32) -> [[f32; 3]; 3] {
    const TO_YIQ: [[f32; 3]; 3] = [
        [0.299, 0.587, 0.114],
        [0.596, -0.274, -0.321],
        [0.211, -0.523, 0.311],
    ];
    const FROM_YIQ: [[f32; 3]; 3] = [
        [1.0, 0.956, 0.621],
        [1.0, -0.272, -0.647],
        [1.0, -1.107, 1.705],
    ];
    let (w, u) = angle.sin_cos();
    let rot = [[1.0, 0.0, 0.0], [0.0, u, -w], [0.0, w, u]];
    mat3_mul(&mat3_mul(&FROM_YIQ, &rot), &TO_YIQ)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Jitter {
    Brightness,
    Saturation,
    Hue,
}

fn apply_jitter(img: &mut Image, kind: Jitter, c: f32) {
    match kind {
        Jitter::Brightness => img.data.iter_mut().for_each(|v| *v *= c),
        Jitter::Saturation => {
            for px in img.data.chunks_exact_mut(3) {
                let gray: f32 = (0..3).map(|i| LUMA[i] * px[i]).sum();
                px.iter_mut().for_each(|v| *v = gray + c * (*v - gray));
            }
        }
        Jitter::Hue => {
            let m = hue_matrix((c - 1.0) * std::f32::consts::PI);
            for px in img.data.chunks_exact_mut(3) {
                let p = [px[0], px[1], px[2]];
                for (i, v) in px.iter_mut().enumerate() {
                    *v = (0..3).map(|k| m[i][k] * p[k]).sum();
                }
            }
        }
    }
}

/// HWC image to normalized `(3, H, W)` tensor.
pub fn normalize(img: &Image, mean: [f32; 3], std: [f32; 3]) -> Tensor {
    let plane = img.height * img.width;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = (px[c] - mean[c]) / std[c];
        }
    }
    Tensor::new(vec![3, img.height, img.width], data).expect("extent matches buffer")
}

pub fn train_transform(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let img = &sample.image;
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidShape {
            shape: vec![img.height, img.width, 3],
            reason: "empty image".into(),
        });
    }
    let mut out = match cfg.crop {
        CropMode::RandomResized { area, ratio } => {
            let r = sample_crop(img.height, img.width, area, ratio, rng);
            crop_resize(img, r, cfg.size, cfg.size)
        }
        CropMode::Pad { padding } => pad_crop(img, padding, cfg.size, rng),
        CropMode::Full => resize(img, cfg.size, cfg.size),
    };
    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        out = flip_horizontal(&out);
    }
    if let Some([lo, hi]) = cfg.jitter {
        let mut order = [Jitter::Brightness, Jitter::Saturation, Jitter::Hue];
        order.shuffle(rng);
        for kind in order {
            let c = rng.random_range(lo..=hi);
            apply_jitter(&mut out, kind, c);
        }
    }
    if cfg.pca_std > 0.0 {
        let dist = Normal::new(0.0f32, cfg.pca_std).map_err(|e| Error::Config(e.to_string()))?;
        let coeffs = [dist.sample(rng), dist.sample(rng), dist.sample(rng)];
        let off = cfg.pca.offset(coeffs);
        for px in out.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] += off[c];
            }
        }
    }
    Ok(normalize(&out, cfg.mean, cfg.std))
}

pub fn eval_transform(sample: &Sample, cfg: &EvalConfig) -> Result<Tensor> {
    let mut img = sample.image.clone();
    if let Some(shorter) = cfg.resize_shorter {
        let (h, w) = shorter_edge_extent(img.height, img.width, shorter);
        if (h, w) != (img.height, img.width) {
            img = resize(&img, h, w);
        }
    }
    if let Some(side) = cfg.crop {
        img = crop_resize(
            &img,
            center_rect(img.height, img.width, side),
            side.min(img.height),
            side.min(img.width),
        );
        if (img.height, img.width) != (side, side) {
            img = resize(&img, side, side);
        }
    }
    Ok(normalize(&img, cfg.mean, cfg.std))
}

/// Per-channel pixel mean and standard deviation over the dataset.
pub fn channel_stats(ds: &Dataset) -> ([f32; 3], [f32; 3]) {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for s in &ds.samples {
        for px in s.image.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
                sq[c] += (px[c] as f64).powi(2);
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean = sum.map(|s| s / n);
    let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c] * mean[c]).max(1e-12).sqrt() as f32);
    (mean.map(|m| m as f32), std)
}

/// Stacks equally shaped `(3, S, S)` tensors into `(N, 3, S, S)`.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack an empty batch".into()))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}
