//! Synthetic piecewise-constant images, Gaussian corruption and patch
//! sampling.
//!
//! Noise levels are given on the 0–255 intensity scale (`sigma255`) and
//! divided by 255 internally; pixel math is on `[0, 1]`.

use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Grayscale image with every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGray {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageGray {
            height,
            width,
            pixels,
        })
    }

    /// Clamps an arbitrary single-channel tensor into an image.
    pub fn from_tensor_clamped(t: &Tensor<f64>) -> Self {
        let [_, _, h, w] = t.shape();
        ImageGray {
            height: h,
            width: w,
            pixels: t.data()[..h * w]
                .iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect(),
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        ImageGray {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    /// As a `(1, 1, h, w)` tensor.
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec([1, 1, self.height, self.width], self.pixels.clone()).expect("shape")
    }
}

/// A clean image and its Gaussian-corrupted observation. The noisy image is
/// not clamped, so the noise stays Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyPair {
    pub clean: ImageGray,
    pub noisy: Tensor<f64>,
    pub sigma255: f64,
}

/// Random flips and quarter-turns applied to sampled patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Augment {
    pub const NONE: Augment = Augment {
        hflip: false,
        vflip: false,
        rot90: false,
    };
    pub const ALL: Augment = Augment {
        hflip: true,
        vflip: true,
        rot90: true,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub patches_per_step: usize,
    pub augment: Augment,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_size: 50,
            patches_per_step: 256,
            augment: Augment::NONE,
        }
    }
}

/// Location and orientation of one sampled patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

/// Piecewise-constant image: a `U[0,1]` background overpainted, in draw
/// order, by `K ~ U{shapes}` regions that are each either a half-plane
/// (random point, orientation `U[0, 2π)`) or a disc (centre in the image,
/// radius `U[size/16, size/3]`), with intensities `U[0,1]`.
pub fn gen_piecewise_constant(
    stream: &mut RngStream,
    size: usize,
    shapes: RangeInclusive<usize>,
) -> Result<ImageGray> {
    if size < 16 {
        return Err(Error::invalid(format!("image size must be >= 16, got {size}")));
    }
    if shapes.is_empty() {
        return Err(Error::invalid("empty shape-count range"));
    }
    let s = size as f64;
    let mut pixels = vec![stream.uniform(); size * size];
    let k = stream.int_inclusive(*shapes.start(), *shapes.end());
    for _ in 0..k {
        let value = stream.uniform();
        if stream.bernoulli(0.5) {
            let (px, py) = (stream.uniform() * s, stream.uniform() * s);
            let theta = stream.uniform() * 2.0 * std::f64::consts::PI;
            let (c, sn) = (libm::cos(theta), libm::sin(theta));
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f64 + 0.5 - px, y as f64 + 0.5 - py);
                    if fx * c + fy * sn > 0.0 {
                        pixels[y * size + x] = value;
                    }
                }
            }
        } else {
            let (cx, cy) = (stream.uniform() * s, stream.uniform() * s);
            let r = stream.uniform_range(s / 16.0, s / 3.0);
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if fx * fx + fy * fy <= r * r {
                        pixels[y * size + x] = value;
                    }
                }
            }
        }
    }
    ImageGray::new(size, size, pixels)
}

/// `count` images where image `i` depends only on `(seed, i)`.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    size: usize,
    shapes: RangeInclusive<usize>,
) -> Result<Vec<ImageGray>> {
    let root = RngStream::new(seed);
    (0..count)
        .map(|i| gen_piecewise_constant(&mut root.fork(i as u64), size, shapes.clone()))
        .collect()
}

/// Adds `N(0, (sigma255/255)²)` noise to every pixel, without clamping.
pub fn add_gaussian_noise(img: &ImageGray, sigma255: f64, stream: &mut RngStream) -> Result<NoisyPair> {
    if !(sigma255 >= 0.0) || !sigma255.is_finite() {
        return Err(Error::invalid(format!("sigma255 must be >= 0, got {sigma255}")));
    }
    let clean = img.to_tensor();
    let noise = stream.gaussian(clean.shape(), sigma255 / 255.0);
    let noisy = clean.add(&noise)?;
    Ok(NoisyPair {
        clean: img.clone(),
        noisy,
        sigma255,
    })
}

/// Draws `count` patch locations (uniform corners, with replacement) and
/// per-patch augmentation choices.
pub fn sample_patch_specs(
    height: usize,
    width: usize,
    patch_size: usize,
    augment: Augment,
    count: usize,
    stream: &mut RngStream,
) -> Result<Vec<PatchSpec>> {
    if patch_size == 0 || patch_size > height || patch_size > width {
        return Err(Error::invalid(format!(
            "patch size {patch_size} does not fit a {height}x{width} image"
        )));
    }
    Ok((0..count)
        .map(|_| {
            let top = stream.below((height - patch_size + 1) as u64) as usize;
            let left = stream.below((width - patch_size + 1) as u64) as usize;
            PatchSpec {
                top,
                left,
                hflip: augment.hflip && stream.bernoulli(0.5),
                vflip: augment.vflip && stream.bernoulli(0.5),
                rot90: augment.rot90 && stream.bernoulli(0.5),
            }
        })
        .collect())
}

/// Cuts the patches described by `specs` out of sample 0 of `source`
/// (shape `(_, 1, h, w)`), stacked as `(specs.len(), 1, p, p)`.
pub fn extract_patches(source: &Tensor<f64>, specs: &[PatchSpec], patch_size: usize) -> Result<Tensor<f64>> {
    let [_, c, h, w] = source.shape();
    if c != 1 {
        return Err(Error::invalid("patch extraction expects one channel"));
    }
    let p = patch_size;
    let plane = source.plane(0, 0);
    let mut data = Vec::with_capacity(specs.len() * p * p);
    for sp in specs {
        if sp.top + p > h || sp.left + p > w {
            return Err(Error::invalid("patch outside image"));
        }
        for r in 0..p {
            for col in 0..p {
                // output (r, col) reads the transformed source position
                let (mut y, mut x) = if sp.rot90 { (p - 1 - col, r) } else { (r, col) };
                if sp.vflip {
                    y = p - 1 - y;
                }
                if sp.hflip {
                    x = p - 1 - x;
                }
                data.push(plane[(sp.top + y) * w + sp.left + x]);
            }
        }
    }
    Tensor::from_vec([specs.len(), 1, p, p], data)
}

/// Samples `cfg.patches_per_step` patches from `source`.
pub fn sample_patches(source: &Tensor<f64>, cfg: &PatchConfig, stream: &mut RngStream) -> Result<Tensor<f64>> {
    let specs = sample_patch_specs(
        source.height(),
        source.width(),
        cfg.patch_size,
        cfg.augment,
        cfg.patches_per_step,
        stream,
    )?;
    extract_patches(source, &specs, cfg.patch_size)
}
