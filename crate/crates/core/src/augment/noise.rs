//! Scan-noise transforms on 8-bit grayscale pages. Each transform keeps the
//! image size and clamps to the 8-bit range. Random transforms draw from their
//! own stream keyed by `NoiseParams::seed`.

use image::GrayImage;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

const GAUSS_STREAM: u64 = 1;
const SALT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStage {
    Gaussian,
    SaltPepper,
    Blur,
    Contrast,
}

/// The canonical order: Gaussian noise, salt-and-pepper, blur, contrast.
pub const DEFAULT_STAGES: [NoiseStage; 4] = [
    NoiseStage::Gaussian,
    NoiseStage::SaltPepper,
    NoiseStage::Blur,
    NoiseStage::Contrast,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Range the per-image noise std-dev is drawn from, in intensity units.
    pub gaussian_noise_scale: (f64, f64),
    pub salt_pepper_p: f64,
    pub blur_sigma: f64,
    pub contrast_alpha: f64,
    pub stages: Vec<NoiseStage>,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            gaussian_noise_scale: (0.0, 12.75),
            salt_pepper_p: 0.9,
            blur_sigma: 0.5,
            contrast_alpha: 1.0,
            stages: DEFAULT_STAGES.to_vec(),
            seed: 0,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.gaussian_noise_scale;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("gaussian noise range {lo}..{hi} is invalid")));
        }
        if !(0.0..=1.0).contains(&self.salt_pepper_p) {
            return Err(Error::Config(format!(
                "salt_pepper_p {} outside [0, 1]",
                self.salt_pepper_p
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config(format!("blur sigma {} must be >= 0", self.blur_sigma)));
        }
        if !(self.contrast_alpha > 0.0 && self.contrast_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "contrast alpha {} must be > 0",
                self.contrast_alpha
            )));
        }
        Ok(())
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `out = clamp(in + n)`, `n ~ N(0, sigma^2)` per pixel, sigma drawn once per
/// image uniformly from the configured range.
pub fn additive_gaussian_noise(img: &GrayImage, params: &NoiseParams) -> GrayImage {
    let mut rng = rng_from(params.seed, &[GAUSS_STREAM]);
    let (lo, hi) = params.gaussian_noise_scale;
    let sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    gaussian_noise_with_sigma(img, sigma, &mut rng)
}

pub fn gaussian_noise_with_sigma(img: &GrayImage, sigma: f64, rng: &mut Rng) -> GrayImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let mut out = img.clone();
    for p in out.pixels_mut() {
        p.0[0] = clamp_u8(p.0[0] as f64 + normal.sample(rng));
    }
    out
}

/// Each pixel independently, with probability `p`, becomes 0 or 255 (fair coin).
pub fn salt_and_pepper(img: &GrayImage, params: &NoiseParams) -> GrayImage {
    let p = params.salt_pepper_p;
    if p == 0.0 {
        return img.clone();
    }
    let mut rng = rng_from(params.seed, &[SALT_STREAM]);
    let mut out = img.clone();
    for px in out.pixels_mut() {
        if rng.random::<f64>() < p {
            px.0[0] = if rng.random::<bool>() { 255 } else { 0 };
        }
    }
    out
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

/// Reflect an index into `0..n` without repeating the edge sample.
fn reflect(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur of a row-major `width x height` plane.
pub fn gaussian_blur_plane(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * plane[y * width + reflect(x as i64 + t as i64 - r, width as i64)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[reflect(y as i64 + t as i64 - r, height as i64) * width + x])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(img: &GrayImage, params: &NoiseParams) -> GrayImage {
    if params.blur_sigma == 0.0 {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    let plane: Vec<f64> = img.as_raw().iter().map(|&v| v as f64).collect();
    let blurred = gaussian_blur_plane(&plane, w as usize, h as usize, params.blur_sigma);
    GrayImage::from_raw(w, h, blurred.into_iter().map(clamp_u8).collect()).expect("plane size matches image")
}

/// `out = clamp(127 + alpha * (in - 127))`.
pub fn linear_contrast(img: &GrayImage, params: &NoiseParams) -> GrayImage {
    let a = params.contrast_alpha;
    let mut out = img.clone();
    for p in out.pixels_mut() {
        p.0[0] = clamp_u8(127.0 + a * (p.0[0] as f64 - 127.0));
    }
    out
}

/// Apply the configured stages in order.
pub fn apply_noise_pipeline(img: &GrayImage, params: &NoiseParams) -> Result<GrayImage> {
    params.validate()?;
    let mut out = img.clone();
    for stage in &params.stages {
        out = match stage {
            NoiseStage::Gaussian => additive_gaussian_noise(&out, params),
            NoiseStage::SaltPepper => salt_and_pepper(&out, params),
            NoiseStage::Blur => gaussian_blur(&out, params),
            NoiseStage::Contrast => linear_contrast(&out, params),
        };
    }
    Ok(out)
}
