//! Synthetic image corruption: Gaussian, uniform, speckle and Poisson noise
//! with independent shape/background intensities per channel.
//!
//! Noise is applied in the raw intensity scale and the result is *not*
//! clipped; the subsequent min-max normalization absorbs the extended range.
//! Every pixel draws from its own counter-based RNG substream, so parallel
//! and sequential application produce the same image.

use crate::exec;
use crate::image_field::ImageField;
use crate::rng::RngStream;
use crate::{KinsegError, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Uniform,
    Speckle,
    Poisson,
}

/// Noise family plus per-channel intensities for the shape region (`true`
/// in `region_mask`) and the background.
///
/// Intensity meaning by family: Gaussian and speckle take the variance
/// `sigma^2`, uniform takes the half-width `u` of `U(-u, u)`, Poisson takes
/// the scale `mu` of `I -> mu * Poisson(I / mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub intensity_shape: Vec<f64>,
    pub intensity_background: Vec<f64>,
    /// `true` marks the shape region; length `width * height`.
    pub region_mask: Vec<bool>,
}

impl NoiseSpec {
    /// Uniform intensity per region, replicated across `channels`.
    pub fn uniform_intensity(
        family: NoiseFamily,
        shape: f64,
        background: f64,
        channels: usize,
        region_mask: Vec<bool>,
    ) -> Self {
        Self {
            family,
            intensity_shape: vec![shape; channels],
            intensity_background: vec![background; channels],
            region_mask,
        }
    }

    fn validate(&self, image: &ImageField) -> Result<()> {
        if self.region_mask.len() != image.pixel_count() {
            return Err(KinsegError::Config(format!(
                "region mask has {} entries for {} pixels",
                self.region_mask.len(),
                image.pixel_count()
            )));
        }
        if self.intensity_shape.len() != image.channels
            || self.intensity_background.len() != image.channels
        {
            return Err(KinsegError::Config(
                "noise intensity channel count does not match the image".into(),
            ));
        }
        for &v in self.intensity_shape.iter().chain(&self.intensity_background) {
            if v < 0.0 {
                return Err(KinsegError::Config(format!("negative noise intensity {v}")));
            }
            if self.family == NoiseFamily::Poisson && v <= 0.0 {
                return Err(KinsegError::NonPositivePoissonScale { mu: v });
            }
        }
        Ok(())
    }
}

/// Corrupt an image according to `spec`, deterministically in `rng`.
pub fn apply_noise(image: &ImageField, spec: &NoiseSpec, rng: RngStream) -> Result<ImageField> {
    spec.validate(image)?;
    let mut out = image.clone();
    let channels = image.channels;
    let family = spec.family;
    let width = image.width;
    let values_in = &image.values;
    let mask = &spec.region_mask;
    let shape_int = &spec.intensity_shape;
    let bg_int = &spec.intensity_background;

    exec::par_for_each_chunk(&mut out.values, channels, |pixel, chunk| {
        let mut prng = rng.substream(pixel as u64).rng();
        let intensities = if mask[pixel] { shape_int } else { bg_int };
        let _ = width;
        for ch in 0..channels {
            let raw = values_in[pixel * channels + ch];
            let level = intensities[ch];
            chunk[ch] = match family {
                NoiseFamily::Gaussian => {
                    let n: f64 = prng.sample(StandardNormal);
                    raw + level.sqrt() * n
                }
                NoiseFamily::Uniform => {
                    if level == 0.0 {
                        raw
                    } else {
                        raw + prng.random_range(-level..level)
                    }
                }
                NoiseFamily::Speckle => {
                    let n: f64 = prng.sample(StandardNormal);
                    raw * (1.0 + level.sqrt() * n)
                }
                NoiseFamily::Poisson => {
                    let k = sample_poisson(raw / level, &mut prng);
                    level * k as f64
                }
            };
        }
    });
    Ok(out)
}

/// Switch point between exact inversion sampling and the rounded normal
/// approximation for Poisson rates.
pub const POISSON_NORMAL_SWITCH: f64 = 103.0;

/// Sample `Poisson(rate)` by CDF inversion for small rates and by a rounded
/// `N(rate, rate)` approximation above [`POISSON_NORMAL_SWITCH`].
pub fn sample_poisson<R: Rng>(rate: f64, rng: &mut R) -> u64 {
    debug_assert!(rate >= 0.0 && rate.is_finite());
    if rate == 0.0 {
        return 0;
    }
    if rate < POISSON_NORMAL_SWITCH {
        let u: f64 = rng.random();
        let mut k = 0u64;
        let mut p = (-rate).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= rate / k as f64;
            cdf += p;
            if k > 10_000 {
                break; // numerically exhausted tail
            }
        }
        k
    } else {
        let n: f64 = rng.sample(StandardNormal);
        (rate + rate.sqrt() * n).round().max(0.0) as u64
    }
}
