//! Images, dequantization noise, and the image <-> token layout.

mod manifest;
mod ppm;
mod synth;

pub use manifest::{read_manifest, write_manifest, LABELS_FILE};
pub use ppm::{decode_pnm, encode_pnm, read_ppm, write_ppm};
pub use synth::{synth_dataset, SynthKind};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `H x W x C` image, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image extents must be positive"));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{height}x{width}x{channels} image with {} values",
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamped(&self) -> Image {
        Image {
            pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }
}

/// Image extents plus patch size; fixes the token layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::invalid(format!(
                "patch size {patch} does not divide {height}x{width}"
            )));
        }
        if channels == 0 {
            return Err(Error::invalid("channels must be positive"));
        }
        Ok(PatchGeometry {
            height,
            width,
            channels,
            patch,
        })
    }

    /// Number of tokens `N = (H/p)(W/p)`.
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Token width `d = C p^2`.
    pub fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn dims(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn check(&self, image: &Image) -> Result<()> {
        if image.height != self.height || image.width != self.width || image.channels != self.channels {
            return Err(Error::invalid(format!(
                "image is {}x{}x{}, geometry expects {}x{}x{}",
                image.height, image.width, image.channels, self.height, self.width, self.channels
            )));
        }
        Ok(())
    }
}

/// Annealed dequantization noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub total_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_start: 0.1,
            sigma_end: 0.005,
            total_steps: 20_000,
        }
    }
}

impl NoiseSchedule {
    /// Cosine decay `σ_end + ½(σ_start − σ_end)(1 + cos(π t/T))`.
    pub fn sigma(&self, step: usize) -> Result<f64> {
        noise_sigma(step, self)
    }
}

pub fn noise_sigma(step: usize, schedule: &NoiseSchedule) -> Result<f64> {
    if schedule.total_steps == 0 {
        return Err(Error::invalid("noise schedule needs total_steps > 0"));
    }
    if step > schedule.total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond schedule length {}",
            schedule.total_steps
        )));
    }
    if step == schedule.total_steps {
        return Ok(schedule.sigma_end);
    }
    let t = step as f64 / schedule.total_steps as f64;
    Ok(schedule.sigma_end
        + 0.5 * (schedule.sigma_start - schedule.sigma_end) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Adds i.i.d. `N(0, sigma²)` noise to every pixel.
pub fn dequantize<R: Rng + ?Sized>(image: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let pixels = image
        .pixels
        .iter()
        .map(|&v| {
            let e: f64 = rng.sample(StandardNormal);
            v + sigma * e
        })
        .collect();
    Ok(Image {
        pixels,
        ..image.clone()
    })
}

/// Splits an image into `N x d` tokens: patches in row-major raster order,
/// each flattened as `(dy, dx, channel)`.
pub fn patchify<T: Real>(image: &Image, geom: &PatchGeometry) -> Result<Tensor<T>> {
    geom.check(image)?;
    let p = geom.patch;
    let (gh, gw) = (geom.height / p, geom.width / p);
    let mut out = Vec::with_capacity(geom.dims());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let y = py * p + dy;
                let start = (y * geom.width + px * p) * geom.channels;
                out.extend(
                    image.pixels[start..start + p * geom.channels]
                        .iter()
                        .map(|&v| T::from_f64(v)),
                );
            }
        }
    }
    Tensor::new(&[geom.tokens(), geom.token_dim()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &Tensor<T>, geom: &PatchGeometry) -> Result<Image> {
    if tokens.rows() != geom.tokens() || tokens.cols() != geom.token_dim() {
        return Err(Error::invalid(format!(
            "token shape {:?} does not match geometry ({} x {})",
            tokens.shape(),
            geom.tokens(),
            geom.token_dim()
        )));
    }
    let p = geom.patch;
    let gw = geom.width / p;
    let mut img = Image::zeros(geom.height, geom.width, geom.channels);
    for (t, row) in tokens.data().chunks(geom.token_dim()).enumerate() {
        let (py, px) = (t / gw, t % gw);
        for dy in 0..p {
            let y = py * p + dy;
            let start = (y * geom.width + px * p) * geom.channels;
            for (dst, &v) in img.pixels[start..start + p * geom.channels]
                .iter_mut()
                .zip(&row[dy * p * geom.channels..(dy + 1) * p * geom.channels])
            {
                *dst = v.as_f64();
            }
        }
    }
    Ok(img)
}

/// Stacks the token sequences of several images into `[B*N, d]`.
pub fn patchify_batch<T: Real>(images: &[&Image], geom: &PatchGeometry) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * geom.dims());
    for img in images {
        data.extend(patchify::<T>(img, geom)?.into_data());
    }
    Tensor::new(&[images.len() * geom.tokens(), geom.token_dim()], data)
}

/// Splits `[B*N, d]` back into `B` images.
pub fn unpatchify_batch<T: Real>(tokens: &Tensor<T>, geom: &PatchGeometry) -> Result<Vec<Image>> {
    let n = geom.tokens();
    if tokens.rows() % n != 0 || tokens.cols() != geom.token_dim() {
        return Err(Error::invalid(format!("token shape {:?} is not a batch of {n} tokens", tokens.shape())));
    }
    tokens
        .data()
        .chunks(geom.dims())
        .map(|chunk| unpatchify(&Tensor::new(&[n, geom.token_dim()], chunk.to_vec())?, geom))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = NoiseSchedule {
            total_steps: 1000,
            ..Default::default()
        };
        assert_eq!(s.sigma(0).unwrap(), 0.1);
        assert_eq!(s.sigma(1000).unwrap(), 0.005);
        assert!((s.sigma(500).unwrap() - 0.0525).abs() < 1e-12);
        assert!(s.sigma(1001).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule {
            total_steps: 777,
            ..Default::default()
        };
        let v: Vec<f64> = (0..=777).map(|t| s.sigma(t).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Image::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(dequantize(&img, 0.0, &mut rng).unwrap(), img);
    }

    #[test]
    fn noise_has_requested_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::zeros(1000, 1000, 1);
        let out = dequantize(&img, 0.1, &mut rng).unwrap();
        let n = out.pixels.len() as f64;
        let mean = out.pixels.iter().sum::<f64>() / n;
        let sd = (out.pixels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.1).abs() < 0.001, "sd {sd}");
    }

    #[test]
    fn noise_reproducible_under_seed() {
        let img = Image::zeros(4, 4, 3);
        let a = dequantize(&img, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = dequantize(&img, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn token_counts() {
        let g = PatchGeometry::new(256, 256, 3, 16).unwrap();
        assert_eq!((g.tokens(), g.token_dim()), (256, 768));
        let g = PatchGeometry::new(8, 6, 3, 1).unwrap();
        assert_eq!((g.tokens(), g.token_dim()), (48, 3));
        assert!(PatchGeometry::new(10, 8, 3, 4).is_err());
    }

    #[test]
    fn patch_layout_is_row_major() {
        // 4x4 single-channel image with value = 10*y + x, patch 2.
        let px: Vec<f64> = (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect();
        let img = Image::new(4, 4, 1, px).unwrap();
        let g = PatchGeometry::new(4, 4, 1, 2).unwrap();
        let t = patchify::<f64>(&img, &g).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(t.row(1), &[2.0, 3.0, 12.0, 13.0]);
        assert_eq!(t.row(2), &[20.0, 21.0, 30.0, 31.0]);
    }

    proptest! {
        #[test]
        fn patchify_round_trip(gh in 1usize..4, gw in 1usize..4, p in 1usize..5, c in 1usize..4, seed in 0u64..1000) {
            let g = PatchGeometry::new(gh * p, gw * p, c, p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let px = (0..g.dims()).map(|_| rng.random::<f64>()).collect();
            let img = Image::new(g.height, g.width, c, px).unwrap();
            let t = patchify::<f64>(&img, &g).unwrap();
            prop_assert_eq!(t.shape(), &[g.tokens(), g.token_dim()]);
            let back = unpatchify(&t, &g).unwrap();
            prop_assert_eq!(&back, &img);
            let again = patchify::<f64>(&back, &g).unwrap();
            prop_assert_eq!(again, t);
        }
    }
}
