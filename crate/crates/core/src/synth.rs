//! Synthetic two-class texture set for exercising the pipeline without
//! real sensor data.
//!
//! A live sample is an oriented sinusoidal ridge pattern plus band-passed
//! noise plus a little white noise. A fake sample is drawn the same way
//! and then blurred with a Gaussian of σ = 1.5, mimicking the smoothing a
//! cast replica introduces. Intensities are quantized to 8 bits so that a
//! dataset written to disk reads back bit-identically.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageproc::{self, encode_pgm, quantize, Image};
use crate::Label;

pub const FAKE_BLUR_SIGMA: f64 = 1.5;

fn blur(img: &Image, sigma: f64) -> Image {
    let size = 2 * (3.0 * sigma).ceil() as usize + 1;
    let k = imageproc::gaussian_kernel(size, sigma).expect("odd size, positive sigma");
    imageproc::convolve2d(img, &k).expect("image larger than kernel")
}

fn ridge_texture(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let theta = rng.random_range(0.0..PI);
    let period = rng.random_range(6.0..10.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let contrast = rng.random_range(0.2..0.35);
    let (c, s) = (theta.cos(), theta.sin());
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white = Image::from_fn(size, size, |_, _| normal.sample(rng)).expect("nonempty");
    let smooth = blur(&white, 2.0);
    let noise_amp = rng.random_range(0.08..0.15);
    Image::from_fn(size, size, |x, y| {
        let t = 2.0 * PI * (x as f64 * c + y as f64 * s) / period + phase;
        let band = white.get(x, y) - smooth.get(x, y);
        0.5 + contrast * t.sin() + noise_amp * band
    })
    .expect("nonempty")
}

fn finish(img: Image) -> Image {
    img.map(|v| quantize(v) as f64 / 255.0)
}

pub fn sample(label: Label, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let base = ridge_texture(size, rng);
    finish(match label {
        Label::Live => base,
        Label::Fake => blur(&base, FAKE_BLUR_SIGMA),
    })
}

/// `per_class` live and `per_class` fake images of `size`×`size`,
/// interleaved live/fake.
pub fn generate(per_class: usize, size: usize, seed: u64) -> Vec<(Image, Label)> {
    let mut rng = crate::seed::rng(crate::seed::derive(seed, "synth"));
    let mut out = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        for label in [Label::Live, Label::Fake] {
            out.push((sample(label, size, &mut rng), label));
        }
    }
    out
}

/// Writes samples as `<root>/live/NNNNN.pgm` and `<root>/fake/NNNNN.pgm`.
pub fn write_dataset(root: &Path, samples: &[(Image, Label)]) -> Result<()> {
    for label in [Label::Live, Label::Fake] {
        let dir = root.join(label.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, (img, label)) in samples.iter().enumerate() {
        let path = root.join(label.as_str()).join(format!("{i:05}.pgm"));
        std::fs::write(&path, encode_pgm(img)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
