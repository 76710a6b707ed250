//! Crop-and-mirror augmentation.
//!
//! Every image yields ten patches: 80% crops anchored at the four corners
//! and the center, each followed by its horizontal mirror. At test time the
//! decision scores of the ten patches are averaged.

use crate::error::{Error, Result};
use crate::imageproc::{Image, RoiRect};
use crate::pipeline::TrainedPipeline;
use crate::Label;

pub const CROP_FRACTION: f64 = 0.8;
pub const PATCHES_PER_IMAGE: usize = 10;
pub const MIN_SIDE: usize = 5;

/// Ten equally sized patches in the order
/// `[TL, TL-flip, TR, TR-flip, BL, BL-flip, BR, BR-flip, C, C-flip]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Image>,
}

/// Crop rectangles for the four corners and the center, in that order.
pub fn crop_rects(width: usize, height: usize) -> Result<[RoiRect; 5]> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::too_small(
            "image",
            format!("{width}x{height} is below the {MIN_SIDE}x{MIN_SIDE} minimum for cropping"),
        ));
    }
    let cw = (CROP_FRACTION * width as f64 + 1e-9).floor() as usize;
    let ch = (CROP_FRACTION * height as f64 + 1e-9).floor() as usize;
    let (dx, dy) = (width - cw, height - ch);
    let rect = |x0, y0| RoiRect {
        x0,
        y0,
        width: cw,
        height: ch,
    };
    Ok([
        rect(0, 0),
        rect(dx, 0),
        rect(0, dy),
        rect(dx, dy),
        rect(dx / 2, dy / 2),
    ])
}

pub fn make_patches(img: &Image) -> Result<PatchSet> {
    let rects = crop_rects(img.width(), img.height())?;
    let mut patches = Vec::with_capacity(PATCHES_PER_IMAGE);
    for rect in rects {
        let crop = img.crop(rect)?;
        let mirror = crop.flip_horizontal();
        patches.push(crop);
        patches.push(mirror);
    }
    Ok(PatchSet { patches })
}

/// Replaces every sample by its ten patches; patches of sample `i` occupy
/// positions `10i..10i+10`.
pub fn augment_training(samples: &[(Image, Label)]) -> Result<Vec<(Image, Label)>> {
    let mut out = Vec::with_capacity(samples.len() * PATCHES_PER_IMAGE);
    for (img, label) in samples {
        out.extend(make_patches(img)?.patches.into_iter().map(|p| (p, *label)));
    }
    Ok(out)
}

pub fn mean_score(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Mean decision score over the ten patches of an already preprocessed
/// image.
pub fn averaged_score(model: &TrainedPipeline, preprocessed: &Image) -> Result<f64> {
    let scores = make_patches(preprocessed)?
        .patches
        .iter()
        .map(|p| model.patch_score(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_score(&scores))
}
