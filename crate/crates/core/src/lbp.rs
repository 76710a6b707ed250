//! Local binary patterns on a 3×3 neighborhood.
//!
//! Each interior pixel gets an 8-bit code: neighbor bit is 1 when the
//! neighbor is greater than or equal to the center. Neighbors are read
//! clockwise starting at the top-left corner, and the top-left bit is the
//! most significant:
//!
//! ```text
//! b7 b6 b5
//! b0  c b4
//! b1 b2 b3
//! ```
//!
//! where `b7` is the MSB. The uniform variant collapses the 256 codes to
//! 10 rotation-invariant labels: the popcount for codes with at most two
//! circular bit transitions, and one shared label for everything else.

use crate::error::{Error, Result};
use crate::imageproc::Image;
use crate::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LbpVariant {
    /// All 256 codes.
    Original,
    /// Rotation-invariant uniform labels.
    Uniform,
}

impl LbpVariant {
    pub fn bins(self) -> usize {
        match self {
            LbpVariant::Original => 256,
            LbpVariant::Uniform => UNIFORM_BINS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LbpVariant::Original => "original",
            LbpVariant::Uniform => "uniform",
        }
    }
}

pub const UNIFORM_BINS: usize = 10;
const NON_UNIFORM_LABEL: u8 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LbpConfig {
    pub variant: LbpVariant,
    /// Block grid as (rows, cols).
    pub blocks: (usize, usize),
}

impl Default for LbpConfig {
    fn default() -> Self {
        Self {
            variant: LbpVariant::Uniform,
            blocks: (1, 1),
        }
    }
}

impl LbpConfig {
    pub fn feature_len(&self) -> usize {
        self.blocks.0 * self.blocks.1 * self.variant.bins()
    }
}

/// Code image; one pixel smaller than the source on every side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LbpCodeImage {
    pub width: usize,
    pub height: usize,
    pub codes: Vec<u8>,
}

// Clockwise from top-left as (dx, dy); index 0 is the MSB.
const NEIGHBORS: [(usize, usize); 8] = [
    (0, 0),
    (1, 0),
    (2, 0),
    (2, 1),
    (2, 2),
    (1, 2),
    (0, 2),
    (0, 1),
];

pub fn lbp_code(patch: &[[f64; 3]; 3]) -> u8 {
    let center = patch[1][1];
    NEIGHBORS.iter().fold(0u8, |code, &(dx, dy)| {
        (code << 1) | (patch[dy][dx] >= center) as u8
    })
}

pub fn lbp_map(img: &Image) -> Result<LbpCodeImage> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::too_small(
            "image",
            format!("{w}x{h} has no interior pixel for a 3x3 neighborhood"),
        ));
    }
    let data = img.data();
    let mut codes = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let center = data[y * w + x];
            let mut code = 0u8;
            for &(dx, dy) in &NEIGHBORS {
                let v = data[(y + dy - 1) * w + (x + dx - 1)];
                code = (code << 1) | (v >= center) as u8;
            }
            codes.push(code);
        }
    }
    Ok(LbpCodeImage {
        width: w - 2,
        height: h - 2,
        codes,
    })
}

/// Number of 0/1 changes around the circular 8-bit pattern.
pub fn circular_transitions(code: u8) -> u32 {
    (code ^ code.rotate_left(1)).count_ones()
}

pub fn uniform_label(code: u8) -> u8 {
    if circular_transitions(code) <= 2 {
        code.count_ones() as u8
    } else {
        NON_UNIFORM_LABEL
    }
}

/// Splits `n` into `parts` spans of `n / parts`, the last absorbing the
/// remainder.
fn spans(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    (0..parts)
        .map(|i| {
            let start = i * base;
            let end = if i + 1 == parts { n } else { start + base };
            (start, end)
        })
        .collect()
}

/// Per-block L1-normalized histograms of the code image, concatenated in
/// row-major block order.
pub fn lbp_features(img: &Image, cfg: &LbpConfig) -> Result<FeatureVector> {
    let (rows, cols) = cfg.blocks;
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "block grid {rows}x{cols} must be at least 1x1"
        )));
    }
    let map = lbp_map(img)?;
    if map.height < rows || map.width < cols {
        return Err(Error::too_small(
            "code image",
            format!(
                "{}x{} cannot hold a {rows}x{cols} block grid without empty blocks",
                map.width, map.height
            ),
        ));
    }
    let bins = cfg.variant.bins();
    let lut: [u8; 256] = std::array::from_fn(|c| match cfg.variant {
        LbpVariant::Original => c as u8,
        LbpVariant::Uniform => uniform_label(c as u8),
    });

    let mut out = Vec::with_capacity(cfg.feature_len());
    for &(y0, y1) in &spans(map.height, rows) {
        for &(x0, x1) in &spans(map.width, cols) {
            let mut hist = vec![0u32; bins];
            for y in y0..y1 {
                for &c in &map.codes[y * map.width + x0..y * map.width + x1] {
                    hist[lut[c as usize] as usize] += 1;
                }
            }
            let total = ((y1 - y0) * (x1 - x0)) as f64;
            out.extend(hist.into_iter().map(|h| h as f64 / total));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn code_examples() {
        assert_eq!(lbp_code(&[[0.5; 3]; 3]), 255);
        assert_eq!(
            lbp_code(&[[0.0, 0.1, 0.2], [0.3, 0.9, 0.4], [0.5, 0.6, 0.7]]),
            0
        );
        let p = [[5.0, 4.0, 3.0], [6.0, 5.0, 2.0], [7.0, 8.0, 9.0]];
        assert_eq!(lbp_code(&p), 0b1000_1111);
        assert_eq!(lbp_code(&p), 143);
    }

    #[test]
    fn map_shape_and_errors() {
        let img = Image::filled(3, 3, 0.2).unwrap();
        let m = lbp_map(&img).unwrap();
        assert_eq!((m.width, m.height, m.codes.clone()), (1, 1, vec![255]));
        assert!(lbp_map(&Image::filled(2, 5, 0.0).unwrap()).is_err());
    }

    #[test]
    fn map_matches_per_pixel_code() {
        let mut rng = crate::seed::rng(11);
        let img = Image::from_fn(8, 8, |_, _| rng.random::<f64>()).unwrap();
        let m = lbp_map(&img).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                let patch: [[f64; 3]; 3] =
                    std::array::from_fn(|r| std::array::from_fn(|c| img.get(x + c - 1, y + r - 1)));
                assert_eq!(m.codes[(y - 1) * 6 + (x - 1)], lbp_code(&patch));
            }
        }
    }

    #[test]
    fn uniform_labels() {
        assert_eq!(uniform_label(0b0000_0000), 0);
        assert_eq!(uniform_label(0b1111_1111), 8);
        assert_eq!(circular_transitions(0b0101_0101), 8);
        assert_eq!(uniform_label(0b0101_0101), 9);
        assert_eq!(uniform_label(0b0001_1100), 3);
        assert_eq!(uniform_label(0b1000_0001), 2);
    }

    #[test]
    fn exactly_58_uniform_codes_and_10_labels() {
        let uniform = (0..=255u8)
            .filter(|&c| circular_transitions(c) <= 2)
            .count();
        assert_eq!(uniform, 58);
        let mut labels: Vec<u8> = (0..=255u8).map(uniform_label).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels, (0..10).collect::<Vec<u8>>());
    }

    #[test]
    fn constant_image_uniform_histogram() {
        let img = Image::filled(12, 9, 0.4).unwrap();
        let f = lbp_features(&img, &LbpConfig::default()).unwrap();
        let mut expect = vec![0.0; 10];
        expect[8] = 1.0;
        assert_eq!(f, expect);
    }

    #[test]
    fn block_shape_and_normalization() {
        let mut rng = crate::seed::rng(12);
        let img = Image::from_fn(13, 11, |_, _| rng.random::<f64>()).unwrap();
        let cfg = LbpConfig {
            variant: LbpVariant::Original,
            blocks: (2, 2),
        };
        let f = lbp_features(&img, &cfg).unwrap();
        assert_eq!(f.len(), 1024);
        for chunk in f.chunks(256) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uneven_blocks_put_remainder_last() {
        assert_eq!(spans(7, 3), vec![(0, 2), (2, 4), (4, 7)]);
        let img = Image::filled(4, 4, 0.0).unwrap();
        let cfg = LbpConfig {
            variant: LbpVariant::Uniform,
            blocks: (3, 1),
        };
        assert!(lbp_features(&img, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn shift_invariance(seed: u64, shift in -0.5f64..0.5) {
            let mut rng = crate::seed::rng(seed);
            // Quarter-step values keep the shifted comparisons exact.
            let img = Image::from_fn(9, 7, |_, _| rng.random_range(0..8) as f64 * 0.25).unwrap();
            let shift = (shift * 4.0).round() / 4.0;
            let moved = img.map(|v| v + shift);
            prop_assert_eq!(lbp_map(&img).unwrap(), lbp_map(&moved).unwrap());
            for variant in [LbpVariant::Original, LbpVariant::Uniform] {
                let cfg = LbpConfig { variant, blocks: (2, 3) };
                prop_assert_eq!(lbp_features(&img, &cfg).unwrap(), lbp_features(&moved, &cfg).unwrap());
            }
        }

        #[test]
        fn histograms_are_distributions(seed: u64, rows in 1usize..4, cols in 1usize..4) {
            let mut rng = crate::seed::rng(seed);
            let img = Image::from_fn(14, 12, |_, _| rng.random::<f64>()).unwrap();
            for variant in [LbpVariant::Original, LbpVariant::Uniform] {
                let f = lbp_features(&img, &LbpConfig { variant, blocks: (rows, cols) }).unwrap();
                prop_assert_eq!(f.len(), rows * cols * variant.bins());
                for chunk in f.chunks(variant.bins()) {
                    prop_assert!(chunk.iter().all(|&v| v >= 0.0));
                    prop_assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
