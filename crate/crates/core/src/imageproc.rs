//! Grayscale raster type, decoding, and the preprocessing operations:
//! bilinear reduction, Gaussian low/high-pass filtering, morphological
//! closing, region-of-interest location and CLAHE.
//!
//! All border handling uses half-sample symmetric reflection
//! (`d c b a | a b c d | d c b a`), applied periodically so that offsets
//! of any size map back into the image.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale raster.
///
/// Decoded images hold intensities in `[0, 1]`. Filtered images (for
/// example a high-pass response) may leave that range; they stay real
/// valued and feed the feature extractors directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Pixel lookup with reflected coordinates.
    #[inline]
    pub fn get_reflect(&self, x: isize, y: isize) -> f64 {
        self.get(reflect(x, self.width), reflect(y, self.height))
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Exact sub-raster copy.
    pub fn crop(&self, rect: RoiRect) -> Result<Image> {
        if rect.width == 0
            || rect.height == 0
            || rect.x0 + rect.width > self.width
            || rect.y0 + rect.height > self.height
        {
            return Err(Error::invalid(format!(
                "crop {rect:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(rect.width * rect.height);
        for y in rect.y0..rect.y0 + rect.height {
            data.extend_from_slice(&self.row(y)[rect.x0..rect.x0 + rect.width]);
        }
        Image::new(rect.width, rect.height, data)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            data.extend(self.row(y).iter().rev());
        }
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn full_rect(&self) -> RoiRect {
        RoiRect {
            x0: 0,
            y0: 0,
            width: self.width,
            height: self.height,
        }
    }
}

/// Maps any integer coordinate into `0..n` by half-sample symmetric
/// reflection with period `2n`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Decodes an 8-bit grayscale raster. Binary (`P5`) and ASCII (`P2`) PGM are
/// parsed directly; PNG, BMP and TIFF are decoded and converted to luma.
/// Intensities are scaled by the maximum value into `[0, 1]`.
pub fn ingest(bytes: &[u8]) -> Result<Image> {
    match bytes.get(..2) {
        Some(b"P5") | Some(b"P2") => decode_pgm(bytes),
        _ => decode_other(bytes),
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ingest(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn decode_other(bytes: &[u8]) -> Result<Image> {
    let decoded = image::load_from_memory(bytes)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?
        .to_luma8();
    let (w, h) = decoded.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::UnsupportedFormat("zero-dimension image".into()));
    }
    let data = decoded
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / 255.0)
        .collect();
    Image::new(w as usize, h as usize, data)
}

struct PnmHeader<'a> {
    rest: &'a [u8],
}

impl<'a> PnmHeader<'a> {
    fn skip_space_and_comments(&mut self) {
        loop {
            match self.rest.first() {
                Some(c) if c.is_ascii_whitespace() => self.rest = &self.rest[1..],
                Some(b'#') => {
                    let end = self
                        .rest
                        .iter()
                        .position(|&c| c == b'\n')
                        .unwrap_or(self.rest.len());
                    self.rest = &self.rest[end..];
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let end = self
            .rest
            .iter()
            .position(|c| !c.is_ascii_digit())
            .unwrap_or(self.rest.len());
        if end == 0 {
            return Err(Error::UnsupportedFormat(format!(
                "truncated or malformed PGM {what}"
            )));
        }
        let text = std::str::from_utf8(&self.rest[..end]).expect("ascii digits");
        self.rest = &self.rest[end..];
        text.parse()
            .map_err(|_| Error::UnsupportedFormat(format!("PGM {what} out of range")))
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let binary = &bytes[..2] == b"P5";
    let mut hdr = PnmHeader { rest: &bytes[2..] };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::UnsupportedFormat(format!(
            "zero-dimension image {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval} is not 8-bit"
        )));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::UnsupportedFormat("dimensions overflow".into()))?;
    let scale = maxval as f64;
    let data = if binary {
        // Exactly one whitespace byte separates the header from the raster.
        match hdr.rest.first() {
            Some(c) if c.is_ascii_whitespace() => {}
            _ => return Err(Error::UnsupportedFormat("truncated PGM header".into())),
        }
        let raster = &hdr.rest[1..];
        if raster.len() < n {
            return Err(Error::UnsupportedFormat(format!(
                "truncated PGM raster: {} of {n} bytes",
                raster.len()
            )));
        }
        raster[..n]
            .iter()
            .map(|&v| (v as f64 / scale).min(1.0))
            .collect()
    } else {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push((hdr.number("sample")? as f64 / scale).min(1.0));
        }
        out
    };
    Image::new(width, height, data)
}

/// Encodes as binary PGM, quantizing to 8 bits with clamping.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Bilinear reduction. Output dimensions are `floor(scale * dim)`; sample
/// positions are pixel-center aligned.
pub fn resize_bilinear(img: &Image, scale: f64) -> Result<Image> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(format!(
            "resize scale {scale} not in (0, 1]"
        )));
    }
    let out_w = (scale * img.width as f64 + 1e-9).floor() as usize;
    let out_h = (scale * img.height as f64 + 1e-9).floor() as usize;
    if out_w == 0 || out_h == 0 {
        return Err(Error::too_small(
            "resized image",
            format!(
                "scale {scale} maps {}x{} to zero size",
                img.width, img.height
            ),
        ));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let rx = img.width as f64 / out_w as f64;
    let ry = img.height as f64 / out_h as f64;
    let source = |dst: usize, ratio: f64, n: usize| {
        let s = ((dst as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| source(x, rx, img.width)).collect();
    Image::from_fn(out_w, out_h, |x, y| {
        let (y0, y1, fy) = source(y, ry, img.height);
        let (x0, x1, fx) = cols[x];
        let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
        let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

// ---------------------------------------------------------------------------
// Linear filtering
// ---------------------------------------------------------------------------

/// Square filter kernel with odd side length, row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size {size} must be odd")));
        }
        if weights.len() != size * size {
            return Err(Error::DimensionMismatch {
                expected: size * size,
                got: weights.len(),
            });
        }
        Ok(Self { size, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

/// Sampled isotropic Gaussian normalized to unit sum.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel2D> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::invalid(format!("gaussian size {size} must be odd")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian sigma {sigma} must be positive"
        )));
    }
    let r = (size / 2) as f64;
    let mut weights = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - r;
            let dx = j as f64 - r;
            weights.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    Kernel2D::new(size, weights)
}

/// Same-size 2-D convolution (kernel flipped) with reflected borders.
pub fn convolve2d(img: &Image, k: &Kernel2D) -> Result<Image> {
    if k.size > img.width || k.size > img.height {
        return Err(Error::too_small(
            "image",
            format!(
                "{}x{} is smaller than the {}x{} kernel",
                img.width, img.height, k.size, k.size
            ),
        ));
    }
    let r = k.radius() as isize;
    let n = k.size;
    Image::from_fn(img.width, img.height, |x, y| {
        let mut acc = 0.0;
        for i in 0..n {
            let sy = y as isize + r - i as isize;
            let row = img.row(reflect(sy, img.height));
            for j in 0..n {
                let sx = reflect(x as isize + r - j as isize, img.width);
                acc += k.at(i, j) * row[sx];
            }
        }
        acc
    })
}

pub const FILTER_KERNEL_SIZE: usize = 13;
pub const FILTER_SIGMA: f64 = 3.0;

pub fn lowpass(img: &Image) -> Result<Image> {
    let k = gaussian_kernel(FILTER_KERNEL_SIZE, FILTER_SIGMA)?;
    convolve2d(img, &k)
}

/// Original minus its low-pass response.
pub fn highpass(img: &Image) -> Result<Image> {
    let low = lowpass(img)?;
    let data = img.data.iter().zip(&low.data).map(|(a, b)| a - b).collect();
    Image::new(img.width, img.height, data)
}

// ---------------------------------------------------------------------------
// Morphology
// ---------------------------------------------------------------------------

fn box_filter(img: &Image, size: usize, pick: fn(f64, f64) -> f64) -> Image {
    let r = (size / 2) as isize;
    // Rows first, then columns; a flat box is separable for max and min.
    let horizontal = Image::from_fn(img.width, img.height, |x, y| {
        let row = img.row(y);
        (-r..=r)
            .map(|d| row[reflect(x as isize + d, img.width)])
            .reduce(pick)
            .expect("box is nonempty")
    })
    .expect("same dimensions");
    Image::from_fn(img.width, img.height, |x, y| {
        (-r..=r)
            .map(|d| horizontal.get(x, reflect(y as isize + d, img.height)))
            .reduce(pick)
            .expect("box is nonempty")
    })
    .expect("same dimensions")
}

fn check_box(img: &Image, size: usize) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "structuring element {size} must be odd"
        )));
    }
    if size > img.width.min(img.height) {
        return Err(Error::too_small(
            "image",
            format!(
                "{}x{} is smaller than the {size}x{size} structuring element",
                img.width, img.height
            ),
        ));
    }
    Ok(())
}

pub fn dilate(img: &Image, size: usize) -> Result<Image> {
    check_box(img, size)?;
    Ok(box_filter(img, size, f64::max))
}

pub fn erode(img: &Image, size: usize) -> Result<Image> {
    check_box(img, size)?;
    Ok(box_filter(img, size, f64::min))
}

/// Grayscale closing (dilation then erosion) with a flat `size`×`size` box.
pub fn morph_close(img: &Image, size: usize) -> Result<Image> {
    check_box(img, size)?;
    Ok(box_filter(&box_filter(img, size, f64::max), size, f64::min))
}

// ---------------------------------------------------------------------------
// Region of interest
// ---------------------------------------------------------------------------

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

pub const ROI_CLOSING_SIZE: usize = 21;
/// Half extent of the region, in standard deviations.
pub const ROI_SIGMAS: f64 = 3.0;

/// Locates the bright object: closes the image with a 21×21 box, takes the
/// intensity-weighted centroid and coordinate standard deviations, and
/// returns the rectangle spanning ±3σ around the centroid, clipped to the
/// image. Images smaller than the box use the largest odd box that fits.
/// An image with no positive mass yields the full frame.
pub fn extract_roi(img: &Image) -> RoiRect {
    let side = img.width.min(img.height);
    let size = ROI_CLOSING_SIZE.min(if side % 2 == 1 { side } else { side - 1 });
    let closed = box_filter(&box_filter(img, size, f64::max), size, f64::min);

    let (mut mass, mut mx, mut my) = (0.0, 0.0, 0.0);
    for y in 0..closed.height {
        for x in 0..closed.width {
            let w = closed.get(x, y).max(0.0);
            mass += w;
            mx += w * x as f64;
            my += w * y as f64;
        }
    }
    if !(mass > 0.0) {
        return img.full_rect();
    }
    let (cx, cy) = (mx / mass, my / mass);
    let (mut vx, mut vy) = (0.0, 0.0);
    for y in 0..closed.height {
        for x in 0..closed.width {
            let w = closed.get(x, y).max(0.0);
            vx += w * (x as f64 - cx).powi(2);
            vy += w * (y as f64 - cy).powi(2);
        }
    }
    let (sx, sy) = ((vx / mass).sqrt(), (vy / mass).sqrt());
    let span = |c: f64, s: f64, n: usize| {
        let lo = (c - ROI_SIGMAS * s).floor().max(0.0) as usize;
        let hi = ((c + ROI_SIGMAS * s).ceil() as usize + 1).min(n);
        let lo = lo.min(n - 1);
        (lo, hi.max(lo + 1) - lo)
    };
    let (x0, width) = span(cx, sx, img.width);
    let (y0, height) = span(cy, sy, img.height);
    RoiRect {
        x0,
        y0,
        width,
        height,
    }
}

// ---------------------------------------------------------------------------
// Contrast limited adaptive histogram equalization
// ---------------------------------------------------------------------------

pub const CLAHE_DEFAULT_TILES: (usize, usize) = (8, 8);
pub const CLAHE_DEFAULT_CLIP: f64 = 2.0;

const LEVELS: usize = 256;

/// CLAHE over a `tiles = (rows, cols)` grid. Each tile's 256-bin histogram
/// is clipped at `clip` times the mean bin count, the excess is spread
/// evenly over all bins, and the tile CDF becomes its intensity mapping.
/// Pixels blend the mappings of the surrounding tile centers bilinearly.
/// `clip = f64::INFINITY` disables clipping.
pub fn clahe(img: &Image, tiles: (usize, usize), clip: f64) -> Result<Image> {
    let (ty, tx) = tiles;
    if ty == 0 || tx == 0 {
        return Err(Error::invalid(format!(
            "tile grid {ty}x{tx} must be at least 1x1"
        )));
    }
    if ty > img.height || tx > img.width {
        return Err(Error::too_small(
            "image",
            format!(
                "{}x{} gives tiles under one pixel for a {ty}x{tx} grid",
                img.width, img.height
            ),
        ));
    }
    if !(clip > 0.0) {
        return Err(Error::invalid(format!(
            "clip limit {clip} must be positive"
        )));
    }
    let bounds = |t: usize, count: usize, n: usize| (t * n / count, (t + 1) * n / count);
    let levels: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();

    let mut maps = vec![[0.0f64; LEVELS]; ty * tx];
    for r in 0..ty {
        let (y0, y1) = bounds(r, ty, img.height);
        for c in 0..tx {
            let (x0, x1) = bounds(c, tx, img.width);
            let mut hist = [0.0f64; LEVELS];
            for y in y0..y1 {
                for &l in &levels[y * img.width + x0..y * img.width + x1] {
                    hist[l as usize] += 1.0;
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            if clip.is_finite() {
                let limit = clip * count / LEVELS as f64;
                let mut excess = 0.0;
                for h in hist.iter_mut() {
                    if *h > limit {
                        excess += *h - limit;
                        *h = limit;
                    }
                }
                let share = excess / LEVELS as f64;
                hist.iter_mut().for_each(|h| *h += share);
            }
            let map = &mut maps[r * tx + c];
            let mut acc = 0.0;
            for (m, h) in map.iter_mut().zip(hist) {
                acc += h;
                *m = (acc / count).min(1.0);
            }
        }
    }

    let centers = |count: usize, n: usize| -> Vec<f64> {
        (0..count)
            .map(|t| {
                let (a, b) = bounds(t, count, n);
                (a + b - 1) as f64 / 2.0
            })
            .collect()
    };
    let cy = centers(ty, img.height);
    let cx = centers(tx, img.width);
    let locate = |p: f64, cs: &[f64]| -> (usize, usize, f64) {
        let last = cs.len() - 1;
        if p <= cs[0] {
            return (0, 0, 0.0);
        }
        if p >= cs[last] {
            return (last, last, 0.0);
        }
        let t = cs.partition_point(|&c| c <= p) - 1;
        (t, t + 1, (p - cs[t]) / (cs[t + 1] - cs[t]))
    };
    let cols: Vec<_> = (0..img.width).map(|x| locate(x as f64, &cx)).collect();
    Image::from_fn(img.width, img.height, |x, y| {
        let l = levels[y * img.width + x] as usize;
        let (r0, r1, wy) = locate(y as f64, &cy);
        let (c0, c1, wx) = cols[x];
        let top = maps[r0 * tx + c0][l] * (1.0 - wx) + maps[r0 * tx + c1][l] * wx;
        let bottom = maps[r1 * tx + c0][l] * (1.0 - wx) + maps[r1 * tx + c1][l] * wx;
        (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0)
    })
}
