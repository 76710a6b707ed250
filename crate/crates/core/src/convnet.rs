//! Random-filter convolutional feature extractor.
//!
//! Each layer runs valid correlation with a fixed Gaussian filter bank,
//! rectification, optional local contrast normalization, and max pooling.
//! Filters are never trained; a layer is fully determined by its config
//! and seed.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageproc::{self, Image};
use crate::FeatureVector;

/// Channel-major stack of feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch {
                expected: channels * height * width,
                got: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            channels: 1,
            height: img.height(),
            width: img.width(),
            data: img.data().to_vec(),
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConvLayerConfig {
    pub num_filters: usize,
    /// Odd side length of each filter.
    pub filter_size: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    /// Gaussian window of the contrast normalization; `None` skips it.
    pub lcn_window: Option<usize>,
    pub seed: u64,
}

pub const DEFAULT_LCN_WINDOW: usize = 9;

impl ConvLayerConfig {
    /// Non-overlapping pooling with the default normalization window.
    pub fn new(num_filters: usize, filter_size: usize, pool_size: usize, seed: u64) -> Self {
        Self {
            num_filters,
            filter_size,
            pool_size,
            pool_stride: pool_size,
            lcn_window: Some(DEFAULT_LCN_WINDOW),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_filters == 0 {
            return Err(Error::invalid("layer needs at least one filter"));
        }
        if self.filter_size == 0 || self.filter_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "filter size {} must be odd",
                self.filter_size
            )));
        }
        if self.pool_size == 0 || self.pool_stride == 0 {
            return Err(Error::invalid("pool size and stride must be at least 1"));
        }
        if let Some(w) = self.lcn_window {
            if w == 0 || w.is_multiple_of(2) {
                return Err(Error::invalid(format!("lcn window {w} must be odd")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConvNetConfig {
    pub layers: Vec<ConvLayerConfig>,
}

pub const MAX_LAYERS: usize = 5;

impl ConvNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.len() > MAX_LAYERS {
            return Err(Error::invalid(format!(
                "network needs 1 to {MAX_LAYERS} layers, got {}",
                self.layers.len()
            )));
        }
        self.layers.iter().try_for_each(ConvLayerConfig::validate)
    }
}

/// Filters of one layer, indexed `[filter][channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub num_filters: usize,
    pub in_channels: usize,
    pub size: usize,
    pub weights: Vec<f64>,
}

impl FilterBank {
    pub fn new(
        num_filters: usize,
        in_channels: usize,
        size: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != num_filters * in_channels * size * size {
            return Err(Error::DimensionMismatch {
                expected: num_filters * in_channels * size * size,
                got: weights.len(),
            });
        }
        Ok(Self {
            num_filters,
            in_channels,
            size,
            weights,
        })
    }

    /// Standard deviation used by [`init_filters`]: `1 / sqrt(fan_in)`.
    pub fn weight_std(in_channels: usize, size: usize) -> f64 {
        1.0 / ((in_channels * size * size) as f64).sqrt()
    }

    fn filter(&self, f: usize, c: usize) -> &[f64] {
        let n = self.size * self.size;
        let start = (f * self.in_channels + c) * n;
        &self.weights[start..start + n]
    }
}

/// I.i.d. zero-mean Gaussian weights scaled by fan-in.
pub fn init_filters(cfg: &ConvLayerConfig, in_channels: usize) -> FilterBank {
    let std = FilterBank::weight_std(in_channels, cfg.filter_size);
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let mut rng = crate::seed::rng(cfg.seed);
    let n = cfg.num_filters * in_channels * cfg.filter_size * cfg.filter_size;
    let weights = (0..n).map(|_| normal.sample(&mut rng)).collect();
    FilterBank {
        num_filters: cfg.num_filters,
        in_channels,
        size: cfg.filter_size,
        weights,
    }
}

/// Valid multi-channel correlation; each output map sums the correlations
/// of every input channel with the matching filter slice.
pub fn conv_forward(x: &FeatureTensor, bank: &FilterBank) -> Result<FeatureTensor> {
    if x.channels != bank.in_channels {
        return Err(Error::DimensionMismatch {
            expected: bank.in_channels,
            got: x.channels,
        });
    }
    let k = bank.size;
    if x.height < k || x.width < k {
        return Err(Error::too_small(
            "feature map",
            format!(
                "{}x{} is smaller than the {k}x{k} filter",
                x.height, x.width
            ),
        ));
    }
    let (oh, ow) = (x.height - k + 1, x.width - k + 1);
    let mut out = FeatureTensor::zeros(bank.num_filters, oh, ow);
    for (f, dst) in out.data.chunks_mut(oh * ow).enumerate() {
        for c in 0..x.channels {
            let src = x.plane(c);
            let w = bank.filter(f, c);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[ky * k + kx];
                    for y in 0..oh {
                        let row = &src[(y + ky) * x.width + kx..(y + ky) * x.width + kx + ow];
                        let out_row = &mut dst[y * ow..(y + 1) * ow];
                        for (o, &s) in out_row.iter_mut().zip(row) {
                            *o += wv * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &FeatureTensor) -> FeatureTensor {
    FeatureTensor {
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        ..*x
    }
}

/// Divisive floor `c` of the contrast normalization.
pub const LCN_FLOOR: f64 = 1.0;

fn smooth(
    plane: Vec<f64>,
    width: usize,
    height: usize,
    k: &imageproc::Kernel2D,
) -> Result<Vec<f64>> {
    let img = Image::new(width, height, plane)?;
    Ok(imageproc::convolve2d(&img, k)?.into_data())
}

fn lcn_kernel(x: &FeatureTensor, window: usize) -> Result<imageproc::Kernel2D> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("lcn window {window} must be odd")));
    }
    if window > x.height || window > x.width {
        return Err(Error::too_small(
            "feature map",
            format!(
                "{}x{} is smaller than the {window}x{window} normalization window",
                x.height, x.width
            ),
        ));
    }
    imageproc::gaussian_kernel(window, window as f64 / 6.0)
}

/// Weighted neighborhood average over all channels of `x`, one plane.
fn neighborhood_mean(
    x: &FeatureTensor,
    k: &imageproc::Kernel2D,
    f: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    let n = x.height * x.width;
    let inv_c = 1.0 / x.channels as f64;
    let mut across = vec![0.0; n];
    for c in 0..x.channels {
        for (m, &v) in across.iter_mut().zip(x.plane(c)) {
            *m += f(v) * inv_c;
        }
    }
    smooth(across, x.width, x.height, k)
}

/// Subtractive half of [`lcn`]: each value minus the Gaussian-weighted
/// mean of its neighborhood across all channels.
///
/// The mean is accumulated as weighted differences from the value of
/// channel 0 at the same pixel, so a constant input gives exactly zero.
pub fn lcn_subtractive(x: &FeatureTensor, window: usize) -> Result<FeatureTensor> {
    let k = lcn_kernel(x, window)?;
    let (h, w, size) = (x.height, x.width, k.size());
    let r = k.radius() as isize;
    let inv_c = 1.0 / x.channels as f64;
    let mut offset = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let reference = x.at(0, i, j);
            let mut s = 0.0;
            for p in 0..size {
                let yy = imageproc::reflect(i as isize + p as isize - r, h);
                for q in 0..size {
                    let xx = imageproc::reflect(j as isize + q as isize - r, w);
                    let t: f64 = (0..x.channels).map(|c| x.at(c, yy, xx) - reference).sum();
                    s += k.at(p, q) * t;
                }
            }
            offset[i * w + j] = s * inv_c;
        }
    }
    let n = h * w;
    let mut v = x.data.clone();
    for plane in v.chunks_mut(n) {
        for ((a, &d), &reference) in plane.iter_mut().zip(&offset).zip(x.plane(0)) {
            *a = (*a - reference) - d;
        }
    }
    Ok(FeatureTensor { data: v, ..*x })
}

/// Local contrast normalization.
///
/// The 2-D Gaussian window (σ = window / 6) is replicated over channels and
/// scaled so its 3-D sum is 1. After [`lcn_subtractive`], every value is
/// divided by `max(1, σ)` where σ is the weighted neighborhood RMS of the
/// subtractive output. Borders reflect.
pub fn lcn(x: &FeatureTensor, window: usize) -> Result<FeatureTensor> {
    let k = lcn_kernel(x, window)?;
    let mut v = lcn_subtractive(x, window)?;
    let local_var = neighborhood_mean(&v, &k, |a| a * a)?;
    let divisor: Vec<f64> = local_var
        .iter()
        .map(|&s| LCN_FLOOR.max(s.max(0.0).sqrt()))
        .collect();
    let n = x.height * x.width;
    for plane in v.data.chunks_mut(n) {
        for (a, &d) in plane.iter_mut().zip(&divisor) {
            *a /= d;
        }
    }
    Ok(v)
}

/// Number of pooling windows needed to cover `n` samples; the last window
/// may hang past the edge but always starts inside it.
pub fn pooled_len(n: usize, pool: usize, stride: usize) -> usize {
    ((n - pool).div_ceil(stride) + 1).min(n.div_ceil(stride))
}

/// Max pooling; windows at the right and bottom edges may be partial.
pub fn max_pool(x: &FeatureTensor, pool: usize, stride: usize) -> Result<FeatureTensor> {
    if pool == 0 || stride == 0 {
        return Err(Error::invalid("pool size and stride must be at least 1"));
    }
    if pool > x.height || pool > x.width {
        return Err(Error::too_small(
            "feature map",
            format!(
                "{}x{} is smaller than the {pool}x{pool} pool",
                x.height, x.width
            ),
        ));
    }
    let oh = pooled_len(x.height, pool, stride);
    let ow = pooled_len(x.width, pool, stride);
    let mut out = Vec::with_capacity(x.channels * oh * ow);
    for c in 0..x.channels {
        let plane = x.plane(c);
        for oy in 0..oh {
            let y0 = oy * stride;
            let y1 = (y0 + pool).min(x.height);
            for ox in 0..ow {
                let x0 = ox * stride;
                let x1 = (x0 + pool).min(x.width);
                let mut m = f64::NEG_INFINITY;
                for y in y0..y1 {
                    for &v in &plane[y * x.width + x0..y * x.width + x1] {
                        m = m.max(v);
                    }
                }
                out.push(m);
            }
        }
    }
    FeatureTensor::new(x.channels, oh, ow, out)
}

/// A network with realized filter banks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub config: ConvNetConfig,
    pub banks: Vec<FilterBank>,
}

impl ConvNet {
    /// Draws every layer's filters from its seed, for grayscale input.
    pub fn new(config: ConvNetConfig) -> Result<Self> {
        config.validate()?;
        let mut in_channels = 1;
        let banks = config
            .layers
            .iter()
            .map(|layer| {
                let bank = init_filters(layer, in_channels);
                in_channels = layer.num_filters;
                bank
            })
            .collect();
        Ok(Self { config, banks })
    }

    pub fn with_banks(config: ConvNetConfig, banks: Vec<FilterBank>) -> Result<Self> {
        config.validate()?;
        if banks.len() != config.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: config.layers.len(),
                got: banks.len(),
            });
        }
        let mut in_channels = 1;
        for (layer, bank) in config.layers.iter().zip(&banks) {
            if bank.num_filters != layer.num_filters
                || bank.size != layer.filter_size
                || bank.in_channels != in_channels
            {
                return Err(Error::invalid(
                    "filter bank shape does not match layer config",
                ));
            }
            in_channels = layer.num_filters;
        }
        Ok(Self { config, banks })
    }

    pub fn forward(&self, img: &Image) -> Result<FeatureTensor> {
        let mut x = FeatureTensor::from_image(img);
        for (layer, bank) in self.config.layers.iter().zip(&self.banks) {
            x = relu(&conv_forward(&x, bank)?);
            if let Some(window) = layer.lcn_window {
                x = lcn(&x, window)?;
            }
            x = max_pool(&x, layer.pool_size, layer.pool_stride)?;
        }
        Ok(x)
    }

    /// Final maps flattened channel-major.
    pub fn features(&self, img: &Image) -> Result<FeatureVector> {
        Ok(self.forward(img)?.data)
    }

    /// Feature length for a `width`×`height` input, or an error if some
    /// layer would produce an empty map.
    pub fn output_len(&self, width: usize, height: usize) -> Result<usize> {
        let (mut h, mut w) = (height, width);
        for (i, layer) in self.config.layers.iter().enumerate() {
            let k = layer.filter_size;
            let fits = h >= k
                && w >= k
                && layer
                    .lcn_window
                    .is_none_or(|lw| lw <= h - k + 1 && lw <= w - k + 1)
                && layer.pool_size <= h - k + 1
                && layer.pool_size <= w - k + 1;
            if !fits {
                return Err(Error::too_small(
                    "feature map",
                    format!("{w}x{h} input to layer {} is too small", i + 1),
                ));
            }
            h = pooled_len(h - k + 1, layer.pool_size, layer.pool_stride);
            w = pooled_len(w - k + 1, layer.pool_size, layer.pool_stride);
        }
        Ok(self.config.layers.last().map_or(1, |l| l.num_filters) * h * w)
    }
}

pub fn convnet_features(img: &Image, cfg: &ConvNetConfig) -> Result<FeatureVector> {
    ConvNet::new(cfg.clone())?.features(img)
}
