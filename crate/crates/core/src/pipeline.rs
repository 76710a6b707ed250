//! Pipeline configuration, the fitted model, and its binary file format.
//!
//! Model file layout (all integers and reals little-endian, reals `f64`):
//!
//! ```text
//! "LVCK" | u16 version | 6 × (u64 length | stage payload) | sha256 footer
//! ```
//!
//! Stages appear in pipeline order: header (root seed), preprocess,
//! augment, extract, transform, classify. The 32-byte footer is the
//! SHA-256 of every preceding byte.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::augment;
use crate::codec::{Reader, Writer};
use crate::convnet::{ConvLayerConfig, ConvNet, ConvNetConfig, FilterBank};
use crate::error::{Error, Result};
use crate::imageproc::{self, Image};
use crate::lbp::{self, LbpConfig, LbpVariant};
use crate::seed;
use crate::svm::{self, SvmModel, SvmParams};
use crate::transform::{FeatureTransform, PcaModel, Standardizer};
use crate::{FeatureVector, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrequencyFilter {
    None,
    Lowpass,
    Highpass,
}

impl FrequencyFilter {
    pub fn name(self) -> &'static str {
        match self {
            FrequencyFilter::None => "none",
            FrequencyFilter::Lowpass => "lowpass",
            FrequencyFilter::Highpass => "highpass",
        }
    }

    fn code(self) -> u8 {
        match self {
            FrequencyFilter::None => 0,
            FrequencyFilter::Lowpass => 1,
            FrequencyFilter::Highpass => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => FrequencyFilter::None,
            1 => FrequencyFilter::Lowpass,
            2 => FrequencyFilter::Highpass,
            _ => return Err(Error::ModelFile(format!("unknown filter code {c}"))),
        })
    }
}

/// Optional preprocessing, applied in the order ROI crop, reduction,
/// CLAHE, frequency filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub roi: bool,
    pub scale: f64,
    pub clahe: bool,
    pub filter: FrequencyFilter,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            roi: false,
            scale: 1.0,
            clahe: false,
            filter: FrequencyFilter::None,
        }
    }
}

impl PreprocessConfig {
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let mut out = if self.roi {
            // Ridges are dark on a light background; the closing in
            // extract_roi merges bright structures, so locate on the negative.
            let rect = imageproc::extract_roi(&img.map(|v| 1.0 - v));
            img.crop(rect)?
        } else {
            img.clone()
        };
        if self.scale != 1.0 {
            out = imageproc::resize_bilinear(&out, self.scale)?;
        }
        if self.clahe {
            out = imageproc::clahe(
                &out,
                imageproc::CLAHE_DEFAULT_TILES,
                imageproc::CLAHE_DEFAULT_CLIP,
            )?;
        }
        match self.filter {
            FrequencyFilter::None => Ok(out),
            FrequencyFilter::Lowpass => imageproc::lowpass(&out),
            FrequencyFilter::Highpass => imageproc::highpass(&out),
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "roi={} scale={} clahe={} filter={}",
            self.roi as u8,
            self.scale,
            self.clahe as u8,
            self.filter.name()
        )
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.bool(self.roi);
        w.f64(self.scale);
        w.bool(self.clahe);
        w.u8(self.filter.code());
    }

    fn decode(r: &mut Reader) -> Result<Self> {
        Ok(Self {
            roi: r.bool()?,
            scale: r.f64()?,
            clahe: r.bool()?,
            filter: FrequencyFilter::from_code(r.u8()?)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ExtractorConfig {
    Lbp(LbpConfig),
    ConvNet(ConvNetConfig),
}

impl ExtractorConfig {
    pub fn describe(&self) -> String {
        match self {
            ExtractorConfig::Lbp(c) => {
                format!("lbp[{} {}x{}]", c.variant.name(), c.blocks.0, c.blocks.1)
            }
            ExtractorConfig::ConvNet(c) => {
                let layers: Vec<String> = c
                    .layers
                    .iter()
                    .map(|l| {
                        format!(
                            "{}f{}p{}s{}n{}",
                            l.num_filters,
                            l.filter_size,
                            l.pool_size,
                            l.pool_stride,
                            l.lcn_window.unwrap_or(0)
                        )
                    })
                    .collect();
                format!("cn[{}]", layers.join(","))
            }
        }
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        match self {
            ExtractorConfig::Lbp(c) => {
                w.u8(0);
                w.u8(match c.variant {
                    LbpVariant::Original => 0,
                    LbpVariant::Uniform => 1,
                });
                w.usize(c.blocks.0);
                w.usize(c.blocks.1);
            }
            ExtractorConfig::ConvNet(c) => {
                w.u8(1);
                w.usize(c.layers.len());
                for l in &c.layers {
                    w.usize(l.num_filters);
                    w.usize(l.filter_size);
                    w.usize(l.pool_size);
                    w.usize(l.pool_stride);
                    w.usize(l.lcn_window.unwrap_or(0));
                    w.u64(l.seed);
                }
            }
        }
    }

    fn decode(r: &mut Reader) -> Result<Self> {
        match r.u8()? {
            0 => {
                let variant = match r.u8()? {
                    0 => LbpVariant::Original,
                    1 => LbpVariant::Uniform,
                    v => return Err(Error::ModelFile(format!("unknown LBP variant {v}"))),
                };
                Ok(ExtractorConfig::Lbp(LbpConfig {
                    variant,
                    blocks: (r.usize()?, r.usize()?),
                }))
            }
            1 => {
                let n = r.usize()?;
                if n > crate::convnet::MAX_LAYERS {
                    return Err(Error::ModelFile(format!("{n} layers")));
                }
                let mut layers = Vec::with_capacity(n);
                for _ in 0..n {
                    layers.push(ConvLayerConfig {
                        num_filters: r.usize()?,
                        filter_size: r.usize()?,
                        pool_size: r.usize()?,
                        pool_stride: r.usize()?,
                        lcn_window: Some(r.usize()?).filter(|&w| w > 0),
                        seed: r.u64()?,
                    });
                }
                Ok(ExtractorConfig::ConvNet(ConvNetConfig { layers }))
            }
            t => Err(Error::ModelFile(format!("unknown extractor tag {t}"))),
        }
    }
}

/// An extractor ready to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Lbp(LbpConfig),
    ConvNet(ConvNet),
}

impl Extractor {
    pub fn build(cfg: &ExtractorConfig) -> Result<Self> {
        Ok(match cfg {
            ExtractorConfig::Lbp(c) => Extractor::Lbp(*c),
            ExtractorConfig::ConvNet(c) => Extractor::ConvNet(ConvNet::new(c.clone())?),
        })
    }

    pub fn config(&self) -> ExtractorConfig {
        match self {
            Extractor::Lbp(c) => ExtractorConfig::Lbp(*c),
            Extractor::ConvNet(net) => ExtractorConfig::ConvNet(net.config.clone()),
        }
    }

    pub fn features(&self, img: &Image) -> Result<FeatureVector> {
        match self {
            Extractor::Lbp(c) => lbp::lbp_features(img, c),
            Extractor::ConvNet(net) => net.features(img),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformConfig {
    /// Retained components as a fraction of the feature dimension.
    pub pca_fraction: f64,
    pub whiten: bool,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            pca_fraction: 0.2,
            whiten: true,
        }
    }
}

impl TransformConfig {
    pub(crate) fn encode(&self, w: &mut Writer) {
        w.f64(self.pca_fraction);
        w.bool(self.whiten);
    }
}

pub(crate) fn encode_svm_params(p: &SvmParams, w: &mut Writer) {
    w.f64(p.c);
    w.f64(p.gamma);
    w.f64(p.tol);
    w.usize(p.max_passes);
}

/// One point of the search space.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub augment: bool,
    pub extractor: ExtractorConfig,
    pub transform: TransformConfig,
    pub svm: SvmParams,
    /// Root seed; PCA and SMO draw from namespaced children of it.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn describe(&self) -> String {
        format!(
            "{} aug={} {} pca={}{} C={} gamma={}",
            self.preprocess.describe(),
            self.augment as u8,
            self.extractor.describe(),
            self.transform.pca_fraction,
            if self.transform.whiten { "+white" } else { "" },
            self.svm.c,
            self.svm.gamma
        )
    }

    pub fn pca_seed(&self) -> u64 {
        seed::derive(self.seed, "pca")
    }

    pub fn svm_seed(&self) -> u64 {
        seed::derive(self.seed, "svm")
    }
}

pub fn preprocess_all(cfg: &PreprocessConfig, images: &[Image]) -> Result<Vec<Image>> {
    images.par_iter().map(|img| cfg.apply(img)).collect()
}

/// Extracts features for every image; all vectors must share one length.
pub fn extract_all(extractor: &Extractor, images: &[Image]) -> Result<Vec<FeatureVector>> {
    let rows: Vec<FeatureVector> = images
        .par_iter()
        .map(|img| extractor.features(img))
        .collect::<Result<_>>()?;
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().find(|r| r.len() != first.len()) {
            return Err(Error::DimensionMismatch {
                expected: first.len(),
                got: bad.len(),
            });
        }
    }
    Ok(rows)
}

/// A fitted pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPipeline {
    pub config: PipelineConfig,
    pub extractor: Extractor,
    pub transform: FeatureTransform,
    pub svm: SvmModel,
}

/// Fits every stage on the full training set.
pub fn fit_final(data: &[(Image, Label)], config: &PipelineConfig) -> Result<TrainedPipeline> {
    let images: Vec<Image> = data.iter().map(|(img, _)| img.clone()).collect();
    let labels: Vec<Label> = data.iter().map(|(_, l)| *l).collect();
    let pre = preprocess_all(&config.preprocess, &images)?;
    let (train_images, train_labels) = if config.augment {
        let paired: Vec<(Image, Label)> = pre.into_iter().zip(labels).collect();
        augment::augment_training(&paired)?.into_iter().unzip()
    } else {
        (pre, labels)
    };
    let extractor = Extractor::build(&config.extractor)?;
    let features = extract_all(&extractor, &train_images)?;
    let transform = FeatureTransform::fit(
        &features,
        config.transform.pca_fraction,
        config.transform.whiten,
        config.pca_seed(),
    )?;
    let reduced: Vec<FeatureVector> = features
        .iter()
        .map(|f| transform.apply(f))
        .collect::<Result<_>>()?;
    let svm = svm::train_smo(&reduced, &train_labels, &config.svm, config.svm_seed())?;
    Ok(TrainedPipeline {
        config: config.clone(),
        extractor,
        transform,
        svm,
    })
}

pub const MAGIC: &[u8; 4] = b"LVCK";
pub const FORMAT_VERSION: u16 = 1;
const STAGES: usize = 6;
const DIGEST_LEN: usize = 32;

impl TrainedPipeline {
    /// Decision score of an image that has already been preprocessed (and
    /// cropped, when augmenting).
    pub fn patch_score(&self, img: &Image) -> Result<f64> {
        let f = self.extractor.features(img)?;
        self.svm.decision_score(&self.transform.apply(&f)?)
    }

    /// Preprocesses, then scores the whole image or the mean over its ten
    /// patches when the model was trained with augmentation.
    pub fn score(&self, img: &Image) -> Result<f64> {
        let pre = self.config.preprocess.apply(img)?;
        if self.config.augment {
            augment::averaged_score(self, &pre)
        } else {
            self.patch_score(&pre)
        }
    }

    pub fn predict(&self, img: &Image) -> Result<Label> {
        Ok(Label::from_score(self.score(img)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut stages: Vec<Vec<u8>> = Vec::with_capacity(STAGES);

        let mut w = Writer::new();
        w.u64(self.config.seed);
        stages.push(w.into_bytes());

        let mut w = Writer::new();
        self.config.preprocess.encode(&mut w);
        stages.push(w.into_bytes());

        let mut w = Writer::new();
        w.bool(self.config.augment);
        stages.push(w.into_bytes());

        let mut w = Writer::new();
        self.config.extractor.encode(&mut w);
        if let Extractor::ConvNet(net) = &self.extractor {
            for bank in &net.banks {
                w.usize(bank.in_channels);
                w.f64s(&bank.weights);
            }
        }
        stages.push(w.into_bytes());

        let mut w = Writer::new();
        self.config.transform.encode(&mut w);
        let s = &self.transform.standardizer;
        w.f64s(&s.means);
        w.f64s(&s.stds);
        let p = &self.transform.pca;
        w.f64s(&p.mean);
        w.rows(&p.components);
        w.f64s(&p.variances);
        w.bool(p.whiten);
        w.f64(p.epsilon);
        stages.push(w.into_bytes());

        let mut w = Writer::new();
        encode_svm_params(&self.config.svm, &mut w);
        w.f64(self.svm.gamma);
        w.f64(self.svm.bias);
        w.rows(&self.svm.support_vectors);
        w.f64s(&self.svm.coefficients);
        stages.push(w.into_bytes());

        let mut out = Writer::new();
        out.raw(MAGIC);
        out.u16(FORMAT_VERSION);
        for stage in &stages {
            out.bytes(stage);
        }
        let mut bytes = out.into_bytes();
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(Error::ModelFile("not a model file (bad magic)".into()));
        }
        let mut r = Reader::new(&bytes[4..]);
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFile(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut stages = Vec::with_capacity(STAGES);
        for _ in 0..STAGES {
            stages.push(r.bytes()?);
        }
        let body_len = bytes.len() - r.remaining();
        let footer = r.take(DIGEST_LEN)?;
        r.finish()?;
        if Sha256::digest(&bytes[..body_len]).as_slice() != footer {
            return Err(Error::ModelFile(
                "digest mismatch; file is corrupted".into(),
            ));
        }

        let stage = |i: usize| Reader::new(stages[i]);

        let mut r = stage(0);
        let seed = r.u64()?;
        r.finish()?;

        let mut r = stage(1);
        let preprocess = PreprocessConfig::decode(&mut r)?;
        r.finish()?;

        let mut r = stage(2);
        let augment = r.bool()?;
        r.finish()?;

        let mut r = stage(3);
        let extractor_cfg = ExtractorConfig::decode(&mut r)?;
        let extractor = match &extractor_cfg {
            ExtractorConfig::Lbp(c) => Extractor::Lbp(*c),
            ExtractorConfig::ConvNet(c) => {
                let mut banks = Vec::with_capacity(c.layers.len());
                for layer in &c.layers {
                    let in_channels = r.usize()?;
                    let weights = r.f64s()?;
                    banks.push(FilterBank::new(
                        layer.num_filters,
                        in_channels,
                        layer.filter_size,
                        weights,
                    )?);
                }
                Extractor::ConvNet(ConvNet::with_banks(c.clone(), banks)?)
            }
        };
        r.finish()?;

        let mut r = stage(4);
        let transform_cfg = TransformConfig {
            pca_fraction: r.f64()?,
            whiten: r.bool()?,
        };
        let standardizer = Standardizer {
            means: r.f64s()?,
            stds: r.f64s()?,
        };
        let pca = PcaModel {
            mean: r.f64s()?,
            components: r.rows()?,
            variances: r.f64s()?,
            whiten: r.bool()?,
            epsilon: r.f64()?,
        };
        r.finish()?;
        if pca.mean.len() != standardizer.dim()
            || pca.components.len() != pca.variances.len()
            || pca.components.iter().any(|c| c.len() != pca.mean.len())
        {
            return Err(Error::ModelFile("inconsistent transform dimensions".into()));
        }

        let mut r = stage(5);
        let svm_params = SvmParams {
            c: r.f64()?,
            gamma: r.f64()?,
            tol: r.f64()?,
            max_passes: r.usize()?,
        };
        let svm = SvmModel {
            gamma: r.f64()?,
            bias: r.f64()?,
            support_vectors: r.rows()?,
            coefficients: r.f64s()?,
        };
        r.finish()?;
        if svm.support_vectors.len() != svm.coefficients.len()
            || svm
                .support_vectors
                .iter()
                .any(|sv| sv.len() != pca.components.len())
        {
            return Err(Error::ModelFile("inconsistent SVM dimensions".into()));
        }

        Ok(TrainedPipeline {
            config: PipelineConfig {
                preprocess,
                augment,
                extractor: extractor_cfg,
                transform: transform_cfg,
                svm: svm_params,
                seed,
            },
            extractor,
            transform: FeatureTransform { standardizer, pca },
            svm,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a byte string, as printed for model files.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
