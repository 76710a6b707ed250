//! TOML pipeline configuration.
//!
//! Every stage key takes either a single value or a list of candidates;
//! a file whose keys are all scalars describes one pipeline, anything else
//! a grid.
//!
//! ```toml
//! [search]
//! seed = 7
//!
//! [preprocess]
//! scale = [0.5, 1.0]
//! filter = "none"
//!
//! [extract]
//! kind = "convnet"
//! convnet = [{ filters = 16, size = 5, pool = 3 }, { filters = 32, size = 5, pool = 3 }]
//!
//! [classify]
//! c = [1, 10, 100]
//! gamma = 0.01
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::convnet::{ConvLayerConfig, ConvNetConfig, DEFAULT_LCN_WINDOW};
use crate::error::{Error, Result};
use crate::lbp::{LbpConfig, LbpVariant};
use crate::modelsel::GridSpec;
use crate::pipeline::{
    ExtractorConfig, FrequencyFilter, PipelineConfig, PreprocessConfig, TransformConfig,
};
use crate::seed;
use crate::svm::SvmParams;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

fn one<T>(v: T) -> OneOrMany<T> {
    OneOrMany::One(v)
}

/// Parsed configuration file, before expansion into a grid.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfigFile {
    pub search: SearchSection,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub extract: ExtractSection,
    #[serde(default)]
    pub transform: TransformSection,
    #[serde(default)]
    pub classify: ClassifySection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    /// Root seed for filters, PCA, SMO and cross-validation shuffles.
    pub seed: u64,
    /// Byte budget of the on-disk stage cache.
    pub cache_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub roi: OneOrMany<bool>,
    pub scale: OneOrMany<f64>,
    pub clahe: OneOrMany<bool>,
    pub filter: OneOrMany<String>,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            roi: one(false),
            scale: one(1.0),
            clahe: one(false),
            filter: one("none".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub enabled: OneOrMany<bool>,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            enabled: one(false),
        }
    }
}

/// One convolutional layer; `lcn = 0` turns normalization off.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub filters: usize,
    pub size: usize,
    pub pool: usize,
    pub stride: Option<usize>,
    pub lcn: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    pub kind: OneOrMany<String>,
    pub lbp_variant: OneOrMany<String>,
    pub lbp_blocks: OneOrMany<[usize; 2]>,
    /// Candidate architectures, each a list of layers.
    pub convnet: OneOrMany<Vec<LayerSpec>>,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self {
            kind: one("lbp".into()),
            lbp_variant: one("uniform".into()),
            lbp_blocks: one([1, 1]),
            convnet: OneOrMany::Many(Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSection {
    pub pca_fraction: OneOrMany<f64>,
    pub whiten: OneOrMany<bool>,
}

impl Default for TransformSection {
    fn default() -> Self {
        let d = TransformConfig::default();
        Self {
            pca_fraction: one(d.pca_fraction),
            whiten: one(d.whiten),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySection {
    pub c: OneOrMany<f64>,
    pub gamma: OneOrMany<f64>,
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for ClassifySection {
    fn default() -> Self {
        let d = SvmParams::default();
        Self {
            c: one(d.c),
            gamma: one(d.gamma),
            tol: d.tol,
            max_passes: d.max_passes,
        }
    }
}

fn nonempty<T: Clone>(key: &str, v: &OneOrMany<T>) -> Result<Vec<T>> {
    let out = v.values();
    if out.is_empty() {
        return Err(Error::Config(format!("`{key}` has no candidates")));
    }
    Ok(out)
}

fn parse_filter(s: &str) -> Result<FrequencyFilter> {
    match s {
        "none" => Ok(FrequencyFilter::None),
        "lowpass" => Ok(FrequencyFilter::Lowpass),
        "highpass" => Ok(FrequencyFilter::Highpass),
        _ => Err(Error::Config(format!(
            "preprocess.filter: unknown value `{s}` (expected none, lowpass or highpass)"
        ))),
    }
}

fn parse_variant(s: &str) -> Result<LbpVariant> {
    match s {
        "uniform" => Ok(LbpVariant::Uniform),
        "original" => Ok(LbpVariant::Original),
        _ => Err(Error::Config(format!(
            "extract.lbp_variant: unknown value `{s}` (expected uniform or original)"
        ))),
    }
}

/// Layer `i` of every architecture draws its filters from the same child
/// of the root seed.
pub fn layer_seed(root: u64, layer: usize) -> u64 {
    seed::derive(root, &format!("convnet/layer{layer}"))
}

fn architecture(layers: &[LayerSpec], root: u64) -> Result<ConvNetConfig> {
    let cfg = ConvNetConfig {
        layers: layers
            .iter()
            .enumerate()
            .map(|(i, l)| ConvLayerConfig {
                num_filters: l.filters,
                filter_size: l.size,
                pool_size: l.pool,
                pool_stride: l.stride.unwrap_or(l.pool),
                lcn_window: match l.lcn {
                    None => Some(DEFAULT_LCN_WINDOW),
                    Some(0) => None,
                    Some(w) => Some(w),
                },
                seed: layer_seed(root, i),
            })
            .collect(),
    };
    cfg.validate()
        .map_err(|e| Error::Config(format!("extract.convnet: {e}")))?;
    Ok(cfg)
}

impl PipelineConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let root = self.search.seed;
        let p = &self.preprocess;
        let filters = nonempty("preprocess.filter", &p.filter)?
            .iter()
            .map(|s| parse_filter(s))
            .collect::<Result<Vec<_>>>()?;
        let scales = nonempty("preprocess.scale", &p.scale)?;
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "preprocess.scale: {s} must be positive"
            )));
        }
        let mut preprocess = Vec::new();
        for roi in nonempty("preprocess.roi", &p.roi)? {
            for &scale in &scales {
                for clahe in nonempty("preprocess.clahe", &p.clahe)? {
                    for &filter in &filters {
                        preprocess.push(PreprocessConfig {
                            roi,
                            scale,
                            clahe,
                            filter,
                        });
                    }
                }
            }
        }

        let e = &self.extract;
        let mut extractor = Vec::new();
        for kind in nonempty("extract.kind", &e.kind)? {
            match kind.as_str() {
                "lbp" => {
                    for v in nonempty("extract.lbp_variant", &e.lbp_variant)? {
                        let variant = parse_variant(&v)?;
                        for [r, c] in nonempty("extract.lbp_blocks", &e.lbp_blocks)? {
                            if r == 0 || c == 0 {
                                return Err(Error::Config(
                                    "extract.lbp_blocks: block counts must be at least 1".into(),
                                ));
                            }
                            extractor.push(ExtractorConfig::Lbp(LbpConfig {
                                variant,
                                blocks: (r, c),
                            }));
                        }
                    }
                }
                "convnet" => {
                    let archs = nonempty("extract.convnet", &e.convnet)?;
                    for layers in archs {
                        extractor.push(ExtractorConfig::ConvNet(architecture(&layers, root)?));
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "extract.kind: unknown value `{other}` (expected lbp or convnet)"
                    )))
                }
            }
        }

        let t = &self.transform;
        let mut transform = Vec::new();
        for pca_fraction in nonempty("transform.pca_fraction", &t.pca_fraction)? {
            if !(pca_fraction > 0.0 && pca_fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "transform.pca_fraction: {pca_fraction} must lie in (0, 1]"
                )));
            }
            for whiten in nonempty("transform.whiten", &t.whiten)? {
                transform.push(TransformConfig {
                    pca_fraction,
                    whiten,
                });
            }
        }

        let k = &self.classify;
        let mut classify = Vec::new();
        for c in nonempty("classify.c", &k.c)? {
            for gamma in nonempty("classify.gamma", &k.gamma)? {
                let params = SvmParams {
                    c,
                    gamma,
                    tol: k.tol,
                    max_passes: k.max_passes,
                };
                if !(c > 0.0 && gamma > 0.0 && k.tol > 0.0 && k.max_passes > 0) {
                    return Err(Error::Config(format!(
                        "classify: c, gamma, tol and max_passes must be positive (c={c}, gamma={gamma})"
                    )));
                }
                classify.push(params);
            }
        }

        Ok(GridSpec {
            preprocess,
            augment: nonempty("augment.enabled", &self.augment.enabled)?,
            extractor,
            transform,
            classify,
            seed: root,
        })
    }

    /// The pipeline described by a file with exactly one candidate.
    pub fn single(&self) -> Result<Option<PipelineConfig>> {
        let grid = self.grid()?;
        Ok(if grid.len() == 1 {
            grid.candidates().pop()
        } else {
            None
        })
    }
}
