//! Model selection: the ACE metric, stratified 5x2 cross-validation, and a
//! grid search that memoizes stage outputs.
//!
//! A candidate pipeline is a chain of stages (preprocess → augment →
//! extract → transform → classify). Every stage output is keyed by a
//! digest of the stage config, the key of its input, and the identity of
//! the data split, so a stage only reruns when its input changes.
//! Candidates that share a prefix of configs share those stage outputs.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::augment;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::imageproc::Image;
use crate::pipeline::{
    self, encode_svm_params, Extractor, ExtractorConfig, PipelineConfig, PreprocessConfig,
    TransformConfig,
};
use crate::svm::{self, SvmParams};
use crate::transform::FeatureTransform;
use crate::{FeatureVector, Label};

// ---------------------------------------------------------------------------
// ACE
// ---------------------------------------------------------------------------

/// Error rates on a labeled set. `fpr` is the fraction of live samples
/// classified fake, `fnr` the fraction of fakes classified live, and `ace`
/// their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub fpr: f64,
    pub fnr: f64,
    pub ace: f64,
    pub live_total: usize,
    pub fake_total: usize,
    pub live_wrong: usize,
    pub fake_wrong: usize,
}

impl EvalReport {
    pub fn from_counts(
        live_total: usize,
        fake_total: usize,
        live_wrong: usize,
        fake_wrong: usize,
    ) -> Result<Self> {
        if live_total == 0 || fake_total == 0 {
            return Err(Error::MissingClass(format!(
                "ACE needs both classes (live {live_total}, fake {fake_total})"
            )));
        }
        let fpr = live_wrong as f64 / live_total as f64;
        let fnr = fake_wrong as f64 / fake_total as f64;
        Ok(Self {
            fpr,
            fnr,
            ace: (fpr + fnr) / 2.0,
            live_total,
            fake_total,
            live_wrong,
            fake_wrong,
        })
    }
}

pub fn ace(predictions: &[Label], truth: &[Label]) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predictions.len(),
        });
    }
    let (mut lt, mut ft, mut lw, mut fw) = (0, 0, 0, 0);
    for (p, t) in predictions.iter().zip(truth) {
        match t {
            Label::Live => {
                lt += 1;
                lw += (p != t) as usize;
            }
            Label::Fake => {
                ft += 1;
                fw += (p != t) as usize;
            }
        }
    }
    EvalReport::from_counts(lt, ft, lw, fw)
}

// ---------------------------------------------------------------------------
// 5x2 cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub repetition: usize,
    /// 0 trains on the first half, 1 on the second.
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const REPETITIONS: usize = 5;

/// Five seeded stratified shuffles, each cut into two halves that take
/// turns as training and test set. Index lists are sorted.
pub fn five_by_two_splits(labels: &[Label], seed: u64) -> Result<Vec<Split>> {
    let by_class: Vec<Vec<usize>> = [Label::Live, Label::Fake]
        .iter()
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == *c).collect())
        .collect();
    for (class, idx) in [Label::Live, Label::Fake].iter().zip(&by_class) {
        if idx.len() < 2 {
            return Err(Error::MissingClass(format!(
                "class {class} has {} samples; stratified 2-fold splitting needs at least 2",
                idx.len()
            )));
        }
    }
    let mut splits = Vec::with_capacity(2 * REPETITIONS);
    for rep in 0..REPETITIONS {
        let mut rng = crate::seed::rng(crate::seed::derive(seed, &format!("cv/{rep}")));
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (ci, idx) in by_class.iter().enumerate() {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            // Odd class sizes give the extra sample to alternating halves.
            let cut = if ci % 2 == 0 {
                idx.len() / 2
            } else {
                idx.len().div_ceil(2)
            };
            a.extend_from_slice(&idx[..cut]);
            b.extend_from_slice(&idx[cut..]);
        }
        a.sort_unstable();
        b.sort_unstable();
        splits.push(Split {
            repetition: rep,
            fold: 0,
            train: a.clone(),
            test: b.clone(),
        });
        splits.push(Split {
            repetition: rep,
            fold: 1,
            train: b,
            test: a,
        });
    }
    Ok(splits)
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Candidate values per stage; the search space is their Cartesian product.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub preprocess: Vec<PreprocessConfig>,
    pub augment: Vec<bool>,
    pub extractor: Vec<ExtractorConfig>,
    pub transform: Vec<TransformConfig>,
    pub classify: Vec<SvmParams>,
    pub seed: u64,
}

impl GridSpec {
    pub fn single(config: &PipelineConfig) -> Self {
        Self {
            preprocess: vec![config.preprocess],
            augment: vec![config.augment],
            extractor: vec![config.extractor.clone()],
            transform: vec![config.transform],
            classify: vec![config.svm],
            seed: config.seed,
        }
    }

    pub fn len(&self) -> usize {
        self.preprocess.len()
            * self.augment.len()
            * self.extractor.len()
            * self.transform.len()
            * self.classify.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Candidates in lexicographic order over (preprocess, augment,
    /// extractor, transform, classify).
    pub fn candidates(&self) -> Vec<PipelineConfig> {
        let mut out = Vec::with_capacity(self.len());
        for p in &self.preprocess {
            for &a in &self.augment {
                for e in &self.extractor {
                    for t in &self.transform {
                        for s in &self.classify {
                            out.push(PipelineConfig {
                                preprocess: *p,
                                augment: a,
                                extractor: e.clone(),
                                transform: *t,
                                svm: *s,
                                seed: self.seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Stage outputs and their cache
// ---------------------------------------------------------------------------

/// Digest identifying one stage output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StageCacheKey(pub [u8; 32]);

impl StageCacheKey {
    fn derive(stage: Stage, config: &[u8], upstream: &StageCacheKey) -> Self {
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update((config.len() as u64).to_le_bytes());
        h.update(config);
        h.update(upstream.0);
        Self(h.finalize().into())
    }

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Preprocess,
    Augment,
    Extract,
    Transform,
    Classify,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Preprocess,
        Stage::Augment,
        Stage::Extract,
        Stage::Transform,
        Stage::Classify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Augment => "augment",
            Stage::Extract => "extract",
            Stage::Transform => "transform",
            Stage::Classify => "classify",
        }
    }
}

/// Training and test sides of one split after a stage. Test items come in
/// groups of `group` consecutive entries per original test image (10 when
/// augmenting, else 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData<T> {
    pub train: Vec<T>,
    pub train_labels: Vec<Label>,
    pub test: Vec<T>,
    pub test_labels: Vec<Label>,
    pub group: usize,
}

impl<T> SplitData<T> {
    fn map<U>(&self, f: impl Fn(&[T]) -> Result<Vec<U>>) -> Result<SplitData<U>> {
        Ok(SplitData {
            train: f(&self.train)?,
            train_labels: self.train_labels.clone(),
            test: f(&self.test)?,
            test_labels: self.test_labels.clone(),
            group: self.group,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageValue {
    Images(SplitData<Image>),
    Features(SplitData<FeatureVector>),
}

fn encode_labels(w: &mut Writer, labels: &[Label]) {
    w.usize(labels.len());
    for l in labels {
        w.u8(matches!(l, Label::Live) as u8);
    }
}

fn decode_labels(r: &mut Reader) -> Result<Vec<Label>> {
    let n = r.usize()?;
    (0..n)
        .map(|_| Ok(if r.bool()? { Label::Live } else { Label::Fake }))
        .collect()
}

impl StageValue {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            StageValue::Images(d) => {
                w.u8(0);
                w.usize(d.group);
                encode_labels(&mut w, &d.train_labels);
                encode_labels(&mut w, &d.test_labels);
                for set in [&d.train, &d.test] {
                    w.usize(set.len());
                    for img in set {
                        w.usize(img.width());
                        w.usize(img.height());
                        w.f64s(img.data());
                    }
                }
            }
            StageValue::Features(d) => {
                w.u8(1);
                w.usize(d.group);
                encode_labels(&mut w, &d.train_labels);
                encode_labels(&mut w, &d.test_labels);
                w.rows(&d.train);
                w.rows(&d.test);
            }
        }
        w.into_bytes()
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let group = r.usize()?;
        let train_labels = decode_labels(&mut r)?;
        let test_labels = decode_labels(&mut r)?;
        let value = match tag {
            0 => {
                let mut sets = Vec::with_capacity(2);
                for _ in 0..2 {
                    let n = r.usize()?;
                    let mut imgs = Vec::with_capacity(n.min(1 << 20));
                    for _ in 0..n {
                        let (w, h) = (r.usize()?, r.usize()?);
                        imgs.push(Image::new(w, h, r.f64s()?)?);
                    }
                    sets.push(imgs);
                }
                let test = sets.pop().expect("two sets");
                let train = sets.pop().expect("two sets");
                StageValue::Images(SplitData {
                    train,
                    train_labels,
                    test,
                    test_labels,
                    group,
                })
            }
            1 => StageValue::Features(SplitData {
                train: r.rows()?,
                train_labels,
                test: r.rows()?,
                test_labels,
                group,
            }),
            t => return Err(Error::ModelFile(format!("unknown cache entry tag {t}"))),
        };
        r.finish()?;
        Ok(value)
    }

    fn images(&self) -> &SplitData<Image> {
        match self {
            StageValue::Images(d) => d,
            StageValue::Features(_) => unreachable!("stage order yields images here"),
        }
    }

    fn features(&self) -> &SplitData<FeatureVector> {
        match self {
            StageValue::Features(d) => d,
            StageValue::Images(_) => unreachable!("stage order yields features here"),
        }
    }
}

/// Stage outputs persisted as `<digest>.bin` files under a byte budget.
/// When the budget is exceeded the least recently used entries are
/// removed. Writes go through a temporary file and a rename, so readers
/// never see partial entries and concurrent writers of one key are
/// harmless.
#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
    budget: u64,
    state: Mutex<DiskState>,
}

#[derive(Debug, Default)]
struct DiskState {
    entries: HashMap<String, (u64, u64)>,
    total: u64,
    clock: u64,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>, budget: u64) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut found = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(stem) = name.strip_suffix(".bin") else {
                continue;
            };
            let meta = entry.metadata().map_err(|e| Error::io(entry.path(), e))?;
            let modified = meta.modified().ok();
            found.push((modified, stem.to_string(), meta.len()));
        }
        found.sort();
        let mut state = DiskState::default();
        for (_, key, size) in found {
            state.clock += 1;
            state.total += size;
            state.entries.insert(key, (size, state.clock));
        }
        let cache = Self {
            dir,
            budget,
            state: Mutex::new(state),
        };
        cache.evict(None);
        Ok(cache)
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin"))
    }

    pub fn total_bytes(&self) -> u64 {
        self.state.lock().expect("cache lock").total
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &StageCacheKey) -> Option<Vec<u8>> {
        let hex = key.hex();
        {
            let mut st = self.state.lock().expect("cache lock");
            st.clock += 1;
            let clock = st.clock;
            st.entries.get_mut(&hex)?.1 = clock;
        }
        let path = self.path(&hex);
        let bytes = std::fs::read(&path).ok()?;
        if let Ok(f) = std::fs::File::options().append(true).open(&path) {
            let _ = f.set_modified(std::time::SystemTime::now());
        }
        Some(bytes)
    }

    pub fn put(&self, key: &StageCacheKey, bytes: &[u8]) -> Result<()> {
        let size = bytes.len() as u64;
        if size > self.budget {
            return Ok(());
        }
        let hex = key.hex();
        let path = self.path(&hex);
        let tmp = self
            .dir
            .join(format!("{hex}.{:?}.tmp", std::thread::current().id()));
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        {
            let mut st = self.state.lock().expect("cache lock");
            st.clock += 1;
            let clock = st.clock;
            if let Some((old, _)) = st.entries.insert(hex.clone(), (size, clock)) {
                st.total -= old;
            }
            st.total += size;
        }
        self.evict(Some(&hex));
        Ok(())
    }

    fn evict(&self, keep: Option<&str>) {
        let mut st = self.state.lock().expect("cache lock");
        while st.total > self.budget {
            let victim = st
                .entries
                .iter()
                .filter(|(k, _)| Some(k.as_str()) != keep)
                .min_by_key(|(_, (_, stamp))| *stamp)
                .map(|(k, _)| k.clone());
            let Some(victim) = victim else { break };
            if let Some((size, _)) = st.entries.remove(&victim) {
                st.total -= size;
            }
            let _ = std::fs::remove_file(self.path(&victim));
        }
    }
}

/// Executions per stage during one search, plus reuse from disk.
#[derive(Debug, Default)]
pub struct StageCounters {
    executions: [AtomicUsize; 5],
    disk_hits: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageCounts {
    pub preprocess: usize,
    pub augment: usize,
    pub extract: usize,
    pub transform: usize,
    pub classify: usize,
    pub disk_hits: usize,
}

impl StageCounts {
    pub fn get(&self, stage: Stage) -> usize {
        match stage {
            Stage::Preprocess => self.preprocess,
            Stage::Augment => self.augment,
            Stage::Extract => self.extract,
            Stage::Transform => self.transform,
            Stage::Classify => self.classify,
        }
    }

    pub fn total(&self) -> usize {
        Stage::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

impl StageCounters {
    fn bump(&self, stage: Stage) {
        self.executions[stage as usize].fetch_add(1, Ordering::Relaxed);
    }

    fn snapshot(&self) -> StageCounts {
        let e = |s: Stage| self.executions[s as usize].load(Ordering::Relaxed);
        StageCounts {
            preprocess: e(Stage::Preprocess),
            augment: e(Stage::Augment),
            extract: e(Stage::Extract),
            transform: e(Stage::Transform),
            classify: e(Stage::Classify),
            disk_hits: self.disk_hits.load(Ordering::Relaxed),
        }
    }
}

// ---------------------------------------------------------------------------
// Stage computations
// ---------------------------------------------------------------------------

fn run_preprocess(
    cfg: &PreprocessConfig,
    data: &[(Image, Label)],
    split: &Split,
) -> Result<StageValue> {
    let pick = |idx: &[usize]| -> (Vec<Image>, Vec<Label>) {
        idx.iter().map(|&i| (data[i].0.clone(), data[i].1)).unzip()
    };
    let (train, train_labels) = pick(&split.train);
    let (test, test_labels) = pick(&split.test);
    Ok(StageValue::Images(SplitData {
        train: pipeline::preprocess_all(cfg, &train)?,
        train_labels,
        test: pipeline::preprocess_all(cfg, &test)?,
        test_labels,
        group: 1,
    }))
}

fn run_augment(enabled: bool, input: &SplitData<Image>) -> Result<StageValue> {
    if !enabled {
        return Ok(StageValue::Images(input.clone()));
    }
    let paired: Vec<(Image, Label)> = input
        .train
        .iter()
        .cloned()
        .zip(input.train_labels.iter().copied())
        .collect();
    let (train, train_labels) = augment::augment_training(&paired)?.into_iter().unzip();
    let mut test = Vec::with_capacity(input.test.len() * augment::PATCHES_PER_IMAGE);
    for img in &input.test {
        test.extend(augment::make_patches(img)?.patches);
    }
    Ok(StageValue::Images(SplitData {
        train,
        train_labels,
        test,
        test_labels: input.test_labels.clone(),
        group: augment::PATCHES_PER_IMAGE,
    }))
}

fn run_extract(cfg: &ExtractorConfig, input: &SplitData<Image>) -> Result<StageValue> {
    let extractor = Extractor::build(cfg)?;
    let out = input.map(|imgs| pipeline::extract_all(&extractor, imgs))?;
    if let (Some(a), Some(b)) = (out.train.first(), out.test.first()) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
    }
    Ok(StageValue::Features(out))
}

fn run_transform(
    cfg: &TransformConfig,
    seed: u64,
    input: &SplitData<FeatureVector>,
) -> Result<StageValue> {
    let t = FeatureTransform::fit(&input.train, cfg.pca_fraction, cfg.whiten, seed)?;
    Ok(StageValue::Features(
        input.map(|rows| rows.iter().map(|r| t.apply(r)).collect())?,
    ))
}

fn run_classify(params: &SvmParams, seed: u64, input: &SplitData<FeatureVector>) -> Result<f64> {
    let model = svm::train_smo(&input.train, &input.train_labels, params, seed)?;
    let mut predictions = Vec::with_capacity(input.test_labels.len());
    for group in input.test.chunks(input.group) {
        let scores = group
            .iter()
            .map(|x| model.decision_score(x))
            .collect::<Result<Vec<_>>>()?;
        predictions.push(Label::from_score(augment::mean_score(&scores)));
    }
    Ok(ace(&predictions, &input.test_labels)?.ace)
}

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub enum CacheMode {
    /// Every candidate recomputes its whole chain.
    Disabled,
    /// Stage outputs are shared within the search.
    #[default]
    Memory,
    /// As `Memory`, and outputs persist in a directory across searches.
    Disk { dir: PathBuf, budget_bytes: u64 },
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    pub cache: CacheMode,
    /// Evaluate only the first `n` of the ten splits.
    pub split_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateResult {
    pub index: usize,
    pub config: PipelineConfig,
    /// Validation ACE per split; 1.0 where the candidate failed.
    pub fold_aces: Vec<f64>,
    pub mean_ace: f64,
    pub failed: bool,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: usize,
    pub table: Vec<CandidateResult>,
    pub counts: StageCounts,
}

impl SearchOutcome {
    pub fn best_config(&self) -> &PipelineConfig {
        &self.table[self.best].config
    }

    /// Plain-text table, one row per candidate.
    pub fn render(&self) -> String {
        let mut out = String::from("#  mean_ACE%  folds  status  config\n");
        for r in &self.table {
            out.push_str(&format!(
                "{:<3}{:>9.2}  {:>5}  {:<6}  {}{}\n",
                r.index,
                100.0 * r.mean_ace,
                r.fold_aces.len(),
                if r.failed { "FAILED" } else { "ok" },
                r.config.describe(),
                if r.index == self.best {
                    "  <- best"
                } else {
                    ""
                }
            ));
            for e in &r.errors {
                out.push_str(&format!("     ! {e}\n"));
            }
        }
        out
    }
}

fn data_digest(data: &[(Image, Label)]) -> StageCacheKey {
    let mut h = Sha256::new();
    h.update((data.len() as u64).to_le_bytes());
    for (img, label) in data {
        h.update((img.width() as u64).to_le_bytes());
        h.update((img.height() as u64).to_le_bytes());
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
        h.update([matches!(label, Label::Live) as u8]);
    }
    StageCacheKey(h.finalize().into())
}

fn split_key(data: &StageCacheKey, split: &Split) -> StageCacheKey {
    let mut w = Writer::new();
    for idx in [&split.train, &split.test] {
        w.usize(idx.len());
        idx.iter().for_each(|&i| w.usize(i));
    }
    StageCacheKey::derive(Stage::Preprocess, &w.into_bytes(), data)
}

struct CandidateKeys {
    keys: [StageCacheKey; 5],
}

fn encoded(f: impl FnOnce(&mut Writer)) -> Vec<u8> {
    let mut w = Writer::new();
    f(&mut w);
    w.into_bytes()
}

fn candidate_keys(cfg: &PipelineConfig, split: &StageCacheKey) -> CandidateKeys {
    let pre = StageCacheKey::derive(
        Stage::Preprocess,
        &encoded(|w| cfg.preprocess.encode(w)),
        split,
    );
    let aug = StageCacheKey::derive(Stage::Augment, &[cfg.augment as u8], &pre);
    let ext = StageCacheKey::derive(Stage::Extract, &encoded(|w| cfg.extractor.encode(w)), &aug);
    let tr = StageCacheKey::derive(
        Stage::Transform,
        &encoded(|w| {
            cfg.transform.encode(w);
            w.u64(cfg.pca_seed());
        }),
        &ext,
    );
    let cls = StageCacheKey::derive(
        Stage::Classify,
        &encoded(|w| {
            encode_svm_params(&cfg.svm, w);
            w.u64(cfg.svm_seed());
        }),
        &tr,
    );
    CandidateKeys {
        keys: [pre, aug, ext, tr, cls],
    }
}

type Outcome = std::result::Result<Arc<StageValue>, String>;

struct Runner<'a> {
    data: &'a [(Image, Label)],
    counters: StageCounters,
    disk: Option<DiskCache>,
}

impl Runner<'_> {
    fn compute(
        &self,
        stage: Stage,
        key: &StageCacheKey,
        f: impl FnOnce() -> Result<StageValue>,
    ) -> Outcome {
        if let Some(disk) = &self.disk {
            if let Some(value) = disk.get(key).and_then(|b| StageValue::decode(&b).ok()) {
                self.counters.disk_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(Arc::new(value));
            }
        }
        self.counters.bump(stage);
        let value = f().map_err(|e| format!("{}: {e}", stage.name()))?;
        if let Some(disk) = &self.disk {
            // A failed write only loses reuse, never correctness.
            let _ = disk.put(key, &value.encode());
        }
        Ok(Arc::new(value))
    }

    fn stage(
        &self,
        stage: Stage,
        cfg: &PipelineConfig,
        split: &Split,
        key: &StageCacheKey,
        input: Option<&StageValue>,
    ) -> Outcome {
        self.compute(stage, key, || match stage {
            Stage::Preprocess => run_preprocess(&cfg.preprocess, self.data, split),
            Stage::Augment => run_augment(cfg.augment, input.expect("upstream").images()),
            Stage::Extract => run_extract(&cfg.extractor, input.expect("upstream").images()),
            Stage::Transform => run_transform(
                &cfg.transform,
                cfg.pca_seed(),
                input.expect("upstream").features(),
            ),
            Stage::Classify => unreachable!("classification is a leaf"),
        })
    }

    fn classify(
        &self,
        cfg: &PipelineConfig,
        input: &StageValue,
    ) -> std::result::Result<f64, String> {
        self.counters.bump(Stage::Classify);
        run_classify(&cfg.svm, cfg.svm_seed(), input.features())
            .map_err(|e| format!("{}: {e}", Stage::Classify.name()))
    }

    /// Whole chain for one candidate, nothing shared.
    fn uncached(
        &self,
        cfg: &PipelineConfig,
        split: &Split,
        keys: &CandidateKeys,
    ) -> std::result::Result<f64, String> {
        let mut value: Option<Arc<StageValue>> = None;
        for (i, &stage) in Stage::ALL[..4].iter().enumerate() {
            value = Some(self.stage(stage, cfg, split, &keys.keys[i], value.as_deref())?);
        }
        self.classify(cfg, value.as_deref().expect("four stages ran"))
    }

    /// Level by level: each distinct key of a stage runs once, in
    /// parallel with the other distinct keys of that stage.
    fn cached(
        &self,
        candidates: &[PipelineConfig],
        split: &Split,
        keys: &[CandidateKeys],
    ) -> Vec<std::result::Result<f64, String>> {
        let mut upstream: Vec<Option<StageCacheKey>> = vec![None; candidates.len()];
        let mut values: HashMap<StageCacheKey, Outcome> = HashMap::new();
        for (level, &stage) in Stage::ALL[..4].iter().enumerate() {
            let mut jobs: BTreeMap<StageCacheKey, usize> = BTreeMap::new();
            for (ci, k) in keys.iter().enumerate() {
                jobs.entry(k.keys[level]).or_insert(ci);
            }
            let done: Vec<(StageCacheKey, Outcome)> = jobs
                .into_par_iter()
                .map(|(key, ci)| {
                    let input = upstream[ci].map(|u| values[&u].clone());
                    let out = match input {
                        Some(Err(e)) => Err(e),
                        Some(Ok(v)) => self.stage(stage, &candidates[ci], split, &key, Some(&v)),
                        None => self.stage(stage, &candidates[ci], split, &key, None),
                    };
                    (key, out)
                })
                .collect();
            // Outputs two levels up are no longer needed.
            if level >= 1 {
                let stale: Vec<StageCacheKey> = upstream.iter().flatten().copied().collect();
                for k in stale {
                    values.remove(&k);
                }
            }
            values.extend(done);
            for (ci, k) in keys.iter().enumerate() {
                upstream[ci] = Some(k.keys[level]);
            }
        }
        candidates
            .par_iter()
            .zip(keys)
            .map(|(cfg, k)| match &values[&k.keys[3]] {
                Err(e) => Err(e.clone()),
                Ok(v) => self.classify(cfg, v),
            })
            .collect()
    }
}

/// Scores every candidate by mean validation ACE over the 5x2 splits and
/// picks the lowest; ties go to fewer PCA components, then smaller C, then
/// earlier grid order. A candidate that fails on a split scores ACE 1 there
/// and is flagged.
pub fn grid_search(
    data: &[(Image, Label)],
    grid: &GridSpec,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("grid has no candidates".into()));
    }
    let labels: Vec<Label> = data.iter().map(|(_, l)| *l).collect();
    let mut splits = five_by_two_splits(&labels, crate::seed::derive(grid.seed, "cv"))?;
    if let Some(n) = opts.split_limit {
        splits.truncate(n.max(1));
    }
    let candidates = grid.candidates();
    let disk = match &opts.cache {
        CacheMode::Disk { dir, budget_bytes } => Some(DiskCache::open(dir.clone(), *budget_bytes)?),
        _ => None,
    };
    let runner = Runner {
        data,
        counters: StageCounters::default(),
        disk,
    };
    let digest = data_digest(data);

    let mut per_split: Vec<Vec<std::result::Result<f64, String>>> =
        Vec::with_capacity(splits.len());
    for split in &splits {
        let sk = split_key(&digest, split);
        let keys: Vec<CandidateKeys> = candidates.iter().map(|c| candidate_keys(c, &sk)).collect();
        let results = match opts.cache {
            CacheMode::Disabled => candidates
                .par_iter()
                .zip(&keys)
                .map(|(c, k)| runner.uncached(c, split, k))
                .collect(),
            _ => runner.cached(&candidates, split, &keys),
        };
        per_split.push(results);
    }

    let table: Vec<CandidateResult> = candidates
        .into_iter()
        .enumerate()
        .map(|(index, config)| {
            let mut errors = Vec::new();
            let fold_aces: Vec<f64> = per_split
                .iter()
                .enumerate()
                .map(|(s, results)| match &results[index] {
                    Ok(a) => *a,
                    Err(e) => {
                        errors.push(format!("split {s}: {e}"));
                        1.0
                    }
                })
                .collect();
            let mean_ace = fold_aces.iter().sum::<f64>() / fold_aces.len() as f64;
            CandidateResult {
                index,
                config,
                fold_aces,
                mean_ace,
                failed: !errors.is_empty(),
                errors,
            }
        })
        .collect();

    let best = table
        .iter()
        .min_by(|a, b| {
            a.mean_ace
                .total_cmp(&b.mean_ace)
                .then(
                    a.config
                        .transform
                        .pca_fraction
                        .total_cmp(&b.config.transform.pca_fraction),
                )
                .then(a.config.svm.c.total_cmp(&b.config.svm.c))
                .then(a.index.cmp(&b.index))
        })
        .expect("nonempty grid")
        .index;

    Ok(SearchOutcome {
        best,
        table,
        counts: runner.counters.snapshot(),
    })
}

/// Cache directory from `LIVECHECK_CACHE_DIR`, if set.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os("LIVECHECK_CACHE_DIR")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

pub const DEFAULT_CACHE_BUDGET: u64 = 4 << 30;

pub fn cache_mode_for(dir: Option<&Path>, budget_bytes: u64) -> CacheMode {
    match dir {
        Some(d) => CacheMode::Disk {
            dir: d.to_path_buf(),
            budget_bytes,
        },
        None => CacheMode::Memory,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Fake, Live};

    #[test]
    fn ace_arithmetic() {
        let truth = [Live, Live, Fake, Fake];
        let r = ace(&truth, &truth).unwrap();
        assert_eq!((r.fpr, r.fnr, r.ace), (0.0, 0.0, 0.0));

        let r = EvalReport::from_counts(10, 10, 1, 2).unwrap();
        assert_eq!(r.fpr, 0.1);
        assert_eq!(r.fnr, 0.2);
        assert!((r.ace - 0.15).abs() <= f64::EPSILON);

        let r = ace(&[Live; 4], &truth).unwrap();
        assert_eq!((r.fpr, r.fnr, r.ace), (0.0, 1.0, 0.5));
        assert!(matches!(
            ace(&[Live, Live], &[Live, Live]),
            Err(Error::MissingClass(_))
        ));
        assert!(ace(&[Live], &truth).is_err());
    }

    #[test]
    fn ace_relabel_symmetry() {
        let truth = [Live, Live, Live, Fake, Fake];
        let pred = [Live, Fake, Live, Live, Fake];
        let flip = |v: &[Label]| -> Vec<Label> {
            v.iter()
                .map(|l| if *l == Live { Fake } else { Live })
                .collect()
        };
        let a = ace(&pred, &truth).unwrap();
        let b = ace(&flip(&pred), &flip(&truth)).unwrap();
        assert_eq!(a.ace, b.ace);
        assert_eq!((a.fpr, a.fnr), (b.fnr, b.fpr));
    }

    #[test]
    fn splits_structure() {
        let labels: Vec<Label> = (0..10)
            .map(|i| if i % 2 == 0 { Live } else { Fake })
            .collect();
        let splits = five_by_two_splits(&labels, 3).unwrap();
        assert_eq!(splits.len(), 10);
        for pair in splits.chunks(2) {
            assert_eq!(pair[0].train, pair[1].test);
            assert_eq!(pair[0].test, pair[1].train);
        }
        for s in &splits {
            assert_eq!(s.train.len(), 5);
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(splits, five_by_two_splits(&labels, 3).unwrap());
        assert_ne!(splits, five_by_two_splits(&labels, 4).unwrap());
    }

    #[test]
    fn splits_are_stratified() {
        let labels: Vec<Label> = (0..23).map(|i| if i < 9 { Live } else { Fake }).collect();
        for s in five_by_two_splits(&labels, 1).unwrap() {
            for fold in [&s.train, &s.test] {
                let live = fold.iter().filter(|&&i| labels[i] == Live).count() as f64;
                let fake = fold.len() as f64 - live;
                assert!((live - 4.5).abs() <= 1.0);
                assert!((fake - 7.0).abs() <= 1.0);
            }
        }
        assert!(five_by_two_splits(&[Live, Fake, Fake], 0).is_err());
    }

    #[test]
    fn stage_value_codec() {
        let v = StageValue::Features(SplitData {
            train: vec![vec![1.0, -2.5], vec![0.0, f64::MIN_POSITIVE]],
            train_labels: vec![Live, Fake],
            test: vec![vec![3.0, 4.0]],
            test_labels: vec![Fake],
            group: 1,
        });
        assert_eq!(StageValue::decode(&v.encode()).unwrap(), v);
        let i = StageValue::Images(SplitData {
            train: vec![Image::filled(2, 3, 0.5).unwrap()],
            train_labels: vec![Live],
            test: vec![Image::filled(1, 1, 0.0).unwrap(); 10],
            test_labels: vec![Fake],
            group: 10,
        });
        assert_eq!(StageValue::decode(&i.encode()).unwrap(), i);
    }

    #[test]
    fn disk_cache_evicts_least_recent() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path(), 250).unwrap();
        let key = |b: u8| StageCacheKey([b; 32]);
        cache.put(&key(1), &[0; 100]).unwrap();
        cache.put(&key(2), &[0; 100]).unwrap();
        assert!(cache.get(&key(1)).is_some());
        cache.put(&key(3), &[0; 100]).unwrap();
        assert!(cache.get(&key(2)).is_none());
        assert!(cache.get(&key(1)).is_some());
        assert!(cache.get(&key(3)).is_some());
        assert_eq!(cache.total_bytes(), 200);
        cache.put(&key(4), &[0; 300]).unwrap();
        assert!(cache.get(&key(4)).is_none());

        let reopened = DiskCache::open(dir.path(), 250).unwrap();
        assert_eq!(reopened.len(), 2);
        let small = DiskCache::open(dir.path(), 150).unwrap();
        assert_eq!(small.len(), 1);
    }
}
