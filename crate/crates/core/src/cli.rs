//! Dataset ingestion and the command implementations behind the binary.
//!
//! Commands write their normal output to `out` and per-item diagnostics to
//! `err`, so they can be driven from tests as well as from `main`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::PipelineConfigFile;
use crate::error::{Error, Result};
use crate::imageproc::{self, Image};
use crate::modelsel::{self, EvalReport, GridSpec, SearchOptions, SearchOutcome};
use crate::pipeline::{self, TrainedPipeline};
use crate::Label;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    /// Path relative to the dataset root.
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn require_both_classes(&self) -> Result<()> {
        for label in [Label::Live, Label::Fake] {
            if self.count(label) == 0 {
                return Err(Error::MissingClass(format!(
                    "no {label} images under {}",
                    self.root.join(label.as_str()).display()
                )));
            }
        }
        Ok(())
    }
}

/// Lists `<root>/live` then `<root>/fake`, each in lexicographic file-name
/// order. Hidden files and subdirectories are ignored.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut entries = Vec::new();
    for label in [Label::Live, Label::Fake] {
        let dir = root.join(label.as_str());
        if !dir.is_dir() {
            return Err(Error::invalid(format!(
                "dataset {} has no `{}` subdirectory",
                root.display(),
                label.as_str()
            )));
        }
        let mut names = Vec::new();
        for item in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let item = item.map_err(|e| Error::io(&dir, e))?;
            let name = item.file_name();
            if name.to_string_lossy().starts_with('.') {
                continue;
            }
            let kind = item.file_type().map_err(|e| Error::io(item.path(), e))?;
            if kind.is_dir() {
                continue;
            }
            names.push(name);
        }
        names.sort();
        entries.extend(names.into_iter().map(|n| DatasetEntry {
            path: PathBuf::from(label.as_str()).join(n),
            label,
        }));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
    })
}

/// Images with their labels, plus the errors of skipped files.
pub type LoadedImages = (Vec<(Image, Label)>, Vec<Error>);

/// Reads every image of the manifest in order. Unreadable files abort the
/// load unless `skip_unreadable` is set, in which case they are returned
/// separately with their errors.
pub fn load_images(manifest: &DatasetManifest, skip_unreadable: bool) -> Result<LoadedImages> {
    let results: Vec<Result<(Image, Label)>> = manifest
        .entries
        .par_iter()
        .map(|e| imageproc::read_image(manifest.root.join(&e.path)).map(|img| (img, e.label)))
        .collect();
    let mut images = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(pair) => images.push(pair),
            Err(e) if skip_unreadable => skipped.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok((images, skipped))
}

/// Loads a labeled dataset that must contain both classes.
pub fn load_training_set(
    root: &Path,
    skip_unreadable: bool,
    err: &mut dyn Write,
) -> Result<Vec<(Image, Label)>> {
    let manifest = load_dataset(root)?;
    manifest.require_both_classes()?;
    let (data, skipped) = load_images(&manifest, skip_unreadable)?;
    for e in &skipped {
        let _ = writeln!(err, "skipped: {e}");
    }
    let live = data.iter().filter(|(_, l)| *l == Label::Live).count();
    if live == 0 || live == data.len() {
        return Err(Error::MissingClass(format!(
            "{} has no readable {} images",
            root.display(),
            if live == 0 { "live" } else { "fake" }
        )));
    }
    Ok(data)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stage cache directory for grid search; memory-only when `None`.
    pub cache_dir: Option<PathBuf>,
    pub skip_unreadable: bool,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: TrainedPipeline,
    /// Hex SHA-256 of the written model file.
    pub digest: String,
    pub search: Option<SearchOutcome>,
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

fn search(
    data: &[(Image, Label)],
    file: &PipelineConfigFile,
    grid: &GridSpec,
    opts: &TrainOptions,
) -> Result<SearchOutcome> {
    let budget = file
        .search
        .cache_bytes
        .unwrap_or(modelsel::DEFAULT_CACHE_BUDGET);
    let search_opts = SearchOptions {
        cache: modelsel::cache_mode_for(opts.cache_dir.as_deref(), budget),
        split_limit: None,
    };
    modelsel::grid_search(data, grid, &search_opts)
}

fn write_model(model: &TrainedPipeline, path: &Path) -> Result<String> {
    let bytes = model.to_bytes();
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(pipeline::hex_digest(&bytes))
}

fn train_inner(
    config: &Path,
    data_root: &Path,
    out_model: &Path,
    force_search: bool,
    opts: &TrainOptions,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<TrainResult> {
    let file = PipelineConfigFile::load(config)?;
    let grid = file.grid()?;
    let data = load_training_set(data_root, opts.skip_unreadable, err)?;
    writeln!(
        out,
        "data: {} images ({} live)",
        data.len(),
        data.iter().filter(|(_, l)| *l == Label::Live).count()
    )
    .map_err(io_err)?;

    let (chosen, outcome) = if grid.len() == 1 && !force_search {
        (grid.candidates().remove(0), None)
    } else {
        writeln!(out, "grid: {} candidates, 5x2 cross-validation", grid.len()).map_err(io_err)?;
        let outcome = search(&data, &file, &grid, opts)?;
        write!(out, "{}", outcome.render()).map_err(io_err)?;
        let best = &outcome.table[outcome.best];
        writeln!(out, "validation ACE {:.2}%", 100.0 * best.mean_ace).map_err(io_err)?;
        (outcome.best_config().clone(), Some(outcome))
    };
    writeln!(out, "config: {}", chosen.describe()).map_err(io_err)?;

    let model = pipeline::fit_final(&data, &chosen)?;
    let digest = write_model(&model, out_model)?;
    writeln!(out, "model: {}", out_model.display()).map_err(io_err)?;
    writeln!(out, "digest: {digest}").map_err(io_err)?;
    Ok(TrainResult {
        model,
        digest,
        search: outcome,
    })
}

/// Fits the configured pipeline, running the grid search first when the
/// config lists more than one candidate, and writes the model file.
pub fn cmd_train(
    config: &Path,
    data_root: &Path,
    out_model: &Path,
    opts: &TrainOptions,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<TrainResult> {
    train_inner(config, data_root, out_model, false, opts, out, err)
}

/// Always cross-validates, writes the candidate table to `report`, then
/// refits the winner.
pub fn cmd_gridsearch(
    config: &Path,
    data_root: &Path,
    report: &Path,
    out_model: &Path,
    opts: &TrainOptions,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<TrainResult> {
    let result = train_inner(config, data_root, out_model, true, opts, out, err)?;
    let outcome = result.search.as_ref().expect("search always runs");
    let mut text = outcome.render();
    text.push_str(&format!(
        "best {} mean_ACE {:.2}%\nconfig {}\n",
        outcome.best,
        100.0 * outcome.table[outcome.best].mean_ace,
        outcome.best_config().describe()
    ));
    std::fs::write(report, text).map_err(|e| Error::io(report, e))?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub path: PathBuf,
    pub score: f64,
    pub label: Label,
    /// Wall time for reading and scoring, when timing was requested.
    pub millis: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PredictSummary {
    pub predictions: Vec<Prediction>,
    pub failures: usize,
}

fn predict_one(model: &TrainedPipeline, path: &Path) -> Result<(f64, f64)> {
    let start = Instant::now();
    let img = imageproc::read_image(path)?;
    let score = model.score(&img)?;
    Ok((score, start.elapsed().as_secs_f64() * 1e3))
}

pub fn format_prediction(p: &Prediction) -> String {
    format!("{} {:.9} {}", p.path.display(), p.score, p.label)
}

/// Scores each image and prints `path score label`, in input order. With
/// `timing`, images are processed one at a time on the calling thread and
/// per-image latency goes to `err`.
pub fn cmd_predict(
    model: &Path,
    images: &[PathBuf],
    timing: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<PredictSummary> {
    let model = TrainedPipeline::load(model)?;
    let results: Vec<Result<(f64, f64)>> = if timing {
        images.iter().map(|p| predict_one(&model, p)).collect()
    } else {
        images.par_iter().map(|p| predict_one(&model, p)).collect()
    };
    let mut summary = PredictSummary::default();
    for (path, r) in images.iter().zip(results) {
        match r {
            Ok((score, ms)) => {
                let p = Prediction {
                    path: path.clone(),
                    score,
                    label: Label::from_score(score),
                    millis: timing.then_some(ms),
                };
                writeln!(out, "{}", format_prediction(&p)).map_err(io_err)?;
                if timing {
                    let _ = writeln!(err, "timing {} {ms:.3} ms", path.display());
                }
                summary.predictions.push(p);
            }
            Err(e) => {
                summary.failures += 1;
                let _ = writeln!(err, "error: {e}");
            }
        }
    }
    if timing && !summary.predictions.is_empty() {
        let total: f64 = summary.predictions.iter().filter_map(|p| p.millis).sum();
        let _ = writeln!(
            err,
            "timing mean {:.3} ms over {} images",
            total / summary.predictions.len() as f64,
            summary.predictions.len()
        );
    }
    Ok(summary)
}

pub fn format_report(r: &EvalReport) -> String {
    format!(
        "FPR {:.2}%\nFNR {:.2}%\nACE {:.2}%\nlive {} misclassified {}\nfake {} misclassified {}\n",
        100.0 * r.fpr,
        100.0 * r.fnr,
        100.0 * r.ace,
        r.live_total,
        r.live_wrong,
        r.fake_total,
        r.fake_wrong
    )
}

/// Classifies every image of a labeled test set and prints FPR, FNR and
/// ACE with the raw counts.
pub fn cmd_evaluate(model: &Path, data_root: &Path, out: &mut dyn Write) -> Result<EvalReport> {
    let model = TrainedPipeline::load(model)?;
    let manifest = load_dataset(data_root)?;
    manifest.require_both_classes()?;
    let (data, _) = load_images(&manifest, false)?;
    let predictions: Vec<Label> = data
        .par_iter()
        .map(|(img, _)| model.predict(img))
        .collect::<Result<_>>()?;
    let truth: Vec<Label> = data.iter().map(|(_, l)| *l).collect();
    let report = modelsel::ace(&predictions, &truth)?;
    write!(out, "{}", format_report(&report)).map_err(io_err)?;
    Ok(report)
}

/// Writes a synthetic two-class texture dataset.
pub fn cmd_synth(out_root: &Path, per_class: usize, size: usize, seed: u64) -> Result<usize> {
    let samples = crate::synth::generate(per_class, size, seed);
    crate::synth::write_dataset(out_root, &samples)?;
    Ok(samples.len())
}
