//! Batch commands over a manifest and the files they write.
//!
//! | command     | outputs                                                        |
//! |-------------|----------------------------------------------------------------|
//! | `synth`     | `images/`, `manifest.csv`, `annotations.csv`, `model.ebn`      |
//! | `predict`   | `predictions.csv`                                              |
//! | `attribute` | `maps.bin`, `stats.csv`                                        |
//! | `units`     | `unit_rankings.csv`, `specialists.csv`, `top_examples.json`    |
//! | `report`    | `report.json`, `brand_summaries.csv`, `correlations.csv` and the `units` files |
//! | `heatmap`   | `heatmaps/<id>.png`, `heatmaps/<id>_overlay.png`               |
//!
//! Per-image work runs on up to `workers` threads; everything is collected
//! back into manifest order before anything is written.

mod config;
pub mod heatmap;

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{brand_summaries, correlate_groups, BrandSummary, Grouping, PerGroup, SummaryWarning, GROUP_ENCODING};
use crate::discriminability::{rank_all, specialist_index, top_examples, ScoreMatrix, UnitDiscriminability};
use crate::error::{Error, Result};
use crate::excitation::{excitation_backprop, write_map_record, ExcitationMaps};
use crate::ingest::image::{load_for_model, read_rgb};
use crate::ingest::{generate_synthetic, load_annotations, load_manifest, template_network, write_dataset, DatasetManifest, ManifestEntry, SynthConfig};
use crate::metrics::{aggregate_map, map_statistics, unit_max_scores, MapStatistics, EXTENT_THRESHOLD_RULE};
use crate::model::{forward, load_model, predict, save_model, BrandId, Model};
use crate::parallel::map_ordered;

pub use config::{read_config_file, RunConfig, CONFIG_KEYS};
pub use heatmap::render_heatmap;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: String,
    pub predicted: BrandId,
    pub confidence: f32,
}

/// Everything computed for one image at the target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub prediction: Prediction,
    pub maps: ExcitationMaps,
    pub stats: MapStatistics,
    pub unit_scores: Vec<f64>,
}

/// A loaded model and manifest.
#[derive(Debug, Clone)]
pub struct Session {
    pub model: Model,
    pub manifest: DatasetManifest,
    pub target: String,
    pub workers: usize,
}

impl Session {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = load_model(cfg.model_path()?)?;
        let manifest = load_manifest(cfg.manifest_path()?)?;
        let target = cfg
            .target_layer
            .clone()
            .unwrap_or_else(|| model.graph().target_layer_default.clone());
        model.layer_index(&target)?;
        Ok(Session {
            model,
            manifest,
            target,
            workers: cfg.worker_count(),
        })
    }

    pub fn test_entries(&self) -> Vec<&ManifestEntry> {
        self.manifest.test_entries().collect()
    }

    fn predict_one(&self, entry: &ManifestEntry) -> Result<(Prediction, crate::model::ForwardTrace)> {
        let x = load_for_model(self.manifest.resolve(entry), &self.model)?;
        let trace = forward(&self.model, &x)?;
        let predicted = predict(&self.model, &trace)?;
        let confidence = trace.posterior[predicted.index];
        Ok((
            Prediction {
                image_id: entry.image_id.clone(),
                predicted,
                confidence,
            },
            trace,
        ))
    }

    fn attribute_one(&self, entry: &ManifestEntry) -> Result<Attribution> {
        let (prediction, trace) = self.predict_one(entry)?;
        let maps = excitation_backprop(&self.model, &trace, prediction.predicted.index, &self.target)?
            .with_image_id(entry.image_id.clone());
        let stats = map_statistics(&maps, prediction.predicted.clone());
        let unit_scores = unit_max_scores(&maps);
        Ok(Attribution {
            prediction,
            maps,
            stats,
            unit_scores,
        })
    }

    /// Forward pass and prediction for every test image, in manifest order.
    pub fn predict_all(&self) -> Result<Vec<Prediction>> {
        let entries = self.test_entries();
        map_ordered(&entries, self.workers, |e| self.predict_one(e).map(|p| p.0))
            .into_iter()
            .collect()
    }

    /// Predictions, excitation maps and statistics for every test image.
    pub fn attribute_all(&self) -> Result<Vec<Attribution>> {
        let entries = self.test_entries();
        map_ordered(&entries, self.workers, |e| self.attribute_one(e))
            .into_iter()
            .collect()
    }

    /// Unit scores labelled with each image's manifest brand.
    pub fn score_matrix(&self, attributions: &[Attribution]) -> Result<ScoreMatrix> {
        let labels: HashMap<&str, &str> = self
            .manifest
            .entries
            .iter()
            .map(|e| (e.image_id.as_str(), e.brand.as_str()))
            .collect();
        let rows = attributions
            .iter()
            .map(|a| {
                let label = labels
                    .get(a.prediction.image_id.as_str())
                    .ok_or_else(|| Error::Mismatch(format!("`{}` is not in the manifest", a.prediction.image_id)))?;
                let brand = self
                    .model
                    .brand_by_label(label)
                    .ok_or_else(|| Error::UnknownBrand(label.to_string()))?;
                Ok((a.prediction.image_id.clone(), brand, a.unit_scores.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        ScoreMatrix::new(rows)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let run = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
        w.write_record(header)?;
        fill(w)
    };
    run(&mut w).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn predictions_csv(predictions: &[Prediction]) -> Result<Vec<u8>> {
    csv_bytes(&["image_id", "predicted", "confidence"], |w| {
        for p in predictions {
            w.write_record([p.image_id.as_str(), &p.predicted.label, &p.confidence.to_string()])?;
        }
        Ok(())
    })
}

pub fn stats_csv(stats: &[MapStatistics]) -> Result<Vec<u8>> {
    csv_bytes(
        &["image_id", "predicted_brand", "strength", "extent", "threshold", "discarded_mass"],
        |w| {
            for s in stats {
                w.write_record([
                    s.image_id.as_str(),
                    &s.brand_predicted.label,
                    &s.strength.to_string(),
                    &s.extent.to_string(),
                    &s.threshold.to_string(),
                    &s.discarded_mass.to_string(),
                ])?;
            }
            Ok(())
        },
    )
}

pub fn map_dump(maps: impl IntoIterator<Item = impl std::borrow::Borrow<ExcitationMaps>>) -> Vec<u8> {
    let mut out = BufWriter::new(Vec::new());
    for m in maps {
        write_map_record(&mut out, m.borrow()).expect("writing to memory");
    }
    out.flush().expect("writing to memory");
    out.into_inner().expect("writing to memory")
}

/// Rankings, specialist counts and top examples for every unit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitAnalysis {
    pub num_units: usize,
    pub top_n: usize,
    pub rankings: Vec<BrandRanking>,
    pub specialist_counts: Vec<usize>,
    pub top_examples: Vec<UnitExamples>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrandRanking {
    pub brand: BrandId,
    pub units: Vec<RankedUnit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankedUnit {
    pub unit: usize,
    pub d_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitExamples {
    pub unit: usize,
    pub images: Vec<String>,
}

pub fn analyze_units(scores: &ScoreMatrix, cfg: &RunConfig, workers: usize) -> Result<UnitAnalysis> {
    let rankings: Vec<Vec<UnitDiscriminability>> = rank_all(scores, cfg.bins, cfg.alpha, workers)?;
    let specialist_counts = specialist_index(&rankings, scores.num_units(), cfg.top_n);
    let m = cfg.top_examples.min(scores.num_images());
    let top = (0..scores.num_units())
        .map(|unit| {
            Ok(UnitExamples {
                unit,
                images: top_examples(scores, unit, m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnitAnalysis {
        num_units: scores.num_units(),
        top_n: cfg.top_n,
        rankings: rankings
            .into_iter()
            .filter_map(|r| {
                let brand = r.first()?.brand.clone();
                let units = r
                    .into_iter()
                    .map(|u| RankedUnit {
                        unit: u.unit,
                        d_value: u.d_value,
                    })
                    .collect();
                Some(BrandRanking { brand, units })
            })
            .collect(),
        specialist_counts,
        top_examples: top,
    })
}

pub fn rankings_csv(units: &UnitAnalysis) -> Result<Vec<u8>> {
    csv_bytes(&["brand", "rank", "unit", "d_value"], |w| {
        for r in &units.rankings {
            for (rank, u) in r.units.iter().enumerate() {
                w.write_record([
                    r.brand.label.as_str(),
                    &(rank + 1).to_string(),
                    &u.unit.to_string(),
                    &u.d_value.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn specialists_csv(units: &UnitAnalysis) -> Result<Vec<u8>> {
    csv_bytes(&["unit", "count"], |w| {
        for (unit, count) in units.specialist_counts.iter().enumerate() {
            w.write_record([unit.to_string(), count.to_string()])?;
        }
        Ok(())
    })
}

fn write_unit_files(dir: &Path, units: &UnitAnalysis) -> Result<Vec<PathBuf>> {
    let files = [
        ("unit_rankings.csv", rankings_csv(units)?),
        ("specialists.csv", specialists_csv(units)?),
        ("top_examples.json", json_bytes(&units.top_examples)?),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        write_bytes(&p, &bytes)?;
        written.push(p);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub tool: String,
    pub version: String,
    pub category: String,
    pub num_images: usize,
    pub target_layer: String,
    pub bins: usize,
    pub alpha: f64,
    pub top_n: usize,
    pub grouping: Grouping,
    pub extent_threshold: String,
    pub correlation_encoding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlations {
    pub n_images: usize,
    pub strength: PerGroup<Option<f64>>,
    pub extent: PerGroup<Option<f64>>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitSummary {
    pub num_units: usize,
    pub top_n: usize,
    /// The `top_n` highest-ranked units of each brand.
    pub top_units: Vec<BrandRanking>,
    pub specialist_counts: Vec<usize>,
}

/// Contents of `report.json`. Correlation sections are `null` without annotations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub meta: ReportMeta,
    pub brand_summaries: Vec<BrandSummary>,
    pub summary_warnings: Vec<SummaryWarning>,
    pub correlations: Option<Correlations>,
    pub group_accuracy: Option<PerGroup<Option<f64>>>,
    pub prevalence: Option<PerGroup<f64>>,
    pub units: UnitSummary,
}

pub fn build_report(session: &Session, cfg: &RunConfig, attributions: &[Attribution]) -> Result<(Report, UnitAnalysis)> {
    let stats: Vec<MapStatistics> = attributions.iter().map(|a| a.stats.clone()).collect();
    let brands: Vec<BrandId> = (0..session.model.num_classes())
        .filter_map(|i| session.model.brand(i))
        .collect();
    let summaries = brand_summaries(&stats, &session.manifest, &brands, cfg.grouping)?;
    let (correlations, group_accuracy, prevalence) = match cfg.annotations_path()? {
        Some(p) => {
            let ann = load_annotations(p)?;
            ann.validate_against(&session.manifest)?;
            let c = correlate_groups(&stats, &session.manifest, &ann)?;
            (
                Some(Correlations {
                    n_images: c.n_images,
                    strength: c.strength,
                    extent: c.extent,
                    notes: c.notes,
                }),
                Some(c.accuracy),
                Some(c.prevalence),
            )
        }
        None => (None, None, None),
    };
    let units = analyze_units(&session.score_matrix(attributions)?, cfg, session.workers)?;
    let report = Report {
        meta: ReportMeta {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            category: session.manifest.category.clone(),
            num_images: attributions.len(),
            target_layer: session.target.clone(),
            bins: cfg.bins,
            alpha: cfg.alpha,
            top_n: cfg.top_n,
            grouping: cfg.grouping,
            extent_threshold: EXTENT_THRESHOLD_RULE.into(),
            correlation_encoding: GROUP_ENCODING.into(),
        },
        brand_summaries: summaries.summaries,
        summary_warnings: summaries.warnings,
        correlations,
        group_accuracy,
        prevalence,
        units: UnitSummary {
            num_units: units.num_units,
            top_n: units.top_n,
            top_units: units
                .rankings
                .iter()
                .map(|r| BrandRanking {
                    brand: r.brand.clone(),
                    units: r.units.iter().take(cfg.top_n).copied().collect(),
                })
                .collect(),
            specialist_counts: units.specialist_counts.clone(),
        },
    };
    Ok((report, units))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summaries_csv(report: &Report) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "brand",
            "brand_index",
            "n_images",
            "median_strength",
            "median_extent",
            "strength_decile",
            "extent_decile",
        ],
        |w| {
            for s in &report.brand_summaries {
                w.write_record([
                    s.brand.label.clone(),
                    s.brand.index.to_string(),
                    s.n_images.to_string(),
                    s.median_strength.to_string(),
                    s.median_extent.to_string(),
                    s.strength_decile.to_string(),
                    s.extent_decile.to_string(),
                ])?;
            }
            Ok(())
        },
    )
}

pub fn correlations_csv(report: &Report) -> Result<Vec<u8>> {
    csv_bytes(&["group", "r_strength", "r_extent", "accuracy", "prevalence"], |w| {
        let (Some(c), Some(acc), Some(prev)) = (&report.correlations, &report.group_accuracy, &report.prevalence) else {
            return Ok(());
        };
        for g in crate::ingest::LogoGroup::ALL {
            w.write_record([
                g.as_str().to_string(),
                opt(*c.strength.get(g)),
                opt(*c.extent.get(g)),
                opt(*acc.get(g)),
                prev.get(g).to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Generates a synthetic dataset and its template network under `cfg.output`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut synth = SynthConfig::three_brands(cfg.images_per_brand, cfg.seed);
    synth.image_size = cfg.image_size;
    let model = template_network(&synth)?;
    let dataset = generate_synthetic(&synth);
    create_dir(&cfg.output)?;
    write_dataset(&dataset, &cfg.output)?;
    let model_path = cfg.output.join("model.ebn");
    save_model(&model, &model_path)?;
    log::info!("wrote {} synthetic images to {}", dataset.images.len(), cfg.output.display());
    Ok(vec![
        cfg.output.join("manifest.csv"),
        cfg.output.join("annotations.csv"),
        model_path,
    ])
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let session = Session::open(cfg)?;
    let predictions = session.predict_all()?;
    create_dir(&cfg.output)?;
    let p = cfg.output.join("predictions.csv");
    write_bytes(&p, &predictions_csv(&predictions)?)?;
    log::info!("predicted {} images", predictions.len());
    Ok(vec![p])
}

pub fn cmd_attribute(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let session = Session::open(cfg)?;
    let attributions = session.attribute_all()?;
    create_dir(&cfg.output)?;
    let dump = cfg.output.join("maps.bin");
    write_bytes(&dump, &map_dump(attributions.iter().map(|a| &a.maps)))?;
    let stats: Vec<MapStatistics> = attributions.iter().map(|a| a.stats.clone()).collect();
    let csv = cfg.output.join("stats.csv");
    write_bytes(&csv, &stats_csv(&stats)?)?;
    log::info!("attributed {} images at `{}`", attributions.len(), session.target);
    Ok(vec![dump, csv])
}

pub fn cmd_units(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let session = Session::open(cfg)?;
    let attributions = session.attribute_all()?;
    let units = analyze_units(&session.score_matrix(&attributions)?, cfg, session.workers)?;
    create_dir(&cfg.output)?;
    write_unit_files(&cfg.output, &units)
}

pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let session = Session::open(cfg)?;
    let attributions = session.attribute_all()?;
    let (report, units) = build_report(&session, cfg, &attributions)?;
    create_dir(&cfg.output)?;
    let mut written = Vec::new();
    for (name, bytes) in [
        ("report.json", json_bytes(&report)?),
        ("brand_summaries.csv", summaries_csv(&report)?),
        ("correlations.csv", correlations_csv(&report)?),
    ] {
        let p = cfg.output.join(name);
        write_bytes(&p, &bytes)?;
        written.push(p);
    }
    written.extend(write_unit_files(&cfg.output, &units)?);
    Ok(written)
}

/// Renders heatmaps for the listed test images, or all of them when `ids` is empty.
pub fn cmd_heatmap(cfg: &RunConfig, ids: &[String], with_overlay: bool) -> Result<Vec<PathBuf>> {
    let session = Session::open(cfg)?;
    let entries: Vec<&ManifestEntry> = if ids.is_empty() {
        session.test_entries()
    } else {
        ids.iter()
            .map(|id| {
                session
                    .manifest
                    .get(id)
                    .ok_or_else(|| Error::Config(format!("image `{id}` is not in the manifest")))
            })
            .collect::<Result<_>>()?
    };
    let dir = cfg.output.join("heatmaps");
    create_dir(&dir)?;
    map_ordered(&entries, session.workers, |e| {
        let a = session.attribute_one(e)?;
        let image = read_rgb(session.manifest.resolve(e))?;
        let out = dir.join(format!("{}.png", e.image_id));
        let ov = dir.join(format!("{}_overlay.png", e.image_id));
        render_heatmap(&aggregate_map(&a.maps), &image, &out, with_overlay.then_some(ov.as_path()))?;
        Ok(if with_overlay { vec![out, ov] } else { vec![out] })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .map(|v| v.into_iter().flatten().collect())
}
