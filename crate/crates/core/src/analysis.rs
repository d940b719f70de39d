//! Brand-level aggregation of map statistics and their correlation with
//! logo-visibility annotations.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AnnotationSet, DatasetManifest, LogoGroup, Split};
use crate::metrics::MapStatistics;
use crate::model::BrandId;

/// Encoding of the three-way group label used for correlations.
pub const GROUP_ENCODING: &str = "one_vs_rest";

/// Median with the even-count convention (mean of the two middle values).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Decile (1..=10) of each value. Values are ranked ascending, ties by
/// position, and the ranks are cut into ten contiguous groups whose sizes
/// differ by at most one, the larger groups coming first.
pub fn deciles(values: &[f64]) -> Vec<u8> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let (base, extra) = (n / 10, n % 10);
    let mut out = vec![0u8; n];
    let mut rank = 0;
    for d in 0..10 {
        let size = base + usize::from(d < extra);
        for &i in &order[rank..rank + size] {
            out[i] = d as u8 + 1;
        }
        rank += size;
    }
    out
}

/// Which brand an image counts towards when summarizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    GroundTruth,
    Predicted,
}

impl Grouping {
    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::GroundTruth => "ground_truth",
            Grouping::Predicted => "predicted",
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ground_truth" | "truth" | "label" => Ok(Grouping::GroundTruth),
            "predicted" | "prediction" => Ok(Grouping::Predicted),
            other => Err(Error::Config(format!("unknown grouping `{other}` (expected ground_truth or predicted)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrandSummary {
    pub brand: BrandId,
    pub n_images: usize,
    pub median_strength: f64,
    pub median_extent: f64,
    pub strength_decile: u8,
    pub extent_decile: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryWarning {
    pub brand: BrandId,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BrandSummaries {
    pub grouping: Grouping,
    pub summaries: Vec<BrandSummary>,
    pub warnings: Vec<SummaryWarning>,
}

/// Per-brand medians and deciles over the test split, in brand index order.
/// `brands` lists every brand of the model; those without test images are
/// reported as warnings instead of summaries.
pub fn brand_summaries(
    stats: &[MapStatistics],
    manifest: &DatasetManifest,
    brands: &[BrandId],
    grouping: Grouping,
) -> Result<BrandSummaries> {
    let test: HashMap<&str, &str> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| (e.image_id.as_str(), e.brand.as_str()))
        .collect();
    let by_label: HashMap<&str, usize> = brands.iter().map(|b| (b.label.as_str(), b.index)).collect();
    let slot: HashMap<usize, usize> = brands.iter().enumerate().map(|(i, b)| (b.index, i)).collect();

    let mut strengths = vec![Vec::new(); brands.len()];
    let mut extents = vec![Vec::new(); brands.len()];
    for s in stats {
        let Some(&label) = test.get(s.image_id.as_str()) else {
            continue;
        };
        let index = match grouping {
            Grouping::GroundTruth => *by_label.get(label).ok_or_else(|| Error::UnknownBrand(label.to_string()))?,
            Grouping::Predicted => s.brand_predicted.index,
        };
        let Some(&i) = slot.get(&index) else {
            return Err(Error::UnknownBrand(s.brand_predicted.label.clone()));
        };
        strengths[i].push(s.strength);
        extents[i].push(s.extent);
    }

    let mut out = BrandSummaries {
        grouping,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..brands.len()).collect();
    order.sort_by_key(|&i| brands[i].index);
    for i in order {
        match (median(&strengths[i]), median(&extents[i])) {
            (Some(ms), Some(me)) => out.summaries.push(BrandSummary {
                brand: brands[i].clone(),
                n_images: strengths[i].len(),
                median_strength: ms,
                median_extent: me,
                strength_decile: 0,
                extent_decile: 0,
            }),
            _ => out.warnings.push(SummaryWarning {
                brand: brands[i].clone(),
                message: "no test images; brand omitted".into(),
            }),
        }
    }
    let sd = deciles(&out.summaries.iter().map(|s| s.median_strength).collect::<Vec<_>>());
    let ed = deciles(&out.summaries.iter().map(|s| s.median_extent).collect::<Vec<_>>());
    for (s, (a, b)) in out.summaries.iter_mut().zip(sd.into_iter().zip(ed)) {
        s.strength_decile = a;
        s.extent_decile = b;
    }
    Ok(out)
}

/// Sample Pearson correlation. Undefined when either vector is constant or
/// has fewer than two entries.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Mismatch(format!("vectors of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} observations", x.len())));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    match (constant(x), constant(y)) {
        (true, true) => return Err(Error::UndefinedCorrelation("both vectors are constant".into())),
        (true, false) | (false, true) => {
            return Err(Error::UndefinedCorrelation("one vector is constant".into()));
        }
        _ => {}
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One value per logo-visibility group.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerGroup<T> {
    pub logo: T,
    pub repeated_logo: T,
    pub no_logo: T,
}

impl<T> PerGroup<T> {
    pub fn from_fn(mut f: impl FnMut(LogoGroup) -> T) -> Self {
        PerGroup {
            logo: f(LogoGroup::Logo),
            repeated_logo: f(LogoGroup::RepeatedLogo),
            no_logo: f(LogoGroup::NoLogo),
        }
    }

    pub fn get(&self, g: LogoGroup) -> &T {
        match g {
            LogoGroup::Logo => &self.logo,
            LogoGroup::RepeatedLogo => &self.repeated_logo,
            LogoGroup::NoLogo => &self.no_logo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub encoding: String,
    pub n_images: usize,
    /// `None` where the correlation is undefined; see `notes`.
    pub strength: PerGroup<Option<f64>>,
    pub extent: PerGroup<Option<f64>>,
    pub accuracy: PerGroup<Option<f64>>,
    pub prevalence: PerGroup<f64>,
    pub notes: Vec<String>,
}

impl CorrelationReport {
    pub fn is_complete(&self) -> bool {
        LogoGroup::ALL
            .iter()
            .all(|&g| self.strength.get(g).is_some() && self.extent.get(g).is_some())
    }
}

/// Correlates strength and extent with the one-vs-rest indicator of each
/// group over images that are both annotated and scored. Undefined
/// correlations are left empty and explained in the notes.
pub fn correlate_groups(
    stats: &[MapStatistics],
    manifest: &DatasetManifest,
    ann: &AnnotationSet,
) -> Result<CorrelationReport> {
    let groups = ann.as_map();
    let rows: Vec<(&MapStatistics, LogoGroup)> = stats
        .iter()
        .filter_map(|s| groups.get(s.image_id.as_str()).map(|a| (s, a.group)))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let strength: Vec<f64> = rows.iter().map(|(s, _)| s.strength).collect();
    let extent: Vec<f64> = rows.iter().map(|(s, _)| s.extent).collect();
    let n = rows.len();
    let mut notes = Vec::new();
    let mut corr = |g: LogoGroup, metric: &str, values: &[f64]| {
        let indicator: Vec<f64> = rows.iter().map(|(_, h)| f64::from(u8::from(*h == g))).collect();
        match pearson(&indicator, values) {
            Ok(r) => Some(r),
            Err(e) => {
                notes.push(format!("{metric} vs {g}: {e}"));
                None
            }
        }
    };
    let strength_r = PerGroup::from_fn(|g| corr(g, "strength", &strength));
    let extent_r = PerGroup::from_fn(|g| corr(g, "extent", &extent));
    let predictions: Vec<(String, BrandId)> = rows
        .iter()
        .map(|(s, _)| (s.image_id.clone(), s.brand_predicted.clone()))
        .collect();
    Ok(CorrelationReport {
        encoding: GROUP_ENCODING.into(),
        n_images: n,
        strength: strength_r,
        extent: extent_r,
        accuracy: group_accuracy(&predictions, manifest, ann),
        prevalence: PerGroup::from_fn(|g| rows.iter().filter(|(_, h)| *h == g).count() as f64 / n as f64),
        notes,
    })
}

/// Like [`correlate_groups`], but any undefined correlation is an error.
pub fn logo_correlation(
    stats: &[MapStatistics],
    manifest: &DatasetManifest,
    ann: &AnnotationSet,
) -> Result<CorrelationReport> {
    let report = correlate_groups(stats, manifest, ann)?;
    if let Some(note) = report.notes.first() {
        return Err(Error::UndefinedCorrelation(note.clone()));
    }
    Ok(report)
}

/// Fraction of annotated images per group whose predicted brand equals the
/// manifest brand. Groups without images get `None`.
pub fn group_accuracy(
    predictions: &[(String, BrandId)],
    manifest: &DatasetManifest,
    ann: &AnnotationSet,
) -> PerGroup<Option<f64>> {
    let groups = ann.as_map();
    let truth: HashMap<&str, &str> = manifest
        .entries
        .iter()
        .map(|e| (e.image_id.as_str(), e.brand.as_str()))
        .collect();
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (id, predicted) in predictions {
        let (Some(a), Some(&brand)) = (groups.get(id.as_str()), truth.get(id.as_str())) else {
            continue;
        };
        let g = a.group as usize;
        totals[g] += 1;
        hits[g] += usize::from(predicted.label == brand);
    }
    PerGroup::from_fn(|g| {
        let g = g as usize;
        (totals[g] > 0).then(|| hits[g] as f64 / totals[g] as f64)
    })
}
