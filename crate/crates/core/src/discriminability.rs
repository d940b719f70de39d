//! Ranking units by how well their peak excitation separates one brand's
//! images from everyone else's, using the symmetric KL divergence between
//! smoothed histograms of max-normalized scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BrandId;
use crate::parallel;

pub const DEFAULT_BINS: usize = 32;
pub const DEFAULT_ALPHA: f64 = 1e-6;
pub const DEFAULT_TOP_N: usize = 10;

/// Images × units table of per-unit peak excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    image_ids: Vec<String>,
    brands: Vec<BrandId>,
    num_units: usize,
    values: Vec<f64>,
    unit_max: Vec<f64>,
}

impl ScoreMatrix {
    /// Rows in manifest order: `(image id, ground-truth brand, K scores)`.
    pub fn new(rows: Vec<(String, BrandId, Vec<f64>)>) -> Result<Self> {
        let num_units = rows.first().map_or(0, |r| r.2.len());
        let mut image_ids = Vec::with_capacity(rows.len());
        let mut brands = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len() * num_units);
        for (id, brand, scores) in rows {
            if scores.len() != num_units {
                return Err(Error::InvalidArgument(format!(
                    "image `{id}` has {} scores, expected {num_units}",
                    scores.len()
                )));
            }
            if scores.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "image `{id}` has a negative or non-finite score"
                )));
            }
            image_ids.push(id);
            brands.push(brand);
            values.extend(scores);
        }
        let mut unit_max = vec![0.0f64; num_units];
        for row in values.chunks_exact(num_units.max(1)) {
            for (m, &v) in unit_max.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        Ok(ScoreMatrix {
            image_ids,
            brands,
            num_units,
            values,
            unit_max,
        })
    }

    pub fn num_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn num_units(&self) -> usize {
        self.num_units
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn brands(&self) -> &[BrandId] {
        &self.brands
    }

    pub fn score(&self, image: usize, unit: usize) -> f64 {
        self.values[image * self.num_units + unit]
    }

    /// Brands present in the matrix, by brand index.
    pub fn distinct_brands(&self) -> Vec<BrandId> {
        let mut out: Vec<BrandId> = Vec::new();
        for b in &self.brands {
            if !out.contains(b) {
                out.push(b.clone());
            }
        }
        out.sort_by_key(|b| b.index);
        out
    }

    fn normalized(&self, image: usize, unit: usize) -> f64 {
        let max = self.unit_max[unit];
        if max > 0.0 {
            self.score(image, unit) / max
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub masses: Vec<f64>,
    pub smoothing_alpha: f64,
}

impl Histogram {
    pub fn bin_count(&self) -> usize {
        self.masses.len()
    }

    /// Builds a smoothed histogram from raw bin counts.
    pub fn from_counts(counts: &[usize], alpha: f64) -> Self {
        let total = counts.iter().sum::<usize>() as f64 + alpha * counts.len() as f64;
        Histogram {
            masses: counts.iter().map(|&c| (c as f64 + alpha) / total).collect(),
            smoothing_alpha: alpha,
        }
    }
}

/// Bin of a normalized score in `[0, 1]` with `bins` uniform bins.
pub fn bin_of(value: f64, bins: usize) -> usize {
    ((value * bins as f64).floor() as usize).min(bins - 1)
}

fn check_config(bins: usize, alpha: f64) -> Result<()> {
    if bins < 2 {
        return Err(Error::Config(format!("bins must be at least 2, got {bins}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("smoothing alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// `(P⁺, P⁻)` for one unit: scores of images labelled `brand` against the rest.
pub fn build_histograms(
    scores: &ScoreMatrix,
    unit: usize,
    brand: &BrandId,
    bins: usize,
    alpha: f64,
) -> Result<(Histogram, Histogram)> {
    check_config(bins, alpha)?;
    if unit >= scores.num_units {
        return Err(Error::InvalidArgument(format!(
            "unit {unit} out of range for {} units",
            scores.num_units
        )));
    }
    let mut pos = vec![0usize; bins];
    let mut neg = vec![0usize; bins];
    for (i, b) in scores.brands.iter().enumerate() {
        let bin = bin_of(scores.normalized(i, unit), bins);
        if b.index == brand.index {
            pos[bin] += 1;
        } else {
            neg[bin] += 1;
        }
    }
    if pos.iter().all(|&c| c == 0) {
        return Err(Error::EmptyPositives(brand.label.clone()));
    }
    if neg.iter().all(|&c| c == 0) {
        return Err(Error::EmptyNegatives(brand.label.clone()));
    }
    Ok((Histogram::from_counts(&pos, alpha), Histogram::from_counts(&neg, alpha)))
}

/// `KL(P‖Q) + KL(Q‖P)` in nats.
pub fn symmetric_kl(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.bin_count() != q.bin_count() {
        return Err(Error::BinCountMismatch(p.bin_count(), q.bin_count()));
    }
    if p.masses.iter().chain(&q.masses).any(|&m| m.is_nan() || m <= 0.0) {
        return Err(Error::InvalidArgument("histogram masses must be positive".into()));
    }
    Ok(p.masses
        .iter()
        .zip(&q.masses)
        .map(|(&a, &b)| a * (a / b).ln() + b * (b / a).ln())
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDiscriminability {
    pub unit: usize,
    pub brand: BrandId,
    pub d_value: f64,
}

/// Every unit scored for `brand`, most discriminative first; ties keep the lower unit first.
pub fn rank_units(
    scores: &ScoreMatrix,
    brand: &BrandId,
    bins: usize,
    alpha: f64,
) -> Result<Vec<UnitDiscriminability>> {
    rank_units_with(scores, brand, bins, alpha, 1)
}

/// [`rank_units`] spreading units over `workers` threads.
pub fn rank_units_with(
    scores: &ScoreMatrix,
    brand: &BrandId,
    bins: usize,
    alpha: f64,
    workers: usize,
) -> Result<Vec<UnitDiscriminability>> {
    check_config(bins, alpha)?;
    if !scores.brands.iter().any(|b| b.index == brand.index) {
        return Err(Error::UnknownBrand(brand.label.clone()));
    }
    let units: Vec<usize> = (0..scores.num_units).collect();
    let ranked = parallel::map_ordered(&units, workers, |&unit| -> Result<UnitDiscriminability> {
        let (p, q) = build_histograms(scores, unit, brand, bins, alpha)?;
        Ok(UnitDiscriminability {
            unit,
            brand: brand.clone(),
            d_value: symmetric_kl(&p, &q)?,
        })
    });
    let mut ranked = ranked.into_iter().collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.d_value.total_cmp(&a.d_value).then(a.unit.cmp(&b.unit)));
    Ok(ranked)
}

/// Rankings for every brand that has both positive and negative images,
/// in brand-index order.
pub fn rank_all(
    scores: &ScoreMatrix,
    bins: usize,
    alpha: f64,
    workers: usize,
) -> Result<Vec<Vec<UnitDiscriminability>>> {
    let brands = scores.distinct_brands();
    if brands.len() < 2 {
        return Ok(Vec::new());
    }
    brands
        .iter()
        .map(|b| rank_units_with(scores, b, bins, alpha, workers))
        .collect()
}

/// Number of brands for which each unit is among the top `top_n` of the ranking.
pub fn specialist_index(rankings: &[Vec<UnitDiscriminability>], num_units: usize, top_n: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_units];
    for ranking in rankings {
        for entry in ranking.iter().take(top_n) {
            counts[entry.unit] += 1;
        }
    }
    counts
}

/// Convenience: rank every brand, then count top-`top_n` memberships.
pub fn specialist_counts(scores: &ScoreMatrix, bins: usize, alpha: f64, top_n: usize) -> Result<Vec<usize>> {
    let rankings = rank_all(scores, bins, alpha, 1)?;
    Ok(specialist_index(&rankings, scores.num_units, top_n))
}

/// The `m` images with the highest raw score on `unit`; ties keep manifest order.
pub fn top_examples(scores: &ScoreMatrix, unit: usize, m: usize) -> Result<Vec<String>> {
    if m > scores.num_images() {
        return Err(Error::TooManyExamples {
            requested: m,
            available: scores.num_images(),
        });
    }
    if unit >= scores.num_units {
        return Err(Error::InvalidArgument(format!("unit {unit} out of range")));
    }
    let mut order: Vec<usize> = (0..scores.num_images()).collect();
    order.sort_by(|&a, &b| scores.score(b, unit).total_cmp(&scores.score(a, unit)));
    Ok(order.into_iter().take(m).map(|i| scores.image_ids[i].clone()).collect())
}
