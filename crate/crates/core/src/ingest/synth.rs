//! Synthetic brand images in three presentation families, and a hand-built
//! template-matching network that recognizes them.
//!
//! * logo: one small coloured glyph at a random spot on grey noise
//! * repeated logo: the glyph tiled over the whole canvas
//! * no logo: a brand-coloured stripe texture, no glyph
//!
//! Every image is drawn from its own ChaCha stream keyed by `(seed, image
//! index)`, so the dataset is a pure function of the config.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{encode_ppm, RgbImage};
use super::manifest::{Annotation, AnnotationSet, DatasetManifest, LogoGroup, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerSpec, Model, ModelGraph, Preprocess, WeightStore};
use crate::tensor::{Shape, Tensor};

/// Square binary glyph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph {
    pub size: usize,
    pub mask: Vec<bool>,
}

impl Glyph {
    /// Builds a glyph from equal-length rows where `X` marks ink.
    pub fn from_rows(rows: &[&str]) -> Self {
        let size = rows.len();
        assert!(rows.iter().all(|r| r.len() == size), "glyph rows must form a square");
        Glyph {
            size,
            mask: rows.iter().flat_map(|r| r.chars().map(|c| c == 'X')).collect(),
        }
    }

    pub fn ink(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.size + x]
    }

    pub fn ink_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn cross() -> Self {
        Glyph::from_rows(&["X...X", ".X.X.", "..X..", ".X.X.", "X...X"])
    }

    pub fn ring() -> Self {
        Glyph::from_rows(&["XXXXX", "X...X", "X...X", "X...X", "XXXXX"])
    }

    pub fn diamond() -> Self {
        Glyph::from_rows(&["..X..", ".X.X.", "X...X", ".X.X.", "..X.."])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrandRecipe {
    pub label: String,
    pub family: LogoGroup,
    pub color: [u8; 3],
    pub glyph: Glyph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub brands: Vec<BrandRecipe>,
    pub images_per_brand: usize,
    pub image_size: usize,
    /// Distance between neighbouring glyphs in repeated-logo images.
    pub tile_period: usize,
    /// Leading fraction of each brand's images marked as train.
    pub train_fraction: f64,
    pub seed: u64,
    pub category: String,
}

impl SynthConfig {
    /// One brand per presentation family.
    pub fn three_brands(images_per_brand: usize, seed: u64) -> Self {
        SynthConfig {
            brands: vec![
                BrandRecipe {
                    label: "crestline".into(),
                    family: LogoGroup::Logo,
                    color: [220, 40, 40],
                    glyph: Glyph::cross(),
                },
                BrandRecipe {
                    label: "monogramme".into(),
                    family: LogoGroup::RepeatedLogo,
                    color: [40, 60, 220],
                    glyph: Glyph::ring(),
                },
                BrandRecipe {
                    label: "weftworks".into(),
                    family: LogoGroup::NoLogo,
                    color: [40, 200, 60],
                    glyph: Glyph::diamond(),
                },
            ],
            images_per_brand,
            image_size: 64,
            tile_period: 8,
            train_fraction: 0.0,
            seed,
            category: "bags".into(),
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::three_brands(300, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: String,
    pub brand: usize,
    pub group: LogoGroup,
    pub split: Split,
    pub image: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<SyntheticImage>,
    pub manifest: DatasetManifest,
    pub annotations: AnnotationSet,
}

fn image_path(id: &str) -> PathBuf {
    Path::new("images").join(format!("{id}.ppm"))
}

pub fn generate_synthetic(config: &SynthConfig) -> SyntheticDataset {
    let n = config.images_per_brand;
    let n_train = (config.train_fraction.clamp(0.0, 1.0) * n as f64).floor() as usize;
    let mut images = Vec::with_capacity(config.brands.len() * n);
    for (b, recipe) in config.brands.iter().enumerate() {
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((b * n + i) as u64);
            images.push(SyntheticImage {
                image_id: format!("{}_{i:04}", recipe.label),
                brand: b,
                group: recipe.family,
                split: if i < n_train { Split::Train } else { Split::Test },
                image: render(recipe, config, &mut rng),
            });
        }
    }
    let manifest = DatasetManifest {
        category: config.category.clone(),
        root: PathBuf::new(),
        entries: images
            .iter()
            .map(|s| ManifestEntry {
                image_id: s.image_id.clone(),
                path: image_path(&s.image_id),
                brand: config.brands[s.brand].label.clone(),
                split: s.split,
            })
            .collect(),
    };
    let annotations = AnnotationSet {
        entries: images
            .iter()
            .map(|s| {
                (
                    s.image_id.clone(),
                    Annotation {
                        group: s.group,
                        annotators: 5,
                    },
                )
            })
            .collect(),
    };
    SyntheticDataset {
        images,
        manifest,
        annotations,
    }
}

/// Writes `images/*.ppm`, `manifest.csv` and `annotations.csv` under `dir`.
pub fn write_dataset(dataset: &SyntheticDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for s in &dataset.images {
        let p = dir.join(image_path(&s.image_id));
        fs::write(&p, encode_ppm(&s.image)).map_err(|e| Error::io(&p, e))?;
    }
    let m = dir.join("manifest.csv");
    fs::write(&m, dataset.manifest.to_csv()).map_err(|e| Error::io(&m, e))?;
    let a = dir.join("annotations.csv");
    fs::write(&a, dataset.annotations.to_csv()).map_err(|e| Error::io(&a, e))?;
    Ok(())
}

fn noise_background(size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let base: i32 = rng.gen_range(96..=160);
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let g = (base + rng.gen_range(-24..=24)).clamp(0, 255) as u8;
            img.put(x, y, [g, g, g]);
        }
    }
    img
}

fn stamp(img: &mut RgbImage, glyph: &Glyph, x0: usize, y0: usize, color: [u8; 3]) {
    for gy in 0..glyph.size {
        for gx in 0..glyph.size {
            if glyph.ink(gx, gy) {
                img.put(x0 + gx, y0 + gy, color);
            }
        }
    }
}

fn render(recipe: &BrandRecipe, config: &SynthConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let size = config.image_size;
    let g = recipe.glyph.size;
    let mut img = noise_background(size, rng);
    match recipe.family {
        LogoGroup::Logo => {
            let x = rng.gen_range(0..=size - g);
            let y = rng.gen_range(0..=size - g);
            stamp(&mut img, &recipe.glyph, x, y, recipe.color);
        }
        LogoGroup::RepeatedLogo => {
            let period = config.tile_period.max(g + 1);
            let ox = rng.gen_range(0..period.min(size - g + 1));
            let oy = rng.gen_range(0..period.min(size - g + 1));
            for y in (oy..=size - g).step_by(period) {
                for x in (ox..=size - g).step_by(period) {
                    stamp(&mut img, &recipe.glyph, x, y, recipe.color);
                }
            }
        }
        LogoGroup::NoLogo => {
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let wavelength = rng.gen_range(18.0..28.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let (c, s) = (theta.cos(), theta.sin());
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f64 * c + y as f64 * s) / wavelength * std::f64::consts::TAU + phase;
                    let w = (0.5 + 0.5 * t.sin()).powi(3);
                    let bg = img.get(x, y);
                    let mut px = [0u8; 3];
                    for ch in 0..3 {
                        px[ch] = (bg[ch] as f64 * (1.0 - w) + recipe.color[ch] as f64 * w).round() as u8;
                    }
                    img.put(x, y, px);
                }
            }
        }
    }
    img
}

/// Response (before relu) a glyph unit must exceed, as a fraction of a perfect match.
pub const GLYPH_THRESHOLD: f32 = 0.6;
/// Same for texture units, as a fraction of a fully saturated window.
pub const TEXTURE_THRESHOLD: f32 = 0.7;
/// Pooling factor between the detector and the attribution layer.
pub const POOL: usize = 4;
/// Target layer of the template network.
pub const TEMPLATE_TARGET: &str = "map.relu";

/// A network with one detector unit per brand: glyph brands get a matched
/// filter for their glyph in their colour, texture brands a colour detector
/// over the whole window. Detections are max-pooled, passed through an
/// identity 1×1 conv (the attribution layer), averaged, and scaled into logits.
pub fn template_network(config: &SynthConfig) -> Result<Model> {
    let k = config.brands.len();
    let size = config.image_size;
    let g = config
        .brands
        .iter()
        .map(|b| b.glyph.size)
        .max()
        .ok_or_else(|| Error::Config("at least one brand recipe is required".into()))?;
    if !size.is_multiple_of(POOL) || size < g {
        return Err(Error::Config(format!("image size {size} must be a multiple of {POOL} and fit the glyphs")));
    }
    let mean = 0.5f32;
    let std = 0.5f32;

    let mut det_w = vec![0.0f32; k * 3 * g * g];
    let mut det_b = vec![0.0f32; k];
    for (b, recipe) in config.brands.iter().enumerate() {
        let s: Vec<f32> = recipe.color.iter().map(|&c| (c as f32 / 255.0 - mean) / std).collect();
        let avg = s.iter().sum::<f32>() / 3.0;
        let chroma: Vec<f32> = s.iter().map(|v| v - avg).collect();
        let norm2: f32 = chroma.iter().map(|v| v * v).sum();
        if norm2 <= 0.0 {
            return Err(Error::Config(format!("brand `{}` needs a non-grey colour", recipe.label)));
        }
        let off = (g - recipe.glyph.size) / 2;
        let (cells, threshold): (Vec<(usize, usize)>, f32) = match recipe.family {
            LogoGroup::NoLogo => ((0..g * g).map(|i| (i % g, i / g)).collect(), TEXTURE_THRESHOLD),
            _ => (
                (0..recipe.glyph.size * recipe.glyph.size)
                    .map(|i| (i % recipe.glyph.size, i / recipe.glyph.size))
                    .filter(|&(x, y)| recipe.glyph.ink(x, y))
                    .map(|(x, y)| (x + off, y + off))
                    .collect(),
                GLYPH_THRESHOLD,
            ),
        };
        let scale = 1.0 / (norm2 * cells.len() as f32);
        for (x, y) in cells {
            for ch in 0..3 {
                det_w[((b * 3 + ch) * g + y) * g + x] = chroma[ch] * scale;
            }
        }
        det_b[b] = -threshold;
    }

    let cells = size / POOL;
    let mut identity = vec![0.0f32; k * k];
    let mut head = vec![0.0f32; k * k];
    for b in 0..k {
        identity[b * k + b] = 1.0;
        head[b * k + b] = (cells * cells * 8) as f32;
    }

    let mut weights = WeightStore::new();
    let mut put = |name: &str, shape: Shape, data: Vec<f32>| {
        weights.insert(name.to_string(), Tensor::from_vec(shape, data).expect("sized"));
    };
    put("det.weight", Shape::new(k, 3, g, g), det_w);
    put("det.bias", Shape::new(k, 1, 1, 1), det_b);
    put("map.weight", Shape::new(k, k, 1, 1), identity);
    put("map.bias", Shape::new(k, 1, 1, 1), vec![0.0; k]);
    put("fc.weight", Shape::new(k, k, 1, 1), head);
    put("fc.bias", Shape::new(k, 1, 1, 1), vec![0.0; k]);

    let conv = |out_channels, kernel, padding| LayerKind::Conv {
        out_channels,
        kernel,
        stride: 1,
        padding,
        batch_norm: None,
    };
    let layers = vec![
        LayerSpec::new("input", LayerKind::Input, &[]),
        LayerSpec::new("det.conv", conv(k, g, g / 2), &["input"]).with_weights("det"),
        LayerSpec::new("det.relu", LayerKind::Relu, &["det.conv"]),
        LayerSpec::new(
            "det.pool",
            LayerKind::Maxpool {
                kernel: POOL,
                stride: POOL,
            },
            &["det.relu"],
        ),
        LayerSpec::new("map.conv", conv(k, 1, 0), &["det.pool"]).with_weights("map"),
        LayerSpec::new(TEMPLATE_TARGET, LayerKind::Relu, &["map.conv"]),
        LayerSpec::new(
            "head.pool",
            LayerKind::Avgpool {
                kernel: cells,
                stride: cells,
            },
            &[TEMPLATE_TARGET],
        ),
        LayerSpec::new("head.flatten", LayerKind::Flatten, &["head.pool"]),
        LayerSpec::new("head.fc", LayerKind::Dense { out_features: k }, &["head.flatten"]).with_weights("fc"),
    ];
    let graph = ModelGraph {
        layers,
        num_classes: k,
        class_labels: config.brands.iter().map(|b| b.label.clone()).collect(),
        target_layer_default: TEMPLATE_TARGET.into(),
        preprocess: Preprocess {
            mean: vec![mean; 3],
            std: vec![std; 3],
        },
        input_shape: [3, size, size],
    };
    Model::new(graph, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::image::{preprocess, to_tensor};
    use crate::model::{forward, predict};

    /// Positions where every ink pixel of `glyph` has exactly `color`.
    fn template_scan(img: &RgbImage, glyph: &Glyph, color: [u8; 3]) -> Vec<(usize, usize)> {
        let mut hits = Vec::new();
        for y in 0..=img.height - glyph.size {
            for x in 0..=img.width - glyph.size {
                let all = (0..glyph.size * glyph.size)
                    .filter(|i| glyph.mask[*i])
                    .all(|i| img.get(x + i % glyph.size, y + i / glyph.size) == color);
                if all {
                    hits.push((x, y));
                }
            }
        }
        hits
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::three_brands(6, 11);
        assert_eq!(generate_synthetic(&cfg), generate_synthetic(&cfg));
        let other = generate_synthetic(&SynthConfig::three_brands(6, 12));
        assert_ne!(generate_synthetic(&cfg).images[0].image, other.images[0].image);
    }

    #[test]
    fn logo_images_hold_exactly_one_glyph() {
        let cfg = SynthConfig::three_brands(20, 3);
        let ds = generate_synthetic(&cfg);
        for s in &ds.images {
            let r = &cfg.brands[s.brand];
            let hits = template_scan(&s.image, &r.glyph, r.color);
            match s.group {
                LogoGroup::Logo => assert_eq!(hits.len(), 1, "{}", s.image_id),
                LogoGroup::RepeatedLogo => assert!(hits.len() >= 25, "{}: {}", s.image_id, hits.len()),
                LogoGroup::NoLogo => assert!(hits.is_empty()),
            }
        }
    }

    #[test]
    fn annotations_follow_recipe_family() {
        let cfg = SynthConfig::three_brands(5, 0);
        let ds = generate_synthetic(&cfg);
        assert_eq!(ds.manifest.entries.len(), 15);
        for (s, (id, a)) in ds.images.iter().zip(&ds.annotations.entries) {
            assert_eq!(&s.image_id, id);
            assert_eq!(a.group, cfg.brands[s.brand].family);
        }
        assert!(ds.manifest.entries.iter().all(|e| e.split == Split::Test));
    }

    #[test]
    fn train_fraction_marks_leading_images() {
        let mut cfg = SynthConfig::three_brands(10, 0);
        cfg.train_fraction = 0.3;
        let ds = generate_synthetic(&cfg);
        let train = ds.manifest.entries.iter().filter(|e| e.split == Split::Train).count();
        assert_eq!(train, 9);
    }

    #[test]
    fn template_network_recognizes_its_brands() {
        let cfg = SynthConfig::three_brands(30, 5);
        let model = template_network(&cfg).unwrap();
        let ds = generate_synthetic(&cfg);
        let pre = &model.graph().preprocess;
        for s in &ds.images {
            let r = &cfg.brands[s.brand];
            let expected = if r.family == LogoGroup::NoLogo {
                s.brand
            } else {
                // the glyph found by the scan decides the expected class
                let owner = cfg
                    .brands
                    .iter()
                    .position(|b| b.family != LogoGroup::NoLogo && !template_scan(&s.image, &b.glyph, b.color).is_empty())
                    .expect("glyph image has a glyph");
                owner
            };
            let x = preprocess(&to_tensor(&s.image), pre, (64, 64)).unwrap();
            let trace = forward(&model, &x).unwrap();
            assert_eq!(predict(&model, &trace).unwrap().index, expected, "{}", s.image_id);
        }
    }
}
