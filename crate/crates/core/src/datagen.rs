//! Procedural histology-like slides, multi-resolution patch sampling and
//! labelled/unlabelled manifests.
//!
//! Slides are rendered in optical-density space: an eosin-stained textured
//! background plus soft hematoxylin discs for nuclei, converted to RGB with
//! Beer–Lambert. Tumor regions carry denser, larger and darker nuclei, so
//! colour deconvolution recovers the nuclei and the class signal is a
//! property of nucleus arrangement rather than a single colour.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{self, Image};
use crate::par::Exec;
use crate::stainsep::StainMatrix;

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_PATCH_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "40x")]
    X40,
    #[serde(rename = "20x")]
    X20,
    #[serde(rename = "10x")]
    X10,
    #[serde(rename = "5x")]
    X5,
}

impl Magnification {
    /// Highest to lowest.
    pub const ALL: [Magnification; 4] = [Magnification::X40, Magnification::X20, Magnification::X10, Magnification::X5];

    pub fn power(self) -> u32 {
        match self {
            Magnification::X40 => 40,
            Magnification::X20 => 20,
            Magnification::X10 => 10,
            Magnification::X5 => 5,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Magnification::X40 => "40x",
            Magnification::X20 => "20x",
            Magnification::X10 => "10x",
            Magnification::X5 => "5x",
        }
    }

    /// Side length, in base-level pixels, of the region a `size`-pixel
    /// window at this magnification covers.
    pub fn source_side(self, base: Magnification, size: usize) -> Result<usize> {
        let num = size as u64 * base.power() as u64;
        let den = self.power() as u64;
        if num % den != 0 || num == 0 {
            return Err(Error::param(format!(
                "window of {size} px at {} is not a whole number of pixels at base {}",
                self.tag(),
                base.tag()
            )));
        }
        Ok((num / den) as usize)
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Magnification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "40x" | "40" | "40×" => Ok(Magnification::X40),
            "20x" | "20" | "20×" => Ok(Magnification::X20),
            "10x" | "10" | "10×" => Ok(Magnification::X10),
            "5x" | "5" | "5×" => Ok(Magnification::X5),
            other => Err(Error::param(format!("unknown magnification {other:?}"))),
        }
    }
}

/// Procedural slide parameters. Lengths are in base-level pixels and
/// densities in nuclei per 10,000 px².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideParams {
    pub width: usize,
    pub height: usize,
    pub base_magnification: Magnification,
    /// 2 for tumor/normal, otherwise K region types.
    pub classes: usize,
    /// Number of Voronoi cells making up the class field.
    pub region_cells: usize,
    /// Probability that a cell is tumor (binary slides only).
    pub tumor_fraction: f64,
    pub nuclei_density: f64,
    /// Density multiplier of the highest class relative to class 0.
    pub tumor_density_ratio: f64,
    pub nucleus_radius: [f64; 2],
    pub tumor_radius_factor: f64,
    /// Peak hematoxylin concentration range of a nucleus.
    pub nucleus_stain: [f64; 2],
    pub tumor_stain_factor: f64,
    pub background_hematoxylin: f64,
    pub eosin_level: f64,
    pub texture_amplitude: f64,
    /// Uniform per-pixel jitter on the eosin concentration.
    pub noise: f64,
    /// Rendering stain vectors; a different matrix produces a colour-shifted
    /// domain.
    pub stain_h: [f64; 3],
    pub stain_e: [f64; 3],
    /// Global optical-density gain (scanner/stain intensity shift).
    pub od_gain: f64,
    pub domain: String,
}

impl Default for SlideParams {
    fn default() -> Self {
        let m = StainMatrix::default();
        SlideParams {
            width: 1024,
            height: 1024,
            base_magnification: Magnification::X10,
            classes: 2,
            region_cells: 12,
            tumor_fraction: 0.5,
            nuclei_density: 40.0,
            tumor_density_ratio: 2.0,
            nucleus_radius: [2.0, 3.5],
            tumor_radius_factor: 1.3,
            nucleus_stain: [0.5, 0.8],
            tumor_stain_factor: 1.25,
            background_hematoxylin: 0.04,
            eosin_level: 0.3,
            texture_amplitude: 0.25,
            noise: 0.04,
            stain_h: m.hematoxylin(),
            stain_e: m.eosin(),
            od_gain: 1.0,
            domain: "source".to_string(),
        }
    }
}

impl SlideParams {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::param(format!("slide dimensions must be positive, got {}x{}", self.width, self.height)));
        }
        if self.classes < 2 {
            return Err(Error::param("slides need at least 2 classes"));
        }
        if self.region_cells == 0 {
            return Err(Error::param("region_cells must be positive"));
        }
        if !(self.nuclei_density >= 0.0) || !self.nuclei_density.is_finite() {
            return Err(Error::param("nuclei density must be finite and nonnegative"));
        }
        if !(self.tumor_density_ratio > 0.0) {
            return Err(Error::param("tumor_density_ratio must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tumor_fraction) {
            return Err(Error::param("tumor_fraction must lie in [0, 1]"));
        }
        if self.nucleus_radius[0] <= 0.0 || self.nucleus_radius[1] < self.nucleus_radius[0] {
            return Err(Error::param("nucleus_radius must be an increasing positive range"));
        }
        Ok(())
    }

    /// Multiplier applied to class-0 quantities for `class` (linear ramp up
    /// to `ratio` at the last class).
    fn class_factor(&self, class: usize, ratio: f64) -> f64 {
        1.0 + (ratio - 1.0) * class as f64 / (self.classes - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nucleus {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub stain: f64,
    pub class: u8,
}

/// A rendered slide plus its generation log.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub id: String,
    pub seed: u64,
    pub params: SlideParams,
    /// `(height, width, 3)` RGB intensities in [0, 1].
    pub pixels: Array3<f32>,
    /// Class index of every pixel.
    pub class_field: Array2<u8>,
    /// Placement log of every nucleus, in generation order.
    pub nuclei: Vec<Nucleus>,
}

impl SyntheticSlide {
    pub fn width(&self) -> usize {
        self.params.width
    }

    pub fn height(&self) -> usize {
        self.params.height
    }

    pub fn domain(&self) -> &str {
        &self.params.domain
    }

    pub fn class_at(&self, x: usize, y: usize) -> u8 {
        self.class_field[[y, x]]
    }

    /// Pixel area occupied by each class.
    pub fn class_areas(&self) -> Vec<usize> {
        let mut areas = vec![0; self.params.classes];
        for &c in self.class_field.iter() {
            areas[c as usize] += 1;
        }
        areas
    }

    pub fn to_image(&self) -> Image {
        self.pixels.mapv(|v| v as f64)
    }
}

/// Identifier used for a slide generated from `seed` in `domain`.
pub fn slide_id(domain: &str, seed: u64) -> String {
    format!("{domain}-{seed}")
}

/// Renders a slide. Identical `(params, seed)` give bit-identical output.
pub fn generate_slide(params: &SlideParams, seed: u64) -> Result<SyntheticSlide> {
    params.validate()?;
    let (w, h) = (params.width, params.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // class field: Voronoi cells with random labels
    let sites: Vec<(f64, f64, u8)> = (0..params.region_cells)
        .map(|_| {
            let x = rng.random::<f64>() * w as f64;
            let y = rng.random::<f64>() * h as f64;
            let class = if params.classes == 2 {
                u8::from(rng.random::<f64>() < params.tumor_fraction)
            } else {
                rng.random_range(0..params.classes) as u8
            };
            (x, y, class)
        })
        .collect();
    let class_field = Array2::from_shape_fn((h, w), |(y, x)| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        sites
            .iter()
            .map(|&(sx, sy, c)| ((sx - px).powi(2) + (sy - py).powi(2), c))
            .fold((f64::INFINITY, 0u8), |best, cur| if cur.0 < best.0 { cur } else { best })
            .1
    });

    // nuclei: thinning of a uniform candidate process
    let max_factor = (0..params.classes)
        .map(|c| params.class_factor(c, params.tumor_density_ratio))
        .fold(0.0, f64::max);
    let max_density = params.nuclei_density * max_factor;
    let candidates = (max_density * (w * h) as f64 / 10_000.0).round() as usize;
    let mut nuclei = Vec::new();
    for _ in 0..candidates {
        let x = rng.random::<f64>() * w as f64;
        let y = rng.random::<f64>() * h as f64;
        let u = rng.random::<f64>();
        let r = rng.random::<f64>();
        let st = rng.random::<f64>();
        let class = class_field[[(y as usize).min(h - 1), (x as usize).min(w - 1)]];
        let keep = params.class_factor(class as usize, params.tumor_density_ratio) / max_factor;
        if u >= keep {
            continue;
        }
        let [r0, r1] = params.nucleus_radius;
        let [s0, s1] = params.nucleus_stain;
        nuclei.push(Nucleus {
            x,
            y,
            radius: (r0 + (r1 - r0) * r) * params.class_factor(class as usize, params.tumor_radius_factor),
            stain: (s0 + (s1 - s0) * st) * params.class_factor(class as usize, params.tumor_stain_factor),
            class,
        });
    }

    // concentration maps
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let freq = 0.01 + 0.05 * rng.random::<f64>();
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            (freq * angle.cos(), freq * angle.sin(), rng.random::<f64>() * std::f64::consts::TAU)
        })
        .collect();
    let mut hema = Array2::from_elem((h, w), params.background_hematoxylin);
    let mut eosin = Array2::zeros((h, w));
    for ((y, x), e) in eosin.indexed_iter_mut() {
        let t: f64 = waves.iter().map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin()).sum::<f64>() / 4.0;
        let jitter = (rng.random::<f64>() * 2.0 - 1.0) * params.noise;
        *e = (params.eosin_level * (1.0 + params.texture_amplitude * t) + jitter).max(0.0);
    }
    for n in &nuclei {
        stamp_nucleus(&mut hema, n);
    }

    let stains = StainMatrix::from_he(params.stain_h, params.stain_e)?;
    let (hv, ev) = (stains.hematoxylin(), stains.eosin());
    let mut pixels = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (ch, ce) = (hema[[y, x]], eosin[[y, x]]);
            for k in 0..3 {
                let od = params.od_gain * (ch * hv[k] + ce * ev[k]);
                pixels[[y, x, k]] = 10f64.powf(-od).clamp(0.0, 1.0) as f32;
            }
        }
    }

    Ok(SyntheticSlide { id: slide_id(&params.domain, seed), seed, params: params.clone(), pixels, class_field, nuclei })
}

/// Soft disc: full stain inside 0.8 r, cosine fall-off to zero at 1.2 r.
fn stamp_nucleus(hema: &mut Array2<f64>, n: &Nucleus) {
    let (h, w) = hema.dim();
    let reach = n.radius * 1.2;
    let y0 = (n.y - reach).floor().max(0.0) as usize;
    let y1 = ((n.y + reach).ceil() as usize).min(h);
    let x0 = (n.x - reach).floor().max(0.0) as usize;
    let x1 = ((n.x + reach).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = ((x as f64 + 0.5 - n.x).powi(2) + (y as f64 + 0.5 - n.y).powi(2)).sqrt() / n.radius;
            let p = if d <= 0.8 {
                1.0
            } else if d < 1.2 {
                0.5 * (1.0 + (std::f64::consts::PI * (d - 0.8) / 0.4).cos())
            } else {
                0.0
            };
            hema[[y, x]] += n.stain * p;
        }
    }
}

/// Patch coordinates within a slide: the window centre in base pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Origin {
    pub slide: String,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(size, size, 3)` in [0, 1].
    pub image: Image,
    pub label: Option<usize>,
    pub domain: String,
    pub magnification: Magnification,
    pub origin: Origin,
}

/// One sample per requested level, all centred on the same physical point.
///
/// A level other than the slide's base magnification is produced by
/// cropping the covering region at the base level and bilinearly resizing
/// it to `size`. Windows that leave the slide are rejected.
pub fn sample_pyramid(
    slide: &SyntheticSlide,
    center: (usize, usize),
    size: usize,
    levels: &[Magnification],
) -> Result<Vec<Sample>> {
    let (cx, cy) = center;
    if cx >= slide.width() || cy >= slide.height() {
        return Err(Error::Boundary(format!("centre ({cx}, {cy}) outside {}x{} slide", slide.width(), slide.height())));
    }
    if size == 0 {
        return Err(Error::param("patch size must be positive"));
    }
    let base = slide.params.base_magnification;
    levels
        .iter()
        .map(|&level| {
            let side = level.source_side(base, size)?;
            let (x0, y0) = window_origin(slide, (cx, cy), side)?;
            let crop = slide.pixels.slice(s![y0..y0 + side, x0..x0 + side, ..]).mapv(|v| v as f64);
            let image = if side == size { crop } else { imageops::resize_bilinear(crop.view(), size, size) };
            Ok(Sample {
                image,
                label: None,
                domain: slide.params.domain.clone(),
                magnification: level,
                origin: Origin { slide: slide.id.clone(), x: cx, y: cy },
            })
        })
        .collect()
}

fn window_origin(slide: &SyntheticSlide, (cx, cy): (usize, usize), side: usize) -> Result<(usize, usize)> {
    let half = side / 2;
    let fits = |c: usize, dim: usize| c >= half && c - half + side <= dim;
    if !fits(cx, slide.width()) || !fits(cy, slide.height()) {
        return Err(Error::Boundary(format!(
            "{side}x{side} window centred at ({cx}, {cy}) exceeds {}x{} slide",
            slide.width(),
            slide.height()
        )));
    }
    Ok((cx - half, cy - half))
}

/// Half-width margin a centre needs so that every level's window fits.
pub fn pyramid_margin(base: Magnification, size: usize, levels: &[Magnification]) -> Result<usize> {
    let mut side = 0;
    for &l in levels {
        side = side.max(l.source_side(base, size)?);
    }
    Ok(side / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split {other:?}"))),
        }
    }
}

/// Unit at which the annotation budget is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Patch,
    Slide,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub origin: Origin,
    pub magnification: Magnification,
    /// Present for labelled training entries and for every val/test entry.
    pub label: Option<usize>,
    pub domain: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifestSpec {
    pub patches_per_slide: usize,
    pub patch_size: usize,
    pub magnification: Magnification,
    pub label_budget: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub granularity: Granularity,
    /// Seeds patch placement and split assignment. Kept separate from the
    /// labelling seed so every budget/seed cell shares one test split.
    pub layout_seed: u64,
}

impl Default for ManifestSpec {
    fn default() -> Self {
        ManifestSpec {
            patches_per_slide: 100,
            patch_size: DEFAULT_PATCH_SIZE,
            magnification: Magnification::X10,
            label_budget: 1.0,
            val_fraction: 0.1,
            test_fraction: 0.2,
            granularity: Granularity::Patch,
            layout_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

/// `⌈budget × n⌉`, robust to representation error in `budget`.
pub fn budget_count(budget: f64, n: usize) -> usize {
    let raw = budget * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Places patches on every slide, assigns splits and keeps labels for
/// `⌈label_budget × N⌉` training entries (or slides) chosen by a shuffle
/// seeded with `seed`.
pub fn build_manifest(slides: &[SyntheticSlide], spec: &ManifestSpec, seed: u64) -> Result<Manifest> {
    if slides.is_empty() {
        return Err(Error::param("build_manifest needs at least one slide"));
    }
    if !(0.0..=1.0).contains(&spec.label_budget) {
        return Err(Error::param(format!("label budget {} outside [0, 1]", spec.label_budget)));
    }
    if spec.val_fraction < 0.0 || spec.test_fraction < 0.0 || spec.val_fraction + spec.test_fraction >= 1.0 {
        return Err(Error::param("val_fraction + test_fraction must lie in [0, 1)"));
    }
    let num_classes = slides[0].params.classes;
    if slides.iter().any(|s| s.params.classes != num_classes) {
        return Err(Error::param("all slides in a manifest must share the class count"));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = slides.iter().find(|s| !seen.insert(s.id.as_str())) {
        return Err(Error::param(format!("duplicate slide id {}", dup.id)));
    }

    let mut layout = ChaCha8Rng::seed_from_u64(spec.layout_seed);
    let mut entries = Vec::with_capacity(slides.len() * spec.patches_per_slide);
    for slide in slides {
        let base = slide.params.base_magnification;
        let margin = pyramid_margin(base, spec.patch_size, &Magnification::ALL)?;
        if slide.width() < 2 * margin + 1 || slide.height() < 2 * margin + 1 {
            return Err(Error::Boundary(format!(
                "slide {} ({}x{}) too small for {}px pyramid windows",
                slide.id,
                slide.width(),
                slide.height(),
                spec.patch_size
            )));
        }
        let mut taken = HashSet::new();
        for _ in 0..spec.patches_per_slide {
            let (mut x, mut y);
            let mut attempts = 0;
            loop {
                x = layout.random_range(margin..=slide.width() - margin).min(slide.width() - 1);
                y = layout.random_range(margin..=slide.height() - margin).min(slide.height() - 1);
                attempts += 1;
                if taken.insert((x, y)) || attempts > 64 {
                    break;
                }
            }
            entries.push(ManifestEntry {
                label: Some(slide.class_at(x, y) as usize),
                origin: Origin { slide: slide.id.clone(), x, y },
                magnification: spec.magnification,
                domain: slide.params.domain.clone(),
                split: Split::Train,
            });
        }
    }

    let mut labeler = ChaCha8Rng::seed_from_u64(seed);
    match spec.granularity {
        Granularity::Patch => {
            let mut order: Vec<usize> = (0..entries.len()).collect();
            order.shuffle(&mut layout);
            let n_val = budget_count(spec.val_fraction, entries.len());
            let n_test = budget_count(spec.test_fraction, entries.len());
            for &i in &order[..n_val] {
                entries[i].split = Split::Val;
            }
            for &i in &order[n_val..n_val + n_test] {
                entries[i].split = Split::Test;
            }
            let mut train: Vec<usize> = order[n_val + n_test..].to_vec();
            train.sort_unstable();
            train.shuffle(&mut labeler);
            let keep = budget_count(spec.label_budget, train.len());
            for &i in &train[keep..] {
                entries[i].label = None;
            }
        }
        Granularity::Slide => {
            let mut ids: Vec<&str> = slides.iter().map(|s| s.id.as_str()).collect();
            ids.shuffle(&mut layout);
            let n_val = budget_count(spec.val_fraction, ids.len());
            let n_test = budget_count(spec.test_fraction, ids.len());
            let mut split_of = BTreeMap::new();
            for (k, id) in ids.iter().enumerate() {
                let split = if k < n_val {
                    Split::Val
                } else if k < n_val + n_test {
                    Split::Test
                } else {
                    Split::Train
                };
                split_of.insert(id.to_string(), split);
            }
            let mut train_ids: Vec<String> =
                split_of.iter().filter(|(_, s)| **s == Split::Train).map(|(id, _)| id.clone()).collect();
            train_ids.shuffle(&mut labeler);
            let keep: HashSet<String> =
                train_ids.iter().take(budget_count(spec.label_budget, train_ids.len())).cloned().collect();
            for e in &mut entries {
                e.split = split_of[&e.origin.slide];
                if e.split == Split::Train && !keep.contains(&e.origin.slide) {
                    e.label = None;
                }
            }
        }
    }

    let manifest = Manifest { format_version: MANIFEST_VERSION, num_classes, entries };
    manifest.validate()?;
    Ok(manifest)
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut split_of = std::collections::HashMap::new();
        for e in &self.entries {
            if let Some(l) = e.label {
                if l >= self.num_classes {
                    return Err(Error::data(format!("label {l} outside {} classes", self.num_classes)));
                }
            }
            if e.split != Split::Train && e.label.is_none() {
                return Err(Error::data(format!("{} entry {:?} has no label", e.split.as_str(), e.origin)));
            }
            if let Some(prev) = split_of.insert((&e.origin, e.magnification), e.split) {
                if prev != e.split {
                    return Err(Error::data(format!("entry {:?} appears in more than one split", e.origin)));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn labeled(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.split(Split::Train).filter(|e| e.label.is_some())
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.split(Split::Train).filter(|e| e.label.is_none())
    }

    /// Class counts among labelled training entries.
    pub fn labeled_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in self.labeled() {
            counts[e.label.unwrap()] += 1;
        }
        counts
    }

    pub fn domains(&self) -> Vec<String> {
        let mut d: Vec<String> = self.entries.iter().map(|e| e.domain.clone()).collect();
        d.sort();
        d.dedup();
        d
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# selfpath-manifest v{} classes={}", self.format_version, self.num_classes)?;
        for e in &self.entries {
            let label = e.label.map(|l| l.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.origin.slide,
                e.origin.x,
                e.origin.y,
                e.magnification.tag(),
                label,
                e.domain,
                e.split.as_str()
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::data("empty manifest"))??;
        let (version, classes) = parse_header(&header)?;
        if version != MANIFEST_VERSION {
            return Err(Error::data(format!("unsupported manifest version {version}")));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::data(format!("manifest line {}: expected 7 fields, got {}", n + 2, f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| Error::data(format!("manifest line {}: {e}", n + 2)));
            let label = match f[4] {
                "" | "∅" => None,
                s => Some(num(s)?),
            };
            entries.push(ManifestEntry {
                origin: Origin { slide: f[0].to_string(), x: num(f[1])?, y: num(f[2])? },
                magnification: f[3].parse().map_err(|e: Error| Error::data(e.to_string()))?,
                label,
                domain: f[5].to_string(),
                split: f[6].parse()?,
            });
        }
        let m = Manifest { format_version: version, num_classes: classes, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|source| Error::Path { path: path.to_path_buf(), source })?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn parse_header(line: &str) -> Result<(u32, usize)> {
    let bad = || Error::data(format!("bad manifest header {line:?}"));
    let rest = line.strip_prefix("# selfpath-manifest v").ok_or_else(bad)?;
    let (v, c) = rest.split_once(" classes=").ok_or_else(bad)?;
    Ok((v.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

/// `<slide>_<x>_<y>_<mag>.png`
pub fn patch_file_name(origin: &Origin, mag: Magnification) -> String {
    format!("{}_{}_{}_{}.png", origin.slide, origin.x, origin.y, mag.tag())
}

/// Indexes slides by id and cuts manifest entries into samples.
#[derive(Debug, Clone, Default)]
pub struct SlideSet {
    slides: BTreeMap<String, SyntheticSlide>,
}

impl SlideSet {
    pub fn new(slides: impl IntoIterator<Item = SyntheticSlide>) -> Self {
        SlideSet { slides: slides.into_iter().map(|s| (s.id.clone(), s)).collect() }
    }

    /// Generates `count` slides from consecutive seeds starting at `first_seed`.
    pub fn generate(params: &SlideParams, first_seed: u64, count: usize, exec: Exec) -> Result<Self> {
        let seeds: Vec<u64> = (0..count as u64).map(|k| first_seed + k).collect();
        let slides = exec.map(&seeds, |&s| generate_slide(params, s)).into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self::new(slides))
    }

    pub fn get(&self, id: &str) -> Result<&SyntheticSlide> {
        self.slides.get(id).ok_or_else(|| Error::data(format!("unknown slide {id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &SyntheticSlide> {
        self.slides.values()
    }

    pub fn to_vec(&self) -> Vec<SyntheticSlide> {
        self.slides.values().cloned().collect()
    }

    pub fn extend(&mut self, other: SlideSet) {
        self.slides.extend(other.slides);
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }

    pub fn sample(&self, entry: &ManifestEntry, size: usize) -> Result<Sample> {
        self.sample_at(entry, size, entry.magnification)
    }

    pub fn sample_at(&self, entry: &ManifestEntry, size: usize, mag: Magnification) -> Result<Sample> {
        let slide = self.get(&entry.origin.slide)?;
        let mut s = sample_pyramid(slide, (entry.origin.x, entry.origin.y), size, &[mag])?.remove(0);
        s.label = entry.label;
        s.domain = entry.domain.clone();
        Ok(s)
    }

    pub fn pyramid(&self, entry: &ManifestEntry, size: usize) -> Result<Vec<Sample>> {
        let slide = self.get(&entry.origin.slide)?;
        sample_pyramid(slide, (entry.origin.x, entry.origin.y), size, &Magnification::ALL)
    }

    /// Writes every manifest entry as a lossless PNG into `dir`.
    pub fn write_patches(&self, manifest: &Manifest, size: usize, dir: &Path) -> Result<usize> {
        std::fs::create_dir_all(dir)?;
        for e in &manifest.entries {
            let s = self.sample(e, size)?;
            imageops::save_png(&s.image, &dir.join(patch_file_name(&e.origin, e.magnification)))?;
        }
        Ok(manifest.entries.len())
    }
}
