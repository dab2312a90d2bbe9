//! Slide-level scoring: overlapping patch inference aggregated into a
//! probability heat map, morphology features of the thresholded map, and a
//! random-forest slide classifier.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Magnification, SyntheticSlide};
use crate::error::{Error, Result};
use crate::evalkit;
use crate::imageops::{self, Image};
use crate::model::{self, ModelGraph, MAIN_HEAD};
use crate::par::Exec;

pub const THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.9];

/// Per-object features, in vector order.
pub const OBJECT_FEATURES: [&str; 10] = [
    "area",
    "perimeter",
    "eccentricity",
    "solidity",
    "extent",
    "major_axis",
    "minor_axis",
    "equivalent_diameter",
    "mean_probability",
    "max_probability",
];

pub const STATISTICS: [&str; 4] = ["mean", "std", "min", "max"];

pub const FEATURE_LEN: usize = THRESHOLDS.len() * OBJECT_FEATURES.len() * STATISTICS.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub magnification: Magnification,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig { patch_size: 128, stride: 64, magnification: Magnification::X10 }
    }
}

impl HeatmapConfig {
    /// Windows per axis: `⌊(dim − patch) / stride⌋ + 1`.
    pub fn grid_len(&self, dim: usize) -> Result<usize> {
        if self.stride == 0 || self.patch_size == 0 {
            return Err(Error::config("patch size and stride must be positive"));
        }
        if dim < self.patch_size {
            return Err(Error::Boundary(format!("slide side {dim} is smaller than one {} px window", self.patch_size)));
        }
        Ok((dim - self.patch_size) / self.stride + 1)
    }
}

/// Patch probabilities on the window grid plus their aggregate.
///
/// `windows[r][c]` is the tumor probability of the window whose top-left
/// corner is `(c·stride, r·stride)`. `values` has one cell per `stride`-sized
/// block covered by at least one window and holds the mean of every window
/// covering that block — i.e. the per-pixel mean at stride resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub slide_id: String,
    pub config: HeatmapConfig,
    pub windows: Array2<f64>,
    pub values: Array2<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    slide_id: String,
    patch_size: usize,
    stride: usize,
    magnification: Magnification,
    rows: usize,
    cols: usize,
    dtype: String,
    windows: Vec<Vec<f64>>,
}

impl HeatMap {
    /// Builds the map from `(row, col, p)` window scores given in any order.
    pub fn from_windows(
        slide_id: &str,
        config: HeatmapConfig,
        rows: usize,
        cols: usize,
        scores: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut windows = Array2::from_elem((rows, cols), f64::NAN);
        for (r, c, p) in scores {
            if r >= rows || c >= cols {
                return Err(Error::param(format!("window ({r}, {c}) outside {rows}x{cols} grid")));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("window probability {p} outside [0, 1]")));
            }
            windows[[r, c]] = p;
        }
        if windows.iter().any(|v| v.is_nan()) {
            return Err(Error::param("every window needs a score"));
        }
        let values = aggregate(&windows, config)?;
        Ok(HeatMap { slide_id: slide_id.to_string(), config, windows, values })
    }

    /// Wraps an already aggregated grid (feature extraction on arbitrary maps).
    pub fn from_values(slide_id: &str, values: Array2<f64>) -> Self {
        HeatMap { slide_id: slide_id.to_string(), config: HeatmapConfig::default(), windows: values.clone(), values }
    }

    /// Writes `<stem>.heat` (row-major little-endian f64 of `values`) and a
    /// `<stem>.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(format!("{stem}.heat")), bytes)?;
        let side = Sidecar {
            slide_id: self.slide_id.clone(),
            patch_size: self.config.patch_size,
            stride: self.config.stride,
            magnification: self.config.magnification,
            rows: self.values.nrows(),
            cols: self.values.ncols(),
            dtype: "f64le".into(),
            windows: self.windows.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json_path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&json_path).map_err(|source| Error::Path { path: json_path, source })?;
        let side: Sidecar = serde_json::from_str(&text)?;
        let heat_path = dir.join(format!("{stem}.heat"));
        let bytes = std::fs::read(&heat_path).map_err(|source| Error::Path { path: heat_path, source })?;
        if side.dtype != "f64le" || bytes.len() != side.rows * side.cols * 8 {
            return Err(Error::data("heat map file does not match its sidecar"));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let values = Array2::from_shape_vec((side.rows, side.cols), vals).unwrap();
        let wr = side.windows.len();
        let wc = side.windows.first().map_or(0, Vec::len);
        let windows = Array2::from_shape_vec((wr, wc), side.windows.concat()).map_err(|_| Error::data("ragged windows"))?;
        let config = HeatmapConfig { patch_size: side.patch_size, stride: side.stride, magnification: side.magnification };
        Ok(HeatMap { slide_id: side.slide_id, config, windows, values })
    }
}

/// Mean of the covering windows for every stride block; contributions are
/// summed in window-grid order so the result does not depend on the order
/// in which windows were scored.
fn aggregate(windows: &Array2<f64>, cfg: HeatmapConfig) -> Result<Array2<f64>> {
    if cfg.patch_size % cfg.stride != 0 {
        return Err(Error::config("patch size must be a multiple of the stride"));
    }
    let span = cfg.patch_size / cfg.stride;
    let (gr, gc) = windows.dim();
    let (cr, cc) = (gr + span - 1, gc + span - 1);
    Ok(Array2::from_shape_fn((cr, cc), |(i, j)| {
        let rows = i.saturating_sub(span - 1)..=i.min(gr - 1);
        let mut sum = 0.0;
        let mut n = 0;
        for r in rows {
            for c in j.saturating_sub(span - 1)..=j.min(gc - 1) {
                sum += windows[[r, c]];
                n += 1;
            }
        }
        sum / n as f64
    }))
}

/// Slide pixels at `mag`, resampled from the base level when they differ.
pub fn slide_at(slide: &SyntheticSlide, mag: Magnification) -> Image {
    let img = slide.to_image();
    let base = slide.params.base_magnification;
    if base == mag {
        return img;
    }
    let f = mag.power() as f64 / base.power() as f64;
    let h = ((slide.height() as f64) * f).round().max(1.0) as usize;
    let w = ((slide.width() as f64) * f).round().max(1.0) as usize;
    imageops::resize_bilinear(img.view(), h, w)
}

/// Sliding-window heat map with an arbitrary patch scorer.
pub fn build_heatmap_with<F>(image: &Image, slide_id: &str, cfg: HeatmapConfig, mut score: F) -> Result<HeatMap>
where
    F: FnMut(&[Image]) -> Result<Vec<f64>>,
{
    let (h, w, _) = image.dim();
    let rows = cfg.grid_len(h)?;
    let cols = cfg.grid_len(w)?;
    let coords: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    let mut scores = Vec::with_capacity(coords.len());
    for chunk in coords.chunks(64) {
        let patches: Vec<Image> = chunk
            .iter()
            .map(|&(r, c)| {
                let (y, x) = (r * cfg.stride, c * cfg.stride);
                image.slice(s![y..y + cfg.patch_size, x..x + cfg.patch_size, ..]).to_owned()
            })
            .collect();
        let p = score(&patches)?;
        if p.len() != chunk.len() {
            return Err(Error::param("scorer returned the wrong number of probabilities"));
        }
        scores.extend(chunk.iter().zip(p).map(|(&(r, c), p)| (r, c, p)));
    }
    HeatMap::from_windows(slide_id, cfg, rows, cols, scores)
}

/// Heat map of the main head's tumor (class 1) probability; windows are
/// resized to the encoder input when sizes differ.
pub fn build_heatmap(model: &ModelGraph, slide: &SyntheticSlide, cfg: HeatmapConfig, exec: Exec) -> Result<HeatMap> {
    let image = slide_at(slide, cfg.magnification);
    let input = model.encoder_config.input_size;
    build_heatmap_with(&image, &slide.id, cfg, |patches| {
        let resized: Vec<Image> = exec.map(patches, |p| {
            if p.dim().0 == input {
                p.clone()
            } else {
                imageops::resize_bilinear(p.view(), input, input)
            }
        });
        let probs = model.predict_proba(MAIN_HEAD, &model::to_batch(&resized), exec)?;
        if probs.ncols() < 2 {
            return Err(Error::config("heat maps need a classifier with a tumor class"));
        }
        Ok(probs.column(1).to_vec())
    })
}

/// 8-connected components of `mask`; returns the label grid (0 =
/// background) and the pixel list of each component in scan order.
pub fn label_components(mask: &Array2<bool>) -> (Array2<usize>, Vec<Vec<(usize, usize)>>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::zeros((h, w));
    let mut objects = Vec::new();
    let mut queue = VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] || labels[[i, j]] != 0 {
                continue;
            }
            let id = objects.len() + 1;
            let mut pixels = Vec::new();
            labels[[i, j]] = id;
            queue.push_back((i, j));
            while let Some((y, x)) = queue.pop_front() {
                pixels.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = id;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            pixels.sort_unstable();
            objects.push(pixels);
        }
    }
    (labels, objects)
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Area of the convex hull of the pixel squares (monotone chain over pixel
/// corners).
fn convex_area(pixels: &[(usize, usize)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = pixels
        .iter()
        .flat_map(|&(y, x)| {
            let (y, x) = (y as f64, x as f64);
            [(x, y), (x + 1.0, y), (x, y + 1.0), (x + 1.0, y + 1.0)]
        })
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return 0.0;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    let n = hull.len();
    (0..n).map(|i| hull[i].0 * hull[(i + 1) % n].1 - hull[(i + 1) % n].0 * hull[i].1).sum::<f64>().abs() / 2.0
}

/// The ten features of one object, in [`OBJECT_FEATURES`] order.
///
/// Perimeter counts pixel edges facing background (4-neighbourhood);
/// axis lengths and eccentricity come from the second central moments of
/// the pixel centres (`4√λ` per axis); solidity uses the convex hull of the
/// pixel squares.
pub fn object_features(pixels: &[(usize, usize)], map: &Array2<f64>, mask: &Array2<bool>) -> [f64; 10] {
    let area = pixels.len() as f64;
    let (h, w) = mask.dim();
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[[y as usize, x as usize]];
    let mut perimeter = 0.0;
    let (mut ymin, mut ymax, mut xmin, mut xmax) = (usize::MAX, 0, usize::MAX, 0);
    let (mut sy, mut sx) = (0.0, 0.0);
    let (mut psum, mut pmax) = (0.0, f64::NEG_INFINITY);
    for &(y, x) in pixels {
        for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            if !inside(y as i64 + dy, x as i64 + dx) {
                perimeter += 1.0;
            }
        }
        ymin = ymin.min(y);
        ymax = ymax.max(y);
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        sy += y as f64;
        sx += x as f64;
        psum += map[[y, x]];
        pmax = pmax.max(map[[y, x]]);
    }
    let (cy, cx) = (sy / area, sx / area);
    let (mut myy, mut mxx, mut mxy) = (0.0, 0.0, 0.0);
    for &(y, x) in pixels {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        myy += dy * dy;
        mxx += dx * dx;
        mxy += dx * dy;
    }
    let (a, b, c) = (mxx / area, myy / area, mxy / area);
    let root = (((a - b) / 2.0).powi(2) + c * c).sqrt();
    let l1 = ((a + b) / 2.0 + root).max(0.0);
    let l2 = ((a + b) / 2.0 - root).max(0.0);
    let eccentricity = if l1 > 0.0 { (1.0 - l2 / l1).max(0.0).sqrt() } else { 0.0 };
    let bbox = ((ymax - ymin + 1) * (xmax - xmin + 1)) as f64;
    let hull = convex_area(pixels);
    [
        area,
        perimeter,
        eccentricity,
        if hull > 0.0 { (area / hull).min(1.0) } else { 1.0 },
        area / bbox,
        4.0 * l1.sqrt(),
        4.0 * l2.sqrt(),
        (4.0 * area / std::f64::consts::PI).sqrt(),
        psum / area,
        pmax,
    ]
}

/// `value ≥ t`.
pub fn binarize(map: &Array2<f64>, t: f64) -> Array2<bool> {
    map.mapv(|v| v >= t)
}

/// 120 values: for each threshold, for each object feature, the mean,
/// population std, min and max over objects (zeros when there are none).
pub fn extract_features(heatmap: &HeatMap) -> Vec<f64> {
    let map = &heatmap.values;
    let mut out = Vec::with_capacity(FEATURE_LEN);
    for &t in &THRESHOLDS {
        let mask = binarize(map, t);
        let (_, objects) = label_components(&mask);
        let feats: Vec<[f64; 10]> = objects.iter().map(|o| object_features(o, map, &mask)).collect();
        for k in 0..OBJECT_FEATURES.len() {
            if feats.is_empty() {
                out.extend([0.0; 4]);
                continue;
            }
            let vals: Vec<f64> = feats.iter().map(|f| f[k]).collect();
            let (mean, std) = evalkit::mean_std(&vals);
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.extend([mean, std, min, max]);
        }
    }
    out
}

/// Column names in vector order, e.g. `t0.25_area_mean`.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(FEATURE_LEN);
    for t in THRESHOLDS {
        for f in OBJECT_FEATURES {
            for s in STATISTICS {
                names.push(format!("t{t}_{f}_{s}"));
            }
        }
    }
    names
}

/// CSV with a `slide,label,<120 feature columns>` header.
pub fn features_csv(rows: &[(String, Option<usize>, Vec<f64>)]) -> String {
    let mut out = String::from("slide,label,");
    out.push_str(&feature_names().join(","));
    out.push('\n');
    for (id, label, v) in rows {
        let _ = write!(out, "{id},{}", label.map(|l| l.to_string()).unwrap_or_default());
        for x in v {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

/// Slide thumbnail with the heat map blended in red (`alpha = 0.6·p`).
pub fn render_overlay(slide: &Image, heatmap: &HeatMap, max_side: usize) -> Image {
    let (h, w, _) = slide.dim();
    let scale = (max_side as f64 / h.max(w) as f64).min(1.0);
    let (oh, ow) = (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1));
    let thumb = if (oh, ow) == (h, w) { slide.clone() } else { imageops::resize_bilinear(slide.view(), oh, ow) };
    let (cr, cc) = heatmap.values.dim();
    let cell = heatmap.config.stride as f64 * scale;
    let mut out = thumb;
    for i in 0..oh {
        for j in 0..ow {
            let (r, c) = ((i as f64 / cell) as usize, (j as f64 / cell) as usize);
            if r >= cr || c >= cc {
                continue;
            }
            let p = heatmap.values[[r, c]];
            let a = 0.6 * p;
            let colour = [1.0, 1.0 - p, 0.0];
            for k in 0..3 {
                out[[i, j, k]] = (1.0 - a) * out[[i, j, k]] + a * colour[k];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { trees: 100, max_depth: 32, min_samples_split: 2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(Vec<f64>),
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

/// Gini-impurity random forest: bootstrap samples, `⌈√d⌉` candidate
/// features per split, class-frequency leaves averaged across trees.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    classes: usize,
    trees: Vec<Node>,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum::<f64>()
}

fn grow(x: &Array2<f64>, y: &[usize], idx: &mut [usize], classes: usize, depth: usize, cfg: &ForestConfig, rng: &mut ChaCha8Rng) -> Node {
    let mut counts = vec![0; classes];
    for &i in idx.iter() {
        counts[y[i]] += 1;
    }
    let n = idx.len();
    let leaf = || Node::Leaf(counts.iter().map(|&c| c as f64 / n as f64).collect());
    if n < cfg.min_samples_split || depth >= cfg.max_depth || counts.iter().filter(|&&c| c > 0).count() <= 1 {
        return leaf();
    }
    let d = x.ncols();
    let m = ((d as f64).sqrt().ceil() as usize).clamp(1, d);
    let mut features: Vec<usize> = (0..d).collect();
    features.shuffle(rng);
    let parent = gini(&counts, n);
    let mut best: Option<(f64, usize, f64)> = None;
    for &f in &features[..m] {
        let mut order: Vec<usize> = idx.to_vec();
        order.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]).then(a.cmp(&b)));
        let mut left = vec![0; classes];
        for k in 0..n - 1 {
            left[y[order[k]]] += 1;
            let (v, next) = (x[[order[k], f]], x[[order[k + 1], f]]);
            if v == next {
                continue;
            }
            let right: Vec<usize> = counts.iter().zip(&left).map(|(c, l)| c - l).collect();
            let nl = k + 1;
            let score = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
            if score < parent - 1e-12 && best.is_none_or(|(s, _, _)| score < s) {
                best = Some((score, f, (v + next) / 2.0));
            }
        }
    }
    let Some((_, feature, threshold)) = best else { return leaf() };
    let split = stable_partition(idx, |&i| x[[i, feature]] <= threshold);
    let (l, r) = idx.split_at_mut(split);
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow(x, y, l, classes, depth + 1, cfg, rng)),
        right: Box::new(grow(x, y, r, classes, depth + 1, cfg, rng)),
    }
}

/// Stable in-place partition; returns the number of elements satisfying `pred`.
fn stable_partition(v: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = v.iter().partition(|i| pred(i));
    let k = yes.len();
    for (dst, src) in v.iter_mut().zip(yes.into_iter().chain(no)) {
        *dst = src;
    }
    k
}

impl RandomForest {
    pub fn fit(x: &Array2<f64>, y: &[usize], cfg: &ForestConfig, exec: Exec) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(Error::param("forest needs one label per feature row"));
        }
        if cfg.trees == 0 {
            return Err(Error::config("forest needs at least one tree"));
        }
        let classes = y.iter().max().unwrap() + 1;
        if y.iter().all(|&l| l == y[0]) {
            return Err(Error::config("slide classifier training set has a single class"));
        }
        let n = y.len();
        let trees = exec.map_range(cfg.trees, |t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64 + 1);
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            grow(x, y, &mut idx, classes, 0, cfg, &mut rng)
        });
        Ok(RandomForest { classes, trees })
    }

    /// Class probabilities `(n, classes)`.
    pub fn predict_proba(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.classes));
        for (i, row) in x.rows().into_iter().enumerate() {
            for tree in &self.trees {
                let mut node = tree;
                let probs = loop {
                    match node {
                        Node::Leaf(p) => break p,
                        Node::Split { feature, threshold, left, right } => {
                            node = if row[*feature] <= *threshold { left } else { right };
                        }
                    }
                };
                for (k, p) in probs.iter().enumerate() {
                    out[[i, k]] += p / self.trees.len() as f64;
                }
            }
        }
        out
    }
}

/// Fits a forest on training slides and returns the positive-class score of
/// every test slide.
pub fn classify_slides(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    cfg: &ForestConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    let forest = RandomForest::fit(train_x, train_y, cfg, exec)?;
    let p = forest.predict_proba(test_x);
    Ok(if p.ncols() > 1 { p.column(1).to_vec() } else { vec![0.0; test_x.nrows()] })
}

/// `(AUC-ROC, average precision)` of slide scores.
pub fn evaluate_slides(scores: &[f64], labels: &[usize]) -> Result<(f64, f64)> {
    Ok((evalkit::auc_roc(scores, labels)?, evalkit::average_precision(scores, labels)?))
}

/// Rows of a feature matrix.
pub fn to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}
