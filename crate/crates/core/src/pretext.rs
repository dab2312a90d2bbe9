//! Pretext transformations `g(x, r)` and the task registry.
//!
//! Each classification task emits a transformed image and its label `r`;
//! pixelwise tasks emit a target map. Transformations are pure functions of
//! their inputs; randomness only enters through the caller's choice of `r`.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Magnification, ManifestEntry, Sample, SlideSet};
use crate::error::{Error, Result};
use crate::imageops::{self, Image};
use crate::stainsep::{self, StainMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Rotation,
    Flipping,
    Autoencoder,
    Generative,
    Domain,
    Magnification,
    Jigmag,
    Hematoxylin,
}

impl TaskName {
    pub const ALL: [TaskName; 8] = [
        TaskName::Rotation,
        TaskName::Flipping,
        TaskName::Autoencoder,
        TaskName::Generative,
        TaskName::Domain,
        TaskName::Magnification,
        TaskName::Jigmag,
        TaskName::Hematoxylin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Rotation => "rotation",
            TaskName::Flipping => "flipping",
            TaskName::Autoencoder => "autoencoder",
            TaskName::Generative => "generative",
            TaskName::Domain => "domain",
            TaskName::Magnification => "magnification",
            TaskName::Jigmag => "jigmag",
            TaskName::Hematoxylin => "hematoxylin",
        }
    }

    /// Whether the task is an image transformation `g(x, r)` applied to the
    /// labelled and unlabelled pools (as opposed to the adversarial tasks
    /// the trainer drives itself).
    pub fn is_transform(self) -> bool {
        !matches!(self, TaskName::Generative | TaskName::Domain)
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Pixelwise,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    L1,
    Adversarial,
}

/// A pretext task as the trainer sees it.
///
/// In config files a task is written as its registry name plus optional
/// overrides (`{ name = "jigmag", weight = 0.5 }`); kind, label space and
/// loss always come from the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TaskEntry", into = "TaskEntry")]
pub struct TaskSpec {
    pub name: TaskName,
    pub kind: TaskKind,
    /// Label-space size for classification tasks.
    pub num_classes: Option<usize>,
    /// Output channels for pixelwise tasks.
    pub target_channels: Option<usize>,
    pub loss: LossKind,
    pub weight: f64,
    pub uses_labeled: bool,
    pub uses_unlabeled: bool,
}

impl TaskSpec {
    /// Registry entry with weight 1.
    pub fn new(name: TaskName) -> Self {
        let (kind, num_classes, target_channels, loss) = match name {
            TaskName::Rotation => (TaskKind::Classification, Some(4), None, LossKind::CrossEntropy),
            TaskName::Flipping => (TaskKind::Classification, Some(2), None, LossKind::CrossEntropy),
            TaskName::Magnification => (TaskKind::Classification, Some(4), None, LossKind::CrossEntropy),
            TaskName::Jigmag => (TaskKind::Classification, Some(CODEBOOK.len()), None, LossKind::CrossEntropy),
            TaskName::Domain => (TaskKind::Classification, Some(2), None, LossKind::CrossEntropy),
            TaskName::Autoencoder => (TaskKind::Pixelwise, None, Some(3), LossKind::L1),
            TaskName::Hematoxylin => (TaskKind::Pixelwise, None, Some(1), LossKind::L1),
            TaskName::Generative => (TaskKind::Adversarial, None, None, LossKind::Adversarial),
        };
        TaskSpec { name, kind, num_classes, target_channels, loss, weight: 1.0, uses_labeled: true, uses_unlabeled: true }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(Error::config(format!("task {} weight must be finite and nonnegative", self.name)));
        }
        if self.kind == TaskKind::Classification && self.num_classes.is_none_or(|k| k < 2) {
            return Err(Error::config(format!("classification task {} needs at least 2 classes", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    name: TaskName,
    #[serde(default = "unit_weight")]
    weight: f64,
    #[serde(default = "yes")]
    uses_labeled: bool,
    #[serde(default = "yes")]
    uses_unlabeled: bool,
}

fn unit_weight() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl From<TaskEntry> for TaskSpec {
    fn from(e: TaskEntry) -> Self {
        TaskSpec { uses_labeled: e.uses_labeled, uses_unlabeled: e.uses_unlabeled, ..TaskSpec::new(e.name).with_weight(e.weight) }
    }
}

impl From<TaskSpec> for TaskEntry {
    fn from(t: TaskSpec) -> Self {
        TaskEntry { name: t.name, weight: t.weight, uses_labeled: t.uses_labeled, uses_unlabeled: t.uses_unlabeled }
    }
}

/// Target emitted alongside a transformed image.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Map(Array2<f64>),
    Image(Image),
}

/// Transformed inputs with their targets for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextBatch {
    pub task: TaskName,
    pub inputs: Vec<Image>,
    pub targets: Vec<Target>,
}

impl PretextBatch {
    pub fn new(task: TaskName) -> Self {
        PretextBatch { task, inputs: Vec::new(), targets: Vec::new() }
    }

    pub fn push(&mut self, input: Image, target: Target) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn class_labels(&self) -> Option<Vec<usize>> {
        self.targets
            .iter()
            .map(|t| match t {
                Target::Class(c) => Some(*c),
                _ => None,
            })
            .collect()
    }
}

/// Rotates counter-clockwise by `r * 90` degrees; label `r`.
pub fn rotate(image: &Image, r: usize) -> Result<(Image, usize)> {
    let (h, w, _) = image.dim();
    if h != w {
        return Err(Error::param(format!("rotation needs a square image, got {h}x{w}")));
    }
    if r >= 4 {
        return Err(Error::param(format!("rotation label {r} outside 0..4")));
    }
    Ok((imageops::rotate_ccw(image, r), r))
}

/// `r = 1` mirrors columns, `r = 0` is the identity.
pub fn flip(image: &Image, r: usize) -> Result<(Image, usize)> {
    match r {
        0 => Ok((image.clone(), 0)),
        1 => Ok((imageops::flip_horizontal(image), 1)),
        _ => Err(Error::param(format!("flip label {r} outside 0..2"))),
    }
}

/// Label of a magnification under the fixed ordering 40x, 20x, 10x, 5x.
pub fn magnification_label(mag: Magnification) -> usize {
    match mag {
        Magnification::X40 => 0,
        Magnification::X20 => 1,
        Magnification::X10 => 2,
        Magnification::X5 => 3,
    }
}

pub fn magnification_task(samples: &[Sample]) -> PretextBatch {
    let mut batch = PretextBatch::new(TaskName::Magnification);
    for s in samples {
        batch.push(s.image.clone(), Target::Class(magnification_label(s.magnification)));
    }
    batch
}

/// Parses a magnification tag and returns its label; unknown tags are a
/// parameter error.
pub fn magnification_label_for_tag(tag: &str) -> Result<usize> {
    Ok(magnification_label(tag.parse()?))
}

/// Jigmag tile rank: 5x, 10x, 20x, 40x map to 0, 1, 2, 3.
pub fn jigmag_rank(mag: Magnification) -> usize {
    3 - magnification_label(mag)
}

/// The 12 arrangements of magnification ranks over the 2x2 grid (positions
/// top-left, top-right, bottom-left, bottom-right).
///
/// Chosen as the lexicographically first 12-subset of the 24 permutations
/// that maximises the minimum pairwise Hamming distance (3); it happens to
/// be the alternating group on four symbols.
pub const CODEBOOK: [[usize; 4]; 12] = [
    [0, 1, 2, 3],
    [0, 2, 3, 1],
    [0, 3, 1, 2],
    [1, 0, 3, 2],
    [1, 2, 0, 3],
    [1, 3, 2, 0],
    [2, 0, 1, 3],
    [2, 1, 3, 0],
    [2, 3, 0, 1],
    [3, 0, 2, 1],
    [3, 1, 0, 2],
    [3, 2, 1, 0],
];

/// Stable fingerprint of the codebook contents.
pub fn codebook_hash() -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in CODEBOOK {
        h.update(v.map(|x| x as u8));
    }
    hex::encode(h.finalize())
}

fn grid_offset(position: usize, tile: usize) -> (usize, usize) {
    ((position / 2) * tile, (position % 2) * tile)
}

/// Assembles four same-centre tiles into a 2x2 puzzle. `tiles_by_rank[k]`
/// holds the tile of rank `k` (5x first); grid position `p` receives the
/// tile of rank `CODEBOOK[perm][p]`.
pub fn assemble(tiles_by_rank: &[Image; 4], perm: usize) -> Result<Image> {
    let v = CODEBOOK.get(perm).ok_or_else(|| Error::param(format!("jigmag index {perm} outside 0..12")))?;
    let (t, tw, _) = tiles_by_rank[0].dim();
    if t != tw || tiles_by_rank.iter().any(|x| x.dim() != (t, t, 3)) {
        return Err(Error::param("jigmag tiles must be equal-sized squares"));
    }
    let mut out = Array3::zeros((2 * t, 2 * t, 3));
    for (pos, &rank) in v.iter().enumerate() {
        let (y, x) = grid_offset(pos, t);
        out.slice_mut(s![y..y + t, x..x + t, ..]).assign(&tiles_by_rank[rank]);
    }
    Ok(out)
}

/// Inverse of [`assemble`]: returns tiles indexed by rank.
pub fn disassemble(image: &Image, perm: usize) -> Result<[Image; 4]> {
    let v = CODEBOOK.get(perm).ok_or_else(|| Error::param(format!("jigmag index {perm} outside 0..12")))?;
    let (h, w, _) = image.dim();
    if h != w || h % 2 != 0 {
        return Err(Error::param("jigmag image must be an even square"));
    }
    let t = h / 2;
    let mut tiles: [Image; 4] = Default::default();
    for (pos, &rank) in v.iter().enumerate() {
        let (y, x) = grid_offset(pos, t);
        tiles[rank] = image.slice(s![y..y + t, x..x + t, ..]).to_owned();
    }
    Ok(tiles)
}

/// Builds the jigmag puzzle from one sample per magnification (any order)
/// and returns it with its label `perm`.
pub fn jigmag(samples: &[Sample], perm: usize) -> Result<(Image, usize)> {
    if samples.len() != 4 {
        return Err(Error::param(format!("jigmag needs 4 samples, got {}", samples.len())));
    }
    let mut slots: [Option<Image>; 4] = Default::default();
    for s in samples {
        slots[jigmag_rank(s.magnification)] = Some(s.image.clone());
    }
    let missing: Vec<&str> = (0..4)
        .filter(|&r| slots[r].is_none())
        .map(|r| Magnification::ALL[3 - r].tag())
        .collect();
    if !missing.is_empty() {
        return Err(Error::param(format!("jigmag missing magnification(s) {}", missing.join(", "))));
    }
    let tiles = slots.map(|t| t.unwrap());
    Ok((assemble(&tiles, perm)?, perm))
}

/// Reconstruction target: the input itself.
pub fn autoencoder_target(image: &Image) -> (Image, Image) {
    (image.clone(), image.clone())
}

pub fn hematoxylin_task(image: &Image, stains: &StainMatrix) -> (Image, Array2<f64>) {
    (image.clone(), stainsep::hematoxylin_target_with(image, stains))
}

/// Source of the extra views some tasks need: the patch itself plus access
/// to its slide for other magnifications.
pub struct PatchContext<'a> {
    pub image: &'a Image,
    pub entry: Option<&'a ManifestEntry>,
    pub slides: Option<&'a SlideSet>,
    pub stains: &'a StainMatrix,
}

/// Applies `g(x, r)` for one image with `r` drawn uniformly from the task's
/// label space.
pub fn apply<R: Rng>(task: TaskName, ctx: &PatchContext<'_>, rng: &mut R) -> Result<(Image, Target)> {
    let size = ctx.image.dim().0;
    let needs_slide = || -> Result<(&ManifestEntry, &SlideSet)> {
        match (ctx.entry, ctx.slides) {
            (Some(e), Some(s)) => Ok((e, s)),
            _ => Err(Error::config(format!("task {task} needs slide access for other magnifications"))),
        }
    };
    match task {
        TaskName::Rotation => {
            let (img, r) = rotate(ctx.image, rng.random_range(0..4))?;
            Ok((img, Target::Class(r)))
        }
        TaskName::Flipping => {
            let (img, r) = flip(ctx.image, rng.random_range(0..2))?;
            Ok((img, Target::Class(r)))
        }
        TaskName::Autoencoder => {
            let (img, t) = autoencoder_target(ctx.image);
            Ok((img, Target::Image(t)))
        }
        TaskName::Hematoxylin => {
            let (img, t) = hematoxylin_task(ctx.image, ctx.stains);
            Ok((img, Target::Map(t)))
        }
        TaskName::Magnification => {
            let (entry, slides) = needs_slide()?;
            let r = rng.random_range(0..4);
            let sample = slides.sample_at(entry, size, Magnification::ALL[r])?;
            Ok((sample.image, Target::Class(magnification_label(sample.magnification))))
        }
        TaskName::Jigmag => {
            let (entry, slides) = needs_slide()?;
            if size % 2 != 0 {
                return Err(Error::param("jigmag needs an even patch size"));
            }
            let perm = rng.random_range(0..CODEBOOK.len());
            let tiles = slides.pyramid(entry, size / 2)?;
            let (img, label) = jigmag(&tiles, perm)?;
            Ok((img, Target::Class(label)))
        }
        TaskName::Generative | TaskName::Domain => {
            Err(Error::config(format!("task {task} is not an image transformation")))
        }
    }
}
