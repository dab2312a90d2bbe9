//! The multi-task objective and the three training regimes: semi-supervised,
//! adversarial domain adaptation and the generative (real-vs-fake) regime.
//!
//! Every optimisation step minimises
//!
//! ```text
//! L = L_c + Σ_k α_k (L_k^labeled + L_k^unlabeled)
//! ```
//!
//! where `L_c` is the main cross-entropy on the labelled batch and each
//! pretext loss is a mean over its pool. The domain-prediction term is a
//! single mean over source ∪ target routed through the gradient-reversal
//! layer at the bottom of the domain head; the real-vs-fake term is the
//! discriminator loss on real and generated images.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Magnification, Manifest, ManifestEntry, Sample, SlideSet, Split};
use crate::error::{Error, Result};
use crate::evalkit::ScoreSet;
use crate::imageops::Image;
use crate::model::{
    self, EncoderConfig, GeneratorConfig, HeadConfig, ModelGraph, ModelSpec, DISCRIMINATOR_HEAD, DOMAIN_HEAD, MAIN_HEAD,
};
use crate::nn::loss::{binary_cross_entropy, cross_entropy, l1};
use crate::nn::optim::Adam;
use crate::nn::Tensor;
use crate::par::Exec;
use crate::pretext::{self, LossKind, PatchContext, PretextBatch, Target, TaskKind, TaskName, TaskSpec};
use crate::stainsep::StainMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Semi,
    Da,
}

/// Which probability the discriminator outputs.
///
/// `Printed` reads `D` as the probability that an input is generated, so
/// `L_dis = −E_real log(1 − D) − E_gen log D`; `Conventional` swaps the
/// targets so `D` is the probability of being real.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisConvention {
    #[default]
    Printed,
    Conventional,
}

/// How the gradient-reversal coefficient evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrlSchedule {
    /// `grl_lambda` throughout.
    #[default]
    Constant,
    /// `grl_lambda · (2 / (1 + exp(−10 p)) − 1)` with `p` the fraction of
    /// steps done: starts at 0 and saturates near `grl_lambda`.
    Ramp,
}

impl GrlSchedule {
    pub fn lambda(self, base: f64, progress: f64) -> f64 {
        match self {
            GrlSchedule::Constant => base,
            GrlSchedule::Ramp => base * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub tasks: Vec<TaskSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// Hidden width of the domain and discriminator heads.
    pub head_hidden: usize,
    /// Spatial grid kept by the jigmag head before its linear layer.
    pub jigmag_grid: usize,
    pub grl_lambda: f64,
    pub grl_schedule: GrlSchedule,
    pub dis_convention: DisConvention,
    pub noise_dim: usize,
    pub generator_width: usize,
    /// Stain vectors used for hematoxylin targets.
    pub stains: StainMatrix,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Semi,
            tasks: Vec::new(),
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            encoder: EncoderConfig::default(),
            head_hidden: 64,
            jigmag_grid: 2,
            grl_lambda: 1.0,
            grl_schedule: GrlSchedule::Constant,
            dis_convention: DisConvention::Printed,
            noise_dim: 100,
            generator_width: 64,
            stains: StainMatrix::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults of the generative regime: 500 epochs, batch 32, lr 3e-4.
    pub fn generative() -> Self {
        TrainConfig {
            tasks: vec![TaskSpec::new(TaskName::Generative)],
            epochs: 500,
            batch_size: 32,
            lr: 3e-4,
            ..Self::default()
        }
    }

    pub fn with_tasks(mut self, tasks: &[TaskName]) -> Self {
        self.tasks = tasks.iter().map(|&t| TaskSpec::new(t)).collect();
        self
    }

    pub fn task(&self, name: TaskName) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn is_generative(&self) -> bool {
        self.task(TaskName::Generative).is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        self.encoder.validate()?;
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !seen.insert(t.name) {
                return Err(Error::config(format!("task {} listed twice", t.name)));
            }
        }
        if self.task(TaskName::Domain).is_some() && self.mode != Mode::Da {
            return Err(Error::config("the domain task needs mode = \"da\""));
        }
        if self.task(TaskName::Jigmag).is_some() {
            let side = self.encoder.feature_side();
            if self.jigmag_grid == 0 || side % self.jigmag_grid != 0 {
                return Err(Error::config(format!(
                    "jigmag grid {} does not divide the {side}x{side} feature map",
                    self.jigmag_grid
                )));
            }
        }
        Ok(())
    }

    /// Main classifier plus one head per configured task.
    pub fn model_spec(&self, num_classes: usize) -> Result<ModelSpec> {
        let mut heads = vec![(MAIN_HEAD.to_string(), HeadConfig::classifier(num_classes))];
        let mut generator = None;
        for t in &self.tasks {
            let cfg = match t.name {
                TaskName::Jigmag => HeadConfig::grid_classifier(t.num_classes.unwrap(), self.jigmag_grid),
                TaskName::Domain => HeadConfig::domain(self.head_hidden, self.grl_lambda),
                TaskName::Generative => {
                    generator = Some(GeneratorConfig {
                        noise_dim: self.noise_dim,
                        output_size: self.encoder.input_size,
                        width: self.generator_width,
                    });
                    HeadConfig::discriminator(self.head_hidden)
                }
                _ => match t.kind {
                    TaskKind::Pixelwise => HeadConfig::decoder(t.target_channels.unwrap()),
                    _ => HeadConfig::classifier(t.num_classes.unwrap()),
                },
            };
            heads.push((head_name(t.name).to_string(), cfg));
        }
        Ok(ModelSpec { encoder: self.encoder, heads, generator })
    }
}

/// Name of the head that serves `task`.
pub fn head_name(task: TaskName) -> &'static str {
    match task {
        TaskName::Generative => DISCRIMINATOR_HEAD,
        TaskName::Domain => DOMAIN_HEAD,
        t => t.as_str(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: TaskName,
    pub weight: f64,
    pub labeled: Option<f64>,
    pub unlabeled: Option<f64>,
    /// Terms defined over both pools at once (domain, real-vs-fake).
    pub joint: Option<f64>,
}

impl TaskLoss {
    fn sum(&self) -> f64 {
        if let Some(j) = self.joint {
            return j;
        }
        self.labeled.unwrap_or(0.0) + self.unlabeled.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub main: f64,
    pub tasks: Vec<TaskLoss>,
    pub total: f64,
    /// Feature-matching loss of the generator step, when there is one.
    pub generator: Option<f64>,
}

impl LossReport {
    /// `L_c + Σ α_k (L_k^l + L_k^u)`, summed in the same order as the
    /// optimised scalar.
    pub fn recompose(&self) -> f64 {
        let mut total = self.main;
        for t in &self.tasks {
            if t.weight != 0.0 {
                total += t.weight * t.sum();
            }
        }
        total
    }
}

/// Inputs of one optimisation step.
#[derive(Debug, Clone, Default)]
pub struct StepBatch {
    pub labeled: Vec<Image>,
    pub labels: Vec<usize>,
    pub unlabeled: Vec<Image>,
    /// Transformed views per pretext task: (labelled pool, unlabelled pool).
    pub pretext: Vec<(PretextBatch, PretextBatch)>,
    /// Domain indices for the labelled and unlabelled images.
    pub domain_labels: Option<(Vec<usize>, Vec<usize>)>,
    /// Generated images `(n, 3, s, s)` for the real-vs-fake term.
    pub generated: Option<Tensor>,
}

impl StepBatch {
    /// Gathers pool entries `li`/`ui` and draws their pretext views from
    /// `rng` (no generated images).
    pub fn assemble(cfg: &TrainConfig, data: &TrainData, li: &[usize], ui: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(StepBatch {
            labeled: li.iter().map(|&i| data.labeled.images[i].clone()).collect(),
            labels: li.iter().map(|&i| data.labeled.label(i)).collect::<Result<Vec<_>>>()?,
            unlabeled: ui.iter().map(|&i| data.unlabeled.images[i].clone()).collect(),
            pretext: pretext_views(cfg, data, li, ui, rng)?,
            domain_labels: data.domain_ids.map(|(s, t)| (vec![s; li.len()], vec![t; ui.len()])),
            generated: None,
        })
    }
}

fn scaled(mut g: Tensor, w: f64) -> Tensor {
    if w != 1.0 {
        g.mapv_inplace(|v| v * w);
    }
    g
}

fn checked_ce(logits: &Tensor, labels: &[usize], what: &str) -> Result<(f64, Tensor)> {
    let k = logits.dim().1;
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::data(format!("{what} label {l} outside {k} classes")));
    }
    Ok(cross_entropy(logits, labels))
}

fn pretext_loss(logits: &Tensor, batch: &PretextBatch, spec: &TaskSpec) -> Result<(f64, Tensor)> {
    match spec.loss {
        LossKind::CrossEntropy => {
            let labels = batch
                .class_labels()
                .ok_or_else(|| Error::data(format!("task {} produced non-class targets", spec.name)))?;
            checked_ce(logits, &labels, spec.name.as_str())
        }
        LossKind::L1 => {
            let target = match batch.targets.first() {
                Some(Target::Map(_)) => {
                    let maps: Vec<Array2<f64>> = batch
                        .targets
                        .iter()
                        .map(|t| match t {
                            Target::Map(m) => Ok(m.clone()),
                            _ => Err(Error::data("mixed pixelwise targets")),
                        })
                        .collect::<Result<_>>()?;
                    model::maps_to_batch(&maps)
                }
                _ => {
                    let imgs: Vec<Image> = batch
                        .targets
                        .iter()
                        .map(|t| match t {
                            Target::Image(i) => Ok(i.clone()),
                            _ => Err(Error::data("mixed pixelwise targets")),
                        })
                        .collect::<Result<_>>()?;
                    model::to_batch(&imgs)
                }
            };
            if target.dim() != logits.dim() {
                return Err(Error::data(format!(
                    "task {} target {:?} does not match head output {:?}",
                    spec.name,
                    target.dim(),
                    logits.dim()
                )));
            }
            Ok(l1(logits, &target))
        }
        LossKind::Adversarial => Err(Error::config(format!("task {} is not a pretext loss", spec.name))),
    }
}

/// Forward pass of the whole objective; with `backward` the gradients of
/// every term (already scaled by its weight) are accumulated into the model.
fn objective(
    model: &mut ModelGraph,
    batch: &StepBatch,
    tasks: &[TaskSpec],
    convention: DisConvention,
    backward: bool,
    exec: Exec,
) -> Result<LossReport> {
    if batch.labeled.is_empty() || batch.labeled.len() != batch.labels.len() {
        return Err(Error::config("a step needs a nonempty labelled batch with one label per image"));
    }
    let xl = model::to_batch(&batch.labeled);
    let (fl, enc_trace) = model.encode(&xl, exec)?;
    let (logits, head_trace) = model.head_forward(MAIN_HEAD, &fl, exec)?;
    let (main, g) = checked_ce(&logits, &batch.labels, "class")?;
    let mut dfl = if backward { Some(model.head_backward(MAIN_HEAD, &head_trace, &g, exec)?) } else { None };
    let mut report = LossReport { step: 0, main, tasks: Vec::new(), total: main, generator: None };

    for spec in tasks {
        let w = spec.weight;
        let mut entry = TaskLoss { task: spec.name, weight: w, labeled: None, unlabeled: None, joint: None };
        if w == 0.0 {
            report.tasks.push(entry);
            continue;
        }
        match spec.name {
            TaskName::Domain => {
                let (dl, du) = batch
                    .domain_labels
                    .as_ref()
                    .ok_or_else(|| Error::config("domain task needs domain labels in the batch"))?;
                let (nl, nu) = (dl.len(), du.len());
                if nl != batch.labeled.len() || nu != batch.unlabeled.len() {
                    return Err(Error::data("one domain label per image is required"));
                }
                let n = (nl + nu) as f64;
                let (lg, tr) = model.head_forward(DOMAIN_HEAD, &fl, exec)?;
                let (ce_l, g_l) = checked_ce(&lg, dl, "domain")?;
                if let Some(acc) = dfl.as_mut() {
                    *acc += &model.head_backward(DOMAIN_HEAD, &tr, &scaled(g_l, w * nl as f64 / n), exec)?;
                }
                let mut joint = nl as f64 * ce_l;
                if nu > 0 {
                    let xu = model::to_batch(&batch.unlabeled);
                    let (fu, etr) = model.encode(&xu, exec)?;
                    let (lg, tr) = model.head_forward(DOMAIN_HEAD, &fu, exec)?;
                    let (ce_u, g_u) = checked_ce(&lg, du, "domain")?;
                    if backward {
                        let d = model.head_backward(DOMAIN_HEAD, &tr, &scaled(g_u, w * nu as f64 / n), exec)?;
                        model.encoder_backward(&etr, &d, exec);
                    }
                    joint += nu as f64 * ce_u;
                }
                entry.joint = Some(joint / n);
            }
            TaskName::Generative => {
                let fake = batch
                    .generated
                    .as_ref()
                    .ok_or_else(|| Error::config("generative task needs generated images in the batch"))?;
                let real = if batch.unlabeled.is_empty() { &batch.labeled } else { &batch.unlabeled };
                let (t_real, t_fake) = match convention {
                    DisConvention::Printed => (0.0, 1.0),
                    DisConvention::Conventional => (1.0, 0.0),
                };
                let mut joint = 0.0;
                for (x, t) in [(model::to_batch(real), t_real), (fake.clone(), t_fake)] {
                    let (f, etr) = model.encode(&x, exec)?;
                    let (lg, tr) = model.head_forward(DISCRIMINATOR_HEAD, &f, exec)?;
                    let (l, g) = binary_cross_entropy(&lg, &vec![t; x.dim().0]);
                    if backward {
                        let d = model.head_backward(DISCRIMINATOR_HEAD, &tr, &scaled(g, w), exec)?;
                        model.encoder_backward(&etr, &d, exec);
                    }
                    joint += l;
                }
                entry.joint = Some(joint);
            }
            _ => {
                let (pl, pu) = batch
                    .pretext
                    .iter()
                    .find(|(p, _)| p.task == spec.name)
                    .ok_or_else(|| Error::config(format!("no pretext views for task {}", spec.name)))?;
                let head = head_name(spec.name);
                for (pool, use_pool, slot) in [(pl, spec.uses_labeled, 0), (pu, spec.uses_unlabeled, 1)] {
                    if !use_pool || pool.is_empty() {
                        continue;
                    }
                    let x = model::to_batch(&pool.inputs);
                    let (f, etr) = model.encode(&x, exec)?;
                    let (out, tr) = model.head_forward(head, &f, exec)?;
                    let (l, g) = pretext_loss(&out, pool, spec)?;
                    if backward {
                        let d = model.head_backward(head, &tr, &scaled(g, w), exec)?;
                        model.encoder_backward(&etr, &d, exec);
                    }
                    if slot == 0 {
                        entry.labeled = Some(l)
                    } else {
                        entry.unlabeled = Some(l)
                    }
                }
            }
        }
        report.total += w * entry.sum();
        report.tasks.push(entry);
    }
    if let Some(d) = dfl {
        model.encoder_backward(&enc_trace, &d, exec);
    }
    Ok(report)
}

/// Evaluates the objective without touching the model.
pub fn multitask_loss(batch: &StepBatch, tasks: &[TaskSpec], model: &ModelGraph, exec: Exec) -> Result<LossReport> {
    let mut scratch = model.clone();
    objective(&mut scratch, batch, tasks, DisConvention::Printed, false, exec)
}

/// Evaluates the objective and accumulates its gradient into `model`
/// (gradients are not zeroed first).
pub fn multitask_backward(
    batch: &StepBatch,
    tasks: &[TaskSpec],
    model: &mut ModelGraph,
    convention: DisConvention,
    exec: Exec,
) -> Result<LossReport> {
    objective(model, batch, tasks, convention, true, exec)
}

/// `‖mean_b |f_real| − mean_b |f_gen|‖₁` over flattened features, and its
/// gradient with respect to the generated features.
pub fn feature_matching(real: &Tensor, generated: &Tensor) -> (f64, Tensor) {
    let feat_len = |t: &Tensor| t.len() / t.dim().0.max(1);
    assert_eq!(feat_len(real), feat_len(generated), "feature shapes differ");
    let d = feat_len(real);
    let mean_abs = |t: &Tensor| {
        let n = t.dim().0 as f64;
        let flat = t.as_standard_layout();
        let s = flat.as_slice().unwrap();
        let mut m = vec![0.0; d];
        for row in s.chunks(d) {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v.abs();
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    };
    let (mr, mg) = (mean_abs(real), mean_abs(generated));
    let loss = mr.iter().zip(&mg).map(|(a, b)| (a - b).abs()).sum();
    let ng = generated.dim().0 as f64;
    let mut grad = Tensor::zeros(generated.raw_dim());
    let gen = generated.as_standard_layout();
    for ((g, &f), j) in grad.iter_mut().zip(gen.iter()).zip((0..d).cycle()) {
        *g = -(mr[j] - mg[j]).signum() * if f == 0.0 { 0.0 } else { f.signum() } / ng;
        if mr[j] == mg[j] {
            *g = 0.0;
        }
    }
    (loss, grad)
}

/// Discriminator loss on given probabilities-of-fake, for reference:
/// `−mean log(1 − D_real) − mean log D_gen`.
pub fn discriminator_loss(d_real: &[f64], d_gen: &[f64]) -> f64 {
    let m = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&d| f(d)).sum::<f64>() / v.len() as f64;
    -m(d_real, &|d| (1.0 - d).ln()) - m(d_gen, &|d| d.ln())
}

/// Which extra views a pool must precompute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Needs {
    pub magnification: bool,
    pub jigmag: bool,
}

impl Needs {
    pub fn of(tasks: &[TaskSpec]) -> Self {
        let on = |n| tasks.iter().any(|t| t.name == n && t.weight != 0.0);
        Needs { magnification: on(TaskName::Magnification), jigmag: on(TaskName::Jigmag) }
    }
}

/// Patches of one pool with whatever multi-magnification views the tasks
/// need, extracted once up front.
#[derive(Debug, Clone, Default)]
pub struct Pool {
    pub images: Vec<Image>,
    pub labels: Vec<Option<usize>>,
    pub domains: Vec<String>,
    levels: Vec<Vec<Sample>>,
    tiles: Vec<Vec<Sample>>,
}

impl Pool {
    pub fn build(slides: &SlideSet, entries: &[ManifestEntry], size: usize, needs: Needs, exec: Exec) -> Result<Self> {
        let views = exec.map(entries, |e| -> Result<_> {
            let image = slides.sample(e, size)?.image;
            let levels = if needs.magnification {
                Magnification::ALL.iter().map(|&m| slides.sample_at(e, size, m)).collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let tiles = if needs.jigmag { slides.pyramid(e, size / 2)? } else { Vec::new() };
            Ok((image, levels, tiles))
        });
        let mut pool = Pool::default();
        for (e, v) in entries.iter().zip(views) {
            let (image, levels, tiles) = v?;
            pool.images.push(image);
            pool.labels.push(e.label);
            pool.domains.push(e.domain.clone());
            if needs.magnification {
                pool.levels.push(levels);
            }
            if needs.jigmag {
                pool.tiles.push(tiles);
            }
        }
        Ok(pool)
    }

    /// A pool without slide access (only single-view tasks work).
    pub fn from_images(images: Vec<Image>, labels: Vec<Option<usize>>) -> Self {
        let domains = vec![String::new(); images.len()];
        Pool { images, labels, domains, levels: Vec::new(), tiles: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn label(&self, i: usize) -> Result<usize> {
        self.labels[i].ok_or_else(|| Error::data("labelled pool contains an unlabelled entry"))
    }

    /// `g(x_i, r)` with a fresh uniform `r`.
    pub fn transform(&self, task: TaskName, i: usize, stains: &StainMatrix, rng: &mut ChaCha8Rng) -> Result<(Image, Target)> {
        use rand::Rng;
        match task {
            TaskName::Magnification => {
                let levels = self.levels.get(i).ok_or_else(|| Error::config("magnification views were not prepared"))?;
                let s = &levels[rng.random_range(0..levels.len())];
                Ok((s.image.clone(), Target::Class(pretext::magnification_label(s.magnification))))
            }
            TaskName::Jigmag => {
                let tiles = self.tiles.get(i).ok_or_else(|| Error::config("jigmag views were not prepared"))?;
                let (img, label) = pretext::jigmag(tiles, rng.random_range(0..pretext::CODEBOOK.len()))?;
                Ok((img, Target::Class(label)))
            }
            t => {
                let ctx = PatchContext { image: &self.images[i], entry: None, slides: None, stains };
                pretext::apply(t, &ctx, rng)
            }
        }
    }
}

/// The pools of one run.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub num_classes: usize,
    pub labeled: Pool,
    pub unlabeled: Pool,
    /// Model selection.
    pub val: Pool,
    pub test: Pool,
    /// Extra pools whose AUC is logged every epoch.
    pub monitors: Vec<(String, Pool)>,
    /// Domain index of the labelled and unlabelled pool (domain task).
    pub domain_ids: Option<(usize, usize)>,
}

fn strip_labels(entries: Vec<ManifestEntry>) -> Vec<ManifestEntry> {
    entries.into_iter().map(|e| ManifestEntry { label: None, ..e }).collect()
}

fn collect(m: &Manifest, split: Split, labeled: Option<bool>) -> Vec<ManifestEntry> {
    m.split(split).filter(|e| labeled.is_none_or(|l| e.label.is_some() == l)).cloned().collect()
}

impl TrainData {
    /// Labelled and unlabelled training pools from one domain.
    pub fn semi(cfg: &TrainConfig, slides: &SlideSet, manifest: &Manifest, exec: Exec) -> Result<Self> {
        if manifest.domains().len() > 1 {
            return Err(Error::config("semi-supervised mode expects a single domain"));
        }
        let size = cfg.encoder.input_size;
        let needs = Needs::of(&cfg.tasks);
        let build = |e: Vec<ManifestEntry>, n: Needs| Pool::build(slides, &e, size, n, exec);
        Ok(TrainData {
            num_classes: manifest.num_classes,
            labeled: build(collect(manifest, Split::Train, Some(true)), needs)?,
            unlabeled: build(collect(manifest, Split::Train, Some(false)), needs)?,
            val: build(collect(manifest, Split::Val, None), Needs::default())?,
            test: build(collect(manifest, Split::Test, None), Needs::default())?,
            monitors: Vec::new(),
            domain_ids: None,
        })
    }

    /// Labelled source training pool, unlabelled target pool (its labels
    /// are dropped), source validation for model selection and the target
    /// test split for evaluation.
    pub fn da(cfg: &TrainConfig, slides: &SlideSet, source: &Manifest, target: &Manifest, exec: Exec) -> Result<Self> {
        let (sd, td) = (source.domains(), target.domains());
        if let Some(d) = sd.iter().find(|d| td.contains(d)) {
            return Err(Error::config(format!("domain {d:?} appears in both source and target")));
        }
        if source.num_classes != target.num_classes {
            return Err(Error::config("source and target disagree on the class count"));
        }
        let size = cfg.encoder.input_size;
        let needs = Needs::of(&cfg.tasks);
        let build = |e: Vec<ManifestEntry>, n: Needs| Pool::build(slides, &e, size, n, exec);
        Ok(TrainData {
            num_classes: source.num_classes,
            labeled: build(collect(source, Split::Train, Some(true)), needs)?,
            unlabeled: build(strip_labels(collect(target, Split::Train, None)), needs)?,
            val: build(collect(source, Split::Val, None), Needs::default())?,
            test: build(collect(target, Split::Test, None), Needs::default())?,
            monitors: vec![("target_val".into(), build(collect(target, Split::Val, None), Needs::default())?)],
            domain_ids: Some((0, 1)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation AUC (the final model when no
    /// validation AUC could be computed).
    pub model: ModelGraph,
    pub history: Vec<MetricRecord>,
    pub losses: Vec<LossReport>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn history_jsonl(&self) -> String {
        self.history.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
    }
}

/// Main-head AUC (macro for more than two classes) over a pool.
pub fn evaluate(model: &ModelGraph, pool: &Pool, num_classes: usize, exec: Exec) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::UndefinedMetric("empty evaluation pool".into()));
    }
    let labels: Vec<usize> = pool
        .labels
        .iter()
        .map(|l| l.ok_or_else(|| Error::data("evaluation pool has unlabelled entries")))
        .collect::<Result<_>>()?;
    let mut scores = Array2::zeros((pool.len(), num_classes));
    for (c, chunk) in pool.images.chunks(128).enumerate() {
        let p = model.predict_proba(MAIN_HEAD, &model::to_batch(chunk), exec)?;
        scores.slice_mut(ndarray::s![c * 128..c * 128 + chunk.len(), ..]).assign(&p);
    }
    ScoreSet::new(scores, labels, num_classes)?.auc()
}

/// Cycles through the labelled pool in reshuffled passes.
struct LabeledCycle {
    order: Vec<usize>,
    pos: usize,
}

impl LabeledCycle {
    fn new(n: usize) -> Self {
        LabeledCycle { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn pretext_views(
    cfg: &TrainConfig,
    data: &TrainData,
    li: &[usize],
    ui: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(PretextBatch, PretextBatch)>> {
    let mut out = Vec::new();
    for spec in cfg.tasks.iter().filter(|t| t.weight != 0.0 && t.name.is_transform()) {
        let mut pair = (PretextBatch::new(spec.name), PretextBatch::new(spec.name));
        for (pool, idx, dst, on) in [
            (&data.labeled, li, &mut pair.0, spec.uses_labeled),
            (&data.unlabeled, ui, &mut pair.1, spec.uses_unlabeled),
        ] {
            if !on {
                continue;
            }
            for &i in idx {
                let (x, t) = pool.transform(spec.name, i, &cfg.stains, rng)?;
                dst.push(x, t);
            }
        }
        out.push(pair);
    }
    Ok(out)
}

fn check_finite(report: &LossReport, step: usize) -> Result<()> {
    let mut bad = Vec::new();
    if !report.main.is_finite() {
        bad.push(format!("main={}", report.main));
    }
    for t in &report.tasks {
        for v in [t.labeled, t.unlabeled, t.joint].into_iter().flatten() {
            if !v.is_finite() {
                bad.push(format!("{}={v}", t.task));
            }
        }
    }
    if let Some(g) = report.generator.filter(|g| !g.is_finite()) {
        bad.push(format!("generator={g}"));
    }
    if !report.total.is_finite() {
        bad.push(format!("total={}", report.total));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, detail: bad.join(", ") })
    }
}

/// One generator update on the feature-matching loss; encoder gradients
/// picked up on the way are discarded.
fn generator_step(
    model: &mut ModelGraph,
    real: &[Image],
    n: usize,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
    exec: Exec,
) -> Result<f64> {
    let dim = model.generator_config.map(|g| g.noise_dim).ok_or_else(|| Error::config("model has no generator"))?;
    model.zero_grad();
    let z = model::sample_noise(n, dim, rng).into_shape_with_order((n, dim, 1, 1)).unwrap();
    let (xg, gtrace) = model.generator.as_ref().unwrap().forward(&z, exec)?;
    let fr = model.forward_shared(&model::to_batch(real), exec)?;
    let (fg, etrace) = model.encode(&xg, exec)?;
    let (loss, dfg) = feature_matching(&fr, &fg);
    let dx = model.encoder_backward(&etrace, &dfg, exec);
    model.generator.as_mut().unwrap().backward(&gtrace, &dx, exec);
    adam.begin_step();
    for p in model.generator_params_mut() {
        adam.update(p);
    }
    model.zero_grad();
    Ok(loss)
}

/// Runs the configured regime on prepared pools.
pub fn train(cfg: &TrainConfig, data: &TrainData, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::config("the labelled pool is empty"));
    }
    if cfg.task(TaskName::Domain).is_some() && data.domain_ids.is_none() {
        return Err(Error::config("the domain task needs source and target pools"));
    }
    let mut model = ModelGraph::new(&cfg.model_spec(data.num_classes)?, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.lr);
    let mut gen_adam = Adam::new(cfg.lr);
    let generative = cfg.task(TaskName::Generative).is_some_and(|t| t.weight != 0.0);

    let mut cycle = LabeledCycle::new(data.labeled.len());
    let mut history = Vec::new();
    let mut losses = Vec::new();
    let mut best: Option<(f64, usize, ModelGraph)> = None;
    let mut step = 0;
    let b = cfg.batch_size;
    let steps_per_epoch = data.unlabeled.len().max(if data.unlabeled.is_empty() { data.labeled.len() } else { 0 }).div_ceil(b);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    for epoch in 0..cfg.epochs {
        // one epoch = one pass over the unlabelled pool, or over the
        // labelled pool when there is nothing unlabelled
        let plan: Vec<(Vec<usize>, Vec<usize>)> = if data.unlabeled.is_empty() {
            let mut order: Vec<usize> = (0..data.labeled.len()).collect();
            order.shuffle(&mut rng);
            order.chunks(b).map(|c| (c.to_vec(), Vec::new())).collect()
        } else {
            let mut order: Vec<usize> = (0..data.unlabeled.len()).collect();
            order.shuffle(&mut rng);
            let k = b.min(data.labeled.len());
            order.chunks(b).map(|c| (cycle.next(k, &mut rng), c.to_vec())).collect()
        };
        let mut epoch_total = 0.0;
        let steps_in_epoch = plan.len();
        for (li, ui) in plan {
            let mut batch = StepBatch::assemble(cfg, data, &li, &ui, &mut rng)?;
            if generative {
                let n = if batch.unlabeled.is_empty() { batch.labeled.len() } else { batch.unlabeled.len() };
                let z = model::sample_noise(n, cfg.noise_dim, &mut rng);
                batch.generated = Some(model.generate(&z, exec)?);
            }

            if cfg.grl_schedule != GrlSchedule::Constant {
                model.set_grl_lambda(cfg.grl_schedule.lambda(cfg.grl_lambda, step as f64 / total_steps as f64));
            }
            model.zero_grad();
            let mut report = objective(&mut model, &batch, &cfg.tasks, cfg.dis_convention, true, exec)?;
            report.step = step;
            check_finite(&report, step)?;
            adam.begin_step();
            for p in model.discriminative_params_mut() {
                adam.update(p);
            }
            if generative {
                let real = if batch.unlabeled.is_empty() { &batch.labeled } else { &batch.unlabeled };
                let g = generator_step(&mut model, real, real.len(), &mut gen_adam, &mut rng, exec)?;
                report.generator = Some(g);
                check_finite(&report, step)?;
                let dis = report.tasks.iter().find(|t| t.task == TaskName::Generative).and_then(|t| t.joint);
                for (metric, v) in [("l_dis", dis), ("l_gen", Some(g))] {
                    if let Some(value) = v {
                        history.push(MetricRecord { step, epoch, split: "train".into(), metric: metric.into(), value });
                    }
                }
            }
            epoch_total += report.total;
            losses.push(report);
            step += 1;
        }
        history.push(MetricRecord {
            step,
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: epoch_total / steps_in_epoch as f64,
        });
        for (name, pool) in std::iter::once(("val", &data.val)).chain(data.monitors.iter().map(|(n, p)| (n.as_str(), p))) {
            match evaluate(&model, pool, data.num_classes, exec) {
                Ok(auc) => {
                    history.push(MetricRecord { step, epoch, split: name.into(), metric: "auc".into(), value: auc });
                    if name == "val" && best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                        best = Some((auc, epoch, model.clone()));
                    }
                }
                Err(Error::UndefinedMetric(_)) => {}
                Err(e) => return Err(e),
            }
        }
        log::debug!("epoch {epoch}: mean loss {:.5}", epoch_total / steps_in_epoch as f64);
    }
    let (best_val_auc, best_epoch, model) = match best {
        Some((auc, e, m)) => (Some(auc), e, m),
        None => (None, cfg.epochs - 1, model),
    };
    let test_auc = match evaluate(&model, &data.test, data.num_classes, exec) {
        Ok(a) => {
            history.push(MetricRecord { step, epoch: best_epoch, split: "test".into(), metric: "auc".into(), value: a });
            Some(a)
        }
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(TrainOutcome { model, history, losses, best_epoch, best_val_auc, test_auc, steps: step })
}

/// Semi-supervised training on one manifest.
pub fn train_semi(cfg: &TrainConfig, slides: &SlideSet, manifest: &Manifest, exec: Exec) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Semi {
        return Err(Error::config("train_semi needs mode = \"semi\""));
    }
    cfg.validate()?;
    train(cfg, &TrainData::semi(cfg, slides, manifest, exec)?, exec)
}

/// Domain adaptation from a labelled source to an unlabelled target.
pub fn train_da(
    cfg: &TrainConfig,
    slides: &SlideSet,
    source: &Manifest,
    target: &Manifest,
    exec: Exec,
) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Da {
        return Err(Error::config("train_da needs mode = \"da\""));
    }
    cfg.validate()?;
    train(cfg, &TrainData::da(cfg, slides, source, target, exec)?, exec)
}

/// Real-vs-fake regime: alternating discriminator/encoder and generator
/// steps (1:1).
pub fn train_generative(cfg: &TrainConfig, slides: &SlideSet, manifest: &Manifest, exec: Exec) -> Result<TrainOutcome> {
    if !cfg.is_generative() {
        return Err(Error::config("train_generative needs the generative task"));
    }
    if cfg.encoder.architecture != model::Architecture::SmallConv {
        return Err(Error::config("the generative regime expects the small-conv encoder"));
    }
    train_semi(cfg, slides, manifest, exec)
}
