//! Config-driven commands: every run is fully described by one TOML file
//! (plus an optional seed override) and writes its artifacts into a
//! directory named after the run's content hash, next to a `run.json`
//! provenance record.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{build_manifest, Manifest, ManifestSpec, SlideParams, SlideSet, Split};
use crate::error::{Error, Result};
use crate::evalkit::{self, BudgetResult};
use crate::imageops::{self, Image};
use crate::model::ModelGraph;
use crate::par::Exec;
use crate::pretext::{self, TaskName, TaskSpec};
use crate::stainsep;
use crate::trainer::{self, Mode, TrainConfig, TrainOutcome};
use crate::wsiheat::{self, ForestConfig, HeatmapConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Slides plus the manifest cut from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub slides: usize,
    pub first_seed: u64,
    pub slide: SlideParams,
    pub manifest: ManifestSpec,
    /// Also write every manifest entry as a PNG (datagen only).
    pub write_patches: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            slides: 4,
            first_seed: 1,
            slide: SlideParams::default(),
            manifest: ManifestSpec::default(),
            write_patches: false,
        }
    }
}

impl DataConfig {
    pub fn generate(&self, exec: Exec) -> Result<SlideSet> {
        if self.slides == 0 {
            return Err(Error::config("data.slides must be positive"));
        }
        SlideSet::generate(&self.slide, self.first_seed, self.slides, exec)
    }

    pub fn manifest(&self, slides: &SlideSet, budget: Option<f64>, seed: u64) -> Result<Manifest> {
        let spec = ManifestSpec { label_budget: budget.unwrap_or(self.manifest.label_budget), ..self.manifest.clone() };
        build_manifest(&slides.to_vec(), &spec, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub budgets: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Task sets to compare; empty means the single `[train]` task set.
    pub methods: Vec<MethodConfig>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { budgets: vec![0.01, 0.1, 1.0], seeds: vec![0, 1, 2], methods: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapRunConfig {
    /// Slides to score; even-indexed ones are tumor-free (label 0), the rest
    /// use `data.slide.tumor_fraction`. A slide's label is whether it holds
    /// any tumor pixel.
    pub slides: usize,
    pub first_seed: u64,
    /// Leading fraction of slides used to fit the slide classifier.
    pub train_fraction: f64,
    /// Patch classifier to use; trained from `[train]` when absent.
    pub checkpoint: Option<PathBuf>,
    pub window: HeatmapConfig,
    pub forest: ForestConfig,
    /// Longest side of the overlay images.
    pub overlay_size: usize,
}

impl Default for HeatmapRunConfig {
    fn default() -> Self {
        HeatmapRunConfig {
            slides: 8,
            first_seed: 1000,
            train_fraction: 0.5,
            checkpoint: None,
            window: HeatmapConfig::default(),
            forest: ForestConfig::default(),
            overlay_size: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreviewConfig {
    pub patches: usize,
    pub tasks: Vec<TaskName>,
}

impl Default for PreviewConfig {
    fn default() -> Self {
        PreviewConfig { patches: 3, tasks: TaskName::ALL.into_iter().filter(|t| t.is_transform()).collect() }
    }
}

/// A whole run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Overrides `train.seed` and seeds the labelled-subset draw.
    pub seed: Option<u64>,
    pub data: DataConfig,
    /// Unlabelled target domain (domain-adaptation runs).
    pub target: Option<DataConfig>,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub heatmap: HeatmapRunConfig,
    pub preview: PreviewConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: None,
            data: DataConfig::default(),
            target: None,
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            heatmap: HeatmapRunConfig::default(),
            preview: PreviewConfig::default(),
        }
    }
}

impl RunConfig {
    /// Strict parse: unknown keys and bad values are configuration errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::config(format!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Path { path: path.to_path_buf(), source })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies a command-line seed override.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if seed.is_some() {
            self.seed = seed;
        }
        self
    }

    /// The effective run seed.
    pub fn run_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.run_seed(), ..self.train.clone() }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
    }
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    /// Hash of command, resolved config and code version; names the run
    /// directory.
    pub run_id: String,
    pub seed: u64,
    pub code_hash: String,
    pub config: RunConfig,
    /// Artifact paths relative to the run directory.
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub elapsed_secs: f64,
}

const SOURCES: &[(&str, &str)] = &[
    ("datagen.rs", include_str!("datagen.rs")),
    ("error.rs", include_str!("error.rs")),
    ("evalkit.rs", include_str!("evalkit.rs")),
    ("imageops.rs", include_str!("imageops.rs")),
    ("lib.rs", include_str!("lib.rs")),
    ("model.rs", include_str!("model.rs")),
    ("nn/conv.rs", include_str!("nn/conv.rs")),
    ("nn/loss.rs", include_str!("nn/loss.rs")),
    ("nn/mod.rs", include_str!("nn/mod.rs")),
    ("nn/optim.rs", include_str!("nn/optim.rs")),
    ("par.rs", include_str!("par.rs")),
    ("pretext.rs", include_str!("pretext.rs")),
    ("run.rs", include_str!("run.rs")),
    ("stainsep.rs", include_str!("stainsep.rs")),
    ("trainer.rs", include_str!("trainer.rs")),
    ("wsiheat.rs", include_str!("wsiheat.rs")),
];

/// Git-style tree hash of the library sources compiled into this binary:
/// each file is hashed as `blob <len>\0<content>`, the tree as the sorted
/// `<name> <blob hash>` lines.
pub fn code_hash() -> String {
    let mut tree = Sha256::new();
    for (name, text) in SOURCES {
        let mut blob = Sha256::new();
        blob.update(format!("blob {}\0", text.len()));
        blob.update(text);
        tree.update(format!("{name} {}\n", hex::encode(blob.finalize())));
    }
    hex::encode(tree.finalize())
}

fn run_id(command: &str, cfg: &RunConfig, code: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(command);
    h.update([0]);
    h.update(serde_json::to_string(cfg)?);
    h.update([0]);
    h.update(code);
    Ok(hex::encode(h.finalize())[..16].to_string())
}

/// Collects the artifacts of one command inside its run directory.
struct RunDir {
    root: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.path(rel)?, contents)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn png(&mut self, rel: &str, img: &Image) -> Result<()> {
        imageops::save_png(img, &self.path(rel)?)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn record(&mut self, rel: &str) {
        self.outputs.push(rel.to_string());
    }
}

fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn execute<F>(command: &str, cfg: &RunConfig, out: &Path, body: F) -> Result<RunRecord>
where
    F: FnOnce(&mut RunDir) -> Result<()>,
{
    let code = code_hash();
    let id = run_id(command, cfg, &code)?;
    let root = out.join(format!("{command}-{id}"));
    std::fs::create_dir_all(&root)?;
    log::info!("{command}: writing to {}", root.display());
    let started = now_unix();
    let clock = Instant::now();
    let mut dir = RunDir { root: root.clone(), outputs: Vec::new() };
    dir.write("config.toml", cfg.to_toml()?)?;
    body(&mut dir)?;
    let record = RunRecord {
        command: command.to_string(),
        run_id: id,
        seed: cfg.run_seed(),
        code_hash: code,
        config: cfg.clone(),
        outputs: dir.outputs,
        started_unix: started,
        elapsed_secs: clock.elapsed().as_secs_f64(),
    };
    std::fs::write(root.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

/// Directory of a finished run.
pub fn run_dir(out: &Path, record: &RunRecord) -> PathBuf {
    out.join(format!("{}-{}", record.command, record.run_id))
}

fn save_manifest(dir: &mut RunDir, rel: &str, m: &Manifest) -> Result<()> {
    m.save(&dir.path(rel)?)?;
    dir.record(rel);
    Ok(())
}

#[derive(Serialize)]
struct SlideSummary<'a> {
    id: &'a str,
    seed: u64,
    domain: &'a str,
    width: usize,
    height: usize,
    class_areas: Vec<usize>,
}

/// Generates the slides and manifests (source and, if configured, target).
pub fn cmd_datagen(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<RunRecord> {
    execute("datagen", cfg, out, |dir| {
        let seed = cfg.run_seed();
        for (prefix, data) in std::iter::once(("source", &cfg.data)).chain(cfg.target.iter().map(|t| ("target", t))) {
            let slides = data.generate(exec)?;
            let manifest = data.manifest(&slides, None, seed)?;
            let mut summary = Vec::new();
            for s in slides.iter() {
                dir.png(&format!("{prefix}/slides/{}.png", s.id), &s.to_image())?;
                summary.push(SlideSummary {
                    id: &s.id,
                    seed: s.seed,
                    domain: s.domain(),
                    width: s.width(),
                    height: s.height(),
                    class_areas: s.class_areas(),
                });
            }
            dir.write(&format!("{prefix}/slides.json"), serde_json::to_string_pretty(&summary)?)?;
            save_manifest(dir, &format!("{prefix}/manifest.csv"), &manifest)?;
            if data.write_patches {
                let rel = format!("{prefix}/patches");
                let n = slides.write_patches(&manifest, data.manifest.patch_size, &dir.path(&rel)?)?;
                log::info!("{prefix}: wrote {n} patches");
                dir.record(&rel);
            }
            log::info!("{prefix}: {} slides, {} manifest entries", slides.len(), manifest.entries.len());
        }
        Ok(())
    })
}

/// Trains on freshly generated data according to `mode`.
pub fn train_from_config(cfg: &RunConfig, tcfg: &TrainConfig, budget: Option<f64>, exec: Exec) -> Result<TrainOutcome> {
    let seed = tcfg.seed;
    let mut slides = cfg.data.generate(exec)?;
    let manifest = cfg.data.manifest(&slides, budget, seed)?;
    match tcfg.mode {
        Mode::Semi if tcfg.is_generative() => trainer::train_generative(tcfg, &slides, &manifest, exec),
        Mode::Semi => trainer::train_semi(tcfg, &slides, &manifest, exec),
        Mode::Da => {
            let target = cfg.target.as_ref().ok_or_else(|| Error::config("mode = \"da\" needs a [target] section"))?;
            let tslides = target.generate(exec)?;
            let tmanifest = target.manifest(&tslides, Some(1.0), seed)?;
            slides.extend(tslides);
            trainer::train_da(tcfg, &slides, &manifest, &tmanifest, exec)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub final_loss: Option<f64>,
}

impl TrainSummary {
    pub fn of(seed: u64, o: &TrainOutcome) -> Self {
        TrainSummary {
            seed,
            steps: o.steps,
            best_epoch: o.best_epoch,
            best_val_auc: o.best_val_auc,
            test_auc: o.test_auc,
            final_loss: o.losses.last().map(|l| l.total),
        }
    }
}

fn write_training(dir: &mut RunDir, seed: u64, outcome: &TrainOutcome) -> Result<()> {
    outcome.model.save(&dir.path("model.ckpt")?)?;
    dir.record("model.ckpt");
    dir.write("metrics.jsonl", outcome.history_jsonl())?;
    dir.write("summary.json", serde_json::to_string_pretty(&TrainSummary::of(seed, outcome))?)?;
    Ok(())
}

/// Trains one model; writes the best checkpoint, the metric history and a
/// summary.
pub fn cmd_train(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<RunRecord> {
    execute("train", cfg, out, |dir| {
        let tcfg = cfg.train_config();
        let outcome = train_from_config(cfg, &tcfg, None, exec)?;
        log::info!("train: best epoch {}, val {:?}, test {:?}", outcome.best_epoch, outcome.best_val_auc, outcome.test_auc);
        write_training(dir, tcfg.seed, &outcome)
    })
}

fn method_label(tasks: &[TaskSpec]) -> String {
    if tasks.is_empty() {
        "supervised".into()
    } else {
        tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join("+")
    }
}

/// Budget × seed grid for each method; one row per method in the table.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<RunRecord> {
    execute("sweep", cfg, out, |dir| {
        let methods = if cfg.sweep.methods.is_empty() {
            vec![MethodConfig { name: method_label(&cfg.train.tasks), tasks: cfg.train.tasks.clone() }]
        } else {
            cfg.sweep.methods.clone()
        };
        let mut results: Vec<BudgetResult> = Vec::new();
        for m in &methods {
            let base = TrainConfig { tasks: m.tasks.clone(), ..cfg.train.clone() };
            base.validate()?;
            let rows = evalkit::budget_sweep(&m.name, &cfg.sweep.budgets, &cfg.sweep.seeds, exec, |budget, seed| {
                let tcfg = TrainConfig { seed, ..base.clone() };
                let o = train_from_config(cfg, &tcfg, Some(budget), exec)?;
                log::info!("sweep {} budget {budget} seed {seed}: test {:?}", m.name, o.test_auc);
                o.test_auc.ok_or_else(|| Error::UndefinedMetric("test split lacks a class".into()))
            })?;
            results.extend(rows);
        }
        dir.write("results.jsonl", evalkit::records_jsonl(&results))?;
        dir.write("table.txt", evalkit::render_table(&results))?;
        dir.write("auc_vs_budget.svg", evalkit::render_svg_plot(&results, "Test AUC vs annotation budget"))?;
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideSummaryScores {
    pub auc: Option<f64>,
    pub average_precision: Option<f64>,
    pub train_slides: usize,
    pub test_slides: usize,
}

/// Heat maps, morphology features and slide-level classification.
pub fn cmd_heatmap(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<RunRecord> {
    execute("heatmap", cfg, out, |dir| {
        let hm = &cfg.heatmap;
        if hm.slides < 4 {
            return Err(Error::config("heatmap.slides must be at least 4 (two per class and split)"));
        }
        let model = match &hm.checkpoint {
            Some(path) => ModelGraph::load(path)?,
            None => {
                let tcfg = cfg.train_config();
                let outcome = train_from_config(cfg, &tcfg, None, exec)?;
                write_training(dir, tcfg.seed, &outcome)?;
                outcome.model
            }
        };
        let params: Vec<SlideParams> = (0..hm.slides)
            .map(|i| {
                let tumor_fraction = if i % 2 == 0 { 0.0 } else { cfg.data.slide.tumor_fraction };
                SlideParams { tumor_fraction, ..cfg.data.slide.clone() }
            })
            .collect();
        let slides = exec
            .map_range(hm.slides, |i| crate::datagen::generate_slide(&params[i], hm.first_seed + i as u64))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for slide in &slides {
            let map = wsiheat::build_heatmap(&model, slide, hm.window, exec)?;
            map.save(&dir.path("heatmaps")?, &slide.id)?;
            dir.record(&format!("heatmaps/{}.heat", slide.id));
            dir.record(&format!("heatmaps/{}.json", slide.id));
            let base = wsiheat::slide_at(slide, hm.window.magnification);
            dir.png(&format!("overlays/{}.png", slide.id), &wsiheat::render_overlay(&base, &map, hm.overlay_size))?;
            let label = usize::from(slide.class_areas().get(1).is_some_and(|&a| a > 0));
            rows.push((slide.id.clone(), Some(label), wsiheat::extract_features(&map)));
        }
        dir.write("features.csv", wsiheat::features_csv(&rows))?;
        let n_train = ((hm.slides as f64 * hm.train_fraction).round() as usize).clamp(1, hm.slides - 1);
        let feats: Vec<Vec<f64>> = rows.iter().map(|r| r.2.clone()).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.1.unwrap()).collect();
        let scores = wsiheat::classify_slides(
            &wsiheat::to_matrix(&feats[..n_train]),
            &labels[..n_train],
            &wsiheat::to_matrix(&feats[n_train..]),
            &hm.forest,
            exec,
        )?;
        let mut csv = String::from("slide,label,score\n");
        for (i, s) in scores.iter().enumerate() {
            csv.push_str(&format!("{},{},{s}\n", rows[n_train + i].0, labels[n_train + i]));
        }
        dir.write("slide_scores.csv", csv)?;
        let test_labels = &labels[n_train..];
        let summary = SlideSummaryScores {
            auc: evalkit::auc_roc(&scores, test_labels).ok(),
            average_precision: evalkit::average_precision(&scores, test_labels).ok(),
            train_slides: n_train,
            test_slides: scores.len(),
        };
        log::info!("heatmap: slide AUC {:?}, AP {:?}", summary.auc, summary.average_precision);
        dir.write("summary.json", serde_json::to_string_pretty(&summary)?)
    })
}

/// One row per (patch, task): the input patch followed by `g(x, r)` for
/// every label `r` (or the regression target).
pub fn preview_rows(slides: &SlideSet, manifest: &Manifest, cfg: &RunConfig) -> Result<(Vec<Vec<Image>>, Vec<String>)> {
    let size = cfg.data.manifest.patch_size;
    let entries: Vec<_> = manifest.split(Split::Train).take(cfg.preview.patches).cloned().collect();
    if entries.is_empty() {
        return Err(Error::data("manifest has no training patches to preview"));
    }
    let mut rows = Vec::new();
    let mut names = Vec::new();
    for e in &entries {
        let x = slides.sample(e, size)?.image;
        for &task in &cfg.preview.tasks {
            let mut row = vec![x.clone()];
            match task {
                TaskName::Rotation => {
                    for r in 0..4 {
                        row.push(pretext::rotate(&x, r)?.0);
                    }
                }
                TaskName::Flipping => {
                    for r in 0..2 {
                        row.push(pretext::flip(&x, r)?.0);
                    }
                }
                TaskName::Magnification => {
                    row.extend(slides.pyramid(e, size)?.into_iter().map(|s| s.image));
                }
                TaskName::Jigmag => {
                    let pyramid = slides.pyramid(e, size / 2)?;
                    for perm in 0..4 {
                        row.push(pretext::jigmag(&pyramid, perm)?.0);
                    }
                }
                TaskName::Autoencoder => row.push(pretext::autoencoder_target(&x).1),
                TaskName::Hematoxylin => {
                    row.push(imageops::gray_to_rgb(&stainsep::minmax_scale(&pretext::hematoxylin_task(&x, &cfg.train.stains).1)))
                }
                TaskName::Generative | TaskName::Domain => {
                    return Err(Error::config(format!("preview.tasks: {task} is not an image transformation")));
                }
            }
            rows.push(row);
            names.push(format!("{} {}", e.origin.slide, task));
        }
    }
    Ok((rows, names))
}

/// Renders a grid of pretext transformations.
pub fn cmd_pretext_preview(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<RunRecord> {
    execute("pretext-preview", cfg, out, |dir| {
        let slides = cfg.data.generate(exec)?;
        let manifest = cfg.data.manifest(&slides, None, cfg.run_seed())?;
        let (rows, names) = preview_rows(&slides, &manifest, cfg)?;
        let size = cfg.data.manifest.patch_size;
        let cols = rows.iter().map(Vec::len).max().unwrap_or(1);
        let blank: Image = Array3::ones((size, size, 3));
        let mut cells = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let n = row.len();
            for img in row {
                let d = img.dim();
                cells.push(if (d.0, d.1) == (size, size) { img } else { imageops::resize_bilinear(img.view(), size, size) });
            }
            cells.extend(std::iter::repeat_n(blank.clone(), cols - n));
        }
        dir.png("preview.png", &imageops::tile_grid(&cells, cols, 2))?;
        dir.write("preview_rows.txt", names.join("\n") + "\n")
    })
}
