//! Acceptance criteria 1–10. Each test prints one `criterion N: PASS|FAIL`
//! line; run with `cargo test -p selfpath --test acceptance -- --nocapture
//! --test-threads=1` to see them in order.

use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfpath::datagen::{build_manifest, Manifest, ManifestEntry, ManifestSpec, SlideParams, SlideSet, Split};
use selfpath::evalkit;
use selfpath::imageops::Image;
use selfpath::model::{self, Architecture, EncoderConfig, ModelGraph, DISCRIMINATOR_HEAD, MAIN_HEAD};
use selfpath::nn::loss::cross_entropy;
use selfpath::nn::{LayerSpec, Sequential, Tensor};
use selfpath::par::Exec;
use selfpath::pretext::{self, PatchContext, Target, TaskName, TaskSpec};
use selfpath::run::{self, RunConfig};
use selfpath::stainsep::{self, StainMatrix};
use selfpath::trainer::{
    self, feature_matching, multitask_backward, multitask_loss, DisConvention, GrlSchedule, Mode, Needs, Pool,
    StepBatch, TrainConfig, TrainData,
};
use selfpath::wsiheat::{self, ForestConfig, HeatMap, HeatmapConfig};

fn verdict(n: usize, name: &str, ok: bool, detail: &str) {
    println!("criterion {n} ({name}): {} — {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn random_tensor(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
    Array4::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

// ---------------------------------------------------------------- 1

fn toy_loss(enc: &Sequential, head: &Sequential, x: &Tensor, y: &[usize]) -> f64 {
    let f = enc.infer(x, Exec::Sequential).unwrap();
    cross_entropy(&head.infer(&f, Exec::Sequential).unwrap(), y).0
}

/// Encoder parameter gradients of the toy graph.
fn toy_grads(enc: &Sequential, head: &Sequential, x: &Tensor, y: &[usize]) -> Vec<f64> {
    let (mut enc, mut head) = (enc.clone(), head.clone());
    enc.zero_grad();
    head.zero_grad();
    let (f, et) = enc.forward(x, Exec::Sequential).unwrap();
    let (logits, ht) = head.forward(&f, Exec::Sequential).unwrap();
    let (_, dl) = cross_entropy(&logits, y);
    let df = head.backward(&ht, &dl, Exec::Sequential);
    enc.backward(&et, &df, Exec::Sequential);
    enc.params().flat_map(|p| p.grad.clone()).collect()
}

#[test]
fn criterion_01_gradient_reversal() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lambda = 0.7;
    let enc = Sequential::new(
        &[
            LayerSpec::Linear { inputs: 4, outputs: 6 },
            LayerSpec::Tanh,
            LayerSpec::Linear { inputs: 6, outputs: 5 },
            LayerSpec::Tanh,
        ],
        &mut rng,
    );
    let body = [LayerSpec::Linear { inputs: 5, outputs: 4 }, LayerSpec::Tanh, LayerSpec::Linear { inputs: 4, outputs: 2 }];
    let identity = Sequential::new(&body, &mut rng);
    let mut reversed = Sequential::new(&[&[LayerSpec::GradReverse { lambda }][..], &body[..]].concat(), &mut rng);
    for (dst, src) in reversed.params_mut().zip(identity.params()) {
        dst.value = src.value.clone();
    }
    let x = random_tensor((6, 4, 1, 1), &mut rng);
    let y = [0, 1, 1, 0, 1, 0];

    // forward through the reversal layer is the identity
    assert_eq!(toy_loss(&enc, &identity, &x, &y), toy_loss(&enc, &reversed, &x, &y));

    let g_id = toy_grads(&enc, &identity, &x, &y);
    let g_rev = toy_grads(&enc, &reversed, &x, &y);
    let flip_err = g_id.iter().zip(&g_rev).map(|(a, b)| (b + lambda * a).abs()).fold(0.0, f64::max);

    let h = 1e-3;
    let mut numeric = Vec::new();
    let sizes: Vec<usize> = enc.params().map(|p| p.len()).collect();
    for (pi, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let at = |d: f64| {
                let mut e = enc.clone();
                e.params_mut().nth(pi).unwrap().value[k] += d;
                toy_loss(&e, &identity, &x, &y)
            };
            numeric.push((at(h) - at(-h)) / (2.0 * h));
        }
    }
    let scale = g_id.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let rel_id = numeric.iter().zip(&g_id).map(|(n, a)| (n - a).abs()).fold(0.0, f64::max) / scale;
    let rel_rev = numeric.iter().zip(&g_rev).map(|(n, a)| (n + a / lambda).abs()).fold(0.0, f64::max) / scale;
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient reversal",
        flip_err < 1e-12 && rel_id < 1e-4 && rel_rev < 1e-4 && secs < 10.0,
        &format!("max |g_rev + λ g_id| = {flip_err:.1e}, FD rel err {rel_id:.1e} / {rel_rev:.1e}, {secs:.2} s"),
    );
}

// ---------------------------------------------------------------- 2

fn small_slides(domain: &str, first_seed: u64, count: usize) -> SlideSet {
    let p = SlideParams { width: 256, height: 256, domain: domain.into(), ..SlideParams::default() };
    SlideSet::generate(&p, first_seed, count, Exec::Parallel).unwrap()
}

#[test]
fn criterion_02_loss_composition() {
    let slides = small_slides("source", 1, 2);
    let spec = ManifestSpec { patches_per_slide: 12, patch_size: 32, ..ManifestSpec::default() };
    let m = build_manifest(&slides.to_vec(), &spec, 0).unwrap();
    let train: Vec<_> = m.split(Split::Train).cloned().collect();
    let all_tasks: Vec<TaskSpec> = TaskName::ALL.iter().map(|&t| TaskSpec::new(t)).collect();
    let stripped: Vec<_> = train.iter().map(|e| ManifestEntry { label: None, ..e.clone() }).collect();
    let needs = Needs::of(&all_tasks);
    let data = TrainData {
        num_classes: 2,
        labeled: Pool::build(&slides, &train, 32, needs, Exec::Parallel).unwrap(),
        unlabeled: Pool::build(&slides, &stripped, 32, needs, Exec::Parallel).unwrap(),
        domain_ids: Some((0, 1)),
        ..TrainData::default()
    };
    let li: Vec<usize> = (0..5).collect();
    let ui: Vec<usize> = (5..11).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let mut tasks: Vec<TaskName> = TaskName::ALL.iter().copied().filter(|_| rng.random::<bool>()).collect();
        tasks.shuffle(&mut rng);
        let mut cfg = TrainConfig {
            mode: Mode::Da,
            encoder: EncoderConfig { architecture: Architecture::SmallConv, input_size: 32, width: 8 },
            head_hidden: 8,
            noise_dim: 8,
            generator_width: 8,
            ..TrainConfig::default()
        }
        .with_tasks(&tasks);
        for t in &mut cfg.tasks {
            t.weight = if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() * 2.0 };
        }
        let mut model = ModelGraph::new(&cfg.model_spec(2).unwrap(), trial).unwrap();
        let mut batch = StepBatch::assemble(&cfg, &data, &li, &ui, &mut rng).unwrap();
        if cfg.is_generative() {
            let z = model::sample_noise(ui.len(), cfg.noise_dim, &mut rng);
            batch.generated = Some(model.generate(&z, Exec::Sequential).unwrap());
        }
        let r = multitask_backward(&batch, &cfg.tasks, &mut model, DisConvention::Printed, Exec::Sequential).unwrap();
        worst = worst.max((r.recompose() - r.total).abs());
    }

    let mut cfg = TrainConfig {
        mode: Mode::Da,
        encoder: EncoderConfig { architecture: Architecture::SmallConv, input_size: 32, width: 8 },
        ..TrainConfig::default()
    }
    .with_tasks(&TaskName::ALL);
    cfg.tasks.iter_mut().for_each(|t| t.weight = 0.0);
    let model = ModelGraph::new(&cfg.model_spec(2).unwrap(), 9).unwrap();
    let mut batch = StepBatch::assemble(&cfg, &data, &li, &ui, &mut rng).unwrap();
    batch.generated = Some(model.generate(&model::sample_noise(ui.len(), cfg.noise_dim, &mut rng), Exec::Sequential).unwrap());
    let report = multitask_loss(&batch, &cfg.tasks, &model, Exec::Sequential).unwrap();
    let feats = model.forward_shared(&model::to_batch(&batch.labeled), Exec::Sequential).unwrap();
    let logits = model.head(MAIN_HEAD).unwrap().net.infer(&feats, Exec::Sequential).unwrap();
    let (ce, _) = cross_entropy(&logits, &batch.labels);
    let bit_exact = report.total.to_bits() == ce.to_bits();
    verdict(
        2,
        "loss composition",
        worst < 1e-7 && bit_exact,
        &format!("100 configs, max |recomposed − total| = {worst:.1e}; all-zero weights bit-exact CE: {bit_exact}"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_adversarial_constants() {
    let cfg = TrainConfig {
        encoder: EncoderConfig { architecture: Architecture::SmallConv, input_size: 16, width: 8 },
        head_hidden: 8,
        noise_dim: 8,
        generator_width: 8,
        ..TrainConfig::generative()
    };
    let mut model = ModelGraph::new(&cfg.model_spec(2).unwrap(), 3).unwrap();
    let last = model.head_mut(DISCRIMINATOR_HEAD).unwrap().net.layers.last_mut().unwrap();
    last.params.iter_mut().for_each(|p| p.value.iter_mut().for_each(|v| *v = 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let real: Vec<Image> = (0..6).map(|_| Array3::from_shape_fn((16, 16, 3), |_| rng.random::<f64>())).collect();
    let generated = Some(model.generate(&model::sample_noise(6, 8, &mut rng), Exec::Sequential).unwrap());
    let batch = StepBatch { labeled: real[..2].to_vec(), labels: vec![0, 1], unlabeled: real.clone(), generated, ..StepBatch::default() };
    let l_dis = multitask_loss(&batch, &cfg.tasks, &model, Exec::Sequential).unwrap().tasks[0].joint.unwrap();
    let direct = trainer::discriminator_loss(&[0.5; 6], &[0.5; 6]);
    let two_ln_two = 2.0 * std::f64::consts::LN_2;

    let feats = model.forward_shared(&model::to_batch(&real), Exec::Sequential).unwrap();
    let (l_gen, grad) = feature_matching(&feats, &feats.clone());
    let ok = (l_dis - two_ln_two).abs() < 1e-6 && (direct - two_ln_two).abs() < 1e-6 && l_gen == 0.0;
    verdict(
        3,
        "adversarial constants",
        ok && grad.iter().all(|&g| g == 0.0),
        &format!("L_dis(D≡0.5) = {l_dis:.10} (2 ln 2 = {two_ln_two:.10}), L_gen(real, real) = {l_gen}"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_stain_deconvolution() {
    let m = StainMatrix::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let od = Array3::from_shape_fn((32, 32, 3), |_| rng.random::<f64>() * 2.0);
    let c = stainsep::unmix(od.view(), &m).unwrap();
    let back = stainsep::remix(c.view(), &m);
    let round_trip = (&back - &od).iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let h = m.hematoxylin();
    let pure = Array3::from_shape_fn((1, 1, 3), |(_, _, k)| h[k]);
    let conc = stainsep::deconvolve(pure.view(), &m).unwrap().concentrations;
    let pure_err = [1.0, 0.0, 0.0].iter().enumerate().map(|(k, e)| (conc[[0, 0, k]] - e).abs()).fold(0.0, f64::max);

    let white: Image = Array3::ones((24, 24, 3));
    let target = stainsep::hematoxylin_target(&white);
    let white_zero = target.iter().all(|&v| v == 0.0);
    verdict(
        4,
        "stain deconvolution",
        round_trip < 1e-6 && pure_err < 1e-6 && white_zero,
        &format!("round trip {round_trip:.1e}, pure-H error {pure_err:.1e}, white target all zero: {white_zero}"),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_pretext_bijections() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tile = |rng: &mut ChaCha8Rng| -> Image { Array3::from_shape_fn((8, 8, 3), |_| rng.random::<f64>()) };
    let tiles: [Image; 4] = [tile(&mut rng), tile(&mut rng), tile(&mut rng), tile(&mut rng)];
    let mut jig_ok = true;
    for perm in 0..12 {
        let img = pretext::assemble(&tiles, perm).unwrap();
        jig_ok &= pretext::disassemble(&img, perm).unwrap() == tiles;
    }
    let x: Image = Array3::from_shape_fn((16, 16, 3), |_| rng.random::<f64>());
    let mut r4 = x.clone();
    for _ in 0..4 {
        r4 = pretext::rotate(&r4, 1).unwrap().0;
    }
    let rot_ok = r4 == x && pretext::rotate(&x, 1).unwrap().0 != x;
    let f = pretext::flip(&x, 1).unwrap().0;
    let flip_ok = pretext::flip(&f, 1).unwrap().0 == x && f != x;

    let slides = small_slides("source", 1, 1);
    let spec = ManifestSpec { patches_per_slide: 20, patch_size: 32, ..ManifestSpec::default() };
    let m = build_manifest(&slides.to_vec(), &spec, 0).unwrap();
    let samples: Vec<_> = m.entries.iter().map(|e| (e.clone(), slides.sample(e, 32).unwrap().image)).collect();
    let stains = StainMatrix::default();
    let mut bad = 0;
    for draw in 0..10_000 {
        let task = TaskName::ALL.iter().copied().filter(|t| t.is_transform()).collect::<Vec<_>>()[draw % 6];
        let (entry, image) = &samples[rng.random_range(0..samples.len())];
        let ctx = PatchContext { image, entry: Some(entry), slides: Some(&slides), stains: &stains };
        let (out, target) = pretext::apply(task, &ctx, &mut rng).unwrap();
        let spec = TaskSpec::new(task);
        let in_space = match target {
            Target::Class(r) => spec.num_classes.is_some_and(|k| r < k),
            Target::Map(t) => t.dim() == (32, 32) && t.iter().all(|v| (0.0..=1.0).contains(v)),
            Target::Image(t) => t.dim() == (32, 32, 3),
        };
        if !in_space || out.dim() != (32, 32, 3) {
            bad += 1;
        }
    }
    verdict(
        5,
        "pretext bijections",
        jig_ok && rot_ok && flip_ok && bad == 0,
        &format!("jigmag 12/12 round trips: {jig_ok}, rotation⁴ = id: {rot_ok}, flip² = id: {flip_ok}, {bad} of 10000 labels out of range"),
    );
}

// ---------------------------------------------------------------- 6

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

#[test]
fn criterion_06_auc_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for inst in 0..500 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let coarse = inst % 2 == 0;
        let scores: Vec<f64> =
            (0..n).map(|_| if coarse { (rng.random::<f64>() * 5.0).floor() / 5.0 } else { rng.random::<f64>() }).collect();
        let fast = evalkit::auc_roc(&scores, &labels).unwrap();
        let oracle = pairwise_auc(&scores, &labels.iter().map(|&l| l == 1).collect::<Vec<_>>());
        worst = worst.max((fast - oracle).abs());
    }
    let mut macro_worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(3..=5);
        let n = rng.random_range(k..=120);
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let scores = Array2::from_shape_fn((n, k), |_| (rng.random::<f64>() * 8.0).floor());
        let fast = evalkit::macro_auc(&scores, &labels, k).unwrap();
        let oracle = (0..k)
            .map(|c| pairwise_auc(&scores.column(c).to_vec(), &labels.iter().map(|&l| l == c).collect::<Vec<_>>()))
            .sum::<f64>()
            / k as f64;
        macro_worst = macro_worst.max((fast - oracle).abs());
    }
    verdict(
        6,
        "AUC oracle equivalence",
        worst < 1e-12 && macro_worst < 1e-12,
        &format!("500 binary instances max error {worst:.1e}; 50 macro instances max error {macro_worst:.1e}"),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_semi_supervised_jigmag() {
    let t = Instant::now();
    let params = SlideParams { width: 512, height: 512, ..SlideParams::default() };
    let slides = SlideSet::generate(&params, 1, 8, Exec::Parallel).unwrap();
    let (mut base, mut jig) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let spec = ManifestSpec { patches_per_slide: 400, patch_size: 32, label_budget: 0.01, ..ManifestSpec::default() };
        let m = build_manifest(&slides.to_vec(), &spec, seed).unwrap();
        let labelled = m.labeled().count();
        let unlabelled = m.unlabeled().count();
        assert_eq!((labelled, unlabelled), (23, 2217));
        for (tasks, out) in [(vec![], &mut base), (vec![TaskName::Jigmag], &mut jig)] {
            let cfg = TrainConfig {
                epochs: 30,
                seed,
                encoder: EncoderConfig { architecture: Architecture::SmallConv, input_size: 32, width: 16 },
                head_hidden: 16,
                ..TrainConfig::default()
            }
            .with_tasks(&tasks);
            let o = trainer::train_semi(&cfg, &slides, &m, Exec::Parallel).unwrap();
            out.push(o.test_auc.unwrap());
        }
    }
    let (mb, mj) = (evalkit::mean_std(&base).0, evalkit::mean_std(&jig).0);
    let mins = t.elapsed().as_secs_f64() / 60.0;
    verdict(
        7,
        "semi-supervised jigmag",
        mj > mb && mins < 20.0,
        &format!(
            "1% labels (23 labelled / 2217 unlabelled), test AUC supervised {:.3} {:?} vs jigmag {:.3} {:?}, {mins:.1} min",
            mb,
            base.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            mj,
            jig.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------- 8

fn da_manifests(seed: u64, source: &[selfpath::datagen::SyntheticSlide], target: &[selfpath::datagen::SyntheticSlide]) -> (Manifest, Manifest) {
    let spec = ManifestSpec { patches_per_slide: 200, patch_size: 32, label_budget: 1.0, ..ManifestSpec::default() };
    (build_manifest(source, &spec, seed).unwrap(), build_manifest(target, &spec, seed).unwrap())
}

#[test]
fn criterion_08_domain_adaptation() {
    let t = Instant::now();
    let src = SlideParams { width: 512, height: 512, ..SlideParams::default() };
    let tgt = SlideParams {
        stain_h: [0.35, 0.80, 0.48],
        stain_e: [0.05, 0.80, 0.60],
        od_gain: 3.0,
        domain: "target".into(),
        ..src.clone()
    };
    let source = SlideSet::generate(&src, 1, 6, Exec::Parallel).unwrap();
    let target = SlideSet::generate(&tgt, 101, 6, Exec::Parallel).unwrap();
    let (svec, tvec) = (source.to_vec(), target.to_vec());
    let mut slides = source;
    slides.extend(target);
    let mut arms = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..3u64 {
        let (sm, tm) = da_manifests(seed, &svec, &tvec);
        for (k, tasks) in [vec![], vec![TaskName::Domain], vec![TaskName::Hematoxylin]].into_iter().enumerate() {
            let mut cfg = TrainConfig {
                mode: Mode::Da,
                epochs: 20,
                seed,
                encoder: EncoderConfig { architecture: Architecture::SmallConv, input_size: 32, width: 16 },
                head_hidden: 64,
                grl_schedule: GrlSchedule::Ramp,
                ..TrainConfig::default()
            }
            .with_tasks(&tasks);
            for t in cfg.tasks.iter_mut().filter(|t| t.name == TaskName::Domain) {
                t.weight = 0.1;
            }
            let o = trainer::train_da(&cfg, &slides, &sm, &tm, Exec::Parallel).unwrap();
            arms[k].push(o.test_auc.unwrap());
        }
    }
    let means: Vec<f64> = arms.iter().map(|a| evalkit::mean_std(a).0).collect();
    let mins = t.elapsed().as_secs_f64() / 60.0;
    verdict(
        8,
        "domain adaptation",
        means[1] > means[0] && means[2] > means[0] && mins < 20.0,
        &format!(
            "target test AUC source-only {:.3}, DANN {:.3}, hematoxylin {:.3} (per seed {arms:.3?}), {mins:.1} min",
            means[0], means[1], means[2]
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_slide_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut lengths_ok = true;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let sparse = rng.random::<f64>();
        let map = Array2::from_shape_fn((h, w), |_| if rng.random::<f64>() < sparse { rng.random::<f64>() } else { 0.0 });
        lengths_ok &= wsiheat::extract_features(&HeatMap::from_values("r", map)).len() == 120;
    }
    lengths_ok &= wsiheat::extract_features(&HeatMap::from_values("z", Array2::zeros((4, 4)))).len() == 120;
    lengths_ok &= wsiheat::extract_features(&HeatMap::from_values("o", Array2::ones((4, 4)))).len() == 120;

    let slide = small_slides("source", 3, 1).iter().next().unwrap().clone();
    let cfg = TrainConfig { encoder: EncoderConfig { architecture: Architecture::SmallConv, input_size: 32, width: 8 }, ..TrainConfig::default() };
    let model = ModelGraph::new(&cfg.model_spec(2).unwrap(), 0).unwrap();
    let map = wsiheat::build_heatmap(&model, &slide, HeatmapConfig::default(), Exec::Parallel).unwrap();
    let grid = map.windows.dim();

    // separable: feature vectors of synthetic heat maps with and without a
    // high-probability tumor region
    let n = 40;
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let feats: Vec<Vec<f64>> = y
        .iter()
        .map(|&label| {
            let mut map = Array2::from_shape_fn((16, 16), |_| 0.4 * rng.random::<f64>());
            if label == 1 {
                let (r, c) = (rng.random_range(0..10), rng.random_range(0..10));
                let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
                map.slice_mut(ndarray::s![r..r + h, c..c + w]).mapv_inplace(|v| 0.9 + v / 4.0);
            }
            wsiheat::extract_features(&HeatMap::from_values("toy", map))
        })
        .collect();
    let x = wsiheat::to_matrix(&feats);
    let forest = ForestConfig { seed: 1, ..ForestConfig::default() };
    let (tr, te) = (n / 2, n - n / 2);
    let xt = x.slice(ndarray::s![..tr, ..]).to_owned();
    let xe = x.slice(ndarray::s![tr.., ..]).to_owned();
    let scores = wsiheat::classify_slides(&xt, &y[..tr], &xe, &forest, Exec::Parallel).unwrap();
    let separable = evalkit::auc_roc(&scores, &y[tr..]).unwrap();
    assert_eq!(scores.len(), te);

    // permuted labels on noise: chance level
    let mut perm_aucs = Vec::new();
    for run in 0..10u64 {
        let m = 400;
        let xn = Array2::from_shape_fn((m, 120), |_| rng.random::<f64>());
        let mut yp: Vec<usize> = (0..m).map(|i| i % 2).collect();
        yp.shuffle(&mut rng);
        let f = ForestConfig { seed: run, ..ForestConfig::default() };
        let s = wsiheat::classify_slides(
            &xn.slice(ndarray::s![..m / 2, ..]).to_owned(),
            &yp[..m / 2],
            &xn.slice(ndarray::s![m / 2.., ..]).to_owned(),
            &f,
            Exec::Parallel,
        )
        .unwrap();
        perm_aucs.push(evalkit::auc_roc(&s, &yp[m / 2..]).unwrap());
    }
    let perm = evalkit::mean_std(&perm_aucs).0;
    verdict(
        9,
        "slide pipeline",
        lengths_ok && grid == (3, 3) && separable == 1.0 && (perm - 0.5).abs() <= 0.1,
        &format!("feature length 120 everywhere: {lengths_ok}, 256 px slide grid {grid:?}, separable AUC {separable}, permuted AUC {perm:.3}"),
    );
}

// ---------------------------------------------------------------- 10

const DETERMINISM: &str = r#"
version = 1
seed = 7

[data]
slides = 2

[data.slide]
width = 256
height = 256

[data.manifest]
patches_per_slide = 60
patch_size = 32
label_budget = 0.2

[target]
slides = 2
first_seed = 50

[target.slide]
width = 256
height = 256
od_gain = 1.6
domain = "target"

[target.manifest]
patches_per_slide = 60
patch_size = 32

[train]
epochs = 3
batch_size = 16

[train.encoder]
architecture = "small-conv"
input_size = 32
width = 8
"#;

#[test]
fn criterion_10_determinism() {
    let variants = [
        ("semi + jigmag + rotation", "tasks = [{ name = \"jigmag\" }, { name = \"rotation\" }]", "semi"),
        ("da + domain + hematoxylin", "tasks = [{ name = \"domain\" }, { name = \"hematoxylin\" }]", "da"),
    ];
    let mut details = Vec::new();
    let mut ok = true;
    for (name, tasks, mode) in variants {
        let text = DETERMINISM.replace("[train]\n", &format!("[train]\nmode = \"{mode}\"\n{tasks}\n"));
        let cfg = RunConfig::from_toml(&text).unwrap();
        let outputs: Vec<_> = (0..2)
            .map(|_| {
                let tmp = tempfile::tempdir().unwrap();
                let rec = run::cmd_train(&cfg, tmp.path(), Exec::Parallel).unwrap();
                let dir = run::run_dir(tmp.path(), &rec);
                let read = |f: &str| std::fs::read(dir.join(f)).unwrap();
                (read("summary.json"), read("metrics.jsonl"), read("model.ckpt"), rec.run_id)
            })
            .collect();
        let same = outputs[0] == outputs[1];
        let seq = run::train_from_config(&cfg, &TrainConfig { seed: 7, ..cfg.train.clone() }, None, Exec::Sequential).unwrap();
        let summary: run::TrainSummary = serde_json::from_slice(&outputs[0].0).unwrap();
        let policy_same = summary == run::TrainSummary::of(7, &seq);
        ok &= same && policy_same;
        details.push(format!("{name}: rerun identical {same}, sequential identical {policy_same}"));
    }
    verdict(10, "determinism", ok, &details.join("; "));
}
