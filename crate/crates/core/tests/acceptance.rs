//! Acceptance suite: one `criterion N: PASS|FAIL` line per criterion.
//!
//! Criteria 7 and 8 are training experiments. Their lines are printed with the
//! measured numbers but do not fail the binary; every other criterion does.
//! Set `ACCEPTANCE_ONLY=2,5` to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use fewshot_pc::contrastive::{pointwise_contrastive_loss, ContrastiveBatch};
use fewshot_pc::data::{generate_dataset, ClassSplit, Dataset, PointCloud, SceneConfig};
use fewshot_pc::geometry::{fps, knn};
use fewshot_pc::labelprop::{affinity, ce_loss, predict, propagate_affinity, reference_matrix, softmax_map};
use fewshot_pc::mra::{Mra, MraConfig};
use fewshot_pc::pipeline::*;
use fewshot_pc::prototypes::center_loss;
use fewshot_pc::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const SOFTMAX_TOL: f64 = 1e-12;
const MIOU_TARGET: f64 = 0.60;
const CHANCE_CEILING: f64 = 0.35;
const BASELINE_MARGIN: f64 = 0.05;
const ABLATION_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];
const ABLATION_EPISODES: usize = 1000;
const ABLATION_EVAL_EPISODES: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed < Duration::from_secs(secs)
}

fn criterion_1() -> Outcome {
    // Absolute figures from real indoor scans are out of reach; this pins the
    // published-scale hyperparameters that the desk runs scale down from.
    let c = RunConfig::published();
    let pinned = c.encoder.k == 200
        && c.pretrain.batch == 16
        && c.pretrain.lr == 1e-3
        && c.pretrain.epochs == 120
        && c.fewshot.lambda == 0.1
        && c.fewshot.gamma == 0.9
        && c.fewshot.mra.n_k == 250
        && c.fewshot.mra.fps_ratio == 0.4
        && c.fewshot.encoder_lr == 5e-4
        && c.fewshot.lr == 1e-3
        && c.fewshot.episodes == 40_000;
    outcome(
        pinned,
        "published mIoU (54.80 on S0 2-way 1-shot) needs real scans and 40,000 iterations; \
         desk criteria 2-9 substitute; published hyperparameters pinned",
    )
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut r = rng(2);
    let mut mismatches = 0;
    for _ in 0..100 {
        let m = r.random_range(2..=256);
        let pts = random_matrix(&mut r, m, 3, 1.0);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let k = r.random_range(1..m.min(32));
        let nn = knn(&cloud, k).unwrap();
        if brute_knn(&pts, k).iter().enumerate().any(|(i, want)| nn.row(i) != &want[..]) {
            mismatches += 1;
        }
        let count = r.random_range(1..=m);
        let start = r.random_range(0..m);
        if fps(&cloud, count, start).unwrap().0 != brute_fps(&pts, count, start) {
            mismatches += 1;
        }
    }
    let dt = t.elapsed();
    outcome(mismatches == 0 && within(dt, 30), format!("{mismatches} mismatches over 100 clouds, {:.2}s", dt.as_secs_f64()))
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = r.random_range(4..=60);
        let o = random_matrix(&mut r, m, 6, 1.0);
        let o2 = random_matrix(&mut r, m, 6, 1.0);
        let got = pointwise_contrastive_loss(&ContrastiveBatch::new(o.clone(), o2.clone()).unwrap()).unwrap();
        worst = worst.max((got - naive_contrastive(&o, &o2)).abs());

        let classes = r.random_range(2..=4);
        let z = r.random_range(classes * 2 + 2..=60);
        let x = random_matrix(&mut r, z, 5, 1.0);
        let labels: Vec<usize> = (0..z).map(|i| i % classes).collect();
        let got = center_loss(&x, &labels, classes, 1.0).unwrap();
        worst = worst.max((got - naive_center_loss(&x, &labels, classes, 1.0)).abs());

        let count = 2;
        let queries = z - classes * count;
        let w = affinity(&x, None).unwrap().w;
        worst = worst.max(w.max_abs_diff(&naive_affinity(&x)));
        let l = reference_matrix(classes, count, queries);
        let f = propagate_affinity(&w, &l, 0.9).unwrap();
        worst = worst.max(f.max_abs_diff(&naive_propagation(&w, &l, 0.9)));

        let split = queries / 2;
        let truth: Vec<Vec<usize>> = vec![
            (0..split).map(|_| r.random_range(0..classes)).collect(),
            (split..queries).map(|_| r.random_range(0..classes)).collect(),
        ];
        let rows: Vec<usize> = (classes * count..z).collect();
        let got = ce_loss(&softmax_map(&f.select_rows(&rows)), &truth).unwrap();
        worst = worst.max((got - naive_ce(&f, classes * count, &truth)).abs());
    }
    let dt = t.elapsed();
    outcome(worst < ORACLE_TOL && within(dt, 10), format!("max abs difference {worst:.2e}, {:.2}s", dt.as_secs_f64()))
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for c in [Component::Contrastive, Component::Center, Component::CenterDetached, Component::LabelProp, Component::EndToEnd] {
        let g = grad_check(c, 4).unwrap();
        pass &= g.max_rel_error < GRAD_TOL;
        parts.push(format!("{c} {:.1e}", g.max_rel_error));
    }
    let dt = t.elapsed();
    outcome(pass && within(dt, 60), format!("{}, {:.2}s", parts.join(", "), dt.as_secs_f64()))
}

/// Two disconnected random blocks; prototypes of class `b` live in block `b`.
fn block_instance(seed: u64) -> (Matrix<f64>, Matrix<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let count = r.random_range(1..=4);
    let queries = r.random_range(2..=30);
    let z = 2 * count + queries;
    let mut block: Vec<usize> = (0..2 * count).map(|i| i / count).collect();
    block.extend((0..queries).map(|q| if q < 2 { q } else { r.random_range(0..2) }));
    let mut w = Matrix::zeros(z, z);
    for i in 0..z {
        w[(i, i)] = 1.0;
        for j in i + 1..z {
            if block[i] == block[j] {
                let v = r.random_range(0.05..1.0);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
    }
    (w, reference_matrix(2, count, queries), block[2 * count..].to_vec())
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let mut r = rng(5);
    let mut identity_ok = true;
    for _ in 0..20 {
        let z = r.random_range(7..=40);
        let w = affinity(&random_matrix(&mut r, z, 4, 1.0), None).unwrap().w;
        let l = reference_matrix(3, 2, z - 6);
        identity_ok &= propagate_affinity(&w, &l, 0.0).unwrap() == l;
    }
    let mut solved = 0;
    for seed in 0..50 {
        let (w, l, truth) = block_instance(500 + seed);
        let f = propagate_affinity(&w, &l, 0.9).unwrap();
        let rows: Vec<usize> = (l.rows() - truth.len()..l.rows()).collect();
        if predict(&softmax_map(&f.select_rows(&rows))) == truth {
            solved += 1;
        }
    }
    let dt = t.elapsed();
    outcome(
        identity_ok && solved == 50 && within(dt, 5),
        format!("gamma=0 identity {identity_ok}, block graphs {solved}/50, {:.2}s", dt.as_secs_f64()),
    )
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let mut r = rng(6);
    let channels = 8;
    let m = 1024;
    let config = MraConfig { n_k: 250, fps_ratio: 0.4, ..MraConfig::default() };
    let mra = Mra::<f64>::new(channels, config, &mut r).unwrap();
    let cloud = PointCloud::new(random_matrix(&mut r, m, 3, 1.0)).unwrap();
    let x = random_matrix(&mut r, m, channels, 1.0);
    let out = mra.mra_forward(&x, &cloud).unwrap();
    let shape_ok = out.features.rows() == m && out.features.cols() == 2 * channels;
    let width_ok = out.attention_width == 660 && out.scores_computed == m * 660;
    let mut worst = 0.0f64;
    for i in (0..m).step_by(64) {
        let (scores, soft) = mra.attention_map(&x, &cloud, i).unwrap();
        if scores.cols() != 660 {
            worst = f64::INFINITY;
        }
        worst = worst.max((soft.row(0).iter().sum::<f64>() - 1.0).abs());
    }
    let dt = t.elapsed();
    outcome(
        shape_ok && width_ok && worst <= SOFTMAX_TOL && within(dt, 30),
        format!(
            "output {}x{}, width {}, softmax row error {worst:.1e}, {:.2}s",
            out.features.rows(),
            out.features.cols(),
            out.attention_width,
            dt.as_secs_f64()
        ),
    )
}

fn benchmark() -> Dataset {
    let scene = SceneConfig {
        points_per_object: 64,
        background_points: 96,
        ..SceneConfig::default()
    };
    generate_dataset(120, 1, &ClassSplit::standard(), &scene).unwrap()
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let data = benchmark();
    let config = RunConfig::desk();
    let tmp = tempfile::tempdir().unwrap();
    let run = RunDir::create(tmp.path(), false).unwrap();
    let out = run_fewshot_train::<f32>(&config, &data, &run, None).unwrap();
    let eval = EvalConfig { episodes: 200, ..config.eval.clone() };
    let model = evaluate(&out.model, &data, &config.fewshot, &eval).unwrap();
    let chance = chance_baseline(&data, &eval).unwrap();
    let nearest = nearest_prototype_baseline(&out.model.encoder, &data, &eval).unwrap();
    let dt = t.elapsed();
    let (m, c, n) = (model.foreground_miou, chance.foreground_miou, nearest.foreground_miou);
    outcome(
        m >= MIOU_TARGET && c <= CHANCE_CEILING && m >= n + BASELINE_MARGIN && within(dt, 15 * 60),
        format!(
            "mIoU {m:.3} (target {MIOU_TARGET}), chance {c:.3}, nearest-prototype {n:.3}, {} episodes, {:.0}s",
            config.fewshot.episodes,
            dt.as_secs_f64()
        ),
    )
}

fn ablation_arm(data: &Dataset, config: &RunConfig, encoder: Option<&std::path::Path>) -> f64 {
    let tmp = tempfile::tempdir().unwrap();
    let run = RunDir::create(tmp.path(), false).unwrap();
    let out = run_fewshot_train::<f32>(config, data, &run, encoder).unwrap();
    evaluate(&out.model, data, &config.fewshot, &config.eval).unwrap().foreground_miou
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let data = benchmark();
    // full, no pretrain, no MRA, no center
    let mut sums = [0.0f64; 4];
    for &seed in &ABLATION_SEEDS {
        let mut config = RunConfig::desk();
        config.seed = seed;
        config.fewshot.episodes = ABLATION_EPISODES;
        config.eval.episodes = ABLATION_EVAL_EPISODES;
        let tmp = tempfile::tempdir().unwrap();
        let pre = RunDir::create(tmp.path(), false).unwrap();
        run_pretrain::<f32>(&config, &data, &pre).unwrap();
        let ckpt = pre.checkpoint("encoder.ckpt");
        sums[0] += ablation_arm(&data, &config, Some(&ckpt));
        sums[1] += ablation_arm(&data, &config, None);
        let mut no_mra = config.clone();
        no_mra.fewshot.use_mra = false;
        sums[2] += ablation_arm(&data, &no_mra, Some(&ckpt));
        let mut no_center = config.clone();
        no_center.fewshot.use_center = false;
        sums[3] += ablation_arm(&data, &no_center, Some(&ckpt));
    }
    let mean = sums.map(|s| s / ABLATION_SEEDS.len() as f64);
    let pretrain_helps = mean[0] >= mean[1];
    let wins = mean[1..].iter().filter(|&&v| mean[0] >= v).count();
    let dt = t.elapsed();
    outcome(
        pretrain_helps && wins >= 2 && within(dt, 90 * 60),
        format!(
            "mean mIoU full {:.3}, no-pretrain {:.3}, no-mra {:.3}, no-center {:.3}; full wins {wins}/3, {:.0}s",
            mean[0],
            mean[1],
            mean[2],
            mean[3],
            dt.as_secs_f64()
        ),
    )
}

fn criterion_9() -> Outcome {
    let scene = SceneConfig {
        points_per_object: 24,
        background_points: 32,
        ..SceneConfig::default()
    };
    let data = generate_dataset(18, 5, &ClassSplit::standard(), &scene).unwrap();
    let mut config = RunConfig::desk();
    config.encoder.hidden = 8;
    config.encoder.output = 8;
    config.encoder.k = 6;
    config.pretrain.epochs = 1;
    config.pretrain.batch = 4;
    config.fewshot.episodes = 8;
    config.fewshot.proto_count = 4;
    config.fewshot.mra.n_k = 4;
    let tmp = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    let mut curves = Vec::new();
    for name in ["a", "b"] {
        let pre = RunDir::create(&tmp.path().join(format!("pre-{name}")), false).unwrap();
        run_pretrain::<f32>(&config, &data, &pre).unwrap();
        curves.push(std::fs::read(pre.loss_curve()).unwrap());
        let run = RunDir::create(&tmp.path().join(name), false).unwrap();
        run_fewshot_train::<f32>(&config, &data, &run, Some(&pre.checkpoint("encoder.ckpt"))).unwrap();
        metrics.push(std::fs::read(run.metrics()).unwrap());
    }
    let same = metrics[0] == metrics[1] && curves[0] == curves[1];
    outcome(same && !metrics[0].is_empty(), format!("metrics files byte-identical: {same}"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, fn() -> Outcome, bool); 9] = [
        (1, criterion_1, true),
        (2, criterion_2, true),
        (3, criterion_3, true),
        (4, criterion_4, true),
        (5, criterion_5, true),
        (6, criterion_6, true),
        (7, criterion_7, false),
        (8, criterion_8, false),
        (9, criterion_9, true),
    ];
    let mut fatal = 0;
    for (n, run, required) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {verdict} {}", result.detail);
        if !result.pass && required {
            fatal += 1;
        }
    }
    if fatal > 0 {
        std::process::exit(1);
    }
}
