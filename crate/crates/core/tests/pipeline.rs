use std::fs;

use fewshot_pc::data::{generate_dataset, ClassSplit, Dataset, LabeledCloud, SceneConfig};
use fewshot_pc::pipeline::gradcheck::{tiny_config, tiny_episode};
use fewshot_pc::pipeline::model::group_gradient_norms;
use fewshot_pc::pipeline::train::{train_clouds, training_episode};
use fewshot_pc::pipeline::*;
use proptest::prelude::*;

fn small_dataset() -> Dataset {
    let scene = SceneConfig {
        points_per_object: 24,
        background_points: 32,
        ..SceneConfig::default()
    };
    generate_dataset(18, 5, &ClassSplit::standard(), &scene).unwrap()
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.encoder.hidden = 8;
    c.encoder.output = 8;
    c.encoder.k = 6;
    c.pretrain.epochs = 2;
    c.pretrain.batch = 4;
    c.pretrain.max_scenes = 8;
    c.fewshot.episodes = 6;
    c.fewshot.proto_count = 4;
    c.fewshot.mra.n_k = 4;
    c.eval.episodes = 4;
    c
}

#[test]
fn zero_lambda_total_equals_label_loss() {
    let mut config = tiny_config();
    config.fewshot.lambda = 0.0;
    let episode = tiny_episode(3);
    let mut model = FewShotModel::<f64>::new(&config).unwrap();
    let mut trainer = Trainer::new(&config.fewshot);
    let l = trainer.step(&mut model, &episode, &config.fewshot).unwrap();
    assert_eq!(l.total, l.label);
    assert!(l.center > 0.0);
}

#[test]
fn total_loss_decomposes() {
    let config = tiny_config();
    let episode = tiny_episode(4);
    let mut model = FewShotModel::<f64>::new(&config).unwrap();
    let mut trainer = Trainer::new(&config.fewshot);
    let l = trainer.step(&mut model, &episode, &config.fewshot).unwrap();
    assert!((l.total - (l.label + config.fewshot.lambda * l.center)).abs() < 1e-14);
}

#[test]
fn every_parameter_group_receives_gradient() {
    let config = tiny_config();
    let model = FewShotModel::<f64>::new(&config).unwrap();
    let norms = group_gradient_norms(&model, &tiny_episode(5), &config.fewshot).unwrap();
    assert!(!norms.is_empty());
    for (name, n) in norms {
        assert!(n > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn zero_learning_rate_pretraining_leaves_parameters_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset();
    let mut config = small_config();
    config.pretrain.lr = 0.0;
    config.pretrain.augmentor_lr = 0.0;
    let run = RunDir::create(tmp.path(), false).unwrap();
    let out = run_pretrain::<f64>(&config, &data, &run).unwrap();
    let fresh = {
        let run2 = RunDir::create(&tmp.path().join("again"), false).unwrap();
        let mut c = config.clone();
        c.pretrain.epochs = 0;
        run_pretrain::<f64>(&c, &data, &run2).unwrap()
    };
    assert_eq!(out.state.encoder, fresh.state.encoder);
    assert_eq!(out.state.augmentor, fresh.state.augmentor);
}

#[test]
fn frozen_augmentor_is_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset();
    let mut config = small_config();
    config.pretrain.freeze_augmentor = true;
    let run = RunDir::create(tmp.path(), false).unwrap();
    let out = run_pretrain::<f32>(&config, &data, &run).unwrap();
    let mut c = config.clone();
    c.pretrain.epochs = 0;
    let run2 = RunDir::create(&tmp.path().join("init"), false).unwrap();
    let init = run_pretrain::<f32>(&c, &data, &run2).unwrap();
    assert_eq!(out.state.augmentor, init.state.augmentor);
    assert_ne!(out.state.encoder, init.state.encoder);
}

#[test]
fn pretraining_writes_checkpoints_and_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset();
    let config = small_config();
    let run = RunDir::create(tmp.path(), false).unwrap();
    let out = run_pretrain::<f32>(&config, &data, &run).unwrap();
    let curve = fs::read_to_string(run.loss_curve()).unwrap();
    assert_eq!(curve.lines().count(), out.losses.len());
    for name in ["encoder.ckpt", "head.ckpt", "augmentor.ckpt"] {
        assert!(run.checkpoint(name).is_file(), "{name}");
    }
}

#[test]
fn training_never_sees_test_classes() {
    let data = small_dataset();
    let config = small_config();
    let clouds: Vec<LabeledCloud<f32>> = data.clouds.clone();
    let test = data.split.test_classes();
    for e in 0..40 {
        let ep = training_episode(&config, &clouds, &data, e).unwrap();
        assert!(ep.classes.iter().all(|c| !test.contains(c)));
        for src in ep.support.iter().map(|s| s.source).chain(ep.query_sources.iter().copied()) {
            assert!(data.clouds[src].labels.iter().all(|l| !test.contains(l)));
        }
    }
    assert!(train_clouds(&data).iter().all(|c| c.labels.iter().all(|l| !test.contains(l))));
}

#[test]
fn training_run_is_deterministic_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset();
    let config = small_config();
    let a = RunDir::create(&tmp.path().join("a"), false).unwrap();
    let b = RunDir::create(&tmp.path().join("b"), false).unwrap();
    let out = run_fewshot_train::<f32>(&config, &data, &a, None).unwrap();
    run_fewshot_train::<f32>(&config, &data, &b, None).unwrap();
    assert_eq!(fs::read(a.metrics()).unwrap(), fs::read(b.metrics()).unwrap());
    assert_eq!(fs::read_to_string(a.metrics()).unwrap().lines().count(), config.fewshot.episodes);

    let (loaded_config, model) = load_model::<f32>(&a).unwrap();
    assert_eq!(loaded_config, config);
    assert_eq!(model, out.model);
    let r1 = evaluate(&model, &data, &config.fewshot, &config.eval).unwrap();
    let r2 = evaluate(&out.model, &data, &config.fewshot, &config.eval).unwrap();
    assert_eq!(r1, r2);
    assert!((0.0..=1.0).contains(&r1.foreground_miou));
    assert!(r1.per_class.values().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn pretrained_encoder_is_loaded() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset();
    let config = small_config();
    let pre = RunDir::create(&tmp.path().join("pre"), false).unwrap();
    let pretrained = run_pretrain::<f32>(&config, &data, &pre).unwrap();
    let mut c = config.clone();
    c.fewshot.encoder_lr = 0.0;
    let run = RunDir::create(&tmp.path().join("run"), false).unwrap();
    let out = run_fewshot_train::<f32>(&c, &data, &run, Some(&pre.checkpoint("encoder.ckpt"))).unwrap();
    assert_eq!(out.model.encoder, pretrained.state.encoder);
}

#[test]
fn existing_run_is_not_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset();
    let mut config = small_config();
    config.fewshot.episodes = 1;
    let run = RunDir::create(tmp.path(), false).unwrap();
    run_fewshot_train::<f32>(&config, &data, &run, None).unwrap();
    assert!(RunDir::create(tmp.path(), false).is_err());
    assert!(RunDir::create(tmp.path(), true).is_ok());
}

#[test]
fn baselines_report_valid_scores() {
    let data = small_dataset();
    let config = small_config();
    let chance = chance_baseline(&data, &config.eval).unwrap();
    assert!((0.0..=1.0).contains(&chance.foreground_miou));
    let model = FewShotModel::<f32>::new(&config).unwrap();
    let nearest = nearest_prototype_baseline(&model.encoder, &data, &config.eval).unwrap();
    assert!((0.0..=1.0).contains(&nearest.foreground_miou));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn config_round_trips(seed in any::<u64>(), lambda in 0.0f64..5.0, gamma in 0.0f64..0.999,
                          episodes in 1usize..100_000, n_k in 1usize..400, ratio in 0.01f64..1.0,
                          mra in any::<bool>(), center in any::<bool>()) {
        let mut c = RunConfig::desk();
        c.seed = seed;
        c.fewshot.lambda = lambda;
        c.fewshot.gamma = gamma;
        c.fewshot.episodes = episodes;
        c.fewshot.mra.n_k = n_k;
        c.fewshot.mra.fps_ratio = ratio;
        c.fewshot.use_mra = mra;
        c.fewshot.use_center = center;
        prop_assert!(c.validate().is_ok());
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn out_of_range_gamma_is_rejected(gamma in prop_oneof![1.0f64..10.0, -10.0f64..-1e-9]) {
        let mut c = RunConfig::desk();
        c.fewshot.gamma = gamma;
        prop_assert!(c.validate().is_err());
    }
}
