use mdet_core::autodiff::Graph;
use mdet_core::config::{ModelConfig, TrainConfig};
use mdet_core::model::{prepare_sample, BatchContext, Detector, Sample};
use mdet_core::params::ParamStore;
use mdet_core::synth::{generate_scene, SceneConfig};
use mdet_core::train::{train, TrainSinks, LOG_HEADER};

fn tiny() -> ModelConfig {
    ModelConfig {
        image_height: 64,
        image_width: 64,
        dim: 8,
        state: 2,
        pre_depth: 1,
        main_depth: 1,
        fpn_levels: 2,
        queries: 4,
        heads: 1,
        decoder_layers: 1,
        ..ModelConfig::default()
    }
}

fn samples(n: u64) -> Vec<Sample<f32>> {
    let scene = SceneConfig {
        height: 64,
        width: 64,
        object_count: (1, 2),
        size_weights: [1.0, 1.0, 0.0],
        ..SceneConfig::default()
    };
    (0..n)
        .map(|seed| {
            let (image, ann) = generate_scene(&scene.with_seed(seed)).unwrap();
            prepare_sample(&image, &ann, 16).unwrap()
        })
        .collect()
}

fn bits(store: &ParamStore<f32>) -> Vec<u32> {
    store
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (model, mut store) = Detector::new(&tiny(), 1).unwrap();
    let before = bits(&store);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        steps: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let data = samples(4);
    let out = train(
        &model,
        &mut store,
        &data,
        &cfg,
        0,
        TrainSinks {
            checkpoint: None,
            log: None,
        },
    )
    .unwrap();
    assert_eq!(out.logs.len(), 3);
    assert_eq!(bits(&store), before);
}

#[test]
fn first_logged_loss_matches_a_standalone_forward() {
    let (model, mut store) = Detector::new(&tiny(), 2).unwrap();
    let data = samples(3);
    let cfg = TrainConfig {
        steps: 1,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let refs: Vec<&Sample<f32>> = data.iter().collect();
    let ctx = BatchContext::new(&refs, cfg.patch_loss_weight).unwrap();
    let (mut hungarian, mut patch) = (0.0, 0.0);
    for s in &data {
        let g = Graph::new();
        let p = store.bind(&g);
        let (loss, _) = model.sample_loss(&g, &p, s, &ctx, &cfg.loss).unwrap();
        hungarian += loss.hungarian;
        patch += loss.patch;
    }
    hungarian /= data.len() as f64;

    let mut log = Vec::new();
    let out = train(
        &model,
        &mut store,
        &data,
        &cfg,
        0,
        TrainSinks {
            checkpoint: None,
            log: Some(&mut log),
        },
    )
    .unwrap();
    let first = &out.logs[0];
    assert!((first.hungarian - hungarian).abs() <= 1e-9 * hungarian.abs());
    assert!((first.patch - patch).abs() <= 1e-9 * patch.abs());
    assert_eq!(first.weight, ctx.patch_weight);

    let text = String::from_utf8(log).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    let fields: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(fields, [0.0, first.hungarian, first.patch, first.weight]);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let data = samples(4);
    let run = |threads: usize| {
        let (model, mut store) = Detector::new(&tiny(), 3).unwrap();
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 4,
            threads,
            ..TrainConfig::default()
        };
        train(
            &model,
            &mut store,
            &data,
            &cfg,
            5,
            TrainSinks {
                checkpoint: None,
                log: None,
            },
        )
        .unwrap();
        bits(&store)
    };
    assert_eq!(run(1), run(3));
}
