use mdet_core::autodiff::Graph;
use mdet_core::config::{ModelConfig, TrainConfig};
use mdet_core::eval::ForegroundStats;
use mdet_core::model::{prepare_sample, BatchContext, Detector, Sample};
use mdet_core::pruner::{select_topk, weighted_bce_part};
use mdet_core::synth::{generate_scene, SceneAnnotation, SceneConfig};
use mdet_core::tensor::Tensor;
use mdet_core::train::{clip_gradients, AdamW};

fn scenes(seeds: std::ops::Range<u64>) -> Vec<(Sample<f32>, SceneAnnotation)> {
    let scene = SceneConfig::default();
    seeds
        .map(|seed| {
            let (image, ann) = generate_scene(&scene.with_seed(seed)).unwrap();
            (prepare_sample(&image, &ann, 16).unwrap(), ann)
        })
        .collect()
}

/// Embedding, shallow stack and classifier trained on the weighted patch
/// loss alone, then scored on held-out scenes at threshold 0.5 and at the
/// default keep ratio.
#[test]
fn foreground_classifier_learns_synthetic_scenes() {
    let cfg = ModelConfig {
        dim: 32,
        ..ModelConfig::default()
    };
    let (model, mut store) = Detector::new(&cfg, 0).unwrap();
    let train_cfg = TrainConfig::default();
    let mut opt = AdamW::new(&store, &train_cfg);
    let train = scenes(0..200);
    let val = scenes(10_000..10_040);

    let classify = |g: &Graph<f32>, p: &mdet_core::params::Bound, s: &Sample<f32>| {
        let tokens = model.embed.forward(g, p, &s.patches, &s.grid).unwrap();
        let pre = model.pruner.pre.run(g, p, tokens).unwrap();
        model.pruner.classify(g, p, pre).unwrap()
    };
    for step in 0..150 {
        let batch: Vec<&Sample<f32>> = (0..8)
            .map(|i| &train[(step * 8 + i) % train.len()].0)
            .collect();
        let ctx = BatchContext::new(&batch, 1.0).unwrap();
        let mut grads: Vec<Tensor<f32>> = store
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        for s in &batch {
            let g = Graph::new();
            let p = store.bind(&g);
            let scores = classify(&g, &p, s);
            let loss =
                weighted_bce_part(&g, scores, &s.labels, ctx.patch_weight, ctx.patches).unwrap();
            let mut back = g.backward(loss).unwrap();
            for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                if let Some(t) = back.take(v) {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += *b;
                    }
                }
            }
        }
        clip_gradients(&mut grads, train_cfg.grad_clip);
        opt.step(&mut store, &grads, 1e-3);
    }

    let mut stats = ForegroundStats::default();
    for (s, ann) in &val {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let scores = classify(&g, &p, s);
        let decision = select_topk(g.value(scores).data(), cfg.prune_ratio).unwrap();
        stats.add(&s.grid, ann, &decision).unwrap();
    }
    let accuracy = stats.accuracy().unwrap();
    assert!(accuracy > 0.9, "held-out foreground accuracy {accuracy:.3}");
    let recall = stats.kept_recall().unwrap();
    assert!(
        recall >= 0.8,
        "object patches kept at r = {}: {recall:.3}",
        cfg.prune_ratio
    );
}
