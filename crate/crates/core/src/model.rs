//! The full detector: patch embedding, pruned SSM backbone, pyramid and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fpn::EfficientFpn;
use crate::head::{
    cost_matrix, hungarian_loss_graph, hungarian_match, DetectionHead, DetectionSet, GroundTruth,
    LossWeights, MatchResult,
};
use crate::params::{Bound, Init, ParamStore};
use crate::pruner::{generate_patch_labels, weighted_bce_part, PatchLabels, PruneDecision, Pruner};
use crate::synth::SceneAnnotation;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{extract_patches, PatchEmbed, PatchGrid};

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub embed: PatchEmbed,
    pub pruner: Pruner,
    pub fpn: EfficientFpn,
    pub head: DetectionHead,
}

/// One image prepared for the network.
#[derive(Clone, Debug)]
pub struct Sample<T: Real> {
    /// `T × 3Z²` flattened patches.
    pub patches: Tensor<T>,
    pub grid: PatchGrid,
    pub targets: Vec<GroundTruth>,
    pub labels: PatchLabels,
}

impl<T: Real> Sample<T> {
    pub fn cast<U: Real>(&self) -> Sample<U> {
        Sample {
            patches: self.patches.cast(),
            grid: self.grid,
            targets: self.targets.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Cuts an image into patches and converts its annotation into normalised
/// targets and patch labels.
pub fn prepare_sample<T: Real>(
    image: &Tensor<T>,
    ann: &SceneAnnotation,
    patch: usize,
) -> Result<Sample<T>> {
    let (_, h, w) = image.dims3()?;
    if (h, w) != (ann.height, ann.width) {
        return Err(Error::Annotation(format!(
            "image is {h}x{w} but its annotation says {}x{}",
            ann.height, ann.width
        )));
    }
    let (patches, grid) = extract_patches(image, patch)?;
    let labels = generate_patch_labels(&grid, &ann.boxes)?;
    let targets = ann
        .boxes
        .iter()
        .zip(&ann.class_ids)
        .map(|(b, &class)| GroundTruth {
            class,
            bbox: b.normalized(w, h),
        })
        .collect();
    Ok(Sample {
        patches,
        grid,
        targets,
        labels,
    })
}

pub struct ForwardOutput {
    pub logits: Var,
    pub boxes: Var,
    /// Foreground probabilities, `T × 1`.
    pub scores: Var,
    pub decision: PruneDecision,
}

/// Loss terms of one image inside a batch.
pub struct SampleLoss {
    /// Contribution to the batch objective.
    pub total: Var,
    pub hungarian: f64,
    pub patch: f64,
    pub matching: MatchResult,
}

/// Batch-level quantities shared by every image's loss.
#[derive(Clone, Copy, Debug)]
pub struct BatchContext {
    pub images: usize,
    pub patch_weight: f64,
    pub patches: usize,
    pub beta: f64,
}

impl Detector {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let options = config.block_options();
        let embed = PatchEmbed::new(&mut init, "embed", config.patch, config.dim);
        let pruner = Pruner::new(
            &mut init,
            "pruner",
            config.dim,
            config.state,
            config.pre_depth,
            config.main_depth,
            options,
        );
        let fpn = EfficientFpn::new(
            &mut init,
            "fpn",
            config.fpn_levels,
            config.dim,
            config.state,
            options,
        );
        let head = DetectionHead::new(&mut init, "head", config.head_config())?;
        Ok((
            Self {
                config: config.clone(),
                embed,
                pruner,
                fpn,
                head,
            },
            store,
        ))
    }

    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        sample: &Sample<T>,
    ) -> Result<ForwardOutput> {
        let tokens = self.embed.forward(g, p, &sample.patches, &sample.grid)?;
        let pruned = self.pruner.forward(g, p, tokens, self.config.prune_ratio)?;
        let levels = self.fpn.forward(g, p, pruned.tokens, &sample.grid)?;
        let out = self.head.forward(g, p, &levels)?;
        Ok(ForwardOutput {
            logits: out.logits,
            boxes: out.boxes,
            scores: pruned.scores,
            decision: pruned.decision,
        })
    }

    /// `L_Hungarian / B + β·(share of L_patch)` for one image of a batch.
    pub fn sample_loss<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        sample: &Sample<T>,
        batch: &BatchContext,
        weights: &LossWeights,
    ) -> Result<(SampleLoss, ForwardOutput)> {
        let out = self.forward(g, p, sample)?;
        let set = DetectionSet {
            class_logits: g.value(out.logits).clone(),
            boxes: g.value(out.boxes).clone(),
        };
        let matching = if sample.targets.is_empty() {
            MatchResult {
                assignment: Vec::new(),
                total_cost: 0.0,
            }
        } else {
            hungarian_match(&cost_matrix(&sample.targets, &set, weights)?)?
        };
        let hungarian = hungarian_loss_graph(
            g,
            out.logits,
            out.boxes,
            &sample.targets,
            &matching,
            weights,
        )?;
        let patch = weighted_bce_part(
            g,
            out.scores,
            &sample.labels,
            batch.patch_weight,
            batch.patches,
        )?;
        let h_value = g.scalar(hungarian).as_f64();
        let p_value = g.scalar(patch).as_f64();
        let h_scaled = g.scale(hungarian, T::lit(1.0 / batch.images as f64));
        let p_scaled = g.scale(patch, T::lit(batch.beta));
        let total = g.add(h_scaled, p_scaled)?;
        Ok((
            SampleLoss {
                total,
                hungarian: h_value,
                patch: p_value,
                matching,
            },
            out,
        ))
    }

    /// Inference on one image, returning detections and the pruning decision.
    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        sample: &Sample<T>,
    ) -> Result<(DetectionSet<T>, PruneDecision)> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let out = self.forward(&g, &p, sample)?;
        let set = DetectionSet {
            class_logits: g.value(out.logits).clone(),
            boxes: g.value(out.boxes).clone(),
        };
        Ok((set, out.decision))
    }
}

impl BatchContext {
    pub fn new<T: Real>(samples: &[&Sample<T>], beta: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let parts: Vec<PatchLabels> = samples.iter().map(|s| s.labels.clone()).collect();
        let labels = PatchLabels::concat(&parts);
        crate::pruner::check_bce_inputs(labels.len(), &labels)?;
        Ok(Self {
            images: samples.len(),
            patch_weight: crate::pruner::class_weight(&labels),
            patches: labels.len(),
            beta,
        })
    }
}
