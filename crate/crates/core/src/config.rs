//! Run configuration as flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::head::{HeadConfig, LossWeights};
use crate::layers::Activation;
use crate::ssm::{BlockOptions, ScanKernel, SsmMode};
use crate::synth::{SceneConfig, NUM_CLASSES};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub dim: usize,
    pub state: usize,
    pub pre_depth: usize,
    pub main_depth: usize,
    pub prune_ratio: f64,
    pub fpn_levels: usize,
    pub queries: usize,
    pub classes: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ssm_mode: SsmMode,
    pub scan_kernel: ScanKernel,
    pub activation: Activation,
    pub residual: bool,
    pub norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 256,
            image_width: 256,
            patch: 16,
            dim: 64,
            state: 16,
            pre_depth: 2,
            main_depth: 10,
            prune_ratio: 0.5,
            fpn_levels: 3,
            queries: 20,
            classes: NUM_CLASSES,
            decoder_layers: 2,
            heads: 4,
            ssm_mode: SsmMode::Selective,
            scan_kernel: ScanKernel::Sequential,
            activation: Activation::Gelu,
            residual: true,
            norm: true,
        }
    }
}

impl ModelConfig {
    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            mode: self.ssm_mode,
            activation: self.activation,
            residual: self.residual,
            norm: self.norm,
            kernel: self.scan_kernel,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            dim: self.dim,
            queries: self.queries,
            classes: self.classes,
            layers: self.decoder_layers,
            heads: self.heads,
            levels: self.fpn_levels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of 4",
                self.dim
            )));
        }
        if self.state == 0 {
            return Err(Error::Config("state size must be positive".into()));
        }
        if self.patch == 0 || self.patch > self.image_height.min(self.image_width) {
            return Err(Error::Config(format!(
                "patch {} does not fit a {}x{} image",
                self.patch, self.image_height, self.image_width
            )));
        }
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(Error::Config(format!(
                "prune_ratio {} outside [0, 1)",
                self.prune_ratio
            )));
        }
        if self.fpn_levels == 0 || self.queries == 0 || self.classes == 0 {
            return Err(Error::Config(
                "fpn_levels, queries and classes must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Optimiser and schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// `β` in `L_Hungarian + β·L_patch`.
    pub patch_loss_weight: f64,
    pub loss: LossWeights,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            steps: 300,
            batch_size: 8,
            warmup_steps: 0,
            grad_clip: 0.1,
            patch_loss_weight: 1.0,
            loss: LossWeights::default(),
            threads: 1,
        }
    }
}

/// Synthetic dataset sizes and scene parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            val_scenes: 50,
            scene: SceneConfig::default(),
        }
    }
}

/// Benchmark settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub state: usize,
    pub repetitions: usize,
    pub warmups: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: (10..=15).map(|e| 1usize << e).collect(),
            dim: 64,
            state: 16,
            repetitions: 5,
            warmups: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

fn mode_name(m: SsmMode) -> &'static str {
    match m {
        SsmMode::Selective => "selective",
        SsmMode::FixedDiagonal => "fixed-diagonal",
        SsmMode::FixedDense => "fixed-dense",
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Gelu => "gelu",
        Activation::Identity => "identity",
    }
}

/// Comma-separated list of positive integers.
pub fn parse_sizes(value: &str) -> Result<Vec<usize>> {
    let sizes = value
        .split(',')
        .map(|s| parse::<usize>("sizes", s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config(format!(
            "sizes {value:?} must be positive integers"
        )));
    }
    Ok(sizes)
}

impl RunConfig {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.model.image_height,
            width: self.model.image_width,
            ..self.data.scene.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.learning_rate >= 0.0 && t.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning_rate and weight_decay must be non-negative".into(),
            ));
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if t.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        if self.bench.repetitions < 5 || self.bench.warmups < 2 {
            return Err(Error::Config(
                "bench needs at least 5 repetitions and 2 warm-ups".into(),
            ));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "image_height" => m.image_height = parse(key, value)?,
            "image_width" => m.image_width = parse(key, value)?,
            "patch" => m.patch = parse(key, value)?,
            "dim" => m.dim = parse(key, value)?,
            "state" => m.state = parse(key, value)?,
            "pre_depth" => m.pre_depth = parse(key, value)?,
            "main_depth" => m.main_depth = parse(key, value)?,
            "prune_ratio" => m.prune_ratio = parse(key, value)?,
            "fpn_levels" => m.fpn_levels = parse(key, value)?,
            "queries" => m.queries = parse(key, value)?,
            "classes" => m.classes = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "ssm_mode" => {
                m.ssm_mode = match value {
                    "selective" => SsmMode::Selective,
                    "fixed-diagonal" => SsmMode::FixedDiagonal,
                    "fixed-dense" => SsmMode::FixedDense,
                    _ => return Err(Error::Config(format!("unknown ssm_mode {value:?}"))),
                }
            }
            "scan_kernel" => {
                m.scan_kernel = ScanKernel::parse(value)
                    .ok_or_else(|| Error::Config(format!("unknown scan_kernel {value:?}")))?
            }
            "activation" => {
                m.activation = match value {
                    "gelu" => Activation::Gelu,
                    "identity" => Activation::Identity,
                    _ => return Err(Error::Config(format!("unknown activation {value:?}"))),
                }
            }
            "residual" => m.residual = parse_bool(key, value)?,
            "norm" => m.norm = parse_bool(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "patch_loss_weight" => t.patch_loss_weight = parse(key, value)?,
            "l1_weight" => t.loss.l1 = parse(key, value)?,
            "giou_weight" => t.loss.giou = parse(key, value)?,
            "no_object_weight" => t.loss.no_object = parse(key, value)?,
            "threads" => t.threads = parse(key, value)?,
            "train_scenes" => d.train_scenes = parse(key, value)?,
            "val_scenes" => d.val_scenes = parse(key, value)?,
            "objects_min" => d.scene.object_count.0 = parse(key, value)?,
            "objects_max" => d.scene.object_count.1 = parse(key, value)?,
            "horizon_fraction" => d.scene.horizon_fraction = parse(key, value)?,
            "weight_small" => d.scene.size_weights[0] = parse(key, value)?,
            "weight_medium" => d.scene.size_weights[1] = parse(key, value)?,
            "weight_large" => d.scene.size_weights[2] = parse(key, value)?,
            "clutter" => d.scene.clutter = parse(key, value)?,
            "bench_sizes" => self.bench.sizes = parse_sizes(value)?,
            "bench_dim" => self.bench.dim = parse(key, value)?,
            "bench_state" => self.bench.state = parse(key, value)?,
            "bench_repetitions" => self.bench.repetitions = parse(key, value)?,
            "bench_warmups" => self.bench.warmups = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let (m, t, d, b) = (&self.model, &self.train, &self.data, &self.bench);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("image_height", m.image_height.to_string());
        kv("image_width", m.image_width.to_string());
        kv("patch", m.patch.to_string());
        kv("dim", m.dim.to_string());
        kv("state", m.state.to_string());
        kv("pre_depth", m.pre_depth.to_string());
        kv("main_depth", m.main_depth.to_string());
        kv("prune_ratio", m.prune_ratio.to_string());
        kv("fpn_levels", m.fpn_levels.to_string());
        kv("queries", m.queries.to_string());
        kv("classes", m.classes.to_string());
        kv("decoder_layers", m.decoder_layers.to_string());
        kv("heads", m.heads.to_string());
        kv("ssm_mode", mode_name(m.ssm_mode).into());
        kv("scan_kernel", m.scan_kernel.name().into());
        kv("activation", activation_name(m.activation).into());
        kv("residual", m.residual.to_string());
        kv("norm", m.norm.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("steps", t.steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("patch_loss_weight", t.patch_loss_weight.to_string());
        kv("l1_weight", t.loss.l1.to_string());
        kv("giou_weight", t.loss.giou.to_string());
        kv("no_object_weight", t.loss.no_object.to_string());
        kv("threads", t.threads.to_string());
        kv("train_scenes", d.train_scenes.to_string());
        kv("val_scenes", d.val_scenes.to_string());
        kv("objects_min", d.scene.object_count.0.to_string());
        kv("objects_max", d.scene.object_count.1.to_string());
        kv("horizon_fraction", d.scene.horizon_fraction.to_string());
        kv("weight_small", d.scene.size_weights[0].to_string());
        kv("weight_medium", d.scene.size_weights[1].to_string());
        kv("weight_large", d.scene.size_weights[2].to_string());
        kv("clutter", d.scene.clutter.to_string());
        kv(
            "bench_sizes",
            b.sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("bench_dim", b.dim.to_string());
        kv("bench_state", b.state.to_string());
        kv("bench_repetitions", b.repetitions.to_string());
        kv("bench_warmups", b.warmups.to_string());
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
