//! Two-stage optimization with a strict trainable/frozen partition.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::fusion::TowerInput;
use crate::mllm::{self, ModelConfig, MultimodalBatch};
use crate::params::{Binder, ParameterStore};
use crate::tensor::{Graph, Rng, Tensor, Var};
use crate::tokenizer::Tokenizer;
use crate::vit::Image;

/// Parameter namespaces that may be trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Fusion,
    Connector,
    Lm,
}

impl Group {
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Fusion => "fusion",
            Group::Connector => "connector",
            Group::Lm => "lm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Namespace {
    Encoder,
    Trainable(Group),
}

pub fn namespace(name: &str) -> Result<Namespace> {
    match name.split('.').next().unwrap_or("") {
        "anchor" | "augment" => Ok(Namespace::Encoder),
        "fusion" => Ok(Namespace::Trainable(Group::Fusion)),
        "connector" => Ok(Namespace::Trainable(Group::Connector)),
        "lm" => Ok(Namespace::Trainable(Group::Lm)),
        _ => Err(Error::Config(format!("parameter {name:?} has an unknown namespace"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum Schedule {
    #[default]
    Constant,
    Cosine { warmup_fraction: f64 },
}


impl Schedule {
    /// Learning rate at 1-based `step` of `total`.
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine { warmup_fraction } => {
                let warmup = ((warmup_fraction * total as f64).ceil() as usize).min(total);
                if step <= warmup {
                    return base * step as f64 / warmup as f64;
                }
                let progress = (step - warmup - 1) as f64 / (total - warmup) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm clip; absent disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl StageConfig {
    pub fn stage1() -> Self {
        StageConfig {
            stage: 1,
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 300,
            schedule: Schedule::Constant,
            weight_decay: 0.0,
            clip_norm: default_clip(),
            checkpoint_every: 0,
        }
    }

    pub fn stage2() -> Self {
        StageConfig {
            stage: 2,
            learning_rate: 2e-5,
            batch_size: 8,
            steps: 100,
            ..StageConfig::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be non-negative".into()));
        }
        if let Schedule::Cosine { warmup_fraction } = self.schedule {
            if !(0.0..1.0).contains(&warmup_fraction) {
                return Err(Error::Config(format!("warmup_fraction {warmup_fraction} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn trainable_groups(&self) -> BTreeSet<Group> {
        match self.stage {
            1 => [Group::Fusion, Group::Connector].into(),
            _ => [Group::Fusion, Group::Connector, Group::Lm].into(),
        }
    }
}

/// Splits parameter names into (trainable, frozen) for `groups`. Encoder
/// weights and anything flagged frozen in the store are never trainable.
pub fn partition_parameters(
    params: &ParameterStore,
    groups: &BTreeSet<Group>,
) -> Result<(Vec<String>, Vec<String>)> {
    let (mut trainable, mut frozen) = (Vec::new(), Vec::new());
    for (name, p) in params.iter() {
        let train = match namespace(name)? {
            Namespace::Encoder => false,
            Namespace::Trainable(g) => groups.contains(&g) && !p.frozen,
        };
        if train {
            trainable.push(name.to_string());
        } else {
            frozen.push(name.to_string());
        }
    }
    Ok((trainable, frozen))
}

/// Adam moments with decoupled weight decay, held only for trainable
/// tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(params: &ParameterStore, trainable: &[String], weight_decay: f64) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for name in trainable {
            let n = params.get(name)?.numel();
            moments.insert(name.clone(), (vec![0.0; n], vec![0.0; n]));
        }
        Ok(AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments,
        })
    }

    pub fn trainable(&self) -> BTreeSet<String> {
        self.moments.keys().cloned().collect()
    }

    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One update. Tensors without a gradient are treated as having a
    /// zero gradient.
    pub fn update(&mut self, params: &mut ParameterStore, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, (m, v)) in self.moments.iter_mut() {
            let grad = grads.get(name).map(Tensor::data);
            let w = params.tensor_mut(name)?;
            for (i, p) in w.data_mut().iter_mut().enumerate() {
                let gi = grad.map_or(0.0, |g| g[i] as f64);
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = (mi / c1) / ((vi / c2).sqrt() + self.eps) + self.weight_decay * *p as f64;
                *p = (*p as f64 - lr * step) as f32;
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max: Option<f64>) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max {
        if norm > max {
            let s = (max / norm) as f32;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Forward, backward, clip and update for an arbitrary scalar loss built
/// by `loss_fn` over the store's parameters.
pub fn optimize_step<F>(
    params: &mut ParameterStore,
    opt: &mut AdamW,
    lr: f64,
    clip: Option<f64>,
    loss_fn: F,
) -> Result<StepStats>
where
    F: FnOnce(&mut Graph<f32>, &mut Binder<'_, f32>) -> Result<Var>,
{
    let trainable = opt.trainable();
    let (loss, mut grads) = {
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::training(params, &trainable);
        let loss = loss_fn(&mut g, &mut binder)?;
        let loss_value = g.value(loss).item() as f64;
        g.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, &var) in binder.bound() {
            if let (true, Some(grad)) = (trainable.contains(name), g.grad(var)) {
                grads.insert(name.clone(), grad.clone());
            }
        }
        (loss_value, grads)
    };
    let max_grad = grads
        .values()
        .flat_map(|t| t.data())
        .fold(0.0f64, |m, &x| m.max((x as f64).abs()));
    if !loss.is_finite() || !max_grad.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.step as usize + 1,
            max_grad,
        });
    }
    let grad_norm = clip_global_norm(&mut grads, clip);
    opt.update(params, &grads, lr)?;
    Ok(StepStats { loss, grad_norm })
}

/// A full model: configuration, weights and vocabulary.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParameterStore,
    pub tok: Tokenizer,
}

/// `<checkpoint>.config.toml`, the model configuration beside a checkpoint.
pub fn config_sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

/// `<checkpoint>.vocab.txt`, the tokenizer manifest beside a checkpoint.
pub fn vocab_sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".vocab.txt");
    PathBuf::from(s)
}

impl Model {
    /// Writes the checkpoint plus its configuration and vocabulary sidecars.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(&self.params, path)?;
        let cfg = config_sidecar(path);
        let text = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&cfg, text).map_err(|e| Error::io(&cfg, e))?;
        self.tok.save(&vocab_sidecar(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = checkpoint::load_checkpoint(path)?;
        let cfg_path = config_sidecar(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: ModelConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", cfg_path.display(), e.message())))?;
        cfg.validate()?;
        let tok = Tokenizer::load(&vocab_sidecar(path))?;
        cfg.check_vocabulary(&tok)?;
        Ok(Model { cfg, params, tok })
    }
}

/// Multimodal next-token loss on a batch of samples.
pub fn batch_loss(
    g: &mut Graph<f32>,
    binder: &mut Binder<'_, f32>,
    cfg: &ModelConfig,
    tok: &Tokenizer,
    samples: &[&SyntheticSample],
) -> Result<Var> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let input = TowerInput::from_images(&images, &cfg.tower)?;
    let visual = mllm::visual_embeds_graph(g, binder, cfg, &input)?;
    let texts: Vec<Vec<usize>> = samples.iter().map(|s| s.text(tok)).collect();
    let mb = MultimodalBatch::new(cfg.n_visual(), &texts, tok, cfg.lm.max_seq_len)?;
    Ok(mllm::lm_loss(g, binder, &cfg.lm, Some(visual), &mb)?.loss)
}

/// One multimodal optimizer step on `samples`.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    samples: &[&SyntheticSample],
    lr: f64,
    clip: Option<f64>,
) -> Result<StepStats> {
    let Model { cfg, params, tok } = model;
    optimize_step(params, opt, lr, clip, |g, b| batch_loss(g, b, cfg, tok, samples))
}

/// Endless stream of dataset indices: a fresh seeded permutation per epoch.
pub struct BatchOrder {
    seed: u64,
    n: usize,
    epoch: u64,
    queue: Vec<usize>,
}

impl BatchOrder {
    pub fn new(seed: u64, n: usize) -> Self {
        BatchOrder {
            seed,
            n,
            epoch: 0,
            queue: Vec::new(),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.queue.is_empty() {
                let mut perm: Vec<usize> = (0..self.n).collect();
                Rng::derive(self.seed, &format!("order/{}", self.epoch)).shuffle(&mut perm);
                perm.reverse();
                self.queue = perm;
                self.epoch += 1;
            }
            out.push(self.queue.pop().expect("refilled"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,stage,loss,lr";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.stage, r.loss, r.lr));
    }
    s
}

/// Mean of the last `window` losses.
pub fn smoothed_tail(rows: &[MetricRow], window: usize) -> Option<f64> {
    let tail = &rows[rows.len().saturating_sub(window)..];
    (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
}

#[derive(Clone, Debug)]
pub struct StageLog {
    pub rows: Vec<MetricRow>,
    pub final_checkpoint: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ftz";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains the stage's groups on `dataset`. When `out` is given, writes
/// `metrics.csv`, periodic `checkpoint-step<N>.ftz` files and the final
/// `checkpoint.ftz` there.
pub fn run_stage(
    model: &mut Model,
    stage: &StageConfig,
    seed: u64,
    dataset: &[SyntheticSample],
    out: Option<&Path>,
) -> Result<StageLog> {
    stage.validate()?;
    if dataset.len() < stage.batch_size {
        return Err(Error::Input(format!(
            "dataset of {} samples is smaller than batch size {}",
            dataset.len(),
            stage.batch_size
        )));
    }
    let (trainable, _) = partition_parameters(&model.params, &stage.trainable_groups())?;
    let mut opt = AdamW::new(&model.params, &trainable, stage.weight_decay)?;
    let mut order = BatchOrder::new(Rng::derive(seed, &format!("stage{}", stage.stage)).next_u64(), dataset.len());
    let mut rows = Vec::with_capacity(stage.steps);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for step in 1..=stage.steps {
        let lr = stage.schedule.lr(stage.learning_rate, step, stage.steps);
        let batch: Vec<&SyntheticSample> = order.next_batch(stage.batch_size).into_iter().map(|i| &dataset[i]).collect();
        let stats = train_step(model, &mut opt, &batch, lr, stage.clip_norm)?;
        rows.push(MetricRow {
            step,
            stage: stage.stage,
            loss: stats.loss,
            lr,
        });
        if let (Some(dir), true) = (out, stage.checkpoint_every > 0 && step % stage.checkpoint_every == 0) {
            model.save(&dir.join(format!("checkpoint-step{step}.ftz")))?;
        }
    }
    let final_checkpoint = match out {
        Some(dir) => {
            let path = dir.join(CHECKPOINT_FILE);
            model.save(&path)?;
            let metrics = dir.join(METRICS_FILE);
            let mut f = std::fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
            f.write_all(metrics_csv(&rows).as_bytes()).map_err(|e| Error::io(&metrics, e))?;
            Some(path)
        }
        None => None,
    };
    Ok(StageLog { rows, final_checkpoint })
}

fn default_prefix_min() -> usize {
    16
}

fn default_prefix_max() -> usize {
    32
}

/// Settings of the warm-up that stands in for a pretrained LM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmPretrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Range of context-prefix lengths drawn per batch.
    #[serde(default = "default_prefix_min")]
    pub prefix_min: usize,
    #[serde(default = "default_prefix_max")]
    pub prefix_max: usize,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig {
            seed: 0,
            steps: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            prefix_min: default_prefix_min(),
            prefix_max: default_prefix_max(),
        }
    }
}

/// Token-id pairs of a symbolic scene context: one slot per shape holding
/// (color, kind) at a random position, every other slot (pad, pad).
pub fn scene_context(sample: &SyntheticSample, tok: &Tokenizer, len: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if sample.meta.len() > len {
        return Err(Error::Length(format!(
            "{} shapes do not fit a context of {len} slots",
            sample.meta.len()
        )));
    }
    let mut slots = vec![(tok.pad(), tok.pad()); len];
    let mut pos: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut pos);
    for (shape, &p) in sample.meta.iter().zip(&pos) {
        slots[p] = (tok.id(crate::tokenizer::COLORS[shape.color])?, tok.id(shape.kind.word())?);
    }
    Ok(slots)
}

/// Trains only `lm.*` to answer from a symbolic context prefix: each
/// shape of the scene appears as the sum of its color and kind token
/// embeddings at a random prefix slot. The prefix length is drawn per
/// batch, so the model reads context anywhere the visual tokens may later
/// sit. Returns per-step losses.
pub fn pretrain_lm(
    params: &mut ParameterStore,
    cfg: &ModelConfig,
    tok: &Tokenizer,
    samples: &[SyntheticSample],
    pc: &LmPretrainConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to pretrain on".into()));
    }
    if pc.prefix_min > pc.prefix_max {
        return Err(Error::Config(format!(
            "prefix_min {} exceeds prefix_max {}",
            pc.prefix_min, pc.prefix_max
        )));
    }
    let (trainable, _) = partition_parameters(params, &[Group::Lm].into())?;
    let mut opt = AdamW::new(params, &trainable, 0.0)?;
    let mut order = BatchOrder::new(pc.seed, samples.len());
    let mut rng = Rng::derive(pc.seed, "lm-pretrain");
    let mut losses = Vec::with_capacity(pc.steps);
    for _ in 0..pc.steps {
        let batch: Vec<&SyntheticSample> = order.next_batch(pc.batch_size).into_iter().map(|i| &samples[i]).collect();
        let prefix = pc.prefix_min + rng.below(pc.prefix_max - pc.prefix_min + 1);
        let mut first = Vec::with_capacity(batch.len() * prefix);
        let mut second = Vec::with_capacity(batch.len() * prefix);
        for s in &batch {
            for (a, b) in scene_context(s, tok, prefix, &mut rng)? {
                first.push(a);
                second.push(b);
            }
        }
        let texts: Vec<Vec<usize>> = batch.iter().map(|s| s.text(tok)).collect();
        let mb = MultimodalBatch::new(prefix, &texts, tok, cfg.lm.max_seq_len)?;
        let stats = optimize_step(params, &mut opt, pc.learning_rate, Some(1.0), |g, b| {
            let context = if prefix > 0 {
                let emb = b.get(g, "lm.tok_emb")?;
                let x = g.gather_rows(emb, first)?;
                let y = g.gather_rows(emb, second)?;
                Some(g.add(x, y)?)
            } else {
                None
            };
            Ok(mllm::lm_loss(g, b, &cfg.lm, context, &mb)?.loss)
        })?;
        losses.push(stats.loss);
    }
    Ok(losses)
}
