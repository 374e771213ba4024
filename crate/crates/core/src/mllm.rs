//! Connector MLP, visual-token prepending and a small causal language model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, ComposedEncoderConfig, FusionMode, TowerInput};
use crate::nn::{self, BlockShape};
use crate::params::{Binder, ParameterStore};
use crate::tensor::{CrossEntropy, Graph, Rng, Scalar, Tensor, Var, IGNORE_INDEX};
use crate::tokenizer::Tokenizer;
use crate::vit::Image;

pub const CONNECTOR: &str = "connector";
pub const LM: &str = "lm";

fn default_mlp_ratio() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
}

impl LMConfig {
    pub fn toy() -> Self {
        LMConfig {
            vocab_size: 64,
            dim: 64,
            depth: 4,
            heads: 4,
            max_seq_len: 64,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.depth == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("language model sizes must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "LM width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            dim: self.dim,
            heads: self.heads,
            mlp_hidden: ((self.dim as f64) * self.mlp_ratio).round() as usize,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConnectorConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

/// Vision tower, connector and language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tower: ComposedEncoderConfig,
    pub connector_hidden: usize,
    pub lm: LMConfig,
    /// Pass the class token(s) to the connector alongside patch tokens.
    #[serde(default)]
    pub keep_class_token: bool,
}

impl ModelConfig {
    pub fn toy(mode: FusionMode) -> Self {
        ModelConfig {
            tower: ComposedEncoderConfig::toy(mode),
            connector_hidden: 64,
            lm: LMConfig::toy(),
            keep_class_token: false,
        }
    }

    pub fn with_mode(&self, mode: FusionMode) -> Self {
        ModelConfig {
            tower: self.tower.with_mode(mode),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tower.validate()?;
        self.lm.validate()?;
        if self.connector_hidden == 0 {
            return Err(Error::Config("connector_hidden must be positive".into()));
        }
        if self.n_visual() >= self.lm.max_seq_len {
            return Err(Error::Config(format!(
                "max_seq_len {} leaves no room for text after {} visual tokens",
                self.lm.max_seq_len,
                self.n_visual()
            )));
        }
        Ok(())
    }

    pub fn connector(&self) -> ConnectorConfig {
        ConnectorConfig {
            in_dim: self.tower.output_dim(),
            hidden_dim: self.connector_hidden,
            out_dim: self.lm.dim,
        }
    }

    /// Tower output rows handed to the connector, per image.
    pub fn visual_rows(&self) -> Vec<usize> {
        let skip = if self.keep_class_token {
            Vec::new()
        } else {
            self.tower.class_token_rows()
        };
        (0..self.tower.output_tokens()).filter(|r| !skip.contains(r)).collect()
    }

    pub fn n_visual(&self) -> usize {
        self.visual_rows().len()
    }

    pub fn check_vocabulary(&self, tok: &Tokenizer) -> Result<()> {
        if tok.len() > self.lm.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} entries but the LM vocabulary holds {}",
                tok.len(),
                self.lm.vocab_size
            )));
        }
        Ok(())
    }
}

pub fn init_connector(cfg: ConnectorConfig, seed: u64) -> Result<ParameterStore> {
    let mut rng = Rng::derive(seed, CONNECTOR);
    let mut s = ParameterStore::new();
    s.insert("connector.fc1.weight", nn::fan_in_uniform(&mut rng, cfg.in_dim, cfg.hidden_dim), false)?;
    s.insert("connector.fc1.bias", Tensor::zeros([cfg.hidden_dim]), false)?;
    s.insert("connector.fc2.weight", nn::fan_in_uniform(&mut rng, cfg.hidden_dim, cfg.out_dim), false)?;
    s.insert("connector.fc2.bias", Tensor::zeros([cfg.out_dim]), false)?;
    Ok(s)
}

/// `gelu(x·W1 + b1)·W2 + b2`, row by row.
pub fn connector_forward<T: Scalar>(g: &mut Graph<T>, params: &mut Binder<'_, T>, x: Var) -> Result<Var> {
    let w1 = params.get(g, "connector.fc1.weight")?;
    let b1 = params.get(g, "connector.fc1.bias")?;
    let w2 = params.get(g, "connector.fc2.weight")?;
    let b2 = params.get(g, "connector.fc2.bias")?;
    let h = nn::linear(g, x, w1, Some(b1))?;
    let h = g.gelu(h)?;
    nn::linear(g, h, w2, Some(b2))
}

pub fn lm_block_prefix(index: usize) -> String {
    format!("{LM}.blocks.{index}")
}

/// Fresh language model. The output head starts at zero so every
/// prediction is initially uniform over the vocabulary.
pub fn init_lm(cfg: &LMConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = Rng::derive(seed, LM);
    let mut s = ParameterStore::new();
    let d = cfg.dim;
    s.insert("lm.tok_emb", rng.normal_tensor([cfg.vocab_size, d], 0.02), false)?;
    s.insert("lm.pos_emb", rng.normal_tensor([cfg.max_seq_len, d], 0.02), false)?;
    for i in 0..cfg.depth {
        nn::init_block(&mut s, &lm_block_prefix(i), cfg.block_shape(), &mut rng, false)?;
    }
    s.insert("lm.ln_f.gamma", Tensor::full([d], 1.0), false)?;
    s.insert("lm.ln_f.beta", Tensor::zeros([d]), false)?;
    s.insert("lm.head", Tensor::zeros([d, cfg.vocab_size]), false)?;
    Ok(s)
}

/// Seeds for the independently initialized parts of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitSeeds {
    pub encoders: u64,
    pub fusion: u64,
    pub connector: u64,
    pub lm: u64,
}

impl InitSeeds {
    pub fn all(seed: u64) -> Self {
        InitSeeds {
            encoders: seed,
            fusion: seed,
            connector: seed,
            lm: seed,
        }
    }
}

pub fn init_model(cfg: &ModelConfig, seeds: InitSeeds) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut s = fusion::init_encoders(&cfg.tower, seeds.encoders)?;
    s.extend(fusion::init_params(&cfg.tower, seeds.fusion)?)?;
    s.extend(init_connector(cfg.connector(), seeds.connector)?)?;
    s.extend(init_lm(&cfg.lm, seeds.lm)?)?;
    Ok(s)
}

/// Token layout and next-token labels of a batch of multimodal sequences.
///
/// Each sequence is `N_v` visual positions followed by its text, padded at
/// the end to the longest text. Text position `t` is trained to predict
/// text token `t + 1`, and the last text position predicts end-of-sequence.
/// Visual and padding positions carry [`IGNORE_INDEX`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultimodalBatch {
    pub batch: usize,
    pub n_visual: usize,
    pub text_len: usize,
    /// `batch × text_len`, padded.
    pub text_ids: Vec<usize>,
    /// `batch × (n_visual + text_len)`.
    pub label_ids: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl MultimodalBatch {
    pub fn new(n_visual: usize, texts: &[Vec<usize>], tok: &Tokenizer, max_seq_len: usize) -> Result<Self> {
        Self::build(n_visual, texts, tok, max_seq_len, true)
    }

    /// Like [`MultimodalBatch::new`] without end-of-sequence targets, for
    /// prompts whose continuation is being generated.
    pub fn prompt(n_visual: usize, texts: &[Vec<usize>], tok: &Tokenizer, max_seq_len: usize) -> Result<Self> {
        Self::build(n_visual, texts, tok, max_seq_len, false)
    }

    fn build(n_visual: usize, texts: &[Vec<usize>], tok: &Tokenizer, max_seq_len: usize, eos: bool) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let text_len = texts.iter().map(Vec::len).max().unwrap_or(0);
        if texts.iter().any(Vec::is_empty) {
            return Err(Error::Input("every sequence needs at least one text token".into()));
        }
        if n_visual + text_len > max_seq_len {
            return Err(Error::Length(format!(
                "sequence of {n_visual} visual + {text_len} text tokens exceeds max_seq_len {max_seq_len}"
            )));
        }
        let seq = n_visual + text_len;
        let mut text_ids = Vec::with_capacity(texts.len() * text_len);
        let mut label_ids = vec![IGNORE_INDEX; texts.len() * seq];
        for (s, text) in texts.iter().enumerate() {
            if let Some(&bad) = text.iter().find(|&&t| t >= tok.len()) {
                return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", tok.len())));
            }
            text_ids.extend_from_slice(text);
            text_ids.extend(std::iter::repeat_n(tok.pad(), text_len - text.len()));
            let labels = &mut label_ids[s * seq + n_visual..(s + 1) * seq];
            for t in 0..text.len() {
                labels[t] = match text.get(t + 1) {
                    Some(&next) => next,
                    None if eos => tok.eos(),
                    None => IGNORE_INDEX,
                };
            }
        }
        Ok(MultimodalBatch {
            batch: texts.len(),
            n_visual,
            text_len,
            text_ids,
            label_ids,
            lengths: texts.iter().map(Vec::len).collect(),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.n_visual + self.text_len
    }

    pub fn supervised(&self) -> usize {
        self.label_ids.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

/// Visual embeddings followed by token plus position embeddings,
/// `[batch·seq_len × dim]`. `visual` holds `batch·n_visual` rows.
pub fn assemble<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<'_, T>,
    visual: Option<Var>,
    mb: &MultimodalBatch,
) -> Result<Var> {
    let tok_emb = params.get(g, "lm.tok_emb")?;
    let pos_emb = params.get(g, "lm.pos_emb")?;
    let text = g.gather_rows(tok_emb, mb.text_ids.clone())?;
    let (b, nv, t) = (mb.batch, mb.n_visual, mb.text_len);
    let seq = match (visual, nv) {
        (_, 0) => text,
        (Some(v), _) => {
            let rows = g.value(v).shape()[0];
            if rows != b * nv {
                return Err(Error::Dimension(format!(
                    "assemble: {rows} visual rows for a batch of {b} × {nv}"
                )));
            }
            let stacked = g.concat_rows(&[v, text])?;
            let mut order = Vec::with_capacity(b * (nv + t));
            for s in 0..b {
                order.extend(s * nv..(s + 1) * nv);
                order.extend(b * nv + s * t..b * nv + (s + 1) * t);
            }
            g.gather_rows(stacked, order)?
        }
        (None, _) => return Err(Error::Input("batch expects visual tokens but none were given".into())),
    };
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..nv + t).collect();
    let pos = g.gather_rows(pos_emb, positions)?;
    g.add(seq, pos)
}

/// Next-token logits `[batch·seq_len × vocab]` of the causal LM.
pub fn lm_logits<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<'_, T>,
    cfg: &LMConfig,
    visual: Option<Var>,
    mb: &MultimodalBatch,
) -> Result<Var> {
    if mb.seq_len() > cfg.max_seq_len {
        return Err(Error::Length(format!(
            "sequence length {} exceeds max_seq_len {}",
            mb.seq_len(),
            cfg.max_seq_len
        )));
    }
    let mut h = assemble(g, params, visual, mb)?;
    for i in 0..cfg.depth {
        h = nn::block_forward(g, params, &lm_block_prefix(i), h, cfg.heads, mb.batch, true)?;
    }
    let gamma = params.get(g, "lm.ln_f.gamma")?;
    let beta = params.get(g, "lm.ln_f.beta")?;
    let h = g.layer_norm(h, gamma, beta, nn::LN_EPS)?;
    let head = params.get(g, "lm.head")?;
    g.matmul(h, head)
}

/// Mean next-token cross-entropy over supervised positions.
pub fn lm_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<'_, T>,
    cfg: &LMConfig,
    visual: Option<Var>,
    mb: &MultimodalBatch,
) -> Result<CrossEntropy> {
    let logits = lm_logits(g, params, cfg, visual, mb)?;
    g.cross_entropy_logits(logits, &mb.label_ids)
}

/// Connector inputs selected from a tower output of `batch` images.
pub fn select_visual<T: Scalar>(g: &mut Graph<T>, cfg: &ModelConfig, tower_out: Var, batch: usize) -> Result<Var> {
    let rows = cfg.visual_rows();
    let n_out = cfg.tower.output_tokens();
    if rows.len() == n_out {
        return Ok(tower_out);
    }
    let index = (0..batch).flat_map(|s| rows.iter().map(move |r| s * n_out + r)).collect();
    g.gather_rows(tower_out, index)
}

/// Tower, token selection and connector: `[batch·n_visual × lm_dim]`.
pub fn visual_embeds_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<'_, T>,
    cfg: &ModelConfig,
    input: &TowerInput<T>,
) -> Result<Var> {
    let trace = fusion::composed_encode_graph(g, params, &cfg.tower, input)?;
    let v = select_visual(g, cfg, trace.output, input.batch)?;
    connector_forward(g, params, v)
}

/// Inference-only visual embeddings of one image, `[n_visual × lm_dim]`.
pub fn visual_embeds(params: &ParameterStore, cfg: &ModelConfig, image: &Image) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::frozen(params);
    let input = TowerInput::from_images(&[image], &cfg.tower)?;
    let v = visual_embeds_graph(&mut g, &mut binder, cfg, &input)?;
    Ok(g.value(v).clone())
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Appends argmax tokens after `prompt` until end-of-sequence, `max_new`
/// tokens, or a full context. Only ids the tokenizer knows are candidates;
/// the end-of-sequence token is not returned.
pub fn greedy_decode(
    params: &ParameterStore,
    cfg: &ModelConfig,
    tok: &Tokenizer,
    visual: &Tensor<f32>,
    prompt: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    let n_visual = visual.shape()[0];
    let mut text = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && n_visual + text.len() < cfg.lm.max_seq_len {
        let mb = MultimodalBatch::prompt(n_visual, std::slice::from_ref(&text), tok, cfg.lm.max_seq_len)?;
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::frozen(params);
        let v = (n_visual > 0).then(|| g.constant(visual.clone()));
        let logits = lm_logits(&mut g, &mut binder, &cfg.lm, v, &mb)?;
        let row = g.value(logits).row(mb.seq_len() - 1);
        let next = argmax(&row[..tok.len().min(row.len())]);
        if next == tok.eos() {
            break;
        }
        text.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Next-token logits `[N_v + T, V]` for `prompt` about `image`.
pub fn prompt_logits(
    params: &ParameterStore,
    cfg: &ModelConfig,
    tok: &Tokenizer,
    image: &Image,
    prompt: &[usize],
) -> Result<Tensor<f32>> {
    let visual = visual_embeds(params, cfg, image)?;
    let mb = MultimodalBatch::prompt(visual.shape()[0], &[prompt.to_vec()], tok, cfg.lm.max_seq_len)?;
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::frozen(params);
    let v = g.constant(visual);
    let logits = lm_logits(&mut g, &mut binder, &cfg.lm, Some(v), &mb)?;
    Ok(g.value(logits).clone())
}

/// Greedy answer to `prompt` about `image`.
pub fn answer(
    params: &ParameterStore,
    cfg: &ModelConfig,
    tok: &Tokenizer,
    image: &Image,
    prompt: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    let visual = visual_embeds(params, cfg, image)?;
    greedy_decode(params, cfg, tok, &visual, prompt, max_new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck_many;

    fn tiny_lm() -> LMConfig {
        LMConfig {
            vocab_size: 28,
            dim: 16,
            depth: 2,
            heads: 2,
            max_seq_len: 24,
            mlp_ratio: 2.0,
        }
    }

    fn random_head(store: &mut ParameterStore, seed: u64) {
        let shape = store.get("lm.head").unwrap().shape().to_vec();
        *store.tensor_mut("lm.head").unwrap() = Rng::new(seed).normal_tensor(shape, 0.5);
    }

    #[test]
    fn connector_with_zero_weights_is_constant() {
        let cfg = ConnectorConfig {
            in_dim: 6,
            hidden_dim: 5,
            out_dim: 4,
        };
        let mut s = init_connector(cfg, 1).unwrap();
        *s.tensor_mut("connector.fc1.weight").unwrap() = Tensor::zeros([6, 5]);
        *s.tensor_mut("connector.fc2.weight").unwrap() = Tensor::zeros([5, 4]);
        *s.tensor_mut("connector.fc1.bias").unwrap() = Tensor::new([5], vec![0.5, -1.0, 2.0, 0.0, 1.0]).unwrap();
        *s.tensor_mut("connector.fc2.bias").unwrap() = Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let mut b = Binder::frozen(&s);
        let x = g.constant(Rng::new(2).normal_tensor([17, 6], 1.0));
        let y = connector_forward(&mut g, &mut b, x).unwrap();
        assert_eq!(g.value(y).shape(), [17, 4]);
        for r in 0..17 {
            assert_eq!(g.value(y).row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn connector_gradcheck() {
        let mut rng = Rng::new(5);
        let inputs: Vec<Tensor<f64>> = vec![
            rng.normal_tensor([5, 6], 1.0),
            rng.normal_tensor([6, 7], 0.5),
            rng.normal_tensor([7], 0.5),
            rng.normal_tensor([7, 4], 0.5),
            rng.normal_tensor([4], 0.5),
        ];
        let probe: Tensor<f64> = rng.normal_tensor([5, 4], 1.0);
        let store = ParameterStore::new();
        let err = gradcheck_many(
            |g, v| {
                let mut b = Binder::frozen(&store);
                for (name, &var) in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"].iter().zip(&v[1..]) {
                    b.bind(&format!("connector.{name}"), var);
                }
                let y = connector_forward(g, &mut b, v[0])?;
                let p = g.constant(probe.clone());
                let y = g.mul(y, p)?;
                g.sum(y)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn labels_shift_and_ignore() {
        let tok = Tokenizer::synthetic();
        let texts = vec![vec![1, 5, 6, 7, 8], vec![1, 9]];
        let mb = MultimodalBatch::new(17, &texts, &tok, 64).unwrap();
        assert_eq!(mb.seq_len(), 22);
        let first = &mb.label_ids[..22];
        assert!(first[..17].iter().all(|&l| l == IGNORE_INDEX));
        assert_eq!(&first[17..], &[5, 6, 7, 8, tok.eos()]);
        let second = &mb.label_ids[22..];
        assert_eq!(&second[17..19], &[9, tok.eos()]);
        assert!(second[19..].iter().all(|&l| l == IGNORE_INDEX));
        assert_eq!(mb.supervised(), 7);
        assert_eq!(&mb.text_ids[5..], &[1, 9, 0, 0, 0]);
    }

    #[test]
    fn sequence_overflow_is_length_error() {
        let tok = Tokenizer::synthetic();
        let err = MultimodalBatch::new(60, &[vec![1; 5]], &tok, 64).unwrap_err();
        assert!(matches!(err, Error::Length(_)));
    }

    #[test]
    fn text_only_batch() {
        let tok = Tokenizer::synthetic();
        let cfg = tiny_lm();
        let s = init_lm(&cfg, 1).unwrap();
        let mb = MultimodalBatch::new(0, &[vec![1, 3, 4]], &tok, cfg.max_seq_len).unwrap();
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(&s);
        let logits = lm_logits(&mut g, &mut b, &cfg, None, &mb).unwrap();
        assert_eq!(g.value(logits).shape(), [3, 28]);
    }

    #[test]
    fn zero_head_loss_is_log_vocab() {
        let tok = Tokenizer::synthetic();
        let cfg = LMConfig::toy();
        let s = init_lm(&cfg, 3).unwrap();
        for seed in 0..3 {
            let visual: Tensor<f32> = Rng::new(seed).normal_tensor([2 * 16, 64], 3.0);
            let texts = vec![vec![1, 5, 6, 7], vec![1, 8, 9, 10, 11, 12]];
            let mb = MultimodalBatch::new(16, &texts, &tok, cfg.max_seq_len).unwrap();
            let mut g = Graph::<f32>::new();
            let mut b = Binder::frozen(&s);
            let v = g.constant(visual);
            let ce = lm_loss(&mut g, &mut b, &cfg, Some(v), &mb).unwrap();
            let loss = g.value(ce.loss).item() as f64;
            assert!((loss - 64f64.ln()).abs() < 1e-5, "{loss}");
        }
    }

    #[test]
    fn visual_labels_do_not_matter() {
        let tok = Tokenizer::synthetic();
        let cfg = tiny_lm();
        let mut s = init_lm(&cfg, 3).unwrap();
        random_head(&mut s, 4);
        let mut mb = MultimodalBatch::new(4, &[vec![1, 5, 6]], &tok, cfg.max_seq_len).unwrap();
        let visual: Tensor<f32> = Rng::new(1).normal_tensor([4, 16], 1.0);
        let run = |mb: &MultimodalBatch| {
            let mut g = Graph::<f32>::new();
            let mut b = Binder::frozen(&s);
            let v = g.constant(visual.clone());
            let ce = lm_loss(&mut g, &mut b, &cfg, Some(v), mb).unwrap();
            g.value(ce.loss).item()
        };
        let base = run(&mb);
        assert!(base.is_finite() && base > 0.0);
        let before = mb.label_ids.clone();
        mb.label_ids[..4].copy_from_slice(&[IGNORE_INDEX; 4]);
        assert_eq!(before, mb.label_ids);
        mb.label_ids[..4].copy_from_slice(&[3, 4, 5, 6]);
        assert_ne!(run(&mb), base);
    }

    #[test]
    fn causal_logits() {
        let tok = Tokenizer::synthetic();
        let cfg = tiny_lm();
        let mut s = init_lm(&cfg, 7).unwrap();
        random_head(&mut s, 8);
        let visual: Tensor<f32> = Rng::new(9).normal_tensor([3, 16], 1.0);
        let logits = |text: Vec<usize>| {
            let mb = MultimodalBatch::new(3, &[text], &tok, cfg.max_seq_len).unwrap();
            let mut g = Graph::<f32>::new();
            let mut b = Binder::frozen(&s);
            let v = g.constant(visual.clone());
            let l = lm_logits(&mut g, &mut b, &cfg, Some(v), &mb).unwrap();
            g.value(l).clone()
        };
        let base = vec![1, 5, 6, 7, 8, 9];
        let a = logits(base.clone());
        for t in 1..base.len() {
            let mut changed = base.clone();
            changed[t] = 20;
            let b = logits(changed);
            for p in 0..3 + base.len() {
                let same = a.row(p) == b.row(p);
                assert_eq!(same, p < 3 + t, "position {p}, perturbed {t}");
            }
        }
    }

    #[test]
    fn greedy_decode_basics() {
        let tok = Tokenizer::synthetic();
        let mut cfg = ModelConfig::toy(FusionMode::AnchorOnly);
        cfg.lm = tiny_lm();
        let mut s = init_lm(&cfg.lm, 2).unwrap();
        random_head(&mut s, 3);
        let visual: Tensor<f32> = Rng::new(1).normal_tensor([2, 16], 1.0);
        assert!(greedy_decode(&s, &cfg, &tok, &visual, &[1], 0).unwrap().is_empty());
        let a = greedy_decode(&s, &cfg, &tok, &visual, &[1, 5], 4).unwrap();
        let b = greedy_decode(&s, &cfg, &tok, &visual, &[1, 5], 4).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 4);
    }

    #[test]
    fn zero_head_decodes_lowest_id() {
        let tok = Tokenizer::synthetic();
        let cfg = ModelConfig::toy(FusionMode::AnchorOnly);
        let s = init_lm(&cfg.lm, 2).unwrap();
        let visual = Tensor::zeros([16, 64]);
        assert_eq!(greedy_decode(&s, &cfg, &tok, &visual, &[1], 3).unwrap(), [0, 0, 0]);
    }

    #[test]
    fn visual_rows_per_mode() {
        let mut cfg = ModelConfig::toy(FusionMode::Ftz);
        assert_eq!(cfg.n_visual(), 16);
        cfg.keep_class_token = true;
        assert_eq!(cfg.n_visual(), 17);
        let cfg = ModelConfig::toy(FusionMode::InterleavedMof);
        assert_eq!(cfg.n_visual(), 32);
        assert!(!cfg.visual_rows().contains(&1));
    }

    #[test]
    fn full_model_embeds() {
        let cfg = ModelConfig::toy(FusionMode::Ftz);
        let s = init_model(&cfg, InitSeeds::all(1)).unwrap();
        let img = Image::filled(32, 32, [30, 60, 90]);
        let v = visual_embeds(&s, &cfg, &img).unwrap();
        assert_eq!(v.shape(), [16, 64]);
        assert!(v.is_finite());
    }
}
