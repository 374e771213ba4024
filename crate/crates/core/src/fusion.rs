//! Depth-aligned cross-attention fusion of two frozen encoders.
//!
//! The anchor encoder's stream is enriched at selected blocks: after anchor
//! block `i`, its tokens query the augmenting encoder's block-`j` tokens
//! (projected to the anchor width) through multi-head cross-attention and
//! the result is added back residually before block `i + 1`. Information
//! only flows from the augmenting encoder into the anchor.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Binder, ParameterStore};
use crate::tensor::{AttentionSpec, Graph, Rng, Scalar, Tensor, Var};
use crate::vit::{self, Image, ViTConfig};

pub const ANCHOR: &str = "anchor";
pub const AUGMENT: &str = "augment";
pub const FUSION: &str = "fusion";

/// An (anchor block, augmenting block) pair, both 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FusionPoint {
    pub anchor_layer: usize,
    pub augment_layer: usize,
}

impl fmt::Display for FusionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.anchor_layer, self.augment_layer)
    }
}

/// Selects `k` uniformly spaced anchor blocks and pairs each with the
/// augmenting block at the closest relative depth.
///
/// Anchor blocks are `round(k·L_anchor/K)` (half rounds up) for `k = 1..K`,
/// deduplicated. The partner of block `i` minimizes `|i/L_anchor − j/L_augment|`
/// over `j ∈ 1..=L_augment`, preferring the smaller `j` on ties. All
/// comparisons run in integer arithmetic.
pub fn map_layers(anchor_depth: usize, augment_depth: usize, k: usize) -> Result<Vec<FusionPoint>> {
    if anchor_depth == 0 || augment_depth == 0 {
        return Err(Error::Config("encoder depths must be at least 1".into()));
    }
    if k == 0 || k > anchor_depth {
        return Err(Error::Config(format!(
            "number of fusion points must be in 1..={anchor_depth}, got {k}"
        )));
    }
    let mut points: Vec<FusionPoint> = Vec::with_capacity(k);
    for step in 1..=k {
        let i = (2 * step * anchor_depth + k) / (2 * k);
        if points.last().is_some_and(|p| p.anchor_layer == i) {
            continue;
        }
        // |i/La − j/Lg| scaled by La·Lg.
        let dist = |j: usize| (i * augment_depth).abs_diff(j * anchor_depth);
        let j = (1..=augment_depth).min_by_key(|&j| (dist(j), j)).expect("depth ≥ 1");
        points.push(FusionPoint {
            anchor_layer: i,
            augment_layer: j,
        });
    }
    Ok(points)
}

/// Which vision tower feeds the connector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Anchor enriched by cross-attention fusion.
    Ftz,
    /// Anchor encoder alone.
    AnchorOnly,
    /// Final anchor and projected augment tokens, alternated position by
    /// position.
    InterleavedMof,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Ftz, FusionMode::AnchorOnly, FusionMode::InterleavedMof];

    pub fn label(self) -> &'static str {
        match self {
            FusionMode::Ftz => "ftz",
            FusionMode::AnchorOnly => "anchor_only",
            FusionMode::InterleavedMof => "interleaved_mof",
        }
    }

    pub fn uses_augment(self) -> bool {
        self != FusionMode::AnchorOnly
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ftz" | "fte" => Ok(FusionMode::Ftz),
            "anchor_only" => Ok(FusionMode::AnchorOnly),
            "interleaved_mof" => Ok(FusionMode::InterleavedMof),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

fn default_points() -> usize {
    4
}

fn default_fusion_heads() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposedEncoderConfig {
    pub anchor: ViTConfig,
    pub augment: ViTConfig,
    pub mode: FusionMode,
    /// Number of fusion points K (ftz only).
    #[serde(default = "default_points")]
    pub num_fusion_points: usize,
    #[serde(default = "default_fusion_heads")]
    pub fusion_heads: usize,
}

impl ComposedEncoderConfig {
    pub fn toy(mode: FusionMode) -> Self {
        ComposedEncoderConfig {
            anchor: ViTConfig::toy_anchor(),
            augment: ViTConfig::toy_augment(),
            mode,
            num_fusion_points: default_points(),
            fusion_heads: default_fusion_heads(),
        }
    }

    pub fn with_mode(&self, mode: FusionMode) -> Self {
        ComposedEncoderConfig { mode, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.anchor.validate()?;
        self.augment.validate()?;
        match self.mode {
            FusionMode::Ftz => {
                map_layers(self.anchor.depth, self.augment.depth, self.num_fusion_points)?;
                if self.fusion_heads == 0 || !self.anchor.dim.is_multiple_of(self.fusion_heads) {
                    return Err(Error::Config(format!(
                        "anchor width {} is not divisible by {} fusion heads",
                        self.anchor.dim, self.fusion_heads
                    )));
                }
            }
            FusionMode::InterleavedMof => {
                if self.anchor.num_tokens() != self.augment.num_tokens() {
                    return Err(Error::Config(format!(
                        "MoF baseline requires matching grids ({} vs {} tokens)",
                        self.anchor.num_tokens(),
                        self.augment.num_tokens()
                    )));
                }
            }
            FusionMode::AnchorOnly => {}
        }
        Ok(())
    }

    /// Fusion points in use; empty outside ftz mode.
    pub fn fusion_points(&self) -> Result<Vec<FusionPoint>> {
        match self.mode {
            FusionMode::Ftz => map_layers(self.anchor.depth, self.augment.depth, self.num_fusion_points),
            _ => Ok(Vec::new()),
        }
    }

    /// Tokens per image at the tower output.
    pub fn output_tokens(&self) -> usize {
        match self.mode {
            FusionMode::InterleavedMof => 2 * self.anchor.num_tokens(),
            _ => self.anchor.num_tokens(),
        }
    }

    /// Rows of the tower output that hold class tokens.
    pub fn class_token_rows(&self) -> Vec<usize> {
        match self.mode {
            FusionMode::InterleavedMof => vec![0, 1],
            _ => vec![0],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.anchor.dim
    }
}

/// Parameter names of the fusion module at one point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionModuleNames {
    pub w_proj: String,
    pub w_q: String,
    pub w_k: String,
    pub w_v: String,
    pub w_o: String,
}

impl FusionModuleNames {
    pub fn new(point: FusionPoint) -> Self {
        let p = format!("{FUSION}.{}", point.anchor_layer);
        FusionModuleNames {
            w_proj: format!("{p}.w_proj"),
            w_q: format!("{p}.w_q"),
            w_k: format!("{p}.w_k"),
            w_v: format!("{p}.w_v"),
            w_o: format!("{p}.w_o"),
        }
    }

    fn all(&self) -> [&str; 5] {
        [&self.w_proj, &self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }
}

pub const MOF_PROJ: &str = "fusion.mof.w_proj";

/// The trainable weights of one fusion point, bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct FusionModule {
    pub w_proj: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
}

impl FusionModule {
    pub fn bind<T: Scalar>(
        g: &mut Graph<T>,
        params: &mut Binder<'_, T>,
        point: FusionPoint,
        heads: usize,
    ) -> Result<Self> {
        let names = FusionModuleNames::new(point);
        if let Some(missing) = names.all().into_iter().find(|n| !params.store().contains(n)) {
            return Err(Error::Config(format!(
                "missing fusion module for point ({point}): no {missing:?}"
            )));
        }
        Ok(FusionModule {
            w_proj: params.get(g, &names.w_proj)?,
            w_q: params.get(g, &names.w_q)?,
            w_k: params.get(g, &names.w_k)?,
            w_v: params.get(g, &names.w_v)?,
            w_o: params.get(g, &names.w_o)?,
            heads,
        })
    }
}

/// Fresh trainable weights for the tower's mode: one module per fusion
/// point in ftz mode, the token projection in MoF mode, nothing otherwise.
///
/// Projections use fan-in uniform init; every `w_o` starts at zero so the
/// composed encoder initially reproduces the anchor exactly.
pub fn init_params(cfg: &ComposedEncoderConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = Rng::derive(seed, FUSION);
    let mut store = ParameterStore::new();
    let (da, dg) = (cfg.anchor.dim, cfg.augment.dim);
    match cfg.mode {
        FusionMode::Ftz => {
            for point in cfg.fusion_points()? {
                let n = FusionModuleNames::new(point);
                store.insert(n.w_proj, nn::fan_in_uniform(&mut rng, dg, da), false)?;
                store.insert(n.w_q, nn::fan_in_uniform(&mut rng, da, da), false)?;
                store.insert(n.w_k, nn::fan_in_uniform(&mut rng, da, da), false)?;
                store.insert(n.w_v, nn::fan_in_uniform(&mut rng, da, da), false)?;
                store.insert(n.w_o, Tensor::zeros([da, da]), false)?;
            }
        }
        FusionMode::InterleavedMof => {
            store.insert(MOF_PROJ, nn::fan_in_uniform(&mut rng, dg, da), false)?;
        }
        FusionMode::AnchorOnly => {}
    }
    Ok(store)
}

/// `H_aug · W_proj` (no bias).
pub fn project_augment<T: Scalar>(g: &mut Graph<T>, h_aug: Var, w_proj: Var) -> Result<Var> {
    g.matmul(h_aug, w_proj)
}

/// Multi-head cross-attention with anchor queries and projected-augment
/// keys/values, followed by the output projection.
pub fn mhca<T: Scalar>(
    g: &mut Graph<T>,
    h_anchor: Var,
    h_proj: Var,
    module: &FusionModule,
    batch: usize,
) -> Result<Var> {
    let q = g.matmul(h_anchor, module.w_q)?;
    let k = g.matmul(h_proj, module.w_k)?;
    let v = g.matmul(h_proj, module.w_v)?;
    let spec = AttentionSpec {
        heads: module.heads,
        batch,
        causal: false,
    };
    let attended = g.attention(q, k, v, spec)?;
    g.matmul(attended, module.w_o)
}

/// `H_anchor + H_cross`.
pub fn fuse_residual<T: Scalar>(g: &mut Graph<T>, h_anchor: Var, h_cross: Var) -> Result<Var> {
    g.add(h_anchor, h_cross)
}

/// Projection, cross-attention and residual at one fusion point.
pub fn fusion_block<T: Scalar>(
    g: &mut Graph<T>,
    module: &FusionModule,
    h_anchor: Var,
    h_aug: Var,
    batch: usize,
) -> Result<Var> {
    let h_proj = project_augment(g, h_aug, module.w_proj)?;
    let h_cross = mhca(g, h_anchor, h_proj, module, batch)?;
    fuse_residual(g, h_anchor, h_cross)
}

/// Alternates final anchor tokens and projected augment tokens: row `2t` of
/// each sample is anchor token `t`, row `2t + 1` the augment token `t`.
pub fn interleave_mof<T: Scalar>(
    g: &mut Graph<T>,
    anchor_final: Var,
    aug_final: Var,
    w_proj: Var,
    batch: usize,
) -> Result<Var> {
    let (ra, rg) = (g.value(anchor_final).shape()[0], g.value(aug_final).shape()[0]);
    if batch == 0 || ra % batch != 0 || ra != rg {
        return Err(Error::Config(format!(
            "MoF baseline requires matching grids ({ra} anchor rows vs {rg} augment rows)"
        )));
    }
    let n = ra / batch;
    let projected = g.matmul(aug_final, w_proj)?;
    let stacked = g.concat_rows(&[anchor_final, projected])?;
    let mut order = Vec::with_capacity(2 * ra);
    for s in 0..batch {
        for t in 0..n {
            order.push(s * n + t);
            order.push(ra + s * n + t);
        }
    }
    g.gather_rows(stacked, order)
}

/// Graph values produced by one composed forward pass.
#[derive(Clone, Debug)]
pub struct ComposedTrace {
    /// Tower output, `[batch·N_out × d_anchor]`.
    pub output: Var,
    /// Anchor stream after each block (and after fusion, where applied).
    pub anchor_layers: Vec<Var>,
    /// Augmenting encoder block outputs; empty in anchor-only mode.
    pub augment_layers: Vec<Var>,
}

/// Preprocessed patches for both encoders. The augment side is absent in
/// anchor-only mode.
pub struct TowerInput<T: Scalar> {
    pub anchor: Tensor<T>,
    pub augment: Option<Tensor<T>>,
    pub batch: usize,
}

impl<T: Scalar> TowerInput<T> {
    pub fn from_images(images: &[&Image], cfg: &ComposedEncoderConfig) -> Result<Self> {
        Ok(TowerInput {
            anchor: vit::batch_patches(images, &cfg.anchor)?,
            augment: if cfg.mode.uses_augment() {
                Some(vit::batch_patches(images, &cfg.augment)?)
            } else {
                None
            },
            batch: images.len(),
        })
    }
}

/// Runs the vision tower on the graph.
pub fn composed_encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<'_, T>,
    cfg: &ComposedEncoderConfig,
    input: &TowerInput<T>,
) -> Result<ComposedTrace> {
    cfg.validate()?;
    let batch = input.batch;
    let augment_layers = match (&input.augment, cfg.mode.uses_augment()) {
        (Some(p), true) => {
            let p = g.constant(p.clone());
            vit::encode_graph(g, params, AUGMENT, &cfg.augment, p, batch)?
        }
        (None, true) => {
            return Err(Error::Input(format!("{} mode needs augment-encoder input", cfg.mode)));
        }
        _ => Vec::new(),
    };

    let points = cfg.fusion_points()?;
    let modules = points
        .iter()
        .map(|&p| FusionModule::bind(g, params, p, cfg.fusion_heads).map(|m| (p, m)))
        .collect::<Result<Vec<_>>>()?;

    let patches = g.constant(input.anchor.clone());
    let mut h = vit::patch_embed(g, params, ANCHOR, &cfg.anchor, patches, batch)?;
    let mut anchor_layers = Vec::with_capacity(cfg.anchor.depth);
    for block in 0..cfg.anchor.depth {
        h = vit::block_forward(g, params, ANCHOR, &cfg.anchor, block, h, batch)?;
        if let Some((point, module)) = modules.iter().find(|(p, _)| p.anchor_layer == block + 1) {
            h = fusion_block(g, module, h, augment_layers[point.augment_layer - 1], batch)?;
        }
        anchor_layers.push(h);
    }

    let output = match cfg.mode {
        FusionMode::InterleavedMof => {
            let w = params.get(g, MOF_PROJ)?;
            interleave_mof(g, h, *augment_layers.last().expect("depth ≥ 1"), w, batch)?
        }
        _ => h,
    };
    Ok(ComposedTrace {
        output,
        anchor_layers,
        augment_layers,
    })
}

/// Inference-only tower output for a single image, `[N_out × d_anchor]`.
pub fn composed_encode(image: &Image, cfg: &ComposedEncoderConfig, params: &ParameterStore) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::frozen(params);
    let input = TowerInput::from_images(&[image], cfg)?;
    let trace = composed_encode_graph(&mut g, &mut binder, cfg, &input)?;
    Ok(g.value(trace.output).clone())
}

/// Every intermediate stream of [`composed_encode`], as tensors.
#[derive(Clone, Debug)]
pub struct ComposedActivations {
    pub output: Tensor<f32>,
    pub anchor_layers: Vec<Tensor<f32>>,
    pub augment_layers: Vec<Tensor<f32>>,
}

pub fn composed_activations(
    image: &Image,
    cfg: &ComposedEncoderConfig,
    params: &ParameterStore,
) -> Result<ComposedActivations> {
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::frozen(params);
    let input = TowerInput::from_images(&[image], cfg)?;
    let trace = composed_encode_graph(&mut g, &mut binder, cfg, &input)?;
    let grab = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
    Ok(ComposedActivations {
        output: g.value(trace.output).clone(),
        anchor_layers: grab(&trace.anchor_layers),
        augment_layers: grab(&trace.augment_layers),
    })
}

/// Frozen anchor and augment encoders drawn from `seed`.
pub fn init_encoders(cfg: &ComposedEncoderConfig, seed: u64) -> Result<ParameterStore> {
    let mut store = vit::init_params(ANCHOR, &cfg.anchor, seed, true)?;
    store.extend(vit::init_params(AUGMENT, &cfg.augment, seed, true)?)?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck_many;

    /// Exhaustive reference: scan every j with exact rational comparison.
    fn brute_force(la: usize, lg: usize, k: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for step in 1..=k {
            let exact = step as f64 * la as f64 / k as f64;
            // round half up on the exact rational step·la/k
            let i = if (2 * step * la).is_multiple_of(2 * k) {
                step * la / k
            } else {
                (exact + 0.5).floor() as usize
            };
            if out.last().is_some_and(|&(pi, _)| pi == i) {
                continue;
            }
            let mut best = (1usize, u128::MAX);
            for j in 1..=lg {
                let num = (i as i128 * lg as i128 - j as i128 * la as i128).unsigned_abs();
                if num < best.1 {
                    best = (j, num);
                }
            }
            out.push((i, best.0));
        }
        out
    }

    fn pairs(points: &[FusionPoint]) -> Vec<(usize, usize)> {
        points.iter().map(|p| (p.anchor_layer, p.augment_layer)).collect()
    }

    #[test]
    fn midpoint_of_twelve_maps_to_midpoint_of_six() {
        let pts = map_layers(12, 6, 4).unwrap();
        assert!(pts.contains(&FusionPoint {
            anchor_layer: 6,
            augment_layer: 3
        }));
        let pts = map_layers(12, 6, 2).unwrap();
        assert_eq!(pairs(&pts), [(6, 3), (12, 6)]);
    }

    #[test]
    fn equal_depths_map_identically() {
        let pts = map_layers(8, 8, 8).unwrap();
        assert_eq!(pairs(&pts), (1..=8).map(|k| (k, k)).collect::<Vec<_>>());
    }

    #[test]
    fn twelve_to_five_tie_goes_to_smaller_j() {
        assert_eq!(pairs(&map_layers(12, 5, 4).unwrap()), [(3, 1), (6, 2), (9, 4), (12, 5)]);
    }

    #[test]
    fn toy_defaults() {
        assert_eq!(pairs(&map_layers(8, 4, 4).unwrap()), [(2, 1), (4, 2), (6, 3), (8, 4)]);
    }

    #[test]
    fn invalid_k_rejected() {
        assert!(map_layers(4, 4, 0).is_err());
        assert!(map_layers(4, 4, 5).is_err());
        assert!(map_layers(0, 4, 1).is_err());
    }

    #[test]
    fn matches_brute_force_small_grid() {
        for la in 1..=10 {
            for lg in 1..=10 {
                for k in 1..=la {
                    assert_eq!(pairs(&map_layers(la, lg, k).unwrap()), brute_force(la, lg, k));
                }
            }
        }
    }

    fn tiny_cfg(mode: FusionMode) -> ComposedEncoderConfig {
        let anchor = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            depth: 3,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            norm_mean: [0.5; 3],
            norm_std: [0.25; 3],
        };
        let augment = ViTConfig {
            depth: 2,
            dim: 6,
            heads: 2,
            ..anchor.clone()
        };
        ComposedEncoderConfig {
            anchor,
            augment,
            mode,
            num_fusion_points: 2,
            fusion_heads: 2,
        }
    }

    fn noise_image(size: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        Image {
            width: size,
            height: size,
            pixels: (0..size * size * 3).map(|_| rng.below(256) as u8).collect(),
        }
    }

    fn full_params(cfg: &ComposedEncoderConfig, seed: u64) -> ParameterStore {
        let mut s = init_encoders(cfg, seed).unwrap();
        s.extend(init_params(cfg, seed + 1).unwrap()).unwrap();
        s
    }

    #[test]
    fn projection_cases() {
        let mut g = Graph::<f64>::new();
        let h: Tensor<f64> = Rng::new(1).normal_tensor([5, 4], 1.0);
        let hv = g.constant(h.clone());
        let eye = g.constant(Tensor::eye(4));
        let out = project_augment(&mut g, hv, eye).unwrap();
        assert_eq!(g.value(out), &h);

        let zero = g.constant(Tensor::zeros([4, 6]));
        let out = project_augment(&mut g, hv, zero).unwrap();
        assert_eq!(g.value(out), &Tensor::zeros([5, 6]));

        // Naive triple loop reference.
        let w: Tensor<f64> = Rng::new(2).normal_tensor([4, 6], 1.0);
        let wv = g.constant(w.clone());
        let out = project_augment(&mut g, hv, wv).unwrap();
        for r in 0..5 {
            for c in 0..6 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += h.data()[r * 4 + k] * w.data()[k * 6 + c];
                }
                assert!((g.value(out).data()[r * 6 + c] - acc).abs() < 1e-12);
            }
        }
    }

    fn random_module(g: &mut Graph<f64>, d: usize, d_aug: usize, heads: usize, seed: u64) -> FusionModule {
        let mut rng = Rng::new(seed);
        FusionModule {
            w_proj: g.constant(rng.normal_tensor([d_aug, d], 0.4)),
            w_q: g.constant(rng.normal_tensor([d, d], 0.4)),
            w_k: g.constant(rng.normal_tensor([d, d], 0.4)),
            w_v: g.constant(rng.normal_tensor([d, d], 0.4)),
            w_o: g.constant(rng.normal_tensor([d, d], 0.4)),
            heads,
        }
    }

    #[test]
    fn mhca_single_key_broadcasts_value() {
        let mut g = Graph::<f64>::new();
        let m = random_module(&mut g, 8, 8, 2, 3);
        let anchor = g.constant(Rng::new(4).normal_tensor([5, 8], 1.0));
        let kv = g.constant(Rng::new(5).normal_tensor([1, 8], 1.0));
        let out = mhca(&mut g, anchor, kv, &m, 1).unwrap();
        let v = g.matmul(kv, m.w_v).unwrap();
        let expected = g.matmul(v, m.w_o).unwrap();
        for r in 0..5 {
            for (a, b) in g.value(out).row(r).iter().zip(g.value(expected).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mhca_zero_output_projection_is_exactly_zero() {
        let mut g = Graph::<f64>::new();
        let mut m = random_module(&mut g, 8, 8, 4, 6);
        m.w_o = g.constant(Tensor::zeros([8, 8]));
        let anchor = g.constant(Rng::new(7).normal_tensor([5, 8], 1.0));
        let kv = g.constant(Rng::new(8).normal_tensor([3, 8], 1.0));
        let out = mhca(&mut g, anchor, kv, &m, 1).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mhca_invariant_to_key_permutation() {
        let mut g = Graph::<f64>::new();
        let m = random_module(&mut g, 8, 8, 2, 9);
        let anchor = g.constant(Rng::new(10).normal_tensor([4, 8], 1.0));
        let kv: Tensor<f64> = Rng::new(11).normal_tensor([6, 8], 1.0);
        let kv_var = g.constant(kv.clone());
        let out = mhca(&mut g, anchor, kv_var, &m, 1).unwrap();
        let mut perm: Vec<usize> = (0..6).collect();
        Rng::new(12).shuffle(&mut perm);
        let permuted = g.gather_rows(kv_var, perm).unwrap();
        let out2 = mhca(&mut g, anchor, permuted, &m, 1).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(out2)) < 1e-12);
    }

    #[test]
    fn mhca_rejects_indivisible_heads() {
        let mut g = Graph::<f64>::new();
        let m = random_module(&mut g, 8, 8, 3, 1);
        let a = g.constant(Tensor::zeros([2, 8]));
        assert!(matches!(mhca(&mut g, a, a, &m, 1), Err(Error::Config(_))));
    }

    #[test]
    fn residual_cases() {
        let mut g = Graph::<f64>::new();
        let a: Tensor<f64> = Rng::new(1).normal_tensor([3, 4], 1.0);
        let c: Tensor<f64> = Rng::new(2).normal_tensor([3, 4], 1.0);
        let (av, cv) = (g.constant(a.clone()), g.constant(c.clone()));
        let z = g.constant(Tensor::zeros([3, 4]));
        let out = fuse_residual(&mut g, av, z).unwrap();
        assert_eq!(g.value(out), &a);
        let out = fuse_residual(&mut g, z, cv).unwrap();
        assert_eq!(g.value(out), &c);
        let out = fuse_residual(&mut g, av, cv).unwrap();
        for i in 0..12 {
            assert_eq!(g.value(out).data()[i], a.data()[i] + c.data()[i]);
        }
        let bad = g.constant(Tensor::zeros([2, 4]));
        assert!(fuse_residual(&mut g, av, bad).is_err());
    }

    #[test]
    fn interleave_order_and_inverse() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_rows(&[vec![1., 1.], vec![2., 2.]]));
        let aug = g.constant(Tensor::from_rows(&[vec![10., 10., 10.], vec![20., 20., 20.]]));
        let mut w = Tensor::<f64>::zeros([3, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let w = g.constant(w);
        let out = interleave_mof(&mut g, a, aug, w, 1).unwrap();
        assert_eq!(g.value(out).data(), &[1., 1., 10., 10., 2., 2., 20., 20.]);

        let bad = g.constant(Tensor::zeros([3, 3]));
        let err = interleave_mof(&mut g, a, bad, w, 1).unwrap_err();
        assert!(err.to_string().contains("matching grids"));
    }

    #[test]
    fn zero_w_o_reproduces_anchor_only() {
        for k in [1, 2, 3] {
            let mut cfg = tiny_cfg(FusionMode::Ftz);
            cfg.num_fusion_points = k;
            let params = full_params(&cfg, 20 + k as u64);
            let img = noise_image(8, k as u64);
            let fused = composed_encode(&img, &cfg, &params).unwrap();
            let plain = composed_encode(&img, &cfg.with_mode(FusionMode::AnchorOnly), &params).unwrap();
            assert_eq!(fused.to_le_bytes(), plain.to_le_bytes());
        }
    }

    #[test]
    fn fusion_at_final_layer_only_changes_output() {
        let mut cfg = tiny_cfg(FusionMode::Ftz);
        cfg.num_fusion_points = 1;
        let mut params = full_params(&cfg, 3);
        let w_o = FusionModuleNames::new(cfg.fusion_points().unwrap()[0]).w_o;
        *params.tensor_mut(&w_o).unwrap() = Rng::new(1).normal_tensor([8, 8], 0.5);
        let img = noise_image(8, 9);
        let fused = composed_activations(&img, &cfg, &params).unwrap();
        let plain = composed_activations(&img, &cfg.with_mode(FusionMode::AnchorOnly), &params).unwrap();
        let last = cfg.anchor.depth - 1;
        for l in 0..last {
            assert_eq!(fused.anchor_layers[l], plain.anchor_layers[l]);
        }
        assert_ne!(fused.anchor_layers[last], plain.anchor_layers[last]);
    }

    #[test]
    fn augment_stream_is_untouched_by_fusion() {
        let cfg = tiny_cfg(FusionMode::Ftz);
        let mut params = full_params(&cfg, 4);
        for p in cfg.fusion_points().unwrap() {
            let n = FusionModuleNames::new(p).w_o;
            *params.tensor_mut(&n).unwrap() = Rng::new(2).normal_tensor([8, 8], 0.5);
        }
        let img = noise_image(8, 5);
        let fused = composed_activations(&img, &cfg, &params).unwrap();
        let alone = vit::encode(&img, &cfg.augment, AUGMENT, &params).unwrap();
        assert_eq!(fused.augment_layers, alone.per_layer);
    }

    #[test]
    fn missing_module_is_reported() {
        let cfg = tiny_cfg(FusionMode::Ftz);
        let params = init_encoders(&cfg, 1).unwrap();
        let err = composed_encode(&noise_image(8, 1), &cfg, &params).unwrap_err();
        assert!(err.to_string().contains("missing fusion module"), "{err}");
    }

    #[test]
    fn output_shapes_per_mode() {
        let cfg = ComposedEncoderConfig::toy(FusionMode::AnchorOnly);
        assert_eq!(cfg.output_tokens(), 17);
        let params = full_params(&cfg, 1);
        let out = composed_encode(&noise_image(32, 1), &cfg, &params).unwrap();
        assert_eq!(out.shape(), [17, 64]);

        let cfg = tiny_cfg(FusionMode::InterleavedMof);
        let params = full_params(&cfg, 1);
        let out = composed_encode(&noise_image(8, 1), &cfg, &params).unwrap();
        assert_eq!(out.shape(), [10, 8]);
        let plain = composed_encode(&noise_image(8, 1), &cfg.with_mode(FusionMode::AnchorOnly), &params).unwrap();
        for t in 0..5 {
            assert_eq!(out.row(2 * t), plain.row(t));
        }
    }

    #[test]
    fn fusion_block_gradcheck() {
        let (d, d_aug) = (8, 6);
        let mut rng = Rng::new(77);
        let inputs: Vec<Tensor<f64>> = vec![
            rng.normal_tensor([5, d], 1.0),
            rng.normal_tensor([4, d_aug], 1.0),
            rng.normal_tensor([d_aug, d], 0.4),
            rng.normal_tensor([d, d], 0.4),
            rng.normal_tensor([d, d], 0.4),
            rng.normal_tensor([d, d], 0.4),
            rng.normal_tensor([d, d], 0.4),
        ];
        let probe: Tensor<f64> = rng.normal_tensor([5, d], 1.0);
        let err = gradcheck_many(
            |g, v| {
                let m = FusionModule {
                    w_proj: v[2],
                    w_q: v[3],
                    w_k: v[4],
                    w_v: v[5],
                    w_o: v[6],
                    heads: 2,
                };
                let out = fusion_block(g, &m, v[0], v[1], 1)?;
                let p = g.constant(probe.clone());
                let y = g.mul(out, p)?;
                g.sum(y)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
