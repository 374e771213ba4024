//! ViT-style image encoder: per-encoder preprocessing, patch embedding with
//! a class token, and a stack of pre-norm transformer blocks whose outputs
//! are all kept for fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, BlockShape};
use crate::params::{Binder, ParameterStore};
use crate::tensor::{Graph, Rng, Scalar, Tensor, Var};

/// CLIP image-processor constants.
pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
/// ImageNet constants used by DINOv2.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// An 8-bit RGB raster stored height × width × channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Image {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> f64 {
    4.0
}

impl ViTConfig {
    /// CLIP-like anchor at toy scale.
    pub fn toy_anchor() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            depth: 8,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            norm_mean: CLIP_MEAN,
            norm_std: CLIP_STD,
        }
    }

    /// DINOv2-like augmenting encoder at toy scale: narrower and shallower
    /// than the anchor.
    pub fn toy_augment() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            depth: 4,
            dim: 48,
            heads: 4,
            mlp_ratio: 4.0,
            norm_mean: IMAGENET_MEAN,
            norm_std: IMAGENET_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.channels != 3 {
            return Err(Error::Config(format!("expected 3 channels, got {}", self.channels)));
        }
        if self.norm_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Class token plus one token per patch.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            dim: self.dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden(),
        }
    }
}

/// Output of every block, `per_layer[i]` being block `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderActivations {
    pub per_layer: Vec<Tensor<f32>>,
}

impl EncoderActivations {
    pub fn last(&self) -> &Tensor<f32> {
        self.per_layer.last().expect("encoder has at least one block")
    }
}

/// Scales bytes to [0, 1] and normalizes per channel. Returns `[3×S×S]`.
pub fn preprocess<T: Scalar>(image: &Image, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    if image.width != s || image.height != s || image.pixels.len() != s * s * 3 {
        return Err(Error::Input(format!(
            "image is {}×{} but the encoder expects {s}×{s}",
            image.width, image.height
        )));
    }
    let mut data = vec![T::zero(); 3 * s * s];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let v = image.pixels[(y * s + x) * 3 + c] as f64 / 255.0;
                data[(c * s + y) * s + x] = T::from_f64((v - cfg.norm_mean[c]) / cfg.norm_std[c]);
            }
        }
    }
    Tensor::new([3, s, s], data)
}

/// Cuts a `[3×S×S]` tensor into non-overlapping patches, one row per patch
/// in raster order, each flattened channel-major.
pub fn patchify<T: Scalar>(x: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    if x.shape() != [3, s, s] {
        return Err(Error::Dimension(format!(
            "patchify expects [3, {s}, {s}], got {:?}",
            x.shape()
        )));
    }
    let (p, grid) = (cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(x.numel());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..3 {
                for py in 0..p {
                    let row = (c * s + gy * p + py) * s + gx * p;
                    out.extend_from_slice(&x.data()[row..row + p]);
                }
            }
        }
    }
    Tensor::new([cfg.num_patches(), cfg.patch_dim()], out)
}

/// Preprocessed, patchified pixels for a batch, stacked row-wise.
pub fn batch_patches<T: Scalar>(images: &[&Image], cfg: &ViTConfig) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
    for img in images {
        data.extend(patchify(&preprocess::<T>(img, cfg)?, cfg)?.into_data());
    }
    Tensor::new([images.len() * cfg.num_patches(), cfg.patch_dim()], data)
}

/// Fresh encoder weights under `prefix`, drawn from `seed`.
pub fn init_params(prefix: &str, cfg: &ViTConfig, seed: u64, frozen: bool) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = Rng::derive(seed, prefix);
    let mut store = ParameterStore::new();
    let d = cfg.dim;
    store.insert(
        format!("{prefix}.patch.weight"),
        nn::fan_in_uniform(&mut rng, cfg.patch_dim(), d),
        frozen,
    )?;
    store.insert(format!("{prefix}.patch.bias"), Tensor::zeros([d]), frozen)?;
    store.insert(format!("{prefix}.cls"), rng.normal_tensor([1, d], 0.02), frozen)?;
    store.insert(format!("{prefix}.pos"), rng.normal_tensor([cfg.num_tokens(), d], 0.02), frozen)?;
    for i in 0..cfg.depth {
        nn::init_block(&mut store, &block_prefix(prefix, i), cfg.block_shape(), &mut rng, frozen)?;
    }
    Ok(store)
}

/// Parameter prefix of 0-based block `index`.
pub fn block_prefix(prefix: &str, index: usize) -> String {
    format!("{prefix}.blocks.{index}")
}

/// Linear patch projection, class token at index 0 of every sequence, and
/// learned positional embedding. `patches` is `[batch·P × patch_dim]`.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<'_, T>,
    prefix: &str,
    cfg: &ViTConfig,
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let np = cfg.num_patches();
    if g.value(patches).shape() != [batch * np, cfg.patch_dim()] {
        return Err(Error::Dimension(format!(
            "patch_embed expects [{}, {}], got {:?}",
            batch * np,
            cfg.patch_dim(),
            g.value(patches).shape()
        )));
    }
    let w = params.get(g, &format!("{prefix}.patch.weight"))?;
    let b = params.get(g, &format!("{prefix}.patch.bias"))?;
    let cls = params.get(g, &format!("{prefix}.cls"))?;
    let pos = params.get(g, &format!("{prefix}.pos"))?;
    let emb = nn::linear(g, patches, w, Some(b))?;
    let stacked = g.concat_rows(&[cls, emb])?;
    let n = np + 1;
    let mut order = Vec::with_capacity(batch * n);
    let mut pos_rows = Vec::with_capacity(batch * n);
    for s in 0..batch {
        order.push(0);
        order.extend((0..np).map(|p| 1 + s * np + p));
        pos_rows.extend(0..n);
    }
    let tokens = g.gather_rows(stacked, order)?;
    let pos = g.gather_rows(pos, pos_rows)?;
    g.add(tokens, pos)
}

/// One pre-norm block (0-based `index`) of the encoder under `prefix`.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<'_, T>,
    prefix: &str,
    cfg: &ViTConfig,
    index: usize,
    h: Var,
    batch: usize,
) -> Result<Var> {
    nn::block_forward(g, params, &block_prefix(prefix, index), h, cfg.heads, batch, false)
}

/// Runs the whole encoder on the graph, returning every block output.
pub fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<'_, T>,
    prefix: &str,
    cfg: &ViTConfig,
    patches: Var,
    batch: usize,
) -> Result<Vec<Var>> {
    let mut h = patch_embed(g, params, prefix, cfg, patches, batch)?;
    let mut layers = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        h = block_forward(g, params, prefix, cfg, i, h, batch)?;
        layers.push(h);
    }
    Ok(layers)
}

/// Inference-only encode of a single image.
pub fn encode(image: &Image, cfg: &ViTConfig, prefix: &str, params: &ParameterStore) -> Result<EncoderActivations> {
    cfg.validate()?;
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::frozen(params);
    let patches = batch_patches::<f32>(&[image], cfg)?;
    let patches = g.constant(patches);
    let layers = encode_graph(&mut g, &mut binder, prefix, cfg, patches, 1)?;
    Ok(EncoderActivations {
        per_layer: layers.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck_many;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
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

    #[test]
    fn preprocess_scalar_cases() {
        let mut cfg = tiny();
        cfg.norm_mean = [0.0; 3];
        cfg.norm_std = [1.0; 3];
        let t = preprocess::<f32>(&Image::filled(8, 8, [0, 0, 0]), &cfg).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));

        let t = preprocess::<f64>(&Image::filled(8, 8, [255, 255, 255]), &tiny()).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn preprocess_clip_golden() {
        let mut cfg = ViTConfig::toy_anchor();
        cfg.image_size = 2;
        cfg.patch_size = 1;
        let img = Image {
            width: 2,
            height: 2,
            pixels: vec![0, 128, 255, 10, 20, 30, 200, 100, 50, 1, 2, 3],
        };
        let t = preprocess::<f64>(&img, &cfg).unwrap();
        // Computed independently from the byte values and CLIP constants.
        let golden = [
            -1.79226253374815,
            -1.6462782675557206,
            1.127422790100434,
            -1.777664107128907,
            0.16889723903118556,
            -1.4519417582902563,
            -0.251320278792892,
            -1.7220815911771632,
            2.1458969890575763,
            -1.0536177972728435,
            -0.7692164829323617,
            -1.4375595716324936,
        ];
        assert_eq!(t.shape(), [3, 2, 2]);
        for (a, b) in t.data().iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn preprocess_rejects_wrong_size() {
        let r = preprocess::<f32>(&Image::filled(4, 4, [0; 3]), &tiny());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn token_count_formula() {
        for patch in [1, 2, 4, 8, 16, 32] {
            let cfg = ViTConfig {
                patch_size: patch,
                ..ViTConfig::toy_anchor()
            };
            cfg.validate().unwrap();
            assert_eq!(cfg.num_tokens(), 1 + (32 / patch) * (32 / patch));
        }
        assert_eq!(ViTConfig::toy_anchor().num_tokens(), 17);
        let bad = ViTConfig {
            patch_size: 5,
            ..ViTConfig::toy_anchor()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_image_patch_tokens_equal_bias() {
        let mut cfg = tiny();
        cfg.norm_mean = [0.0; 3];
        cfg.norm_std = [1.0; 3];
        let mut store = init_params("enc", &cfg, 1, true).unwrap();
        *store.tensor_mut("enc.pos").unwrap() = Tensor::zeros([cfg.num_tokens(), cfg.dim]);
        let bias: Tensor<f32> = Rng::new(9).normal_tensor([cfg.dim], 1.0);
        *store.tensor_mut("enc.patch.bias").unwrap() = bias.clone();
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(&store);
        let p = g.constant(batch_patches(&[&Image::filled(8, 8, [0; 3])], &cfg).unwrap());
        let h = patch_embed(&mut g, &mut b, "enc", &cfg, p, 1).unwrap();
        let out = g.value(h);
        for r in 1..cfg.num_tokens() {
            assert_eq!(out.row(r), bias.data());
        }
        assert_eq!(out.row(0), store.get("enc.cls").unwrap().data());
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let cfg = tiny();
        let mut store = init_params("enc", &cfg, 2, true).unwrap();
        for n in ["attn.wo", "attn.bo", "mlp.fc2.weight", "mlp.fc2.bias"] {
            let t = store.tensor_mut(&format!("enc.blocks.0.{n}")).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(&store);
        let h = g.constant(Rng::new(4).normal_tensor([2 * cfg.num_tokens(), cfg.dim], 1.0));
        let out = block_forward(&mut g, &mut b, "enc", &cfg, 0, h, 2).unwrap();
        assert_eq!(g.value(out), g.value(h));
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = ViTConfig {
            dim: 16,
            depth: 2,
            ..ViTConfig::toy_anchor()
        };
        let store = init_params("anchor", &cfg, 7, true).unwrap();
        let img = noise_image(32, 3);
        let a = encode(&img, &cfg, "anchor", &store).unwrap();
        let b = encode(&img, &cfg, "anchor", &store).unwrap();
        assert_eq!(a.per_layer.len(), 2);
        for t in &a.per_layer {
            assert_eq!(t.shape(), [17, 16]);
        }
        for (x, y) in a.per_layer.iter().zip(&b.per_layer) {
            assert_eq!(x.to_le_bytes(), y.to_le_bytes());
        }

        let one = ViTConfig { depth: 1, ..cfg };
        let store = init_params("anchor", &one, 7, true).unwrap();
        assert_eq!(encode(&img, &one, "anchor", &store).unwrap().per_layer.len(), 1);
    }

    #[test]
    fn missing_block_is_a_checkpoint_error() {
        let cfg = tiny();
        let store = init_params("enc", &cfg, 1, true).unwrap();
        let deeper = ViTConfig { depth: 3, ..cfg };
        let err = encode(&noise_image(8, 1), &deeper, "enc", &store).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn batched_encode_matches_single() {
        let cfg = tiny();
        let store = init_params("enc", &cfg, 5, true).unwrap();
        let imgs = [noise_image(8, 1), noise_image(8, 2)];
        let mut g = Graph::<f64>::new();
        let mut b = Binder::frozen(&store);
        let p = g.constant(batch_patches(&[&imgs[0], &imgs[1]], &cfg).unwrap());
        let layers = encode_graph(&mut g, &mut b, "enc", &cfg, p, 2).unwrap();
        let batched = g.value(*layers.last().unwrap()).clone();
        let n = cfg.num_tokens();
        for (i, img) in imgs.iter().enumerate() {
            let mut g1 = Graph::<f64>::new();
            let mut b1 = Binder::frozen(&store);
            let p1 = g1.constant(batch_patches(&[img], &cfg).unwrap());
            let l1 = encode_graph(&mut g1, &mut b1, "enc", &cfg, p1, 1).unwrap();
            let single = g1.value(*l1.last().unwrap());
            assert!(batched.slice_rows(i * n, (i + 1) * n).max_abs_diff(single) < 1e-12);
        }
    }

    #[test]
    fn patch_projection_gradcheck() {
        let cfg = tiny();
        let store = init_params("enc", &cfg, 3, true).unwrap();
        let patches = batch_patches::<f64>(&[&noise_image(8, 11)], &cfg).unwrap();
        let probe: Tensor<f64> = Rng::new(8).normal_tensor([cfg.num_tokens(), cfg.dim], 1.0);
        let inputs = [
            store.get("enc.patch.weight").unwrap().cast::<f64>(),
            store.get("enc.patch.bias").unwrap().cast::<f64>(),
        ];
        let err = gradcheck_many(
            |g, v| {
                let mut b = Binder::frozen(&store);
                b.bind("enc.patch.weight", v[0]);
                b.bind("enc.patch.bias", v[1]);
                let p = g.constant(patches.clone());
                let h = patch_embed(g, &mut b, "enc", &cfg, p, 1)?;
                let w = g.constant(probe.clone());
                let y = g.mul(h, w)?;
                g.sum(y)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn block_gradcheck() {
        let cfg = tiny();
        let store = init_params("enc", &cfg, 4, true).unwrap();
        let x: Tensor<f64> = Rng::new(12).normal_tensor([cfg.num_tokens(), cfg.dim], 1.0);
        let probe: Tensor<f64> = Rng::new(13).normal_tensor([cfg.num_tokens(), cfg.dim], 1.0);
        let names = ["attn.wq", "attn.wv", "mlp.fc1.weight", "ln1.gamma"];
        let mut inputs = vec![x];
        inputs.extend(names.iter().map(|n| store.get(&format!("enc.blocks.0.{n}")).unwrap().cast::<f64>()));
        let err = gradcheck_many(
            |g, v| {
                let mut b = Binder::frozen(&store);
                for (n, &var) in names.iter().zip(&v[1..]) {
                    b.bind(&format!("enc.blocks.0.{n}"), var);
                }
                let h = block_forward(g, &mut b, "enc", &cfg, 0, v[0], 1)?;
                let w = g.constant(probe.clone());
                let y = g.mul(h, w)?;
                g.sum(y)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
