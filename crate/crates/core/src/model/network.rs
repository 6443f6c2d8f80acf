//! Toy promptable segmentation network: patch transformer encoder, Fourier prompt encoder and
//! a two-way attention mask decoder with a 4x upsampling head.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, SKIP_CHANNELS, UPSCALE};
use super::layers::{layer_norm, linear, multi_head};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid, Label, MaskLogits, PromptSet};

pub const ENCODER_PREFIX: &str = "image_encoder.";
pub const PROMPT_ENCODER_PREFIX: &str = "prompt_encoder.";
pub const DECODER_PREFIX: &str = "mask_decoder.";

/// Output of the image encoder plus the fixed intensity channels the mask head reads.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    /// `(grid_h * grid_w, embed_dim)` tokens in row-major grid order.
    tokens: Tensor,
    skip: Tensor,
    grid: (usize, usize),
    image_shape: (usize, usize),
    encoder_tag: String,
}

impl ImageEmbedding {
    /// `(grid_h, grid_w, embed_dim)`.
    pub fn shape(&self) -> Result<(usize, usize, usize)> {
        Ok((self.grid.0, self.grid.1, self.tokens.dim(1)?))
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.image_shape
    }

    pub fn encoder_tag(&self) -> &str {
        &self.encoder_tag
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self
            .tokens
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }

    /// Cuts the autodiff graph back to the encoder.
    pub fn detach(&self) -> Self {
        Self {
            tokens: self.tokens.detach(),
            ..self.clone()
        }
    }
}

/// One token per point, two per box, in the order points then box corners.
#[derive(Debug, Clone)]
pub struct PromptEmbeddings {
    tokens: Tensor,
    image_shape: (usize, usize),
}

impl PromptEmbeddings {
    pub fn len(&self) -> usize {
        self.tokens.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec2(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.tokens.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub image_encoder: usize,
    pub prompt_encoder: usize,
    pub mask_decoder: usize,
    pub total: usize,
}

pub struct PromptSegModel {
    config: ModelConfig,
    params: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
    seed: u64,
}

impl std::fmt::Debug for PromptSegModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromptSegModel")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

fn is_residual_output(name: &str) -> bool {
    name.starts_with(ENCODER_PREFIX)
        && (name.ends_with("attn.proj.weight") || name.ends_with("mlp.fc2.weight"))
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 {
                break v * std;
            }
        })
        .collect()
}

impl PromptSegModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_dtype(config, seed, DType::F32)
    }

    /// Seeded initialization. Encoder residual branches start at zero so every block is the
    /// identity; projections use truncated normals scaled by fan-in and embeddings unit scale.
    pub fn init_with_dtype(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.contains("norm") {
                vec![1.0; n]
            } else if is_residual_output(&name) {
                vec![0.0; n]
            } else if shape.len() == 2 && shape[0] > 1 {
                truncated_normal(&mut rng, (1.0 / shape[0] as f64).sqrt(), n)
            } else {
                truncated_normal(&mut rng, 1.0, n)
            };
            let tensor = Tensor::from_vec(values, shape.as_slice(), &device)?.to_dtype(dtype)?;
            params.insert(name, Var::from_tensor(&tensor)?);
        }
        Ok(Self {
            config,
            params,
            device,
            dtype,
            seed,
        })
    }

    /// Builds a model from named tensors, checking names and shapes against the config.
    pub fn from_tensors(
        config: ModelConfig,
        seed: u64,
        mut tensors: HashMap<String, Tensor>,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.dims()
                )));
            }
            params.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config,
            params,
            device: Device::Cpu,
            dtype,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Deep copy with independent parameter storage.
    pub fn duplicate(&self) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, var) in &self.params {
            params.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(Self {
            config: self.config.clone(),
            params,
            device: self.device.clone(),
            dtype: self.dtype,
            seed: self.seed,
        })
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not declared by config"))
            .as_tensor()
    }

    fn lin(&self, x: &Tensor, prefix: &str) -> candle_core::Result<Tensor> {
        linear(
            x,
            self.p(&format!("{prefix}.weight")),
            self.p(&format!("{prefix}.bias")),
        )
    }

    fn norm(&self, x: &Tensor, prefix: &str) -> candle_core::Result<Tensor> {
        layer_norm(
            x,
            self.p(&format!("{prefix}.weight")),
            self.p(&format!("{prefix}.bias")),
        )
    }

    /// Vars the optimizer should update. With `include_encoder` false the encoder is frozen.
    pub fn trainable_vars(&self, include_encoder: bool) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(name, _)| include_encoder || !name.starts_with(ENCODER_PREFIX))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn encoder_vars(&self) -> Vec<(&str, &Var)> {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with(ENCODER_PREFIX))
            .map(|(n, v)| (n.as_str(), v))
            .collect()
    }

    pub fn parameter_partition(&self) -> ParameterPartition {
        let mut part = ParameterPartition {
            image_encoder: 0,
            prompt_encoder: 0,
            mask_decoder: 0,
            total: 0,
        };
        for (name, var) in &self.params {
            let n = var.elem_count();
            if name.starts_with(ENCODER_PREFIX) {
                part.image_encoder += n;
            } else if name.starts_with(PROMPT_ENCODER_PREFIX) {
                part.prompt_encoder += n;
            } else {
                part.mask_decoder += n;
            }
            part.total += n;
        }
        part
    }

    fn digest<'a>(params: impl Iterator<Item = (&'a String, &'a Var)>) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in params {
            hasher.update(name.as_bytes());
            let values = var
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// SHA-256 over the encoder parameters.
    pub fn encoder_checksum(&self) -> Result<String> {
        Self::digest(
            self.params
                .iter()
                .filter(|(n, _)| n.starts_with(ENCODER_PREFIX)),
        )
    }

    /// SHA-256 over all parameters.
    pub fn checksum(&self) -> Result<String> {
        Self::digest(self.params.iter())
    }

    fn check_image(&self, image: &ImageGrid) -> Result<()> {
        let p = self.config.patch_size;
        if !image.height().is_multiple_of(p) {
            return Err(Error::Ingest {
                dimension: "height",
                value: image.height(),
                patch: p,
            });
        }
        if !image.width().is_multiple_of(p) {
            return Err(Error::Ingest {
                dimension: "width",
                value: image.width(),
                patch: p,
            });
        }
        Ok(())
    }

    pub fn encode_image(&self, image: &ImageGrid) -> Result<ImageEmbedding> {
        self.check_image(image)?;
        let p = self.config.patch_size;
        let e = self.config.embed_dim;
        let (h, w) = (image.height() / p, image.width() / p);
        let pixels: Vec<f64> = image.data().iter().map(|&v| v as f64 - 0.5).collect();
        let img = Tensor::from_vec(pixels, (image.height(), image.width()), &self.device)?
            .to_dtype(self.dtype)?;
        let patches = img
            .reshape((h, p, w, p))?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((h * w, p * p))?;
        let pos = sincos_position(h, w, e, &self.device)?.to_dtype(self.dtype)?;
        let mut x = (self.lin(&patches, "image_encoder.patch_embed")? + pos)?;
        let heads = self.config.encoder_heads;
        for i in 0..self.config.encoder_depth {
            let b = format!("image_encoder.blocks.{i}");
            let y = self.norm(&x, &format!("{b}.norm1"))?;
            let qkv = self.lin(&y, &format!("{b}.attn.qkv"))?;
            let q = qkv.narrow(1, 0, e)?;
            let k = qkv.narrow(1, e, e)?;
            let v = qkv.narrow(1, 2 * e, e)?;
            let attn = multi_head(&q, &k, &v, heads)?;
            x = (x + self.lin(&attn, &format!("{b}.attn.proj"))?)?;
            let y = self.norm(&x, &format!("{b}.norm2"))?;
            let hidden = self.lin(&y, &format!("{b}.mlp.fc1"))?.gelu()?;
            x = (x + self.lin(&hidden, &format!("{b}.mlp.fc2"))?)?;
        }
        let tokens = self.norm(&x, "image_encoder.neck")?;
        let skip = skip_features(image, p / UPSCALE, &self.device)?.to_dtype(self.dtype)?;
        Ok(ImageEmbedding {
            tokens,
            skip,
            grid: (h, w),
            image_shape: image.shape(),
            encoder_tag: format!("e{}d{}", e, self.config.encoder_depth),
        })
    }

    /// Random Fourier features of normalized `(x, y)` coordinates in `[0, 1]`.
    fn fourier(&self, coords: &[(f64, f64)]) -> candle_core::Result<Tensor> {
        let flat: Vec<f64> = coords
            .iter()
            .flat_map(|&(x, y)| [2.0 * x - 1.0, 2.0 * y - 1.0])
            .collect();
        let c = Tensor::from_vec(flat, (coords.len(), 2), &self.device)?.to_dtype(self.dtype)?;
        let proj = (c.matmul(self.p("prompt_encoder.pe_gaussian"))? * (2.0 * PI))?;
        Tensor::cat(&[proj.sin()?, proj.cos()?], 1)
    }

    fn dense_positional(&self, grid: (usize, usize)) -> candle_core::Result<Tensor> {
        let (h, w) = grid;
        let coords: Vec<(f64, f64)> = (0..h)
            .flat_map(|i| (0..w).map(move |j| ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)))
            .collect();
        self.fourier(&coords)
    }

    pub fn encode_prompts(
        &self,
        prompts: &PromptSet,
        image_shape: (usize, usize),
    ) -> Result<PromptEmbeddings> {
        let (height, width) = image_shape;
        prompts.validate(height, width)?;
        let (hf, wf) = (height as f64, width as f64);
        let mut coords = Vec::with_capacity(prompts.token_count());
        let mut kinds = Vec::with_capacity(prompts.token_count());
        for pt in &prompts.points {
            coords.push(((pt.x as f64 + 0.5) / wf, (pt.y as f64 + 0.5) / hf));
            kinds.push(match pt.label {
                Label::Positive => "prompt_encoder.point_embed.positive",
                Label::Negative => "prompt_encoder.point_embed.negative",
            });
        }
        if let Some(b) = &prompts.bbox {
            coords.push((b.x0 as f64 / wf, b.y0 as f64 / hf));
            kinds.push("prompt_encoder.box_corner.0");
            coords.push((b.x1 as f64 / wf, b.y1 as f64 / hf));
            kinds.push("prompt_encoder.box_corner.1");
        }
        let pe = self.fourier(&coords)?;
        let labels = Tensor::cat(&kinds.iter().map(|k| self.p(k)).collect::<Vec<_>>(), 0)?;
        Ok(PromptEmbeddings {
            tokens: (pe + labels)?,
            image_shape,
        })
    }

    fn attention(
        &self,
        prefix: &str,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
    ) -> candle_core::Result<Tensor> {
        let q = self.lin(q, &format!("{prefix}.q"))?;
        let k = self.lin(k, &format!("{prefix}.k"))?;
        let v = self.lin(v, &format!("{prefix}.v"))?;
        let out = multi_head(&q, &k, &v, self.config.decoder_heads)?;
        self.lin(&out, &format!("{prefix}.out"))
    }

    /// Full-resolution mask logits as an `(H, W)` tensor attached to the autodiff graph.
    pub fn decode_mask_tensor(
        &self,
        embedding: &ImageEmbedding,
        prompts: &PromptEmbeddings,
    ) -> Result<Tensor> {
        let (gh, gw, e) = embedding.shape()?;
        if e != self.config.embed_dim {
            return Err(Error::ConfigMismatch(format!(
                "embedding width {e} but decoder expects {}",
                self.config.embed_dim
            )));
        }
        let d = self.config.prompt_embed_dim;
        if prompts.tokens.dim(1)? != d {
            return Err(Error::ConfigMismatch(format!(
                "prompt width {} but decoder expects {d}",
                prompts.tokens.dim(1)?
            )));
        }
        if prompts.image_shape != embedding.image_shape {
            return Err(Error::ConfigMismatch(format!(
                "prompts encoded for {:?} but image is {:?}",
                prompts.image_shape, embedding.image_shape
            )));
        }
        if prompts.is_empty() {
            return Err(Error::NoPrompt);
        }
        let key_pe = self.dense_positional((gh, gw))?;
        let mut keys = (self.lin(&embedding.tokens, "mask_decoder.input_proj")? + &key_pe)?;
        let query_pe = Tensor::cat(&[self.p("mask_decoder.mask_token"), &prompts.tokens], 0)?;
        let mut queries = query_pe.clone();
        for i in 0..self.config.decoder_depth {
            let l = format!("mask_decoder.layers.{i}");
            let q = (&queries + &query_pe)?;
            let attn = self.attention(&format!("{l}.self_attn"), &q, &q, &queries)?;
            queries = self.norm(&(queries + attn)?, &format!("{l}.norm1"))?;

            let q = (&queries + &query_pe)?;
            let k = (&keys + &key_pe)?;
            let attn = self.attention(&format!("{l}.cross_token_to_image"), &q, &k, &keys)?;
            queries = self.norm(&(queries + attn)?, &format!("{l}.norm2"))?;

            let hidden = self.lin(&queries, &format!("{l}.mlp.fc1"))?.gelu()?;
            let mlp = self.lin(&hidden, &format!("{l}.mlp.fc2"))?;
            queries = self.norm(&(queries + mlp)?, &format!("{l}.norm3"))?;

            let q = (&queries + &query_pe)?;
            let k = (&keys + &key_pe)?;
            let attn = self.attention(&format!("{l}.cross_image_to_token"), &k, &q, &queries)?;
            keys = self.norm(&(keys + attn)?, &format!("{l}.norm4"))?;
        }
        let q = (&queries + &query_pe)?;
        let k = (&keys + &key_pe)?;
        let attn = self.attention("mask_decoder.final_attn", &q, &k, &keys)?;
        queries = self.norm(&(queries + attn)?, "mask_decoder.final_norm")?;

        let c = self.config.head_channels();
        let (uh, uw) = (gh * UPSCALE, gw * UPSCALE);
        let up = self
            .lin(&keys, "mask_decoder.upscale")?
            .reshape((gh, gw, UPSCALE, UPSCALE, c))?
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?
            .reshape((uh * uw, c))?;
        let features = (up + self.lin(&embedding.skip, "mask_decoder.skip_proj")?)?.gelu()?;
        let features = (&features + self.lin(&features, "mask_decoder.refine")?.gelu()?)?;

        let mask_token = queries.narrow(0, 0, 1)?;
        let hyper = self.lin(&mask_token, "mask_decoder.hyper.fc1")?.gelu()?;
        let hyper = self.lin(&hyper, "mask_decoder.hyper.fc2")?.gelu()?;
        let hyper = self.lin(&hyper, "mask_decoder.hyper.fc3")?;
        let weights = hyper.narrow(1, 0, c)?;
        let bias = hyper.narrow(1, c, 1)?;
        let low = features
            .matmul(&weights.t()?)?
            .broadcast_add(&bias)?
            .reshape((uh, uw))?;
        let (height, width) = embedding.image_shape;
        let rows = bilinear_matrix(height, uh, &self.device)?.to_dtype(self.dtype)?;
        let cols = bilinear_matrix(width, uw, &self.device)?.to_dtype(self.dtype)?;
        Ok(rows.matmul(&low)?.matmul(&cols.t()?)?)
    }

    pub fn decode_mask(
        &self,
        embedding: &ImageEmbedding,
        prompts: &PromptEmbeddings,
    ) -> Result<MaskLogits> {
        let t = self.decode_mask_tensor(embedding, prompts)?;
        tensor_to_logits(&t)
    }

    /// Logits for an already-encoded image.
    pub fn predict_embedded(
        &self,
        embedding: &ImageEmbedding,
        prompts: &PromptSet,
    ) -> Result<(MaskLogits, BinaryMask)> {
        let pe = self.encode_prompts(prompts, embedding.image_shape)?;
        let logits = self.decode_mask(embedding, &pe)?;
        let mask = logits.binarize(self.config.mask_threshold);
        Ok((logits, mask))
    }

    pub fn predict(
        &self,
        image: &ImageGrid,
        prompts: &PromptSet,
    ) -> Result<(MaskLogits, BinaryMask)> {
        prompts.validate(image.height(), image.width())?;
        let embedding = self.encode_image(image)?;
        self.predict_embedded(&embedding, prompts)
    }
}

pub(crate) fn tensor_to_logits(t: &Tensor) -> Result<MaskLogits> {
    let (h, w) = t.dims2()?;
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    MaskLogits::new(h, w, data)
}

/// 2-D sine/cosine position code; `dim` must be divisible by 4.
fn sincos_position(h: usize, w: usize, dim: usize, device: &Device) -> candle_core::Result<Tensor> {
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(h * w * dim);
    for i in 0..h {
        for j in 0..w {
            for (pos, _) in [(i as f64, 0), (j as f64, 1)] {
                for k in 0..quarter {
                    let freq = 1.0 / 100f64.powf(k as f64 / quarter as f64);
                    data.push((pos * freq).sin());
                }
                for k in 0..quarter {
                    let freq = 1.0 / 100f64.powf(k as f64 / quarter as f64);
                    data.push((pos * freq).cos());
                }
            }
        }
    }
    Tensor::from_vec(data, (h * w, dim), device)
}

/// Row-interpolation matrix for half-pixel-centered bilinear resampling from `src` to `dst`.
fn bilinear_matrix(dst: usize, src: usize, device: &Device) -> candle_core::Result<Tensor> {
    let mut m = vec![0.0f64; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let t = s - lo as f64;
        m[i * src + lo] += 1.0 - t;
        m[i * src + hi] += t;
    }
    Tensor::from_vec(m, (dst, src), device)
}

/// Box-filtered intensities at the mask head's resolution: pooled, 3x3 mean and 7x7 mean.
fn skip_features(image: &ImageGrid, pool: usize, device: &Device) -> candle_core::Result<Tensor> {
    let (h, w) = (image.height() / pool, image.width() / pool);
    let mut pooled = vec![0.0f64; h * w];
    for y in 0..image.height() {
        for x in 0..image.width() {
            pooled[(y / pool) * w + x / pool] += image.get(y, x) as f64;
        }
    }
    let area = (pool * pool) as f64;
    pooled.iter_mut().for_each(|v| *v /= area);
    let box_mean = |radius: usize| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
                let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
                let mut sum = 0.0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        sum += pooled[yy * w + xx];
                    }
                }
                out[y * w + x] = sum / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
        out
    };
    let channels = [pooled.clone(), box_mean(1), box_mean(3)];
    debug_assert_eq!(channels.len(), SKIP_CHANNELS);
    let mut data = Vec::with_capacity(h * w * SKIP_CHANNELS);
    for i in 0..h * w {
        for ch in &channels {
            data.push(ch[i] - 0.5);
        }
    }
    Tensor::from_vec(data, (h * w, SKIP_CHANNELS), device)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Point;

    fn test_image(h: usize, w: usize) -> ImageGrid {
        ImageGrid::new(
            h,
            w,
            (0..h * w)
                .map(|i| ((i * 7919 % 257) as f32) / 256.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        let m = bilinear_matrix(64, 32, &Device::Cpu).unwrap();
        for s in m.sum(1).unwrap().to_vec1::<f64>().unwrap() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let model = PromptSegModel::init(ModelConfig::teacher(), 1).unwrap();
        let img = test_image(64, 64);
        let a = model.encode_image(&img).unwrap();
        assert_eq!(a.shape().unwrap(), (8, 8, 128));
        let b = model.encode_image(&img).unwrap();
        assert_eq!(a.to_vec().unwrap(), b.to_vec().unwrap());
    }

    #[test]
    fn indivisible_image_names_dimension() {
        let model = PromptSegModel::init(ModelConfig::teacher(), 1).unwrap();
        let err = model.encode_image(&test_image(63, 64)).unwrap_err();
        assert!(matches!(
            err,
            Error::Ingest {
                dimension: "height",
                value: 63,
                ..
            }
        ));
        assert!(err.to_string().contains("height"));
    }

    #[test]
    fn prompt_token_counts() {
        let model = PromptSegModel::init(ModelConfig::teacher(), 1).unwrap();
        let mut prompts = PromptSet::default();
        for i in 0..3 {
            prompts.points.push(Point::positive(i, i));
        }
        assert_eq!(model.encode_prompts(&prompts, (64, 64)).unwrap().len(), 3);
        let with_box = PromptSet {
            points: vec![Point::positive(5, 5)],
            bbox: Some(crate::grid::BoxPrompt {
                x0: 1,
                y0: 1,
                x1: 20,
                y1: 30,
            }),
        };
        assert_eq!(model.encode_prompts(&with_box, (64, 64)).unwrap().len(), 3);
        assert!(matches!(
            model.encode_prompts(&PromptSet::default(), (64, 64)),
            Err(Error::NoPrompt)
        ));
    }

    #[test]
    fn label_changes_prompt_embedding() {
        let model = PromptSegModel::init(ModelConfig::teacher(), 4).unwrap();
        let pos = model
            .encode_prompts(&PromptSet::from_point(Point::positive(10, 12)), (64, 64))
            .unwrap()
            .to_vec2()
            .unwrap();
        let neg = model
            .encode_prompts(&PromptSet::from_point(Point::negative(10, 12)), (64, 64))
            .unwrap()
            .to_vec2()
            .unwrap();
        assert_ne!(pos, neg);
    }

    #[test]
    fn decode_rejects_mismatched_embedding() {
        let teacher = PromptSegModel::init(ModelConfig::teacher(), 1).unwrap();
        let student = PromptSegModel::init(ModelConfig::student(), 1).unwrap();
        let img = test_image(64, 64);
        let emb = student.encode_image(&img).unwrap();
        let pe = teacher
            .encode_prompts(&PromptSet::from_point(Point::positive(3, 3)), (64, 64))
            .unwrap();
        assert!(matches!(
            teacher.decode_mask(&emb, &pe),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn partition_is_exhaustive_and_encoder_dominates() {
        let model = PromptSegModel::init(ModelConfig::teacher(), 1).unwrap();
        let p = model.parameter_partition();
        assert_eq!(p.image_encoder + p.prompt_encoder + p.mask_decoder, p.total);
        assert_eq!(p.total, ModelConfig::teacher().parameter_count());
        assert!(p.image_encoder > p.mask_decoder);
    }
}
