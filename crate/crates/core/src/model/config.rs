use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upsampling factor from the token grid to the mask head's working resolution.
pub const UPSCALE: usize = 4;

/// Architecture of the toy promptable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub encoder_mlp_ratio: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_ratio: usize,
    /// Width of prompt tokens and of the decoder.
    pub prompt_embed_dim: usize,
    /// Probability threshold for binarization (inclusive).
    pub mask_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::teacher()
    }
}

impl ModelConfig {
    pub fn teacher() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 128,
            encoder_depth: 4,
            encoder_heads: 4,
            encoder_mlp_ratio: 4,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_mlp_ratio: 2,
            prompt_embed_dim: 64,
            mask_threshold: 0.5,
        }
    }

    /// Lighter encoder; prompt encoder and decoder keep the teacher's shape.
    pub fn student() -> Self {
        Self {
            embed_dim: 64,
            encoder_depth: 2,
            encoder_heads: 2,
            ..Self::teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("encoder_heads", self.encoder_heads),
            ("encoder_mlp_ratio", self.encoder_mlp_ratio),
            ("decoder_depth", self.decoder_depth),
            ("decoder_heads", self.decoder_heads),
            ("decoder_mlp_ratio", self.decoder_mlp_ratio),
            ("prompt_embed_dim", self.prompt_embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.encoder_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by encoder_heads {}",
                self.embed_dim, self.encoder_heads
            )));
        }
        if !self.prompt_embed_dim.is_multiple_of(self.decoder_heads) {
            return Err(Error::Config(format!(
                "prompt_embed_dim {} not divisible by decoder_heads {}",
                self.prompt_embed_dim, self.decoder_heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::Config("embed_dim must be a multiple of 4".into()));
        }
        if !self.prompt_embed_dim.is_multiple_of(8) {
            return Err(Error::Config("prompt_embed_dim must be a multiple of 8".into()));
        }
        if !self.patch_size.is_multiple_of(UPSCALE) {
            return Err(Error::Config(format!(
                "patch_size must be a multiple of {UPSCALE}"
            )));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config("mask_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Channels of the per-pixel features in the mask head.
    pub fn head_channels(&self) -> usize {
        self.prompt_embed_dim / 8
    }

    /// Every parameter tensor with its shape, grouped by name prefix.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut push = |name: String, shape: &[usize]| shapes.push((name, shape.to_vec()));
        let e = self.embed_dim;
        let p2 = self.patch_size * self.patch_size;
        let enc_hidden = e * self.encoder_mlp_ratio;
        push("image_encoder.patch_embed.weight".into(), &[p2, e]);
        push("image_encoder.patch_embed.bias".into(), &[e]);
        for i in 0..self.encoder_depth {
            let b = format!("image_encoder.blocks.{i}");
            push(format!("{b}.norm1.weight"), &[e]);
            push(format!("{b}.norm1.bias"), &[e]);
            push(format!("{b}.attn.qkv.weight"), &[e, 3 * e]);
            push(format!("{b}.attn.qkv.bias"), &[3 * e]);
            push(format!("{b}.attn.proj.weight"), &[e, e]);
            push(format!("{b}.attn.proj.bias"), &[e]);
            push(format!("{b}.norm2.weight"), &[e]);
            push(format!("{b}.norm2.bias"), &[e]);
            push(format!("{b}.mlp.fc1.weight"), &[e, enc_hidden]);
            push(format!("{b}.mlp.fc1.bias"), &[enc_hidden]);
            push(format!("{b}.mlp.fc2.weight"), &[enc_hidden, e]);
            push(format!("{b}.mlp.fc2.bias"), &[e]);
        }
        push("image_encoder.neck.weight".into(), &[e]);
        push("image_encoder.neck.bias".into(), &[e]);

        let d = self.prompt_embed_dim;
        push("prompt_encoder.pe_gaussian".into(), &[2, d / 2]);
        push("prompt_encoder.point_embed.positive".into(), &[1, d]);
        push("prompt_encoder.point_embed.negative".into(), &[1, d]);
        push("prompt_encoder.box_corner.0".into(), &[1, d]);
        push("prompt_encoder.box_corner.1".into(), &[1, d]);

        let c = self.head_channels();
        let dec_hidden = d * self.decoder_mlp_ratio;
        push("mask_decoder.input_proj.weight".into(), &[e, d]);
        push("mask_decoder.input_proj.bias".into(), &[d]);
        push("mask_decoder.mask_token".into(), &[1, d]);
        let attention = |prefix: String, push: &mut dyn FnMut(String, &[usize])| {
            for part in ["q", "k", "v", "out"] {
                push(format!("{prefix}.{part}.weight"), &[d, d]);
                push(format!("{prefix}.{part}.bias"), &[d]);
            }
        };
        for i in 0..self.decoder_depth {
            let l = format!("mask_decoder.layers.{i}");
            attention(format!("{l}.self_attn"), &mut push);
            attention(format!("{l}.cross_token_to_image"), &mut push);
            attention(format!("{l}.cross_image_to_token"), &mut push);
            for n in 1..=4 {
                push(format!("{l}.norm{n}.weight"), &[d]);
                push(format!("{l}.norm{n}.bias"), &[d]);
            }
            push(format!("{l}.mlp.fc1.weight"), &[d, dec_hidden]);
            push(format!("{l}.mlp.fc1.bias"), &[dec_hidden]);
            push(format!("{l}.mlp.fc2.weight"), &[dec_hidden, d]);
            push(format!("{l}.mlp.fc2.bias"), &[d]);
        }
        attention("mask_decoder.final_attn".into(), &mut push);
        push("mask_decoder.final_norm.weight".into(), &[d]);
        push("mask_decoder.final_norm.bias".into(), &[d]);
        push(
            "mask_decoder.upscale.weight".into(),
            &[d, UPSCALE * UPSCALE * c],
        );
        push("mask_decoder.upscale.bias".into(), &[UPSCALE * UPSCALE * c]);
        push("mask_decoder.skip_proj.weight".into(), &[SKIP_CHANNELS, c]);
        push("mask_decoder.skip_proj.bias".into(), &[c]);
        push("mask_decoder.refine.weight".into(), &[c, c]);
        push("mask_decoder.refine.bias".into(), &[c]);
        push("mask_decoder.hyper.fc1.weight".into(), &[d, d]);
        push("mask_decoder.hyper.fc1.bias".into(), &[d]);
        push("mask_decoder.hyper.fc2.weight".into(), &[d, d]);
        push("mask_decoder.hyper.fc2.bias".into(), &[d]);
        push("mask_decoder.hyper.fc3.weight".into(), &[d, c + 1]);
        push("mask_decoder.hyper.fc3.bias".into(), &[c + 1]);
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Fixed intensity channels the mask head reads at its working resolution.
pub const SKIP_CHANNELS: usize = 3;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::teacher().validate().unwrap();
        ModelConfig::student().validate().unwrap();
    }

    #[test]
    fn rejects_heads_not_dividing_width() {
        let c = ModelConfig {
            encoder_heads: 3,
            ..ModelConfig::teacher()
        };
        assert!(c.validate().is_err());
    }
}
