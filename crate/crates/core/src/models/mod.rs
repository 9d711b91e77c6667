//! The trainable networks: correspondence estimator, texture autoencoder,
//! renderer and RGB discriminator, plus the frozen identity network used
//! for the perceptual loss and for evaluation.

mod blocks;
mod identity;
pub mod init;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use blocks::{leaky_relu, pixel_shuffle};
pub use identity::{IdentityNet, IDENTITY_FEATURE_DIM};

use blocks::{level_width, Decoder, Encoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub image_size: usize,
    pub texture_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    /// Dimension of each bottleneck feature vector handed to the
    /// dictionary discriminator.
    pub codeword_dim: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            texture_channels: 32,
            base_width: 8,
            depth: 4,
            codeword_dim: 32,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.depth == 0 || self.depth > 8 {
            return bad(format!("depth {} outside 1..=8", self.depth));
        }
        let factor = 1usize << self.depth;
        if self.image_size < factor || self.image_size % factor != 0 {
            return bad(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size, self.depth
            ));
        }
        if self.texture_channels < 3 {
            return bad(format!("texture channels {} < 3", self.texture_channels));
        }
        if self.codeword_dim < 8 {
            return bad(format!("codeword dim {} < 8", self.codeword_dim));
        }
        if self.base_width == 0 {
            return bad("base width must be positive".into());
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|l| level_width(self.base_width, l)).collect()
    }

    /// Spatial side of the texture bottleneck.
    pub fn bottleneck_side(&self) -> usize {
        self.image_size >> self.depth
    }

    fn check_image(&self, x: &Tensor, channels: usize, what: &str) -> Result<usize> {
        let dims = x.dims();
        let n = self.image_size;
        if dims.len() != 4 || dims[1] != channels || dims[2] != n || dims[3] != n {
            return Err(Error::shape(format!(
                "{what}: expected Bx{channels}x{n}x{n}, got {dims:?}"
            )));
        }
        Ok(dims[0])
    }
}

/// A network together with the variables it owns.
pub struct Trainable<M> {
    pub vars: VarMap,
    pub net: M,
}

impl<M> Trainable<M> {
    fn build(
        seed: u64,
        name: &str,
        dtype: DType,
        device: &Device,
        f: impl FnOnce(VarBuilder) -> candle_core::Result<M>,
    ) -> Result<Self> {
        let vars = VarMap::new();
        let net = f(VarBuilder::from_varmap(&vars, dtype, device))?;
        init::reinit(&vars, seed, name)?;
        Ok(Self { vars, net })
    }

    pub fn checksum(&self) -> Result<u64> {
        init::checksum(&self.vars)
    }
}

/// U-Net estimating the frontal correspondence field; `tanh` output covers
/// valid UVs and the `-1` sentinel.
pub struct CorrNet {
    enc: Encoder,
    dec: Decoder,
}

impl CorrNet {
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.dec.forward(&self.enc.forward_all(x)?)?.tanh()
    }
}

pub struct TextureEncoder {
    enc: Encoder,
}

impl TextureEncoder {
    /// `B×d×H'×W'` bottleneck.
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        Ok(self.enc.forward_all(x)?.pop().expect("at least one level"))
    }
}

/// Decoder without skip connections: everything it draws passes through
/// the bottleneck.
pub struct TextureDecoder {
    dec: Decoder,
}

impl TextureDecoder {
    pub fn forward(&self, bottleneck: &Tensor) -> candle_core::Result<Tensor> {
        self.dec.forward(std::slice::from_ref(bottleneck))
    }
}

/// Maps the channel concatenation of a field and a texture to the full
/// frontal image, background included.
pub struct Renderer {
    enc: Encoder,
    dec: Decoder,
}

impl Renderer {
    pub fn forward(&self, f: &Tensor, t: &Tensor) -> candle_core::Result<Tensor> {
        let x = Tensor::cat(&[f, t], 1)?;
        candle_nn::ops::sigmoid(&self.dec.forward(&self.enc.forward_all(&x)?)?)
    }
}

pub struct RgbDiscriminator {
    enc: Encoder,
    fc: Linear,
}

impl RgbDiscriminator {
    pub fn forward(&self, img: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.enc.forward_all(img)?.pop().expect("at least one level");
        self.fc.forward(&h.flatten_from(1)?)?.squeeze(1)
    }
}

/// Names under which each network's parameters are stored.
pub const NETWORK_NAMES: [&str; 5] = ["corr", "tex_enc", "tex_dec", "rec", "rgb_disc"];

pub struct ModelBundle {
    pub spec: NetworkSpec,
    pub dtype: DType,
    pub device: Device,
    pub corr: Trainable<CorrNet>,
    pub tex_enc: Trainable<TextureEncoder>,
    pub tex_dec: Trainable<TextureDecoder>,
    pub renderer: Trainable<Renderer>,
    pub rgb_disc: Trainable<RgbDiscriminator>,
}

pub fn build_models(spec: &NetworkSpec, seed: u64, dtype: DType, device: &Device) -> Result<ModelBundle> {
    spec.validate()?;
    let widths = spec.widths();
    let mut tex_widths = widths.clone();
    *tex_widths.last_mut().unwrap() = spec.codeword_dim;
    let ct = spec.texture_channels;

    let corr = Trainable::build(seed, "corr", dtype, device, |vb| {
        Ok(CorrNet {
            enc: Encoder::new(3, &widths, vb.pp("enc"))?,
            dec: Decoder::new(&widths, 2, true, vb.pp("dec"))?,
        })
    })?;
    let tex_enc = Trainable::build(seed, "tex_enc", dtype, device, |vb| {
        Ok(TextureEncoder {
            enc: Encoder::new(3, &tex_widths, vb.pp("enc"))?,
        })
    })?;
    let tex_dec = Trainable::build(seed, "tex_dec", dtype, device, |vb| {
        Ok(TextureDecoder {
            dec: Decoder::new(&tex_widths, ct, false, vb.pp("dec"))?,
        })
    })?;
    let renderer = Trainable::build(seed, "rec", dtype, device, |vb| {
        Ok(Renderer {
            enc: Encoder::new(2 + ct, &widths, vb.pp("enc"))?,
            dec: Decoder::new(&widths, 3, true, vb.pp("dec"))?,
        })
    })?;
    let side = spec.bottleneck_side();
    let last = *widths.last().unwrap();
    let rgb_disc = Trainable::build(seed, "rgb_disc", dtype, device, |vb| {
        Ok(RgbDiscriminator {
            enc: Encoder::new(3, &widths, vb.pp("enc"))?,
            fc: linear(last * side * side, 1, vb.pp("fc"))?,
        })
    })?;
    Ok(ModelBundle {
        spec: spec.clone(),
        dtype,
        device: device.clone(),
        corr,
        tex_enc,
        tex_dec,
        renderer,
        rgb_disc,
    })
}

impl ModelBundle {
    pub fn varmap(&self, name: &str) -> Option<&VarMap> {
        Some(match name {
            "corr" => &self.corr.vars,
            "tex_enc" => &self.tex_enc.vars,
            "tex_dec" => &self.tex_dec.vars,
            "rec" => &self.renderer.vars,
            "rgb_disc" => &self.rgb_disc.vars,
            _ => return None,
        })
    }

    /// `B×3×N×N` images to `B×2×N×N` fields in `[-1,1]`.
    pub fn corr_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.spec.check_image(x, 3, "correspondence input")?;
        Ok(self.corr.net.forward(x)?)
    }

    /// Texture map `B×C_t×N×N` and bottleneck `B×d×H'×W'`.
    pub fn texture_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.spec.check_image(x, 3, "texture input")?;
        let b = self.tex_enc.net.forward(x)?;
        let t = self.tex_dec.net.forward(&b)?;
        Ok((t, b))
    }

    /// Texture bottleneck `B×d×H'×W'` alone.
    pub fn texture_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.spec.check_image(x, 3, "texture input")?;
        Ok(self.tex_enc.net.forward(x)?)
    }

    pub fn rec_forward(&self, f: &Tensor, t: &Tensor) -> Result<Tensor> {
        let bf = self.spec.check_image(f, 2, "renderer field")?;
        let bt = self
            .spec
            .check_image(t, self.spec.texture_channels, "renderer texture")?;
        if bf != bt {
            return Err(Error::shape(format!("field batch {bf} vs texture batch {bt}")));
        }
        Ok(self.renderer.net.forward(f, t)?)
    }

    /// One logit per image.
    pub fn rgb_disc_forward(&self, img: &Tensor) -> Result<Tensor> {
        self.spec.check_image(img, 3, "discriminator input")?;
        Ok(self.rgb_disc.net.forward(img)?)
    }

    /// Full frontalization path `Rec(C(x), D_t(E_t(x)))`.
    pub fn frontalize(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.corr_forward(x)?;
        let (t, _) = self.texture_forward(x)?;
        self.rec_forward(&f, &t)
    }
}

/// Bottleneck `B×d×H'×W'` reshaped to the `B×n×d` feature sets the
/// dictionary encoder consumes.
pub fn bottleneck_features(b: &Tensor) -> Result<Tensor> {
    Ok(b.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}
