use candle_core::{Module, Result, Tensor};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, VarBuilder};

/// Rearranges `B×(4C)×H×W` into `B×C×2H×2W`.
pub fn pixel_shuffle(x: &Tensor) -> Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    x.reshape((b, c, 2, 2, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, 2 * h, 2 * w))
}

/// Nearest-neighbour upsampling by 2. Unlike candle's `upsample_nearest2d`,
/// the backward pass adds to the input gradient instead of replacing it.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    x.maximum(&(x * 0.2)?)
}

/// Stride-2 4×4 convolution followed by leaky ReLU; halves resolution.
#[derive(Debug, Clone)]
pub struct Down {
    conv: Conv2d,
}

impl Down {
    pub fn new(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv: conv2d(c_in, c_out, 4, cfg, vb)?,
        })
    }
}

impl Module for Down {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        leaky_relu(&self.conv.forward(x)?)
    }
}

/// Nearest upsampling by 2 followed by a 3×3 convolution and ReLU.
#[derive(Debug, Clone)]
pub struct Up {
    conv: Conv2d,
}

impl Up {
    pub fn new(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv: conv2d(c_in, c_out, 3, cfg, vb)?,
        })
    }

    /// Convolution and ReLU on an already upsampled input.
    fn refine(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(x)?.relu()
    }
}

impl Module for Up {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.refine(&upsample2x(x)?)
    }
}

/// Channel width at encoder level `level` (0 is the first downsampling).
pub fn level_width(base: usize, level: usize) -> usize {
    base << level.min(2)
}

/// Stack of [`Down`] blocks, returning every intermediate activation.
#[derive(Debug, Clone)]
pub struct Encoder {
    downs: Vec<Down>,
}

impl Encoder {
    /// `widths[k]` is the output width of level `k`.
    pub fn new(c_in: usize, widths: &[usize], vb: VarBuilder) -> Result<Self> {
        let mut downs = Vec::with_capacity(widths.len());
        let mut prev = c_in;
        for (k, &w) in widths.iter().enumerate() {
            downs.push(Down::new(prev, w, vb.pp(format!("down{k}")))?);
            prev = w;
        }
        Ok(Self { downs })
    }

    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(self.downs.len());
        let mut h = x.clone();
        for d in &self.downs {
            h = d.forward(&h)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }
}

/// Upsampling path from the deepest encoder level back to half
/// resolution, then a 1×1 projection to `4·c_out` channels that is pixel
/// shuffled to full resolution. With `skips`, each level also sees the
/// matching encoder activation.
#[derive(Debug, Clone)]
pub struct Decoder {
    ups: Vec<Up>,
    head: Conv2d,
    skips: bool,
}

impl Decoder {
    /// `widths` are the encoder widths, shallowest first.
    pub fn new(widths: &[usize], c_out: usize, skips: bool, vb: VarBuilder) -> Result<Self> {
        let depth = widths.len();
        let mut ups = Vec::with_capacity(depth.saturating_sub(1));
        let mut prev = widths[depth - 1];
        for level in (0..depth - 1).rev() {
            let c_in = if skips { prev + widths[level] } else { prev };
            let out = widths[level];
            ups.push(Up::new(c_in, out, vb.pp(format!("up{level}")))?);
            prev = out;
        }
        let head = conv2d(prev, 4 * c_out, 1, Default::default(), vb.pp("head"))?;
        Ok(Self { ups, head, skips })
    }

    /// `feats` as returned by [`Encoder::forward_all`]; without skips only
    /// the last (deepest) entry is read.
    pub fn forward(&self, feats: &[Tensor]) -> Result<Tensor> {
        let depth = self.ups.len() + 1;
        let mut x = feats[feats.len() - 1].clone();
        for (k, up) in self.ups.iter().enumerate() {
            let level = depth - 2 - k;
            let upsampled = upsample2x(&x)?;
            x = if self.skips {
                up.refine(&Tensor::cat(&[&upsampled, &feats[level]], 1)?)?
            } else {
                up.refine(&upsampled)?
            };
        }
        pixel_shuffle(&self.head.forward(&x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn pixel_shuffle_layout() {
        let x = Tensor::arange(0f32, 16., &Device::Cpu).unwrap().reshape((1, 4, 2, 2)).unwrap();
        let y = pixel_shuffle(&x).unwrap();
        let rows: Vec<Vec<f32>> = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(rows[0], vec![0., 4., 1., 5.]);
        assert_eq!(rows[1], vec![8., 12., 9., 13.]);
        assert_eq!(rows[3], vec![10., 14., 11., 15.]);
    }

    #[test]
    fn upsample_matches_nearest_and_accumulates_gradient() {
        let x = Tensor::arange(0f64, 12., &Device::Cpu).unwrap().reshape((1, 3, 2, 2)).unwrap();
        let ours: Vec<f64> = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let reference: Vec<f64> = x.upsample_nearest2d(4, 4).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(ours, reference);

        let v = candle_core::Var::from_tensor(&x).unwrap();
        let up = upsample2x(v.as_tensor()).unwrap().sum_all().unwrap();
        let loss = (up + v.as_tensor().sum_all().unwrap()).unwrap();
        let g: Vec<f64> = loss.backward().unwrap().get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(g.iter().all(|&d| d == 5.0), "{g:?}");
    }

    #[test]
    fn encoder_decoder_shapes() {
        let vm = candle_nn::VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let widths = [4, 8, 16];
        let enc = Encoder::new(3, &widths, vb.pp("e")).unwrap();
        let dec = Decoder::new(&widths, 5, true, vb.pp("d")).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let feats = enc.forward_all(&x).unwrap();
        assert_eq!(feats[2].dims(), &[2, 16, 4, 4]);
        assert_eq!(dec.forward(&feats).unwrap().dims(), &[2, 5, 32, 32]);
    }
}
