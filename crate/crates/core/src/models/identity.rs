use std::collections::HashMap;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, Linear, VarBuilder, VarMap};

use super::blocks::Encoder;
use super::init;
use crate::error::{Error, Result};

/// Length of the identity embedding (the penultimate layer).
pub const IDENTITY_FEATURE_DIM: usize = 128;

const WIDTHS: [usize; 4] = [16, 32, 64, 64];

enum Params {
    Trainable(VarMap),
    Frozen(HashMap<String, Tensor>),
}

/// Small convolutional identity classifier. After pretraining it is frozen:
/// its parameters become constants, so no loss can produce gradients for
/// them, and the classifier head is no longer used.
pub struct IdentityNet {
    enc: Encoder,
    fc: Linear,
    head: Linear,
    image_size: usize,
    num_identities: usize,
    params: Params,
    dtype: DType,
    device: Device,
}

fn build_layers(vb: VarBuilder, image_size: usize, num_identities: usize) -> candle_core::Result<(Encoder, Linear, Linear)> {
    let side = image_size >> WIDTHS.len();
    let enc = Encoder::new(3, &WIDTHS, vb.pp("enc"))?;
    let fc = linear(WIDTHS[3] * side * side, IDENTITY_FEATURE_DIM, vb.pp("fc"))?;
    let head = linear(IDENTITY_FEATURE_DIM, num_identities, vb.pp("head"))?;
    Ok((enc, fc, head))
}

impl IdentityNet {
    pub fn new(image_size: usize, num_identities: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if num_identities < 2 {
            return Err(Error::precondition(format!(
                "identity network needs >= 2 identities, got {num_identities}"
            )));
        }
        if image_size < 16 || image_size % 16 != 0 {
            return Err(Error::InvalidSpec(format!(
                "identity network needs an image size divisible by 16, got {image_size}"
            )));
        }
        let vars = VarMap::new();
        let (enc, fc, head) = build_layers(VarBuilder::from_varmap(&vars, dtype, device), image_size, num_identities)?;
        init::reinit(&vars, seed, "phi")?;
        Ok(Self {
            enc,
            fc,
            head,
            image_size,
            num_identities,
            params: Params::Trainable(vars),
            dtype,
            device: device.clone(),
        })
    }

    /// Rebuilds a frozen network from named parameter tensors.
    pub fn from_tensors(
        tensors: HashMap<String, Tensor>,
        image_size: usize,
        num_identities: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let tensors = tensors
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(dtype)?.detach())))
            .collect::<Result<HashMap<_, _>>>()?;
        let vb = VarBuilder::from_tensors(tensors.clone(), dtype, device);
        let (enc, fc, head) = build_layers(vb, image_size, num_identities)?;
        Ok(Self {
            enc,
            fc,
            head,
            image_size,
            num_identities,
            params: Params::Frozen(tensors),
            dtype,
            device: device.clone(),
        })
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.params, Params::Frozen(_))
    }

    /// Trainable variables; `None` once frozen.
    pub fn vars(&self) -> Option<&VarMap> {
        match &self.params {
            Params::Trainable(vm) => Some(vm),
            Params::Frozen(_) => None,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Parameter values by name.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        match &self.params {
            Params::Trainable(vm) => init::sorted_vars(vm)
                .into_iter()
                .map(|(k, v)| (k, v.as_tensor().detach()))
                .collect(),
            Params::Frozen(t) => t.clone(),
        }
    }

    /// Copy with constant parameters.
    pub fn frozen(&self) -> Result<Self> {
        Self::from_tensors(self.tensors(), self.image_size, self.num_identities, self.dtype, &self.device)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let d = x.dims();
        let n = self.image_size;
        if d.len() != 4 || d[1] != 3 || d[2] != n || d[3] != n {
            return Err(Error::shape(format!("identity input: expected Bx3x{n}x{n}, got {d:?}")));
        }
        Ok(())
    }

    fn embedding(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let h = self.enc.forward_all(x)?.pop().expect("four levels");
        Ok(self.fc.forward(&h.flatten_from(1)?)?)
    }

    /// `B×128` identity features with unit Euclidean norm.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let e = self.embedding(x)?;
        let norm = (e.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(e.broadcast_div(&norm)?)
    }

    /// Classifier logits `B×num_identities`, used during pretraining only.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(&self.embedding(x)?.relu()?)?)
    }
}
