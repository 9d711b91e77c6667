//! Adversarial residual dictionary learning.
//!
//! A set of `n` texture feature vectors `b_i` is encoded against a learnable
//! codebook of `m` codewords `c_k` with learnable smoothing factors `s_k`:
//!
//! ```text
//! r_ik = b_i - c_k
//! w_ik = exp(-s_k |r_ik|^2) / sum_j exp(-s_j |r_ij|^2)
//! e_k  = sum_i w_ik r_ik
//! ```
//!
//! giving a fixed-size `m×d` representation whatever `n` is. A linear head
//! on the flattened representation turns it into the dictionary
//! discriminator's logit.

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::init;

/// Lower bound applied to every log-probability.
pub const LOG_CLAMP: f64 = -30.0;

/// Sign convention of the dictionary adversarial pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArdlConvention {
    /// Both losses minimized with the signs as printed: the generator
    /// minimizes `E[log D(E_t(X))]` and the head minimizes
    /// `E[log D(E_t(Y)) + log(1 - D(E_t(X)))]`, so the head acts as an
    /// "is profile" detector.
    #[default]
    AsPrinted,
    /// Usual min-max game with the head as an "is frontal" detector and a
    /// non-saturating generator term.
    Standard,
}

/// `log(sigmoid(x))`, clamped below at [`LOG_CLAMP`].
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    // log σ(x) = min(x, 0) - log(1 + exp(-|x|))
    let neg_part = x.minimum(0.0)?;
    let soft = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((neg_part - soft)?.maximum(LOG_CLAMP)?)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let m = t.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !m.is_finite() {
        return Err(Error::non_finite(what));
    }
    Ok(())
}

fn as_batched(b: &Tensor) -> Result<(Tensor, bool)> {
    match b.rank() {
        2 => Ok((b.unsqueeze(0)?, true)),
        3 => Ok((b.clone(), false)),
        r => Err(Error::shape(format!("features must be n×d or B×n×d, got rank {r}"))),
    }
}

struct Residuals {
    /// `B×n×m×d`
    r: Tensor,
    /// `B×n×m`
    w: Tensor,
}

fn residuals(b: &Tensor, codewords: &Tensor, smoothing: &Tensor) -> Result<Residuals> {
    let (m, d) = codewords.dims2()?;
    let (_, _, db) = b.dims3()?;
    if db != d {
        return Err(Error::shape(format!("feature dim {db} vs codeword dim {d}")));
    }
    if smoothing.dims() != [m] {
        return Err(Error::shape(format!("smoothing {:?} for {m} codewords", smoothing.dims())));
    }
    check_finite(b, "dictionary features")?;
    check_finite(codewords, "codewords")?;
    check_finite(smoothing, "smoothing factors")?;

    let r = b.unsqueeze(2)?.broadcast_sub(&codewords.reshape((1, 1, m, d))?)?;
    let dist = r.sqr()?.sum(D::Minus1)?;
    let logits = dist.broadcast_mul(&smoothing.reshape((1, 1, m))?)?.neg()?;
    // softmax is shift invariant, so the max needs no gradient
    let shift = logits.max_keepdim(D::Minus1)?.detach();
    let ex = logits.broadcast_sub(&shift)?.exp()?;
    let w = ex.broadcast_div(&ex.sum_keepdim(D::Minus1)?)?;
    Ok(Residuals { r, w })
}

/// Soft-assignment weights, `n×m` (or `B×n×m`); every row sums to one.
pub fn assignment_weights(b: &Tensor, codewords: &Tensor, smoothing: &Tensor) -> Result<Tensor> {
    let (bb, single) = as_batched(b)?;
    let w = residuals(&bb, codewords, smoothing)?.w;
    Ok(if single { w.squeeze(0)? } else { w })
}

/// Aggregated residuals `e_k = Σ_i w_ik (b_i - c_k)`, `m×d` (or `B×m×d`).
pub fn dictionary_encode(b: &Tensor, codewords: &Tensor, smoothing: &Tensor) -> Result<Tensor> {
    let (bb, single) = as_batched(b)?;
    let Residuals { r, w } = residuals(&bb, codewords, smoothing)?;
    let e = r.broadcast_mul(&w.unsqueeze(D::Minus1)?)?.sum(1)?;
    Ok(if single { e.squeeze(0)? } else { e })
}

/// Codebook, smoothing factors and binary head.
pub struct DictDiscriminator {
    pub vars: VarMap,
    codewords: Var,
    smoothing: Var,
    head: Linear,
    num_codewords: usize,
    dim: usize,
}

impl DictDiscriminator {
    /// Codewords uniform in `±1/√d`, smoothing factors one.
    pub fn new(num_codewords: usize, dim: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if num_codewords < 2 {
            return Err(Error::precondition(format!("need >= 2 codewords, got {num_codewords}")));
        }
        let vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&vars, dtype, device);
        vb.get_with_hints((num_codewords, dim), "codewords", candle_nn::Init::Const(0.0))?;
        vb.get_with_hints(num_codewords, "smoothing", candle_nn::Init::Const(1.0))?;
        let head = linear(num_codewords * dim, 1, vb.pp("head"))?;
        init::reinit(&vars, seed, "dic")?;

        let lookup = |name: &str| vars.data().lock().unwrap().get(name).cloned().expect("registered above");
        let codewords = lookup("codewords");
        let smoothing = lookup("smoothing");
        let mut rng = ChaCha8Rng::seed_from_u64(init::derive_seed(seed, "codebook"));
        let bound = 1.0 / (dim as f64).sqrt();
        let cw: Vec<f64> = (0..num_codewords * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        codewords.set(&Tensor::from_vec(cw, (num_codewords, dim), device)?.to_dtype(dtype)?)?;
        smoothing.set(&Tensor::ones(num_codewords, dtype, device)?)?;
        Ok(Self {
            vars,
            codewords,
            smoothing,
            head,
            num_codewords,
            dim,
        })
    }

    pub fn num_codewords(&self) -> usize {
        self.num_codewords
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codewords(&self) -> &Tensor {
        self.codewords.as_tensor()
    }

    pub fn smoothing(&self) -> &Tensor {
        self.smoothing.as_tensor()
    }

    pub fn checksum(&self) -> Result<u64> {
        init::checksum(&self.vars)
    }

    /// `B×m×d` representation of `B×n×d` features.
    pub fn encode(&self, b: &Tensor) -> Result<Tensor> {
        dictionary_encode(b, self.codewords(), self.smoothing())
    }

    /// One logit per feature set; `sigmoid(logit)` is the head's probability.
    pub fn discriminate(&self, b: &Tensor) -> Result<Tensor> {
        let (bb, _) = as_batched(b)?;
        let e = self.encode(&bb)?;
        Ok(self.head.forward(&e.flatten_from(1)?)?.squeeze(1)?)
    }
}

/// Encoder-side dictionary loss on profile features `B×n×d`.
pub fn loss_ardl_generator(dic: &DictDiscriminator, profile_feats: &Tensor, convention: ArdlConvention) -> Result<Tensor> {
    if profile_feats.dim(0)? == 0 {
        return Err(Error::precondition("empty batch"));
    }
    let lp = log_sigmoid(&dic.discriminate(profile_feats)?)?.mean_all()?;
    Ok(match convention {
        ArdlConvention::AsPrinted => lp,
        ArdlConvention::Standard => lp.neg()?,
    })
}

/// Head-side dictionary loss. Features are detached so only the codebook,
/// smoothing factors and head receive gradients.
pub fn loss_ardl_discriminator(
    dic: &DictDiscriminator,
    profile_feats: &Tensor,
    frontal_feats: &Tensor,
    convention: ArdlConvention,
) -> Result<Tensor> {
    let (bx, by) = (profile_feats.dim(0)?, frontal_feats.dim(0)?);
    if bx != by {
        return Err(Error::shape(format!("profile batch {bx} vs frontal batch {by}")));
    }
    if bx == 0 {
        return Err(Error::precondition("empty batch"));
    }
    let lx = dic.discriminate(&profile_feats.detach())?;
    let ly = dic.discriminate(&frontal_feats.detach())?;
    // log(1 - σ(x)) = log σ(-x)
    let as_printed = (log_sigmoid(&ly)?.mean_all()? + log_sigmoid(&lx.neg()?)?.mean_all()?)?;
    Ok(match convention {
        ArdlConvention::AsPrinted => as_printed,
        ArdlConvention::Standard => as_printed.neg()?,
    })
}

/// Worst relative error between the autograd gradient of a random linear
/// probe of [`dictionary_encode`] and central finite differences, over up to
/// 24 sampled entries of each of `b`, `codewords` and `smoothing`. Inputs
/// must be 64-bit.
pub fn dictionary_gradient_check(b: &Tensor, codewords: &Tensor, smoothing: &Tensor, eps: f64, seed: u64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::precondition(format!("eps must be positive, got {eps}")));
    }
    for t in [b, codewords, smoothing] {
        if t.dtype() != DType::F64 {
            return Err(Error::precondition("gradient check needs 64-bit tensors"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = dictionary_encode(b, codewords, smoothing)?.shape().clone();
    let probe_w: Vec<f64> = (0..out_shape.elem_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let probe_w = Tensor::from_vec(probe_w, out_shape, b.device())?;
    let probe = |b: &Tensor, c: &Tensor, s: &Tensor| -> Result<Tensor> {
        Ok((dictionary_encode(b, c, s)? * &probe_w)?.sum_all()?)
    };

    let vars = [b, codewords, smoothing].map(|t| Var::from_tensor(t).map_err(Error::from));
    let [vb, vc, vs] = vars;
    let (vb, vc, vs) = (vb?, vc?, vs?);
    let grads = probe(vb.as_tensor(), vc.as_tensor(), vs.as_tensor())?.backward()?;

    let inputs: [Vec<f64>; 3] = [b, codewords, smoothing].map(|t| t.flatten_all().and_then(|f| f.to_vec1()).unwrap_or_default());
    let mut worst = 0.0f64;
    for (which, var) in [&vb, &vc, &vs].into_iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; inputs[which].len()],
        };
        let n = inputs[which].len();
        let picks: Vec<usize> = if n <= 24 { (0..n).collect() } else { (0..24).map(|_| rng.gen_range(0..n)).collect() };
        for k in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut vals = inputs[which].clone();
                vals[k] += delta;
                let shaped = Tensor::from_vec(vals, var.shape(), var.device())?;
                let mut args = [b.clone(), codewords.clone(), smoothing.clone()];
                args[which] = shaped;
                let v = probe(&args[0], &args[1], &args[2])?;
                Ok(v.to_scalar::<f64>()?)
            };
            let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[k];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    Ok(worst)
}
