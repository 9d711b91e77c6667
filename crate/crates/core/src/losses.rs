//! Reconstruction, correspondence, perceptual and RGB adversarial losses, and
//! their unit-weight composition.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::ardl::log_sigmoid;
use crate::error::{Error, Result};
use crate::models::{IdentityNet, ModelBundle};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference over every element.
pub fn loss_reconstruction(y_hat: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(y_hat, y, "reconstruction")?;
    Ok((y_hat - y)?.abs()?.mean_all()?)
}

/// Mean absolute difference over the whole two-channel field, sentinel
/// regions included.
pub fn loss_correspondence(f_hat: &Tensor, f: &Tensor) -> Result<Tensor> {
    same_shape(f_hat, f, "correspondence")?;
    Ok((f_hat - f)?.abs()?.mean_all()?)
}

/// Batch mean of the squared distance between identity features. The target
/// features carry no gradient, and a frozen network has no variables, so
/// only `y_hat` receives gradients.
pub fn loss_perceptual(phi: &IdentityNet, y_hat: &Tensor, y: &Tensor) -> Result<Tensor> {
    if !phi.is_frozen() {
        return Err(Error::IdentityNetNotReady);
    }
    same_shape(y_hat, y, "perceptual")?;
    let a = phi.features(y_hat)?;
    let b = phi.features(&y.detach())?.detach();
    Ok((a - b)?.sqr()?.sum(1)?.mean_all()?)
}

/// Generator objective of the RGB adversarial pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanVariant {
    /// `L_g = -mean log σ(D(ŷ))`
    #[default]
    NonSaturating,
    /// `L_g = mean log(1 - σ(D(ŷ)))`
    Saturating,
}

/// Generator loss from discriminator logits on generated images.
pub fn gan_generator_loss(fake_logits: &Tensor, variant: GanVariant) -> Result<Tensor> {
    if fake_logits.elem_count() == 0 {
        return Err(Error::precondition("empty batch"));
    }
    Ok(match variant {
        GanVariant::NonSaturating => log_sigmoid(fake_logits)?.mean_all()?.neg()?,
        GanVariant::Saturating => log_sigmoid(&fake_logits.neg()?)?.mean_all()?,
    })
}

/// `L_d = -mean[log σ(D(y)) + log(1 - σ(D(ŷ)))]`.
pub fn gan_discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    if real_logits.elem_count() == 0 {
        return Err(Error::precondition("empty batch"));
    }
    same_shape(real_logits, fake_logits, "discriminator logits")?;
    let s = (log_sigmoid(real_logits)? + log_sigmoid(&fake_logits.neg()?)?)?;
    Ok(s.mean_all()?.neg()?)
}

/// `(L_g, L_d)` for a batch of generated and real images. `L_d` sees the
/// generated images detached, so it only reaches the RGB discriminator.
pub fn loss_gan_pair(bundle: &ModelBundle, y_hat: &Tensor, y: &Tensor, variant: GanVariant) -> Result<(Tensor, Tensor)> {
    if y_hat.dims().first() == Some(&0) {
        return Err(Error::precondition("empty batch"));
    }
    same_shape(y_hat, y, "adversarial batches")?;
    let l_g = gan_generator_loss(&bundle.rgb_disc_forward(y_hat)?, variant)?;
    let l_d = gan_discriminator_loss(&bundle.rgb_disc_forward(y)?, &bundle.rgb_disc_forward(&y_hat.detach())?)?;
    Ok((l_g, l_d))
}

/// Per-term weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub corr: f64,
    pub adv: f64,
    pub p: f64,
    pub g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            corr: 1.0,
            adv: 1.0,
            p: 1.0,
            g: 1.0,
        }
    }
}

/// Scalar values of every term at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub l_rec: f64,
    pub l_corr: f64,
    pub l_adv: f64,
    pub l_p: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub l_dic: f64,
    pub l_total: f64,
}

pub const LOG_HEADER: &str = "iter,l_rec,l_corr,l_adv,l_p,l_g,l_d,l_dic,l_total";

impl LossReport {
    /// One CSV row matching [`LOG_HEADER`]. Values use the shortest
    /// representation that parses back to the same number.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.iteration, self.l_rec, self.l_corr, self.l_adv, self.l_p, self.l_g, self.l_d, self.l_dic, self.l_total
        )
    }
}

/// Assembles a report. `l_total` is the weighted sum of the five generator
/// terms; `l_d` and `l_dic` are minimized separately and only logged.
pub fn total_loss(
    iteration: u64,
    [l_rec, l_corr, l_adv, l_p, l_g, l_d, l_dic]: [f64; 7],
    weights: &LossWeights,
) -> Result<LossReport> {
    let named = [
        ("l_rec", l_rec),
        ("l_corr", l_corr),
        ("l_adv", l_adv),
        ("l_p", l_p),
        ("l_g", l_g),
        ("l_d", l_d),
        ("l_dic", l_dic),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::non_finite(name));
        }
    }
    let l_total = weights.rec * l_rec + weights.corr * l_corr + weights.adv * l_adv + weights.p * l_p + weights.g * l_g;
    if !l_total.is_finite() {
        return Err(Error::non_finite("l_total"));
    }
    Ok(LossReport {
        iteration,
        l_rec,
        l_corr,
        l_adv,
        l_p,
        l_g,
        l_d,
        l_dic,
        l_total,
    })
}

/// Reads a scalar tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
