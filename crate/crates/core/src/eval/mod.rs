//! Recognition via generation: frontalize held-out profiles, embed them
//! with the identity network and score identification and verification.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{init, IdentityNet, ModelBundle};
use crate::synthdata::Dataset;
use crate::tensor::{ImageTensor, Planes};

pub use report::{emit_report, REPORT_JSON, REPORT_MD, RANK1_PNG, ROC_PNG};

/// False-accept rates at which the true-accept rate is reported.
pub const FAR_LEVELS: [f64; 2] = [0.01, 0.001];

const CHUNK: usize = 16;

/// Frontal view `Rec(C(x), D_t(E_t(x)))` of one image.
pub fn frontalize(bundle: &ModelBundle, x: &ImageTensor) -> Result<ImageTensor> {
    let t = x.to_tensor(bundle.dtype, &bundle.device)?;
    ImageTensor::from_tensor(&bundle.frontalize(&t)?.detach(), 0)
}

/// Frontalizes a `B×3×N×N` batch in chunks.
pub fn frontalize_batch(bundle: &ModelBundle, x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    let mut outs = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        outs.push(bundle.frontalize(&x.narrow(0, start, len)?)?.detach());
    }
    Ok(Tensor::cat(&outs, 0)?)
}

/// Identity features of a `B×3×N×N` batch, one row per image.
pub fn extract_features(phi: &IdentityNet, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let x = x.to_dtype(phi.dtype())?;
    let n = x.dim(0)?;
    let mut rows = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let f = phi.features(&x.narrow(0, start, len)?)?;
        let f: Vec<Vec<f64>> = f.to_dtype(candle_core::DType::F64)?.to_vec2()?;
        rows.extend(f);
    }
    Ok(rows)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Identification rate of one yaw bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YawRate {
    pub yaw_deg: f64,
    pub rate: f64,
}

pub struct Probe<'a> {
    pub features: &'a [f64],
    pub identity: u32,
    pub yaw_deg: f64,
}

/// Rank-1 identification per yaw bin by maximum cosine similarity against
/// a gallery holding exactly one feature vector per identity.
pub fn rank1_identification(probes: &[Probe], gallery: &[(Vec<f64>, u32)]) -> Result<Vec<YawRate>> {
    let mut seen = BTreeSet::new();
    for (_, id) in gallery {
        if !seen.insert(*id) {
            return Err(Error::precondition(format!("identity {id} appears twice in the gallery")));
        }
    }
    let mut bins: BTreeMap<i64, (f64, usize, usize)> = BTreeMap::new();
    for p in probes {
        if !seen.contains(&p.identity) {
            return Err(Error::precondition(format!("probe identity {} is not in the gallery", p.identity)));
        }
        let mut best = (f64::NEG_INFINITY, u32::MAX);
        for (g, id) in gallery {
            let s = cosine_similarity(p.features, g);
            if s > best.0 {
                best = (s, *id);
            }
        }
        let key = (p.yaw_deg * 1000.0).round() as i64;
        let entry = bins.entry(key).or_insert((p.yaw_deg, 0, 0));
        entry.1 += usize::from(best.1 == p.identity);
        entry.2 += 1;
    }
    Ok(bins
        .into_values()
        .map(|(yaw_deg, hit, total)| YawRate {
            yaw_deg,
            rate: hit as f64 / total as f64,
        })
        .collect())
}

/// Verification summary over a threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// Best balanced accuracy over all thresholds.
    pub accuracy: f64,
    pub auc: f64,
    /// `(far, tar)` for each of [`FAR_LEVELS`].
    pub tar_at_far: Vec<(f64, f64)>,
    /// ROC vertices `(fpr, tpr)` from `(0,0)` to `(1,1)`.
    pub roc: Vec<(f64, f64)>,
}

/// True-accept rate at `far` on a piecewise linear ROC.
fn interpolate_tar(roc: &[(f64, f64)], far: f64) -> f64 {
    let mut best: f64 = 0.0;
    for w in roc.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 <= far {
            best = best.max(y0);
        }
        if x0 <= far && far <= x1 {
            let y = if x1 > x0 { y0 + (y1 - y0) * (far - x0) / (x1 - x0) } else { y1 };
            best = best.max(y);
        }
    }
    best
}

/// Accepts a pair when its similarity is at least the threshold; sweeps
/// every distinct similarity value.
pub fn verification_metrics(pairs: &[(f64, bool)]) -> Result<Verification> {
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::precondition("verification needs both same and different pairs"));
    }
    if pairs.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::non_finite("verification similarity"));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut roc = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < sorted.len() {
        let s = sorted[k].0;
        while k < sorted.len() && sorted[k].0 == s {
            if sorted[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        roc.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    let accuracy = roc
        .iter()
        .map(|&(fpr, tpr)| (tpr + 1.0 - fpr) / 2.0)
        .fold(0.0, f64::max);
    let tar_at_far = FAR_LEVELS.iter().map(|&f| (f, interpolate_tar(&roc, f))).collect();
    Ok(Verification {
        accuracy,
        auc,
        tar_at_far,
        roc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Run label shown in the markdown tables.
    pub label: String,
    pub rank1_by_yaw: Vec<YawRate>,
    pub baseline_rank1_by_yaw: Vec<YawRate>,
    pub verification_acc: f64,
    pub verification_auc: f64,
    pub tar_at_far: Vec<(f64, f64)>,
    pub roc: Vec<(f64, f64)>,
    pub num_probe: usize,
    pub num_gallery: usize,
    /// Same protocol on a comparison run, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Box<EvalReport>>,
}

/// Mean rate over bins whose absolute yaw is in `abs_yaws`.
pub fn mean_rate(rates: &[YawRate], abs_yaws: &[f64]) -> Option<f64> {
    let picked: Vec<f64> = rates
        .iter()
        .filter(|r| abs_yaws.iter().any(|a| (r.yaw_deg.abs() - a).abs() < 1e-9))
        .map(|r| r.rate)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

impl EvalReport {
    /// Mean rank-1 over the large-pose bins (±60°, ±90°): frontalized and
    /// raw-profile baseline.
    pub fn large_pose_rank1(&self) -> (Option<f64>, Option<f64>) {
        (
            mean_rate(&self.rank1_by_yaw, &[60.0, 90.0]),
            mean_rate(&self.baseline_rank1_by_yaw, &[60.0, 90.0]),
        )
    }
}

/// Same-identity pairs among all probes plus as many seeded
/// different-identity pairs, as index pairs with a same flag.
pub fn verification_pairs(identities: &[u32], seed: u64) -> Vec<(usize, usize, bool)> {
    let n = identities.len();
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if identities[i] == identities[j] {
                same.push((i, j, true));
            } else {
                diff.push((i, j, false));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init::derive_seed(seed, "verification"));
    diff.shuffle(&mut rng);
    diff.truncate(same.len());
    same.extend(diff);
    same
}

/// Full protocol on a test split: gallery is the yaw-0 frontal of every
/// identity, probes are all profiles. `features_net` defaults to the
/// network used during training.
pub fn evaluate(
    bundle: &ModelBundle,
    features_net: &IdentityNet,
    test: &Dataset,
    seed: u64,
    label: &str,
) -> Result<EvalReport> {
    let device = Device::Cpu;
    let dtype = bundle.dtype;
    let mut gallery_imgs = Vec::new();
    let mut gallery_ids = Vec::new();
    for id in 0..test.num_identities as u32 {
        let s = test
            .samples
            .iter()
            .find(|s| s.identity == id && s.yaw_deg == 0.0)
            .ok_or_else(|| Error::precondition(format!("identity {id} has no frontal sample for the gallery")))?;
        gallery_imgs.push(&s.frontal);
        gallery_ids.push(id);
    }
    let gallery_t = Planes::stack(&gallery_imgs, dtype, &device)?;
    let gallery: Vec<(Vec<f64>, u32)> = extract_features(features_net, &gallery_t)?
        .into_iter()
        .zip(gallery_ids)
        .collect();

    let profiles: Vec<&ImageTensor> = test.samples.iter().map(|s| &s.profile).collect();
    let profiles_t = Planes::stack(&profiles, dtype, &device)?;
    let raw = extract_features(features_net, &profiles_t)?;
    let frontalized = extract_features(features_net, &frontalize_batch(bundle, &profiles_t)?)?;

    let probes = |feats: &[Vec<f64>]| -> Vec<(usize, u32, f64)> {
        feats.iter().enumerate().map(|(k, _)| (k, test.samples[k].identity, test.samples[k].yaw_deg as f64)).collect()
    };
    let make = |feats: &[Vec<f64>]| -> Result<Vec<YawRate>> {
        let ps: Vec<Probe> = probes(feats)
            .into_iter()
            .map(|(k, identity, yaw_deg)| Probe {
                features: &feats[k],
                identity,
                yaw_deg,
            })
            .collect();
        rank1_identification(&ps, &gallery)
    };
    let rank1_by_yaw = make(&frontalized)?;
    let baseline_rank1_by_yaw = make(&raw)?;

    let ids: Vec<u32> = test.samples.iter().map(|s| s.identity).collect();
    let pairs: Vec<(f64, bool)> = verification_pairs(&ids, seed)
        .into_iter()
        .map(|(i, j, same)| (cosine_similarity(&frontalized[i], &frontalized[j]), same))
        .collect();
    let v = verification_metrics(&pairs)?;
    Ok(EvalReport {
        label: label.to_string(),
        rank1_by_yaw,
        baseline_rank1_by_yaw,
        verification_acc: v.accuracy,
        verification_auc: v.auc,
        tar_at_far: v.tar_at_far,
        roc: v.roc,
        num_probe: test.samples.len(),
        num_gallery: gallery.len(),
        ablation: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn probes_from(feats: &[Vec<f64>], ids: &[u32], yaws: &[f64]) -> Vec<(Vec<f64>, u32, f64)> {
        feats.iter().cloned().zip(ids.iter().copied()).zip(yaws.iter().copied()).map(|((f, i), y)| (f, i, y)).collect()
    }

    fn rank1(p: &[(Vec<f64>, u32, f64)], g: &[(Vec<f64>, u32)]) -> Vec<YawRate> {
        let ps: Vec<Probe> = p
            .iter()
            .map(|(f, identity, yaw_deg)| Probe {
                features: f,
                identity: *identity,
                yaw_deg: *yaw_deg,
            })
            .collect();
        rank1_identification(&ps, g).unwrap()
    }

    #[test]
    fn self_match_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g: Vec<(Vec<f64>, u32)> = (0..10).map(|i| ((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), i)).collect();
        let feats: Vec<Vec<f64>> = g.iter().map(|x| x.0.clone()).collect();
        let ids: Vec<u32> = (0..10).collect();
        let p = probes_from(&feats, &ids, &[0.0; 10]);
        assert!(rank1(&p, &g).iter().all(|r| r.rate == 1.0));
    }

    #[test]
    fn random_features_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rates = Vec::new();
        for _ in 0..20 {
            let g: Vec<(Vec<f64>, u32)> = (0..10).map(|i| ((0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(), i)).collect();
            let p: Vec<(Vec<f64>, u32, f64)> = (0..70)
                .map(|k| ((0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(), (k % 10) as u32, 0.0))
                .collect();
            rates.push(rank1(&p, &g)[0].rate);
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((mean - 0.1).abs() < 0.1, "{mean}");
    }

    #[test]
    fn cosine_decisions_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<(Vec<f64>, u32)> = (0..5).map(|i| ((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), i)).collect();
        let p: Vec<(Vec<f64>, u32, f64)> = (0..30)
            .map(|k| ((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), (k % 5) as u32, (k % 3) as f64 * 30.0))
            .collect();
        let scaled: Vec<(Vec<f64>, u32, f64)> = p.iter().map(|(f, i, y)| (f.iter().map(|x| 3.0 * x).collect(), *i, *y)).collect();
        assert_eq!(rank1(&p, &g), rank1(&scaled, &g));
    }

    #[test]
    fn rates_reported_per_yaw() {
        let g = vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1)];
        let p = vec![
            (vec![1.0, 0.1], 0, 0.0),
            (vec![0.9, 0.2], 1, 90.0),
            (vec![0.1, 1.0], 1, 90.0),
            (vec![0.2, 0.9], 1, -90.0),
        ];
        let r = rank1(&p, &g);
        assert_eq!(r.iter().map(|x| x.yaw_deg).collect::<Vec<_>>(), vec![-90.0, 0.0, 90.0]);
        assert_eq!(r.iter().map(|x| x.rate).collect::<Vec<_>>(), vec![1.0, 1.0, 0.5]);
    }

    #[test]
    fn probe_identity_missing_from_gallery() {
        let g = vec![(vec![1.0], 0)];
        let f = vec![1.0];
        let p = [Probe {
            features: &f,
            identity: 3,
            yaw_deg: 0.0,
        }];
        assert!(rank1_identification(&p, &g).is_err());
        let dup = vec![(vec![1.0], 0), (vec![2.0], 0)];
        assert!(rank1_identification(&[], &dup).is_err());
    }

    #[test]
    fn separated_similarities() {
        let pairs = [(0.9, true), (0.8, true), (0.7, true), (0.2, false), (0.1, false), (0.0, false)];
        let v = verification_metrics(&pairs).unwrap();
        assert_eq!((v.accuracy, v.auc), (1.0, 1.0));
        assert!(v.tar_at_far.iter().all(|&(_, t)| t == 1.0));
    }

    #[test]
    fn identical_similarities_give_half_auc() {
        let pairs = [(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        let v = verification_metrics(&pairs).unwrap();
        assert_eq!(v.auc, 0.5);
        assert_eq!(v.accuracy, 0.5);
    }

    #[test]
    fn hand_computed_toy_roc() {
        // descending: 0.9 P, 0.8 N, 0.7 P, 0.6 P, 0.4 N, 0.3 N
        // ROC vertices: (0,0) (0,1/3) (1/3,1/3) (1/3,2/3) (1/3,1) (2/3,1) (1,1)
        // area = 1/3·1/3 + 1/3·1 + 1/3·1 = 7/9
        let pairs = [(0.6, true), (0.3, false), (0.9, true), (0.4, false), (0.8, false), (0.7, true)];
        let v = verification_metrics(&pairs).unwrap();
        assert!((v.auc - 7.0 / 9.0).abs() < 1e-9);
        // best balanced accuracy at threshold 0.6: tpr 1, fpr 1/3
        assert!((v.accuracy - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // at far 0.01 the curve is on the first vertical edge: tpr 1/3
        assert!((v.tar_at_far[0].1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tar_interpolates_between_vertices() {
        let roc = [(0.0, 0.0), (0.0, 0.2), (0.02, 0.6), (1.0, 1.0)];
        assert!((interpolate_tar(&roc, 0.01) - 0.4).abs() < 1e-12);
        assert!((interpolate_tar(&roc, 0.001) - 0.22).abs() < 1e-12);
    }

    #[test]
    fn single_class_pairs_rejected() {
        assert!(verification_metrics(&[(0.3, true), (0.5, true)]).is_err());
        assert!(verification_metrics(&[]).is_err());
    }

    #[test]
    fn pairs_balanced_and_seeded() {
        let ids: Vec<u32> = (0..21).map(|k| k / 7).collect();
        let p = verification_pairs(&ids, 5);
        let same = p.iter().filter(|x| x.2).count();
        assert_eq!(same, 3 * 21);
        assert_eq!(p.len(), 2 * same);
        assert_eq!(p, verification_pairs(&ids, 5));
        assert!(p.iter().all(|&(i, j, s)| (ids[i] == ids[j]) == s));
    }

    #[test]
    fn large_pose_mean() {
        let r = vec![
            YawRate { yaw_deg: -90.0, rate: 0.2 },
            YawRate { yaw_deg: -60.0, rate: 0.4 },
            YawRate { yaw_deg: 0.0, rate: 1.0 },
            YawRate { yaw_deg: 60.0, rate: 0.6 },
            YawRate { yaw_deg: 90.0, rate: 0.8 },
        ];
        assert!((mean_rate(&r, &[60.0, 90.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(mean_rate(&r, &[45.0]), None);
    }
}
