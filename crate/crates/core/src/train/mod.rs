//! The training algorithm: identity-network pretraining, the three-phase
//! alternating step and the checkpointed loop around it.

mod checkpoint;
mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ardl::{loss_ardl_discriminator, loss_ardl_generator, DictDiscriminator};
use crate::error::{Error, Result};
use crate::losses::{
    gan_discriminator_loss, gan_generator_loss, loss_correspondence, loss_perceptual, loss_reconstruction, scalar,
    total_loss, LossReport, LOG_HEADER,
};
use crate::models::{bottleneck_features, build_models, init, IdentityNet, ModelBundle, NetworkSpec};
use crate::optim::Adam;
use crate::synthdata::{load_dataset, Dataset};
use crate::tensor::Planes;

pub use checkpoint::{
    checkpoint_dir, dtype_name, load_checkpoint, load_identity_net, save_checkpoint, save_identity_net, Checkpoint,
    CheckpointManifest, CheckpointParts, IdentityNetInfo,
};
pub use config::{parse_kv, NetworkParams, PretrainOptions, TrainConfig, CONFIG_KEYS};

/// Name of the CSV loss log inside a run directory.
pub const TRAIN_LOG: &str = "train_log.csv";

/// Networks updated by the generator phase.
pub const GENERATOR_NETWORKS: [&str; 4] = ["corr", "tex_enc", "tex_dec", "rec"];

/// Whole dataset as stacked tensors.
pub struct DatasetTensors {
    /// Profiles `S×3×N×N`.
    pub x: Tensor,
    /// Frontals `S×3×N×N`.
    pub y: Tensor,
    /// Ground-truth fields `S×2×N×N`.
    pub f: Tensor,
    pub labels: Vec<u32>,
}

pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub f: Tensor,
}

impl DatasetTensors {
    pub fn new(ds: &Dataset, dtype: DType, device: &Device) -> Result<Self> {
        if ds.samples.is_empty() {
            return Err(Error::precondition("empty dataset"));
        }
        let profiles: Vec<&Planes<f32>> = ds.samples.iter().map(|s| &s.profile).collect();
        let frontals: Vec<&Planes<f32>> = ds.samples.iter().map(|s| &s.frontal).collect();
        let fields: Vec<&Planes<f32>> = ds.samples.iter().map(|s| s.corr_field.planes()).collect();
        Ok(Self {
            x: Planes::stack(&profiles, dtype, device)?,
            y: Planes::stack(&frontals, dtype, device)?,
            f: Planes::stack(&fields, dtype, device)?,
            labels: ds.samples.iter().map(|s| s.identity).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.x.device())?;
        Ok(Batch {
            x: self.x.index_select(&idx, 0)?,
            y: self.y.index_select(&idx, 0)?,
            f: self.f.index_select(&idx, 0)?,
        })
    }
}

/// Shuffled order of `len` samples for one epoch.
pub fn epoch_permutation(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(init::derive_seed(seed, &format!("epoch{epoch}")));
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Sample indices of batch `step` (zero based). Batches walk through
/// per-epoch shuffles back to back, so the sequence depends only on
/// `(seed, step)` and resuming needs no sampler state.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in 0..batch_size as u64 {
        let p = step * batch_size as u64 + k;
        let epoch = p / len as u64;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            cached = Some((epoch, epoch_permutation(seed, epoch, len)));
        }
        out.push(cached.as_ref().unwrap().1[(p % len as u64) as usize]);
    }
    out
}

fn named_vars(pairs: &[(&str, &VarMap)]) -> Vec<(String, Var)> {
    pairs
        .iter()
        .flat_map(|(prefix, vm)| {
            init::sorted_vars(vm)
                .into_iter()
                .map(move |(n, v)| (format!("{prefix}.{n}"), v))
        })
        .collect()
}

/// One Adam instance per phase.
pub struct Optimizers {
    pub gen: Adam,
    pub dic: Adam,
    pub rgb: Adam,
}

impl Optimizers {
    pub fn new(bundle: &ModelBundle, dic: &DictDiscriminator, cfg: &TrainConfig) -> Result<Self> {
        let gen_pairs: Vec<(&str, &VarMap)> = GENERATOR_NETWORKS
            .iter()
            .map(|n| (*n, bundle.varmap(n).expect("known network")))
            .collect();
        let adam = |vars| Adam::new(vars, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
        Ok(Self {
            gen: adam(named_vars(&gen_pairs))?,
            dic: adam(named_vars(&[("dic", &dic.vars)]))?,
            rgb: adam(named_vars(&[("rgb_disc", &bundle.rgb_disc.vars)]))?,
        })
    }

    pub fn named(&self) -> [(&'static str, &Adam); 3] {
        [("gen", &self.gen), ("dic", &self.dic), ("rgb", &self.rgb)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Adam); 3] {
        [("gen", &mut self.gen), ("dic", &mut self.dic), ("rgb", &mut self.rgb)]
    }
}

/// Parameter checksums of the three phase groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupChecksums {
    pub gen: u64,
    pub dic: u64,
    pub rgb: u64,
}

impl GroupChecksums {
    pub fn of(bundle: &ModelBundle, dic: &DictDiscriminator) -> Result<Self> {
        let mut gen = 0u64;
        for n in GENERATOR_NETWORKS {
            gen = gen.rotate_left(17) ^ init::checksum(bundle.varmap(n).expect("known network"))?;
        }
        Ok(Self {
            gen,
            dic: dic.checksum()?,
            rgb: bundle.rgb_disc.checksum()?,
        })
    }
}

fn expect_isolated(phase: &str, before: GroupChecksums, after: GroupChecksums, changed: &str) -> Result<()> {
    let groups = [("generator", before.gen, after.gen), ("D_dic", before.dic, after.dic), ("D_rgb", before.rgb, after.rgb)];
    for (name, b, a) in groups {
        if name != changed && b != a {
            return Err(Error::Isolation(format!("{phase} phase modified {name} parameters")));
        }
    }
    Ok(())
}

/// Mutable training state shared by the step and the loop.
pub struct TrainState {
    pub bundle: ModelBundle,
    pub dic: DictDiscriminator,
    pub phi: IdentityNet,
    pub optimizers: Optimizers,
}

impl TrainState {
    pub fn new(spec: &NetworkSpec, phi: IdentityNet, cfg: &TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        if !phi.is_frozen() {
            return Err(Error::IdentityNetNotReady);
        }
        let bundle = build_models(spec, cfg.seed, dtype, device)?;
        let dic = DictDiscriminator::new(cfg.ardl_codewords, spec.codeword_dim, cfg.seed, dtype, device)?;
        let optimizers = Optimizers::new(&bundle, &dic, cfg)?;
        Ok(Self {
            bundle,
            dic,
            phi,
            optimizers,
        })
    }

    pub fn checksums(&self) -> Result<GroupChecksums> {
        GroupChecksums::of(&self.bundle, &self.dic)
    }
}

/// One iteration of the alternating algorithm on `batch`:
///
/// 1. forward `F̂ = C(X)`, `T̂ = D_t(E_t(X))`, `Ŷ = Rec(F̂, T̂)` and every loss;
/// 2. minimize the weighted generator sum over C, E_t, D_t and Rec;
/// 3. minimize `L_dic` over the dictionary discriminator;
/// 4. minimize `L_d` over the RGB discriminator.
///
/// The discriminator losses read detached generator outputs, so each phase
/// only reaches its own parameters. A non-finite loss aborts before any
/// parameter changes.
pub fn train_step(state: &mut TrainState, batch: &Batch, iteration: u64, cfg: &TrainConfig) -> Result<LossReport> {
    let TrainState {
        bundle,
        dic,
        phi,
        optimizers,
    } = state;
    let f_hat = bundle.corr_forward(&batch.x)?;
    let (t_hat, bneck_x) = bundle.texture_forward(&batch.x)?;
    let y_hat = bundle.rec_forward(&f_hat, &t_hat)?;

    let feats_x = bottleneck_features(&bneck_x)?;
    let feats_y = bottleneck_features(&bundle.texture_encode(&batch.y)?)?.detach();

    let l_rec = loss_reconstruction(&y_hat, &batch.y)?;
    let l_corr = loss_correspondence(&f_hat, &batch.f)?;
    let l_adv = loss_ardl_generator(dic, &feats_x, cfg.ardl_convention)?;
    let l_p = loss_perceptual(phi, &y_hat, &batch.y)?;
    let l_g = gan_generator_loss(&bundle.rgb_disc_forward(&y_hat)?, cfg.gan_variant)?;
    let l_dic = loss_ardl_discriminator(dic, &feats_x, &feats_y, cfg.ardl_convention)?;
    let y_hat_const = y_hat.detach();
    let l_d = gan_discriminator_loss(&bundle.rgb_disc_forward(&batch.y)?, &bundle.rgb_disc_forward(&y_hat_const)?)?;

    let mut values = [0.0; 7];
    for (slot, t) in values.iter_mut().zip([&l_rec, &l_corr, &l_adv, &l_p, &l_g, &l_d, &l_dic]) {
        *slot = scalar(t)?;
    }
    let report = total_loss(iteration, values, &cfg.weights)?;

    let w = &cfg.weights;
    let mut objective: Option<Tensor> = None;
    for (weight, term) in [(w.rec, &l_rec), (w.corr, &l_corr), (w.adv, &l_adv), (w.p, &l_p), (w.g, &l_g)] {
        if weight == 0.0 {
            continue;
        }
        let weighted = (term * weight)?;
        objective = Some(match objective {
            Some(acc) => (acc + weighted)?,
            None => weighted,
        });
    }

    let verify = cfg.verify_isolation;
    let mut sums = if verify { Some(GroupChecksums::of(bundle, dic)?) } else { None };
    let mut phase = |name: &str, changed: &str, opt: &mut Adam, loss: Option<&Tensor>| -> Result<()> {
        if let Some(loss) = loss {
            opt.backward_step(loss)?;
        }
        if let Some(before) = sums {
            let after = GroupChecksums::of(bundle, dic)?;
            expect_isolated(name, before, after, changed)?;
            sums = Some(after);
        }
        Ok(())
    };
    phase("generator", "generator", &mut optimizers.gen, objective.as_ref())?;
    phase("dictionary", "D_dic", &mut optimizers.dic, Some(&l_dic))?;
    phase("rgb", "D_rgb", &mut optimizers.rgb, Some(&l_d))?;
    Ok(report)
}

/// Outcome of identity-network pretraining.
pub struct Pretrained {
    pub phi: IdentityNet,
    pub info: IdentityNetInfo,
}

/// Classification accuracy of `phi` over images `x` with `labels`.
pub fn identity_accuracy(phi: &IdentityNet, x: &Tensor, labels: &[u32]) -> Result<f64> {
    let mut correct = 0usize;
    let n = labels.len();
    let chunk = 32;
    for start in (0..n).step_by(chunk) {
        let len = chunk.min(n - start);
        let pred: Vec<u32> = phi.logits(&x.narrow(0, start, len)?)?.argmax(1)?.to_vec1()?;
        correct += pred.iter().zip(&labels[start..start + len]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / n as f64)
}

/// Trains the identity classifier with cross-entropy on every frontal image
/// of `ds` and the profiles within `opts.max_yaw`, then freezes it.
pub fn pretrain_identity_net(
    ds: &Dataset,
    opts: &PretrainOptions,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Pretrained> {
    opts.validate()?;
    if ds.num_identities < 2 {
        return Err(Error::precondition(format!(
            "identity pretraining needs >= 2 identities, got {}",
            ds.num_identities
        )));
    }
    let data = DatasetTensors::new(ds, dtype, device)?;
    let near: Vec<u32> = (0..ds.samples.len() as u32)
        .filter(|&k| (ds.samples[k as usize].yaw_deg as f64).abs() <= opts.max_yaw + 1e-9)
        .collect();
    let near_t = Tensor::new(near.as_slice(), device)?;
    let images = Tensor::cat(&[&data.x.index_select(&near_t, 0)?, &data.y], 0)?;
    let labels: Vec<u32> = near
        .iter()
        .map(|&k| data.labels[k as usize])
        .chain(data.labels.iter().copied())
        .collect();
    let label_t = Tensor::new(labels.as_slice(), device)?;

    let phi = IdentityNet::new(ds.image_size, ds.num_identities, seed, dtype, device)?;
    let vars = init::sorted_vars(phi.vars().expect("fresh network is trainable"));
    let mut opt = Adam::new(vars, opts.learning_rate, 0.9, 0.999)?;
    let n = labels.len();
    let epochs = opts.epochs;
    for epoch in 0..epochs {
        let perm = epoch_permutation(init::derive_seed(seed, "phi-batches"), epoch as u64, n);
        for chunk in perm.chunks(opts.batch_size) {
            let idx: Vec<u32> = chunk.iter().map(|&i| i as u32).collect();
            let idx = Tensor::new(idx.as_slice(), device)?;
            let logits = phi.logits(&images.index_select(&idx, 0)?)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &label_t.index_select(&idx, 0)?)?;
            if !scalar(&loss)?.is_finite() {
                return Err(Error::non_finite("identity cross-entropy"));
            }
            opt.backward_step(&loss)?;
        }
    }
    let frozen = phi.frozen()?;
    let train_accuracy = identity_accuracy(&frozen, &images, &labels)?;
    log::info!("identity network: train accuracy {:.3} after {epochs} epochs", train_accuracy);
    Ok(Pretrained {
        phi: frozen,
        info: IdentityNetInfo {
            image_size: ds.image_size,
            num_identities: ds.num_identities,
            seed,
            epochs,
            max_yaw: opts.max_yaw,
            train_accuracy,
            dtype: dtype_name(dtype).into(),
        },
    })
}

pub fn model_dtype(cfg: &TrainConfig) -> DType {
    if cfg.deterministic {
        DType::F64
    } else {
        DType::F32
    }
}

pub fn network_spec(cfg: &TrainConfig, image_size: usize) -> NetworkSpec {
    NetworkSpec {
        image_size,
        texture_channels: cfg.network.texture_channels,
        base_width: cfg.network.base_width,
        depth: cfg.network.depth,
        codeword_dim: cfg.network.codeword_dim,
    }
}

/// Result of [`train_loop`].
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// Reports of the iterations run by this call.
    pub reports: Vec<LossReport>,
    pub state: TrainState,
}

fn should_checkpoint(iteration: u64, cfg: &TrainConfig) -> bool {
    iteration % cfg.checkpoint_every == 0 || iteration == cfg.max_iter
}

/// Runs the loop until `cfg.max_iter`, writing checkpoints, the CSV log and
/// a resolved config into `out`. With `resume`, training continues from that
/// checkpoint and its log rows are carried over.
pub fn train_loop(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let device = Device::Cpu;
    let dtype = model_dtype(cfg);
    let ds = load_dataset(&cfg.dataset)?;
    let spec = network_spec(cfg, ds.image_size);
    spec.validate()?;
    fs::create_dir_all(out)?;

    let mut resolved = cfg.clone();
    let (mut state, phi_info, mut log_rows, start) = match resume {
        Some(dir) => {
            let ck = load_checkpoint(dir, &device)?;
            if ck.bundle.spec != spec {
                return Err(Error::Config(format!("checkpoint network {:?} differs from config {:?}", ck.bundle.spec, spec)));
            }
            if ck.bundle.dtype != dtype {
                return Err(Error::Config("checkpoint precision differs from config".into()));
            }
            let mut optimizers = Optimizers::new(&ck.bundle, &ck.dic, cfg)?;
            ck.restore_optimizers(&mut optimizers)?;
            let start = ck.iteration();
            let info = ck.manifest.identity.clone();
            let rows = ck.log_rows.iter().take(start as usize).cloned().collect::<Vec<_>>();
            let state = TrainState {
                bundle: ck.bundle,
                dic: ck.dic,
                phi: ck.phi,
                optimizers,
            };
            (state, info, rows, start)
        }
        None => {
            let (phi, info) = match &cfg.identity_net {
                Some(path) => load_identity_net(path, &device)?,
                None => {
                    let p = pretrain_identity_net(
                        &ds,
                        &cfg.pretrain,
                        cfg.seed,
                        dtype,
                        &device,
                    )?;
                    let dir = out.join("identity_net");
                    save_identity_net(&p.phi, &p.info, &dir)?;
                    resolved.identity_net = Some(dir);
                    (p.phi, p.info)
                }
            };
            if info.image_size != ds.image_size {
                return Err(Error::Config(format!(
                    "identity network expects {0}x{0} images, dataset has {1}x{1}",
                    info.image_size, ds.image_size
                )));
            }
            let phi = if phi.dtype() == dtype { phi } else { IdentityNet::from_tensors(phi.tensors(), info.image_size, info.num_identities, dtype, &device)? };
            (TrainState::new(&spec, phi, cfg, dtype, &device)?, info, Vec::new(), 0)
        }
    };
    if start > cfg.max_iter {
        return Err(Error::Config(format!("checkpoint iteration {start} exceeds max_iter {}", cfg.max_iter)));
    }
    fs::write(out.join("config.resolved.txt"), resolved.to_text())?;
    log::info!("training from iteration {start} to {} (seed {})", cfg.max_iter, cfg.seed);

    let data = DatasetTensors::new(&ds, dtype, &device)?;
    let mut log = fs::File::create(out.join(TRAIN_LOG))?;
    writeln!(log, "{LOG_HEADER}")?;
    for row in &log_rows {
        writeln!(log, "{row}")?;
    }
    log.flush()?;

    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    let save = |state: &TrainState, iteration: u64, rows: &[String]| -> Result<PathBuf> {
        let dir = checkpoint_dir(out, iteration);
        save_checkpoint(
            &dir,
            &CheckpointParts {
                iteration,
                config: &resolved,
                bundle: &state.bundle,
                dic: &state.dic,
                phi: &state.phi,
                phi_info: &phi_info,
                optimizers: &state.optimizers,
                log_rows: rows,
            },
        )?;
        Ok(dir)
    };
    if cfg.max_iter == start {
        checkpoints.push(save(&state, start, &log_rows)?);
    }
    let t0 = Instant::now();
    for step in start..cfg.max_iter {
        let iteration = step + 1;
        let batch = data.batch(&batch_indices(cfg.seed, step, cfg.batch_size, data.len()))?;
        let report = train_step(&mut state, &batch, iteration, cfg)?;
        let row = report.csv_row();
        writeln!(log, "{row}")?;
        log.flush()?;
        log_rows.push(row);
        reports.push(report);
        if iteration % 50 == 0 {
            log::info!(
                "iter {iteration}: l_total {:.4} l_corr {:.4} ({:.2} s/iter)",
                report.l_total,
                report.l_corr,
                t0.elapsed().as_secs_f64() / (iteration - start) as f64
            );
        }
        if should_checkpoint(iteration, cfg) {
            checkpoints.push(save(&state, iteration, &log_rows)?);
        }
    }
    let final_checkpoint = checkpoints.last().cloned().expect("at least one checkpoint");
    Ok(TrainOutcome {
        final_checkpoint,
        checkpoints,
        reports,
        state,
    })
}
