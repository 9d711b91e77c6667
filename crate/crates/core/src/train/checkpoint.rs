use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::Optimizers;
use crate::ardl::DictDiscriminator;
use crate::error::{Error, Result};
use crate::models::{build_models, init, IdentityNet, ModelBundle, NetworkSpec, NETWORK_NAMES};

pub const CHECKPOINT_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.safetensors";
const OPTIM_FILE: &str = "optim.safetensors";
const PHI_FILE: &str = "phi.safetensors";
const LOG_FILE: &str = "train_log.csv";
const MANIFEST: &str = "manifest.json";

pub fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn parse_dtype(name: &str, path: &Path) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::CorruptedHeader {
            path: path.to_path_buf(),
            reason: format!("unknown dtype {other:?}"),
        }),
    }
}

/// Writes a directory under a temporary name, then renames it into place.
fn write_dir_atomic(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::precondition(format!("bad output directory {}", dir.display())))?;
    let tmp = dir.with_file_name(format!("{}.partial", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fill(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    if !dir.is_dir() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::CorruptedHeader {
        path,
        reason: e.to_string(),
    })
}

fn load_blobs(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    candle_core::safetensors::load(path, device).map_err(|e| Error::CorruptedPayload {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn prefixed(vm: &VarMap, prefix: &str, out: &mut HashMap<String, Tensor>) {
    for (name, var) in init::sorted_vars(vm) {
        out.insert(format!("{prefix}.{name}"), var.as_tensor().clone());
    }
}

fn restore(vm: &VarMap, prefix: &str, blobs: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
    for (name, var) in init::sorted_vars(vm) {
        let key = format!("{prefix}.{name}");
        let t = blobs.get(&key).ok_or_else(|| Error::CorruptedPayload {
            path: path.to_path_buf(),
            reason: format!("missing blob {key}"),
        })?;
        if t.dims() != var.dims() {
            return Err(Error::shape(format!("{key}: stored {:?}, expected {:?}", t.dims(), var.dims())));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityNetInfo {
    pub image_size: usize,
    pub num_identities: usize,
    pub seed: u64,
    pub epochs: usize,
    pub max_yaw: f64,
    pub train_accuracy: f64,
    pub dtype: String,
}

#[derive(Serialize, Deserialize)]
struct IdentityManifest {
    kind: String,
    info: IdentityNetInfo,
}

pub fn save_identity_net(phi: &IdentityNet, info: &IdentityNetInfo, dir: &Path) -> Result<()> {
    write_dir_atomic(dir, |tmp| {
        candle_core::safetensors::save(&phi.tensors(), tmp.join(PHI_FILE))?;
        let manifest = IdentityManifest {
            kind: "identity-net".into(),
            info: info.clone(),
        };
        fs::write(tmp.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    })
}

/// Loads a frozen identity network.
pub fn load_identity_net(dir: &Path, device: &Device) -> Result<(IdentityNet, IdentityNetInfo)> {
    let manifest: IdentityManifest = read_manifest(dir)?;
    let dtype = parse_dtype(&manifest.info.dtype, dir)?;
    let blobs = load_blobs(&dir.join(PHI_FILE), device)?;
    let phi = IdentityNet::from_tensors(blobs, manifest.info.image_size, manifest.info.num_identities, dtype, device)?;
    Ok((phi, manifest.info))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub iteration: u64,
    pub dtype: String,
    pub network: NetworkSpec,
    pub ardl_codewords: usize,
    pub identity: IdentityNetInfo,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub config: BTreeMap<String, String>,
}

/// Everything needed to continue training or to frontalize.
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    pub dic: DictDiscriminator,
    pub phi: IdentityNet,
    /// Log rows up to and including the checkpoint iteration.
    pub log_rows: Vec<String>,
    optim: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn iteration(&self) -> u64 {
        self.manifest.iteration
    }

    /// Restores optimizer moments into freshly built optimizers.
    pub fn restore_optimizers(&self, opt: &mut Optimizers) -> Result<()> {
        for (name, adam) in opt.named_mut() {
            let prefix = format!("{name}.");
            let state: HashMap<String, Tensor> = self
                .optim
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|rest| (rest.to_string(), v.clone())))
                .collect();
            let step = *self
                .manifest
                .optimizer_steps
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint has no step count for optimizer {name}")))?;
            adam.load_state(&state, step)?;
        }
        Ok(())
    }
}

pub struct CheckpointParts<'a> {
    pub iteration: u64,
    pub config: &'a TrainConfig,
    pub bundle: &'a ModelBundle,
    pub dic: &'a DictDiscriminator,
    pub phi: &'a IdentityNet,
    pub phi_info: &'a IdentityNetInfo,
    pub optimizers: &'a Optimizers,
    pub log_rows: &'a [String],
}

pub fn save_checkpoint(dir: &Path, parts: &CheckpointParts) -> Result<()> {
    let mut params = HashMap::new();
    for name in NETWORK_NAMES {
        prefixed(parts.bundle.varmap(name).expect("known network"), name, &mut params);
    }
    prefixed(&parts.dic.vars, "dic", &mut params);

    let mut optim = HashMap::new();
    let mut steps = BTreeMap::new();
    for (name, adam) in parts.optimizers.named() {
        let (state, step) = adam.state();
        for (k, v) in state {
            optim.insert(format!("{name}.{k}"), v);
        }
        steps.insert(name.to_string(), step);
    }

    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        iteration: parts.iteration,
        dtype: dtype_name(parts.bundle.dtype).into(),
        network: parts.bundle.spec.clone(),
        ardl_codewords: parts.dic.num_codewords(),
        identity: parts.phi_info.clone(),
        optimizer_steps: steps,
        config: parts.config.entries().into_iter().collect(),
    };

    write_dir_atomic(dir, |tmp| {
        candle_core::safetensors::save(&params, tmp.join(PARAMS_FILE))?;
        candle_core::safetensors::save(&optim, tmp.join(OPTIM_FILE))?;
        candle_core::safetensors::save(&parts.phi.tensors(), tmp.join(PHI_FILE))?;
        let mut log = String::from(crate::losses::LOG_HEADER);
        log.push('\n');
        for row in parts.log_rows {
            log.push_str(row);
            log.push('\n');
        }
        fs::write(tmp.join(LOG_FILE), log)?;
        fs::write(tmp.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    })
}

pub fn load_checkpoint(dir: &Path, device: &Device) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = read_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST);
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::CorruptedHeader {
            path: manifest_path,
            reason: format!("unsupported version {}", manifest.version),
        });
    }
    let dtype = parse_dtype(&manifest.dtype, &manifest_path)?;
    let mut config = TrainConfig::default();
    let entries: Vec<(String, String)> = manifest.config.clone().into_iter().collect();
    config.apply(&entries)?;

    let bundle = build_models(&manifest.network, config.seed, dtype, device)?;
    let dic = DictDiscriminator::new(manifest.ardl_codewords, manifest.network.codeword_dim, config.seed, dtype, device)?;
    let params_path = dir.join(PARAMS_FILE);
    let params = load_blobs(&params_path, device)?;
    for name in NETWORK_NAMES {
        restore(bundle.varmap(name).expect("known network"), name, &params, &params_path)?;
    }
    restore(&dic.vars, "dic", &params, &params_path)?;

    let phi_blobs = load_blobs(&dir.join(PHI_FILE), device)?;
    let phi = IdentityNet::from_tensors(
        phi_blobs,
        manifest.identity.image_size,
        manifest.identity.num_identities,
        dtype,
        device,
    )?;
    let optim = load_blobs(&dir.join(OPTIM_FILE), device)?;

    let log_path = dir.join(LOG_FILE);
    let log_rows = if log_path.exists() {
        fs::read_to_string(&log_path)?
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    Ok(Checkpoint {
        manifest,
        config,
        bundle,
        dic,
        phi,
        log_rows,
        optim,
    })
}

/// Directory name of the checkpoint taken after `iteration` steps.
pub fn checkpoint_dir(out: &Path, iteration: u64) -> PathBuf {
    out.join(format!("ckpt_{iteration}"))
}
