#![allow(dead_code)]

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use hfpim::synthdata::{build_dataset, parse_yaws, save_dataset, Dataset};
use hfpim::train::{pretrain_identity_net, NetworkParams, PretrainOptions, TrainConfig};
use hfpim::models::IdentityNet;

pub const YAWS: &str = "0,±30,±60,±90";

/// 32×32 dataset of `ids` identities at the seven standard yaws.
pub fn small_dataset(ids: usize, seed: u64) -> Dataset {
    build_dataset(ids, &parse_yaws(YAWS).unwrap(), 32, 32, seed).unwrap()
}

pub fn write_small_dataset(dir: &Path, ids: usize, seed: u64) -> PathBuf {
    let path = dir.join("data");
    save_dataset(&small_dataset(ids, seed), &path).unwrap();
    path
}

/// Configuration sized for tests: tiny networks and a short phi pretraining.
pub fn small_config(dataset: &Path) -> TrainConfig {
    TrainConfig {
        dataset: dataset.to_path_buf(),
        batch_size: 4,
        network: NetworkParams {
            texture_channels: 4,
            base_width: 4,
            depth: 3,
            codeword_dim: 8,
        },
        ardl_codewords: 4,
        pretrain: PretrainOptions {
            epochs: 2,
            ..PretrainOptions::default()
        },
        ..TrainConfig::default()
    }
}

pub fn small_phi(ds: &Dataset, dtype: DType) -> IdentityNet {
    let opts = PretrainOptions {
        epochs: 3,
        ..PretrainOptions::default()
    };
    pretrain_identity_net(ds, &opts, 0, dtype, &Device::Cpu).unwrap().phi
}

pub fn read_log(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

/// Column `name` of a training log, one value per data row.
pub fn log_column(lines: &[String], name: &str) -> Vec<f64> {
    let col = lines[0].split(',').position(|c| c == name).unwrap();
    lines[1..].iter().map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}
