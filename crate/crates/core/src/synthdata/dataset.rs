use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{CorrField, ImageTensor, Mask, Planes};

use super::identity::{make_identity, render_ground_truth_texture, IdentitySpec};
use super::render::{background_gray, render_view};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "samples.bin";

/// One training tuple: profile input, frontal target and the frontal
/// view's correspondence field and facial mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub profile: ImageTensor,
    pub frontal: ImageTensor,
    pub corr_field: CorrField,
    pub facial_mask: Mask,
    pub identity: u32,
    pub yaw_deg: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
    pub image_size: usize,
    pub texture_size: usize,
    pub num_identities: usize,
    pub yaws: Vec<f64>,
    pub seed: u64,
    pub split: Split,
    /// Seed passed to [`make_identity`] for each label.
    pub identity_seeds: Vec<i64>,
}

impl Dataset {
    /// Identity spec behind a label, with the label filled in.
    pub fn identity_spec(&self, label: u32) -> Result<IdentitySpec> {
        let seed = *self
            .identity_seeds
            .get(label as usize)
            .ok_or_else(|| Error::precondition(format!("no identity {label}")))?;
        let mut spec = make_identity(seed)?;
        spec.id = label;
        Ok(spec)
    }

    /// Partitions by identity: the last `num_test` labels form the test
    /// split. Labels are renumbered densely in both halves.
    pub fn split_by_identity(&self, num_test: usize) -> Result<(Dataset, Dataset)> {
        if num_test == 0 || num_test >= self.num_identities {
            return Err(Error::precondition(format!(
                "cannot hold out {num_test} of {} identities",
                self.num_identities
            )));
        }
        let cut = (self.num_identities - num_test) as u32;
        let part = |keep: &dyn Fn(u32) -> bool, offset: u32, split: Split| Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| keep(s.identity))
                .map(|s| SampleRecord {
                    identity: s.identity - offset,
                    ..s.clone()
                })
                .collect(),
            image_size: self.image_size,
            texture_size: self.texture_size,
            num_identities: if split == Split::Train {
                cut as usize
            } else {
                num_test
            },
            yaws: self.yaws.clone(),
            seed: self.seed,
            split,
            identity_seeds: self
                .identity_seeds
                .iter()
                .enumerate()
                .filter(|(k, _)| keep(*k as u32))
                .map(|(_, &s)| s)
                .collect(),
        };
        Ok((
            part(&|id| id < cut, 0, Split::Train),
            part(&|id| id >= cut, cut, Split::Test),
        ))
    }

    pub fn sample_bytes(image_size: usize) -> usize {
        9 * image_size * image_size * 4 + 8
    }

    fn encode_sample(s: &SampleRecord, out: &mut Vec<u8>) {
        let mut put = |xs: &[f32]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(s.profile.data());
        put(s.frontal.data());
        put(s.corr_field.planes().data());
        let mask: Vec<f32> = s
            .facial_mask
            .data()
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        put(&mask);
        out.extend_from_slice(&s.identity.to_le_bytes());
        out.extend_from_slice(&s.yaw_deg.to_le_bytes());
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * Self::sample_bytes(self.image_size));
        for s in &self.samples {
            Self::encode_sample(s, &mut out);
        }
        out
    }

    /// SHA-256 of the binary payload.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.payload()))
    }

    /// Indices of the samples for each yaw in `self.yaws`, in order.
    pub fn indices_by_yaw(&self) -> Vec<(f64, Vec<usize>)> {
        self.yaws
            .iter()
            .map(|&y| {
                let idx = self
                    .samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.yaw_deg as f64 == y as f32 as f64)
                    .map(|(k, _)| k)
                    .collect();
                (y, idx)
            })
            .collect()
    }
}

/// Profile at `yaw_deg`; frontal target, field and mask at yaw 0. Both views
/// share one background level.
pub fn generate_pair(
    spec: &IdentitySpec,
    yaw_deg: f64,
    image_size: usize,
    texture_size: usize,
) -> Result<SampleRecord> {
    let texture = render_ground_truth_texture(spec, texture_size)?;
    pair_with_texture(spec, &texture, yaw_deg, image_size)
}

fn pair_with_texture(
    spec: &IdentitySpec,
    texture: &Planes<f32>,
    yaw_deg: f64,
    image_size: usize,
) -> Result<SampleRecord> {
    let bg = background_gray(spec, yaw_deg);
    let profile = render_view(spec, texture, yaw_deg, image_size, bg)?;
    let frontal = if yaw_deg == 0.0 {
        profile.clone()
    } else {
        render_view(spec, texture, 0.0, image_size, bg)?
    };
    Ok(SampleRecord {
        profile: profile.image,
        frontal: frontal.image,
        corr_field: frontal.corr_field,
        facial_mask: frontal.facial_mask,
        identity: spec.id,
        yaw_deg: yaw_deg as f32,
    })
}

fn identity_seed(dataset_seed: u64, label: usize) -> i64 {
    let mut h = dataset_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(label as u64 + 1);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 2) as i64
}

/// `num_identities × yaws.len()` samples, identity-major, a pure function
/// of the arguments.
pub fn build_dataset(
    num_identities: usize,
    yaws: &[f64],
    image_size: usize,
    texture_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_identities < 2 {
        return Err(Error::precondition(format!(
            "need at least 2 identities, got {num_identities}"
        )));
    }
    if yaws.is_empty() {
        return Err(Error::precondition("yaw list is empty"));
    }
    let identity_seeds: Vec<i64> = (0..num_identities).map(|k| identity_seed(seed, k)).collect();
    let per_identity: Vec<Vec<SampleRecord>> = identity_seeds
        .par_iter()
        .enumerate()
        .map(|(label, &s)| {
            let mut spec = make_identity(s)?;
            spec.id = label as u32;
            let texture = render_ground_truth_texture(&spec, texture_size)?;
            yaws.iter()
                .map(|&yaw| pair_with_texture(&spec, &texture, yaw, image_size))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        samples: per_identity.into_iter().flatten().collect(),
        image_size,
        texture_size,
        num_identities,
        yaws: yaws.to_vec(),
        seed,
        split: Split::Train,
        identity_seeds,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    offset: u64,
    identity: u32,
    yaw_deg: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    image_size: usize,
    texture_size: usize,
    num_identities: usize,
    yaws: Vec<f64>,
    seed: u64,
    split: Split,
    sample_count: usize,
    identity_seeds: Vec<i64>,
    samples: Vec<SampleEntry>,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stride = Dataset::sample_bytes(ds.image_size) as u64;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        image_size: ds.image_size,
        texture_size: ds.texture_size,
        num_identities: ds.num_identities,
        yaws: ds.yaws.clone(),
        seed: ds.seed,
        split: ds.split,
        sample_count: ds.samples.len(),
        identity_seeds: ds.identity_seeds.clone(),
        samples: ds
            .samples
            .iter()
            .enumerate()
            .map(|(k, s)| SampleEntry {
                offset: k as u64 * stride,
                identity: s.identity,
                yaw_deg: s.yaw_deg,
            })
            .collect(),
    };
    write_atomic(&dir.join(PAYLOAD_FILE), &ds.payload())?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_f32s(bytes: &[u8], count: usize, cursor: &mut usize) -> Vec<f32> {
    let out = bytes[*cursor..*cursor + 4 * count]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    *cursor += 4 * count;
    out
}

/// Size `N` such that `count` samples of size `N` fill `len` bytes exactly.
fn implied_image_size(len: usize, count: usize) -> Option<usize> {
    if count == 0 || len % count != 0 {
        return None;
    }
    let per = len / count;
    if per < 8 || (per - 8) % 36 != 0 {
        return None;
    }
    let area = (per - 8) / 36;
    let n = (area as f64).sqrt().round() as usize;
    (n * n == area).then_some(n)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let payload_path = dir.join(PAYLOAD_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let header_err = |reason: String| Error::CorruptedHeader {
        path: manifest_path.clone(),
        reason,
    };
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&manifest_path)?).map_err(|e| header_err(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(header_err(format!("unsupported version {}", manifest.version)));
    }
    if manifest.samples.len() != manifest.sample_count
        || manifest.identity_seeds.len() != manifest.num_identities
    {
        return Err(header_err("sample or identity counts disagree".into()));
    }
    if !payload_path.exists() {
        return Err(Error::MissingFile(payload_path));
    }
    let bytes = fs::read(&payload_path)?;
    let n = manifest.image_size;
    let stride = Dataset::sample_bytes(n);
    let payload_err = |reason: String| Error::CorruptedPayload {
        path: payload_path.clone(),
        reason,
    };
    if bytes.len() != stride * manifest.sample_count {
        if let Some(found) = implied_image_size(bytes.len(), manifest.sample_count) {
            if found != n {
                return Err(Error::shape(format!(
                    "manifest declares image size {n} but payload holds size {found}"
                )));
            }
        }
        return Err(payload_err(format!(
            "expected {} bytes, found {}",
            stride * manifest.sample_count,
            bytes.len()
        )));
    }

    let mut samples = Vec::with_capacity(manifest.sample_count);
    for (k, entry) in manifest.samples.iter().enumerate() {
        if entry.offset != (k * stride) as u64 {
            return Err(Error::shape(format!(
                "sample {k} offset {} does not match stride {stride}",
                entry.offset
            )));
        }
        let mut cur = entry.offset as usize;
        let profile = Planes::from_vec(3, n, n, read_f32s(&bytes, 3 * n * n, &mut cur))?;
        let frontal = Planes::from_vec(3, n, n, read_f32s(&bytes, 3 * n * n, &mut cur))?;
        let field = CorrField::from_planes(Planes::from_vec(2, n, n, read_f32s(&bytes, 2 * n * n, &mut cur))?)?;
        let mask_f = read_f32s(&bytes, n * n, &mut cur);
        if mask_f.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(payload_err(format!("sample {k} mask is not binary")));
        }
        let identity = u32::from_le_bytes(bytes[cur..cur + 4].try_into().unwrap());
        let yaw_deg = f32::from_le_bytes(bytes[cur + 4..cur + 8].try_into().unwrap());
        if identity != entry.identity || yaw_deg.to_bits() != entry.yaw_deg.to_bits() {
            return Err(payload_err(format!("sample {k} trailer disagrees with manifest")));
        }
        samples.push(SampleRecord {
            profile,
            frontal,
            corr_field: field,
            facial_mask: Mask::new(n, n, mask_f.iter().map(|&m| m == 1.0).collect())?,
            identity,
            yaw_deg,
        });
    }
    Ok(Dataset {
        samples,
        image_size: n,
        texture_size: manifest.texture_size,
        num_identities: manifest.num_identities,
        yaws: manifest.yaws,
        seed: manifest.seed,
        split: manifest.split,
        identity_seeds: manifest.identity_seeds,
    })
}

/// Parses a yaw list such as `0,±30,-60,90`; `±x` expands to `-x, x`.
pub fn parse_yaws(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for raw in text.split(',') {
        let item = raw.trim();
        if item.is_empty() {
            continue;
        }
        let bad = || Error::Config(format!("bad yaw entry {item:?}"));
        if let Some(rest) = item.strip_prefix('±').or_else(|| item.strip_prefix("+-")) {
            let y: f64 = rest.parse().map_err(|_| bad())?;
            out.push(-y);
            out.push(y);
        } else {
            out.push(item.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(Error::precondition("yaw list is empty"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warpcore::warp_texture;

    fn yaws7() -> Vec<f64> {
        parse_yaws("0,±30,±60,±90").unwrap()
    }

    #[test]
    fn yaw_parsing() {
        assert_eq!(yaws7(), vec![0.0, -30.0, 30.0, -60.0, 60.0, -90.0, 90.0]);
        assert!(parse_yaws("").is_err());
        assert!(parse_yaws("0,abc").is_err());
    }

    #[test]
    fn pair_at_zero_yaw_is_identical() {
        let spec = make_identity(11).unwrap();
        let s = generate_pair(&spec, 0.0, 32, 32).unwrap();
        assert_eq!(s.profile, s.frontal);
        let s60 = generate_pair(&spec, 60.0, 32, 32).unwrap();
        assert_ne!(s60.profile, s60.frontal);
        assert_eq!(s60.identity, s.identity);
        // the field belongs to the frontal target
        assert_eq!(s60.corr_field, s.corr_field);
    }

    #[test]
    fn warp_of_ground_truth_reproduces_frontal() {
        let spec = make_identity(3).unwrap();
        let tex = render_ground_truth_texture(&spec, 64).unwrap();
        let s = generate_pair(&spec, 30.0, 64, 64).unwrap();
        let warped = warp_texture(&s.corr_field.to_f64(), &tex.to_f64()).unwrap();
        for c in 0..3 {
            for i in 0..64 {
                for j in 0..64 {
                    if s.facial_mask.get(i, j) {
                        let d = (warped.get(c, i, j) - s.frontal.get(c, i, j) as f64).abs();
                        assert!(d < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn counts_and_determinism() {
        let a = build_dataset(10, &yaws7(), 16, 16, 3).unwrap();
        assert_eq!(a.samples.len(), 70);
        let b = build_dataset(10, &yaws7(), 16, 16, 3).unwrap();
        assert_eq!(a, b);
        let c = build_dataset(10, &yaws7(), 16, 16, 4).unwrap();
        assert_ne!(a.checksum(), c.checksum());
        assert!(build_dataset(1, &yaws7(), 16, 16, 3).is_err());
        assert!(build_dataset(3, &[], 16, 16, 3).is_err());
    }

    #[test]
    fn identity_split_is_disjoint() {
        let ds = build_dataset(6, &yaws7(), 16, 16, 0).unwrap();
        let (train, test) = ds.split_by_identity(2).unwrap();
        assert_eq!(train.samples.len(), 28);
        assert_eq!(test.samples.len(), 14);
        assert!(test.identity_seeds.iter().all(|s| !train.identity_seeds.contains(s)));
        assert!(test.samples.iter().all(|s| s.identity < 2));
        assert_eq!(test.identity_spec(1).unwrap().texture_seed, ds.identity_seeds[5] as u64);
    }

    #[test]
    fn field_shared_across_yaws() {
        let ds = build_dataset(2, &yaws7(), 24, 24, 9).unwrap();
        for s in &ds.samples[1..7] {
            assert_eq!(s.corr_field, ds.samples[0].corr_field);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(3, &[0.0, 45.0], 16, 16, 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.checksum(), ds.checksum());
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));

        let ds = build_dataset(2, &[0.0, 30.0], 16, 16, 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let payload = dir.path().join(PAYLOAD_FILE);
        let bytes = fs::read(&payload).unwrap();
        fs::write(&payload, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptedPayload { .. })));

        let small = build_dataset(2, &[0.0, 30.0], 8, 16, 1).unwrap();
        fs::write(&payload, small.payload()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::ShapeMismatch(_))));

        fs::write(dir.path().join(MANIFEST_FILE), b"{ not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptedHeader { .. })));
    }
}
