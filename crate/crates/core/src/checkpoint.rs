//! On-disk model format: a directory holding `header.json` (format version,
//! architecture, tensor index) and `weights.bin` (little-endian f64 values of
//! every tensor, concatenated in index order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::segnet::{SegArch, SegModel};
use crate::tensor::{ParamSet, Tensor};
use crate::uncertainty::{UncArch, UncHead};

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchConfig {
    Seg(SegArch),
    Unc { arch: UncArch, eps_floor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub arch: ArchConfig,
    /// Hash of the segmentation architecture this checkpoint belongs to
    /// (the model itself, or the backbone a head was trained on).
    pub arch_hash: String,
    /// Hash of the run configuration that produced the checkpoint.
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn arch_hash(arch: &SegArch) -> String {
    sha256_hex(serde_json::to_string(arch).expect("architecture serializes").as_bytes())
}

fn write(dir: &Path, arch: ArchConfig, hash: String, config_hash: &str, params: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.entries.len());
    let mut bytes = Vec::with_capacity(params.count() * 8);
    for (name, t) in &params.entries {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            byte_offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        arch,
        arch_hash: hash,
        config_hash: config_hash.to_string(),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    fs::write(dir.join(HEADER_FILE), text)?;
    fs::write(dir.join(WEIGHTS_FILE), bytes)?;
    Ok(())
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint".into(),
        detail: detail.into(),
    }
}

/// Reads the header and every tensor of a checkpoint directory.
pub fn read(dir: &Path) -> Result<(Header, ParamSet)> {
    let header_path = dir.join(HEADER_FILE);
    let weights_path = dir.join(WEIGHTS_FILE);
    for p in [&header_path, &weights_path] {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let header: Header = serde_json::from_str(&fs::read_to_string(&header_path)?)
        .map_err(|e| format_err(format!("{}: {}", header_path.display(), e)))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(format!(
            "format_version {} is not supported (expected {})",
            header.format_version, FORMAT_VERSION
        )));
    }
    let bytes = fs::read(&weights_path)?;
    let mut entries = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        if e.byte_offset != expected_offset {
            return Err(format_err(format!("tensor {} starts at byte {}, expected {}", e.name, e.byte_offset, expected_offset)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + 8 * n;
        if end > bytes.len() {
            return Err(format_err(format!("tensor {} runs past the end of {}", e.name, WEIGHTS_FILE)));
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected_offset = end as u64;
    }
    if expected_offset as usize != bytes.len() {
        return Err(format_err(format!("{} has {} trailing bytes", WEIGHTS_FILE, bytes.len() - expected_offset as usize)));
    }
    Ok((header, ParamSet::new(entries)))
}

pub fn save_seg(dir: &Path, model: &SegModel, config_hash: &str) -> Result<()> {
    write(dir, ArchConfig::Seg(model.arch.clone()), arch_hash(&model.arch), config_hash, &model.params())
}

pub fn load_seg(dir: &Path) -> Result<(SegModel, Header)> {
    let (header, params) = read(dir)?;
    let ArchConfig::Seg(arch) = &header.arch else {
        return Err(Error::Incompatible(format!("{} is not a segmentation checkpoint", dir.display())));
    };
    let model = SegModel::from_params(arch, &params)?;
    Ok((model, header))
}

pub fn save_unc(dir: &Path, head: &UncHead, config_hash: &str) -> Result<()> {
    let arch = ArchConfig::Unc {
        arch: head.arch.clone(),
        eps_floor: head.eps_floor,
    };
    write(dir, arch, arch_hash(&head.arch.seg), config_hash, &head.params())
}

pub fn load_unc(dir: &Path) -> Result<(UncHead, Header)> {
    let (header, params) = read(dir)?;
    let ArchConfig::Unc { arch, eps_floor } = &header.arch else {
        return Err(Error::Incompatible(format!("{} is not an uncertainty-head checkpoint", dir.display())));
    };
    let head = UncHead::from_params(arch, *eps_floor, &params)?;
    Ok((head, header))
}

/// Loads a backbone and a head and checks that the head was built for that
/// backbone architecture.
pub fn load_pair(seg_dir: &Path, unc_dir: &Path) -> Result<(SegModel, UncHead)> {
    let (seg, sh) = load_seg(seg_dir)?;
    let (head, uh) = load_unc(unc_dir)?;
    if sh.arch_hash != uh.arch_hash || head.arch.seg != seg.arch {
        return Err(Error::Incompatible(format!(
            "segmentation arch hash {} does not match head arch hash {}",
            sh.arch_hash, uh.arch_hash
        )));
    }
    Ok((seg, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::DEFAULT_EPS_FLOOR;

    fn arch() -> SegArch {
        SegArch {
            height: 8,
            width: 8,
            latent_dim: 4,
            widths: [2, 3],
        }
    }

    #[test]
    fn seg_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = SegModel::init(&arch(), 3).unwrap();
        save_seg(dir.path(), &m, "abc").unwrap();
        let (back, h) = load_seg(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(h.config_hash, "abc");
        let bytes = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        assert_eq!(bytes.len(), 8 * m.param_count());
        assert_eq!(&bytes[..8], &m.conv1.weight.data()[0].to_le_bytes());
    }

    #[test]
    fn pair_compatibility() {
        let dir = tempfile::tempdir().unwrap();
        let seg = SegModel::init(&arch(), 3).unwrap();
        let unc_arch = UncArch {
            seg: arch(),
            head_width: 3,
        };
        let head = UncHead::init(&unc_arch, DEFAULT_EPS_FLOOR, 5).unwrap();
        save_seg(&dir.path().join("seg"), &seg, "x").unwrap();
        save_unc(&dir.path().join("unc"), &head, "x").unwrap();
        let (_, h2) = load_pair(&dir.path().join("seg"), &dir.path().join("unc")).unwrap();
        assert_eq!(h2, head);

        let mut other = arch();
        other.latent_dim = 6;
        let seg2 = SegModel::init(&other, 3).unwrap();
        save_seg(&dir.path().join("seg2"), &seg2, "x").unwrap();
        let err = load_pair(&dir.path().join("seg2"), &dir.path().join("unc")).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)));
        assert!(load_seg(&dir.path().join("unc")).is_err());
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = SegModel::init(&arch(), 3).unwrap();
        save_seg(dir.path(), &m, "").unwrap();
        let p = dir.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_seg(dir.path()), Err(Error::Format { .. })));
        fs::remove_file(&p).unwrap();
        assert!(matches!(load_seg(dir.path()), Err(Error::MissingFile(_))));
    }
}
