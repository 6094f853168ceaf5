//! Tensor files and checkpoints.
//!
//! Tensor file layout (all integers little-endian u32):
//! magic `DLTF`, version (1), rank, dims[rank], then row-major IEEE-754
//! f32 payload, little-endian. Values are stored in f32 regardless of the
//! build's arithmetic width.
//!
//! A checkpoint is a directory with `manifest.json` (parameter table,
//! training step, config hash) and `weights.dltf` (one rank-1 blob holding
//! every parameter back to back, ordered by name).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

use super::core::Tensor;
use super::layers::Parameter;

const MAGIC: &[u8; 4] = b"DLTF";
const VERSION: u32 = 1;

pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn parse_tensor(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let fail = |msg: &str| Error::format(origin, msg.to_string());
    if bytes.len() < 12 {
        return Err(fail("file too short for header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, not a tensor file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(fail(&format!("implausible rank {rank}")));
    }
    if bytes.len() < 12 + 4 * rank {
        return Err(fail("truncated dimension table"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 12 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let data_off = 12 + 4 * rank;
    if bytes.len() != data_off + 4 * numel {
        return Err(fail(&format!(
            "payload length mismatch: expected {} bytes of data, found {}",
            4 * numel,
            bytes.len() - data_off
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = data_off + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        data.push(v as Real);
    }
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_bytes(t)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_tensor(&bytes, &path.display().to_string())
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    offset: usize,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    step: u64,
    config_hash: String,
    /// Present only for per-timestep probe decoders: the timestep served.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    probe_t: Option<usize>,
    params: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub step: u64,
    pub config_hash: String,
    pub probe_t: Option<usize>,
}

pub fn save_checkpoint(
    dir: &Path,
    params: &[&Parameter],
    step: u64,
    config_hash: &str,
) -> Result<()> {
    save_checkpoint_tagged(dir, params, step, config_hash, None)
}

/// Checkpoint with an optional probe timestep recorded in the manifest.
pub fn save_checkpoint_tagged(
    dir: &Path,
    params: &[&Parameter],
    step: u64,
    config_hash: &str,
    probe_t: Option<usize>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut ordered: Vec<&Parameter> = params.to_vec();
    ordered.sort_by(|a, b| a.name.cmp(&b.name));
    let mut table = BTreeMap::new();
    let mut blob: Vec<Real> = Vec::new();
    for p in &ordered {
        if table
            .insert(
                p.name.clone(),
                ManifestEntry {
                    offset: blob.len(),
                    shape: p.value.shape().to_vec(),
                    frozen: p.frozen,
                },
            )
            .is_some()
        {
            return Err(Error::contract(
                "save_checkpoint",
                format!("duplicate parameter name {}", p.name),
            ));
        }
        blob.extend_from_slice(p.value.data());
    }
    let manifest =
        Manifest { version: VERSION, step, config_hash: config_hash.into(), probe_t, params: table };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let blob_tensor = Tensor::from_vec(&[blob.len()], blob)?;
    write_tensor(&dir.join("weights.dltf"), &blob_tensor)
}

/// Load weights back into the given parameters, matching by name. Shapes
/// must agree; frozen flags are restored from the manifest. The manifest
/// must cover exactly the given parameter set.
pub fn load_checkpoint(dir: &Path, params: &mut [&mut Parameter]) -> Result<CheckpointMeta> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != VERSION {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let blob = read_tensor(&dir.join("weights.dltf"))?;
    let origin = dir.display().to_string();
    let mut seen = 0usize;
    for p in params.iter_mut() {
        let entry = manifest.params.get(&p.name).ok_or_else(|| {
            Error::format(origin.clone(), format!("parameter {} missing from manifest", p.name))
        })?;
        if entry.shape != p.value.shape() {
            return Err(Error::format(
                origin.clone(),
                format!(
                    "parameter {} shape mismatch: checkpoint {:?}, model {:?}",
                    p.name,
                    entry.shape,
                    p.value.shape()
                ),
            ));
        }
        let n = p.value.numel();
        if entry.offset + n > blob.numel() {
            return Err(Error::format(
                origin.clone(),
                format!("parameter {} extends past the weight blob", p.name),
            ));
        }
        let src = &blob.data()[entry.offset..entry.offset + n];
        p.value.data_mut().copy_from_slice(src);
        p.frozen = entry.frozen;
        seen += 1;
    }
    if seen != manifest.params.len() {
        return Err(Error::format(
            origin,
            format!("manifest has {} parameters, model has {}", manifest.params.len(), seen),
        ));
    }
    Ok(CheckpointMeta {
        step: manifest.step,
        config_hash: manifest.config_hash,
        probe_t: manifest.probe_t,
    })
}

/// Hex SHA-256 over parameter names and raw values, in name order. Used to
/// assert that an operation left a network untouched.
pub fn hash_params(params: &[&Parameter]) -> String {
    use sha2::{Digest, Sha256};
    let mut ordered: Vec<&Parameter> = params.to_vec();
    ordered.sort_by(|a, b| a.name.cmp(&b.name));
    let mut hasher = Sha256::new();
    for p in ordered {
        hasher.update(p.name.as_bytes());
        hasher.update([0u8]);
        for &v in p.value.data() {
            hasher.update((v as f64).to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    #[test]
    fn tensor_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(21);
        let t = Tensor::randn(&[3, 4, 2], &mut rng).map(|v| (v as f32) as Real);
        let path = dir.path().join("t.dltf");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::full(&[4, 4], 1.0);
        let path = dir.path().join("t.dltf");
        write_tensor(&path, &t).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = parse_tensor(b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00", "mem").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn checkpoint_roundtrip_restores_values_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(22);
        let mut a = Parameter::new("net.a", Tensor::randn(&[2, 3], &mut rng));
        let mut b = Parameter::new("net.b", Tensor::randn(&[5], &mut rng));
        b.frozen = true;
        save_checkpoint(dir.path(), &[&a, &b], 17, "cfg123").unwrap();

        let mut a2 = Parameter::new("net.a", Tensor::zeros(&[2, 3]));
        let mut b2 = Parameter::new("net.b", Tensor::zeros(&[5]));
        let meta = load_checkpoint(dir.path(), &mut [&mut a2, &mut b2]).unwrap();
        assert_eq!(meta.step, 17);
        assert_eq!(meta.config_hash, "cfg123");
        assert!(b2.frozen);
        // Values pass through f32; compare after the same quantization.
        let quant = |t: &Tensor| t.map(|v| (v as f32) as Real);
        assert_eq!(quant(&a.value), a2.value);
        assert_eq!(quant(&b.value), b2.value);
        let _ = &mut a;
        let _ = &mut b;
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(23);
        let a = Parameter::new("p.w", Tensor::randn(&[4, 4], &mut rng));
        save_checkpoint(dir1.path(), &[&a], 3, "h").unwrap();
        let mut a2 = Parameter::new("p.w", Tensor::zeros(&[4, 4]));
        load_checkpoint(dir1.path(), &mut [&mut a2]).unwrap();
        save_checkpoint(dir2.path(), &[&a2], 3, "h").unwrap();
        for f in ["manifest.json", "weights.dltf"] {
            let x = std::fs::read(dir1.path().join(f)).unwrap();
            let y = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(x, y, "{f} must round-trip byte-identically");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Parameter::new("p.w", Tensor::zeros(&[2, 2]));
        save_checkpoint(dir.path(), &[&a], 0, "h").unwrap();
        let mut wrong = Parameter::new("p.w", Tensor::zeros(&[2, 3]));
        assert!(load_checkpoint(dir.path(), &mut [&mut wrong]).is_err());
    }

    #[test]
    fn param_hash_tracks_content() {
        let a = Parameter::new("x", Tensor::full(&[3], 1.0));
        let b = Parameter::new("y", Tensor::full(&[3], 2.0));
        let h1 = hash_params(&[&a, &b]);
        let h2 = hash_params(&[&b, &a]);
        assert_eq!(h1, h2, "order independent");
        let c = Parameter::new("y", Tensor::full(&[3], 2.000001));
        assert_ne!(h1, hash_params(&[&a, &c]));
    }
}
