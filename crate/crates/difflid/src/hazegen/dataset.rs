//! On-disk dataset of scene triples (clean, hazy, depth) with a checksummed
//! manifest, plus the loader that validates every invariant on the way in.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hazegen::{apply_scattering, make_scene_pair, HazeParams, HazeRanges, ScenePair, DEPTH_MAX, DEPTH_MIN};
use crate::tensor::io::{parse_tensor, tensor_bytes};
use crate::tensor::Tensor;
use crate::Real;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub ranges: HazeRanges,
    /// Also write 8-bit PNG previews next to the tensors.
    pub export_png: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 200,
            n_test: 16,
            size: 32,
            ranges: HazeRanges::default(),
            export_png: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::contract("dataset_config", "both splits must be non-empty"));
        }
        if self.size != 32 && self.size != 64 {
            return Err(Error::contract(
                "dataset_config",
                format!("size must be 32 or 64, got {}", self.size),
            ));
        }
        self.ranges.validate()
    }
}

/// Manifest entry for one scene triple.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_id: u32,
    pub beta: Real,
    pub airlight: [Real; 3],
    /// role ("clean" | "hazy" | "depth") -> path relative to the dataset dir.
    pub files: BTreeMap<String, String>,
    /// role -> sha256 hex digest of the file bytes.
    pub sha256: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub size: usize,
    pub train: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

/// In-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub size: usize,
    pub train: Vec<ScenePair>,
    pub test: Vec<ScenePair>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path.display().to_string(), source)
}

fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let shape = t.shape();
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let mut data = vec![0u8; n * channels];
    for p in 0..n {
        for c in 0..channels {
            let v = if channels == 1 {
                // Depth preview: map [DEPTH_MIN, DEPTH_MAX] onto [0, 1].
                (t.data()[p] - DEPTH_MIN) / (DEPTH_MAX - DEPTH_MIN)
            } else {
                t.data()[c * n + p]
            };
            data[p * channels + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(if channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path.display().to_string(), format!("png header: {e}")))?;
    writer
        .write_image_data(&data)
        .map_err(|e| Error::format(path.display().to_string(), format!("png payload: {e}")))?;
    Ok(())
}

fn build_split(
    out_dir: &Path,
    split: &str,
    id_base: u32,
    count: usize,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Vec<SceneRecord>> {
    let split_dir = out_dir.join(split);
    fs::create_dir_all(&split_dir).map_err(|e| io_err(&split_dir, e))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let image_id = id_base + i as u32;
        let pair = make_scene_pair(image_id, cfg.size, &cfg.ranges, seed)?;
        let mut files = BTreeMap::new();
        let mut digests = BTreeMap::new();
        for (role, tensor) in
            [("clean", &pair.clean), ("hazy", &pair.hazy), ("depth", &pair.depth)]
        {
            let rel = format!("{split}/scene_{image_id:05}_{role}.dltf");
            let bytes = tensor_bytes(tensor);
            let path = out_dir.join(&rel);
            fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
            digests.insert(role.to_string(), sha256_hex(&bytes));
            files.insert(role.to_string(), rel);
            if cfg.export_png {
                let png_path = split_dir.join(format!("scene_{image_id:05}_{role}.png"));
                write_png(&png_path, tensor)?;
            }
        }
        records.push(SceneRecord {
            image_id,
            beta: pair.params.beta,
            airlight: pair.params.airlight,
            files,
            sha256: digests,
        });
    }
    Ok(records)
}

/// Generate the dataset under `out_dir`. Fully deterministic in
/// (config, seed): regenerating produces byte-identical files.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let train = build_split(out_dir, "train", 0, cfg.n_train, cfg, seed)?;
    let test = build_split(out_dir, "test", cfg.n_train as u32, cfg.n_test, cfg, seed)?;
    let manifest = DatasetManifest { version: MANIFEST_VERSION, seed, size: cfg.size, train, test };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest)
}

fn corrupt(scene: &str, message: impl Into<String>) -> Error {
    Error::CorruptDataset { scene: scene.to_string(), message: message.into() }
}

fn load_scene(dir: &Path, split: &str, rec: &SceneRecord, size: usize) -> Result<ScenePair> {
    let scene = format!("{split}/{:05}", rec.image_id);
    let mut tensors: BTreeMap<&str, Tensor> = BTreeMap::new();
    for role in ["clean", "hazy", "depth"] {
        let rel = rec
            .files
            .get(role)
            .ok_or_else(|| corrupt(&scene, format!("manifest lists no {role} file")))?;
        let expected = rec
            .sha256
            .get(role)
            .ok_or_else(|| corrupt(&scene, format!("manifest lists no {role} checksum")))?;
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(corrupt(
                &scene,
                format!("{role} checksum mismatch: manifest {expected}, file {actual}"),
            ));
        }
        let tensor = parse_tensor(&bytes, rel)
            .map_err(|e| corrupt(&scene, format!("{role} tensor unreadable: {e}")))?;
        let want: &[usize] = if role == "depth" { &[1, size, size] } else { &[3, size, size] };
        if tensor.shape() != want {
            return Err(corrupt(
                &scene,
                format!("{role} shape {:?}, expected {:?}", tensor.shape(), want),
            ));
        }
        tensors.insert(role, tensor);
    }
    let clean = tensors.remove("clean").unwrap();
    let hazy = tensors.remove("hazy").unwrap();
    let depth = tensors.remove("depth").unwrap();

    let slack = 1e-6;
    if clean.data().iter().any(|v| *v < -slack || *v > 1.0 + slack) {
        return Err(corrupt(&scene, "clean image leaves [0,1]"));
    }
    if hazy.data().iter().any(|v| *v < -slack || *v > 1.0 + slack) {
        return Err(corrupt(&scene, "hazy image leaves [0,1]"));
    }
    if depth.data().iter().any(|v| *v < DEPTH_MIN - slack || *v > DEPTH_MAX + slack) {
        return Err(corrupt(
            &scene,
            format!("depth leaves [{DEPTH_MIN},{DEPTH_MAX}]"),
        ));
    }
    let params = HazeParams { airlight: rec.airlight, beta: rec.beta };
    // The stored hazy image must be the scattering model applied to the
    // stored clean image and depth map (up to storage quantization).
    let recomputed = apply_scattering(&clean, &depth, &params)
        .map_err(|e| corrupt(&scene, format!("stored haze parameters invalid: {e}")))?;
    let mad = recomputed.mean_abs_diff(&hazy)?;
    if mad > 1e-6 {
        return Err(corrupt(
            &scene,
            format!("hazy image inconsistent with scattering model (mean abs diff {mad:.2e})"),
        ));
    }
    Ok(ScenePair { image_id: rec.image_id, clean, hazy, depth, params })
}

fn load_split(dir: &Path, split: &str, records: &[SceneRecord], size: usize) -> Result<Vec<ScenePair>> {
    let mut pairs = Vec::with_capacity(records.len());
    let mut prev_id: Option<u32> = None;
    for rec in records {
        if let Some(p) = prev_id {
            if rec.image_id <= p {
                return Err(corrupt(
                    &format!("{split}/{:05}", rec.image_id),
                    "image ids must be strictly increasing within a split",
                ));
            }
        }
        prev_id = Some(rec.image_id);
        pairs.push(load_scene(dir, split, rec, size)?);
    }
    Ok(pairs)
}

/// Load and validate a dataset directory. Checks manifest version, file
/// checksums, tensor shapes, value ranges, id ordering, and that each hazy
/// image matches the scattering model applied to its clean image.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!("unsupported manifest version {}, expected {MANIFEST_VERSION}", manifest.version),
        ));
    }
    if manifest.size != 32 && manifest.size != 64 {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!("manifest size must be 32 or 64, got {}", manifest.size),
        ));
    }
    let train = load_split(dir, "train", &manifest.train, manifest.size)?;
    let test = load_split(dir, "test", &manifest.test, manifest.size)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::format(manifest_path.display().to_string(), "both splits must be non-empty"));
    }
    Ok(Dataset { size: manifest.size, train, test })
}
