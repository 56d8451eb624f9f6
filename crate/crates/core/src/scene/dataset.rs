use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{generate_scene, SceneConfig};
use super::render::{render_sample, RenderConfig};
use super::{RgbImage, SceneSample};
use crate::error::{Error, Result};
use crate::map_core::{BevMaskSet, BinaryMask, CameraParams, LineMasks, MapClass, VectorMap};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    /// Scene `i` is generated from seed `master_seed + i`.
    pub master_seed: u64,
    pub scene: SceneConfig,
    pub render: RenderConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_scenes: 8,
            master_seed: 0,
            scene: SceneConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub seed: u64,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub scenes: Vec<SceneEntry>,
    /// SHA-256 over every `path sha256` line in manifest order.
    pub dataset_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SceneSample>,
}

pub(crate) fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn line_mask_name(class: MapClass) -> String {
    format!("line_{}.pgm", class.name())
}

/// Serialized files of one scene, in a fixed order.
fn scene_files(sample: &SceneSample) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for (j, img) in sample.images.iter().enumerate() {
        files.push((format!("cam_{j}.ppm"), img.to_ppm()));
    }
    files.push(("rig.json".into(), serde_json::to_vec_pretty(&sample.rig)?));
    files.push(("gt_map.json".into(), sample.gt_map.to_json()?.into_bytes()));
    files.push((
        "bev_drivable.pgm".into(),
        sample.gt_bev_masks.drivable.to_pgm(),
    ));
    files.push((
        "bev_ped_crossing.pgm".into(),
        sample.gt_bev_masks.ped_crossing.to_pgm(),
    ));
    for class in MapClass::ALL {
        files.push((
            line_mask_name(class),
            sample.gt_line_masks.get(class).to_pgm(),
        ));
    }
    for (j, m) in sample.gt_pv_masks.iter().enumerate() {
        files.push((format!("pv_{j}.pgm"), m.to_pgm()));
    }
    Ok(files)
}

fn dataset_hash(scenes: &[SceneEntry]) -> String {
    let mut h = Sha256::new();
    for s in scenes {
        for f in &s.files {
            h.update(format!("{} {}\n", f.path, f.sha256).as_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Generates and renders all scenes in memory (in parallel, order-stable).
pub fn generate_samples(cfg: &DatasetConfig) -> Result<Vec<SceneSample>> {
    (0..cfg.num_scenes)
        .into_par_iter()
        .map(|i| {
            let spec = generate_scene(cfg.master_seed + i as u64, &cfg.scene)?;
            render_sample(&spec, &cfg.scene.grid, &cfg.render)
        })
        .collect()
}

/// Writes the dataset to `out_dir` and returns its manifest. Output bytes
/// depend only on `cfg`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.num_scenes == 0 {
        return Err(Error::InvalidConfig("num_scenes must be positive".into()));
    }
    let samples = generate_samples(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scenes: Vec<SceneEntry> = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| -> Result<SceneEntry> {
            let dir_name = format!("scene_{i:04}");
            let dir = out_dir.join(&dir_name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut files = Vec::new();
            for (name, bytes) in scene_files(sample)? {
                let path = dir.join(&name);
                std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                files.push(FileEntry {
                    path: format!("{dir_name}/{name}"),
                    sha256: sha_hex(&bytes),
                });
            }
            Ok(SceneEntry {
                index: i,
                seed: cfg.master_seed + i as u64,
                files,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        config: cfg.clone(),
        dataset_sha256: dataset_hash(&scenes),
        scenes,
    };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {} (expected {DATASET_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads a dataset written by [`build_dataset`], verifying every file hash.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    if dataset_hash(&manifest.scenes) != manifest.dataset_sha256 {
        return Err(Error::Format(
            "dataset hash does not match its file list".into(),
        ));
    }
    let samples = manifest
        .scenes
        .par_iter()
        .map(|scene| load_scene(root, scene))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

fn load_scene(root: &Path, scene: &SceneEntry) -> Result<SceneSample> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let entry = scene
            .files
            .iter()
            .find(|f| f.path.rsplit('/').next() == Some(name))
            .ok_or_else(|| Error::Format(format!("scene {} lacks {name}", scene.index)))?;
        let path: PathBuf = root.join(&entry.path);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha_hex(&bytes) != entry.sha256 {
            return Err(Error::Format(format!(
                "checksum mismatch for {}",
                entry.path
            )));
        }
        Ok(bytes)
    };
    let rig: Vec<CameraParams> = serde_json::from_slice(&read("rig.json")?)?;
    let gt_map = VectorMap::from_json(
        std::str::from_utf8(&read("gt_map.json")?).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    let mut images = Vec::with_capacity(rig.len());
    let mut pv = Vec::with_capacity(rig.len());
    for j in 0..rig.len() {
        images.push(RgbImage::from_ppm(&read(&format!("cam_{j}.ppm"))?)?);
        pv.push(BinaryMask::from_pgm(&read(&format!("pv_{j}.pgm"))?)?);
    }
    let line =
        |c: MapClass| -> Result<BinaryMask> { BinaryMask::from_pgm(&read(&line_mask_name(c))?) };
    Ok(SceneSample {
        images,
        rig,
        gt_map,
        gt_bev_masks: BevMaskSet {
            drivable: BinaryMask::from_pgm(&read("bev_drivable.pgm")?)?,
            ped_crossing: BinaryMask::from_pgm(&read("bev_ped_crossing.pgm")?)?,
        },
        gt_line_masks: LineMasks {
            masks: [
                line(MapClass::Divider)?,
                line(MapClass::PedCrossing)?,
                line(MapClass::Boundary)?,
            ],
        },
        gt_pv_masks: pv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            num_scenes: 3,
            master_seed: 11,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn build_is_byte_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = build_dataset(&small(), a.path()).unwrap();
        let mb = build_dataset(&small(), b.path()).unwrap();
        assert_eq!(ma.dataset_sha256, mb.dataset_sha256);
        let ja = std::fs::read(a.path().join("manifest.json")).unwrap();
        let jb = std::fs::read(b.path().join("manifest.json")).unwrap();
        assert_eq!(ja, jb);
        let other = DatasetConfig {
            master_seed: 12,
            ..small()
        };
        let c = tempfile::tempdir().unwrap();
        assert_ne!(
            build_dataset(&other, c.path()).unwrap().dataset_sha256,
            ma.dataset_sha256
        );
    }

    #[test]
    fn load_round_trips_samples() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&small(), dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let fresh = generate_samples(&small()).unwrap();
        assert_eq!(loaded.samples.len(), 3);
        for (l, f) in loaded.samples.iter().zip(&fresh) {
            assert_eq!(l.images, f.images);
            assert_eq!(l.rig, f.rig);
            assert_eq!(l.gt_bev_masks, f.gt_bev_masks);
            assert_eq!(l.gt_line_masks, f.gt_line_masks);
            assert_eq!(l.gt_pv_masks, f.gt_pv_masks);
            assert_eq!(l.gt_map.to_json().unwrap(), f.gt_map.to_json().unwrap());
        }
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&small(), dir.path()).unwrap();
        let victim = dir.path().join("scene_0001/bev_drivable.pgm");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&victim, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }
}
