//! Procedural road scenes, multi-camera rendering and on-disk datasets.

mod dataset;
mod generate;
mod render;

pub(crate) use dataset::sha_hex;
pub use dataset::{
    build_dataset, generate_samples, load_dataset, read_manifest, Dataset, DatasetConfig,
    DatasetManifest, FileEntry, SceneEntry, DATASET_FORMAT_VERSION,
};
pub use generate::{generate_scene, Centerline, CrossingSlot, RigConfig, SceneConfig, SceneSpec};
pub use render::{
    class_color, clip_to_grid, ground_truth_map, pv_sample_points, render_sample, visible_in_any,
    RenderConfig,
};

use std::path::Path;

use crate::error::{Error, Result};
use crate::map_core::pnm::{decode_ppm, encode_ppm};
use crate::map_core::{BevMaskSet, BinaryMask, CameraParams, LineMasks, VectorMap};

/// 8-bit interleaved RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-last floats in `[0, 1]`, shape `(H·W, 3)` flattened.
    pub fn to_unit_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        encode_ppm(self.height, self.width, &self.data)
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (height, width, data) = decode_ppm(bytes)?;
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }
}

/// One rendered frame: images, calibrations and every ground-truth target.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub images: Vec<RgbImage>,
    pub rig: Vec<CameraParams>,
    pub gt_map: VectorMap,
    pub gt_bev_masks: BevMaskSet,
    pub gt_line_masks: LineMasks,
    /// Per-camera perspective-view line mask.
    pub gt_pv_masks: Vec<BinaryMask>,
}
