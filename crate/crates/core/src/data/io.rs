//! On-disk dataset layout: `root/{images,ir,fused,masks,seg}/NNNN.png` plus
//! `root/manifest.json`. Candidate masks sit next to the voted mask as
//! `masks/NNNN_{a,b,c}.png`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{mask_vote, Sample};
use crate::error::{Error, Result};
use crate::losses::DetectionTargets;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
const DIRS: [&str; 5] = ["images", "ir", "fused", "masks", "seg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub visible: String,
    pub infrared: String,
    pub fused: String,
    pub mask: String,
    pub candidate_masks: [String; 3],
    pub seg: String,
    pub text_ids: Vec<usize>,
    pub targets: DetectionTargets,
    pub requested_targets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
    pub splits: BTreeMap<Split, Vec<String>>,
}

impl DatasetManifest {
    /// Unique ids, every split id known, no id in two splits.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let manifest = root.join(MANIFEST);
        let mut ids = BTreeSet::new();
        for r in &self.samples {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::data(&manifest, format!("duplicate sample id {}", r.id)));
            }
        }
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for (split, members) in &self.splits {
            for id in members {
                if !ids.contains(id.as_str()) {
                    return Err(Error::data(&manifest, format!("{split:?} split names unknown sample {id}")));
                }
                if let Some(prev) = seen.insert(id, *split) {
                    return Err(Error::data(
                        &manifest,
                        format!("sample {id} is in both the {prev:?} and {split:?} splits"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[String] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// A dataset on disk; samples are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let record = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::data(&self.root, format!("no sample {index}")))?;
        load_sample(&self.root, record)
    }

    pub fn load_id(&self, id: &str) -> Result<Sample> {
        let index = self
            .manifest
            .samples
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| Error::data(self.root.join(MANIFEST), format!("no sample with id {id}")))?;
        self.load(index)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest.split(split).iter().map(|id| self.load_id(id)).collect()
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn write_rgb_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.shape()[0] as u32, t.shape()[1] as u32);
    let img = RgbImage::from_raw(w, h, t.data().iter().map(|&v| to_u8(v)).collect())
        .ok_or_else(|| Error::data(path, "image buffer size mismatch"))?;
    img.save(path).map_err(|e| Error::data(path, e.to_string()))
}

fn write_gray(path: &Path, t: &Tensor<f32>, scale: f32) -> Result<()> {
    let (h, w) = (t.shape()[0] as u32, t.shape()[1] as u32);
    let img = GrayImage::from_raw(w, h, t.data().iter().map(|&v| (v * scale).round() as u8).collect())
        .ok_or_else(|| Error::data(path, "image buffer size mismatch"))?;
    img.save(path).map_err(|e| Error::data(path, e.to_string()))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::data(path, "file is missing"));
    }
    image::open(path).map_err(|e| Error::data(path, format!("unreadable image: {e}")))
}

pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(Error::data(path, format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let img = img.into_rgb8();
    let (w, h) = img.dimensions();
    Tensor::new(vec![h as usize, w as usize, 3], img.into_raw().into_iter().map(from_u8).collect())
}

/// Single-channel image, each byte divided by `scale`.
pub fn read_gray(path: &Path, scale: f32) -> Result<Tensor<f32>> {
    let img = open(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::data(path, format!("expected 8-bit grayscale, found {:?}", img.color())));
    }
    let img = img.into_luma8();
    let (w, h) = img.dimensions();
    Tensor::new(vec![h as usize, w as usize], img.into_raw().into_iter().map(|v| v as f32 / scale).collect())
}

fn load_sample(root: &Path, r: &SampleRecord) -> Result<Sample> {
    let visible = read_rgb(&root.join(&r.visible))?;
    let infrared = read_rgb(&root.join(&r.infrared))?;
    let fused = read_rgb(&root.join(&r.fused))?;
    let candidate_masks = [
        read_gray(&root.join(&r.candidate_masks[0]), 255.0)?,
        read_gray(&root.join(&r.candidate_masks[1]), 255.0)?,
        read_gray(&root.join(&r.candidate_masks[2]), 255.0)?,
    ];
    let voted_mask = read_gray(&root.join(&r.mask), 255.0)?;
    let seg_labels = read_gray(&root.join(&r.seg), 1.0)?;
    let shape = fused.shape()[..2].to_vec();
    for (t, file) in [(&visible, &r.visible), (&infrared, &r.infrared)] {
        if t.shape() != fused.shape() {
            return Err(Error::data(root.join(file), "image size differs from the fused image"));
        }
    }
    for (t, file) in candidate_masks
        .iter()
        .zip(&r.candidate_masks)
        .chain([(&voted_mask, &r.mask), (&seg_labels, &r.seg)])
    {
        if t.shape() != shape.as_slice() {
            return Err(Error::data(root.join(file), "size differs from the fused image"));
        }
    }
    if mask_vote(&candidate_masks[0], &candidate_masks[1], &candidate_masks[2])? != voted_mask {
        return Err(Error::data(root.join(&r.mask), "voted mask disagrees with the candidate masks"));
    }
    Ok(Sample {
        visible,
        infrared,
        fused,
        candidate_masks,
        voted_mask,
        text_ids: r.text_ids.clone(),
        det_targets: r.targets.clone(),
        seg_labels,
        requested_targets: r.requested_targets,
    })
}

/// Writes every sample and the manifest. `splits[i]` is sample `i`'s split.
pub fn save_dataset(root: &Path, seed: u64, samples: &[Sample], splits: &[Split]) -> Result<DatasetManifest> {
    if splits.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} samples but {} split tags",
            samples.len(),
            splits.len()
        )));
    }
    for dir in DIRS {
        fs::create_dir_all(root.join(dir)).map_err(|e| Error::io(root.join(dir), e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut split_map: BTreeMap<Split, Vec<String>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for (i, (s, split)) in samples.iter().zip(splits).enumerate() {
        let id = format!("{i:04}");
        let rel = |dir: &str, suffix: &str| format!("{dir}/{id}{suffix}.png");
        let record = SampleRecord {
            visible: rel("images", ""),
            infrared: rel("ir", ""),
            fused: rel("fused", ""),
            mask: rel("masks", ""),
            candidate_masks: [rel("masks", "_a"), rel("masks", "_b"), rel("masks", "_c")],
            seg: rel("seg", ""),
            text_ids: s.text_ids.clone(),
            targets: s.det_targets.clone(),
            requested_targets: s.requested_targets,
            id: id.clone(),
        };
        write_rgb_png(&root.join(&record.visible), &s.visible)?;
        write_rgb_png(&root.join(&record.infrared), &s.infrared)?;
        write_rgb_png(&root.join(&record.fused), &s.fused)?;
        write_gray(&root.join(&record.mask), &s.voted_mask, 255.0)?;
        for (m, file) in s.candidate_masks.iter().zip(&record.candidate_masks) {
            write_gray(&root.join(file), m, 255.0)?;
        }
        write_gray(&root.join(&record.seg), &s.seg_labels, 1.0)?;
        split_map.get_mut(split).expect("all splits present").push(id);
        records.push(record);
    }
    let manifest = DatasetManifest {
        seed,
        samples: records,
        splits: split_map,
    };
    let value = serde_json::to_value(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Format(e.to_string()))?;
    let path = root.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads and validates the manifest and checks that every file exists.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(&path, format!("invalid manifest: {e}")))?;
    manifest.validate(root)?;
    for r in &manifest.samples {
        for file in [&r.visible, &r.infrared, &r.fused, &r.mask, &r.seg].into_iter().chain(&r.candidate_masks) {
            if !root.join(file).is_file() {
                return Err(Error::data(root.join(file), "file listed in the manifest is missing"));
            }
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
    })
}
