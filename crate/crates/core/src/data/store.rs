//! On-disk dataset: `index.json` plus one raw little-endian `f32` file per
//! image holding the `[3, h, w]` planes.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::data::coco::{default_categories, CocoDataset};
use crate::data::{ImageRecord, Scene};
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::net::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image_id: u64,
    pub file: String,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub num_classes: usize,
    pub images: Vec<IndexEntry>,
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for &v in img.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_image(path: &Path, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let n = channels * h * w;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f32::<LittleEndian>().map_err(|e| {
            Error::InvalidArgument(format!("{} is shorter than {channels}x{h}x{w}: {e}", path.display()))
        })? as f64);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::InvalidArgument(format!("{} is longer than {channels}x{h}x{w}", path.display())));
    }
    Tensor::from_vec([1, channels, h, w], data)
}

pub fn save_dataset(dir: &Path, scenes: &[Scene], num_classes: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut images = Vec::with_capacity(scenes.len());
    for s in scenes {
        let file = format!("{:08}.bin", s.image_id);
        write_image(&dir.join(&file), &s.image)?;
        images.push(IndexEntry { image_id: s.image_id, file, height: s.height(), width: s.width(), boxes: s.boxes.clone() });
    }
    let index = DatasetIndex { num_classes, images };
    std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_index(dir: &Path) -> Result<DatasetIndex> {
    let p = dir.join("index.json");
    let text = std::fs::read_to_string(&p)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", p.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<Scene>, usize)> {
    let index = load_index(dir)?;
    let scenes = index
        .images
        .iter()
        .map(|e| {
            Ok(Scene {
                image_id: e.image_id,
                image: read_image(&dir.join(&e.file), 3, e.height, e.width)?,
                boxes: e.boxes.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scenes, index.num_classes))
}

/// COCO view of scenes, for evaluation and export.
pub fn scenes_to_coco(scenes: &[Scene], num_classes: usize) -> CocoDataset {
    CocoDataset {
        images: scenes
            .iter()
            .map(|s| ImageRecord {
                image_id: s.image_id,
                width: s.width(),
                height: s.height(),
                file_name: format!("{:08}.bin", s.image_id),
            })
            .collect(),
        annotations: scenes
            .iter()
            .flat_map(|s| s.boxes.iter().map(move |b| GroundTruth { image_id: s.image_id, bbox: *b }))
            .collect(),
        categories: default_categories(num_classes),
        dropped: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::coco::{load_coco_json, save_coco_json};
    use crate::data::synth::{gen_synthetic, SynthParams};

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_synthetic(&SynthParams { n_images: 3, ..Default::default() }).unwrap();
        save_dataset(dir.path(), &scenes, 2).unwrap();
        let (back, nc) = load_dataset(dir.path()).unwrap();
        assert_eq!(nc, 2);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.boxes, b.boxes);
            assert!(a.image.max_abs_diff(&b.image) < 1e-7);
        }
    }

    #[test]
    fn coco_export_roundtrips_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_synthetic(&SynthParams { n_images: 5, ..Default::default() }).unwrap();
        let ds = scenes_to_coco(&scenes, 2);
        let p = dir.path().join("ann.json");
        save_coco_json(&ds, &p).unwrap();
        let back = load_coco_json(&p).unwrap();
        assert_eq!(back.annotations, ds.annotations);
        assert_eq!(back.images, ds.images);
    }
}
