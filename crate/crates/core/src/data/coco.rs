//! COCO detection annotations (`images`, `annotations`, `categories`).
//!
//! Category ids are mapped to contiguous class indices in ascending id
//! order. Saving writes category id `class + 1`.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::boxes::BBox;
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;

#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<GroundTruth>,
    /// `(category id, name)` indexed by class.
    pub categories: Vec<(u64, String)>,
    /// Annotations with non-positive width or height.
    pub dropped: usize,
}

fn field<'a>(v: &'a Value, key: &str, ctx: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::Annotation(format!("{ctx}: missing key `{key}`")))
}

fn as_u64(v: &Value, key: &str, ctx: &str) -> Result<u64> {
    let f = field(v, key, ctx)?;
    f.as_u64()
        .or_else(|| f.as_f64().filter(|x| *x >= 0.0 && x.fract() == 0.0).map(|x| x as u64))
        .ok_or_else(|| Error::Annotation(format!("{ctx}: `{key}` is not a non-negative integer")))
}

fn as_array<'a>(v: &'a Value, key: &str, ctx: &str) -> Result<&'a Vec<Value>> {
    field(v, key, ctx)?
        .as_array()
        .ok_or_else(|| Error::Annotation(format!("{ctx}: `{key}` is not an array")))
}

pub fn parse_coco(root: &Value) -> Result<CocoDataset> {
    let mut categories: Vec<(u64, String)> = Vec::new();
    for (i, c) in as_array(root, "categories", "file")?.iter().enumerate() {
        let ctx = format!("categories[{i}]");
        let id = as_u64(c, "id", &ctx)?;
        let name = c.get("name").and_then(Value::as_str).unwrap_or("").to_string();
        categories.push((id, name));
    }
    categories.sort_by_key(|c| c.0);
    let class_of: BTreeMap<u64, usize> = categories.iter().enumerate().map(|(i, c)| (c.0, i)).collect();

    let mut images = Vec::new();
    for (i, im) in as_array(root, "images", "file")?.iter().enumerate() {
        let ctx = format!("images[{i}]");
        images.push(ImageRecord {
            image_id: as_u64(im, "id", &ctx)?,
            width: as_u64(im, "width", &ctx)? as usize,
            height: as_u64(im, "height", &ctx)? as usize,
            file_name: im.get("file_name").and_then(Value::as_str).unwrap_or("").to_string(),
        });
    }

    let mut annotations = Vec::new();
    let mut dropped = 0;
    for (i, a) in as_array(root, "annotations", "file")?.iter().enumerate() {
        let id = a.get("id").and_then(Value::as_u64);
        let ctx = match id {
            Some(id) => format!("annotations[{i}] (id {id})"),
            None => format!("annotations[{i}]"),
        };
        let image_id = as_u64(a, "image_id", &ctx)?;
        let cat = as_u64(a, "category_id", &ctx)?;
        let class_id = *class_of
            .get(&cat)
            .ok_or_else(|| Error::Annotation(format!("{ctx}: unknown category_id {cat}")))?;
        let bbox = as_array(a, "bbox", &ctx)?;
        if bbox.len() != 4 {
            return Err(Error::Annotation(format!("{ctx}: bbox has {} values, expected 4", bbox.len())));
        }
        let mut v = [0.0; 4];
        for (k, x) in bbox.iter().enumerate() {
            v[k] = x
                .as_f64()
                .filter(|f| f.is_finite())
                .ok_or_else(|| Error::Annotation(format!("{ctx}: bbox[{k}] is not a finite number")))?;
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            dropped += 1;
            continue;
        }
        annotations.push(GroundTruth { image_id, bbox: BBox::from_xywh(v[0], v[1], v[2], v[3], class_id) });
    }
    Ok(CocoDataset { images, annotations, categories, dropped })
}

pub fn load_coco_json(path: impl AsRef<Path>) -> Result<CocoDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Annotation(format!("cannot read {}: {e}", path.display())))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Annotation(format!("{}: malformed JSON: {e}", path.display())))?;
    parse_coco(&root)
}

pub fn to_coco_json(ds: &CocoDataset) -> Value {
    let images: Vec<Value> = ds
        .images
        .iter()
        .map(|im| json!({"id": im.image_id, "width": im.width, "height": im.height, "file_name": im.file_name}))
        .collect();
    let annotations: Vec<Value> = ds
        .annotations
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let b = &g.bbox;
            json!({
                "id": i + 1,
                "image_id": g.image_id,
                "category_id": ds.categories.get(b.class_id).map_or(b.class_id as u64 + 1, |c| c.0),
                "bbox": [b.x1, b.y1, b.width(), b.height()],
                "area": b.area(),
                "iscrowd": 0,
            })
        })
        .collect();
    let categories: Vec<Value> = ds.categories.iter().map(|(id, name)| json!({"id": id, "name": name})).collect();
    json!({"images": images, "annotations": annotations, "categories": categories})
}

pub fn save_coco_json(ds: &CocoDataset, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&to_coco_json(ds))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Default category table `class + 1 -> name`.
pub fn default_categories(num_classes: usize) -> Vec<(u64, String)> {
    (0..num_classes)
        .map(|c| {
            let name = match c {
                0 => "rectangle".to_string(),
                1 => "ellipse".to_string(),
                n => format!("class{n}"),
            };
            (c as u64 + 1, name)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file() {
        let v = json!({
            "images": [{"id": 7, "width": 100, "height": 80}],
            "annotations": [
                {"id": 1, "image_id": 7, "category_id": 3, "bbox": [10, 20, 30, 40]},
                {"id": 2, "image_id": 7, "category_id": 3, "bbox": [10, 20, 0, 40]}
            ],
            "categories": [{"id": 3, "name": "cat"}]
        });
        let ds = parse_coco(&v).unwrap();
        assert_eq!(ds.annotations.len(), 1);
        assert_eq!(ds.annotations[0].bbox, BBox::new(10.0, 20.0, 40.0, 60.0, 0));
        assert_eq!(ds.dropped, 1);
    }

    #[test]
    fn errors_name_the_record() {
        let v = json!({
            "images": [],
            "annotations": [{"id": 42, "image_id": 1, "category_id": 1}],
            "categories": [{"id": 1}]
        });
        let err = parse_coco(&v).unwrap_err().to_string();
        assert!(err.contains("annotations[0] (id 42)") && err.contains("bbox"), "{err}");
        let err = parse_coco(&json!({"images": []})).unwrap_err().to_string();
        assert!(err.contains("categories"), "{err}");
    }

    #[test]
    fn malformed_json_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(&p, "{ not json").unwrap();
        assert!(load_coco_json(&p).unwrap_err().to_string().contains("malformed JSON"));
    }
}
