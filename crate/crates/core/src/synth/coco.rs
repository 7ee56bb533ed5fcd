//! COCO-style annotation files (`bbox = [x, y, w, h]`, 1-based category ids).

use std::path::Path;

use serde_json::{json, Value};

use crate::boxes::PixelBox;
use crate::error::{Error, Result};
use crate::synth::{SceneAnnotation, CLASS_NAMES};

#[derive(Clone, Debug, PartialEq)]
pub struct CocoImage {
    pub file_name: String,
    pub annotation: SceneAnnotation,
}

pub fn coco_to_string(images: &[CocoImage]) -> Result<String> {
    let mut image_records = Vec::with_capacity(images.len());
    let mut ann_records = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let ann = &img.annotation;
        if ann.boxes.len() != ann.class_ids.len() {
            return Err(Error::Annotation(format!(
                "image {} has {} boxes and {} class ids",
                img.file_name,
                ann.boxes.len(),
                ann.class_ids.len()
            )));
        }
        image_records.push(json!({
            "id": i + 1,
            "file_name": img.file_name,
            "height": ann.height,
            "width": ann.width,
        }));
        for (b, &c) in ann.boxes.iter().zip(&ann.class_ids) {
            b.validate()?;
            ann_records.push(json!({
                "id": ann_records.len() + 1,
                "image_id": i + 1,
                "category_id": c + 1,
                "bbox": [b.x, b.y, b.width, b.height],
                "area": b.area(),
                "iscrowd": 0,
            }));
        }
    }
    let categories: Vec<Value> = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| json!({"id": i + 1, "name": n}))
        .collect();
    let doc = json!({
        "images": image_records,
        "annotations": ann_records,
        "categories": categories,
    });
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Annotation(e.to_string()))
}

pub fn coco_write(images: &[CocoImage], path: &Path) -> Result<()> {
    let text = coco_to_string(images)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn field<'a>(path: &Path, record: usize, obj: &'a Value, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::format(path, Some(record), format!("missing \"{key}\"")))
}

fn uint(path: &Path, record: usize, obj: &Value, key: &str) -> Result<u64> {
    field(path, record, obj, key)?.as_u64().ok_or_else(|| {
        Error::format(
            path,
            Some(record),
            format!("\"{key}\" is not a non-negative integer"),
        )
    })
}

/// Parses COCO text; `path` is only used in error messages.
pub fn coco_from_str(text: &str, path: &Path) -> Result<Vec<CocoImage>> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| Error::format(path, None, e.to_string()))?;
    let images = doc
        .get("images")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format(path, None, "missing \"images\" array"))?;
    let annotations = doc
        .get("annotations")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format(path, None, "missing \"annotations\" array"))?;

    let mut out = Vec::with_capacity(images.len());
    let mut index_of = std::collections::HashMap::new();
    for (r, img) in images.iter().enumerate() {
        let id = uint(path, r, img, "id")?;
        let file_name = field(path, r, img, "file_name")?
            .as_str()
            .ok_or_else(|| Error::format(path, Some(r), "\"file_name\" is not a string"))?
            .to_string();
        let height = uint(path, r, img, "height")? as usize;
        let width = uint(path, r, img, "width")? as usize;
        if index_of.insert(id, out.len()).is_some() {
            return Err(Error::format(
                path,
                Some(r),
                format!("duplicate image id {id}"),
            ));
        }
        out.push(CocoImage {
            file_name,
            annotation: SceneAnnotation::empty(height, width),
        });
    }
    for (r, ann) in annotations.iter().enumerate() {
        let image_id = uint(path, r, ann, "image_id")?;
        let category = uint(path, r, ann, "category_id")? as usize;
        if category == 0 {
            return Err(Error::format(path, Some(r), "category ids start at 1"));
        }
        let bbox = field(path, r, ann, "bbox")?
            .as_array()
            .filter(|a| a.len() == 4)
            .ok_or_else(|| Error::format(path, Some(r), "\"bbox\" must be [x, y, w, h]"))?;
        let v: Vec<f64> = bbox
            .iter()
            .map(|x| x.as_f64())
            .collect::<Option<_>>()
            .ok_or_else(|| Error::format(path, Some(r), "\"bbox\" entries must be numbers"))?;
        if v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::format(path, Some(r), format!("negative bbox {v:?}")));
        }
        let &slot = index_of
            .get(&image_id)
            .ok_or_else(|| Error::format(path, Some(r), format!("unknown image id {image_id}")))?;
        let a = &mut out[slot].annotation;
        a.boxes.push(PixelBox::new(v[0], v[1], v[2], v[3]));
        a.class_ids.push(category - 1);
    }
    Ok(out)
}

pub fn coco_read(path: &Path) -> Result<Vec<CocoImage>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    coco_from_str(&text, path)
}
