//! COCO-format annotation files (boxes only).

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::detect::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    /// `(box, contiguous class index)`, crowd regions excluded.
    pub gt: Vec<(BBox, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoIndex {
    pub images: Vec<CocoImage>,
    /// `(category id, name)` in contiguous class order.
    pub categories: Vec<(u64, String)>,
}

impl CocoIndex {
    pub fn category_ids(&self) -> Vec<u64> {
        self.categories.iter().map(|(id, _)| *id).collect()
    }
}

/// Byte offset of a 1-based (line, column) position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn field<'a>(obj: &'a Value, key: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::Schema(format!("missing key `{key}` in {ctx}")))
}

fn as_u64(v: &Value, key: &str, ctx: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| Error::Schema(format!("`{key}` in {ctx} must be a non-negative integer")))
}

fn as_array<'a>(v: &'a Value, key: &str, ctx: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::Schema(format!("`{key}` in {ctx} must be an array")))
}

pub fn parse_coco(text: &str) -> Result<CocoIndex> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Json {
        offset: byte_offset(text, e.line(), e.column()),
        msg: e.to_string(),
    })?;
    let images_v = as_array(field(&root, "images", "root object")?, "images", "root object")?;
    let anns_v = as_array(field(&root, "annotations", "root object")?, "annotations", "root object")?;
    let cats_v = as_array(field(&root, "categories", "root object")?, "categories", "root object")?;

    let mut categories = Vec::with_capacity(cats_v.len());
    for (i, c) in cats_v.iter().enumerate() {
        let ctx = format!("categories[{i}]");
        let id = as_u64(field(c, "id", &ctx)?, "id", &ctx)?;
        let name = field(c, "name", &ctx)?.as_str().unwrap_or_default().to_string();
        categories.push((id, name));
    }
    categories.sort_by_key(|(id, _)| *id);

    let mut images = Vec::with_capacity(images_v.len());
    for (i, im) in images_v.iter().enumerate() {
        let ctx = format!("images[{i}]");
        images.push(CocoImage {
            id: as_u64(field(im, "id", &ctx)?, "id", &ctx)?,
            file_name: field(im, "file_name", &ctx)?
                .as_str()
                .ok_or_else(|| Error::Schema(format!("`file_name` in {ctx} must be a string")))?
                .to_string(),
            width: as_u64(field(im, "width", &ctx)?, "width", &ctx)? as usize,
            height: as_u64(field(im, "height", &ctx)?, "height", &ctx)? as usize,
            gt: Vec::new(),
        });
    }

    for (i, a) in anns_v.iter().enumerate() {
        let ctx = format!("annotations[{i}]");
        let image_id = as_u64(field(a, "image_id", &ctx)?, "image_id", &ctx)?;
        let cat = as_u64(field(a, "category_id", &ctx)?, "category_id", &ctx)?;
        let bbox = as_array(field(a, "bbox", &ctx)?, "bbox", &ctx)?;
        if a.get("iscrowd").and_then(Value::as_u64).unwrap_or(0) != 0 {
            continue;
        }
        let v: Vec<f64> = bbox.iter().filter_map(Value::as_f64).collect();
        if v.len() != 4 {
            return Err(Error::Schema(format!("`bbox` in {ctx} must hold 4 numbers")));
        }
        let class = categories
            .iter()
            .position(|(id, _)| *id == cat)
            .ok_or_else(|| Error::Schema(format!("`category_id` {cat} in {ctx} is not declared in categories")))?;
        let img = images
            .iter_mut()
            .find(|im| im.id == image_id)
            .ok_or_else(|| Error::Schema(format!("`image_id` {image_id} in {ctx} is not declared in images")))?;
        img.gt.push((BBox::from_xywh(v[0], v[1], v[2], v[3]), class));
    }
    Ok(CocoIndex { images, categories })
}

pub fn load_coco_json(path: &Path) -> Result<CocoIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco(&text)
}

/// Serialize an index back to COCO JSON (annotation ids assigned in order).
pub fn to_coco_json(index: &CocoIndex) -> Value {
    let mut anns = Vec::new();
    for im in &index.images {
        for (b, c) in &im.gt {
            let mut a = Map::new();
            a.insert("id".into(), json!(anns.len() + 1));
            a.insert("image_id".into(), json!(im.id));
            a.insert("category_id".into(), json!(index.categories[*c].0));
            a.insert("bbox".into(), json!(b.to_xywh()));
            a.insert("area".into(), json!(b.area()));
            a.insert("iscrowd".into(), json!(0));
            anns.push(Value::Object(a));
        }
    }
    json!({
        "images": index.images.iter().map(|im| json!({
            "id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height
        })).collect::<Vec<_>>(),
        "annotations": anns,
        "categories": index.categories.iter().map(|(id, name)| json!({"id": id, "name": name})).collect::<Vec<_>>(),
    })
}
