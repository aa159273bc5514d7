//! Generated-dataset cache file.
//!
//! Layout: magic `SSDS`, u64 LE header length, JSON header (config plus
//! per-split labels and boxes), f32 LE image payload, then one u8 per mask
//! pixel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BBox, LabeledImage, ShapesConfig, ShapesDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"SSDS";

#[derive(Serialize, Deserialize)]
struct SplitMeta {
    name: String,
    labels: Vec<usize>,
    bboxes: Vec<BBox>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ShapesConfig,
    image_shape: [usize; 3],
    splits: Vec<SplitMeta>,
}

fn split_meta(name: &str, items: &[LabeledImage]) -> SplitMeta {
    SplitMeta {
        name: name.to_string(),
        labels: items.iter().map(|s| s.label).collect(),
        bboxes: items.iter().map(|s| s.bbox.unwrap()).collect(),
    }
}

pub fn save_dataset(path: &Path, ds: &ShapesDataset) -> Result<()> {
    let s = ds.config.image_size;
    let header = Header {
        config: ds.config.clone(),
        image_shape: [1, s, s],
        splits: vec![
            split_meta("train", &ds.train),
            split_meta("val", &ds.val),
            split_meta("test", &ds.test),
        ],
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for split in [&ds.train, &ds.val, &ds.test] {
        for sample in split.iter() {
            for &v in sample.image.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    for split in [&ds.train, &ds.val, &ds.test] {
        for sample in split.iter() {
            out.extend(sample.mask.as_ref().unwrap().iter().map(|&m| m as u8));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<ShapesDataset> {
    let file = path.display().to_string();
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            file,
            detail: "shorter than fixed preamble".into(),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::BadMagic {
            file,
            expected: MAGIC,
        });
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if 12 + header_len > bytes.len() {
        return Err(Error::Truncated {
            file,
            detail: "header extends past end of file".into(),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..12 + header_len]).map_err(|e| {
            Error::HeaderInconsistency {
                file: file.clone(),
                detail: format!("bad header json: {e}"),
            }
        })?;
    let [c, h, w] = header.image_shape;
    let pixels = c * h * w;
    let total: usize = header.splits.iter().map(|s| s.labels.len()).sum();
    let images_bytes = total * pixels * 4;
    let body = &bytes[12 + header_len..];
    if body.len() != images_bytes + total * h * w {
        return Err(Error::Truncated {
            file,
            detail: format!(
                "payload is {} bytes, expected {}",
                body.len(),
                images_bytes + total * h * w
            ),
        });
    }

    let mut splits: Vec<Vec<LabeledImage>> = Vec::new();
    let mut img_cursor = 0usize;
    let mut mask_cursor = images_bytes;
    for meta in &header.splits {
        if meta.labels.len() != meta.bboxes.len() {
            return Err(Error::HeaderInconsistency {
                file,
                detail: format!("split {}: label/bbox count differ", meta.name),
            });
        }
        let mut items = Vec::with_capacity(meta.labels.len());
        for (i, &label) in meta.labels.iter().enumerate() {
            let data: Vec<f64> = (0..pixels)
                .map(|p| {
                    let at = img_cursor + p * 4;
                    f32::from_le_bytes(body[at..at + 4].try_into().unwrap()) as f64
                })
                .collect();
            img_cursor += pixels * 4;
            let mask: Vec<bool> = body[mask_cursor..mask_cursor + h * w]
                .iter()
                .map(|&b| b != 0)
                .collect();
            mask_cursor += h * w;
            items.push(LabeledImage {
                image: Tensor::from_vec(&[c, h, w], data)?,
                label,
                mask: Some(mask),
                bbox: Some(meta.bboxes[i]),
            });
        }
        splits.push(items);
    }
    let mut iter = splits.into_iter();
    Ok(ShapesDataset {
        config: header.config,
        train: iter.next().unwrap_or_default(),
        val: iter.next().unwrap_or_default(),
        test: iter.next().unwrap_or_default(),
    })
}
