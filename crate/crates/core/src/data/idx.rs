//! IDX ingestion (big-endian magic 0x00000803 images / 0x00000801 labels).
//! Loaded samples carry no masks, so localization evaluation is unavailable
//! on this source.

use std::fs;
use std::path::Path;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            file: file.to_string(),
            detail: format!("need 4 bytes at offset {offset}"),
        })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledImage>> {
    let images_file = images_path.display().to_string();
    let labels_file = labels_path.display().to_string();
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    if read_u32_be(&img_bytes, 0, &images_file)? != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            file: images_file,
            expected: IMAGES_MAGIC.to_be_bytes(),
        });
    }
    if read_u32_be(&lbl_bytes, 0, &labels_file)? != LABELS_MAGIC {
        return Err(Error::BadMagic {
            file: labels_file,
            expected: LABELS_MAGIC.to_be_bytes(),
        });
    }
    let count = read_u32_be(&img_bytes, 4, &images_file)? as usize;
    let rows = read_u32_be(&img_bytes, 8, &images_file)? as usize;
    let cols = read_u32_be(&img_bytes, 12, &images_file)? as usize;
    let label_count = read_u32_be(&lbl_bytes, 4, &labels_file)? as usize;
    if count != label_count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let pixel_bytes = count * rows * cols;
    if img_bytes.len() < 16 + pixel_bytes {
        return Err(Error::Truncated {
            file: images_file,
            detail: format!(
                "{count} images of {rows}x{cols} need {pixel_bytes} bytes, {} present",
                img_bytes.len() - 16
            ),
        });
    }
    if lbl_bytes.len() < 8 + count {
        return Err(Error::Truncated {
            file: labels_file,
            detail: format!("{count} labels, {} bytes present", lbl_bytes.len() - 8),
        });
    }

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let data: Vec<f64> = img_bytes[start..start + rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        out.push(LabeledImage {
            image: Tensor::from_vec(&[1, rows, cols], data)?,
            label: lbl_bytes[8 + i] as usize,
            mask: None,
            bbox: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(
        dir: &Path,
        count: u32,
        rows: u32,
        cols: u32,
        pixels: &[u8],
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("images.idx");
        let lbl = dir.join("labels.idx");
        let mut f = fs::File::create(&img).unwrap();
        f.write_all(&IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
        let mut f = fs::File::create(&lbl).unwrap();
        f.write_all(&LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (img, lbl)
    }

    #[test]
    fn two_images_roundtrip_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = vec![0u8; 2 * 28 * 28];
        pixels[0] = 255;
        pixels[28 * 28] = 51;
        let (img, lbl) = write_idx_pair(dir.path(), 2, 28, 28, &pixels, &[3, 7]);
        let set = load_idx(&img, &lbl).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set[0].image.shape(), &[1, 28, 28]);
        assert_eq!(set[0].image.data()[0], 1.0);
        assert_eq!(set[1].image.data()[0], 0.2);
        assert_eq!(set[0].label, 3);
        assert_eq!(set[1].label, 7);
        assert!(set[0].mask.is_none());
    }

    #[test]
    fn count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = vec![0u8; 2 * 4 * 4];
        let (img, lbl) = write_idx_pair(dir.path(), 2, 4, 4, &pixels, &[1]);
        assert!(matches!(
            load_idx(&img, &lbl),
            Err(Error::CountMismatch {
                images: 2,
                labels: 1
            })
        ));
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("bad.idx");
        fs::write(&img, 0x0000_0999u32.to_be_bytes()).unwrap();
        let lbl = dir.path().join("labels.idx");
        fs::write(&lbl, LABELS_MAGIC.to_be_bytes()).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_pixels_detected() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = vec![0u8; 10];
        let (img, lbl) = write_idx_pair(dir.path(), 2, 4, 4, &pixels, &[1, 2]);
        assert!(matches!(load_idx(&img, &lbl), Err(Error::Truncated { .. })));
    }
}
