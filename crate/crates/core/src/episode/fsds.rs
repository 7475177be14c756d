//! `FSDS` dataset files.
//!
//! ```text
//! "FSDS"                         4 bytes
//! version                        u32 LE (= 1)
//! classes, images_per_class      u32 LE each
//! channels, height, width        u32 LE each
//! pixels                         f32 LE; class-major, then image, channel, row, column
//! metadata length                u32 LE
//! metadata                       UTF-8 JSON (split tag, class ids, generator spec)
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::image::Image;

const MAGIC: &[u8; 4] = b"FSDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

pub fn write_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let per_class = ds.class(0).len();
    if ds.classes().iter().any(|c| c.len() != per_class) {
        return Err(Error::InvalidArgument {
            op: "save_dataset",
            reason: "FSDS requires the same number of images in every class".into(),
        });
    }
    let (c, h, w) = ds.image_dims();
    let meta = serde_json::to_vec(ds.meta())?;
    let pixels = ds.num_classes() * per_class * c * h * w;
    let mut out = Vec::with_capacity(HEADER_LEN + pixels * 4 + 4 + meta.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION as usize, ds.num_classes(), per_class, c, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for class in ds.classes() {
        for img in class {
            for p in img.data() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let fail = |offset: usize, reason: String| Error::Format {
        format: "FSDS",
        offset,
        reason,
    };
    let u32_at = |offset: usize| -> Result<usize> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| fail(bytes.len(), format!("truncated header, needed u32 at {offset}")))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(fail(0, "bad magic".into()));
    }
    let version = u32_at(4)?;
    if version != VERSION as usize {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let (classes, per_class) = (u32_at(8)?, u32_at(12)?);
    let (c, h, w) = (u32_at(16)?, u32_at(20)?, u32_at(24)?);
    if classes == 0 || per_class == 0 || c == 0 || h == 0 || w == 0 {
        return Err(fail(8, "zero extent in header".into()));
    }
    let image_len = c * h * w;
    let pixel_bytes = classes
        .checked_mul(per_class)
        .and_then(|n| n.checked_mul(image_len))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(8, "header extents overflow".into()))?;
    let meta_off = HEADER_LEN + pixel_bytes;
    if bytes.len() < meta_off {
        return Err(fail(
            bytes.len(),
            format!("truncated pixel data, expected {pixel_bytes} bytes"),
        ));
    }
    let meta_len = u32_at(meta_off)?;
    let end = meta_off + 4 + meta_len;
    if bytes.len() < end {
        return Err(fail(bytes.len(), format!("truncated metadata, expected {meta_len} bytes")));
    }
    if bytes.len() > end {
        return Err(fail(end, format!("{} trailing bytes", bytes.len() - end)));
    }
    let meta: DatasetMeta = serde_json::from_slice(&bytes[meta_off + 4..end])
        .map_err(|e| fail(meta_off + 4, format!("metadata JSON: {e}")))?;

    let mut pixels = bytes[HEADER_LEN..meta_off]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let mut data = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut images = Vec::with_capacity(per_class);
        for _ in 0..per_class {
            let px: Vec<f32> = pixels.by_ref().take(image_len).collect();
            images.push(Image::new(c, h, w, px)?);
        }
        data.push(images);
    }
    Dataset::new(data, meta).map_err(|e| fail(meta_off + 4, e.to_string()))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{generate_synthetic, Split, SyntheticSpec};

    fn ds() -> Dataset {
        generate_synthetic(
            &SyntheticSpec {
                classes: 3,
                images_per_class: 2,
                channels: 2,
                image_size: 8,
                patch_size: 4,
                signature_patches: 1,
                distractor_patches: 1,
                ..SyntheticSpec::default()
            },
            Split::Val,
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = write_dataset(&ds()).unwrap();
        assert_eq!(&bytes[..4], b"FSDS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        // first pixel of class 0, image 0, channel 0
        let first = f32::from_le_bytes(bytes[28..32].try_into().unwrap());
        assert_eq!(first, ds().image(0, 0).data()[0]);
    }

    #[test]
    fn round_trip_bitwise() {
        let d = ds();
        let bytes = write_dataset(&d).unwrap();
        let back = read_dataset(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(write_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_reported() {
        let bytes = write_dataset(&ds()).unwrap();
        for cut in [0, 3, 10, 28, 100, bytes.len() - 1] {
            match read_dataset(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(read_dataset(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_dataset(&bad), Err(Error::Format { offset: 4, .. })));
        let mut long = bytes;
        long.push(1);
        assert!(read_dataset(&long).is_err());
    }
}
