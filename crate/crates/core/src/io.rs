//! Mask/image files and dataset manifests.
//!
//! Images and masks are single-channel 8-bit PNGs. Masks are written as `{0, 255}` and read
//! back with any nonzero value counted as foreground. Manifests are JSON with paths relative
//! to the manifest's directory.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid};

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_gray_png(height: usize, width: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        pixels,
        width as u32,
        height as u32,
        ColorType::L8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::data("<png>", e.to_string()))?;
    Ok(out.into_inner())
}

/// Decodes a single-channel 8-bit image; anything else is rejected.
pub fn decode_gray_png(bytes: &[u8], origin: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::data(origin, e.to_string()))?;
    let img = reader
        .decode()
        .map_err(|e| Error::data(origin, format!("undecodable image: {e}")))?;
    if img.color() != ColorType::L8 {
        return Err(Error::data(
            origin,
            format!(
                "expected a single-channel 8-bit image, found {:?} ({} channels)",
                img.color(),
                img.color().channel_count()
            ),
        ));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_luma8().into_raw()))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    mask_from_png(&bytes, path)
}

pub fn mask_from_png(bytes: &[u8], origin: &Path) -> Result<BinaryMask> {
    let (h, w, raw) = decode_gray_png(bytes, origin)?;
    BinaryMask::new(h, w, raw.into_iter().map(|v| (v != 0) as u8).collect())
}

pub fn mask_to_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let pixels: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    encode_gray_png(mask.height(), mask.width(), &pixels)
}

pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    write_atomic(path, &mask_to_png(mask)?)
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image_from_png(&bytes, path)
}

pub fn image_from_png(bytes: &[u8], origin: &Path) -> Result<ImageGrid> {
    let (h, w, raw) = decode_gray_png(bytes, origin)?;
    ImageGrid::from_u8(h, w, &raw)
}

pub fn write_image(image: &ImageGrid, path: &Path) -> Result<()> {
    write_atomic(
        path,
        &encode_gray_png(image.height(), image.width(), &image.to_u8())?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRef {
    pub object_id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: PathBuf,
    pub masks: Vec<MaskRef>,
    pub split: Split,
}

/// Index of image/mask pairs; paths are relative to the manifest file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    #[serde(default)]
    pub provenance: String,
    pub records: Vec<ManifestRecord>,
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(path, text.as_bytes())
}

/// Parses and validates a manifest: at least one record, every file present, and each
/// record's masks matching its image dimensions.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(Error::data(path, "no records"));
    }
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::data(path, format!("malformed manifest: {e}")))?;
    if manifest.records.is_empty() {
        return Err(Error::data(path, "no records"));
    }
    let root = manifest_root(path);
    for record in &manifest.records {
        let image_path = root.join(&record.image);
        let dims = image::image_dimensions(&image_path).map_err(|e| {
            Error::data(
                &image_path,
                format!("record {}: unreadable image: {e}", record.id),
            )
        })?;
        if record.masks.is_empty() {
            return Err(Error::data(path, format!("record {} has no masks", record.id)));
        }
        for m in &record.masks {
            let mask_path = root.join(&m.path);
            let mdims = image::image_dimensions(&mask_path).map_err(|e| {
                Error::data(
                    &mask_path,
                    format!("record {}: unreadable mask: {e}", record.id),
                )
            })?;
            if mdims != dims {
                return Err(Error::data(
                    &mask_path,
                    format!(
                        "record {}: mask {}x{} does not match image {}x{}",
                        record.id, mdims.0, mdims.1, dims.0, dims.1
                    ),
                ));
            }
        }
    }
    Ok(manifest)
}

pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// One `(image, object)` pair ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `record_id/object_id`.
    pub id: String,
    pub image: ImageGrid,
    pub gt: BinaryMask,
}

/// Loads every `(image, object)` pair in manifest order, optionally filtered by split.
pub fn load_samples(path: &Path, split: Option<Split>) -> Result<Vec<Sample>> {
    let manifest = load_manifest(path)?;
    let root = manifest_root(path);
    let mut samples = Vec::new();
    for record in manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
    {
        let image = read_image(&root.join(&record.image))?;
        for m in &record.masks {
            samples.push(Sample {
                id: format!("{}/{}", record.id, m.object_id),
                image: image.clone(),
                gt: read_mask(&root.join(&m.path))?,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::data(path, "no records for the requested split"));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mask_png_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let mask = BinaryMask::from_fn(h, w, |y, x| (seed >> ((y * w + x) % 64)) & 1 == 1);
            let back = mask_from_png(&mask_to_png(&mask).unwrap(), Path::new("m.png")).unwrap();
            prop_assert_eq!(back, mask);
        }
    }

    #[test]
    fn nonzero_reads_as_foreground() {
        let png = encode_gray_png(1, 3, &[0, 128, 255]).unwrap();
        let mask = mask_from_png(&png, Path::new("x.png")).unwrap();
        assert_eq!(mask.data(), &[0, 1, 1]);
        let zeros = encode_gray_png(2, 2, &[0; 4]).unwrap();
        assert!(mask_from_png(&zeros, Path::new("z.png")).unwrap().is_empty());
    }

    #[test]
    fn multichannel_mask_is_rejected() {
        let mut out = Cursor::new(Vec::new());
        image::write_buffer_with_format(&mut out, &[0u8; 12], 2, 2, ColorType::Rgb8, ImageFormat::Png)
            .unwrap();
        let err = mask_from_png(out.get_ref(), Path::new("rgb.png")).unwrap_err();
        assert!(err.to_string().contains("single-channel"));
    }

    fn write_pair(dir: &Path, name: &str, h: usize, w: usize) -> ManifestRecord {
        let img = ImageGrid::filled(h, w, 0.5).unwrap();
        write_image(&img, &dir.join(format!("{name}.png"))).unwrap();
        write_mask(&BinaryMask::full(h, w), &dir.join(format!("{name}_m.png"))).unwrap();
        ManifestRecord {
            id: name.into(),
            image: format!("{name}.png").into(),
            masks: vec![MaskRef {
                object_id: "0".into(),
                path: format!("{name}_m.png").into(),
            }],
            split: Split::Train,
        }
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            dataset_id: "t".into(),
            provenance: "unit test".into(),
            records: vec![write_pair(dir.path(), "a", 8, 8)],
        };
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), manifest);
        assert_eq!(load_samples(&path, None).unwrap().len(), 1);

        std::fs::remove_file(dir.path().join("a_m.png")).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("a_m.png"), "{err}");

        let empty = dir.path().join("empty.json");
        std::fs::write(&empty, "").unwrap();
        assert!(load_manifest(&empty).unwrap_err().to_string().contains("no records"));
    }

    #[test]
    fn manifest_dimension_mismatch_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = write_pair(dir.path(), "b", 8, 8);
        write_mask(&BinaryMask::full(4, 8), &dir.path().join("small.png")).unwrap();
        rec.masks[0].path = "small.png".into();
        let manifest = DatasetManifest {
            dataset_id: "t".into(),
            provenance: String::new(),
            records: vec![rec],
        };
        let path = dir.path().join("m.json");
        save_manifest(&manifest, &path).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("record b"), "{err}");
    }
}
