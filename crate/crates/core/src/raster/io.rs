//! PNG ingestion and export.
//!
//! * images: 8-bit RGB PNG
//! * segmentations: 16-bit grey PNG holding segment ids, plus a sidecar text
//!   file (`<seg stem>.txt`) with `<segment_id> <class_id>` lines
//! * boundary maps: 16-bit grey PNG, value = round(p · 65535)

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use super::{BoundaryMap, DatasetManifest, Image, LabeledSegmentation, MIN_FOREST_SIDE};
use crate::error::{Error, Result};

pub(crate) fn sidecar_path(seg_path: &Path) -> PathBuf {
    seg_path.with_extension("txt")
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

impl Image {
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let rgb = image::open(path).map_err(image_err(path))?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Image::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ensure_parent(path)?;
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length checked at construction");
        buf.save(path).map_err(image_err(path))
    }
}

impl LabeledSegmentation {
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let grey = image::open(path).map_err(image_err(path))?.into_luma16();
        let (w, h) = grey.dimensions();
        let segments: Vec<u32> = grey.into_raw().into_iter().map(u32::from).collect();
        let table = read_sidecar(&sidecar_path(path))?;
        LabeledSegmentation::new(w as usize, h as usize, segments, &table)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ensure_parent(path)?;
        let raw = self
            .segments
            .iter()
            .map(|&s| {
                u16::try_from(s).map_err(|_| {
                    Error::InvalidArgument(format!("segment id {s} does not fit 16 bits"))
                })
            })
            .collect::<Result<Vec<u16>>>()?;
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("sized");
        buf.save(path).map_err(image_err(path))?;
        let mut text = String::new();
        for (s, c) in self.segment_classes() {
            text.push_str(&format!("{s} {c}\n"));
        }
        let side = sidecar_path(path);
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }
}

fn read_sidecar(path: &Path) -> Result<BTreeMap<u32, u32>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let mut it = line.split_whitespace();
        let (Some(s), Some(c), None) = (it.next(), it.next(), it.next()) else {
            return Err(err("expected `<segment_id> <class_id>`"));
        };
        let s: u32 = s.parse().map_err(|_| err("bad segment id"))?;
        let c: u32 = c.parse().map_err(|_| err("bad class id"))?;
        if table.insert(s, c).is_some_and(|prev| prev != c) {
            return Err(err("segment mapped to two classes"));
        }
    }
    Ok(table)
}

impl BoundaryMap {
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ensure_parent(path)?;
        let raw: Vec<u16> = self
            .values
            .iter()
            .map(|&p| (p * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("sized");
        buf.save(path).map_err(image_err(path))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let grey = image::open(path).map_err(image_err(path))?.into_luma16();
        let (w, h) = grey.dimensions();
        let values = grey
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect();
        BoundaryMap::new(w as usize, h as usize, values)
    }
}

impl DatasetManifest {
    /// Loads entry `i`, enforcing the minimum forest size and matching
    /// image/segmentation dimensions.
    pub fn load_sample(&self, i: usize) -> Result<(Image, LabeledSegmentation)> {
        let img = Image::load_png(self.image_path(i))?;
        img.ensure_min_side(MIN_FOREST_SIDE)?;
        let seg = LabeledSegmentation::load_png(self.seg_path(i))?;
        if seg.width() != img.width() || seg.height() != img.height() {
            return Err(Error::dims(
                format!("{}x{}", img.width(), img.height()),
                format!("{}x{} in {}", seg.width(), seg.height(), self.seg_path(i).display()),
            ));
        }
        Ok((img, seg))
    }
}
