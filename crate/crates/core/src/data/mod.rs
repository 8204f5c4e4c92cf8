//! Dataset ingestion and preparation.
//!
//! On disk a dataset is a directory holding `manifest.csv` (`id,label,split`),
//! `images/<id>.png` (8-bit RGB) and `masks/<id>.png` (8-bit grayscale, 0 or
//! 255 with 255 = tumor).

mod manifest;
mod png_io;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::mask::BinaryMask;
use crate::rng;
use crate::tensor::{bilinear_resize, Tensor};

pub use manifest::{parse_manifest, validate_id, write_manifest, ManifestRow};
pub use png_io::{decode_gray, decode_mask, decode_rgb, encode_gray, encode_mask, encode_rgb};
pub use synth::{synth_dataset, synth_generate, synth_image, Ellipse, SynthConfig, SynthImage};

pub const MANIFEST: &str = "manifest.csv";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: undecodable PNG: {msg}", path.display())]
    Png { path: PathBuf, msg: String },
    #[error("{id}: image is {image_w}x{image_h} but mask is {mask_w}x{mask_h}")]
    DimMismatch {
        id: String,
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("{}: non-binary mask value {value}", path.display())]
    NonBinaryMask { path: PathBuf, value: u8 },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("{id}: manifest label {manifest} disagrees with mask ({mask_pixels} tumor pixels)")]
    LabelMismatch {
        id: String,
        manifest: u8,
        mask_pixels: usize,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no {0} records to split")]
    EmptyClass(&'static str),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
    /// Positive iff the mask has at least one tumor pixel.
    pub label: bool,
    pub split: Split,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, image: RgbImage, mask: BinaryMask, split: Split) -> Self {
        let label = mask.count_positive() > 0;
        Self {
            id: id.into(),
            image,
            mask,
            label,
            split,
        }
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes images, masks and finally the manifest under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let images = root.join(IMAGES_DIR);
        let masks = root.join(MASKS_DIR);
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        fs::create_dir_all(&masks).map_err(io_err(&masks))?;
        for r in &self.records {
            validate_id(&r.id)?;
            let p = images.join(format!("{}.png", r.id));
            fs::write(&p, encode_rgb(&r.image)).map_err(io_err(&p))?;
            let p = masks.join(format!("{}.png", r.id));
            fs::write(&p, encode_mask(&r.mask)).map_err(io_err(&p))?;
        }
        let rows: Vec<ManifestRow> = self
            .records
            .iter()
            .map(|r| ManifestRow {
                id: r.id.clone(),
                label: u8::from(r.label),
                split: r.split,
            })
            .collect();
        let p = root.join(MANIFEST);
        fs::write(&p, write_manifest(&rows)).map_err(io_err(&p))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })
}

/// Reads one image file.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    decode_rgb(&read_file(path)?).map_err(|msg| DataError::Png {
        path: path.to_path_buf(),
        msg,
    })
}

/// Reads a 0/255 mask file.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let (w, h, bytes) = png_io::decode_gray(&read_file(path)?).map_err(|msg| DataError::Png {
        path: path.to_path_buf(),
        msg,
    })?;
    if let Some(&value) = bytes.iter().find(|&&v| v != 0 && v != 255) {
        return Err(DataError::NonBinaryMask {
            path: path.to_path_buf(),
            value,
        });
    }
    Ok(BinaryMask::from_bytes(w, h, &bytes).expect("decoded length"))
}

/// Loads and validates every record of a dataset directory, ordered by id.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest_path = root.join(MANIFEST);
    let text = String::from_utf8(read_file(&manifest_path)?).map_err(|_| DataError::Manifest("not UTF-8".into()))?;
    let mut rows = parse_manifest(&text)?;
    let mut seen = HashSet::new();
    for row in &rows {
        if !seen.insert(row.id.clone()) {
            return Err(DataError::DuplicateId(row.id.clone()));
        }
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let image = load_rgb(&root.join(IMAGES_DIR).join(format!("{}.png", row.id)))?;
        let mask = load_mask(&root.join(MASKS_DIR).join(format!("{}.png", row.id)))?;
        if (image.width, image.height) != (mask.width(), mask.height()) {
            return Err(DataError::DimMismatch {
                id: row.id,
                image_w: image.width,
                image_h: image.height,
                mask_w: mask.width(),
                mask_h: mask.height(),
            });
        }
        let record = ImageRecord::new(row.id, image, mask, row.split);
        if u8::from(record.label) != row.label {
            return Err(DataError::LabelMismatch {
                id: record.id,
                manifest: row.label,
                mask_pixels: record.mask.count_positive(),
            });
        }
        records.push(record);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
    })
}

/// Source index of destination `d` under nearest-neighbor sampling with
/// half-pixel centers.
fn nearest(d: usize, in_len: usize, out_len: usize) -> usize {
    (((d as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

/// Resizes the image bilinearly (rounded back to 8 bits) and the mask by
/// nearest neighbor, then recomputes the label from the resized mask.
pub fn resize_record(record: &ImageRecord, out_h: usize, out_w: usize) -> Result<ImageRecord> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::InvalidArgument(format!("target size {out_w}x{out_h}")));
    }
    let image = resize_rgb(&record.image, out_h, out_w)?;
    let (ih, iw) = (record.height(), record.width());
    let rows: Vec<usize> = (0..out_h).map(|y| nearest(y, ih, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|x| nearest(x, iw, out_w)).collect();
    let mask = BinaryMask::from_fn(out_w, out_h, |x, y| record.mask.get(cols[x], rows[y]));
    Ok(ImageRecord::new(record.id.clone(), image, mask, record.split))
}

pub fn resize_rgb(image: &RgbImage, out_h: usize, out_w: usize) -> Result<RgbImage> {
    if out_h == 0 || out_w == 0 || image.width == 0 || image.height == 0 {
        return Err(DataError::InvalidArgument(format!(
            "resize {}x{} to {out_w}x{out_h}",
            image.width, image.height
        )));
    }
    let planar = Tensor::<f32>::from_fn([1, 3, image.height, image.width], |_, c, y, x| {
        image.data[(y * image.width + x) * 3 + c] as f32
    });
    let resized = bilinear_resize(&planar, out_h, out_w).map_err(|e| DataError::InvalidArgument(e.to_string()))?;
    let mut out = RgbImage::filled(out_w, out_h, [0, 0, 0]);
    for y in 0..out_h {
        for x in 0..out_w {
            let px = std::array::from_fn(|c| resized.at(0, c, y, x).round().clamp(0.0, 255.0) as u8);
            out.put(x, y, px);
        }
    }
    Ok(out)
}

/// `x / 127.5 − 1` per channel, as a `(1, 3, H, W)` tensor.
pub fn normalize(image: &RgbImage) -> Tensor<f32> {
    Tensor::from_fn([1, 3, image.height, image.width], |_, c, y, x| {
        image.data[(y * image.width + x) * 3 + c] as f32 / 127.5 - 1.0
    })
}

/// Assigns train/test splits so each class keeps (up to rounding) the same
/// train fraction. Classes are shuffled independently with the seeded PRNG.
pub fn stratified_split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let positives: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.records[i].label).collect();
    let negatives: Vec<usize> = (0..dataset.len()).filter(|&i| !dataset.records[i].label).collect();
    if positives.is_empty() {
        return Err(DataError::EmptyClass("positive"));
    }
    if negatives.is_empty() {
        return Err(DataError::EmptyClass("negative"));
    }
    Ok(assign_splits(dataset, &[positives, negatives], train_fraction, seed))
}

/// Split assignment over the given class groups; empty groups are skipped.
pub(crate) fn assign_splits(dataset: &Dataset, classes: &[Vec<usize>], train_fraction: f64, seed: u64) -> Dataset {
    let mut out = dataset.clone();
    let mut rng = rng::seeded(seed);
    for class in classes {
        let mut idx = class.clone();
        rng::shuffle(&mut idx, &mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            out.records[i].split = if k < n_train { Split::Train } else { Split::Test };
        }
    }
    out
}
