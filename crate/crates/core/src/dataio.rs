//! On-disk formats: the `MOMD` dataset container, binary PGM/PPM, model
//! checkpoints, and patch heatmaps.
//!
//! `MOMD` layout (all integers little-endian):
//!
//! | bytes  | field                      |
//! |--------|----------------------------|
//! | 0..4   | magic `MOMD`               |
//! | 4      | version (1)                |
//! | 5..9   | image count, u32           |
//! | 9..11  | height, u16                |
//! | 11..13 | width, u16                 |
//! | 13     | channels                   |
//! | 14..16 | number of classes, u16     |
//! | 16     | label width in bytes (1/2) |
//!
//! followed by `count * H * W * C` pixel bytes (row-major, channel-last) and
//! `count` labels of the declared width.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{MaeModel, ViTConfig};
use crate::numerics::{ParamSet, Tensor};
use crate::patching::ImageBuffer;
use crate::pipeline::{Stage, TrainConfig};

pub const MAGIC: &[u8; 4] = b"MOMD";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetContainer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub label_width: usize,
    /// `count * height * width * channels` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

impl DatasetContainer {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let label_width = if num_classes <= 256 { 1 } else { 2 };
        let ds = Self {
            height,
            width,
            channels,
            num_classes,
            label_width,
            pixels,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Packs equally sized images.
    pub fn from_images(images: &[ImageBuffer], labels: &[u16], num_classes: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("no images to pack".into()))?;
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let (h, w, c) = (first.height(), first.width(), first.channels());
        let mut pixels = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if (img.height(), img.width(), img.channels()) != (h, w, c) {
                return Err(Error::shape(
                    "dataset",
                    &[h, w, c],
                    &[img.height(), img.width(), img.channels()],
                ));
            }
            pixels.extend_from_slice(img.data());
        }
        Self::new(h, w, c, num_classes, pixels, labels.to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_bytes(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> Result<ImageBuffer> {
        if i >= self.len() {
            return Err(Error::Index {
                index: i,
                len: self.len(),
            });
        }
        let n = self.image_bytes();
        ImageBuffer::new(
            self.height,
            self.width,
            self.channels,
            255,
            self.pixels[i * n..(i + 1) * n].to_vec(),
        )
    }

    pub fn images(&self) -> Result<Vec<ImageBuffer>> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height > u16::MAX as usize
            || self.width > u16::MAX as usize
            || self.num_classes > u16::MAX as usize
        {
            return Err(Error::InvalidArgument(
                "dimensions and class count must fit in 16 bits".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Format(format!(
                "channel count {} unsupported",
                self.channels
            )));
        }
        if self.label_width != 1 && self.label_width != 2 {
            return Err(Error::Format(format!(
                "label width {} unsupported",
                self.label_width
            )));
        }
        let expected = self.len() * self.image_bytes();
        if self.pixels.len() != expected {
            return Err(Error::Length {
                expected,
                found: self.pixels.len(),
            });
        }
        if let Some(&l) = self
            .labels
            .iter()
            .find(|&&l| l as usize >= self.num_classes)
        {
            return Err(Error::Data(format!(
                "label {l} out of range for {} classes",
                self.num_classes
            )));
        }
        if self.label_width == 1 && self.labels.iter().any(|&l| l > 255) {
            return Err(Error::Data("label does not fit in one byte".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.pixels.len() + self.len() * self.label_width);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(self.channels as u8);
        out.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        out.push(self.label_width as u8);
        out.extend_from_slice(&self.pixels);
        for &l in &self.labels {
            if self.label_width == 1 {
                out.push(l as u8);
            } else {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected MOMD",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let count = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let height = u16_at(9);
        let width = u16_at(11);
        let channels = bytes[13] as usize;
        let num_classes = u16_at(14);
        let label_width = bytes[16] as usize;
        if label_width != 1 && label_width != 2 {
            return Err(Error::Format(format!(
                "label width {label_width} unsupported"
            )));
        }
        let n_pix = count * height * width * channels;
        let expected = HEADER_LEN + n_pix + count * label_width;
        if bytes.len() != expected {
            return Err(Error::Length {
                expected,
                found: bytes.len(),
            });
        }
        let pixels = bytes[HEADER_LEN..HEADER_LEN + n_pix].to_vec();
        let lab = &bytes[HEADER_LEN + n_pix..];
        let labels = if label_width == 1 {
            lab.iter().map(|&b| b as u16).collect()
        } else {
            lab.chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        };
        let ds = Self {
            height,
            width,
            channels,
            num_classes,
            label_width,
            pixels,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn load_container(path: impl AsRef<Path>) -> Result<DatasetContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DatasetContainer::from_bytes(&bytes)
}

pub fn save_container(ds: &DatasetContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ds.to_bytes()?).map_err(|e| Error::io(path, e))
}

/// Parses binary PGM (`P5`) or PPM (`P6`) with `maxval <= 255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' && bytes[pos] != b'\r' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::Format(format!(
                "unsupported PNM magic `{other}` (expected P5 or P6)"
            )))
        }
    };
    let mut number = |what: &str| -> Result<usize> {
        let t = token(bytes)?;
        t.parse()
            .map_err(|_| Error::Format(format!("bad PNM {what} `{t}`")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported (must be 1..=255)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace after PNM header".into()));
    }
    pos += 1;
    let n = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < n {
        return Err(Error::Length {
            expected: pos + n,
            found: bytes.len(),
        });
    }
    ImageBuffer::new(height, width, channels, maxval as u32, raster[..n].to_vec())
}

pub fn encode_pnm(image: &ImageBuffer) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!(
        "{magic}\n{} {}\n{}\n",
        image.width(),
        image.height(),
        image.levels()
    )
    .into_bytes();
    out.extend_from_slice(image.data());
    out
}

pub fn load_pgm_ppm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn save_pgm_ppm(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(image)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub seed: u64,
    pub model: ViTConfig,
    pub train: Option<TrainConfig>,
    /// Digest over every mask plan used in pretraining.
    pub plan_digest: Option<String>,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn from_model(
        model: &MaeModel<f32>,
        stage: Stage,
        seed: u64,
        train: Option<TrainConfig>,
        plan_digest: Option<String>,
    ) -> Self {
        let params = model.params().clone();
        let manifest = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| ManifestEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            meta: CheckpointMeta {
                stage,
                seed,
                model: model.config().clone(),
                train,
                plan_digest,
                manifest,
            },
            params,
        }
    }

    pub fn model(&self) -> Result<MaeModel<f32>> {
        MaeModel::from_params(self.meta.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::CheckpointCorrupt(format!("metadata encoding: {e}")))?;
        let mut out = Vec::with_capacity(4 + meta.len() + self.params.total_elements() * 4);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::CheckpointCorrupt("missing metadata length".into()));
        }
        let meta_len = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let meta_end = 4usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::CheckpointCorrupt("metadata runs past end of file".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[4..meta_end])
            .map_err(|e| Error::CheckpointCorrupt(format!("metadata: {e}")))?;
        let total: usize = meta
            .manifest
            .iter()
            .map(|m| m.shape.iter().product::<usize>())
            .sum();
        let payload = &bytes[meta_end..];
        if payload.len() != total * 4 {
            return Err(Error::CheckpointCorrupt(format!(
                "payload has {} bytes, manifest needs {}",
                payload.len(),
                total * 4
            )));
        }
        let mut params = ParamSet::new();
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for m in &meta.manifest {
            let n: usize = m.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            let t = Tensor::new(m.shape.clone(), data)
                .map_err(|e| Error::CheckpointCorrupt(format!("{}: {e}", m.name)))?;
            params.push(m.name.clone(), t);
        }
        Ok(Checkpoint { meta, params })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Min-max scales `values` into `[0, 255]`; constant input maps to 128.
pub fn heatmap_image(values: &[f64], rows: usize, cols: usize) -> Result<ImageBuffer> {
    if values.len() != rows * cols {
        return Err(Error::shape("heatmap", &[rows, cols], &[values.len()]));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "heatmap values must be finite".into(),
        ));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    ImageBuffer::gray(rows, cols, data)
}

pub fn write_heatmap(
    values: &[f64],
    rows: usize,
    cols: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    save_pgm_ppm(&heatmap_image(values, rows, cols)?, path)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
