//! Images and the non-overlapping patch grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height x width x channels` raster of 8-bit intensities.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    levels: u32,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        levels: u32,
        data: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "unsupported channel count {channels} (expected 1 or 3)"
            )));
        }
        if levels == 0 || levels > 255 {
            return Err(Error::InvalidArgument(format!(
                "intensity levels must be in 1..=255, got {levels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::Length {
                expected,
                found: data.len(),
            });
        }
        if let Some(&v) = data.iter().find(|&&v| v as u32 > levels) {
            return Err(Error::Data(format!(
                "intensity {v} exceeds level count {levels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            levels,
            data,
        })
    }

    /// Single-channel image with `G = 255`.
    pub fn gray(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(height, width, 1, 255, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            255,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: u8) {
        let v = value.min(self.levels as u8);
        self.data[(row * self.width + col) * self.channels + channel] = v;
    }
}

/// BT.601 luma, round half up. Single-channel input is returned unchanged.
pub fn to_luminance(image: &ImageBuffer) -> Result<ImageBuffer> {
    match image.channels {
        1 => Ok(image.clone()),
        3 => {
            let max = image.levels as f64;
            let data = image
                .data
                .chunks_exact(3)
                .map(|px| {
                    let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                    (y + 0.5).floor().clamp(0.0, max) as u8
                })
                .collect();
            ImageBuffer::new(image.height, image.width, 1, image.levels, data)
        }
        c => Err(Error::InvalidArgument(format!(
            "unsupported channel count {c}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub source_height: usize,
    pub source_width: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        if patch_size > height.min(width) {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch_size} exceeds image side min({height}, {width})"
            )));
        }
        Ok(Self {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
            source_height: height,
            source_width: width,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Pixel offset `(row, col)` of patch `k` in row-major enumeration.
    pub fn origin(&self, k: usize) -> (usize, usize) {
        (
            self.patch_size * (k / self.cols),
            self.patch_size * (k % self.cols),
        )
    }

    /// Grid coordinates `(row, col)` of patch `k`.
    pub fn cell(&self, k: usize) -> (usize, usize) {
        (k / self.cols, k % self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub index: usize,
    pub origin: (usize, usize),
    pub size: usize,
    pub channels: usize,
    /// `size x size x channels`, row-major.
    pub pixels: Vec<u8>,
}

pub fn partition_patches(image: &ImageBuffer, patch_size: usize) -> Result<PatchGrid> {
    PatchGrid::new(image.height, image.width, patch_size)
}

pub fn extract(image: &ImageBuffer, grid: &PatchGrid, k: usize) -> Result<Patch> {
    let n = grid.num_patches();
    if k >= n {
        return Err(Error::Index { index: k, len: n });
    }
    check_grid(image, grid)?;
    let (r0, c0) = grid.origin(k);
    let p = grid.patch_size;
    let ch = image.channels;
    let mut pixels = Vec::with_capacity(p * p * ch);
    for r in r0..r0 + p {
        let start = (r * image.width + c0) * ch;
        pixels.extend_from_slice(&image.data[start..start + p * ch]);
    }
    Ok(Patch {
        index: k,
        origin: (r0, c0),
        size: p,
        channels: ch,
        pixels,
    })
}

/// All patches in index order.
pub fn extract_all(image: &ImageBuffer, grid: &PatchGrid) -> Result<Vec<Patch>> {
    (0..grid.num_patches())
        .map(|k| extract(image, grid, k))
        .collect()
}

/// Writes patches back into a zeroed image of the cropped grid size.
pub fn reassemble(patches: &[Patch], grid: &PatchGrid, levels: u32) -> Result<ImageBuffer> {
    let channels = patches.first().map(|p| p.channels).unwrap_or(1);
    let h = grid.rows * grid.patch_size;
    let w = grid.cols * grid.patch_size;
    let mut data = vec![0u8; h * w * channels];
    for patch in patches {
        let (r0, c0) = grid.origin(patch.index);
        let p = grid.patch_size;
        for r in 0..p {
            let dst = ((r0 + r) * w + c0) * channels;
            let src = r * p * channels;
            data[dst..dst + p * channels].copy_from_slice(&patch.pixels[src..src + p * channels]);
        }
    }
    ImageBuffer::new(h, w, channels, levels, data)
}

/// Top-left region covered by the grid.
pub fn crop_to_grid(image: &ImageBuffer, grid: &PatchGrid) -> Result<ImageBuffer> {
    check_grid(image, grid)?;
    let h = grid.rows * grid.patch_size;
    let w = grid.cols * grid.patch_size;
    let ch = image.channels;
    let mut data = Vec::with_capacity(h * w * ch);
    for r in 0..h {
        let start = r * image.width * ch;
        data.extend_from_slice(&image.data[start..start + w * ch]);
    }
    ImageBuffer::new(h, w, ch, image.levels, data)
}

fn check_grid(image: &ImageBuffer, grid: &PatchGrid) -> Result<()> {
    if grid.source_height != image.height || grid.source_width != image.width {
        return Err(Error::shape(
            "patch grid",
            &[image.height, image.width],
            &[grid.source_height, grid.source_width],
        ));
    }
    Ok(())
}
