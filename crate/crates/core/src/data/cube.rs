//! In-memory cube and the `.hsc` container.
//!
//! ```text
//!   "HSC1"  u32 H  u32 W  u32 B  u32 K
//!   f32[H·W·B]   band-interleaved-by-pixel
//!   i32[H·W]     labels, 0 = unlabeled
//!   u32 count (0 or K), then per class: u32 len, UTF-8 name
//! ```
//!
//! The format version is the digit in the magic.

use std::path::Path;

use crate::binio::{put_f32s, put_len, put_str, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HSC1";
const LABEL_MAGIC: &[u8; 4] = b"HSL1";

#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub num_classes: usize,
    /// `H·W·B`, pixel-major.
    pub data: Vec<f32>,
    /// `H·W`, values in `0..=K`.
    pub labels: Vec<i32>,
    /// Empty, or one name per class.
    pub class_names: Vec<String>,
}

impl HsiCube {
    pub fn new(
        (height, width, bands): (usize, usize, usize),
        num_classes: usize,
        data: Vec<f32>,
        labels: Vec<i32>,
    ) -> Result<Self> {
        let cube = Self {
            height,
            width,
            bands,
            num_classes,
            data,
            labels,
            class_names: Vec::new(),
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, b) = (self.height, self.width, self.bands);
        if h == 0 || w == 0 || b == 0 {
            return Err(Error::Validation(format!("empty cube {h}×{w}×{b}")));
        }
        if self.data.len() != h * w * b || self.labels.len() != h * w {
            return Err(Error::Validation(format!(
                "cube {h}×{w}×{b} holds {} values and {} labels",
                self.data.len(),
                self.labels.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at pixel {} band {}",
                i / b,
                i % b
            )));
        }
        let k = self.num_classes as i32;
        if let Some(&bad) = self.labels.iter().find(|&&l| !(0..=k).contains(&l)) {
            return Err(Error::Validation(format!("label {bad} outside 0..={k}")));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::Validation(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.data[start..start + self.bands]
    }

    pub fn label(&self, row: usize, col: usize) -> i32 {
        self.labels[row * self.width + col]
    }

    /// Labeled coordinates in row-major order.
    pub fn labeled_coords(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.label(r, c) > 0)
            .collect()
    }

    /// Labeled pixel count per class, index 0 for class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    pub fn class_name(&self, class: usize) -> String {
        self.class_names
            .get(class - 1)
            .cloned()
            .unwrap_or_else(|| format!("class {class}"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * (self.data.len() + self.labels.len()));
        out.extend_from_slice(MAGIC);
        for v in [self.height, self.width, self.bands, self.num_classes] {
            put_len(&mut out, v);
        }
        put_f32s(&mut out, &self.data);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        put_len(&mut out, self.class_names.len());
        for name in &self.class_names {
            put_str(&mut out, name);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let h = r.len("height")?;
        let w = r.len("width")?;
        let b = r.len("bands")?;
        let k = r.len("class count")?;
        let pixels = h
            .checked_mul(w)
            .filter(|&p| p > 0 && b > 0)
            .ok_or_else(|| Error::format(4, format!("bad extents {h}×{w}×{b}")))?;
        let values = pixels
            .checked_mul(b)
            .ok_or_else(|| Error::format(4, "raster size overflows"))?;
        let data = r.f32s(values, "raster")?;
        let labels = r.i32s(pixels, "label raster")?;
        let count = r.len("name count")?;
        let class_names = (0..count)
            .map(|_| r.string("class name"))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let cube = Self {
            height: h,
            width: w,
            bands: b,
            num_classes: k,
            data,
            labels,
            class_names,
        };
        cube.validate()?;
        Ok(cube)
    }
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, cube.to_bytes())?;
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    HsiCube::from_bytes(&std::fs::read(path)?)
}

/// `"HSL1"`, u32 H, u32 W, then an `i32` label raster.
pub fn label_map_bytes(height: usize, width: usize, labels: &[i32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    put_len(&mut out, height);
    put_len(&mut out, width);
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn read_label_map(bytes: &[u8]) -> Result<(usize, usize, Vec<i32>)> {
    let mut r = Reader::new(bytes);
    r.expect_magic(LABEL_MAGIC)?;
    let h = r.len("height")?;
    let w = r.len("width")?;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::format(4, "raster size overflows"))?;
    let labels = r.i32s(n, "label raster")?;
    r.finish()?;
    Ok((h, w, labels))
}
