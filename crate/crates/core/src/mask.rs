//! Binary masks, slice stacks and the preprocessing steps applied before
//! evaluation: binarization, informative-mask filtering, nearest-neighbour
//! downscaling and train/test/validation partitioning.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default binarization cutoff: pixels strictly brighter than this are foreground.
pub const DEFAULT_CUTOFF: u8 = 127;

/// Default minimum foreground count for a mask to be kept for training.
pub const DEFAULT_MIN_FOREGROUND: usize = 50;

/// Cutoff used to derive a foreground set from a soft prediction.
pub const SOFT_CUTOFF: f64 = 0.5;

/// Read access shared by hard and soft masks.
pub trait PixelValues {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    /// Value at row-major position `idx`, in `[0, 1]`.
    fn value(&self, idx: usize) -> f64;

    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    fn len(&self) -> usize {
        self.width() * self.height()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Binary foreground/background grid. Every stored value is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
    source_id: String,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "{}x{} mask needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {bad} is not 0 or 1")));
        }
        Ok(Mask {
            width,
            height,
            data,
            source_id: String::new(),
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
            source_id: String::new(),
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![1; width * height],
            source_id: String::new(),
        }
    }

    /// Builds a mask from a predicate over `(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Mask {
            width,
            height,
            data,
            source_id: String::new(),
        }
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = u8::from(on);
    }

    /// `(row, col)` of every foreground pixel in row-major order.
    pub fn foreground_coords(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }
}

impl PixelValues for Mask {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn value(&self, idx: usize) -> f64 {
        f64::from(self.data[idx])
    }
}

/// Soft prediction map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SoftMask {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "{}x{} soft mask needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("soft mask value {bad} outside [0, 1]")));
        }
        Ok(SoftMask { width, height, data })
    }

    /// Intensities scaled by 1/255, without rounding.
    pub fn from_gray(img: &GrayImage) -> Self {
        SoftMask {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Hard mask of the pixels with value `>= cutoff`.
    pub fn threshold(&self, cutoff: f64) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| u8::from(v >= cutoff)).collect(),
            source_id: String::new(),
        }
    }
}

impl From<&Mask> for SoftMask {
    fn from(m: &Mask) -> Self {
        SoftMask {
            width: m.width,
            height: m.height,
            data: m.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

impl PixelValues for SoftMask {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn value(&self, idx: usize) -> f64 {
        self.data[idx]
    }
}

/// Ordered sequence of same-sized slices forming a 3D volume.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack {
    slices: Vec<Mask>,
    stack_id: String,
    slice_index_origin: i64,
}

impl MaskStack {
    pub fn new(stack_id: impl Into<String>, slices: Vec<Mask>, slice_index_origin: i64) -> Result<Self> {
        if let Some(first) = slices.first() {
            let dims = (first.width, first.height);
            if let Some(bad) = slices.iter().find(|s| (s.width, s.height) != dims) {
                return Err(Error::dims(dims, (bad.width, bad.height)));
            }
        }
        Ok(MaskStack {
            slices,
            stack_id: stack_id.into(),
            slice_index_origin,
        })
    }

    pub fn slices(&self) -> &[Mask] {
        &self.slices
    }

    pub fn stack_id(&self) -> &str {
        &self.stack_id
    }

    pub fn slice_index_origin(&self) -> i64 {
        self.slice_index_origin
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Appends the slices of `other` after those of `self`.
    pub fn concat(mut self, other: MaskStack) -> Result<MaskStack> {
        let origin = self.slice_index_origin;
        let id = std::mem::take(&mut self.stack_id);
        self.slices.extend(other.slices);
        MaskStack::new(id, self.slices, origin)
    }
}

/// Disjoint train/test/validation id lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub validation: Vec<String>,
}

impl DatasetSplit {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let split: DatasetSplit = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        let mut seen = HashSet::new();
        for id in split.train.iter().chain(&split.test).chain(&split.validation) {
            if !seen.insert(id) {
                return Err(Error::Parse(format!("id {id} appears in more than one split")));
            }
        }
        Ok(split)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pixel is foreground iff its intensity is strictly greater than `cutoff`.
pub fn to_binary(img: &GrayImage, cutoff: u8) -> Mask {
    Mask {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| u8::from(v > cutoff)).collect(),
        source_id: String::new(),
    }
}

pub fn foreground_count(m: &Mask) -> usize {
    m.data.iter().filter(|&&v| v == 1).count()
}

/// Keeps masks with at least `min_count` foreground pixels, preserving order.
pub fn filter_informative(masks: Vec<Mask>, min_count: usize) -> Vec<Mask> {
    masks.into_iter().filter(|m| foreground_count(m) >= min_count).collect()
}

/// Nearest-neighbour downscale; output is `floor(scale * dim)` on each axis.
pub fn resize_mask(m: &Mask, scale: f64) -> Result<Mask> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(format!("resize scale {scale} outside (0, 1]")));
    }
    let out_w = (m.width as f64 * scale).floor() as usize;
    let out_h = (m.height as f64 * scale).floor() as usize;
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid(format!(
            "resizing {}x{} by {scale} gives an empty {out_w}x{out_h} mask",
            m.width, m.height
        )));
    }
    let sx = m.width as f64 / out_w as f64;
    let sy = m.height as f64 / out_h as f64;
    let src = |o: usize, step: f64, limit: usize| (((o as f64 + 0.5) * step).floor() as usize).min(limit - 1);
    let mut data = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let row = src(y, sy, m.height) * m.width;
        for x in 0..out_w {
            data.push(m.data[row + src(x, sx, m.width)]);
        }
    }
    Ok(Mask {
        width: out_w,
        height: out_h,
        data,
        source_id: m.source_id.clone(),
    })
}

/// Seeded shuffle followed by a contiguous split.
///
/// Test and validation sizes are `floor(n * ratio)`; train takes the rest.
/// A split that would come out empty borrows one id from the largest split.
pub fn partition(ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (r_train, r_test, r_val) = ratios;
    if [r_train, r_test, r_val].iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be positive")));
    }
    if (r_train + r_test + r_val - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must sum to 1")));
    }
    let n = ids.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "{n} ids cannot populate train, test and validation"
        )));
    }
    let mut seen = HashSet::with_capacity(n);
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::invalid(format!("duplicate id {dup}")));
    }

    // The small tolerance absorbs products like 9358 * (461 / 9358) landing a ulp below 461.
    let floor_share = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
    let mut sizes = [0usize, floor_share(r_test), floor_share(r_val)];
    sizes[0] = n - sizes[1] - sizes[2];
    for i in 0..3 {
        if sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap();
            sizes[donor] -= 1;
            sizes[i] = 1;
        }
    }

    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let validation = shuffled.split_off(sizes[0] + sizes[1]);
    let test = shuffled.split_off(sizes[0]);
    Ok(DatasetSplit {
        seed,
        train: shuffled,
        test,
        validation,
    })
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?
        .with_guessed_format()
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            GrayImage::new(w as usize, h as usize, buf.into_raw())
        }
        other => Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("expected 8-bit grayscale, found {:?}", other.color()),
        }),
    }
}

/// Loads an 8-bit grayscale raster and binarizes it at `cutoff`.
/// The source id is the file stem.
pub fn load_mask(path: &Path, cutoff: u8) -> Result<Mask> {
    let img = load_gray(path)?;
    Ok(to_binary(&img, cutoff).with_source_id(file_stem(path)))
}

/// Loads a prediction raster as soft values `intensity / 255`.
pub fn load_soft_mask(path: &Path) -> Result<SoftMask> {
    Ok(SoftMask::from_gray(&load_gray(path)?))
}

/// Writes a mask as an 8-bit PNG with foreground 255.
pub fn save_mask(path: &Path, m: &Mask) -> Result<()> {
    let pixels: Vec<u8> = m.data.iter().map(|&v| v * 255).collect();
    image::save_buffer(
        path,
        &pixels,
        m.width as u32,
        m.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads `dir/slice_<N>.{png,pgm}` files ordered by `N`. Other files are ignored.
pub fn load_stack(dir: &Path, cutoff: u8) -> Result<MaskStack> {
    let mut entries: Vec<(i64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))? {
        let path = entry
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .path();
        if let Some(index) = slice_index(&path) {
            entries.push((index, path));
        }
    }
    entries.sort();
    if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid(format!(
            "duplicate slice index {} in {}",
            w[0].0,
            dir.display()
        )));
    }
    let origin = entries.first().map_or(0, |(i, _)| *i);
    let slices = entries
        .iter()
        .map(|(_, p)| load_mask(p, cutoff))
        .collect::<Result<Vec<_>>>()?;
    let stack_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    MaskStack::new(stack_id, slices, origin)
}

/// Raster files (`.png` / `.pgm`) directly inside `dir`, sorted by path.
pub fn raster_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))? {
        let path = entry
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .path();
        if path.is_file() && is_raster(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub(crate) fn is_raster(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "pgm")
    )
}

pub(crate) fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn slice_index(path: &Path) -> Option<i64> {
    if !is_raster(path) {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    let digits = stem.strip_prefix("slice_")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}
