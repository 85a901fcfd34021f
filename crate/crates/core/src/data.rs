//! Cases on disk, slice preprocessing, sequence assembly and the synthetic
//! case generator.
//!
//! A case directory holds `volume.raw` (little-endian `f32`, slice-major),
//! an optional `mask.raw` (one 0/1 byte per voxel) and `meta.json`. A
//! dataset directory holds one case directory per id plus `manifest.json`
//! (`{"case_ids": [...]}`).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cae::Cae;
use crate::error::{DataError, Error, Result};
use crate::io;
use crate::rng::stream;
use crate::tensor::{Element, Tensor};

/// Slots in a padded sequence (the longest nodule in the reference data).
pub const MAX_SLICES: usize = 25;
/// Side length of preprocessed slices.
pub const SLICE_SIZE: usize = 256;
/// Intensity window mapped onto `[0, 1]`.
pub const WINDOW: (f32, f32) = (-1000.0, 400.0);
/// Fallback segmentation keeps pixels below this value inside the body.
pub const LUNG_THRESHOLD: f32 = -300.0;
/// Pixels above this value count as body when building the body hull.
pub const BODY_THRESHOLD: f32 = -500.0;

/// Slice features zero-padded to a fixed number of slots.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeatureMap<T: Element = f32> {
    /// `[slots, d]`; rows at and beyond `valid_len` are zero.
    pub features: Tensor<T>,
    /// True exactly on rows `< valid_len`.
    pub mask: Vec<bool>,
    pub valid_len: usize,
}

impl<T: Element> SequenceFeatureMap<T> {
    /// Stacks `rows` (each `[d]`) and pads to `slots`.
    pub fn from_rows(rows: &[Tensor<T>], slots: usize) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(DataError::Empty("sequence without slices".into()).into());
        };
        if rows.len() > slots {
            return Err(DataError::Shape(format!("{} slices exceed {slots} sequence slots", rows.len())).into());
        }
        let d = first.numel();
        let mut data = vec![T::zero(); slots * d];
        for (r, row) in rows.iter().enumerate() {
            if row.numel() != d || row.ndim() != 1 {
                return Err(DataError::Shape(format!("feature row {:?}, expected [{d}]", row.shape())).into());
            }
            data[r * d..(r + 1) * d].copy_from_slice(row.data());
        }
        Ok(Self {
            features: Tensor::new([slots, d], data)?,
            mask: (0..slots).map(|r| r < rows.len()).collect(),
            valid_len: rows.len(),
        })
    }

    pub fn slots(&self) -> usize {
        self.mask.len()
    }

    pub fn dim(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    /// The valid rows.
    pub fn rows(&self) -> Result<Vec<Tensor<T>>> {
        let d = self.dim();
        (0..self.valid_len)
            .map(|r| self.features.slice_rows(r, 1)?.reshape([d]))
            .collect()
    }

    /// The same valid content with a different slot count.
    pub fn repad(&self, slots: usize) -> Result<Self> {
        Self::from_rows(&self.rows()?, slots)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.features.shape();
        let bad = |m: String| Err(DataError::Shape(m).into());
        if shape.len() != 2 || shape[0] != self.mask.len() {
            return bad(format!("features {shape:?} with mask of {}", self.mask.len()));
        }
        if self.valid_len == 0 || self.valid_len > shape[0] {
            return bad(format!("valid length {} for {} slots", self.valid_len, shape[0]));
        }
        if self.mask.iter().enumerate().any(|(r, &m)| m != (r < self.valid_len)) {
            return bad("mask is not a valid prefix".into());
        }
        if self.features.data()[self.valid_len * shape[1]..].iter().any(|v| *v != T::zero()) {
            return bad("padded rows are not zero".into());
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> SequenceFeatureMap<U> {
        SequenceFeatureMap {
            features: self.features.cast(),
            mask: self.mask.clone(),
            valid_len: self.valid_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub case_id: String,
    pub num_slices: usize,
    pub height: usize,
    pub width: usize,
    pub label: u8,
    pub nodule_slices: Vec<usize>,
}

impl CaseMeta {
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(DataError::Invalid(format!("{}: label {} is not 0 or 1", self.case_id, self.label)).into());
        }
        if self.num_slices == 0 || self.height == 0 || self.width == 0 {
            return Err(DataError::Shape(format!("{}: empty volume", self.case_id)).into());
        }
        if self.nodule_slices.is_empty() {
            return Err(DataError::Empty(format!("{}: no nodule slices", self.case_id)).into());
        }
        if let Some(&index) = self.nodule_slices.iter().find(|&&i| i >= self.num_slices) {
            return Err(DataError::IndexOutOfRange {
                index,
                num_slices: self.num_slices,
            }
            .into());
        }
        let mut sorted = self.nodule_slices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.nodule_slices.len() {
            return Err(DataError::Invalid(format!("{}: repeated nodule slice", self.case_id)).into());
        }
        Ok(())
    }

    fn voxels(&self) -> usize {
        self.num_slices * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub meta: CaseMeta,
    /// `[S, H, W]` raw intensities.
    pub volume: Tensor<f32>,
    /// One flag per voxel, slice-major.
    pub lung_mask: Option<Vec<bool>>,
}

impl CaseRecord {
    pub fn case_id(&self) -> &str {
        &self.meta.case_id
    }

    pub fn label(&self) -> u8 {
        self.meta.label
    }

    pub fn slice(&self, index: usize) -> Result<Tensor<f32>> {
        let m = &self.meta;
        if index >= m.num_slices {
            return Err(DataError::IndexOutOfRange {
                index,
                num_slices: m.num_slices,
            }
            .into());
        }
        let n = m.height * m.width;
        Tensor::new([m.height, m.width], self.volume.data()[index * n..(index + 1) * n].to_vec())
    }

    pub fn slice_mask(&self, index: usize) -> Option<&[bool]> {
        let n = self.meta.height * self.meta.width;
        self.lung_mask.as_ref().map(|m| &m[index * n..(index + 1) * n])
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let m = &self.meta;
        if self.volume.shape() != [m.num_slices, m.height, m.width] {
            return Err(DataError::Shape(format!(
                "{}: volume {:?} vs metadata ({}, {}, {})",
                m.case_id,
                self.volume.shape(),
                m.num_slices,
                m.height,
                m.width
            ))
            .into());
        }
        if self.lung_mask.as_ref().is_some_and(|mask| mask.len() != m.voxels()) {
            return Err(DataError::Shape(format!("{}: mask size differs from volume", m.case_id)).into());
        }
        Ok(())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&io::read(path)?)
        .map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())).into())
}

/// Reads only `meta.json` of a case directory.
pub fn load_meta(dir: &Path) -> Result<CaseMeta> {
    let meta: CaseMeta = read_json(&dir.join("meta.json"))?;
    meta.validate()?;
    Ok(meta)
}

pub fn load_case(dir: &Path) -> Result<CaseRecord> {
    let meta = load_meta(dir)?;
    let n = meta.voxels();
    let path = dir.join("volume.raw");
    let bytes = io::read(&path)?;
    if bytes.len() != n * 4 {
        return Err(DataError::ByteCount {
            path,
            expected: n * 4,
            found: bytes.len(),
        }
        .into());
    }
    let voxels: Vec<f32> = bytes.chunks_exact(4).map(f32::read_le).collect();
    let mask_path = dir.join("mask.raw");
    let lung_mask = if mask_path.exists() {
        let bytes = io::read(&mask_path)?;
        if bytes.len() != n {
            return Err(DataError::ByteCount {
                path: mask_path,
                expected: n,
                found: bytes.len(),
            }
            .into());
        }
        if bytes.iter().any(|&b| b > 1) {
            return Err(DataError::Invalid(format!("{}: mask bytes must be 0 or 1", mask_path.display())).into());
        }
        Some(bytes.into_iter().map(|b| b == 1).collect())
    } else {
        None
    };
    let volume = Tensor::new([meta.num_slices, meta.height, meta.width], voxels)?;
    Ok(CaseRecord {
        meta,
        volume,
        lung_mask,
    })
}

pub fn write_case(dir: &Path, case: &CaseRecord) -> Result<()> {
    case.validate()?;
    io::create_dir(dir)?;
    let mut bytes = Vec::with_capacity(case.volume.numel() * 4);
    for &v in case.volume.data() {
        v.write_le(&mut bytes);
    }
    io::write_atomic(&dir.join("volume.raw"), &bytes)?;
    if let Some(mask) = &case.lung_mask {
        let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        io::write_atomic(&dir.join("mask.raw"), &bytes)?;
    }
    io::write_atomic(&dir.join("meta.json"), &serde_json::to_vec_pretty(&case.meta)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub case_ids: Vec<String>,
}

/// A dataset directory whose cases are loaded on demand.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub case_ids: Vec<String>,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        if manifest.case_ids.is_empty() {
            return Err(DataError::Empty(format!("{}: manifest lists no cases", root.display())).into());
        }
        Ok(Self {
            root: root.to_path_buf(),
            case_ids: manifest.case_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.case_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    pub fn case_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.case_ids[i])
    }

    pub fn load(&self, i: usize) -> Result<CaseRecord> {
        load_case(&self.case_dir(i))
    }

    pub fn metas(&self) -> Result<Vec<CaseMeta>> {
        (0..self.len()).map(|i| load_meta(&self.case_dir(i))).collect()
    }
}

pub fn write_manifest(root: &Path, case_ids: &[String]) -> Result<()> {
    let manifest = Manifest {
        case_ids: case_ids.to_vec(),
    };
    io::write_atomic(&root.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

/// Cases held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cases: Vec<CaseRecord>,
}

impl Dataset {
    /// `(benign, malignant)`.
    pub fn class_counts(&self) -> (usize, usize) {
        class_counts(self.cases.iter().map(CaseRecord::label))
    }
}

pub fn class_counts(labels: impl IntoIterator<Item = u8>) -> (usize, usize) {
    labels.into_iter().fold((0, 0), |(b, m), l| if l == 1 { (b, m + 1) } else { (b + 1, m) })
}

fn bilinear(src: &[f32], h: usize, w: usize, out: usize) -> Vec<f32> {
    let axis = |n_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let (rows, cols) = (axis(h), axis(w));
    let mut dst = Vec::with_capacity(out * out);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = src[r0 * w + c0] * (1.0 - fx) + src[r0 * w + c1] * fx;
            let bottom = src[r1 * w + c0] * (1.0 - fx) + src[r1 * w + c1] * fx;
            dst.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    dst
}

/// Threshold segmentation used when no lung mask is supplied: pixels below
/// [`LUNG_THRESHOLD`] that lie inside the body, where the body is the set
/// of pixels between the first and last body-valued pixel of both their
/// row and their column.
pub fn fallback_lung_mask(slice: &[f32], h: usize, w: usize) -> Vec<bool> {
    let body = |r: usize, c: usize| slice[r * w + c] > BODY_THRESHOLD;
    let span = |it: &mut dyn Iterator<Item = bool>| {
        let flags: Vec<bool> = it.collect();
        let first = flags.iter().position(|&b| b);
        let last = flags.iter().rposition(|&b| b);
        first.zip(last)
    };
    let row_span: Vec<_> = (0..h).map(|r| span(&mut (0..w).map(|c| body(r, c)))).collect();
    let col_span: Vec<_> = (0..w).map(|c| span(&mut (0..h).map(|r| body(r, c)))).collect();
    let inside = |(lo, hi): (usize, usize), i: usize| lo <= i && i <= hi;
    (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            slice[i] < LUNG_THRESHOLD
                && row_span[r].is_some_and(|s| inside(s, c))
                && col_span[c].is_some_and(|s| inside(s, r))
        })
        .collect()
}

/// Masks, resizes to [`SLICE_SIZE`] and window-normalizes one `[H, W]`
/// slice into `[1, 256, 256]` with values in `[0, 1]`. Masked-out pixels
/// are set to the bottom of the window, so they normalize to zero.
pub fn preprocess_slice(slice: &Tensor<f32>, mask: Option<&[bool]>) -> Result<Tensor<f32>> {
    let [h, w] = slice.shape() else {
        return Err(DataError::Shape(format!("slice must be 2-D, got {:?}", slice.shape())).into());
    };
    let (h, w) = (*h, *w);
    if h == 0 || w == 0 {
        return Err(DataError::Shape("empty slice".into()).into());
    }
    if !slice.is_finite() {
        return Err(DataError::NonFinite("slice contains NaN or infinite pixels".into()).into());
    }
    let fallback;
    let mask = match mask {
        Some(m) if m.len() != h * w => {
            return Err(DataError::Shape(format!("mask of {} pixels for a {h}x{w} slice", m.len())).into())
        }
        Some(m) => m,
        None => {
            fallback = fallback_lung_mask(slice.data(), h, w);
            &fallback
        }
    };
    let (lo, hi) = WINDOW;
    let masked: Vec<f32> = slice
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { v } else { lo })
        .collect();
    let out = bilinear(&masked, h, w, SLICE_SIZE)
        .into_iter()
        .map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect();
    Tensor::new([1, SLICE_SIZE, SLICE_SIZE], out)
}

/// Preprocessed nodule slices of a case in ascending slice order.
pub fn nodule_images(case: &CaseRecord) -> Result<Vec<Tensor<f32>>> {
    case.validate()?;
    let mut slices = case.meta.nodule_slices.clone();
    slices.sort_unstable();
    slices
        .into_iter()
        .map(|i| preprocess_slice(&case.slice(i)?, case.slice_mask(i)))
        .collect()
}

/// Encodes preprocessed slices as a padded sequence.
pub fn encode_sequence(images: &[Tensor<f32>], cae: &Cae<f32>, slots: usize) -> Result<SequenceFeatureMap> {
    if images.len() > slots {
        return Err(DataError::Invalid(format!("{} nodule slices exceed {slots} sequence slots", images.len())).into());
    }
    let rows = images.iter().map(|img| cae.encode(img)).collect::<Result<Vec<_>>>()?;
    SequenceFeatureMap::from_rows(&rows, slots)
}

/// Encodes the nodule slices of a case into a 25-slot sequence.
pub fn assemble_sequence(case: &CaseRecord, cae: &Cae<f32>) -> Result<SequenceFeatureMap> {
    let n = case.meta.nodule_slices.len();
    if n > MAX_SLICES {
        return Err(DataError::Invalid(format!(
            "{}: {n} nodule slices exceed {MAX_SLICES} sequence slots",
            case.case_id()
        ))
        .into());
    }
    encode_sequence(&nodule_images(case)?, cae, MAX_SLICES)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cases: usize,
    /// `(benign, malignant)` case counts.
    pub balance: (usize, usize),
    /// Inclusive range of nodule slice counts.
    pub slice_range: (usize, usize),
    /// Side length of generated slices.
    pub size: usize,
    /// Extra non-nodule slices on each side, inclusive range.
    pub margin: (usize, usize),
    /// Largest-section nodule radius ranges in pixels at 512 px; scaled
    /// with `size`.
    pub radius_benign: (f64, f64),
    pub radius_malignant: (f64, f64),
    pub intensity_benign: f64,
    pub intensity_malignant: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 114,
            balance: (58, 56),
            slice_range: (2, 25),
            size: 512,
            margin: (1, 3),
            radius_benign: (10.0, 16.0),
            radius_malignant: (22.0, 34.0),
            intensity_benign: -550.0,
            intensity_malignant: 30.0,
            noise_sigma: 20.0,
        }
    }
}

const AIR: f64 = -1000.0;
const SOFT_TISSUE: f64 = 40.0;
const LUNG: f64 = -850.0;

impl SynthConfig {
    pub fn with_cases(n_cases: usize, balance: (usize, usize)) -> Self {
        Self {
            n_cases,
            balance,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_cases < 2 {
            return bad("synthetic dataset needs at least 2 cases");
        }
        if self.balance.0 + self.balance.1 != self.n_cases {
            return bad("class balance must sum to the case count");
        }
        if self.balance.0 == 0 || self.balance.1 == 0 {
            return bad("both classes must be represented");
        }
        let (lo, hi) = self.slice_range;
        if lo == 0 || lo > hi || hi > MAX_SLICES {
            return bad("slice range must satisfy 1 <= min <= max <= 25");
        }
        if self.margin.0 > self.margin.1 {
            return bad("margin range is reversed");
        }
        if self.size < 32 {
            return bad("slice size must be at least 32");
        }
        for (a, b) in [self.radius_benign, self.radius_malignant] {
            if !(a > 0.0 && a <= b && b <= 50.0) {
                return bad("nodule radius range must satisfy 0 < min <= max <= 50");
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        Ok(())
    }

    /// Shuffled labels, one per case.
    pub fn labels(&self, seed: u64) -> Result<Vec<u8>> {
        self.validate()?;
        let mut labels: Vec<u8> = std::iter::repeat_n(0, self.balance.0)
            .chain(std::iter::repeat_n(1, self.balance.1))
            .collect();
        labels.shuffle(&mut stream(seed, "synth.labels"));
        Ok(labels)
    }
}

pub fn synthetic_case_id(index: usize) -> String {
    format!("case{index:03}")
}

/// Renders the `index`-th synthetic case. Each case draws from its own
/// seeded stream, so cases can be generated one at a time.
pub fn synthesize_case(cfg: &SynthConfig, seed: u64, index: usize, label: u8) -> Result<CaseRecord> {
    cfg.validate()?;
    let mut rng = stream(seed, &format!("synth.case.{index}"));
    let n = cfg.size;
    let px = n as f64 / 512.0;
    let slices = rng.random_range(cfg.slice_range.0..=cfg.slice_range.1);
    let before = rng.random_range(cfg.margin.0..=cfg.margin.1);
    let after = rng.random_range(cfg.margin.0..=cfg.margin.1);
    let depth = before + slices + after;

    let c = n as f64 / 2.0;
    let body = (0.36 * n as f64, 0.46 * n as f64);
    let lung_axes = (0.28 * n as f64, 0.15 * n as f64);
    let lung_centers = [(c, c - 0.2 * n as f64), (c, c + 0.2 * n as f64)];

    let (r_lo, r_hi) = if label == 1 { cfg.radius_malignant } else { cfg.radius_benign };
    let radius = rng.random_range(r_lo..=r_hi) * px;
    let side = rng.random_range(0..2);
    let reach = (lung_axes.0 - 1.4 * radius, lung_axes.1 - 1.4 * radius);
    let (u, v): (f64, f64) = loop {
        let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if u * u + v * v <= 1.0 {
            break (u, v);
        }
    };
    let center = (
        lung_centers[side].0 + u * reach.0.max(0.0),
        lung_centers[side].1 + v * reach.1.max(0.0),
    );
    let lobes: [(f64, f64); 2] = [(3.0, rng.random_range(0.0..6.3)), (5.0, rng.random_range(0.0..6.3))];
    let texture = (
        rng.random_range(0.15..0.35) / px,
        rng.random_range(0.15..0.35) / px,
        rng.random_range(0.0..6.3),
        rng.random_range(0.0..6.3),
    );
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let in_ellipse = |y: f64, x: f64, (cy, cx): (f64, f64), (ay, ax): (f64, f64)| {
        ((y - cy) / ay).powi(2) + ((x - cx) / ax).powi(2) <= 1.0
    };
    let mut volume = Vec::with_capacity(depth * n * n);
    let mut mask = Vec::with_capacity(depth * n * n);
    for s in 0..depth {
        let section = if (before..before + slices).contains(&s) {
            let t = (2 * (s - before) + 1) as f64 / slices as f64 - 1.0;
            Some(radius * (1.0 - t * t).sqrt())
        } else {
            None
        };
        for y in 0..n {
            for x in 0..n {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                let in_lung = lung_centers.iter().any(|&lc| in_ellipse(yf, xf, lc, lung_axes));
                let mut value = if in_lung {
                    LUNG
                } else if in_ellipse(yf, xf, (c, c), body) {
                    SOFT_TISSUE
                } else {
                    AIR
                };
                if let Some(r) = section {
                    let (dy, dx) = (yf - center.0, xf - center.1);
                    let d = (dy * dy + dx * dx).sqrt();
                    if label == 1 {
                        let theta = dy.atan2(dx);
                        let edge = r * (1.0 + 0.2 * (lobes[0].0 * theta + lobes[0].1).sin()
                            + 0.1 * (lobes[1].0 * theta + lobes[1].1).sin());
                        if d <= edge {
                            let (fy, fx, py, pxh) = texture;
                            value = cfg.intensity_malignant + 60.0 * (fy * yf + py).sin() * (fx * xf + pxh).sin();
                        }
                    } else if d < r {
                        let q = d / r;
                        value = LUNG + (cfg.intensity_benign - LUNG) * (1.0 - q * q);
                    }
                }
                if value != AIR {
                    value += noise.sample(&mut rng);
                }
                volume.push(value as f32);
                mask.push(in_lung);
            }
        }
    }
    let meta = CaseMeta {
        case_id: synthetic_case_id(index),
        num_slices: depth,
        height: n,
        width: n,
        label,
        nodule_slices: (before..before + slices).collect(),
    };
    Ok(CaseRecord {
        meta,
        volume: Tensor::new([depth, n, n], volume)?,
        lung_mask: Some(mask),
    })
}

/// Generates a whole synthetic dataset in memory.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    let labels = cfg.labels(seed)?;
    let cases = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| synthesize_case(cfg, seed, i, l))
        .collect::<Result<_>>()?;
    Ok(Dataset { cases })
}

/// Writes a synthetic dataset case by case, without holding it in memory.
pub fn write_synthetic(cfg: &SynthConfig, seed: u64, root: &Path) -> Result<Vec<String>> {
    let labels = cfg.labels(seed)?;
    io::create_dir(root)?;
    let mut ids = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let case = synthesize_case(cfg, seed, i, label)?;
        write_case(&root.join(case.case_id()), &case)?;
        ids.push(case.meta.case_id);
    }
    write_manifest(root, &ids)?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_cases: 6,
            balance: (3, 3),
            size: 64,
            ..SynthConfig::default()
        }
    }

    fn record(s: usize, h: usize, w: usize, nodules: Vec<usize>) -> CaseRecord {
        CaseRecord {
            meta: CaseMeta {
                case_id: "c".into(),
                num_slices: s,
                height: h,
                width: w,
                label: 1,
                nodule_slices: nodules,
            },
            volume: Tensor::from_fn([s, h, w], |i| i as f32 - 500.0),
            lung_mask: None,
        }
    }

    #[test]
    fn byte_accounting_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let case = record(20, 8, 8, vec![3, 4]);
        write_case(dir.path(), &case).unwrap();
        assert_eq!(std::fs::metadata(dir.path().join("volume.raw")).unwrap().len(), 20 * 64 * 4);
        assert_eq!(load_case(dir.path()).unwrap(), case);

        let mut meta = case.meta.clone();
        meta.nodule_slices = vec![19, 20];
        std::fs::write(dir.path().join("meta.json"), serde_json::to_vec(&meta).unwrap()).unwrap();
        let err = load_case(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(DataError::IndexOutOfRange { index: 20, num_slices: 20 })));
    }

    #[test]
    fn truncated_volume_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        write_case(dir.path(), &record(3, 4, 4, vec![0, 1])).unwrap();
        std::fs::write(dir.path().join("volume.raw"), [0u8; 12]).unwrap();
        assert!(matches!(load_case(dir.path()), Err(Error::Data(DataError::ByteCount { .. }))));
        std::fs::remove_file(dir.path().join("volume.raw")).unwrap();
        assert!(matches!(load_case(dir.path()), Err(Error::Data(DataError::MissingFile(_)))));
        assert!(matches!(DatasetDir::open(dir.path()), Err(Error::Data(DataError::MissingFile(_)))));
    }

    #[test]
    fn constant_slice_gives_constant_output() {
        let slice = Tensor::full([512, 512], -300.0f32);
        let out = preprocess_slice(&slice, Some(&vec![true; 512 * 512])).unwrap();
        assert_eq!(out.shape(), &[1, 256, 256]);
        let want = 700.0 / 1400.0;
        assert!(out.data().iter().all(|&v| (v - want).abs() < 1e-6));
    }

    #[test]
    fn all_false_mask_gives_zeros() {
        let slice = Tensor::from_fn([512, 512], |i| (i % 977) as f32 - 400.0);
        let out = preprocess_slice(&slice, Some(&vec![false; 512 * 512])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_stays_within_extremes() {
        let (lo, hi) = (-900.0f32, 200.0f32);
        let slice = Tensor::from_fn([512, 512], |i| {
            let (r, c) = (i / 512 / 256, i % 512 / 256);
            if (r + c) % 2 == 0 { lo } else { hi }
        });
        let out = preprocess_slice(&slice, Some(&vec![true; 512 * 512])).unwrap();
        let norm = |v: f32| (v + 1000.0) / 1400.0;
        assert!(out.data().iter().all(|&v| v >= norm(lo) - 1e-6 && v <= norm(hi) + 1e-6));
    }

    #[test]
    fn non_finite_pixels_are_rejected() {
        let mut slice = Tensor::zeros([8, 8]);
        slice.data_mut()[5] = f32::NAN;
        assert!(matches!(preprocess_slice(&slice, None), Err(Error::Data(DataError::NonFinite(_)))));
    }

    #[test]
    fn fallback_keeps_air_inside_the_body_only() {
        // body ring of soft tissue around an air-filled core, air outside
        let n = 16;
        let slice: Vec<f32> = (0..n * n)
            .map(|i| {
                let (r, c) = (i / n, i % n);
                let ring = (2..14).contains(&r) && (2..14).contains(&c);
                let core = (5..11).contains(&r) && (5..11).contains(&c);
                if core {
                    -850.0
                } else if ring {
                    40.0
                } else {
                    -1000.0
                }
            })
            .collect();
        let mask = fallback_lung_mask(&slice, n, n);
        assert!(mask[7 * n + 7]);
        assert!(!mask[0]);
        assert!(!mask[3 * n + 3]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 36);
    }

    #[test]
    fn sequence_padding_rules() {
        let rows: Vec<Tensor<f32>> = (0..7).map(|i| Tensor::full([4], i as f32 + 1.0)).collect();
        let seq = SequenceFeatureMap::from_rows(&rows, MAX_SLICES).unwrap();
        assert_eq!(seq.valid_len, 7);
        assert_eq!(seq.mask.iter().filter(|&&m| !m).count(), 18);
        seq.validate().unwrap();
        assert_eq!(seq.repad(7).unwrap().repad(25).unwrap(), seq);
        let full: Vec<Tensor<f32>> = (0..25).map(|_| Tensor::ones([4])).collect();
        assert!(SequenceFeatureMap::from_rows(&full, 25).unwrap().mask.iter().all(|&m| m));
        assert!(SequenceFeatureMap::from_rows(&full, 24).is_err());
    }

    #[test]
    fn too_many_nodule_slices() {
        let case = record(30, 8, 8, (0..26).collect());
        let cae = Cae::<f32>::build(crate::cae::CaeConfig::default(), 0).unwrap();
        assert!(matches!(assemble_sequence(&case, &cae), Err(Error::Data(DataError::Invalid(_)))));
    }

    #[test]
    fn synthetic_composition_and_determinism() {
        let cfg = small_cfg();
        let a = generate_synthetic(&cfg, 7).unwrap();
        assert_eq!(a.class_counts(), (3, 3));
        assert_eq!(a, generate_synthetic(&cfg, 7).unwrap());
        assert_ne!(a, generate_synthetic(&cfg, 8).unwrap());
        for case in &a.cases {
            case.validate().unwrap();
            let n = case.meta.nodule_slices.len();
            assert!((2..=25).contains(&n));
        }
        let labels = SynthConfig::with_cases(114, (58, 56)).labels(7).unwrap();
        assert_eq!(class_counts(labels), (58, 56));
    }

    #[test]
    fn degenerate_synthetic_configs() {
        assert!(SynthConfig::with_cases(1, (1, 0)).validate().is_err());
        assert!(SynthConfig::with_cases(4, (4, 0)).validate().is_err());
        assert!(SynthConfig::with_cases(4, (2, 1)).validate().is_err());
    }

    #[test]
    fn synthetic_nodules_differ_by_class() {
        let cfg = small_cfg();
        let data = generate_synthetic(&cfg, 3).unwrap();
        for case in &data.cases {
            let mid = case.meta.nodule_slices[case.meta.nodule_slices.len() / 2];
            let img = preprocess_slice(&case.slice(mid).unwrap(), case.slice_mask(mid)).unwrap();
            // pixels brighter than the benign peak only come from solid nodules
            let bright = img.data().iter().filter(|&&v| v > 0.6).count();
            assert_eq!(bright > 0, case.label() == 1, "{}", case.case_id());
        }
    }
}
