//! Procedural labeled dataset with parameterized corruptions and the
//! continual / gradual schedule builders.
//!
//! Classes are oriented sinusoidal gratings: class `c` out of `C` gets the
//! orientation `pi * c / C` with small per-sample jitter in angle, frequency
//! and phase. A small CNN separates these cleanly, and the patterns degrade
//! realistically under noise, blur and photometric corruptions.

use ndarray::{Array1, Axis};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GttaError, Result};
use crate::nn::{seeded_rng, Tensor4};

/// Bumped whenever the severity tables below change.
pub const CORRUPTION_CONSTANTS_VERSION: &str = "toy-corruptions-v1";

/// Per-severity parameters, index 0 = severity 1.
pub const NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const BLUR_SIGMA: [f64; 5] = [0.5, 0.8, 1.1, 1.5, 2.0];
pub const CONTRAST_SCALE: [f64; 5] = [0.75, 0.55, 0.40, 0.27, 0.15];
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.06, 0.12, 0.18, 0.26, 0.35];
pub const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];

pub const IMG_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    fn id(&self) -> u64 {
        match self {
            CorruptionKind::GaussianNoise => 1,
            CorruptionKind::Blur => 2,
            CorruptionKind::Contrast => 3,
            CorruptionKind::Brightness => 4,
            CorruptionKind::Pixelate => 5,
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = GttaError;
    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| GttaError::Parameter(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// in [1, 5]
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(GttaError::Parameter(format!(
                "severity must be in [1,5], got {severity}"
            )));
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    /// (n, 3, side, side), values in [0, 1]
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub seed: u64,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.dim().2
    }

    /// Copies out the rows at `idx` (duplicates allowed).
    pub fn select(&self, idx: &[usize]) -> LabeledImageSet {
        let (_, c, h, w) = self.images.dim();
        let mut images = Tensor4::zeros((idx.len(), c, h, w));
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        LabeledImageSet {
            images,
            labels,
            class_count: self.class_count,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Continual,
    Gradual,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DomainSchedule {
    pub entries: Vec<(CorruptionSpec, usize)>,
    pub mode: ScheduleMode,
}

/// Gradual severity cycle within one corruption kind.
pub const GRADUAL_CYCLE: [u8; 9] = [1, 2, 3, 4, 5, 4, 3, 2, 1];

pub fn build_schedule(
    mode: ScheduleMode,
    kinds: &[CorruptionKind],
    batches_per_domain: usize,
) -> Result<DomainSchedule> {
    if kinds.is_empty() {
        return Err(GttaError::Parameter("schedule needs at least one corruption kind".into()));
    }
    if batches_per_domain == 0 {
        return Err(GttaError::Parameter("batches_per_domain must be >= 1".into()));
    }
    let mut entries = Vec::new();
    match mode {
        ScheduleMode::Continual => {
            for &kind in kinds {
                entries.push((CorruptionSpec::new(kind, 5)?, batches_per_domain));
            }
        }
        ScheduleMode::Gradual => {
            for &kind in kinds {
                for &sev in GRADUAL_CYCLE.iter() {
                    entries.push((CorruptionSpec::new(kind, sev)?, batches_per_domain));
                }
            }
        }
    }
    Ok(DomainSchedule { entries, mode })
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

pub fn generate_dataset(
    seed: u64,
    class_count: usize,
    samples: usize,
    side: usize,
) -> Result<LabeledImageSet> {
    if class_count < 2 {
        return Err(GttaError::Parameter("class_count must be >= 2".into()));
    }
    if samples < class_count {
        return Err(GttaError::Parameter("samples must be >= class_count".into()));
    }
    if side < 16 {
        return Err(GttaError::Parameter("side must be >= 16".into()));
    }
    let mut images = Tensor4::zeros((samples, IMG_CHANNELS, side, side));
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % class_count;
        let mut rng = seeded_rng(seed, &[0x_da7a, i as u64]);
        let theta = std::f64::consts::PI * label as f64 / class_count as f64
            + rng.gen_range(-0.06..0.06);
        let freq = rng.gen_range(2.6..3.4);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let (ct, st) = (theta.cos(), theta.sin());
        let mut tints = [0.0; IMG_CHANNELS];
        for t in tints.iter_mut() {
            *t = rng.gen_range(0.92..1.0);
        }
        for y in 0..side {
            for x in 0..side {
                let u = x as f64 / side as f64;
                let v = y as f64 / side as f64;
                let wave = (std::f64::consts::TAU * freq * (u * ct + v * st) + phase).sin();
                let base = 0.5 + 0.38 * wave;
                for ch in 0..IMG_CHANNELS {
                    let noise = 0.02 * gauss(&mut rng);
                    images[[i, ch, y, x]] = (base * tints[ch] + noise).clamp(0.0, 1.0);
                }
            }
        }
        labels.push(label);
    }
    Ok(LabeledImageSet {
        images,
        labels,
        class_count,
        seed,
    })
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

pub fn apply_corruption(batch: &Tensor4, spec: &CorruptionSpec, seed: u64) -> Result<Tensor4> {
    if !(1..=5).contains(&spec.severity) {
        return Err(GttaError::Parameter(format!(
            "severity must be in [1,5], got {}",
            spec.severity
        )));
    }
    let level = (spec.severity - 1) as usize;
    let mut out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = NOISE_SIGMA[level];
            let mut rng = seeded_rng(seed, &[spec.kind.id(), spec.severity as u64]);
            let mut out = batch.clone();
            for (o, &b) in out.iter_mut().zip(batch.iter()) {
                *o = b + sigma * gauss(&mut rng);
            }
            out
        }
        CorruptionKind::Blur => gaussian_blur(batch, BLUR_SIGMA[level]),
        CorruptionKind::Contrast => {
            let k = CONTRAST_SCALE[level];
            batch.mapv(|e| (e - 0.5) * k + 0.5)
        }
        CorruptionKind::Brightness => {
            let d = BRIGHTNESS_SHIFT[level];
            batch.mapv(|e| e + d)
        }
        CorruptionKind::Pixelate => {
            let side = batch.dim().2;
            let block = PIXELATE_BLOCK[level].min(side / 2).max(1);
            pixelate(batch, block)
        }
    };
    out.mapv_inplace(|e| e.clamp(0.0, 1.0));
    Ok(out)
}

fn gaussian_blur(batch: &Tensor4, sigma: f64) -> Tensor4 {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (n, c, h, w) = batch.dim();
    // separable: horizontal then vertical, edge-clamped
    let mut tmp = Tensor4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                        acc += kv * batch[[ni, ci, y, sx as usize]];
                    }
                    tmp[[ni, ci, y, x]] = acc;
                }
            }
        }
    }
    let mut out = Tensor4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                        acc += kv * tmp[[ni, ci, sy as usize, x]];
                    }
                    out[[ni, ci, y, x]] = acc;
                }
            }
        }
    }
    out
}

fn pixelate(batch: &Tensor4, block: usize) -> Tensor4 {
    let (n, c, h, w) = batch.dim();
    let mut out = Tensor4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let mut by = 0;
            while by < h {
                let bh = block.min(h - by);
                let mut bx = 0;
                while bx < w {
                    let bw = block.min(w - bx);
                    let mut acc = 0.0;
                    for y in by..by + bh {
                        for x in bx..bx + bw {
                            acc += batch[[ni, ci, y, x]];
                        }
                    }
                    let avg = acc / (bh * bw) as f64;
                    for y in by..by + bh {
                        for x in bx..bx + bw {
                            out[[ni, ci, y, x]] = avg;
                        }
                    }
                    bx += block;
                }
                by += block;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Export / import: flat f32 binary tensor plus JSON sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct DatasetSidecar {
    shape: Vec<usize>,
    dtype: String,
    labels: Vec<usize>,
    class_count: usize,
    seed: u64,
    constants_version: String,
}

pub fn export_dataset(set: &LabeledImageSet, bin_path: &Path, json_path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(bin_path)?;
    let mut buf = Vec::with_capacity(set.images.len() * 4);
    for &v in set.images.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    let sidecar = DatasetSidecar {
        shape: set.images.shape().to_vec(),
        dtype: "f32".into(),
        labels: set.labels.clone(),
        class_count: set.class_count,
        seed: set.seed,
        constants_version: CORRUPTION_CONSTANTS_VERSION.into(),
    };
    let js = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(json_path, js)?;
    Ok(())
}

pub fn import_dataset(bin_path: &Path, json_path: &Path) -> Result<LabeledImageSet> {
    let sidecar: DatasetSidecar = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    if sidecar.dtype != "f32" {
        return Err(GttaError::Parameter(format!(
            "unsupported dtype '{}'",
            sidecar.dtype
        )));
    }
    if sidecar.shape.len() != 4 {
        return Err(GttaError::Parameter("expected rank-4 tensor".into()));
    }
    let numel: usize = sidecar.shape.iter().product();
    let mut raw = Vec::new();
    std::fs::File::open(bin_path)?.read_to_end(&mut raw)?;
    if raw.len() != numel * 4 {
        return Err(GttaError::Parameter(format!(
            "binary size {} does not match shape (expected {})",
            raw.len(),
            numel * 4
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in raw.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    let dims = (
        sidecar.shape[0],
        sidecar.shape[1],
        sidecar.shape[2],
        sidecar.shape[3],
    );
    let images = Tensor4::from_shape_vec(dims, data)
        .map_err(|e| GttaError::Shape(e.to_string()))?;
    Ok(LabeledImageSet {
        images,
        labels: sidecar.labels,
        class_count: sidecar.class_count,
        seed: sidecar.seed,
    })
}

/// Checksum used by determinism tests.
pub fn tensor_checksum(x: &Tensor4) -> u64 {
    let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
    for &v in x.iter() {
        acc ^= v.to_bits();
        acc = acc.wrapping_mul(0x1000_0000_01b3);
    }
    acc
}

pub fn labels_array(labels: &[usize], class_count: usize) -> Array1<usize> {
    debug_assert!(labels.iter().all(|&l| l < class_count));
    Array1::from_vec(labels.to_vec())
}
