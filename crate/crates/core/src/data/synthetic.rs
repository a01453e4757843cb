//! Seeded synthetic stand-ins for the histopathology data: tissue-like patches
//! written with the public naming convention, and embedding vectors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::features::FeatureRecord;
use super::image_io::{encode_png, CHANNELS, PATCH_SIZE};
use super::{item_seed, DataError};
use crate::tensor::Tensor;

const PINK: [f32; 3] = [0.93, 0.74, 0.85];
const PURPLE: [f32; 3] = [0.60, 0.36, 0.62];
const NUCLEUS_LIGHT: [f32; 3] = [0.72, 0.52, 0.76];
const NUCLEUS_DARK: [f32; 3] = [0.28, 0.10, 0.40];

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// A 3×50×50 tissue-like patch. A latent "malignancy" level drives stain color
/// and nucleus density: class 0 draws it from `[0, 0.35 + overlap]`, class 1 from
/// `[0.65 − overlap, 1]`, so `overlap = 0` gives separable classes.
pub fn synth_patch<R: Rng + ?Sized>(label: u8, overlap: f32, rng: &mut R) -> Tensor {
    let level = class_level(label, overlap, rng);
    render(level, NUCLEUS_RADIUS, rng)
}

fn class_level<R: Rng + ?Sized>(label: u8, overlap: f32, rng: &mut R) -> f32 {
    if label == 0 {
        rng.random_range(0.0..=(0.35 + overlap).min(1.0))
    } else {
        rng.random_range((0.65 - overlap).max(0.0)..=1.0)
    }
}

const NUCLEUS_RADIUS: (f32, f32) = (1.5, 3.5);

/// A patch that looks like the opposite class in stain, nucleus color and density.
/// Only nucleus size follows the label: enlarged for class 1, shrunken for class 0.
pub fn synth_look_alike<R: Rng + ?Sized>(label: u8, rng: &mut R) -> Tensor {
    let level = class_level(1 - label, 0.0, rng);
    let radius = if label == 1 { (4.0, 5.5) } else { (0.8, 1.3) };
    render(level, radius, rng)
}

fn render<R: Rng + ?Sized>(level: f32, radius: (f32, f32), rng: &mut R) -> Tensor {
    let n = PATCH_SIZE;
    let plane = n * n;
    let base = lerp(PINK, PURPLE, level);
    let (fx, fy, phase): (f32, f32, f32) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2), rng.random_range(0.0..std::f32::consts::TAU));
    let mut px = vec![0f32; CHANNELS * plane];
    for y in 0..n {
        for x in 0..n {
            let wave = 0.04 * (fx * x as f32 + fy * y as f32 + phase).sin();
            for c in 0..CHANNELS {
                px[c * plane + y * n + x] = base[c] + wave;
            }
        }
    }
    let nuclei = 2 + (level * 22.0).round() as usize;
    let color = lerp(NUCLEUS_LIGHT, NUCLEUS_DARK, level);
    for _ in 0..nuclei {
        let (cx, cy) = (rng.random_range(0.0..n as f32), rng.random_range(0.0..n as f32));
        let r: f32 = rng.random_range(radius.0..radius.1);
        let lo_x = (cx - r - 1.0).max(0.0) as usize;
        let hi_x = ((cx + r + 1.0) as usize).min(n - 1);
        let lo_y = (cy - r - 1.0).max(0.0) as usize;
        let hi_y = ((cy + r + 1.0) as usize).min(n - 1);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
                for c in 0..CHANNELS {
                    let p = &mut px[c * plane + y * n + x];
                    *p = *p * (1.0 - alpha) + color[c] * alpha;
                }
            }
        }
    }
    for p in px.iter_mut() {
        let noise: f32 = StandardNormal.sample(rng);
        *p = (*p + 0.03 * noise).clamp(0.0, 1.0);
    }
    Tensor::new(vec![CHANNELS, n, n], px).expect("fixed shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PatchStyle {
    Tissue { overlap: f32 },
    /// Separable tissue where a `rate` fraction of patches mimic the other
    /// class and differ from it only in nucleus size.
    LookAlike { rate: f32 },
    /// One flat color per class; cheap to write in bulk.
    Flat,
}

/// Writes `negatives + positives` PNGs under `root/<patient>/<class>/` using the
/// `<patient>_idx<k>_x<X>_y<Y>_class<C>.png` convention. Returns the file count.
pub fn write_patch_dataset(
    root: &Path,
    negatives: usize,
    positives: usize,
    style: PatchStyle,
    seed: u64,
) -> Result<usize, DataError> {
    const PATIENTS: usize = 16;
    let flat = [
        encode_png(&Tensor::full(&[3, PATCH_SIZE, PATCH_SIZE], 0.85)),
        encode_png(&Tensor::full(&[3, PATCH_SIZE, PATCH_SIZE], 0.45)),
    ];
    let mut created = std::collections::HashSet::new();
    let total = negatives + positives;
    for i in 0..total {
        let label = u8::from(i >= negatives);
        let patient = 9000 + i % PATIENTS;
        let k = i / PATIENTS;
        let dir = root.join(patient.to_string()).join(label.to_string());
        if created.insert(dir.clone()) {
            std::fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        }
        let name = format!("{patient}_idx{k}_x{}_y{}_class{label}.png", 1 + 50 * (k % 64), 1 + 50 * (k / 64));
        let bytes = match style {
            PatchStyle::Flat => flat[label as usize].clone(),
            PatchStyle::Tissue { overlap } => {
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, "synthetic-patch", i as u32));
                encode_png(&synth_patch(label, overlap, &mut rng))
            }
            PatchStyle::LookAlike { rate } => {
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, "synthetic-patch", i as u32));
                if rng.random::<f32>() < rate {
                    encode_png(&synth_look_alike(label, &mut rng))
                } else {
                    encode_png(&synth_patch(label, 0.0, &mut rng))
                }
            }
        };
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| DataError::io(&path, e))?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureSynthConfig {
    pub dim: usize,
    /// Distance between the two class means along the signal direction.
    pub separation: f32,
    /// Number of leading coordinates carrying the class signal.
    pub signal_dims: usize,
}

impl Default for FeatureSynthConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            separation: 2.0,
            signal_dims: 8,
        }
    }
}

/// Gaussian embedding vectors: unit isotropic noise plus a class shift of
/// `±separation/2` spread evenly over the signal coordinates.
pub fn synthetic_features(
    negatives: usize,
    positives: usize,
    cfg: &FeatureSynthConfig,
    seed: u64,
    source: &Path,
) -> Vec<FeatureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = cfg.separation / 2.0 / (cfg.signal_dims as f32).sqrt();
    (0..negatives + positives)
        .map(|i| {
            let label = u8::from(i >= negatives);
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let values = (0..cfg.dim)
                .map(|d| {
                    let noise: f32 = StandardNormal.sample(&mut rng);
                    if d < cfg.signal_dims {
                        noise + sign * shift
                    } else {
                        noise
                    }
                })
                .collect();
            FeatureRecord {
                id: format!("feat{i:06}_class{label}"),
                label,
                values,
                source: source.to_path_buf(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{decode_and_normalize, scan_dataset, PadMode};

    #[test]
    fn separable_patches_differ_in_mean_intensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean = |t: &Tensor| t.data().iter().sum::<f32>() / t.len() as f32;
        let neg: Vec<f32> = (0..20).map(|_| mean(&synth_patch(0, 0.0, &mut rng))).collect();
        let pos: Vec<f32> = (0..20).map(|_| mean(&synth_patch(1, 0.0, &mut rng))).collect();
        let max_pos = pos.iter().cloned().fold(f32::MIN, f32::max);
        let min_neg = neg.iter().cloned().fold(f32::MAX, f32::min);
        assert!(max_pos < min_neg, "{max_pos} vs {min_neg}");
    }

    #[test]
    fn written_dataset_scans_and_decodes() {
        let dir = tempfile::tempdir().unwrap();
        write_patch_dataset(dir.path(), 6, 4, PatchStyle::Tissue { overlap: 0.1 }, 3).unwrap();
        let recs = scan_dataset(dir.path(), true).unwrap();
        assert_eq!(recs.len(), 10);
        assert_eq!(recs.iter().filter(|r| r.label == 1).count(), 4);
        let t = decode_and_normalize(&recs[0].source_path, PadMode::Reject).unwrap();
        assert_eq!(t.shape(), &[3, 50, 50]);
    }

    #[test]
    fn features_are_seeded() {
        let cfg = FeatureSynthConfig::default();
        let a = synthetic_features(5, 5, &cfg, 9, Path::new("x"));
        assert_eq!(a, synthetic_features(5, 5, &cfg, 9, Path::new("x")));
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|r| r.values.len() == 64));
    }
}
