//! Random affine augmentation: zoom · rotation · shear about the image center,
//! followed by translation, resampled by inverse mapping.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, Patch};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Upper bound of the rotation angle in degrees.
    pub rotation_deg: f64,
    /// Lower bound of the rotation angle; `None` means `-rotation_deg`.
    pub rotation_min: Option<f64>,
    /// Maximum shift as a fraction of width (x) and height (y).
    pub shift_frac: f64,
    /// Shear coefficient range `[-s, s]`.
    pub shear_strength: f64,
    pub zoom_low: f64,
    pub zoom_high: f64,
    pub copies_per_original: u32,
    /// Emit each original plus `copies - 1` variants instead of `copies` variants.
    pub keep_originals: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 30.0,
            rotation_min: None,
            shift_frac: 0.2,
            shear_strength: 0.2,
            zoom_low: 0.8,
            zoom_high: 1.2,
            copies_per_original: 2,
            keep_originals: false,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Parameters that always yield the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            rotation_min: None,
            shift_frac: 0.0,
            shear_strength: 0.0,
            zoom_low: 1.0,
            zoom_high: 1.0,
            ..Self::default()
        }
    }

    pub fn rotation_range(&self) -> (f64, f64) {
        (self.rotation_min.unwrap_or(-self.rotation_deg), self.rotation_deg)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.rotation_range();
        let bad = |m: &str| Err(DataError::InvalidConfig(format!("augment: {m}")));
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return bad("rotation_min exceeds rotation_deg");
        }
        if !(0.0..1.0).contains(&self.shift_frac) {
            return bad("shift_frac must lie in [0, 1)");
        }
        if self.shear_strength.is_nan() || self.shear_strength < 0.0 {
            return bad("shear_strength must be non-negative");
        }
        if !(self.zoom_low > 0.0 && self.zoom_low <= self.zoom_high) {
            return bad("zoom range must satisfy 0 < zoom_low <= zoom_high");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Shift as a fraction of the image width (positive = right).
    pub tx: f64,
    /// Shift as a fraction of the image height (positive = down).
    pub ty: f64,
    pub shear: f64,
    /// Content magnification; above 1 enlarges.
    pub zoom: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        tx: 0.0,
        ty: 0.0,
        shear: 0.0,
        zoom: 1.0,
    };
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_affine_params<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> AffineParams {
    let (rlo, rhi) = cfg.rotation_range();
    AffineParams {
        rotation_deg: uniform(rng, rlo, rhi),
        tx: uniform(rng, -cfg.shift_frac, cfg.shift_frac),
        ty: uniform(rng, -cfg.shift_frac, cfg.shift_frac),
        shear: uniform(rng, -cfg.shear_strength, cfg.shear_strength),
        zoom: uniform(rng, cfg.zoom_low, cfg.zoom_high),
    }
}

/// Per-item seed derived from the global seed, the parent id and the copy index,
/// so results do not depend on processing order.
pub fn item_seed(global: u64, parent_id: &str, copy: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(parent_id.as_bytes());
    h.update(copy.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Rounds coordinates that are within float noise of an integer, so right-angle
/// rotations and pure integer shifts sample the grid exactly.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Resamples a `[C, H, W]` tensor under `params`.
///
/// Forward map: `p' = c + t + zoom·R(θ)·Shear(s)·(p − c)`; each output pixel is
/// sampled at the inverse image with bilinear interpolation, coordinates outside
/// the image clamp to the nearest edge, and values clamp to `[0, 1]`.
pub fn affine_pixels(pixels: &Tensor, params: &AffineParams) -> Tensor {
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let theta = params.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let s = params.shear;
    let z = params.zoom;
    // M = z · [[cos, −sin], [sin, cos]] · [[1, s], [0, 1]]
    let m = [[z * cos, z * (cos * s - sin)], [z * sin, z * (sin * s + cos)]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (tx, ty) = (params.tx * w as f64, params.ty * h as f64);

    let plane = h * w;
    let src = pixels.data();
    let mut out = vec![0f32; pixels.len()];
    for oy in 0..h {
        for ox in 0..w {
            let dx = ox as f64 - cx - tx;
            let dy = oy as f64 - cy - ty;
            let sx = snap(cx + inv[0][0] * dx + inv[0][1] * dy).clamp(0.0, (w - 1) as f64);
            let sy = snap(cy + inv[1][0] * dx + inv[1][1] * dy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let at = |x: usize, y: usize| src[ch * plane + y * w + x] as f64;
                let v = if fx == 0.0 && fy == 0.0 {
                    at(x0, y0)
                } else {
                    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0))
                        + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
                };
                out[ch * plane + oy * w + ox] = (v as f32).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(pixels.shape().to_vec(), out).expect("same shape")
}

/// Applies `params` to a patch. The result keeps the source record and notes its parent.
pub fn apply_affine(patch: &Patch, params: &AffineParams) -> Patch {
    Patch {
        pixels: affine_pixels(&patch.pixels, params),
        record: patch.record.clone(),
        augmented_from: Some(patch.augmented_from.clone().unwrap_or_else(|| patch.record.id())),
    }
}
