//! wasm-bindgen exports for the static page in `www/`.
//!
//! Images cross the boundary as 50×50 RGBA bytes, the layout of a canvas `ImageData`.

use idc_core::data::synthetic::{synth_look_alike, synth_patch};
use idc_core::data::{affine_pixels, AffineParams, PATCH_SIZE};
use idc_core::metrics::{compute_metrics, percent, ConfusionMatrix};
use idc_core::nn::{adamax_step, AdamaxConfig, AdamaxState};
use idc_core::Tensor;
use rand::SeedableRng;
use wasm_bindgen::prelude::*;

const PLANE: usize = PATCH_SIZE * PATCH_SIZE;

fn to_rgba(t: &Tensor) -> Vec<u8> {
    let d = t.data();
    let mut out = Vec::with_capacity(PLANE * 4);
    for i in 0..PLANE {
        for c in 0..3 {
            out.push((d[c * PLANE + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        out.push(255);
    }
    out
}

fn from_rgba(rgba: &[u8]) -> Result<Tensor, JsError> {
    if rgba.len() != PLANE * 4 {
        return Err(JsError::new(&format!("expected {} RGBA bytes, got {}", PLANE * 4, rgba.len())));
    }
    let mut px = vec![0f32; 3 * PLANE];
    for i in 0..PLANE {
        for c in 0..3 {
            px[c * PLANE + i] = rgba[i * 4 + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, PATCH_SIZE, PATCH_SIZE], px).expect("fixed shape"))
}

/// A generated patch. `kind` 0 = typical tissue, 1 = look-alike of the other class.
#[wasm_bindgen]
pub fn sample_patch(label: u8, kind: u8, seed: u32) -> Vec<u8> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed as u64);
    let label = label.min(1);
    let t = if kind == 1 {
        synth_look_alike(label, &mut rng)
    } else {
        synth_patch(label, 0.0, &mut rng)
    };
    to_rgba(&t)
}

/// Applies one affine augmentation. Shifts are fractions of the patch size.
#[wasm_bindgen]
pub fn augment(rgba: &[u8], rotation_deg: f64, tx: f64, ty: f64, shear: f64, zoom: f64) -> Result<Vec<u8>, JsError> {
    if zoom.is_nan() || zoom <= 0.0 {
        return Err(JsError::new("zoom must be positive"));
    }
    let params = AffineParams {
        rotation_deg,
        tx,
        ty,
        shear,
        zoom,
    };
    Ok(to_rgba(&affine_pixels(&from_rgba(rgba)?, &params)))
}

/// Metrics for a confusion matrix as a JSON string; undefined ratios are `null`.
#[wasm_bindgen]
pub fn metrics_json(tp: u32, fp: u32, fn_: u32, tn: u32) -> Result<String, JsError> {
    let report = compute_metrics(&ConfusionMatrix::new(tp as u64, fp as u64, fn_ as u64, tn as u64))
        .map_err(|e| JsError::new(&e.to_string()))?;
    let pct = |m: Option<f64>| m.map(percent);
    let v = serde_json::json!({
        "accuracy": pct(report.accuracy),
        "sensitivity": pct(report.sensitivity),
        "specificity": pct(report.specificity),
        "precision": pct(report.precision),
        "f1": pct(report.f1),
        "undefined": report.undefined,
    });
    Ok(v.to_string())
}

/// Adamax on `f(x, y) = (x² + scale·y²) / 2` from `(x0, y0)`.
/// Returns `steps + 1` points flattened as `[x0, y0, x1, y1, ...]`.
#[wasm_bindgen]
pub fn adamax_trajectory(x0: f64, y0: f64, scale: f64, learning_rate: f64, steps: u32) -> Vec<f64> {
    let config = AdamaxConfig {
        learning_rate,
        ..AdamaxConfig::default()
    };
    let mut p = Tensor::<f64>::from_vec(vec![x0, y0]);
    let mut state = AdamaxState::new(&[2], config);
    let mut out = vec![x0, y0];
    for _ in 0..steps {
        let g = Tensor::from_vec(vec![p.data()[0], scale * p.data()[1]]);
        adamax_step(&mut p, &g, &mut state).expect("matching shapes");
        out.extend_from_slice(p.data());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_round_trip_and_identity_augment() {
        let img = sample_patch(1, 0, 4);
        assert_eq!(img.len(), PLANE * 4);
        assert_eq!(augment(&img, 0.0, 0.0, 0.0, 0.0, 1.0).unwrap(), img);
    }

    #[test]
    fn quarter_turn_moves_corner() {
        let mut img = vec![0u8; PLANE * 4];
        img[0] = 255;
        let out = augment(&img, 90.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        // Top-left (0, 0) goes to top-right (49, 0) under a 90° turn with y down.
        assert_eq!(out[(PATCH_SIZE - 1) * 4], 255);
        assert_eq!(out[0], 0);
    }

    #[test]
    fn metrics_match_hand_values() {
        let v: serde_json::Value = serde_json::from_str(&metrics_json(3286, 107, 351, 3474).unwrap()).unwrap();
        assert_eq!(v["accuracy"], "93.65");
        assert_eq!(v["f1"], "93.49");
        let v: serde_json::Value = serde_json::from_str(&metrics_json(0, 0, 0, 5).unwrap()).unwrap();
        assert!(v["precision"].is_null());
    }

    #[test]
    fn first_adamax_step_moves_by_learning_rate() {
        // With m̂ = g and u = |g| the first update is lr·sign(g) per coordinate.
        let t = adamax_trajectory(1.0, -2.0, 10.0, 0.1, 1);
        assert!((t[2] - 0.9).abs() < 1e-6);
        assert!((t[3] + 1.9).abs() < 1e-6);
    }
}
