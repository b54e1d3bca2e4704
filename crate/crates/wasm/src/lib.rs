//! Browser bindings: a UA point cloud on the torus, the stiff coefficients as functions of ε,
//! and per-step constraint residuals of one trajectory.
//!
//! Everything here runs trajectories one at a time, since the thread pool used by the
//! estimators is not available in the browser.

use ualangevin::mc::{self, ExperimentConfig};
use ualangevin::schemes::stiff_coeffs;
use ualangevin::{ConstraintModel, SchemeId};
use wasm_bindgen::prelude::*;

const MAX_POINTS: usize = 20_000;

fn torus_config(eps: f64, h_exp: i32, seed: u64) -> Result<ExperimentConfig, String> {
    if !(0..=14).contains(&h_exp) {
        return Err(format!("h exponent must lie in 0..=14, got {h_exp}"));
    }
    let c = ExperimentConfig {
        eps,
        h: 10.0 * 2f64.powi(-h_exp),
        seed,
        trajectories: 1,
        ..ExperimentConfig::torus()
    };
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

/// Final states of `count` UA trajectories, flattened `[x, y, z, x, y, z, …]`.
/// Trajectories whose projection fails are skipped.
pub fn torus_cloud(eps: f64, h_exp: i32, count: usize, seed: u64) -> Result<Vec<f64>, String> {
    let c = torus_config(eps, h_exp, seed)?;
    let mut out = Vec::with_capacity(3 * count.min(MAX_POINTS));
    for i in 0..count.min(MAX_POINTS) as u64 {
        match mc::run_trajectory(&c, SchemeId::Ua, i) {
            Ok(t) if !t.diverged => out.extend_from_slice(&t.state),
            _ => {}
        }
    }
    Ok(out)
}

/// Rows `[ε, e^{−h/ε}, 1 − e^{−h/ε}, noise amplitude]` on a log grid of `n` points.
pub fn coefficient_curves(h: f64, log10_eps_min: f64, log10_eps_max: f64, n: usize) -> Result<Vec<f64>, String> {
    if !(h > 0.0) || n < 2 || !(log10_eps_min < log10_eps_max) {
        return Err("need h > 0, n ≥ 2 and a non-empty ε range".into());
    }
    let mut out = Vec::with_capacity(4 * n);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let eps = 10f64.powf(log10_eps_min + t * (log10_eps_max - log10_eps_min));
        let k = stiff_coeffs(h, eps);
        out.extend_from_slice(&[eps, k.k_exp, k.k_om, k.k_noise]);
    }
    Ok(out)
}

/// `|ζ(X_n)|` for every step of one torus trajectory.
pub fn zeta_path(scheme: &str, eps: f64, h_exp: i32, seed: u64) -> Result<Vec<f64>, String> {
    let scheme: SchemeId = scheme.parse()?;
    let c = torus_config(eps, h_exp, seed)?;
    let path = mc::trajectory_path(&c, scheme, 0).map_err(|e| e.to_string())?;
    let mut z = [0.0];
    Ok(path
        .iter()
        .map(|x| {
            c.manifold.zeta(x, &mut z);
            z[0].abs()
        })
        .collect())
}

#[wasm_bindgen(js_name = torusCloud)]
pub fn torus_cloud_js(eps: f64, h_exp: i32, count: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    torus_cloud(eps, h_exp, count, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = coefficientCurves)]
pub fn coefficient_curves_js(h: f64, log10_eps_min: f64, log10_eps_max: f64, n: usize) -> Result<Vec<f64>, JsError> {
    coefficient_curves(h, log10_eps_min, log10_eps_max, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = zetaPath)]
pub fn zeta_path_js(scheme: &str, eps: f64, h_exp: i32, seed: u64) -> Result<Vec<f64>, JsError> {
    zeta_path(scheme, eps, h_exp, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_has_three_coordinates_per_point() {
        let pts = torus_cloud(1e-3, 9, 8, 1).unwrap();
        assert_eq!(pts.len(), 24);
        assert!(pts.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn curves_span_the_range() {
        let rows = coefficient_curves(0.01, -6.0, 0.0, 5).unwrap();
        assert_eq!(rows.len(), 20);
        assert!((rows[0] - 1e-6).abs() < 1e-18 && (rows[16] - 1.0).abs() < 1e-15);
        assert_eq!(rows[1], 0.0);
        assert!(coefficient_curves(0.01, 0.0, 0.0, 5).is_err());
    }

    #[test]
    fn constrained_path_stays_on_torus() {
        let z = zeta_path("euler-constrained", 1.0, 9, 4).unwrap();
        assert_eq!(z.len(), 513);
        assert!(z.iter().all(|v| *v <= 1e-9));
        assert!(zeta_path("rk4", 1.0, 9, 4).is_err());
    }
}
