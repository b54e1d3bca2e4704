//! Acceptance criteria 1–10 at their pinned tolerances. Each test prints one PASS/FAIL line.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ualangevin::manifold::{fixman_forms, fixman_grad, identity_flat, ConstraintModel, Manifold};
use ualangevin::mc::{
    estimate, fit_loglog, gap_vs_eps, orth_group_table, reference_estimate, solver_cost_vs_eps, zeta_decay_vs_eps,
    EstimatorResult, ExperimentConfig, FAILURE_FRACTION,
};
use ualangevin::oracle::{confined_torus_point, defect_ratios, local_defect, random_point_on, OutcomeEnumeration};
use ualangevin::schemes::{explicit_expansion_step, ua_step, ua_step_codim1, ForceField, SchemeParams};
use ualangevin::stochastic::xi_moment;
use ualangevin::{linalg, SchemeId};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Written past the harness capture so the line shows for passing tests too.
fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "\ncriterion {n:>2} {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn torus_force() -> ForceField {
    ForceField::TorusConfinement { major: 3.0, minor: 1.0 }
}

fn decades(hi: i32, lo: i32) -> Vec<f64> {
    (lo..=hi).rev().map(|k| 10f64.powi(k)).collect()
}

fn lost_summary(label: &str, rows: &[(f64, EstimatorResult)]) -> String {
    rows.iter()
        .filter(|(_, r)| r.lost() as f64 > FAILURE_FRACTION * r.trajectories as f64)
        .map(|(x, r)| format!("{label}={x:e}: {}/{} lost", r.lost(), r.trajectories))
        .collect::<Vec<_>>()
        .join(", ")
}

#[test]
fn criterion_01_fixman_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut worst_closed: f64 = 0.0;
    for model in [Manifold::torus(), Manifold::OrthogonalGroup { m: 3 }] {
        for _ in 0..100 {
            let x = random_point_on(&model, &mut rng);
            let f = fixman_forms(&model, &x).unwrap();
            let scale = linalg::norm(&f.log_det_form).max(1.0);
            for (a, b) in [
                (&f.log_det_form, &f.trace_form),
                (&f.log_det_form, &f.projected_form),
                (&f.trace_form, &f.projected_form),
            ] {
                let d: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                worst = worst.max(d / scale);
            }
            if model.codim() == 1 {
                // codimension one: ∇ln det G = 2 G⁻¹ g′(g)
                let mut g = vec![0.0; 3];
                let mut dg = vec![0.0; 3];
                model.grad(&x, &mut g);
                model.grad_dir(&x, &g, &mut dg);
                let gram = linalg::dot(&g, &g);
                let closed: Vec<f64> = dg.iter().map(|v| 2.0 * v / gram).collect();
                let lib = fixman_grad(&model, &x).unwrap();
                let d: f64 = closed.iter().zip(&lib).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
                worst_closed = worst_closed.max(d / linalg::norm(&closed).max(1.0));
            }
        }
    }
    let pass = worst <= 1e-9 && worst_closed <= 1e-9;
    verdict(
        1,
        "Fixman identity",
        pass,
        &format!("max relative residual {worst:.2e}, codim-one closed form {worst_closed:.2e} (limit 1e-9)"),
    );
}

#[test]
fn criterion_02_noise_law() {
    // P(0) = 2/3, P(±√3) = 1/6: E ξ^{2k} = 3^k / 3, odd moments vanish by symmetry
    let expected = [0.0, 1.0, 0.0, 3.0, 0.0, 9.0];
    let got: Vec<f64> = (1..=6).map(xi_moment).collect();
    let e = OutcomeEnumeration::new(1).unwrap();
    let enumerated: Vec<f64> = (1..=6)
        .map(|k| e.expectation(|xi| Ok(xi[0].powi(k))).unwrap())
        .collect();
    let exact = got.iter().zip(&expected).all(|(a, b)| a == b);
    let enum_ok = enumerated
        .iter()
        .zip(&expected)
        .all(|(a, b)| (a - b).abs() <= 8.0 * f64::EPSILON * b.abs().max(1.0));
    verdict(
        2,
        "noise law moments",
        exact && enum_ok && got[5] != 15.0,
        &format!("moments 1..6 {got:?}, enumerated {enumerated:?}"),
    );
}

#[test]
fn criterion_03_codim1_reduction() {
    let model = Manifold::torus();
    let force = torus_force();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut compared, mut one_sided): (f64, usize, usize) = (0.0, 0, 0);
    for hk in 5..=10 {
        for ek in 0..=8 {
            let params = SchemeParams::new(2f64.powi(-hk), 10f64.powi(-ek), std::f64::consts::SQRT_2);
            let mut done = 0;
            let mut attempts = 0;
            while done < 20 && attempts < 200 {
                attempts += 1;
                let x = confined_torus_point(&mut rng);
                let xi: Vec<f64> = (0..3).map(|_| [0.0, 0.0, 0.0, 0.0, SQRT3, -SQRT3][rng.random_range(0..6)]).collect();
                match (ua_step(&model, &force, &params, &x, &xi), ua_step_codim1(&model, &force, &params, &x, &xi)) {
                    (Ok(a), Ok(b)) => {
                        done += 1;
                        compared += 1;
                        let d = a.state.iter().zip(&b.state).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
                        worst = worst.max(d / linalg::norm_inf(&b.state));
                    }
                    (Err(_), Err(_)) => {}
                    _ => one_sided += 1,
                }
            }
        }
    }
    verdict(
        3,
        "codimension-one reduction",
        worst <= 1e-12 && one_sided == 0 && compared == 6 * 9 * 20,
        &format!("max relative difference {worst:.2e} over {compared} steps, {one_sided} one-sided failures"),
    );
}

#[test]
fn criterion_04_local_weak_defect_order() {
    let model = Manifold::torus();
    let force = torus_force();
    let x = [2.0, 0.0, 0.0];
    let phi = |y: &[f64]| y.iter().map(|v| v * v).sum::<f64>();
    let hs = [2f64.powi(-6), 2f64.powi(-7), 2f64.powi(-8)];

    // independent enumeration of one defect with a plain triple loop
    let p = SchemeParams::new(hs[0], 1e-2, std::f64::consts::SQRT_2);
    let atoms = [(0.0, 4.0), (SQRT3, 1.0), (-SQRT3, 1.0)];
    let mut diff = 0.0;
    for a in atoms {
        for b in atoms {
            for c in atoms {
                let xi = [a.0, b.0, c.0];
                let w = a.1 * b.1 * c.1 / 216.0;
                let u = ua_step(&model, &force, &p, &x, &xi).unwrap().state;
                let e = explicit_expansion_step(&model, &force, &p, &x, &xi).unwrap();
                diff += w * (phi(&u) - phi(&e));
            }
        }
    }
    let lib = local_defect(&model, &force, &p, &x, phi).unwrap();
    let cross = (diff.abs() - lib).abs() / lib;

    let mut worst = f64::INFINITY;
    let mut lines = Vec::new();
    for eps in [1e-6, 1e-4, 1e-2, 1.0] {
        let base = SchemeParams::new(hs[0], eps, std::f64::consts::SQRT_2);
        let r = defect_ratios(&model, &force, &base, &x, &hs, phi).unwrap();
        worst = r.iter().copied().fold(worst, f64::min);
        lines.push(format!("eps={eps:e} {r:.3?}"));
    }
    verdict(
        4,
        "local weak defect order",
        worst >= 1.3 && cross < 1e-9,
        &format!("min log2 ratio {worst:.3} (limit 1.3), enumeration cross-check {cross:.1e}; {}", lines.join("; ")),
    );
}

fn torus_at(h_exp: i32, m: usize) -> ExperimentConfig {
    ExperimentConfig {
        h: 10.0 * 2f64.powi(-h_exp),
        trajectories: m,
        ..ExperimentConfig::torus()
    }
}

#[test]
fn criterion_05_manifold_convergence() {
    let eps = decades(-2, -7);
    let stochastic = zeta_decay_vs_eps(&torus_at(7, 1000), &eps);
    // (2, 0, 0) is an equilibrium without noise, so the deterministic run starts elsewhere on the torus
    let deterministic = zeta_decay_vs_eps(
        &ExperimentConfig {
            sigma: 0.0,
            x0: vec![3.0, 0.0, 1.0],
            ..torus_at(7, 1)
        },
        &eps,
    );
    let (pass, detail) = match (&stochastic, &deterministic) {
        (Ok(s), Ok(d)) => (
            (s.slope - 0.5).abs() <= 0.10 && (d.slope - 1.0).abs() <= 0.15,
            format!("slope {:.3} (0.50 ± 0.10), sigma=0 slope {:.3} (1.0 ± 0.15)", s.slope, d.slope),
        ),
        _ => (
            false,
            format!(
                "stochastic: {}; deterministic: {}",
                stochastic.as_ref().map(|s| format!("slope {:.3}", s.slope)).unwrap_or_else(|e| e.to_string()),
                deterministic.as_ref().map(|s| format!("slope {:.3}", s.slope)).unwrap_or_else(|e| e.to_string()),
            ),
        ),
    };
    verdict(5, "manifold convergence as eps -> 0", pass, &detail);
}

#[test]
fn criterion_06_scheme_convergence() {
    let cfg = torus_at(7, 1000);
    let gaps = gap_vs_eps(&cfg, &decades(-2, -7));
    let tiny = gap_vs_eps(&cfg, &[1e-14]);
    let (pass, detail) = match (&gaps, &tiny) {
        (Ok(g), Ok(t)) => {
            let fit = fit_loglog(&g.iter().map(|s| (s.eps, s.mean_max)).collect::<Vec<_>>());
            match fit {
                Ok(f) => (
                    (f.slope - 0.5).abs() <= 0.1 && t[0].max_max <= 1e-7,
                    format!(
                        "gap slope {:.3} (0.5 ± 0.1), max gap at eps=1e-14 {:.2e} (limit 1e-7)",
                        f.slope, t[0].max_max
                    ),
                ),
                Err(e) => (false, e.to_string()),
            }
        }
        _ => (
            false,
            format!(
                "grid: {}; eps=1e-14: {}",
                gaps.as_ref().map(|_| "ok".to_string()).unwrap_or_else(|e| e.to_string()),
                tiny.as_ref().map(|_| "ok".to_string()).unwrap_or_else(|e| e.to_string()),
            ),
        ),
    };
    verdict(6, "scheme convergence as eps -> 0", pass, &detail);
}

#[test]
fn criterion_07_uniform_solver_cost() {
    let eps = decades(2, -10);
    let (pass, detail) = match solver_cost_vs_eps(&torus_at(7, 1000), &eps) {
        Ok(costs) => {
            let hi = costs.iter().map(|c| c.1).fold(0.0, f64::max);
            let lo = costs.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
            (
                hi <= 10.0 && hi <= 2.0 * lo,
                format!("mean iterations per step in [{lo:.2}, {hi:.2}] (≤ 10, spread ≤ 2x)"),
            )
        }
        Err(e) => (false, e.to_string()),
    };
    verdict(7, "uniform solver cost", pass, &detail);
}

/// Error of `r` against the reference with its 3σ band, `(error, 3 · pooled stderr)`.
fn err_band(r: &EstimatorResult, reference: &EstimatorResult) -> (f64, f64) {
    ((r.mean - reference.mean).abs(), 3.0 * r.stderr.hypot(reference.stderr))
}

#[test]
fn criterion_08_torus_invariant_measure() {
    let base = torus_at(9, 100_000);
    let eps: Vec<f64> = (0..=16).map(|k| 2f64.powi(-k)).collect();
    let run = |scheme: SchemeId, e: f64| estimate(&ExperimentConfig { scheme, eps: e, ..base.clone() }).unwrap();

    // (c) Euler in R^d must be flagged divergent once ε ≤ h/4
    let rd: Vec<(f64, EstimatorResult)> = eps.iter().map(|&e| (e, run(SchemeId::EulerRd, e))).collect();
    let unflagged: Vec<String> = rd
        .iter()
        .filter(|(e, r)| *e <= base.h / 4.0 && (r.lost() as f64) <= FAILURE_FRACTION * r.trajectories as f64)
        .map(|(e, _)| format!("{e:e}"))
        .collect();
    let c_ok = unflagged.is_empty();

    // the constrained step ignores ε, so one run serves the whole grid
    let ec = run(SchemeId::EulerConstrained, 1.0);
    let ua: Vec<(f64, EstimatorResult)> = eps.iter().map(|&e| (e, run(SchemeId::Ua, e))).collect();
    let ua_lost = lost_summary("eps", &ua);

    // (b) constrained Euler misses the penalized measure at ε = 1 but not at ε = 2⁻¹⁶
    let ref_hi = reference_estimate(&ExperimentConfig { eps: 1.0, ..base.clone() }).unwrap();
    let ref_lo = reference_estimate(&ExperimentConfig { eps: eps[16], ..base.clone() }).unwrap();
    let (e_hi, b_hi) = err_band(&ec, &ref_hi);
    let (e_lo, b_lo) = err_band(&ec, &ref_lo);
    let b_ok = e_hi - b_hi >= 5.0 * (e_lo + b_lo);

    // (a) UA error flat in ε: refuted only if some error provably exceeds 4× another
    let (a_ok, a_detail) = if ua_lost.is_empty() {
        let bands: Vec<(f64, f64)> = ua
            .iter()
            .map(|(e, r)| err_band(r, &reference_estimate(&ExperimentConfig { eps: *e, ..base.clone() }).unwrap()))
            .collect();
        let max_lower = bands.iter().map(|(e, b)| (e - b).max(0.0)).fold(0.0, f64::max);
        let min_upper = bands.iter().map(|(e, b)| e + b).fold(f64::INFINITY, f64::min);
        let errs: Vec<String> = bands.iter().map(|(e, _)| format!("{e:.2e}")).collect();
        (
            max_lower <= 4.0 * min_upper,
            format!("UA errors [{}], max lower {max_lower:.2e} vs 4 x min upper {:.2e}", errs.join(", "), 4.0 * min_upper),
        )
    } else {
        (false, format!("UA loses trajectories to projection failure: {ua_lost}"))
    };

    verdict(
        8,
        "torus invariant measure",
        a_ok && b_ok && c_ok,
        &format!(
            "(a) {} {a_detail}; (b) {} EC error {e_hi:.3e}±{b_hi:.1e} at eps=1 vs {e_lo:.3e}±{b_lo:.1e} at eps=2^-16; (c) {} unflagged eps<=h/4: [{}]",
            if a_ok { "ok" } else { "FAILED" },
            if b_ok { "ok" } else { "FAILED" },
            if c_ok { "ok" } else { "FAILED" },
            unflagged.join(", ")
        ),
    );
}

#[test]
fn criterion_09_weak_order_one() {
    let base = ExperimentConfig {
        eps: 1.0,
        ..torus_at(9, 100_000)
    };
    let runs: Vec<(f64, EstimatorResult)> = (6..=9)
        .map(|k| {
            let h = 10.0 * 2f64.powi(-k);
            (h, estimate(&ExperimentConfig { h, ..base.clone() }).unwrap())
        })
        .collect();
    let lost = lost_summary("h", &runs);
    let (pass, detail) = if lost.is_empty() {
        let reference = reference_estimate(&base).unwrap();
        let pts: Vec<(f64, f64)> = runs.iter().map(|(h, r)| (*h, (r.mean - reference.mean).abs())).collect();
        match fit_loglog(&pts) {
            Ok(f) => ((f.slope - 1.0).abs() <= 0.25, format!("slope {:.3} (1.0 ± 0.25), errors {pts:.3?}", f.slope)),
            Err(e) => (false, e.to_string()),
        }
    } else {
        (false, format!("UA loses trajectories to projection failure: {lost}"))
    };
    verdict(9, "UA weak order one at eps=1", pass, &detail);
}

#[test]
fn criterion_10_orthogonal_group_table() {
    let base = ExperimentConfig {
        trajectories: 100_000,
        ..ExperimentConfig::orthogonal(2)
    };
    assert_eq!(base.x0, identity_flat(2));
    let row = orth_group_table(&[2], &base, |_| Ok(())).unwrap().remove(0);
    // literature value for m = 2
    let target_j_ua = 2.00619;
    let pass = (row.j_ua - target_j_ua).abs() <= 2e-2 && row.err_ua <= row.err_ec / 2.0;
    verdict(
        10,
        "orthogonal group table (m = 2)",
        pass,
        &format!(
            "J_ref {:.5} J_UA {:.5} (target 2.00619 ± 2e-2) err_UA {:.2e} err_EC {:.2e} (need err_UA ≤ err_EC/2)",
            row.j_ref, row.j_ua, row.err_ua, row.err_ec
        ),
    );
}
