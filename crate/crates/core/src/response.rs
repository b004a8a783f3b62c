//! Susceptibilities, back-action factors and cavity-induced hybridisation.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemParams;
use crate::numerics::{bisect, check_grid};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Bracket (in wavelengths) searched for the cancellation point.
pub const CANCELLATION_BRACKET: (f64, f64) = (0.01, 0.24);
pub const CANCELLATION_TOL: f64 = 1e-4;

/// A complex response sampled on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexResponse {
    pub freq_grid: Vec<f64>,
    pub values: Vec<Complex64>,
}

impl ComplexResponse {
    pub fn from_fn<F: Fn(f64) -> Complex64>(grid: &[f64], f: F) -> Result<Self> {
        check_grid(grid)?;
        Ok(ComplexResponse {
            freq_grid: grid.to_vec(),
            values: grid.iter().map(|&w| f(w)).collect(),
        })
    }
}

/// Lorentzian response `1/(−i(ω−ω0) + width/2)`.
pub fn chi(omega: f64, omega0: f64, width: f64) -> Complex64 {
    1.0 / Complex64::new(0.5 * width, -(omega - omega0))
}

/// `μ_j(ω) = χ(ω, ω_j) − χ*(−ω, ω_j)`.
pub fn mech_susceptibility(omega: f64, omega_j: f64, gamma: f64) -> Complex64 {
    chi(omega, omega_j, gamma) - chi(-omega, omega_j, gamma).conj()
}

/// `η_c(ω) = χ(ω, −Δ) − χ*(−ω, −Δ)` with the full linewidth κ.
pub fn optical_susceptibility(omega: f64, delta: f64, kappa: f64) -> Complex64 {
    chi(omega, -delta, kappa) - chi(-omega, -delta, kappa).conj()
}

/// Low-frequency value of `i η_c`, `−2Δ/((κ/2)² + Δ²)`.
pub fn optical_susceptibility_static(delta: f64, kappa: f64) -> f64 {
    -2.0 * delta / (0.25 * kappa * kappa + delta * delta)
}

/// Cavity field susceptibility `χ_c(ω) = χ(ω, −Δ, κ)`.
pub fn cavity_susceptibility(omega: f64, params: &SystemParams) -> Complex64 {
    chi(omega, -params.delta, params.kappa)
}

/// `M_j = 1 + g_j² μ_j η_c`.
pub fn backaction_factor(g_j: f64, mu_j: Complex64, eta_c: Complex64) -> Complex64 {
    1.0 + g_j * g_j * mu_j * eta_c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

pub fn axis_mu(omega: f64, params: &SystemParams, axis: Axis) -> Complex64 {
    let wj = match axis {
        Axis::X => params.omega_x,
        Axis::Y => params.omega_y,
    };
    mech_susceptibility(omega, wj, params.gamma)
}

pub fn axis_backaction(omega: f64, params: &SystemParams, axis: Axis) -> Complex64 {
    let g = match axis {
        Axis::X => params.g_x,
        Axis::Y => params.g_y,
    };
    let eta = optical_susceptibility(omega, params.delta, params.kappa);
    backaction_factor(g, axis_mu(omega, params, axis), eta)
}

/// `G(ω) = i η_c g_x g_y + g_xy`.
pub fn coupling_interference_g(omega: f64, params: &SystemParams) -> Complex64 {
    I * optical_susceptibility(omega, params.delta, params.kappa) * params.g_x * params.g_y + params.g_xy
}

/// Mid-band frequency `(ω_x + ω_y)/2`.
pub fn omega_bar(params: &SystemParams) -> f64 {
    0.5 * (params.omega_x + params.omega_y)
}

/// `Ḡ = G(ω̄)`.
pub fn g_bar(params: &SystemParams) -> Complex64 {
    coupling_interference_g(omega_bar(params), params)
}

/// `(R_xy, R_yx) = (iμ_x G/M_x, iμ_y G/M_y)`.
pub fn hybridisation_functions(omega: f64, params: &SystemParams) -> (Complex64, Complex64) {
    let g = coupling_interference_g(omega, params);
    let eta = optical_susceptibility(omega, params.delta, params.kappa);
    let mx = mech_susceptibility(omega, params.omega_x, params.gamma);
    let my = mech_susceptibility(omega, params.omega_y, params.gamma);
    let big_mx = backaction_factor(params.g_x, mx, eta);
    let big_my = backaction_factor(params.g_y, my, eta);
    (I * mx * g / big_mx, I * my * g / big_my)
}

/// Mode rotation `Φ = Re Ḡ/(ω_x − ω_y)`.
pub fn rotation_angle_phi(params: &SystemParams) -> Result<f64> {
    if params.omega_x == params.omega_y {
        return Err(Error::DegenerateFrequencies);
    }
    Ok(g_bar(params).re / (params.omega_x - params.omega_y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cancellation {
    /// Trap offset in wavelengths.
    pub offset_lambda: f64,
    /// Im Ḡ left at the root, rad/s.
    pub im_residual: f64,
}

/// Trap offset where the direct and cavity-mediated couplings cancel in Re Ḡ.
///
/// `g_xy` of the template is ignored and recomputed at each candidate offset.
pub fn cancellation_offset(template: &SystemParams) -> Result<Cancellation> {
    if template.delta == 0.0 {
        return Err(Error::Domain("cancellation needs a non-zero detuning".into()));
    }
    let (lo, hi) = CANCELLATION_BRACKET;
    let re_g = |x0: f64| match template.with_trap_offset(x0) {
        Ok(p) => g_bar(&p).re,
        Err(_) => f64::NAN,
    };
    let root = bisect(re_g, lo, hi, CANCELLATION_TOL).ok_or(Error::NoCancellation { lo, hi })?;
    let p = template.with_trap_offset(root)?;
    Ok(Cancellation {
        offset_lambda: root,
        im_residual: g_bar(&p).im,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_system, SystemConfig};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const TP: f64 = 2.0 * PI;

    pub(crate) fn fig2(offset: f64) -> SystemParams {
        let cfg = SystemConfig::default();
        build_system(&cfg.env(offset), &cfg.spec()).unwrap()
    }

    fn close(a: Complex64, b: Complex64, rel: f64) -> bool {
        (a - b).norm() <= rel * b.norm()
    }

    #[test]
    fn chi_values() {
        assert_eq!(chi(5.0, 5.0, 0.5), Complex64::new(4.0, 0.0));
        let w = 0.7;
        let peak = chi(1.0, 1.0, w).norm_sqr();
        assert!((chi(1.0 + w / 2.0, 1.0, w).norm_sqr() / peak - 0.5).abs() < 1e-15);
        assert!((chi(1.0 - w / 2.0, 1.0, w).norm_sqr() / peak - 0.5).abs() < 1e-15);
        // 1/(1 - 2i) by hand
        assert!(close(chi(3.0, 1.0, 2.0), Complex64::new(0.2, 0.4), 1e-15));
    }

    #[test]
    fn mu_values() {
        assert_eq!(mech_susceptibility(0.0, 3.0, 0.1).re, 0.0);
        let wj = TP * 125e3;
        let g = TP * 1e3;
        let m = mech_susceptibility(wj, wj, g);
        assert!(close(
            m,
            Complex64::new(3.183_086_129_493_389e-4, -6.366_172_258_986_778e-7),
            1e-12
        ));
        assert!((m.re * g / 2.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn eta_values() {
        let d = -TP * 176e3;
        let k = TP * 400e3;
        let e = optical_susceptibility(TP * 130e3, d, k);
        assert!(close(
            e,
            Complex64::new(5.176_015_329_724_129e-7, -5.382_657_787_887_729e-7),
            1e-12
        ));
        // large detuning limit
        let k = 1.0;
        let d = -50.0 * k;
        let w = d / 100.0;
        let lim = optical_susceptibility_static(d, k);
        let ie = I * optical_susceptibility(w, d, k);
        assert!((ie.re - lim).abs() < 0.05 * lim.abs());
    }

    #[test]
    fn backaction() {
        let eta = Complex64::new(1.0, 2.0);
        assert_eq!(
            backaction_factor(0.0, Complex64::new(3.0, 1.0), eta),
            Complex64::new(1.0, 0.0)
        );
        let p = fig2(0.145);
        let gopt = crate::spectra::gamma_opt(&p, &crate::model::DirectedForce::off()).unwrap();
        for (ax, wj) in [(Axis::X, p.omega_x), (Axis::Y, p.omega_y)] {
            let m15 = axis_backaction(wj + 15.0 * gopt, &p, ax);
            assert!((m15 - 1.0).norm() < 0.05, "{ax:?} {}", (m15 - 1.0).norm());
            let m20 = axis_backaction(wj - 20.0 * gopt, &p, ax);
            assert!((m20 - 1.0).norm() < 0.05);
            for s in [-1.0, 1.0] {
                let m10 = axis_backaction(wj + s * 10.0 * gopt, &p, ax);
                assert!((m10 - 1.0).norm() < 0.1);
            }
        }
        assert!((axis_backaction(p.omega_y, &p, Axis::X) - 1.0).norm() < 0.1);
        assert!((axis_backaction(p.omega_x, &p, Axis::Y) - 1.0).norm() < 0.1);
    }

    #[test]
    fn interference_g() {
        let mut p = fig2(0.145);
        p.g_x = 0.0;
        assert_eq!(coupling_interference_g(1e5, &p), Complex64::new(p.g_xy, 0.0));
        let node = fig2(0.25);
        assert_eq!(node.g_xy, 0.0);
        let w = 8e5;
        let eta = optical_search_eta(w, &node);
        assert_eq!(coupling_interference_g(w, &node), I * eta * node.g_x * node.g_y);

        // far detuned at phi = pi/4 the two paths nearly cancel
        let mut far = fig2(0.125);
        far.delta = -TP * 20e6;
        let far = far.with_trap_offset(0.125).unwrap();
        let g = g_bar(&far);
        let cav = I * optical_susceptibility(omega_bar(&far), far.delta, far.kappa) * far.g_x * far.g_y;
        assert!(g.norm() < 0.02 * cav.norm());
    }

    fn optical_search_eta(w: f64, p: &SystemParams) -> Complex64 {
        optical_susceptibility(w, p.delta, p.kappa)
    }

    #[test]
    fn hybridisation() {
        let mut p = fig2(0.145);
        p.g_x = 0.0;
        p.g_xy = 0.0;
        let (a, b) = hybridisation_functions(1e5, &p);
        assert_eq!((a, b), (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)));

        let p = fig2(0.25);
        let wb = omega_bar(&p);
        let (rxy, ryx) = hybridisation_functions(wb, &p);
        assert!(rxy.re * ryx.re < 0.0);
        assert!((rxy.re + ryx.re).abs() < 0.2 * rxy.re.abs());

        let w = 1.3e6;
        let eta = optical_susceptibility(w, p.delta, p.kappa);
        let mx = mech_susceptibility(w, p.omega_x, p.gamma);
        let g = I * eta * p.g_x * p.g_y + p.g_xy;
        let composed = I * mx * g / (1.0 + p.g_x * p.g_x * mx * eta);
        assert!(close(hybridisation_functions(w, &p).0, composed, 1e-14));
    }

    #[test]
    fn product_of_hybridisations_is_small() {
        for off in [0.145, 0.25] {
            let p = fig2(off);
            let p = if off == 0.145 {
                p.with_trap_offset(cancellation_offset(&p).unwrap().offset_lambda)
                    .unwrap()
            } else {
                p
            };
            let mut worst: f64 = 0.0;
            for i in 0..4000 {
                let w = TP * (100e3 + i as f64 * 15.0);
                let (a, b) = hybridisation_functions(w, &p);
                worst = worst.max((a * b).norm());
            }
            if off == 0.145 {
                assert!(worst < 0.05, "{worst}");
            } else {
                assert!(worst < 0.15, "{worst}");
            }
        }
    }

    #[test]
    fn phi_values() {
        let mut p = fig2(0.25);
        p.g_x = 0.0;
        p.g_xy = 0.0;
        assert_eq!(rotation_angle_phi(&p).unwrap(), 0.0);
        let p = fig2(0.25);
        let a = rotation_angle_phi(&p).unwrap();
        let swapped = SystemParams {
            omega_x: p.omega_y,
            omega_y: p.omega_x,
            ..p
        };
        assert!((rotation_angle_phi(&swapped).unwrap() + a).abs() < 1e-15);
        let off = rotation_angle_phi(&fig2(0.145)).unwrap();
        assert!(a.abs() > 5.0 * off.abs());
        assert!(off.abs() < 0.02);
        let mut deg = p;
        deg.omega_y = deg.omega_x;
        assert!(rotation_angle_phi(&deg).is_err());
    }

    #[test]
    fn cancellation() {
        let p = fig2(0.2);
        let c = cancellation_offset(&p).unwrap();
        assert!((c.offset_lambda - 0.145).abs() < 0.01, "{}", c.offset_lambda);
        let at = p.with_trap_offset(c.offset_lambda).unwrap();
        assert!(rotation_angle_phi(&at).unwrap().abs() < 1e-3);

        let mut far = p;
        far.delta = -100.0 * p.omega_y;
        let c = cancellation_offset(&far).unwrap();
        assert!((c.offset_lambda - 0.125).abs() < 0.002);

        // drift toward the node as the detuning approaches the mechanics
        let mut last = 0.0;
        for dk in [-300e3, -250e3, -200e3, -150e3] {
            let mut q = p;
            q.delta = TP * dk;
            let x = cancellation_offset(&q).unwrap().offset_lambda;
            assert!(x > last);
            last = x;
        }
        assert!(last > 0.125);

        let mut zero = p;
        zero.delta = 0.0;
        assert!(cancellation_offset(&zero).is_err());
    }

    #[test]
    fn complex_response_grid() {
        assert!(ComplexResponse::from_fn(&[1.0, 0.5], |w| chi(w, 1.0, 1.0)).is_err());
        let r = ComplexResponse::from_fn(&[0.5, 1.0], |w| chi(w, 1.0, 1.0)).unwrap();
        assert_eq!(r.values.len(), 2);
    }

    proptest! {
        #[test]
        fn reflection_symmetry(w in -1e7f64..1e7, w0 in 1e3f64..1e7, width in 1e-2f64..1e6, d in -1e7f64..1e7) {
            let m = mech_susceptibility(w, w0, width);
            let mm = mech_susceptibility(-w, w0, width);
            prop_assert!((mm + m.conj()).norm() <= 1e-12 * m.norm());
            let e = optical_susceptibility(w, d, width);
            let em = optical_susceptibility(-w, d, width);
            prop_assert!((em + e.conj()).norm() <= 1e-12 * e.norm());
        }

        #[test]
        fn cancellation_scale_invariant(c in 0.3f64..3.0) {
            let p = fig2(0.2);
            let q = SystemParams { g_x: c * p.g_x, g_y: c * p.g_y, ..p };
            let a = cancellation_offset(&p).unwrap().offset_lambda;
            let b = cancellation_offset(&q).unwrap().offset_lambda;
            prop_assert!((a - b).abs() <= 2.0 * CANCELLATION_TOL);
        }
    }
}
