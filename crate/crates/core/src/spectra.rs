//! Analytic spectra from the quantum Langevin solution.
//!
//! Two-sided spectra follow the symmetrised convention
//! `S_AB(ω) = 2 Σ_k [(n_k+1) h_Ak(ω) h*_Bk(ω) + n_k h*_Ak(−ω) h_Bk(−ω)]`
//! over the noise inputs `k`, with `h` the displacement response to each input.
//! The classical one-sided density per rad/s, the quantity a Welch estimate of a
//! simulated trace converges to, is `(S(ω) + S(−ω))/(4π)` for `ω ≥ 0`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DirectedForce, Misalignment, SystemParams};
use crate::numerics::{bisect, check_grid, golden_max, simpson};
use crate::response::{axis_backaction, axis_mu, cavity_susceptibility, chi, hybridisation_functions, Axis};

/// Default heterodyne imprecision floor in zero-point units.
pub const DEFAULT_S_IMP: f64 = 0.5;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealSpectrum {
    pub freq_grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl RealSpectrum {
    pub fn new(freq_grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_grid(&freq_grid)?;
        if freq_grid.len() != values.len() {
            return Err(Error::Domain("grid and values differ in length".into()));
        }
        Ok(RealSpectrum { freq_grid, values })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: &[f64], f: F) -> Result<Self> {
        check_grid(grid)?;
        Ok(RealSpectrum {
            freq_grid: grid.to_vec(),
            values: grid.iter().map(|&w| f(w)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn same_grid(&self, other: &RealSpectrum) -> Result<()> {
        if self.freq_grid != other.freq_grid {
            return Err(Error::Domain("spectra do not share a frequency grid".into()));
        }
        Ok(())
    }

    /// Linear interpolation, clamped at the ends.
    pub fn interp(&self, w: f64) -> f64 {
        let g = &self.freq_grid;
        if w <= g[0] {
            return self.values[0];
        }
        if w >= g[g.len() - 1] {
            return self.values[g.len() - 1];
        }
        let i = g.partition_point(|&x| x <= w) - 1;
        let t = (w - g[i]) / (g[i + 1] - g[i]);
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }

    /// CSV with an optional `# config_hash:` line and a header row.
    pub fn write_csv<W: Write>(&self, mut out: W, config_hash: Option<&str>) -> std::io::Result<()> {
        let mut s = String::new();
        if let Some(h) = config_hash {
            let _ = writeln!(s, "# config_hash: {h}");
        }
        s.push_str("omega_rad_s,value\n");
        for (w, v) in self.freq_grid.iter().zip(&self.values) {
            let _ = writeln!(s, "{w:e},{v:e}");
        }
        out.write_all(s.as_bytes())
    }

    /// Parse the CSV layout written by [`RealSpectrum::write_csv`].
    pub fn read_csv(text: &str) -> Result<(RealSpectrum, Option<String>)> {
        let mut hash = None;
        let mut grid = Vec::new();
        let mut values = Vec::new();
        let mut header = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(h) = rest.trim().strip_prefix("config_hash:") {
                    hash = Some(h.trim().to_string());
                }
                continue;
            }
            if !header {
                if line != "omega_rad_s,value" {
                    return Err(Error::Format(format!("line {}: unexpected header {line:?}", n + 1)));
                }
                header = true;
                continue;
            }
            let mut it = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|t| t.trim().parse().ok())
                    .ok_or_else(|| Error::Format(format!("line {}: bad number", n + 1)))
            };
            grid.push(parse(it.next())?);
            values.push(parse(it.next())?);
        }
        Ok((RealSpectrum::new(grid, values)?, hash))
    }
}

/// Displacement response of (x, y) to one unit noise input with occupancy `nbar`.
#[derive(Debug, Clone, Copy)]
struct Channel {
    hx: Complex64,
    hy: Complex64,
    nbar: f64,
}

/// Responses to the four inputs: x bath, y bath, directed bath, cavity vacuum.
fn transfer(omega: f64, p: &SystemParams, f: &DirectedForce, hybridised: bool) -> [Channel; 4] {
    let cx = chi(omega, p.omega_x, p.gamma);
    let cy = chi(omega, p.omega_y, p.gamma);
    let cc = cavity_susceptibility(omega, p);
    let mx = axis_mu(omega, p, Axis::X);
    let my = axis_mu(omega, p, Axis::Y);
    let big_mx = axis_backaction(omega, p, Axis::X);
    let big_my = axis_backaction(omega, p, Axis::Y);
    let sg = p.gamma.sqrt();
    let zero = Complex64::new(0.0, 0.0);
    let (sx, sy) = (f.gamma_x_corr.sqrt(), f.gamma_y_corr.sqrt());
    // the directed bath acts with a fixed sign pattern (cosΨ, sinΨ)
    let (sx, sy) = (sx * f.psi.cos().signum(), sy * f.psi.sin().signum());
    let sk = p.kappa.sqrt();
    let mut ch = [
        Channel {
            hx: sg * cx / big_mx,
            hy: zero,
            nbar: p.nbar_x,
        },
        Channel {
            hx: zero,
            hy: sg * cy / big_my,
            nbar: p.nbar_y,
        },
        Channel {
            hx: sx * cx / big_mx,
            hy: sy * cy / big_my,
            nbar: p.nbar_directed(),
        },
        Channel {
            hx: I * sk * p.g_x * mx * cc / big_mx,
            hy: I * sk * p.g_y * my * cc / big_my,
            nbar: 0.0,
        },
    ];
    if hybridised {
        let (rxy, ryx) = hybridisation_functions(omega, p);
        let n = 1.0 - rxy * ryx;
        for c in ch.iter_mut() {
            let (hx, hy) = ((c.hx + rxy * c.hy) / n, (c.hy + ryx * c.hx) / n);
            c.hx = hx;
            c.hy = hy;
        }
    }
    ch
}

/// `(S_xx, S_yy, S_xy)` at one frequency from the full transfer functions.
///
/// With `hybridised = false` the x and y modes only see their own cavity
/// back-action (lab frame); with `true` the cavity-mediated and direct
/// couplings mix them through `R_xy`, `R_yx`.
pub fn exact_spectra_at(omega: f64, params: &SystemParams, force: &DirectedForce, hybridised: bool) -> (f64, f64, f64) {
    let hp = transfer(omega, params, force, hybridised);
    let hm = transfer(-omega, params, force, hybridised);
    let (mut sxx, mut syy) = (0.0, 0.0);
    let mut sxy = Complex64::new(0.0, 0.0);
    for (a, b) in hp.iter().zip(&hm) {
        let n = a.nbar;
        sxx += 2.0 * ((n + 1.0) * a.hx.norm_sqr() + n * b.hx.norm_sqr());
        syy += 2.0 * ((n + 1.0) * a.hy.norm_sqr() + n * b.hy.norm_sqr());
        sxy += 2.0 * ((n + 1.0) * a.hx * a.hy.conj() + n * b.hx.conj() * b.hy);
    }
    (sxx, syy, sxy.re)
}

/// Classical one-sided densities `(S(ω)+S(−ω))/(4π)` of the hybridised modes.
pub fn classical_one_sided_at(omega: f64, params: &SystemParams, force: &DirectedForce) -> (f64, f64, f64) {
    let a = exact_spectra_at(omega, params, force, true);
    let b = exact_spectra_at(-omega, params, force, true);
    let k = 1.0 / (4.0 * PI);
    (k * (a.0 + b.0), k * (a.1 + b.1), k * (a.2 + b.2))
}

pub fn classical_one_sided(grid: &[f64], params: &SystemParams, force: &DirectedForce) -> Result<[RealSpectrum; 3]> {
    check_grid(grid)?;
    let v: Vec<_> = grid.iter().map(|&w| classical_one_sided_at(w, params, force)).collect();
    Ok([
        RealSpectrum::new(grid.to_vec(), v.iter().map(|t| t.0).collect())?,
        RealSpectrum::new(grid.to_vec(), v.iter().map(|t| t.1).collect())?,
        RealSpectrum::new(grid.to_vec(), v.iter().map(|t| t.2).collect())?,
    ])
}

/// `M_xy(ω) = 2 Re[μ_x μ_y* / (M_x M_y*)]`.
pub fn envelope_mxy(omega: f64, params: &SystemParams) -> f64 {
    let z = axis_mu(omega, params, Axis::X) * axis_mu(omega, params, Axis::Y).conj()
        / (axis_backaction(omega, params, Axis::X) * axis_backaction(omega, params, Axis::Y).conj());
    2.0 * z.re
}

/// Envelope of the force-driven cross-response, `2 Re[χ_x χ_y* / (M_x M_y*)]`.
pub fn thermal_envelope_mxy(omega: f64, params: &SystemParams) -> f64 {
    let z = chi(omega, params.omega_x, params.gamma) * chi(omega, params.omega_y, params.gamma).conj()
        / (axis_backaction(omega, params, Axis::X) * axis_backaction(omega, params, Axis::Y).conj());
    2.0 * z.re
}

pub fn shot_noise_xcorr_at(omega: f64, params: &SystemParams) -> f64 {
    params.kappa
        * params.g_x
        * params.g_y
        * cavity_susceptibility(omega, params).norm_sqr()
        * envelope_mxy(omega, params)
}

/// Shot-noise cross-correlation `κ g_x g_y |χ_c|² M_xy`.
pub fn shot_noise_xcorr(grid: &[f64], params: &SystemParams) -> Result<RealSpectrum> {
    RealSpectrum::from_fn(grid, |w| shot_noise_xcorr_at(w, params))
}

pub fn directed_force_xcorr_at(omega: f64, params: &SystemParams, force: &DirectedForce) -> f64 {
    let sc = force.psi.sin() * force.psi.cos();
    if sc == 0.0 || force.beta2 == 0.0 {
        return 0.0;
    }
    let nsum = params.nbar_x + params.nbar_y;
    params.gamma
        * 0.5
        * force.beta2
        * sc
        * ((nsum + 2.0) * thermal_envelope_mxy(omega, params) + nsum * thermal_envelope_mxy(-omega, params))
}

/// Cross-correlation driven by the directed bath.
pub fn directed_force_xcorr(grid: &[f64], params: &SystemParams, force: &DirectedForce) -> Result<RealSpectrum> {
    RealSpectrum::from_fn(grid, |w| directed_force_xcorr_at(w, params, force))
}

pub fn lab_frame_xcorr_at(omega: f64, params: &SystemParams, force: &DirectedForce) -> f64 {
    shot_noise_xcorr_at(omega, params) + directed_force_xcorr_at(omega, params, force)
}

/// `S^L_xy = S_QN + S_fxfy`.
pub fn lab_frame_xcorr(grid: &[f64], params: &SystemParams, force: &DirectedForce) -> Result<RealSpectrum> {
    RealSpectrum::from_fn(grid, |w| lab_frame_xcorr_at(w, params, force))
}

/// Lab-frame displacement PSD of one axis.
///
/// `S_jj = 2/|M_j|² { Γ[(n̄_j+1)|χ_j(ω)|² + n̄_j|χ_j(−ω)|²]
///                  + Γ_j,corr[(n̄_c+1)|χ_j(ω)|² + n̄_c|χ_j(−ω)|²]
///                  + κ g_j² |μ_j|² |χ_c|² }`
pub fn auto_psd_at(omega: f64, params: &SystemParams, force: &DirectedForce, axis: Axis) -> f64 {
    let (wj, gj, nj, gc) = match axis {
        Axis::X => (params.omega_x, params.g_x, params.nbar_x, force.gamma_x_corr),
        Axis::Y => (params.omega_y, params.g_y, params.nbar_y, force.gamma_y_corr),
    };
    let nc = params.nbar_directed();
    let cp = chi(omega, wj, params.gamma).norm_sqr();
    let cm = chi(-omega, wj, params.gamma).norm_sqr();
    let m2 = axis_backaction(omega, params, axis).norm_sqr();
    let thermal = params.gamma * ((nj + 1.0) * cp + nj * cm) + gc * ((nc + 1.0) * cp + nc * cm);
    let optical = params.kappa
        * gj
        * gj
        * axis_mu(omega, params, axis).norm_sqr()
        * cavity_susceptibility(omega, params).norm_sqr();
    2.0 * (thermal + optical) / m2
}

pub fn auto_psd(grid: &[f64], params: &SystemParams, force: &DirectedForce, axis: Axis) -> Result<RealSpectrum> {
    RealSpectrum::from_fn(grid, |w| auto_psd_at(w, params, force, axis))
}

/// Detector-frame cross spectrum `S^L + (Φ+β_x)S_yy − (Φ+β_y)S_xx`,
/// optionally with the second-order `−(Φ+β_x)(Φ+β_y)S^L` term.
pub fn detector_frame_xcorr(
    s_xy_lab: &RealSpectrum,
    s_xx: &RealSpectrum,
    s_yy: &RealSpectrum,
    mis: &Misalignment,
    quadratic: bool,
) -> Result<RealSpectrum> {
    mis.validate()?;
    s_xy_lab.same_grid(s_xx)?;
    s_xy_lab.same_grid(s_yy)?;
    let (ax, ay) = (mis.a_x(), mis.a_y());
    let q = if quadratic { ax * ay } else { 0.0 };
    let values = (0..s_xy_lab.len())
        .map(|i| s_xy_lab.values[i] * (1.0 - q) + ax * s_yy.values[i] - ay * s_xx.values[i])
        .collect();
    RealSpectrum::new(s_xy_lab.freq_grid.clone(), values)
}

/// Quadratic leakage `(Φ+β_x)² S_yy` into the x-channel PSD.
pub fn psd_contamination(s_yy: &RealSpectrum, mis: &Misalignment) -> Result<RealSpectrum> {
    mis.validate()?;
    let a2 = mis.a_x() * mis.a_x();
    RealSpectrum::new(s_yy.freq_grid.clone(), s_yy.values.iter().map(|v| a2 * v).collect())
}

/// Heterodyne spectrum of the cavity output, with a flat imprecision floor.
pub fn heterodyne_spectrum(
    grid: &[f64],
    params: &SystemParams,
    force: &DirectedForce,
    mis: &Misalignment,
    s_imp: f64,
) -> Result<RealSpectrum> {
    mis.validate()?;
    let (gx, gy, phi) = (params.g_x, params.g_y, mis.phi);
    RealSpectrum::from_fn(grid, |w| {
        let sxx = auto_psd_at(w, params, force, Axis::X);
        let syy = auto_psd_at(w, params, force, Axis::Y);
        let sl = lab_frame_xcorr_at(w, params, force);
        cavity_susceptibility(w, params).norm_sqr()
            * ((gy * gy + gx * gy * phi) * syy + (gx * gx - gx * gy * phi) * sxx + gx * gy * sl)
            + s_imp
    })
}

/// `C_xy = 4 g_x g_y / (κ Γ n̄)` with `n̄ = (n̄_x + n̄_y)/2`.
pub fn cross_cooperativity(params: &SystemParams) -> Result<f64> {
    let n = params.nbar_directed();
    if !(params.gamma > 0.0 && n > 0.0) {
        return Err(Error::Domain("cross cooperativity needs gamma > 0 and nbar > 0".into()));
    }
    Ok(4.0 * params.g_x * params.g_y / (params.kappa * params.gamma * n))
}

/// Frequency of the x-mode maximum in the lab-frame PSD.
pub fn x_peak_frequency(params: &SystemParams, force: &DirectedForce) -> f64 {
    let half = 0.5 * (params.omega_x - params.omega_y).abs();
    let f = |w: f64| auto_psd_at(w, params, force, Axis::X);
    golden_max(f, params.omega_x - half, params.omega_x + half, 1e-12 * params.omega_x)
}

/// Optical damping rate, taken as the full width at half maximum of the x peak.
pub fn gamma_opt(params: &SystemParams, force: &DirectedForce) -> Result<f64> {
    params.validate()?;
    let half = 0.5 * (params.omega_x - params.omega_y).abs();
    let f = |w: f64| auto_psd_at(w, params, force, Axis::X);
    let wp = x_peak_frequency(params, force);
    let target = 0.5 * f(wp);
    let g = |w: f64| f(w) - target;
    let tol = 1e-12 * params.omega_x;
    let lo = bisect(g, params.omega_x - half, wp, tol);
    let hi = bisect(g, wp, params.omega_x + half, tol);
    match (lo, hi) {
        (Some(a), Some(b)) => Ok(b - a),
        _ => Err(Error::Domain(
            "x peak is not resolved within half the mode splitting".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakRatio {
    /// `β² sinΨ cosΨ Γ_opt/(ω_x − ω_y)`.
    pub estimate: f64,
    /// `S^L_xy(ω_x)/S_xx(ω_x)` from the analytic spectra.
    pub measured: f64,
    pub gamma_opt: f64,
}

pub fn peak_ratio(params: &SystemParams, force: &DirectedForce) -> Result<PeakRatio> {
    let gopt = gamma_opt(params, force)?;
    let sc = force.psi.sin() * force.psi.cos();
    let estimate = force.beta2 * sc * gopt / (params.omega_x - params.omega_y);
    let w = params.omega_x;
    let measured = if force.beta2 == 0.0 {
        0.0
    } else {
        directed_force_xcorr_at(w, params, force) / auto_psd_at(w, params, force, Axis::X)
    };
    Ok(PeakRatio {
        estimate,
        measured,
        gamma_opt: gopt,
    })
}

/// `|Φ(S_yy − S_xx)|/|S_fxfy|` at `ω_x` and at `ω_y`; values above one mean the
/// rotation artifact masks the directed-force signal at that peak.
pub fn masking_ratio(params: &SystemParams, force: &DirectedForce, phi: f64) -> Result<[f64; 2]> {
    params.validate()?;
    let at = |w: f64| {
        let rot = phi * (auto_psd_at(w, params, force, Axis::Y) - auto_psd_at(w, params, force, Axis::X));
        rot.abs() / directed_force_xcorr_at(w, params, force).abs()
    };
    Ok([at(params.omega_x), at(params.omega_y)])
}

/// `∫₀^∞` of a function with narrow features at `centers` of width scale `widths`.
pub fn integrate_peaked<F: Fn(f64) -> f64>(f: F, centers: &[(f64, f64)], upper: f64) -> f64 {
    let mut pts = vec![0.0, upper];
    for &(c, w) in centers {
        let mut d = 0.25 * w;
        while d < upper {
            for x in [c - d, c + d] {
                if x > 0.0 && x < upper {
                    pts.push(x);
                }
            }
            d *= 1.5;
        }
        if c > 0.0 && c < upper {
            pts.push(c);
        }
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    pts.windows(2).map(|p| simpson(&f, p[0], p[1], 16)).sum()
}

/// Stationary `⟨x²⟩` and `⟨y²⟩` in zero-point units (`2n̄_eff + 1`).
pub fn mode_variances(params: &SystemParams, force: &DirectedForce) -> Result<(f64, f64)> {
    let w = gamma_opt(params, force).unwrap_or(params.gamma).max(params.gamma);
    let centers = [
        (params.omega_x, w),
        (params.omega_y, w),
        (params.delta.abs(), params.kappa),
    ];
    let upper = 50.0
        * params
            .omega_x
            .max(params.omega_y)
            .max(params.delta.abs() + params.kappa);
    let vx = integrate_peaked(|v| classical_one_sided_at(v, params, force).0, &centers, upper);
    let vy = integrate_peaked(|v| classical_one_sided_at(v, params, force).1, &centers, upper);
    Ok((vx, vy))
}

/// Cooled occupancy of the hotter mode, `(⟨q²⟩ − 1)/2`.
pub fn effective_occupancy(params: &SystemParams, force: &DirectedForce) -> Result<f64> {
    let (vx, vy) = mode_variances(params, force)?;
    Ok(0.5 * (vx.min(vy) - 1.0))
}

/// All analytic spectra for one configuration on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectraBundle {
    pub s_xx: RealSpectrum,
    pub s_yy: RealSpectrum,
    pub s_xy_lab: RealSpectrum,
    pub s_xy_detector: RealSpectrum,
    pub phi_used: f64,
    pub params: SystemParams,
    pub force: DirectedForce,
    pub misalignment: Misalignment,
}

impl SpectraBundle {
    pub fn compute(grid: &[f64], params: &SystemParams, force: &DirectedForce, mis: &Misalignment) -> Result<Self> {
        params.validate()?;
        let s_xx = auto_psd(grid, params, force, Axis::X)?;
        let s_yy = auto_psd(grid, params, force, Axis::Y)?;
        let s_xy_lab = lab_frame_xcorr(grid, params, force)?;
        let s_xy_detector = detector_frame_xcorr(&s_xy_lab, &s_xx, &s_yy, mis, false)?;
        Ok(SpectraBundle {
            s_xx,
            s_yy,
            s_xy_lab,
            s_xy_detector,
            phi_used: mis.phi,
            params: *params,
            force: *force,
            misalignment: *mis,
        })
    }
}
