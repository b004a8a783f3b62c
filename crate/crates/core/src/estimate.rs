//! Welch spectral estimation and the inversions for rotation, misalignment
//! and force orientation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Misalignment;
use crate::model::{DirectedForce, SystemParams};
use crate::numerics::simpson;
use crate::simulate::{integrate_with, SimConfig, Trace, MIN_SPECTRAL_LEN};
use crate::spectra::{classical_one_sided_at, gamma_opt, RealSpectrum};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    /// Coefficients `(a0, a1)` of `w_n = a0 − a1 cos(2πn/N)`.
    fn coefficients(self) -> (f64, f64) {
        match self {
            Window::Hann => (0.5, 0.5),
            Window::Hamming => (0.54, 0.46),
            Window::Rectangular => (1.0, 0.0),
        }
    }

    /// Periodic window of length `n`.
    pub fn values(self, n: usize) -> Vec<f64> {
        let (a0, a1) = self.coefficients();
        (0..n)
            .map(|k| a0 - a1 * (2.0 * PI * k as f64 / n as f64).cos())
            .collect()
    }

    /// `|Σ_n w_n e^{iθn}|²`.
    pub fn kernel(self, theta: f64, n: usize) -> f64 {
        let (a0, a1) = self.coefficients();
        let nf = n as f64;
        let d = |t: f64| {
            let s = (0.5 * t).sin();
            let mag = if s.abs() < 1e-13 { nf } else { (0.5 * nf * t).sin() / s };
            Complex64::from_polar(mag, 0.5 * t * (nf - 1.0))
        };
        let step = 2.0 * PI / nf;
        let w = a0 * d(theta) - 0.5 * a1 * (d(theta + step) + d(theta - step));
        w.norm_sqr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchConfig {
    pub segment_length: usize,
    #[serde(default = "half")]
    pub overlap_fraction: f64,
    #[serde(default)]
    pub window: Window,
    #[serde(default)]
    pub detrend: bool,
}

fn half() -> f64 {
    0.5
}

impl WelchConfig {
    pub fn new(segment_length: usize) -> Self {
        WelchConfig {
            segment_length,
            overlap_fraction: 0.5,
            window: Window::Hann,
            detrend: false,
        }
    }

    /// Hann, 50% overlap, shortest power-of-two segment with bin width below `Γ_opt/5`.
    pub fn for_params(params: &SystemParams, force: &DirectedForce, dt: f64) -> Result<Self> {
        let target = gamma_opt(params, force)? / 5.0;
        let mut n = 1usize << 10;
        while 2.0 * PI / (n as f64 * dt) >= target {
            n <<= 1;
        }
        Ok(WelchConfig::new(n))
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_length < 2 || !self.segment_length.is_power_of_two() {
            return Err(Error::Config(format!(
                "segment_length {} is not a power of two",
                self.segment_length
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config("overlap_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn hop(&self) -> usize {
        ((self.segment_length as f64 * (1.0 - self.overlap_fraction)).round() as usize).max(1)
    }
}

/// One-sided spectra per rad/s on the bins `k·2π/(N dt)`, `k = 0..=N/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchSpectra {
    pub s_xx: RealSpectrum,
    pub s_yy: RealSpectrum,
    pub s_xy: RealSpectrum,
    pub n_segments: usize,
    pub dt: f64,
    pub config: WelchConfig,
}

impl WelchSpectra {
    pub fn bin_width(&self) -> f64 {
        2.0 * PI / (self.config.segment_length as f64 * self.dt)
    }

    /// Segment count corrected for the correlation of overlapping segments.
    pub fn effective_averages(&self) -> f64 {
        let n = self.config.segment_length;
        let hop = self.config.hop();
        let w = self.config.window.values(n);
        let norm: f64 = w.iter().map(|v| v * v).sum();
        let k = self.n_segments as f64;
        let mut denom = 1.0;
        let mut j = 1;
        while j * hop < n && (j as f64) < k {
            let rho: f64 = (0..n - j * hop).map(|i| w[i] * w[i + j * hop]).sum::<f64>() / norm;
            denom += 2.0 * (1.0 - j as f64 / k) * rho * rho;
            j += 1;
        }
        k / denom
    }

    /// Standard error of the cross-spectrum estimate in each bin.
    pub fn s_xy_std_error(&self) -> Vec<f64> {
        let k = self.effective_averages();
        (0..self.s_xy.len())
            .map(|i| {
                let (a, b, c) = (self.s_xx.values[i], self.s_yy.values[i], self.s_xy.values[i]);
                ((a * b + c * c) / (2.0 * k)).sqrt()
            })
            .collect()
    }

    /// Segment-weighted average of estimates sharing one grid.
    pub fn combine(parts: &[WelchSpectra]) -> Result<WelchSpectra> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("no spectra to combine".into()))?;
        let total: usize = parts.iter().map(|p| p.n_segments).sum();
        let mut out = first.clone();
        for v in [&mut out.s_xx.values, &mut out.s_yy.values, &mut out.s_xy.values] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        for p in parts {
            if p.s_xx.freq_grid != first.s_xx.freq_grid {
                return Err(Error::Domain("cannot combine spectra on different grids".into()));
            }
            let wgt = p.n_segments as f64 / total as f64;
            for (dst, src) in [
                (&mut out.s_xx.values, &p.s_xx.values),
                (&mut out.s_yy.values, &p.s_yy.values),
                (&mut out.s_xy.values, &p.s_xy.values),
            ] {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += wgt * s);
            }
        }
        out.n_segments = total;
        Ok(out)
    }
}

/// Streaming Welch estimator for a pair of channels.
pub struct WelchAccumulator {
    cfg: WelchConfig,
    dt: f64,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    buf_x: Vec<f64>,
    buf_y: Vec<f64>,
    pxx: Vec<f64>,
    pyy: Vec<f64>,
    pxy: Vec<f64>,
    n_segments: usize,
    scratch_x: Vec<Complex64>,
    scratch_y: Vec<Complex64>,
}

impl WelchAccumulator {
    pub fn new(cfg: WelchConfig, dt: f64) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.segment_length;
        let fft = FftPlanner::new().plan_fft_forward(n);
        let m = n / 2 + 1;
        Ok(WelchAccumulator {
            cfg,
            dt,
            window: cfg.window.values(n),
            fft,
            buf_x: Vec::with_capacity(n),
            buf_y: Vec::with_capacity(n),
            pxx: vec![0.0; m],
            pyy: vec![0.0; m],
            pxy: vec![0.0; m],
            n_segments: 0,
            scratch_x: vec![Complex64::new(0.0, 0.0); n],
            scratch_y: vec![Complex64::new(0.0, 0.0); n],
        })
    }

    pub fn push(&mut self, x: f64, y: f64) {
        self.buf_x.push(x);
        self.buf_y.push(y);
        if self.buf_x.len() == self.cfg.segment_length {
            self.process();
            let hop = self.cfg.hop().min(self.cfg.segment_length);
            self.buf_x.drain(..hop);
            self.buf_y.drain(..hop);
        }
    }

    fn process(&mut self) {
        let n = self.cfg.segment_length;
        let (mx, my) = if self.cfg.detrend {
            (
                self.buf_x.iter().sum::<f64>() / n as f64,
                self.buf_y.iter().sum::<f64>() / n as f64,
            )
        } else {
            (0.0, 0.0)
        };
        for i in 0..n {
            self.scratch_x[i] = Complex64::new((self.buf_x[i] - mx) * self.window[i], 0.0);
            self.scratch_y[i] = Complex64::new((self.buf_y[i] - my) * self.window[i], 0.0);
        }
        self.fft.process(&mut self.scratch_x);
        self.fft.process(&mut self.scratch_y);
        for k in 0..self.pxx.len() {
            let (a, b) = (self.scratch_x[k], self.scratch_y[k]);
            self.pxx[k] += a.norm_sqr();
            self.pyy[k] += b.norm_sqr();
            self.pxy[k] += (a.conj() * b).re;
        }
        self.n_segments += 1;
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn finish(&self) -> Result<WelchSpectra> {
        if self.n_segments == 0 {
            return Err(Error::Config("trace shorter than one Welch segment".into()));
        }
        let n = self.cfg.segment_length;
        let m = n / 2 + 1;
        let norm: f64 = self.window.iter().map(|w| w * w).sum();
        let base = self.dt / (2.0 * PI * norm * self.n_segments as f64);
        let scale = |k: usize| if k == 0 || k == n / 2 { base } else { 2.0 * base };
        let grid: Vec<f64> = (0..m).map(|k| 2.0 * PI * k as f64 / (n as f64 * self.dt)).collect();
        let mk = |p: &[f64]| RealSpectrum::new(grid.clone(), (0..m).map(|k| scale(k) * p[k]).collect());
        Ok(WelchSpectra {
            s_xx: mk(&self.pxx)?,
            s_yy: mk(&self.pyy)?,
            s_xy: mk(&self.pxy)?,
            n_segments: self.n_segments,
            dt: self.dt,
            config: self.cfg,
        })
    }
}

/// Averaged periodogram estimate of `S_xx`, `S_yy` and `Re S_xy`.
pub fn welch_spectra(trace: &Trace, cfg: &WelchConfig) -> Result<WelchSpectra> {
    cfg.validate()?;
    if trace.len() < MIN_SPECTRAL_LEN {
        return Err(Error::Config(format!(
            "trace has {} samples, spectral estimation needs at least {MIN_SPECTRAL_LEN}",
            trace.len()
        )));
    }
    if cfg.segment_length > trace.len() {
        return Err(Error::Config(format!(
            "segment length {} exceeds trace length {}",
            cfg.segment_length,
            trace.len()
        )));
    }
    let mut acc = WelchAccumulator::new(*cfg, trace.dt)?;
    for (&x, &y) in trace.x.iter().zip(&trace.y) {
        acc.push(x, y);
    }
    acc.finish()
}

/// Welch estimate averaged over an ensemble of simulated runs, streamed
/// without storing traces. Seeds are `cfg.seed .. cfg.seed + seeds`; segments
/// never straddle two runs. With `mis` the detector alignment errors are applied.
pub fn simulated_welch(
    params: &SystemParams,
    force: &DirectedForce,
    cfg: &SimConfig,
    seeds: u64,
    mis: Option<&Misalignment>,
    welch: &WelchConfig,
) -> Result<WelchSpectra> {
    welch.validate()?;
    if seeds == 0 {
        return Err(Error::Config("ensemble needs at least one seed".into()));
    }
    let n = cfg.n_steps() as usize;
    if n < MIN_SPECTRAL_LEN.max(welch.segment_length) {
        return Err(Error::Config(format!(
            "{n} samples per run is below the spectral minimum of {}",
            MIN_SPECTRAL_LEN.max(welch.segment_length)
        )));
    }
    let (bx, by) = match mis {
        Some(m) => {
            m.validate()?;
            (m.beta_err_x, m.beta_err_y)
        }
        None => (0.0, 0.0),
    };
    let parts: Vec<WelchSpectra> = (0..seeds)
        .into_par_iter()
        .map(|i| {
            let run = SimConfig {
                seed: cfg.seed.wrapping_add(i),
                ..*cfg
            };
            let mut acc = WelchAccumulator::new(*welch, cfg.dt)?;
            integrate_with(params, force, &run, None, |s| {
                acc.push(s[0] + bx * s[2], s[2] - by * s[0]);
            })?;
            acc.finish()
        })
        .collect::<Result<_>>()?;
    WelchSpectra::combine(&parts)
}

/// Expected Welch output for a one-sided density `s`, i.e. `s` smeared by the
/// window's spectral kernel, at the angular frequencies `bins`.
pub fn expected_welch<F: Fn(f64) -> f64>(s: F, bins: &[f64], dt: f64, cfg: &WelchConfig) -> Vec<f64> {
    let n = cfg.segment_length;
    let dw = 2.0 * PI / (n as f64 * dt);
    let half_width = 32.0 * dw;
    let intervals = 64 * 16;
    bins.iter()
        .map(|&wk| {
            let lo = wk - half_width;
            let hi = wk + half_width;
            let k = |w: f64| cfg.window.kernel((w - wk) * dt, n);
            let num = simpson(|w| s(w.abs()) * k(w), lo, hi, intervals);
            let den = simpson(k, lo, hi, intervals);
            num / den
        })
        .collect()
}

/// `‖measured − reference‖/‖reference‖` over paired samples.
pub fn relative_rms(measured: &[f64], reference: &[f64]) -> Result<f64> {
    if measured.len() != reference.len() || measured.is_empty() {
        return Err(Error::Domain("relative RMS needs equal, non-empty inputs".into()));
    }
    let num: f64 = measured.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    if den == 0.0 {
        return Err(Error::Domain("reference has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitResult {
    pub estimates: BTreeMap<String, f64>,
    pub std_errors: BTreeMap<String, f64>,
    pub residual_rms: f64,
    pub n_points: usize,
    pub flags: Vec<String>,
}

impl FitResult {
    pub fn get(&self, name: &str) -> f64 {
        self.estimates.get(name).copied().unwrap_or(f64::NAN)
    }
}

/// Fit band `[min(ω_x,ω_y) − 5Γ_opt, max(ω_x,ω_y) + 5Γ_opt]`.
pub fn fit_band(params: &SystemParams, force: &DirectedForce) -> Result<(f64, f64)> {
    let g = gamma_opt(params, force)?;
    Ok((
        params.omega_x.min(params.omega_y) - 5.0 * g,
        params.omega_x.max(params.omega_y) + 5.0 * g,
    ))
}

fn band_indices(grid: &[f64], band: Option<(f64, f64)>) -> Vec<usize> {
    (0..grid.len())
        .filter(|&i| match band {
            Some((lo, hi)) => grid[i] >= lo && grid[i] <= hi,
            None => true,
        })
        .collect()
}

fn check_shared(a: &RealSpectrum, b: &RealSpectrum, c: &RealSpectrum) -> Result<()> {
    if a.freq_grid != b.freq_grid || a.freq_grid != c.freq_grid {
        return Err(Error::Domain("spectra do not share a frequency grid".into()));
    }
    Ok(())
}

/// Least-squares `Φ̂` in `S_xy ≈ Φ (S_yy − S_xx)`.
pub fn fit_rotation(
    s_xy: &RealSpectrum,
    s_xx: &RealSpectrum,
    s_yy: &RealSpectrum,
    band: Option<(f64, f64)>,
) -> Result<FitResult> {
    check_shared(s_xy, s_xx, s_yy)?;
    let idx = band_indices(&s_xy.freq_grid, band);
    if idx.len() < 2 {
        return Err(Error::IllConditioned("fewer than two points in the fit band".into()));
    }
    let r: Vec<f64> = idx.iter().map(|&i| s_yy.values[i] - s_xx.values[i]).collect();
    let d: Vec<f64> = idx.iter().map(|&i| s_xy.values[i]).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let scale: f64 = idx
        .iter()
        .map(|&i| s_yy.values[i].powi(2) + s_xx.values[i].powi(2))
        .sum();
    if !(rr > 1e-12 * scale) {
        return Err(Error::IllConditioned("S_yy − S_xx vanishes across the band".into()));
    }
    let phi = r.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / rr;
    let res: Vec<f64> = r.iter().zip(&d).map(|(a, b)| b - phi * a).collect();
    let ss: f64 = res.iter().map(|v| v * v).sum();
    let n = idx.len();
    let sigma2 = ss / (n - 1) as f64;
    let mut out = FitResult {
        residual_rms: (ss / n as f64).sqrt(),
        n_points: n,
        ..Default::default()
    };
    out.estimates.insert("phi".into(), phi);
    out.std_errors.insert("phi".into(), (sigma2 / rr).sqrt());
    Ok(out)
}

/// Largest tolerated cosine similarity between the `S_yy` and `S_xx` regressors.
pub const MAX_REGRESSOR_OVERLAP: f64 = 0.95;

/// Two-parameter least squares `S_xy ≈ a_x S_yy − a_y S_xx`, with
/// heteroskedasticity-robust standard errors.
pub fn fit_misalignment(
    s_xy: &RealSpectrum,
    s_xx: &RealSpectrum,
    s_yy: &RealSpectrum,
    band: Option<(f64, f64)>,
) -> Result<FitResult> {
    check_shared(s_xy, s_xx, s_yy)?;
    let idx = band_indices(&s_xy.freq_grid, band);
    if idx.len() < 3 {
        return Err(Error::IllConditioned("fewer than three points in the fit band".into()));
    }
    let a: Vec<f64> = idx.iter().map(|&i| s_yy.values[i]).collect();
    let b: Vec<f64> = idx.iter().map(|&i| -s_xx.values[i]).collect();
    let d: Vec<f64> = idx.iter().map(|&i| s_xy.values[i]).collect();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let (aa, bb, ab) = (dot(&a, &a), dot(&b, &b), dot(&a, &b));
    if !(aa > 0.0 && bb > 0.0) || (ab / (aa * bb).sqrt()).abs() > MAX_REGRESSOR_OVERLAP {
        return Err(Error::IllConditioned(
            "x and y peaks are not spectrally resolved".into(),
        ));
    }
    let (ad, bd) = (dot(&a, &d), dot(&b, &d));
    let det = aa * bb - ab * ab;
    let inv = [[bb / det, -ab / det], [-ab / det, aa / det]];
    let ax = inv[0][0] * ad + inv[0][1] * bd;
    let ay = inv[1][0] * ad + inv[1][1] * bd;
    let res: Vec<f64> = (0..d.len()).map(|i| d[i] - ax * a[i] - ay * b[i]).collect();
    // HC0 sandwich
    let mut meat = [[0.0; 2]; 2];
    for i in 0..d.len() {
        let e2 = res[i] * res[i];
        let x = [a[i], b[i]];
        for r in 0..2 {
            for c in 0..2 {
                meat[r][c] += e2 * x[r] * x[c];
            }
        }
    }
    let mut cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let mut s = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    s += inv[r][k] * meat[k][l] * inv[l][c];
                }
            }
            cov[r][c] = s;
        }
    }
    let n = d.len();
    let ss: f64 = res.iter().map(|v| v * v).sum();
    let mut out = FitResult {
        residual_rms: (ss / n as f64).sqrt(),
        n_points: n,
        ..Default::default()
    };
    out.estimates.insert("a_x".into(), ax);
    out.estimates.insert("a_y".into(), ay);
    out.std_errors.insert("a_x".into(), cov[0][0].sqrt());
    out.std_errors.insert("a_y".into(), cov[1][1].sqrt());
    Ok(out)
}

impl WelchSpectra {
    /// Correlation between estimates `m` bins apart, `|Σ w_n² e^{-2πimn/N}|²/(Σ w_n²)²`.
    pub fn bin_correlation(&self, m: usize) -> f64 {
        let n = self.config.segment_length;
        let w = self.config.window.values(n);
        let norm: f64 = w.iter().map(|v| v * v).sum();
        let c: Complex64 = w
            .iter()
            .enumerate()
            .map(|(k, v)| v * v * Complex64::from_polar(1.0, -2.0 * PI * (m * k) as f64 / n as f64))
            .sum();
        c.norm_sqr() / (norm * norm)
    }

    /// Standard errors of a least-squares fit of `S_xy` on the regressor columns
    /// `x`, propagated from the estimator's own per-bin variance and inter-bin
    /// correlation instead of from residuals.
    fn regression_std_errors(&self, idx: &[usize], x: &[Vec<f64>]) -> Result<Vec<f64>> {
        let p = x.len();
        let n = idx.len();
        let se = self.s_xy_std_error();
        let sigma: Vec<f64> = idx.iter().map(|&i| se[i]).collect();
        let rho: Vec<f64> = (0..4).map(|m| self.bin_correlation(m)).collect();
        let xm = DMatrix::from_fn(n, p, |i, j| x[j][i]);
        let inv = (xm.transpose() * &xm)
            .try_inverse()
            .ok_or_else(|| Error::IllConditioned("singular normal equations".into()))?;
        let mut meat = DMatrix::zeros(p, p);
        for i in 0..n {
            for j in i.saturating_sub(3)..(i + 4).min(n) {
                let c = rho[i.abs_diff(j)] * sigma[i] * sigma[j];
                for a in 0..p {
                    for b in 0..p {
                        meat[(a, b)] += c * xm[(i, a)] * xm[(j, b)];
                    }
                }
            }
        }
        let cov = &inv * meat * &inv;
        Ok((0..p).map(|k| cov[(k, k)].sqrt()).collect())
    }

    /// [`fit_rotation`] with standard errors from the Welch estimator variance.
    pub fn fit_rotation(&self, band: Option<(f64, f64)>) -> Result<FitResult> {
        let mut r = fit_rotation(&self.s_xy, &self.s_xx, &self.s_yy, band)?;
        let idx = band_indices(&self.s_xy.freq_grid, band);
        let reg: Vec<f64> = idx.iter().map(|&i| self.s_yy.values[i] - self.s_xx.values[i]).collect();
        let se = self.regression_std_errors(&idx, &[reg])?;
        r.std_errors.insert("phi".into(), se[0]);
        Ok(r)
    }

    /// [`fit_misalignment`] with standard errors from the Welch estimator variance.
    pub fn fit_misalignment(&self, band: Option<(f64, f64)>) -> Result<FitResult> {
        let mut r = fit_misalignment(&self.s_xy, &self.s_xx, &self.s_yy, band)?;
        let idx = band_indices(&self.s_xy.freq_grid, band);
        let a: Vec<f64> = idx.iter().map(|&i| self.s_yy.values[i]).collect();
        let b: Vec<f64> = idx.iter().map(|&i| -self.s_xx.values[i]).collect();
        let se = self.regression_std_errors(&idx, &[a, b])?;
        r.std_errors.insert("a_x".into(), se[0]);
        r.std_errors.insert("a_y".into(), se[1]);
        Ok(r)
    }
}

/// How model spectra are brought to the measurement's resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smearing {
    pub dt: f64,
    pub welch: WelchConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationOptions {
    pub band: Option<(f64, f64)>,
    pub smearing: Option<Smearing>,
    /// Grid step in Ψ, rad.
    pub psi_step: f64,
}

impl Default for OrientationOptions {
    fn default() -> Self {
        OrientationOptions {
            band: None,
            smearing: None,
            psi_step: 0.25f64.to_radians(),
        }
    }
}

pub const FLAG_UNRESOLVED: &str = "orientation_unresolved";
pub const FLAG_DEGENERATE: &str = "psi_degenerate";
const BETA2_FLOOR: f64 = 1e-6;

/// Model spectra as `S0 + β²(cos²Ψ P + sin²Ψ Q + sinΨcosΨ C)` on the fit points.
struct OrientationBasis {
    s0: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    c: Vec<f64>,
    data: Vec<f64>,
    weight: Vec<f64>,
}

impl OrientationBasis {
    fn direction(&self, psi: f64) -> Vec<f64> {
        let (s, c) = psi.sin_cos();
        (0..self.s0.len())
            .map(|i| c * c * self.p[i] + s * s * self.q[i] + s * c * self.c[i])
            .collect()
    }

    /// Profiled `(J, β², Σ w b²)` at fixed Ψ.
    fn profile(&self, psi: f64) -> (f64, f64, f64) {
        let b = self.direction(psi);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..b.len() {
            let r = self.data[i] - self.s0[i];
            num += self.weight[i] * r * b[i];
            den += self.weight[i] * b[i] * b[i];
        }
        let beta2 = if den > 0.0 {
            (num / den).clamp(BETA2_FLOOR, 1.0)
        } else {
            BETA2_FLOOR
        };
        let j = (0..b.len())
            .map(|i| {
                let e = self.data[i] - self.s0[i] - beta2 * b[i];
                self.weight[i] * e * e
            })
            .sum();
        (j, beta2, den)
    }
}

/// Recovers the force orientation `Ψ` (mod π) and strength `β²` from one-sided
/// spectra by profiling `β²` in closed form over a grid in `Ψ`.
pub fn fit_orientation(
    s_xy: &RealSpectrum,
    s_xx: &RealSpectrum,
    s_yy: &RealSpectrum,
    params: &SystemParams,
    opts: &OrientationOptions,
) -> Result<FitResult> {
    check_shared(s_xy, s_xx, s_yy)?;
    params.validate()?;
    let idx = band_indices(&s_xy.freq_grid, opts.band);
    if idx.len() < 3 {
        return Err(Error::IllConditioned("fewer than three points in the fit band".into()));
    }
    let bins: Vec<f64> = idx.iter().map(|&i| s_xy.freq_grid[i]).collect();
    let model = |force: DirectedForce| -> [Vec<f64>; 3] {
        let eval = |k: usize| -> Vec<f64> {
            let f = |w: f64| {
                let t = classical_one_sided_at(w, params, &force);
                [t.0, t.1, t.2][k]
            };
            match opts.smearing {
                Some(sm) => expected_welch(f, &bins, sm.dt, &sm.welch),
                None => bins.iter().map(|&w| f(w)).collect(),
            }
        };
        [eval(0), eval(1), eval(2)]
    };
    let g = params.gamma;
    let s0 = model(DirectedForce::off());
    let px = model(DirectedForce::new(g, 1.0, 0.0)?);
    let qy = model(DirectedForce::new(g, 1.0, PI / 2.0)?);
    let dg = model(DirectedForce::new(g, 1.0, PI / 4.0)?);

    let m = bins.len();
    let mut basis = OrientationBasis {
        s0: Vec::with_capacity(3 * m),
        p: Vec::with_capacity(3 * m),
        q: Vec::with_capacity(3 * m),
        c: Vec::with_capacity(3 * m),
        data: Vec::with_capacity(3 * m),
        weight: Vec::with_capacity(3 * m),
    };
    let meas = [s_xx, s_yy, s_xy];
    for k in 0..3 {
        for (j, &i) in idx.iter().enumerate() {
            let base = s0[k][j];
            let p = px[k][j] - base;
            let q = qy[k][j] - base;
            basis.s0.push(base);
            basis.p.push(p);
            basis.q.push(q);
            basis.c.push(2.0 * (dg[k][j] - base) - p - q);
            basis.data.push(meas[k].values[i]);
            let w = match k {
                0 => 1.0 / (s0[0][j] * s0[0][j]),
                1 => 1.0 / (s0[1][j] * s0[1][j]),
                _ => 2.0 / (s0[0][j] * s0[1][j]),
            };
            basis.weight.push(w);
        }
    }

    let n_grid = (PI / opts.psi_step).round().max(8.0) as usize;
    let h = PI / n_grid as f64;
    let js: Vec<f64> = (0..n_grid).map(|i| basis.profile(i as f64 * h).0).collect();
    let (imin, &jmin) = js
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let jmax = js.iter().cloned().fold(f64::MIN, f64::max);
    let jm = js[(imin + n_grid - 1) % n_grid];
    let jp = js[(imin + 1) % n_grid];
    let curv = jm - 2.0 * jmin + jp;
    let offset = if curv > 0.0 { 0.5 * h * (jm - jp) / curv } else { 0.0 };
    let psi = (imin as f64 * h + offset).rem_euclid(PI);
    let (j_best, beta2, den) = basis.profile(psi);

    let n_res = basis.data.len();
    let sigma2 = j_best.max(0.0) / (n_res - 2) as f64;
    let mut out = FitResult {
        residual_rms: (j_best.max(0.0) / n_res as f64).sqrt(),
        n_points: m,
        ..Default::default()
    };
    out.estimates.insert("psi".into(), psi);
    out.estimates.insert("beta2".into(), beta2);
    let d2 = curv / (h * h);
    if d2 > 0.0 {
        out.std_errors.insert("psi".into(), (2.0 * sigma2 / d2).sqrt());
    }
    if den > 0.0 {
        out.std_errors.insert("beta2".into(), (sigma2 / den).sqrt());
    }
    let contrast = |j: f64| j - j_best <= 4.0 * sigma2;
    if jmax - jmin <= 4.0 * sigma2 || beta2 <= BETA2_FLOOR {
        out.flags.push(FLAG_UNRESOLVED.into());
    }
    let mirror = (PI / 2.0 - psi).rem_euclid(PI);
    let sep = (mirror - psi).abs().min(PI - (mirror - psi).abs());
    if sep > 2.0 * h && contrast(basis.profile(mirror).0) {
        out.flags.push(FLAG_DEGENERATE.into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_system, SystemConfig};
    use crate::numerics::linspace;
    use crate::response::cancellation_offset;
    use crate::simulate::Frame;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn white_trace(n: usize, seed: u64, same: bool) -> Trace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = if same {
            x.clone()
        } else {
            (0..n).map(|_| rng.sample(StandardNormal)).collect()
        };
        Trace {
            dt: 1e-6,
            seed,
            params_hash: 0,
            frame: Frame::Lab,
            x,
            y,
            cavity: None,
        }
    }

    fn fig2_cancel() -> SystemParams {
        let cfg = SystemConfig::default();
        let p = build_system(&cfg.env(0.2), &cfg.spec()).unwrap();
        p.with_trap_offset(cancellation_offset(&p).unwrap().offset_lambda)
            .unwrap()
    }

    #[test]
    fn white_noise_parseval_and_independence() {
        let t = white_trace(1 << 20, 1, false);
        let w = welch_spectra(&t, &WelchConfig::new(1024)).unwrap();
        let dw = w.bin_width();
        let area: f64 = w.s_xx.values.iter().sum::<f64>() * dw;
        let var = t.x.iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((area / var - 1.0).abs() < 0.01, "{area} {var}");
        let se = w.s_xy_std_error();
        let inside = (1..w.s_xy.len() - 1)
            .filter(|&i| w.s_xy.values[i].abs() < 3.0 * se[i])
            .count();
        assert!(inside as f64 > 0.99 * (w.s_xy.len() - 2) as f64);
    }

    #[test]
    fn identical_channels() {
        let t = white_trace(1 << 15, 2, true);
        let w = welch_spectra(&t, &WelchConfig::new(2048)).unwrap();
        assert_eq!(w.s_xy.values, w.s_xx.values);
    }

    #[test]
    fn antiphase_sinusoid() {
        let n = 1 << 15;
        let dt = 1e-6;
        let seg = 4096;
        let k0 = 300.0;
        let w0 = 2.0 * PI * k0 / (seg as f64 * dt);
        let x: Vec<f64> = (0..n).map(|i| (w0 * i as f64 * dt).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v).collect();
        let t = Trace {
            dt,
            seed: 0,
            params_hash: 0,
            frame: Frame::Lab,
            x,
            y,
            cavity: None,
        };
        let w = welch_spectra(&t, &WelchConfig::new(seg)).unwrap();
        let i = k0 as usize;
        let sxy = w.s_xy.values[i];
        let mag = (w.s_xx.values[i] * w.s_yy.values[i]).sqrt();
        assert!(sxy < 0.0);
        assert!((sxy.abs() / mag - 1.0).abs() < 1e-12);
        // an on-bin unit sinusoid has |X_k| = Σw/2
        let win = Window::Hann.values(seg);
        let s2: f64 = win.iter().map(|v| v * v).sum();
        let s1: f64 = win.iter().sum();
        let expect = 2.0 * dt * (0.5 * s1).powi(2) / (2.0 * PI * s2);
        assert!((w.s_xx.values[i] / expect - 1.0).abs() < 1e-9);
    }

    #[test]
    fn welch_config_errors() {
        let t = white_trace(1 << 14, 3, false);
        assert!(matches!(
            welch_spectra(&t, &WelchConfig::new(1 << 15)),
            Err(Error::Config(_))
        ));
        assert!(welch_spectra(&t, &WelchConfig::new(1000)).is_err());
        let short = white_trace(1000, 3, false);
        assert!(welch_spectra(&short, &WelchConfig::new(256)).is_err());
        let mut c = WelchConfig::new(256);
        c.overlap_fraction = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kernel_matches_direct_sum() {
        let n = 64;
        for win in [Window::Hann, Window::Hamming, Window::Rectangular] {
            let w = win.values(n);
            for theta in [0.0, 0.013, 0.1, -0.31, 2.0 * PI / n as f64] {
                let direct: Complex64 = (0..n)
                    .map(|k| w[k] * Complex64::from_polar(1.0, theta * k as f64))
                    .sum();
                let k = win.kernel(theta, n);
                assert!(
                    (k - direct.norm_sqr()).abs() < 1e-9 * direct.norm_sqr().max(1.0),
                    "{win:?} {theta}"
                );
            }
        }
    }

    #[test]
    fn hann_bin_correlation() {
        let t = white_trace(1 << 14, 5, false);
        let w = welch_spectra(&t, &WelchConfig::new(1024)).unwrap();
        assert!((w.bin_correlation(0) - 1.0).abs() < 1e-12);
        // w² = 3/8 − cos/2 + cos2/8 gives lag correlations (2/3)² and (1/6)²
        assert!((w.bin_correlation(1) - 4.0 / 9.0).abs() < 1e-12);
        assert!((w.bin_correlation(2) - 1.0 / 36.0).abs() < 1e-12);
        assert!(w.bin_correlation(3) < 1e-20);
    }

    #[test]
    fn expected_welch_is_exact_for_flat_spectra() {
        let cfg = WelchConfig::new(4096);
        let v = expected_welch(|_| 3.5, &[1e5, 2e5], 1e-6, &cfg);
        for x in v {
            assert!((x - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_fit_exact_and_scale_free() {
        let g = linspace(1.0, 2.0, 50);
        let sxx = RealSpectrum::from_fn(&g, |w| 1.0 / (1e-3 + (w - 1.3).powi(2))).unwrap();
        let syy = RealSpectrum::from_fn(&g, |w| 1.0 / (1e-3 + (w - 1.7).powi(2))).unwrap();
        let sxy = RealSpectrum::from_fn(&g, |w| 0.05 * (syy.interp(w) - sxx.interp(w))).unwrap();
        let r = fit_rotation(&sxy, &sxx, &syy, None).unwrap();
        assert!((r.get("phi") - 0.05).abs() < 1e-15);
        let k = 7.3;
        let sc = |s: &RealSpectrum| {
            RealSpectrum::new(s.freq_grid.clone(), s.values.iter().map(|v| k * v).collect()).unwrap()
        };
        let r2 = fit_rotation(&sc(&sxy), &sc(&sxx), &sc(&syy), None).unwrap();
        assert!((r2.get("phi") - r.get("phi")).abs() < 1e-15);
        assert!(matches!(
            fit_rotation(&sxy, &sxx, &sxx, None),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn misalignment_fit() {
        let g = linspace(1.0, 2.0, 80);
        let sxx = RealSpectrum::from_fn(&g, |w| 1.0 / (1e-3 + (w - 1.3).powi(2))).unwrap();
        let syy = RealSpectrum::from_fn(&g, |w| 1.0 / (1e-3 + (w - 1.7).powi(2))).unwrap();
        let sxy = RealSpectrum::from_fn(&g, |w| 0.03 * syy.interp(w)).unwrap();
        let r = fit_misalignment(&sxy, &sxx, &syy, None).unwrap();
        assert!((r.get("a_x") - 0.03).abs() < 1e-15);
        assert!(r.get("a_y").abs() < 1e-15);
        let sxy2 = RealSpectrum::from_fn(&g, |w| 0.02 * syy.interp(w) - 0.01 * sxx.interp(w)).unwrap();
        let r = fit_misalignment(&sxy2, &sxx, &syy, None).unwrap();
        assert!((r.get("a_x") - 0.02).abs() < 1e-14 && (r.get("a_y") - 0.01).abs() < 1e-14);

        // quadratic leakage of S_yy into S_xx only moves the estimates at second order
        for a in [0.01, 0.02, 0.04] {
            let sxy = RealSpectrum::from_fn(&g, |w| a * syy.interp(w)).unwrap();
            let sxx_c = RealSpectrum::from_fn(&g, |w| sxx.interp(w) + a * a * syy.interp(w)).unwrap();
            let r = fit_misalignment(&sxy, &sxx_c, &syy, None).unwrap();
            let dev = (r.get("a_x") - a).abs() + r.get("a_y").abs();
            assert!(dev < 2.0 * a * a, "{a} {dev}");
        }

        let near = RealSpectrum::from_fn(&g, |w| 1.0 / (1e-3 + (w - 1.301).powi(2))).unwrap();
        assert!(matches!(
            fit_misalignment(&sxy, &sxx, &near, None),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn orientation_inverse_crime() {
        let p = fig2_cancel();
        let band = fit_band(&p, &DirectedForce::off()).unwrap();
        let grid = linspace(band.0, band.1, 400);
        for deg in [45.0f64, 30.0, 60.0, 120.0] {
            let f = DirectedForce::new(p.gamma, 0.25, deg.to_radians()).unwrap();
            let [sxx, syy, sxy] = crate::spectra::classical_one_sided(&grid, &p, &f).unwrap();
            let r = fit_orientation(&sxy, &sxx, &syy, &p, &OrientationOptions::default()).unwrap();
            assert!((r.get("psi").to_degrees() - deg).abs() < 0.5, "{deg} {:?}", r);
            assert!((r.get("beta2") - 0.25).abs() < 1e-3);
            assert!(r.flags.is_empty(), "{:?}", r.flags);
            // Ψ + π describes the same force
            let f2 = DirectedForce::new(p.gamma, 0.25, deg.to_radians() + PI).unwrap();
            let [a, b, c] = crate::spectra::classical_one_sided(&grid, &p, &f2).unwrap();
            let r2 = fit_orientation(&c, &a, &b, &p, &OrientationOptions::default()).unwrap();
            assert!((r2.get("psi") - r.get("psi")).abs() < 1e-9);
        }
    }

    #[test]
    fn orientation_flags_weak_force() {
        let p = fig2_cancel();
        let band = fit_band(&p, &DirectedForce::off()).unwrap();
        let grid = linspace(band.0, band.1, 200);
        let f = DirectedForce::new(p.gamma, 1e-5, 0.7).unwrap();
        let [sxx, syy, sxy] = crate::spectra::classical_one_sided(&grid, &p, &f).unwrap();
        // multiplicative noise far above the directed signal
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = |s: &RealSpectrum, rng: &mut ChaCha8Rng| {
            let v = s.values.iter().map(|v| {
                let z: f64 = rng.sample(StandardNormal);
                v * (1.0 + 0.05 * z)
            });
            RealSpectrum::new(s.freq_grid.clone(), v.collect()).unwrap()
        };
        let (a, b) = (noisy(&sxx, &mut rng), noisy(&syy, &mut rng));
        let c = RealSpectrum::new(
            sxy.freq_grid.clone(),
            (0..sxy.len())
                .map(|i| {
                    let z: f64 = rng.sample(StandardNormal);
                    sxy.values[i] + 0.05 * z * (sxx.values[i] * syy.values[i]).sqrt()
                })
                .collect(),
        )
        .unwrap();
        let r = fit_orientation(&c, &a, &b, &p, &OrientationOptions::default()).unwrap();
        assert!(r.flags.iter().any(|f| f == FLAG_UNRESOLVED), "{:?}", r);
    }

    #[test]
    fn orientation_residual_minimum_is_global() {
        let p = fig2_cancel();
        let band = fit_band(&p, &DirectedForce::off()).unwrap();
        let grid = linspace(band.0, band.1, 200);
        let truth = DirectedForce::new(p.gamma, 0.1, 0.6).unwrap();
        let [sxx, syy, sxy] = crate::spectra::classical_one_sided(&grid, &p, &truth).unwrap();
        let resid = |f: &DirectedForce| {
            let [a, b, c] = crate::spectra::classical_one_sided(&grid, &p, f).unwrap();
            (0..grid.len())
                .map(|i| {
                    ((a.values[i] - sxx.values[i]) / sxx.values[i]).powi(2)
                        + ((b.values[i] - syy.values[i]) / syy.values[i]).powi(2)
                        + (c.values[i] - sxy.values[i]).powi(2) / (sxx.values[i] * syy.values[i])
                })
                .sum::<f64>()
        };
        assert_eq!(resid(&truth), 0.0);
        for i in 0..36 {
            for beta2 in [0.02, 0.05, 0.1, 0.3, 1.0] {
                let f = DirectedForce::new(p.gamma, beta2, i as f64 * PI / 36.0).unwrap();
                assert!(resid(&f) >= 0.0);
                if (beta2 - 0.1).abs() > 1e-12 || (i as f64 * PI / 36.0 - 0.6).abs() > 1e-3 {
                    assert!(resid(&f) > 0.0);
                }
            }
        }
    }
}
