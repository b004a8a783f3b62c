//! Classical time-domain Langevin simulation of the two mechanical modes and
//! the cavity field quadratures.
//!
//! State `s = (x, p_x, y, p_y, u, v)` in zero-point units obeys `ds = A s dt + B dW`
//! with eight independent Wiener inputs: two quadratures each for the x bath,
//! the y bath, the directed bath and the cavity vacuum. Noise intensities are
//! the symmetrised quantum ones, `Γ(2n̄+1)` and `κ`, so the stationary spectra
//! equal the classical one-sided limit of the analytic model.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SMatrix, SVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DirectedForce, Misalignment, SystemParams};
use crate::spectra::gamma_opt;

pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Vec6 = SVector<f64, 6>;
type Mat68 = SMatrix<f64, 6, 8>;

pub const TRACE_MAGIC: &[u8; 4] = b"LVXC";
pub const TRACE_VERSION: u32 = 1;
/// Shortest trace accepted for spectral estimation.
pub const MIN_SPECTRAL_LEN: usize = 1 << 14;
/// Upper bound on `dt · max(ω, κ, |Δ|)/2π`.
pub const RESOLUTION_GUARD: f64 = 0.1;
/// Minimum duration in units of `2π/min(Γ_opt, |ω_x − ω_y|)`.
pub const MIN_DURATION_PERIODS: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector {
    pub x: f64,
    pub p_x: f64,
    pub y: f64,
    pub p_y: f64,
    pub u: f64,
    pub v: f64,
}

impl StateVector {
    pub fn to_vec(self) -> Vec6 {
        Vec6::new(self.x, self.p_x, self.y, self.p_y, self.u, self.v)
    }

    pub fn from_vec(s: &Vec6) -> Self {
        StateVector {
            x: s[0],
            p_x: s[1],
            y: s[2],
            p_y: s[3],
            u: s[4],
            v: s[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Drift and diffusion matrices of the linearised dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub drift: Mat6,
    pub diffusion: Mat68,
}

impl LinearModel {
    pub fn new(p: &SystemParams, f: &DirectedForce) -> Self {
        let mut a = Mat6::zeros();
        let half = 0.5 * p.gamma;
        // the Hamiltonian coupling is −g_xy·x·y in these units
        let g_h = -p.g_xy;
        a[(0, 0)] = -half;
        a[(0, 1)] = p.omega_x;
        a[(1, 0)] = -p.omega_x;
        a[(1, 1)] = -half;
        a[(1, 2)] = -2.0 * g_h;
        a[(1, 4)] = -2.0 * p.g_x;
        a[(2, 2)] = -half;
        a[(2, 3)] = p.omega_y;
        a[(3, 2)] = -p.omega_y;
        a[(3, 3)] = -half;
        a[(3, 0)] = -2.0 * g_h;
        a[(3, 4)] = -2.0 * p.g_y;
        a[(4, 4)] = -0.5 * p.kappa;
        a[(4, 5)] = -p.delta;
        a[(5, 4)] = p.delta;
        a[(5, 5)] = -0.5 * p.kappa;
        a[(5, 0)] = -2.0 * p.g_x;
        a[(5, 2)] = -2.0 * p.g_y;

        let nm = NoiseModel::new(p, f);
        let mut b = Mat68::zeros();
        b[(0, 0)] = nm.sigma_x;
        b[(1, 1)] = nm.sigma_x;
        b[(2, 2)] = nm.sigma_y;
        b[(3, 3)] = nm.sigma_y;
        let (s, c) = nm.psi.sin_cos();
        b[(0, 4)] = nm.sigma_c * c;
        b[(1, 5)] = nm.sigma_c * c;
        b[(2, 4)] = nm.sigma_c * s;
        b[(3, 5)] = nm.sigma_c * s;
        b[(4, 6)] = nm.sigma_cav;
        b[(5, 7)] = nm.sigma_cav;
        LinearModel { drift: a, diffusion: b }
    }

    /// `B Bᵀ`.
    pub fn noise_covariance(&self) -> Mat6 {
        self.diffusion * self.diffusion.transpose()
    }

    /// One-sided `(S_xx, S_yy, S_xy)` per rad/s of the continuous process.
    pub fn one_sided_psd(&self, omega: f64) -> (f64, f64, f64) {
        let q = self.noise_covariance();
        let s = |w: f64| {
            let m = complex_resolvent(&self.drift, w);
            let qc = q.map(|v| Complex64::new(v, 0.0));
            &m * qc * m.adjoint()
        };
        let a = s(omega);
        let b = s(-omega);
        let k = 1.0 / (2.0 * PI);
        (
            k * (a[(0, 0)].re + b[(0, 0)].re),
            k * (a[(2, 2)].re + b[(2, 2)].re),
            k * (a[(0, 2)].re + b[(0, 2)].re),
        )
    }

    /// Stationary covariance solving `A P + P Aᵀ + B Bᵀ = 0`.
    pub fn stationary_covariance(&self) -> Result<Mat6> {
        lyapunov(&self.drift, &self.noise_covariance())
    }
}

fn complex_resolvent(a: &Mat6, omega: f64) -> SMatrix<Complex64, 6, 6> {
    let m = SMatrix::<Complex64, 6, 6>::from_fn(|i, j| {
        let d = if i == j {
            Complex64::new(0.0, -omega)
        } else {
            Complex64::new(0.0, 0.0)
        };
        d - a[(i, j)]
    });
    m.try_inverse()
        .expect("drift matrix has an eigenvalue on the imaginary axis")
}

fn lyapunov(a: &Mat6, q: &Mat6) -> Result<Mat6> {
    let n = 6;
    let mut k = DMatrix::<f64>::zeros(n * n, n * n);
    // column-major vec: vec(AP) = (I⊗A) vec P, vec(PAᵀ) = (A⊗I) vec P
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                k[(j * n + i, j * n + l)] += a[(i, l)];
                k[(j * n + i, l * n + i)] += a[(j, l)];
            }
        }
    }
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Domain("drift matrix is not stable".into()))?;
    let p = Mat6::from_iterator(sol.iter().cloned());
    Ok(0.5 * (p + p.transpose()))
}

/// Per-√time amplitudes of the mechanical force noises.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// `√(Γ(2n̄_x+1))`.
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// `√(Γβ²(2n̄_c+1))`, shared by both axes with weights `(cosΨ, sinΨ)`.
    pub sigma_c: f64,
    pub psi: f64,
    /// `√κ` for each cavity quadrature.
    pub sigma_cav: f64,
}

impl NoiseModel {
    pub fn new(p: &SystemParams, f: &DirectedForce) -> Self {
        NoiseModel {
            sigma_x: (p.gamma * (2.0 * p.nbar_x + 1.0)).sqrt(),
            sigma_y: (p.gamma * (2.0 * p.nbar_y + 1.0)).sqrt(),
            sigma_c: (p.gamma * f.beta2 * (2.0 * p.nbar_directed() + 1.0)).sqrt(),
            psi: f.psi,
            sigma_cav: p.kappa.sqrt(),
        }
    }

    /// One pair of force increments over `dt`.
    pub fn step<R: Rng + ?Sized>(&self, rng: &mut R, dt: f64) -> (f64, f64) {
        let sq = dt.sqrt();
        let wx: f64 = rng.sample(StandardNormal);
        let wy: f64 = rng.sample(StandardNormal);
        let wc: f64 = rng.sample(StandardNormal);
        let (s, c) = self.psi.sin_cos();
        (
            (self.sigma_x * wx + self.sigma_c * c * wc) * sq,
            (self.sigma_y * wy + self.sigma_c * s * wc) * sq,
        )
    }
}

/// Force increments `(ξ_x, ξ_y)` from the axis baths plus the directed bath.
pub fn correlated_noise_step<R: Rng + ?Sized>(
    rng: &mut R,
    dt: f64,
    params: &SystemParams,
    force: &DirectedForce,
) -> (f64, f64) {
    NoiseModel::new(params, force).step(rng, dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Exact transition matrix and exact discrete noise covariance.
    #[default]
    Exact,
    /// Exact drift with a midpoint-propagated additive increment from
    /// [`correlated_noise_step`]; first order in `dt` for the noise.
    Increment,
}

/// One-step propagator of the discretised process.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub dt: f64,
    pub scheme: Scheme,
    pub transition: Mat6,
    /// Covariance of the additive noise per step.
    pub noise_cov: Mat6,
    half_step: Mat6,
    noise_factor: Mat6,
    noise: NoiseModel,
}

impl Discretization {
    pub fn new(params: &SystemParams, force: &DirectedForce, dt: f64, scheme: Scheme) -> Result<Self> {
        let model = LinearModel::new(params, force);
        let a = model.drift;
        let q = model.noise_covariance();
        let half_step = (a * (0.5 * dt)).exp();
        let transition = half_step * half_step;
        let noise_cov = match scheme {
            Scheme::Exact => {
                // Van Loan: exp([[-A, Q], [0, Aᵀ]] dt) holds Φ⁻¹Q_d in the upper right block
                let mut m = DMatrix::<f64>::zeros(12, 12);
                for i in 0..6 {
                    for j in 0..6 {
                        m[(i, j)] = -a[(i, j)] * dt;
                        m[(i, j + 6)] = q[(i, j)] * dt;
                        m[(i + 6, j + 6)] = a[(j, i)] * dt;
                    }
                }
                let e = m.exp();
                let f12 = Mat6::from_fn(|i, j| e[(i, j + 6)]);
                let f22 = Mat6::from_fn(|i, j| e[(i + 6, j + 6)]);
                let qd = f22.transpose() * f12;
                0.5 * (qd + qd.transpose())
            }
            Scheme::Increment => half_step * q * half_step.transpose() * dt,
        };
        let noise_factor = Cholesky::new(noise_cov)
            .ok_or_else(|| Error::Domain("discrete noise covariance is not positive definite".into()))?
            .l();
        Ok(Discretization {
            dt,
            scheme,
            transition,
            noise_cov,
            half_step,
            noise_factor,
            noise: NoiseModel::new(params, force),
        })
    }

    pub fn step<R: Rng + ?Sized>(&self, s: &Vec6, rng: &mut R) -> Vec6 {
        match self.scheme {
            Scheme::Exact => {
                let z = Vec6::from_fn(|_, _| rng.sample(StandardNormal));
                self.transition * s + self.noise_factor * z
            }
            Scheme::Increment => {
                let (qx, qy) = self.noise.step(rng, self.dt);
                let (px, py) = self.noise.step(rng, self.dt);
                let sq = self.noise.sigma_cav * self.dt.sqrt();
                let wu: f64 = rng.sample(StandardNormal);
                let wv: f64 = rng.sample(StandardNormal);
                let n = Vec6::new(qx, px, qy, py, sq * wu, sq * wv);
                self.transition * s + self.half_step * n
            }
        }
    }

    /// One-sided `(S_xx, S_yy, S_xy)` per rad/s of the sampled chain.
    pub fn one_sided_psd(&self, omega: f64) -> (f64, f64, f64) {
        let z = Complex64::from_polar(1.0, -omega * self.dt);
        let m = SMatrix::<Complex64, 6, 6>::from_fn(|i, j| {
            let id = if i == j {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
            id - self.transition[(i, j)] * z
        });
        let h = m
            .try_inverse()
            .expect("transition matrix has a unit-modulus eigenvalue");
        let qc = self.noise_cov.map(|v| Complex64::new(v, 0.0));
        let s = &h * qc * h.adjoint();
        let k = self.dt / PI;
        (k * s[(0, 0)].re, k * s[(2, 2)].re, k * s[(0, 2)].re)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Draw the initial state from the stationary distribution.
    #[serde(default = "yes")]
    pub stationary_start: bool,
    #[serde(default)]
    pub record_cavity: bool,
}

fn yes() -> bool {
    true
}

impl SimConfig {
    pub fn new(dt: f64, duration: f64, seed: u64) -> Self {
        SimConfig {
            dt,
            duration,
            seed,
            scheme: Scheme::Exact,
            stationary_start: true,
            record_cavity: false,
        }
    }

    pub fn n_steps(&self) -> u64 {
        (self.duration / self.dt).round() as u64
    }
}

/// Checks the step-size and duration preconditions of a run.
pub fn check_run(params: &SystemParams, force: &DirectedForce, cfg: &SimConfig) -> Result<()> {
    params.validate()?;
    if !(cfg.dt > 0.0 && cfg.duration > 0.0) {
        return Err(Error::Config("dt and duration must be positive".into()));
    }
    let fastest = params
        .omega_x
        .max(params.omega_y)
        .max(params.kappa)
        .max(params.delta.abs());
    let r = cfg.dt * fastest / (2.0 * PI);
    if r >= RESOLUTION_GUARD {
        return Err(Error::Config(format!(
            "dt = {} s resolves the fastest rate with dt*max(omega, kappa)/2pi = {r:.3} >= {RESOLUTION_GUARD}",
            cfg.dt
        )));
    }
    let slow = gamma_opt(params, force)?.min((params.omega_x - params.omega_y).abs());
    let need = MIN_DURATION_PERIODS * 2.0 * PI / slow;
    if cfg.duration < need {
        return Err(Error::Config(format!(
            "duration {} s is shorter than the {need:.4} s needed to resolve the slowest scale",
            cfg.duration
        )));
    }
    Ok(())
}

/// Runs the simulation and hands every post-step state to `sink`. Returns the step count.
pub fn integrate_with<F: FnMut(&Vec6)>(
    params: &SystemParams,
    force: &DirectedForce,
    cfg: &SimConfig,
    initial: Option<StateVector>,
    mut sink: F,
) -> Result<u64> {
    check_run(params, force, cfg)?;
    let disc = Discretization::new(params, force, cfg.dt, cfg.scheme)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = match initial {
        Some(s0) => s0.to_vec(),
        None if cfg.stationary_start => {
            let p = LinearModel::new(params, force).stationary_covariance()?;
            let l = Cholesky::new(p)
                .ok_or_else(|| Error::Domain("stationary covariance is not positive definite".into()))?
                .l();
            let z = Vec6::from_fn(|_, _| rng.sample(StandardNormal));
            l * z
        }
        None => Vec6::zeros(),
    };
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged { step: 0 });
    }
    let n = cfg.n_steps();
    match disc.scheme {
        Scheme::Exact => {
            // row-major copies keep the inner loops on plain arrays
            let phi: [[f64; 6]; 6] = std::array::from_fn(|i| std::array::from_fn(|j| disc.transition[(i, j)]));
            let l: [[f64; 6]; 6] = std::array::from_fn(|i| std::array::from_fn(|j| disc.noise_factor[(i, j)]));
            let mut cur: [f64; 6] = std::array::from_fn(|i| s[i]);
            for step in 1..=n {
                let z: [f64; 6] = std::array::from_fn(|_| rng.sample(StandardNormal));
                let mut next = [0.0; 6];
                for i in 0..6 {
                    let mut acc = 0.0;
                    for j in 0..6 {
                        acc += phi[i][j] * cur[j];
                    }
                    for j in 0..=i {
                        acc += l[i][j] * z[j];
                    }
                    next[i] = acc;
                }
                if !next.iter().all(|v| v.is_finite()) {
                    return Err(Error::Diverged { step });
                }
                cur = next;
                s = Vec6::from(cur);
                sink(&s);
            }
        }
        Scheme::Increment => {
            for step in 1..=n {
                s = disc.step(&s, &mut rng);
                if !s.iter().all(|v| v.is_finite()) {
                    return Err(Error::Diverged { step });
                }
                sink(&s);
            }
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Lab,
    Detector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub dt: f64,
    pub seed: u64,
    pub params_hash: u64,
    pub frame: Frame,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Cavity quadratures `(u, v)` when recorded.
    pub cavity: Option<(Vec<f64>, Vec<f64>)>,
}

/// Stable 64-bit identity of a parameter set (truncated SHA-256).
pub fn params_hash(params: &SystemParams, force: &DirectedForce) -> u64 {
    let bytes = serde_json::to_vec(&(params, force)).expect("parameters serialise");
    let d = Sha256::digest(&bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Lab-frame trace of the simulated motion.
pub fn integrate_trace(
    params: &SystemParams,
    force: &DirectedForce,
    cfg: &SimConfig,
    initial: Option<StateVector>,
) -> Result<Trace> {
    let n = cfg.n_steps() as usize;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let (mut u, mut v) = (Vec::new(), Vec::new());
    let rec = cfg.record_cavity;
    integrate_with(params, force, cfg, initial, |s| {
        x.push(s[0]);
        y.push(s[2]);
        if rec {
            u.push(s[4]);
            v.push(s[5]);
        }
    })?;
    Ok(Trace {
        dt: cfg.dt,
        seed: cfg.seed,
        params_hash: params_hash(params, force),
        frame: Frame::Lab,
        x,
        y,
        cavity: rec.then_some((u, v)),
    })
}

/// White imprecision noise added to each detector channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Imprecision {
    pub sigma: f64,
    pub seed: u64,
}

/// Applies the detector alignment errors `x̂ = X + β_x Y`, `ŷ = Y − β_y X`.
///
/// The mode rotation `Φ` is not applied here: in the simulation it arises from
/// the dynamics.
pub fn detector_projection(trace: &Trace, mis: &Misalignment, imprecision: Option<Imprecision>) -> Result<Trace> {
    mis.validate()?;
    if trace.frame != Frame::Lab {
        return Err(Error::Format("detector projection needs a lab-frame trace".into()));
    }
    let (bx, by) = (mis.beta_err_x, mis.beta_err_y);
    let mut x: Vec<f64> = trace.x.iter().zip(&trace.y).map(|(a, b)| a + bx * b).collect();
    let mut y: Vec<f64> = trace.y.iter().zip(&trace.x).map(|(b, a)| b - by * a).collect();
    if let Some(imp) = imprecision {
        let mut rng = ChaCha8Rng::seed_from_u64(imp.seed);
        for (a, b) in x.iter_mut().zip(y.iter_mut()) {
            let na: f64 = rng.sample(StandardNormal);
            let nb: f64 = rng.sample(StandardNormal);
            *a += imp.sigma * na;
            *b += imp.sigma * nb;
        }
    }
    Ok(Trace {
        frame: Frame::Detector,
        x,
        y,
        ..trace.clone()
    })
}

impl Trace {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn n_channels(&self) -> u32 {
        if self.cavity.is_some() {
            4
        } else {
            2
        }
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(48 + self.len() * 8 * self.n_channels() as usize);
        buf.extend_from_slice(TRACE_MAGIC);
        buf.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.n_channels().to_le_bytes());
        let frame: u32 = match self.frame {
            Frame::Lab => 0,
            Frame::Detector => 1,
        };
        buf.extend_from_slice(&frame.to_le_bytes());
        buf.extend_from_slice(&self.dt.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.params_hash.to_le_bytes());
        for i in 0..self.len() {
            buf.extend_from_slice(&self.x[i].to_le_bytes());
            buf.extend_from_slice(&self.y[i].to_le_bytes());
            if let Some((u, v)) = &self.cavity {
                buf.extend_from_slice(&u[i].to_le_bytes());
                buf.extend_from_slice(&v[i].to_le_bytes());
            }
        }
        out.write_all(&buf)
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Trace> {
        let mut buf = Vec::new();
        input
            .read_to_end(&mut buf)
            .map_err(|e| Error::Format(format!("read failed: {e}")))?;
        if buf.len() >= 4 && &buf[0..4] != TRACE_MAGIC {
            return Err(Error::Format("bad magic, not a trace file".into()));
        }
        if buf.len() < 48 {
            return Err(Error::Format("trace header is truncated".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != TRACE_VERSION {
            return Err(Error::Format(format!("unsupported trace version {version}")));
        }
        let channels = u32_at(8) as usize;
        if channels != 2 && channels != 4 {
            return Err(Error::Format(format!("unsupported channel count {channels}")));
        }
        let frame = match u32_at(12) {
            0 => Frame::Lab,
            1 => Frame::Detector,
            f => return Err(Error::Format(format!("unknown frame tag {f}"))),
        };
        let dt = f64::from_le_bytes(buf[16..24].try_into().unwrap());
        let n = u64_at(24) as usize;
        let seed = u64_at(32);
        let params_hash = u64_at(40);
        let body = &buf[48..];
        if body.len() != n * channels * 8 {
            return Err(Error::Format(format!(
                "expected {} sample bytes, found {}",
                n * channels * 8,
                body.len()
            )));
        }
        let mut cols = vec![Vec::with_capacity(n); channels];
        for (k, chunk) in body.chunks_exact(8).enumerate() {
            cols[k % channels].push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mut it = cols.into_iter();
        let x = it.next().unwrap();
        let y = it.next().unwrap();
        let cavity = match (it.next(), it.next()) {
            (Some(u), Some(v)) => Some((u, v)),
            _ => None,
        };
        Ok(Trace {
            dt,
            seed,
            params_hash,
            frame,
            x,
            y,
            cavity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_binary(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Trace> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Trace::read_binary(std::io::BufReader::new(f)).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut s = String::new();
        use std::fmt::Write as _;
        if self.cavity.is_some() {
            s.push_str("t_s,x,y,u,v\n");
        } else {
            s.push_str("t_s,x,y\n");
        }
        for i in 0..self.len() {
            let t = (i + 1) as f64 * self.dt;
            let _ = write!(s, "{t:e},{:e},{:e}", self.x[i], self.y[i]);
            if let Some((u, v)) = &self.cavity {
                let _ = write!(s, ",{:e},{:e}", u[i], v[i]);
            }
            s.push('\n');
        }
        out.write_all(s.as_bytes())
    }
}
