//! Physical parameters, unit conventions and derived rates.
//!
//! Frequencies and rates are angular (rad/s). Displacements are in units of the
//! zero-point amplitude `x_zpf`, so spectra carry units of 1/(rad/s).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HBAR: f64 = 1.054_571_817e-34;
pub const K_B: f64 = 1.380_649e-23;
pub const ATOMIC_MASS: f64 = 1.660_539_066_60e-27;

/// Largest angle accepted by the small-angle detector model.
pub const MAX_SMALL_ANGLE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub omega_x: f64,
    pub omega_y: f64,
    pub gamma: f64,
    /// Full cavity linewidth.
    pub kappa: f64,
    /// Laser minus cavity frequency, negative for red detuning.
    pub delta: f64,
    pub g_x: f64,
    pub g_y: f64,
    pub g_xy: f64,
    pub nbar_x: f64,
    pub nbar_y: f64,
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.omega_x,
            self.omega_y,
            self.gamma,
            self.kappa,
            self.delta,
            self.g_x,
            self.g_y,
            self.g_xy,
            self.nbar_x,
            self.nbar_y,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("system parameters must be finite".into()));
        }
        if self.omega_x <= 0.0 || self.omega_y <= 0.0 || self.gamma <= 0.0 || self.kappa <= 0.0 {
            return Err(Error::Domain(
                "omega_x, omega_y, gamma and kappa must be positive".into(),
            ));
        }
        if self.omega_x == self.omega_y {
            return Err(Error::DegenerateFrequencies);
        }
        if self.nbar_x < 0.0 || self.nbar_y < 0.0 {
            return Err(Error::Domain("occupancies must be non-negative".into()));
        }
        Ok(())
    }

    /// Occupancy of the directed bath, the mean of the two axis baths.
    pub fn nbar_directed(&self) -> f64 {
        0.5 * (self.nbar_x + self.nbar_y)
    }

    /// Copy with `g_xy` recomputed for a trap offset given in wavelengths.
    pub fn with_trap_offset(&self, offset_lambda: f64) -> Result<SystemParams> {
        let g_xy = direct_coupling_gxy(self.g_x, self.g_y, self.delta, self.kappa, 2.0 * PI * offset_lambda)?;
        Ok(SystemParams { g_xy, ..*self })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectedForce {
    /// Orientation from the lab X axis.
    pub psi: f64,
    pub beta2: f64,
    pub gamma_x_corr: f64,
    pub gamma_y_corr: f64,
}

impl DirectedForce {
    pub fn new(gamma: f64, beta2: f64, psi: f64) -> Result<Self> {
        let (gamma_x_corr, gamma_y_corr) = directed_rates(gamma, beta2, psi)?;
        Ok(DirectedForce {
            psi,
            beta2,
            gamma_x_corr,
            gamma_y_corr,
        })
    }

    pub fn off() -> Self {
        DirectedForce {
            psi: 0.0,
            beta2: 0.0,
            gamma_x_corr: 0.0,
            gamma_y_corr: 0.0,
        }
    }

    /// Signed correlated rate `Γβ² sinΨ cosΨ`.
    pub fn gamma_xy_corr(&self) -> f64 {
        let mag = (self.gamma_x_corr * self.gamma_y_corr).sqrt();
        mag * (self.psi.sin() * self.psi.cos()).signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Misalignment {
    pub phi: f64,
    pub beta_err_x: f64,
    pub beta_err_y: f64,
}

impl Misalignment {
    pub fn new(phi: f64, beta_err_x: f64, beta_err_y: f64) -> Result<Self> {
        let m = Misalignment {
            phi,
            beta_err_x,
            beta_err_y,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("phi", self.phi),
            ("beta_err_x", self.beta_err_x),
            ("beta_err_y", self.beta_err_y),
        ] {
            if !v.is_finite() || v.abs() >= MAX_SMALL_ANGLE {
                return Err(Error::Domain(format!(
                    "{name} = {v} rad is outside the small-angle range |angle| < {MAX_SMALL_ANGLE}"
                )));
            }
        }
        Ok(())
    }

    /// Total x-channel angle `Φ + β_x`.
    pub fn a_x(&self) -> f64 {
        self.phi + self.beta_err_x
    }

    /// Total y-channel angle `Φ + β_y`.
    pub fn a_y(&self) -> f64 {
        self.phi + self.beta_err_y
    }
}

/// Environment and particle, all in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalEnv {
    /// Pa.
    pub pressure: f64,
    pub temperature: f64,
    pub particle_radius: f64,
    pub particle_density: f64,
    pub gas_molecule_mass: f64,
    pub wavelength: f64,
    /// Trap offset from the cavity antinode, m.
    pub trap_offset: f64,
    pub polarisation_theta: f64,
}

impl PhysicalEnv {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("pressure", self.pressure),
            ("temperature", self.temperature),
            ("particle_radius", self.particle_radius),
            ("particle_density", self.particle_density),
            ("gas_molecule_mass", self.gas_molecule_mass),
            ("wavelength", self.wavelength),
            ("trap_offset", self.trap_offset),
            ("polarisation_theta", self.polarisation_theta),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be strictly positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn particle_mass(&self) -> f64 {
        4.0 / 3.0 * PI * self.particle_radius.powi(3) * self.particle_density
    }

    /// Standing-wave phase `k x0`.
    pub fn trap_phase(&self) -> f64 {
        2.0 * PI * self.trap_offset / self.wavelength
    }
}

/// `kT/(ħω)`.
pub fn thermal_occupancy(temperature: f64, omega: f64) -> Result<f64> {
    if !(temperature > 0.0 && omega > 0.0) {
        return Err(Error::Domain(format!(
            "thermal occupancy needs T > 0 and omega > 0, got T={temperature}, omega={omega}"
        )));
    }
    Ok(K_B * temperature / (HBAR * omega))
}

/// Free-molecular (Epstein) gas damping rate with diffuse reflection.
pub fn gas_damping_rate(env: &PhysicalEnv) -> Result<f64> {
    env.validate()?;
    let kt = K_B * env.temperature;
    let mean_speed = (8.0 * kt / (PI * env.gas_molecule_mass)).sqrt();
    Ok((1.0 + PI / 8.0) * env.pressure * env.gas_molecule_mass * mean_speed
        / (kt * env.particle_radius * env.particle_density))
}

/// Zero-point amplitude `√(ħ/2mω)` in metres.
pub fn x_zpf(mass: f64, omega: f64) -> f64 {
    (HBAR / (2.0 * mass * omega)).sqrt()
}

/// Direct mechanical coupling through the tweezer-cavity interference term.
pub fn direct_coupling_gxy(g_x: f64, g_y: f64, delta: f64, kappa: f64, phi_trap: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("kappa must be positive, got {kappa}")));
    }
    let s = phi_trap.sin();
    if s.abs() < 1e-12 {
        return Err(Error::Singularity { phi: phi_trap });
    }
    let c = phi_trap.cos();
    // at the node cos is only approximately zero in floating point
    let cot2 = if c.abs() < 1e-15 { 0.0 } else { (c / s).powi(2) };
    Ok(g_x * g_y * 2.0 * delta * cot2 / (delta * delta + 0.25 * kappa * kappa))
}

/// Per-axis correlated rates `(Γβ²cos²Ψ, Γβ²sin²Ψ)`.
pub fn directed_rates(gamma: f64, beta2: f64, psi: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    if !(beta2 >= 0.0) || !beta2.is_finite() {
        return Err(Error::Domain(format!("beta2 must be non-negative, got {beta2}")));
    }
    let (s, c) = psi.sin_cos();
    Ok((gamma * beta2 * c * c, gamma * beta2 * s * s))
}

/// Inputs to [`build_system`] beyond the environment. `None` fields are derived.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SystemSpec {
    pub omega_x: f64,
    pub omega_y: f64,
    pub delta: f64,
    pub kappa: f64,
    pub g_x: Option<f64>,
    pub g_y: Option<f64>,
    pub gamma: Option<f64>,
    pub g_xy: Option<f64>,
    pub nbar_x: Option<f64>,
    pub nbar_y: Option<f64>,
}

pub fn build_system(env: &PhysicalEnv, spec: &SystemSpec) -> Result<SystemParams> {
    let (g_x, g_y) = match (spec.g_x, spec.g_y) {
        (Some(x), Some(y)) => (x, y),
        _ => {
            return Err(Error::Config(
                "optomechanical couplings g_x and g_y must both be given".into(),
            ))
        }
    };
    let gamma = match spec.gamma {
        Some(g) => g,
        None => gas_damping_rate(env)?,
    };
    let nbar_x = match spec.nbar_x {
        Some(n) => n,
        None => thermal_occupancy(env.temperature, spec.omega_x)?,
    };
    let nbar_y = match spec.nbar_y {
        Some(n) => n,
        None => thermal_occupancy(env.temperature, spec.omega_y)?,
    };
    let g_xy = match spec.g_xy {
        Some(g) => g,
        None => direct_coupling_gxy(g_x, g_y, spec.delta, spec.kappa, env.trap_phase())?,
    };
    let p = SystemParams {
        omega_x: spec.omega_x,
        omega_y: spec.omega_y,
        gamma,
        kappa: spec.kappa,
        delta: spec.delta,
        g_x,
        g_y,
        g_xy,
        nbar_x,
        nbar_y,
    };
    p.validate()?;
    Ok(p)
}

fn khz(v: f64) -> f64 {
    2.0 * PI * 1e3 * v
}

/// Trap offset as a number of wavelengths or the named cancellation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrapOffset {
    Lambda(f64),
    Named(NamedOffset),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedOffset {
    Cancellation,
    Node,
}

/// Config-file view of the system. Frequency keys are ω/2π in kHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default = "d_omega_x")]
    pub omega_x_khz: f64,
    #[serde(default = "d_omega_y")]
    pub omega_y_khz: f64,
    #[serde(default = "d_delta")]
    pub delta_khz: f64,
    #[serde(default = "d_kappa")]
    pub kappa_khz: f64,
    pub g_x_khz: Option<f64>,
    pub g_y_khz: Option<f64>,
    #[serde(default = "d_pressure")]
    pub pressure_mbar: f64,
    #[serde(default = "d_temperature")]
    pub temperature_k: f64,
    #[serde(default = "d_radius")]
    pub particle_radius_nm: f64,
    #[serde(default = "d_density")]
    pub particle_density_kg_m3: f64,
    #[serde(default = "d_gas_mass")]
    pub gas_molecule_mass_u: f64,
    #[serde(default = "d_wavelength")]
    pub wavelength_nm: f64,
    #[serde(default = "d_offset")]
    pub trap_offset_lambda: TrapOffset,
    #[serde(default = "d_theta")]
    pub polarisation_theta_deg: f64,
    /// Overrides for derived quantities.
    pub gamma_khz: Option<f64>,
    pub g_xy_khz: Option<f64>,
    pub nbar_x: Option<f64>,
    pub nbar_y: Option<f64>,
}

fn d_omega_x() -> f64 {
    125.0
}
fn d_omega_y() -> f64 {
    140.0
}
fn d_delta() -> f64 {
    -176.0
}
fn d_kappa() -> f64 {
    400.0
}
fn d_pressure() -> f64 {
    1e-4
}
fn d_temperature() -> f64 {
    300.0
}
fn d_radius() -> f64 {
    60.1
}
fn d_density() -> f64 {
    1850.0
}
fn d_gas_mass() -> f64 {
    28.0134
}
fn d_wavelength() -> f64 {
    1064.0
}
fn d_offset() -> TrapOffset {
    TrapOffset::Named(NamedOffset::Cancellation)
}
fn d_theta() -> f64 {
    49.0
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            omega_x_khz: d_omega_x(),
            omega_y_khz: d_omega_y(),
            delta_khz: d_delta(),
            kappa_khz: d_kappa(),
            g_x_khz: Some(14.0),
            g_y_khz: Some(14.0),
            pressure_mbar: d_pressure(),
            temperature_k: d_temperature(),
            particle_radius_nm: d_radius(),
            particle_density_kg_m3: d_density(),
            gas_molecule_mass_u: d_gas_mass(),
            wavelength_nm: d_wavelength(),
            trap_offset_lambda: d_offset(),
            polarisation_theta_deg: d_theta(),
            gamma_khz: None,
            g_xy_khz: None,
            nbar_x: None,
            nbar_y: None,
        }
    }
}

impl SystemConfig {
    pub fn spec(&self) -> SystemSpec {
        SystemSpec {
            omega_x: khz(self.omega_x_khz),
            omega_y: khz(self.omega_y_khz),
            delta: khz(self.delta_khz),
            kappa: khz(self.kappa_khz),
            g_x: self.g_x_khz.map(khz),
            g_y: self.g_y_khz.map(khz),
            gamma: self.gamma_khz.map(khz),
            g_xy: self.g_xy_khz.map(khz),
            nbar_x: self.nbar_x,
            nbar_y: self.nbar_y,
        }
    }

    /// Environment for an explicit trap offset in wavelengths.
    pub fn env(&self, offset_lambda: f64) -> PhysicalEnv {
        let wavelength = self.wavelength_nm * 1e-9;
        PhysicalEnv {
            pressure: self.pressure_mbar * 100.0,
            temperature: self.temperature_k,
            particle_radius: self.particle_radius_nm * 1e-9,
            particle_density: self.particle_density_kg_m3,
            gas_molecule_mass: self.gas_molecule_mass_u * ATOMIC_MASS,
            wavelength,
            trap_offset: offset_lambda * wavelength,
            polarisation_theta: self.polarisation_theta_deg.to_radians(),
        }
    }

    /// Parse from JSON text; errors carry the line and column of the offending token.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigParse {
            origin: origin.to_string(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig2_env(offset_lambda: f64) -> PhysicalEnv {
        SystemConfig::default().env(offset_lambda)
    }

    #[test]
    fn occupancy_scaling() {
        let w = 2.0 * PI * 130e3;
        let a = thermal_occupancy(300.0, w).unwrap();
        assert_eq!(thermal_occupancy(600.0, w).unwrap() / a, 2.0);
        assert_eq!(thermal_occupancy(300.0, 2.0 * w).unwrap() / a, 0.5);
        // kT/(ħω) evaluated independently
        assert!((a / 48_084_505.698_679_78 - 1.0).abs() < 1e-14);
        assert!((HBAR * w * a / (K_B * 300.0) - 1.0).abs() < 1e-15);
        assert!(thermal_occupancy(0.0, w).is_err());
        assert!(thermal_occupancy(300.0, -1.0).is_err());
    }

    #[test]
    fn damping_rate() {
        let env = fig2_env(0.145);
        let g = gas_damping_rate(&env).unwrap();
        // independent evaluation of the Epstein expression at 1e-4 mbar, 1850 kg/m^3
        assert!((g / 0.669_863_535_475_625_2 - 1.0).abs() < 1e-12, "{g}");
        let env2 = PhysicalEnv {
            pressure: 2.0 * env.pressure,
            ..env
        };
        assert_eq!(gas_damping_rate(&env2).unwrap() / g, 2.0);
        let env3 = PhysicalEnv {
            particle_radius: 2.0 * env.particle_radius,
            ..env
        };
        assert!(gas_damping_rate(&env3).unwrap() < g);
    }

    #[test]
    fn direct_coupling() {
        let g = 2.0 * PI * 20e3;
        let d = -2.0 * PI * 176e3;
        let k = 2.0 * PI * 400e3;
        assert_eq!(direct_coupling_gxy(g, g, d, k, PI / 2.0).unwrap(), 0.0);
        let a = direct_coupling_gxy(g, g, d, k, PI / 4.0).unwrap();
        assert!((a / -12_464.389_247_786_383 - 1.0).abs() < 1e-12);
        let b = direct_coupling_gxy(g, g, -d, k, PI / 4.0).unwrap();
        assert_eq!(a, -b);
        assert!(matches!(
            direct_coupling_gxy(g, g, d, k, PI),
            Err(Error::Singularity { .. })
        ));
        assert!(direct_coupling_gxy(g, g, d, 0.0, 1.0).is_err());
    }

    #[test]
    fn rates() {
        assert_eq!(directed_rates(1.0, 0.3, 0.0).unwrap(), (0.3, 0.0));
        let (a, b) = directed_rates(2.0, 0.5, PI / 4.0).unwrap();
        assert!((a - 0.5).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
        let (a, b) = directed_rates(1.0, 0.25, PI / 3.0).unwrap();
        assert!((a - 0.0625).abs() < 1e-15 && (b - 0.1875).abs() < 1e-15);
        let closure = 0.25 * (PI / 3.0).sin() * (PI / 3.0).cos();
        assert!(((a * b).sqrt() - closure).abs() < 1e-15);
        assert!(directed_rates(1.0, -0.1, 0.0).is_err());
        let f = DirectedForce::new(1.0, 0.25, -PI / 3.0).unwrap();
        assert!((f.gamma_xy_corr() + closure).abs() < 1e-15);
    }

    #[test]
    fn build_passthrough_and_node() {
        let env = fig2_env(0.25);
        let spec = SystemSpec {
            omega_x: 1.0,
            omega_y: 2.0,
            delta: -3.0,
            kappa: 4.0,
            g_x: Some(5.0),
            g_y: Some(6.0),
            gamma: Some(7.0),
            g_xy: Some(8.0),
            nbar_x: Some(9.0),
            nbar_y: Some(10.0),
        };
        let p = build_system(&env, &spec).unwrap();
        assert_eq!(
            p,
            SystemParams {
                omega_x: 1.0,
                omega_y: 2.0,
                gamma: 7.0,
                kappa: 4.0,
                delta: -3.0,
                g_x: 5.0,
                g_y: 6.0,
                g_xy: 8.0,
                nbar_x: 9.0,
                nbar_y: 10.0
            }
        );
        let cfg = SystemConfig::default();
        let node = build_system(&env, &cfg.spec()).unwrap();
        assert_eq!(node.g_xy, 0.0);
        let missing = SystemSpec {
            g_x: None,
            ..cfg.spec()
        };
        assert!(matches!(build_system(&env, &missing), Err(Error::Config(_))));
    }

    #[test]
    fn fig2_echo() {
        let cfg = SystemConfig::default();
        let env = cfg.env(0.145);
        let p = build_system(&env, &cfg.spec()).unwrap();
        assert_eq!(p.delta, -2.0 * PI * 176e3);
        assert_eq!(p.kappa / 2.0, 2.0 * PI * 200e3);
        assert!((env.particle_radius - 60.1e-9).abs() < 1e-20);
        assert!((env.polarisation_theta - 49f64.to_radians()).abs() < 1e-15);
        assert!((env.trap_offset / env.wavelength - 0.145).abs() < 1e-15);
        assert!(p.g_xy < 0.0);
    }

    #[test]
    fn degenerate_and_angles() {
        let mut p = build_system(&fig2_env(0.2), &SystemConfig::default().spec()).unwrap();
        p.omega_y = p.omega_x;
        assert!(matches!(p.validate(), Err(Error::DegenerateFrequencies)));
        assert!(Misalignment::new(0.31, 0.0, 0.0).is_err());
        assert!(Misalignment::new(0.0, 0.0349, 0.0).is_ok());
    }

    #[test]
    fn config_rejects_unknown_keys_with_position() {
        let text = "{\n  \"delta_khz\": -176,\n  \"delta_krad_s\": 3\n}";
        match SystemConfig::from_json(text, "cfg.json") {
            Err(Error::ConfigParse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("delta_krad_s"));
            }
            other => panic!("{other:?}"),
        }
        let ok = SystemConfig::from_json("{\"trap_offset_lambda\": 0.2}", "x").unwrap();
        assert_eq!(ok.trap_offset_lambda, TrapOffset::Lambda(0.2));
        let named = SystemConfig::from_json("{\"trap_offset_lambda\": \"node\"}", "x").unwrap();
        assert_eq!(named.trap_offset_lambda, TrapOffset::Named(NamedOffset::Node));
    }

    proptest! {
        #[test]
        fn directed_flux_partition(gamma in 1e-3f64..1e3, beta2 in 0.0f64..1.0, psi in -7.0f64..7.0) {
            let (a, b) = directed_rates(gamma, beta2, psi).unwrap();
            prop_assert!((a + b - gamma * beta2).abs() <= 1e-12 * gamma);
        }

        #[test]
        fn occupancy_homogeneity(t in 1e-3f64..1e4, w in 1.0f64..1e9, c in 0.1f64..10.0) {
            let n = thermal_occupancy(t, w).unwrap();
            let nt = thermal_occupancy(c * t, w).unwrap();
            let nw = thermal_occupancy(t, c * w).unwrap();
            prop_assert!((nt / (c * n) - 1.0).abs() < 1e-14);
            prop_assert!((nw * c / n - 1.0).abs() < 1e-14);
        }

        #[test]
        fn gxy_mirror_about_node(phi in 0.05f64..1.5, d in -1e6f64..-1e3) {
            let a = direct_coupling_gxy(1e4, 2e4, d, 2e6, phi).unwrap();
            let b = direct_coupling_gxy(1e4, 2e4, d, 2e6, PI - phi).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300));
        }
    }
}
