//! Built-in systems. Each fixture has a typed parameter struct and can also be
//! built from a name plus a string-keyed parameter table (unknown keys are
//! rejected).
//!
//! The two oscillator fixtures are parametrised so that the free (wall-less)
//! periodic response touches `x_1 = 0` tangentially at `t = 0` exactly when
//! `mu = 0`; for `mu > 0` the orbit has one impact per period with an approach
//! speed that vanishes as `mu -> 0`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::SystemDefinition;

/// Names accepted by [`from_name`].
pub const FIXTURE_NAMES: [&str; 4] =
    ["bouncing_ball", "impact_oscillator", "coupled_oscillator", "vibrated_table"];

/// Ball under constant gravity above a fixed floor.
#[derive(Debug, Clone, PartialEq)]
pub struct BouncingBall {
    pub g: f64,
    pub r: f64,
    /// Nominal period used by the stroboscopic map; the dynamics are autonomous.
    pub period: f64,
}

impl Default for BouncingBall {
    fn default() -> Self {
        Self { g: 1.0, r: 0.5, period: 1.0 }
    }
}

impl BouncingBall {
    pub fn system(&self) -> Result<SystemDefinition> {
        positive("g", self.g)?;
        restitution_param(self.r)?;
        let (g, r) = (self.g, self.r);
        Ok(SystemDefinition::new("bouncing_ball", 1, self.period, move |_, _, _, o| o[0] = -g, move |_, _| r)?
            .with_partials(|_, _, _, p| p.fill(0.0))
            .with_restitution_slope(|_, _| 0.0)
            .with_mu_range(f64::NEG_INFINITY, f64::INFINITY)?)
    }
}

/// `x'' + 2 zeta x' + k x = b + F(t)` with a rigid wall at `x = 0`.
///
/// `F(t) = R((w^2 - k) cos wt + 2 zeta w sin wt)` and `b = kR - mu`, so that
/// the free periodic response is `x(t) = R - mu/k - R cos wt` and its minimum
/// `-mu/k` sits at `t = 0`. The restitution law is `r(Y) = r0 / (1 + c Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactOscillator {
    pub k: f64,
    pub zeta: f64,
    pub omega: f64,
    pub amplitude: f64,
    pub r0: f64,
    pub r_slope: f64,
}

impl Default for ImpactOscillator {
    fn default() -> Self {
        Self { k: 1.0, zeta: 0.05, omega: 2.5, amplitude: 1.0, r0: 0.8, r_slope: 0.0 }
    }
}

impl ImpactOscillator {
    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    /// Linear part `z' = M z` of the first-order system.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -self.k, -2.0 * self.zeta])
    }

    /// Free periodic response at time `t` (valid while it stays off the wall).
    pub fn free_response(&self, t: f64, mu: f64) -> DVector<f64> {
        let (w, a) = (self.omega, self.amplitude);
        DVector::from_vec(vec![a - mu / self.k - a * (w * t).cos(), a * w * (w * t).sin()])
    }

    /// Acceleration at the grazing point `(t, z) = (0, 0)` for `mu = 0`.
    pub fn grazing_accel(&self) -> f64 {
        self.amplitude * self.omega * self.omega
    }

    pub fn system(&self) -> Result<SystemDefinition> {
        positive("k", self.k)?;
        nonnegative("zeta", self.zeta)?;
        positive("omega", self.omega)?;
        positive("amplitude", self.amplitude)?;
        restitution_param(self.r0)?;
        nonnegative("r_slope", self.r_slope)?;
        let Self { k, zeta, omega: w, amplitude: a, r0, r_slope: c } = self.clone();
        let accel = move |t: f64, z: &[f64], mu: f64, o: &mut [f64]| {
            let forcing = a * ((w * w - k) * (w * t).cos() + 2.0 * zeta * w * (w * t).sin());
            o[0] = -k * z[0] - 2.0 * zeta * z[1] + k * a - mu + forcing;
        };
        let partials = move |t: f64, _: &[f64], _: f64, p: &mut [f64]| {
            p[0] = a * w * (-(w * w - k) * (w * t).sin() + 2.0 * zeta * w * (w * t).cos());
            p[1] = -k;
            p[2] = -2.0 * zeta;
        };
        Ok(SystemDefinition::new("impact_oscillator", 1, self.period(), accel, move |y, _| r0 / (1.0 + c * y))?
            .with_partials(partials)
            .with_restitution_slope(move |y, _| -r0 * c / ((1.0 + c * y) * (1.0 + c * y)))
            .with_mu_range(-self.k * self.amplitude, 10.0 * self.k * self.amplitude)?)
    }
}

/// Two masses joined by a spring and damper; the first mass hits the wall.
///
/// The harmonic force on mass 1 is tuned through the receptance so that the
/// free response of `x_1` is `R - mu h - R cos wt` with `h` the static
/// compliance of mass 1; the constant force is `R/h - mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledOscillator {
    pub k1: f64,
    pub k2: f64,
    pub kc: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub cd: f64,
    pub omega: f64,
    pub amplitude: f64,
    pub r: f64,
}

impl Default for CoupledOscillator {
    fn default() -> Self {
        Self { k1: 1.0, k2: 1.5, kc: 0.2, zeta1: 0.05, zeta2: 0.05, cd: 0.05, omega: 2.5, amplitude: 1.0, r: 0.8 }
    }
}

impl CoupledOscillator {
    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let Self { k1, k2, kc, zeta1, zeta2, cd, .. } = *self;
        DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 0.0,
                -k1 - kc, -2.0 * zeta1 - cd, kc, cd,
                0.0, 0.0, 0.0, 1.0,
                kc, cd, -k2 - kc, -2.0 * zeta2 - cd,
            ],
        )
    }

    /// Static compliance of mass 1, `(K^-1)_11`.
    pub fn static_compliance(&self) -> f64 {
        let det = (self.k1 + self.kc) * (self.k2 + self.kc) - self.kc * self.kc;
        (self.k2 + self.kc) / det
    }

    /// Complex force amplitude `(re, im)` on mass 1 such that
    /// `x_1 = Re(-R e^{iwt})`.
    fn force_amplitude(&self) -> (f64, f64) {
        let Self { k1, k2, kc, zeta1, zeta2, cd, omega: w, amplitude: a, .. } = *self;
        // dynamic stiffness Z = K - w^2 + i w C
        let z11 = (k1 + kc - w * w, w * (2.0 * zeta1 + cd));
        let z12 = (-kc, -w * cd);
        let z22 = (k2 + kc - w * w, w * (2.0 * zeta2 + cd));
        let det = csub(cmul(z11, z22), cmul(z12, z12));
        // H11 = z22 / det; F = -R / H11 = -R det / z22
        let q = cdiv(det, z22);
        (-a * q.0, -a * q.1)
    }

    pub fn system(&self) -> Result<SystemDefinition> {
        for (k, v) in [("k1", self.k1), ("k2", self.k2), ("omega", self.omega), ("amplitude", self.amplitude)] {
            positive(k, v)?;
        }
        for (k, v) in [("kc", self.kc), ("zeta1", self.zeta1), ("zeta2", self.zeta2), ("cd", self.cd)] {
            nonnegative(k, v)?;
        }
        restitution_param(self.r)?;
        let Self { k1, k2, kc, zeta1, zeta2, cd, omega: w, amplitude: a, r } = *self;
        let (fr, fi) = self.force_amplitude();
        let b0 = a / self.static_compliance();
        let accel = move |t: f64, z: &[f64], mu: f64, o: &mut [f64]| {
            // Re((fr + i fi) e^{iwt})
            let force = fr * (w * t).cos() - fi * (w * t).sin();
            let (x1, y1, x2, y2) = (z[0], z[1], z[2], z[3]);
            o[0] = -(k1 + kc) * x1 - (2.0 * zeta1 + cd) * y1 + kc * x2 + cd * y2 + b0 - mu + force;
            o[1] = kc * x1 + cd * y1 - (k2 + kc) * x2 - (2.0 * zeta2 + cd) * y2;
        };
        let partials = move |t: f64, _: &[f64], _: f64, p: &mut [f64]| {
            p.copy_from_slice(&[
                -w * (fr * (w * t).sin() + fi * (w * t).cos()), 0.0,
                -(k1 + kc), kc,
                -(2.0 * zeta1 + cd), cd,
                kc, -(k2 + kc),
                cd, -(2.0 * zeta2 + cd),
            ]);
        };
        Ok(SystemDefinition::new("coupled_oscillator", 2, self.period(), accel, move |_, _| r)?
            .with_partials(partials)
            .with_restitution_slope(|_, _| 0.0)
            .with_mu_range(-b0, 10.0 * b0)?)
    }
}

/// Ball bouncing on a sinusoidally vibrating table, in coordinates relative
/// to the table: `x'' = -g + (A + mu) w^2 sin wt`.
#[derive(Debug, Clone, PartialEq)]
pub struct VibratedTable {
    pub g: f64,
    pub omega: f64,
    pub amplitude: f64,
    pub r: f64,
}

impl Default for VibratedTable {
    fn default() -> Self {
        Self { g: 1.0, omega: 2.0 * PI, amplitude: 0.1, r: 0.5 }
    }
}

impl VibratedTable {
    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    pub fn system(&self) -> Result<SystemDefinition> {
        positive("g", self.g)?;
        positive("omega", self.omega)?;
        positive("amplitude", self.amplitude)?;
        restitution_param(self.r)?;
        let Self { g, omega: w, amplitude: a, r } = *self;
        Ok(SystemDefinition::new(
            "vibrated_table",
            1,
            self.period(),
            move |t, _, mu, o| o[0] = -g + (a + mu) * w * w * (w * t).sin(),
            move |_, _| r,
        )?
        .with_partials(move |t, _, mu, p| {
            p[0] = (a + mu) * w * w * w * (w * t).cos();
            p[1] = 0.0;
            p[2] = 0.0;
        })
        .with_restitution_slope(|_, _| 0.0)
        .with_mu_range(-a, 10.0 * a)?)
    }
}

/// Build a fixture from its registry name and a parameter table. Missing
/// parameters take their defaults; unknown parameter names are an error.
pub fn from_name(name: &str, params: &BTreeMap<String, f64>) -> Result<SystemDefinition> {
    let mut p = Params::new(name, params);
    let sys = match name {
        "bouncing_ball" => {
            let d = BouncingBall::default();
            BouncingBall { g: p.take("g", d.g), r: p.take("r", d.r), period: p.take("period", d.period) }.system()
        }
        "impact_oscillator" => {
            let d = ImpactOscillator::default();
            ImpactOscillator {
                k: p.take("k", d.k),
                zeta: p.take("zeta", d.zeta),
                omega: p.take("omega", d.omega),
                amplitude: p.take("amplitude", d.amplitude),
                r0: p.take("r0", d.r0),
                r_slope: p.take("r_slope", d.r_slope),
            }
            .system()
        }
        "coupled_oscillator" => {
            let d = CoupledOscillator::default();
            CoupledOscillator {
                k1: p.take("k1", d.k1),
                k2: p.take("k2", d.k2),
                kc: p.take("kc", d.kc),
                zeta1: p.take("zeta1", d.zeta1),
                zeta2: p.take("zeta2", d.zeta2),
                cd: p.take("cd", d.cd),
                omega: p.take("omega", d.omega),
                amplitude: p.take("amplitude", d.amplitude),
                r: p.take("r", d.r),
            }
            .system()
        }
        "vibrated_table" => {
            let d = VibratedTable::default();
            VibratedTable {
                g: p.take("g", d.g),
                omega: p.take("omega", d.omega),
                amplitude: p.take("amplitude", d.amplitude),
                r: p.take("r", d.r),
            }
            .system()
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown system '{other}' (known: {})",
                FIXTURE_NAMES.join(", ")
            )))
        }
    }?;
    p.finish()?;
    Ok(sys)
}

struct Params<'a> {
    name: &'a str,
    table: &'a BTreeMap<String, f64>,
    used: Vec<&'static str>,
}

impl<'a> Params<'a> {
    fn new(name: &'a str, table: &'a BTreeMap<String, f64>) -> Self {
        Self { name, table, used: Vec::new() }
    }

    fn take(&mut self, key: &'static str, default: f64) -> f64 {
        self.used.push(key);
        self.table.get(key).copied().unwrap_or(default)
    }

    fn finish(self) -> Result<()> {
        match self.table.keys().find(|k| !self.used.contains(&k.as_str())) {
            Some(k) => Err(Error::InvalidInput(format!(
                "unknown parameter '{k}' for system '{}' (expected one of: {})",
                self.name,
                self.used.join(", ")
            ))),
            None => Ok(()),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("parameter '{key}' must be positive, got {v}")))
    }
}

fn nonnegative(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("parameter '{key}' must be non-negative, got {v}")))
    }
}

fn restitution_param(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("restitution must lie in (0, 1], got {r}")))
    }
}

type C = (f64, f64);

fn cmul(a: C, b: C) -> C {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

fn csub(a: C, b: C) -> C {
    (a.0 - b.0, a.1 - b.1)
}

fn cdiv(a: C, b: C) -> C {
    let d = b.0 * b.0 + b.1 * b.1;
    ((a.0 * b.0 + a.1 * b.1) / d, (a.1 * b.0 - a.0 * b.1) / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{eval_vector_field, State};

    #[test]
    fn oscillator_free_response_solves_the_ode() {
        let fx = ImpactOscillator::default();
        let sys = fx.system().unwrap();
        for &t in &[0.0, 0.3, 1.1, 2.0] {
            let z = fx.free_response(t, 0.3);
            let v = eval_vector_field(&sys, &State::new(t, z.as_slice().to_vec()), 0.3).unwrap();
            let w = fx.omega;
            let acc = fx.amplitude * w * w * (w * t).cos();
            assert!((v[0] - z[1]).abs() < 1e-14);
            assert!((v[1] - acc).abs() < 1e-12, "{} vs {}", v[1], acc);
        }
    }

    #[test]
    fn coupled_free_response_of_mass_one() {
        // integrate the linear response in closed form: the particular solution
        // for x1 must equal R - mu h - R cos wt
        let fx = CoupledOscillator::default();
        let (fr, fi) = fx.force_amplitude();
        let w = fx.omega;
        // solve Z X = (F, 0) for the complex amplitudes X
        let z11 = (fx.k1 + fx.kc - w * w, w * (2.0 * fx.zeta1 + fx.cd));
        let z12 = (-fx.kc, -w * fx.cd);
        let z22 = (fx.k2 + fx.kc - w * w, w * (2.0 * fx.zeta2 + fx.cd));
        let det = csub(cmul(z11, z22), cmul(z12, z12));
        let x1 = cdiv(cmul(z22, (fr, fi)), det);
        assert!((x1.0 + fx.amplitude).abs() < 1e-12);
        assert!(x1.1.abs() < 1e-12);
    }

    #[test]
    fn periodic_in_time() {
        let names = ["impact_oscillator", "coupled_oscillator", "vibrated_table"];
        for name in names {
            let sys = from_name(name, &BTreeMap::new()).unwrap();
            let z: Vec<f64> = (0..sys.dim()).map(|i| 0.1 * i as f64 - 0.05).collect();
            let mut a = vec![0.0; sys.dof()];
            let mut b = vec![0.0; sys.dof()];
            sys.accel(0.37, &z, 0.2, &mut a).unwrap();
            sys.accel(0.37 + sys.period(), &z, 0.2, &mut b).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-10 * (1.0 + p.abs()));
            }
        }
    }

    #[test]
    fn unknown_parameter_is_named() {
        let mut p = BTreeMap::new();
        p.insert("omgea".to_string(), 2.0);
        let err = from_name("impact_oscillator", &p).unwrap_err().to_string();
        assert!(err.contains("omgea"), "{err}");
        assert!(from_name("pendulum", &BTreeMap::new()).is_err());
    }

    #[test]
    fn restitution_parameter_validated() {
        let mut p = BTreeMap::new();
        p.insert("r".to_string(), 1.2);
        assert!(from_name("bouncing_ball", &p).is_err());
    }
}
