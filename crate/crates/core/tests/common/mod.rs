//! Shared oracles and fixture setups for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use vibro::fixtures::{CoupledOscillator, ImpactOscillator};
use vibro::integrator::iterate_map;
use vibro::orbit::{continue_family, find_periodic, OrbitFamily, OrbitOptions, PeriodicOrbit};
use vibro::{IntegratorOptions, SystemDefinition};

/// Integrator settings for finite-difference oracles.
pub fn tight() -> IntegratorOptions {
    IntegratorOptions { rel_tol: 1e-13, abs_tol: 1e-15, tol_event: 1e-13, ..Default::default() }
}

/// Central finite-difference Jacobian of `f` at `z` with step `h (1 + |z_j|)`.
pub fn fd_jacobian<F>(f: F, z: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = z.len();
    let mut j = DMatrix::zeros(f(z).len(), d);
    for c in 0..d {
        let step = h * (1.0 + z[c].abs());
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[c] += step;
        zm[c] -= step;
        let col = (f(&zp) - f(&zm)) / (2.0 * step);
        j.set_column(c, &col);
    }
    j
}

/// `exp(M)` by scaling and squaring with a Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.abs().row_sum().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = m / 2f64.powi(s);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..30 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Classical RK4 for the wall-free field `x' = y, y' = f`, fixed step count.
/// Negative spans integrate backward.
pub fn rk4(sys: &SystemDefinition, t0: f64, z0: &[f64], t1: f64, mu: f64, steps: usize) -> Vec<f64> {
    let n = sys.dof();
    let field = |t: f64, z: &[f64]| {
        let mut f = vec![0.0; n];
        sys.accel(t, z, mu, &mut f).unwrap();
        let mut out = vec![0.0; 2 * n];
        for k in 0..n {
            out[2 * k] = z[2 * k + 1];
            out[2 * k + 1] = f[k];
        }
        out
    };
    let h = (t1 - t0) / steps as f64;
    let mut z = z0.to_vec();
    let mut t = t0;
    let axpy = |z: &[f64], k: &[f64], a: f64| z.iter().zip(k).map(|(x, y)| x + a * y).collect::<Vec<_>>();
    for _ in 0..steps {
        let k1 = field(t, &z);
        let k2 = field(t + 0.5 * h, &axpy(&z, &k1, 0.5 * h));
        let k3 = field(t + 0.5 * h, &axpy(&z, &k2, 0.5 * h));
        let k4 = field(t + h, &axpy(&z, &k3, h));
        for i in 0..z.len() {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
    }
    z
}

/// Value at zero of the polynomial through `(xs, ys)` (Neville).
pub fn neville0(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let n = xs.len();
    for k in 1..n {
        for i in (k..n).rev() {
            p[i] = (xs[i] * p[i - 1] - xs[i - k] * p[i]) / (xs[i] - xs[i - k]);
        }
    }
    p[n - 1]
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

/// The one-degree-of-freedom oscillator with its section at a quarter period.
pub fn oscillator() -> (SystemDefinition, f64) {
    let sys = ImpactOscillator::default().system().unwrap();
    let theta = sys.period() / 4.0;
    (sys, theta)
}

/// Periodic orbit at `mu` reached from a long transient at `mu_settle`.
pub fn settled_orbit(sys: &SystemDefinition, theta: f64, mu_settle: f64, z0: Vec<f64>) -> PeriodicOrbit {
    let opts = OrbitOptions::default();
    let z = iterate_map(sys, theta, &DVector::from_vec(z0), mu_settle, 300, &opts.integrator).unwrap();
    find_periodic(sys, theta, mu_settle, &z, &opts).unwrap()
}

/// Family of the 1-DOF oscillator from `mu = 1` down to grazing.
pub fn oscillator_family() -> (SystemDefinition, OrbitFamily) {
    let (sys, theta) = oscillator();
    let orb = settled_orbit(&sys, theta, 1.0, vec![0.5, 0.0]);
    let fam = continue_family(&sys, theta, 0.0, orb, &OrbitOptions::default()).unwrap();
    (sys, fam)
}

/// Family of the 2-DOF oscillator from `mu = 0.5` down to grazing.
pub fn coupled_family() -> (SystemDefinition, OrbitFamily) {
    let sys = CoupledOscillator::default().system().unwrap();
    let theta = sys.period() / 4.0;
    let orb = settled_orbit(&sys, theta, 0.5, vec![0.5, 0.0, 0.0, 0.0]);
    let fam = continue_family(&sys, theta, 0.0, orb, &OrbitOptions::default()).unwrap();
    (sys, fam)
}

/// Fixed point of the 1-DOF oscillator at `mu`, continued from `mu = 1`.
pub fn oscillator_orbit(mu: f64) -> (SystemDefinition, PeriodicOrbit) {
    let (sys, theta) = oscillator();
    let orb = settled_orbit(&sys, theta, 1.0, vec![0.5, 0.0]);
    if mu == 1.0 {
        return (sys, orb);
    }
    let opts = OrbitOptions { y0_stop: 1e-6, ..Default::default() };
    let fam = continue_family(&sys, theta, mu, orb, &opts).unwrap();
    let last = fam.samples.last().unwrap().clone();
    assert!((last.mu - mu).abs() < 1e-12);
    (sys, last)
}
