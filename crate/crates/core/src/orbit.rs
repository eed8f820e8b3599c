//! Periodic orbits as fixed points of the stroboscopic map: Newton shooting,
//! natural-parameter continuation, and location of the grazing parameter.

use std::io::Write;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{run, IntegratorOptions, RunConfig, Trajectory};
use crate::model::{eval_vector_field, State, SystemDefinition};
use crate::numeric::{brent, eigenvalues};
use crate::report::{matrix_rows, vector};
use crate::variational::{map_jacobian_with, poincare_jacobian};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrbitOptions {
    pub integrator: IntegratorOptions,
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Newton tolerance accepted for solves very close to grazing, where the
    /// Jacobian conditioning degrades like `1/Y_0`.
    pub widened_newton_tol: f64,
    /// First parameter step; defaults to a tenth of the requested range.
    pub initial_step: Option<f64>,
    pub min_step: f64,
    pub max_mu_step: f64,
    /// Continuation stops (and grazing detection starts) once the smallest
    /// approach speed falls below this.
    pub y0_stop: f64,
    /// Largest allowed relative drop of `Y_0` per continuation step.
    pub max_y0_drop: f64,
    pub max_samples: usize,
    /// Target for `|min x_1|` of the grazing orbit.
    pub tangency_tol: f64,
}

impl Default for OrbitOptions {
    fn default() -> Self {
        Self {
            integrator: IntegratorOptions::default(),
            newton_tol: 1e-10,
            max_newton: 25,
            widened_newton_tol: 1e-8,
            initial_step: None,
            min_step: 1e-12,
            max_mu_step: 0.1,
            y0_stop: 1e-3,
            max_y0_drop: 0.5,
            max_samples: 400,
            tangency_tol: 1e-11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImpactSample {
    pub tau: f64,
    pub y: f64,
}

/// Fixed point `z*` of `S_{mu,theta}` with its impact data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodicOrbit {
    pub mu: f64,
    pub theta: f64,
    #[serde(serialize_with = "vector")]
    pub z_star: DVector<f64>,
    pub impacts: Vec<ImpactSample>,
    /// Impacts over one period (the count `N + 1` near grazing).
    pub n_impacts: usize,
    /// `|S(z*) - z*|` from a fresh simulation at the returned point.
    pub residual: f64,
    #[serde(serialize_with = "matrix_rows")]
    pub jacobian: DMatrix<f64>,
    pub iterations: usize,
}

impl PeriodicOrbit {
    /// Smallest approach speed over the period.
    pub fn y0(&self) -> Option<f64> {
        self.impacts.iter().map(|i| i.y).min_by(f64::total_cmp)
    }

    /// Impact with the smallest approach speed.
    pub fn grazing_impact(&self) -> Option<ImpactSample> {
        self.impacts.iter().copied().min_by(|a, b| a.y.total_cmp(&b.y))
    }

    pub fn spectral_radius(&self) -> f64 {
        eigenvalues(&self.jacobian).first().map_or(0.0, |l| l.norm())
    }
}

/// Where the family touches the wall tangentially.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrazingRecord {
    pub mu_star: f64,
    /// Grazing instant in the original time axis.
    pub tau0: f64,
    /// Grazing instant after shifting the time origin to the tangency (always 0).
    pub tau0_normalized: f64,
    /// Tangential state `z_bar` at the tangency.
    pub zbar0: Vec<f64>,
    /// Full state at the tangency.
    pub z_graze: Vec<f64>,
    /// Section point (time `-theta`) of the grazing orbit.
    pub z_section: Vec<f64>,
    /// `f_1` at the tangency; must be positive.
    pub phi0: f64,
    /// `x_1` and `y_1` at the tangency of the re-simulated orbit.
    pub x1_residual: f64,
    pub y1_residual: f64,
    /// Secant iterations on the family, then on the tangency.
    pub secant_iterations: (usize, usize),
    /// Whether a widened Newton tolerance had to be used near grazing.
    pub widened_newton_tol: bool,
    /// Half-width of the window around the tangency in which wall contacts
    /// are suppressed when following the grazing orbit.
    pub mask_half_width: f64,
}

impl GrazingRecord {
    pub fn mask(&self) -> (f64, f64) {
        (self.tau0 - self.mask_half_width, self.tau0 + self.mask_half_width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopReason {
    ReachedEnd,
    Grazing,
    SampleBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrbitFamily {
    pub system: String,
    pub theta: f64,
    pub samples: Vec<PeriodicOrbit>,
    pub grazing: Option<GrazingRecord>,
    pub stop: Option<StopReason>,
}

impl OrbitFamily {
    /// `theta_0 = min(tau_1 - tau_0, T - (tau_N - tau_0)) / 2` from the
    /// impacts of the last sample, with `tau_0` the near-grazing impact.
    pub fn theta0(&self, period: f64) -> f64 {
        let Some(last) = self.samples.last() else { return 0.5 * period };
        let Some(g) = last.grazing_impact() else { return 0.5 * period };
        let mut rel: Vec<f64> = last
            .impacts
            .iter()
            .filter(|i| i.tau != g.tau)
            .map(|i| (i.tau - g.tau).rem_euclid(period))
            .collect();
        if rel.is_empty() {
            return 0.5 * period;
        }
        rel.sort_by(f64::total_cmp);
        0.5 * rel[0].min(period - rel[rel.len() - 1])
    }

    /// Samples strictly before grazing with decreasing `Y_0`, in family order.
    pub fn pre_grazing(&self) -> Vec<&PeriodicOrbit> {
        self.samples.iter().filter(|s| s.y0().is_some()).collect()
    }

    /// CSV with columns `mu, tau_1, Y_1, ..., tau_m, Y_m, spectral_radius`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = self.samples.iter().map(|s| s.impacts.len()).max().unwrap_or(0);
        let mut header = vec!["mu".to_string()];
        for k in 0..m {
            header.push(format!("tau_{k}"));
            header.push(format!("Y_{k}"));
        }
        header.push("spectral_radius".into());
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            write!(w, "{:.16e}", s.mu)?;
            for k in 0..m {
                match s.impacts.get(k) {
                    Some(i) => write!(w, ",{:.16e},{:.16e}", i.tau, i.y)?,
                    None => write!(w, ",,")?,
                }
            }
            writeln!(w, ",{:.16e}", s.spectral_radius())?;
        }
        Ok(())
    }
}

struct MapEval {
    z_end: DVector<f64>,
    jac: DMatrix<f64>,
    impacts: Vec<ImpactSample>,
}

fn hybrid_eval(sys: &SystemDefinition, theta: f64, z: &DVector<f64>, mu: f64, opts: &IntegratorOptions) -> Result<MapEval> {
    let pj = poincare_jacobian(sys, theta, z, mu, opts)?;
    let impacts = pj.impacts.iter().map(|e| ImpactSample { tau: e.tau, y: e.approach_speed }).collect();
    Ok(MapEval { z_end: pj.z_end, jac: pj.d, impacts })
}

fn masked_eval(
    sys: &SystemDefinition,
    theta: f64,
    z: &DVector<f64>,
    mu: f64,
    opts: &IntegratorOptions,
    mask: (f64, f64),
) -> Result<MapEval> {
    let mj = map_jacobian_with(sys, -theta, z, sys.period() - theta, mu, opts, Some(mask))?;
    let impacts = mj.impacts.iter().map(|e| ImpactSample { tau: e.tau, y: e.approach_speed }).collect();
    Ok(MapEval { z_end: mj.z_end, jac: mj.jacobian, impacts })
}

/// Damped Newton on `S(z) - z`. The impact count of the first iterate is
/// the reference unless `expected` is given.
fn newton<F>(mut eval: F, z0: &DVector<f64>, tol: f64, max_iter: usize, expected: Option<usize>) -> Result<(DVector<f64>, MapEval, usize)>
where
    F: FnMut(&DVector<f64>) -> Result<MapEval>,
{
    let mut z = z0.clone();
    let mut cur = eval(&z)?;
    let expected = expected.unwrap_or(cur.impacts.len());
    let check = |m: &MapEval, z: &DVector<f64>| -> Result<()> {
        if m.impacts.len() != expected {
            return Err(Error::StructuralChange { expected, found: m.impacts.len(), iterate: z.as_slice().to_vec() });
        }
        Ok(())
    };
    check(&cur, &z)?;
    let mut res = (&cur.z_end - &z).norm();
    for it in 0..max_iter {
        if res <= tol {
            return Ok((z, cur, it));
        }
        let n = z.len();
        let lhs = &cur.jac - DMatrix::<f64>::identity(n, n);
        let rhs = &z - &cur.z_end;
        let delta = lhs.lu().solve(&rhs).ok_or(Error::NewtonFailure { iterations: it, residual: res })?;
        let mut lambda = 1.0;
        let mut accepted = None;
        let mut last_err = None;
        for _ in 0..8 {
            let trial = &z + &delta * lambda;
            match eval(&trial) {
                Ok(m) => {
                    let r = (&m.z_end - &trial).norm();
                    if m.impacts.len() == expected && (r < res || r <= tol) {
                        accepted = Some((trial, m, r));
                        break;
                    }
                    if m.impacts.len() != expected {
                        last_err = Some(Error::StructuralChange {
                            expected,
                            found: m.impacts.len(),
                            iterate: trial.as_slice().to_vec(),
                        });
                    }
                }
                Err(e) => last_err = Some(e),
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((zn, m, r)) => {
                z = zn;
                cur = m;
                res = r;
            }
            None => {
                return Err(last_err.unwrap_or(Error::NewtonFailure { iterations: it + 1, residual: res }));
            }
        }
    }
    if res <= tol {
        return Ok((z, cur, max_iter));
    }
    Err(Error::NewtonFailure { iterations: max_iter, residual: res })
}

fn orbit_from(mu: f64, theta: f64, z: DVector<f64>, m: MapEval, iterations: usize) -> PeriodicOrbit {
    let residual = (&m.z_end - &z).norm();
    PeriodicOrbit {
        mu,
        theta,
        z_star: z,
        n_impacts: m.impacts.len(),
        impacts: m.impacts,
        residual,
        jacobian: m.jac,
        iterations,
    }
}

/// Newton shooting for a fixed point of `S_{mu,theta}` starting at `z_guess`.
pub fn find_periodic(
    sys: &SystemDefinition,
    theta: f64,
    mu: f64,
    z_guess: &DVector<f64>,
    opts: &OrbitOptions,
) -> Result<PeriodicOrbit> {
    find_periodic_with(sys, theta, mu, z_guess, opts, opts.newton_tol, None)
}

fn find_periodic_with(
    sys: &SystemDefinition,
    theta: f64,
    mu: f64,
    z_guess: &DVector<f64>,
    opts: &OrbitOptions,
    tol: f64,
    expected: Option<usize>,
) -> Result<PeriodicOrbit> {
    sys.check_mu(mu)?;
    let eval = |z: &DVector<f64>| hybrid_eval(sys, theta, z, mu, &opts.integrator);
    let (z, m, it) = newton(eval, z_guess, tol, opts.max_newton, expected)?;
    Ok(orbit_from(mu, theta, z, m, it))
}

/// Fixed point of the map that ignores wall contacts inside `mask`.
pub fn find_masked_periodic(
    sys: &SystemDefinition,
    theta: f64,
    mu: f64,
    z_guess: &DVector<f64>,
    mask: (f64, f64),
    opts: &OrbitOptions,
) -> Result<PeriodicOrbit> {
    let eval = |z: &DVector<f64>| masked_eval(sys, theta, z, mu, &opts.integrator, mask);
    let (z, m, it) = newton(eval, z_guess, opts.newton_tol, opts.max_newton, None)?;
    Ok(orbit_from(mu, theta, z, m, it))
}

/// Natural-parameter continuation of the family through `orbit0` from its
/// parameter toward `mu_end`. Stops at `mu_end` or when the smallest
/// approach speed falls below `y0_stop`, in which case grazing is located.
pub fn continue_family(
    sys: &SystemDefinition,
    theta: f64,
    mu_end: f64,
    orbit0: PeriodicOrbit,
    opts: &OrbitOptions,
) -> Result<OrbitFamily> {
    sys.check_mu(mu_end)?;
    let mu_start = orbit0.mu;
    let dir = if mu_end >= mu_start { 1.0 } else { -1.0 };
    let mut step = opts.initial_step.unwrap_or(0.1 * (mu_end - mu_start).abs()).min(opts.max_mu_step);
    let expected = orbit0.n_impacts;
    let mut fam = OrbitFamily { system: sys.name().to_string(), theta, samples: vec![orbit0], grazing: None, stop: None };
    let mut structural = false;
    loop {
        let last = fam.samples.last().expect("non-empty family");
        if (mu_end - last.mu) * dir <= 0.0 {
            fam.stop = Some(StopReason::ReachedEnd);
            break;
        }
        if last.y0().is_some_and(|y| y <= opts.y0_stop) {
            fam.stop = Some(StopReason::Grazing);
            break;
        }
        if fam.samples.len() >= opts.max_samples {
            fam.stop = Some(StopReason::SampleBudget);
            break;
        }
        let mut h = step.min((mu_end - last.mu).abs());
        let prev = fam.samples.len().checked_sub(2).map(|i| &fam.samples[i]);
        if let (Some(p), Some(y1), Some(y0p)) = (prev, last.y0(), prev.and_then(|p| p.y0())) {
            let slope = (y1 - y0p) / (last.mu - p.mu);
            if slope * dir < 0.0 {
                h = h.min(opts.max_y0_drop * y1 / slope.abs());
            }
        }
        let mu_new = last.mu + dir * h;
        let guess = match prev {
            Some(p) => &last.z_star + (&last.z_star - &p.z_star) * (h / (last.mu - p.mu).abs()),
            None => last.z_star.clone(),
        };
        match find_periodic_with(sys, theta, mu_new, &guess, opts, opts.newton_tol, Some(expected)) {
            Ok(orb) => {
                debug!("family sample mu = {mu_new:.6e}, Y0 = {:?}, iterations {}", orb.y0(), orb.iterations);
                if orb.iterations <= 3 {
                    step = (2.0 * h).min(opts.max_mu_step);
                } else {
                    step = h;
                }
                fam.samples.push(orb);
            }
            Err(e) => {
                debug!("continuation step to mu = {mu_new:.6e} failed: {e}");
                structural |= matches!(e, Error::StructuralChange { .. });
                step = 0.5 * h;
                if step < opts.min_step {
                    let last = fam.samples.last().expect("non-empty family");
                    let y0 = last.y0().unwrap_or(0.0);
                    if structural && y0 > 10.0 * opts.y0_stop {
                        return Err(Error::Bifurcation { mu: last.mu, from: expected, to: expected + 1, y0 });
                    }
                    return Err(Error::ContinuationStall { mu: last.mu, step, partial: Box::new(fam) });
                }
            }
        }
    }
    if fam.stop == Some(StopReason::Grazing) {
        let rec = detect_grazing(sys, &fam, opts)?;
        info!("grazing at mu* = {:.12e}, phi0 = {:.6e}", rec.mu_star, rec.phi0);
        fam.grazing = Some(rec);
    }
    Ok(fam)
}

/// Secant iteration for a root of `f` from two starting points. Stops when
/// `|f| <= ftol` or the step falls below `xtol`.
pub fn secant_root<F>(mut f: F, x0: f64, x1: f64, ftol: f64, xtol: f64, max_iter: usize) -> Result<(f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut xa, mut xb) = (x0, x1);
    let mut fa = f(xa)?;
    let mut fb = f(xb)?;
    for it in 0..max_iter {
        if fb.abs() <= ftol {
            return Ok((xb, it));
        }
        if fb == fa {
            return Err(Error::NoGrazing(format!("secant stalled with equal values at {xa} and {xb}")));
        }
        let xc = xb - fb * (xb - xa) / (fb - fa);
        if !xc.is_finite() {
            return Err(Error::NoGrazing("secant iterate is not finite".into()));
        }
        xa = xb;
        fa = fb;
        xb = xc;
        fb = f(xb)?;
        if (xb - xa).abs() <= xtol {
            return Ok((xb, it + 1));
        }
    }
    if fb.abs() <= ftol {
        Ok((xb, max_iter))
    } else {
        Err(Error::NoGrazing(format!("secant did not converge (|f| = {:e})", fb.abs())))
    }
}

/// Minimum of `x_1` inside `window` along a recorded trajectory:
/// `(time, state)` of the deepest local minimum.
fn x1_minimum(traj: &Trajectory, window: (f64, f64)) -> Option<(f64, DVector<f64>)> {
    let mut best: Option<(f64, DVector<f64>)> = None;
    for seg in &traj.segments {
        for step in &seg.steps {
            if step.t1 < window.0 || step.t0 > window.1 {
                continue;
            }
            let (ya, yb) = (step.start()[1], step.end()[1]);
            if !(ya <= 0.0 && yb > 0.0) {
                continue;
            }
            let Ok(tm) = brent(|t| Ok(step.component(1, t)), step.t0, step.t1, 1e-15, 200) else { continue };
            let z = step.eval(tm);
            if best.as_ref().is_none_or(|(_, zb)| z[0] < zb[0]) {
                best = Some((tm, z));
            }
        }
    }
    best
}

/// Grazing orbit at `mu`: masked fixed point plus its tangency point.
fn tangency(
    sys: &SystemDefinition,
    theta: f64,
    mu: f64,
    guess: &DVector<f64>,
    mask: (f64, f64),
    opts: &OrbitOptions,
) -> Result<(PeriodicOrbit, f64, DVector<f64>)> {
    let orb = find_masked_periodic(sys, theta, mu, guess, mask, opts)?;
    let cfg = RunConfig { record: true, mask: Some(mask), ..RunConfig::plain() };
    let out = run(sys, -theta, orb.z_star.as_slice(), sys.period() - theta, mu, &opts.integrator, cfg)
        .map_err(|(e, _)| e)?;
    let (tm, z) = x1_minimum(&out.traj, mask)
        .ok_or_else(|| Error::NoGrazing(format!("no minimum of x1 inside [{}, {}] at mu = {mu}", mask.0, mask.1)))?;
    Ok((orb, tm, z))
}

/// Locates the grazing parameter from the tail of a family whose smallest
/// approach speed decreases toward zero.
///
/// A secant iteration on `mu -> Y_0(mu)` over fresh periodic solves brings
/// `mu` to within the grazing tolerance; the estimate is then polished by a
/// secant iteration on the minimum of `x_1` along the orbit followed with the
/// grazing contact suppressed, which is smooth in `mu` and vanishes exactly at
/// tangency.
pub fn detect_grazing(sys: &SystemDefinition, family: &OrbitFamily, opts: &OrbitOptions) -> Result<GrazingRecord> {
    let n = family.samples.len();
    if n < 2 {
        return Err(Error::NoGrazing("need at least two family samples".into()));
    }
    let (a, b) = (&family.samples[n - 2], &family.samples[n - 1]);
    let (Some(ya), Some(yb)) = (a.y0(), b.y0()) else {
        return Err(Error::NoGrazing("family samples have no impacts".into()));
    };
    if !(yb < ya) {
        return Err(Error::NoGrazing(format!("Y0 does not decrease along the family ({ya:e} -> {yb:e})")));
    }
    let theta = family.theta;
    let period = sys.period();
    let graze_tol = opts.integrator.graze_tol;

    // stage 1: secant on Y0(mu) with fresh hybrid solves
    let (mut mua, mut ya, mut mub, mut yb) = (a.mu, ya, b.mu, yb);
    let mut zb = b.z_star.clone();
    let mut za = a.z_star.clone();
    let mut widened = false;
    let mut it1 = 0;
    while yb > 100.0 * graze_tol && it1 < 30 {
        it1 += 1;
        let muc = mub - yb * (mub - mua) / (yb - ya);
        // aim at a tenth of the current Y0 rather than at the root itself
        let target = mub + 0.9 * (muc - mub);
        let guess = &zb + (&zb - &za) * ((target - mub) / (mub - mua));
        let tol = if yb < opts.y0_stop { opts.widened_newton_tol } else { opts.newton_tol };
        match find_periodic_with(sys, theta, target, &guess, opts, tol, Some(b.n_impacts)) {
            Ok(orb) if orb.y0().is_some_and(|y| y < yb) => {
                widened |= tol > opts.newton_tol;
                mua = mub;
                ya = yb;
                za = zb;
                mub = target;
                yb = orb.y0().unwrap_or(0.0);
                zb = orb.z_star;
            }
            Ok(_) => break,
            Err(e) => {
                debug!("grazing secant solve at mu = {target:e} failed: {e}; keeping the secant estimate");
                break;
            }
        }
    }
    let mu_star = mub - yb * (mub - mua) / (yb - ya);

    // stage 2: tangency of the orbit followed through the grazing window
    let theta0 = family.theta0(period);
    let tau_g = b.grazing_impact().map_or(0.0, |g| g.tau);
    let half = 0.5 * theta0;
    let mask = (tau_g - half, tau_g + half);
    let mut z_guess = zb.clone();
    let mut last: Option<(PeriodicOrbit, f64, DVector<f64>)> = None;
    let h = |mu: f64, z_guess: &mut DVector<f64>, last: &mut Option<(PeriodicOrbit, f64, DVector<f64>)>| -> Result<f64> {
        let (orb, tm, z) = tangency(sys, theta, mu, z_guess, mask, opts)?;
        *z_guess = orb.z_star.clone();
        let x = z[0];
        *last = Some((orb, tm, z));
        Ok(x)
    };
    let step = (mub - mu_star).abs().max(1e-6 * mu_star.abs().max(1.0));
    let (mu_star, it2) = secant_root(
        |mu| h(mu, &mut z_guess, &mut last),
        mu_star + step,
        mu_star,
        opts.tangency_tol,
        1e-15 * mu_star.abs().max(1.0),
        40,
    )?;
    // make sure the stored orbit belongs to the returned parameter
    let x_final = h(mu_star, &mut z_guess, &mut last)?;
    let (orb, tm, z) = last.expect("tangency evaluated");
    let mut zp = z.clone();
    zp[0] = 0.0;
    zp[1] = 0.0;
    let field = eval_vector_field(sys, &State::new(tm, zp.as_slice().to_vec()), mu_star)?;
    let phi0 = field[1];
    if !(phi0 > 0.0) {
        return Err(Error::DegenerateGrazing { phi0 });
    }
    Ok(GrazingRecord {
        mu_star,
        tau0: tm,
        tau0_normalized: 0.0,
        zbar0: z.as_slice()[2..].to_vec(),
        z_graze: z.as_slice().to_vec(),
        z_section: orb.z_star.as_slice().to_vec(),
        phi0,
        x1_residual: x_final,
        y1_residual: z[1],
        secant_iterations: (it1, it2),
        widened_newton_tol: widened,
        mask_half_width: half,
    })
}
