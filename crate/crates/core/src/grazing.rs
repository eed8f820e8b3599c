//! Analysis of a family at its grazing parameter: the limit Jacobian `A` of
//! the grazing orbit between the two sides of the tangency, the reduced
//! matrices built from it, the sign and hyperbolicity conditions for chaotic
//! dynamics past grazing, eigenvalue asymptotics of the stroboscopic
//! Jacobian, and a sampled fit of the surface of tangentially touching
//! initial states.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{map_between, run, IntegratorOptions, Reversed, RunConfig, DenseStep};
use crate::model::{State, SystemDefinition};
use crate::numeric::{
    brent, eigenvalues, extrapolate_matrices, extrapolate_to_zero, hyperbolicity_margin, line_angle,
    linear_fit, real_eigenvector,
};
use crate::orbit::{GrazingRecord, OrbitFamily, OrbitOptions, PeriodicOrbit};
use crate::report::{matrix_rows, opt_matrix_rows};
use crate::variational::{map_jacobian, map_jacobian_with};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaSpec {
    /// Largest `|y_1|` sampled on each side of zero.
    pub y1_max: f64,
    /// Samples per side.
    pub y1_count: usize,
    /// Offsets added to the tangential components of the section point.
    /// Empty means the section point itself.
    pub zbar_offsets: Vec<Vec<f64>>,
    /// Half-width of the time window searched for a tangency; defaults to `T/4`.
    pub window: Option<f64>,
}

impl Default for GammaSpec {
    fn default() -> Self {
        Self { y1_max: 0.01, y1_count: 8, zbar_offsets: Vec::new(), window: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrazingOptions {
    pub orbit: OrbitOptions,
    /// Section offsets for the limit `theta -> 0`; defaults to
    /// `theta_0 / 4, ..., theta_0 / 64`.
    pub theta_seq: Option<Vec<f64>>,
    /// Smallest-`Y_0` family samples used for the limit `Y_0 -> 0`.
    pub y0_samples: usize,
    /// Bound on the extrapolation error of `A`, relative to `|A|`.
    pub extrapolation_tol: f64,
    /// Spectra closer than this to the unit circle are inconclusive.
    pub hyperbolic_margin: f64,
    /// Pivots `a_12`, `alpha_12` below this make the reduced matrix undefined.
    pub pivot_tol: f64,
    /// Section offset for the eigenvectors of `D`; defaults to the smallest
    /// admissible theta.
    pub spectral_theta: Option<f64>,
    /// Family samples (smallest `Y_0` first) examined for the spectra.
    pub spectral_samples: usize,
    /// Samples entering the slope fits.
    pub fit_samples: usize,
    /// Relative gap below which the extreme eigenvalues cannot be paired.
    pub pairing_tol: f64,
    pub robustness_trials: usize,
    /// Perturbation radius relative to `|A|`.
    pub robustness_eps: f64,
    pub robustness_samples: usize,
    pub seed: u64,
    pub gamma: GammaSpec,
}

impl Default for GrazingOptions {
    fn default() -> Self {
        Self {
            orbit: OrbitOptions::default(),
            theta_seq: None,
            y0_samples: 3,
            extrapolation_tol: 1e-3,
            hyperbolic_margin: 1e-6,
            pivot_tol: 1e-12,
            spectral_theta: None,
            spectral_samples: 8,
            fit_samples: 5,
            pairing_tol: 0.01,
            robustness_trials: 100,
            robustness_eps: 0.01,
            robustness_samples: 3,
            seed: 0x5eed,
            gamma: GammaSpec::default(),
        }
    }
}

/// The limit Jacobian `A`, its inverse and reduced matrices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrazingMatrices {
    #[serde(rename = "A", serialize_with = "matrix_rows")]
    pub a: DMatrix<f64>,
    #[serde(rename = "A_inv", serialize_with = "matrix_rows")]
    pub a_inv: DMatrix<f64>,
    pub delta0: f64,
    #[serde(rename = "A_bar", serialize_with = "opt_matrix_rows")]
    pub a_bar: Option<DMatrix<f64>>,
    #[serde(rename = "A_cal_bar", serialize_with = "opt_matrix_rows")]
    pub a_cal_bar: Option<DMatrix<f64>>,
    pub reduced_notes: Vec<String>,
    pub theta_sequence: Vec<f64>,
    pub sample_mu: Vec<f64>,
    pub sample_y0: Vec<f64>,
    /// Largest entrywise error estimate of the limit in theta.
    pub theta_error: f64,
    /// Entrywise error estimate of the limit in `Y_0`.
    pub y0_error: f64,
    /// `|A_theta_k - A_theta_{k+1}|` at the smallest-`Y_0` sample.
    pub successive_differences: Vec<f64>,
    /// Whether those differences decrease.
    pub monotone: bool,
    /// `A` computed directly along the grazing orbit with the tangency
    /// contact suppressed.
    #[serde(serialize_with = "opt_matrix_rows")]
    pub direct: Option<DMatrix<f64>>,
    /// `max |A - direct|`.
    pub direct_difference: Option<f64>,
}

impl GrazingMatrices {
    pub fn dof(&self) -> usize {
        self.a.nrows() / 2
    }
}

/// Reduced matrix `X_bar[i][j] = -x[0][j+2] x[i+2][1] / x[0][1] + x[i+2][j+2]`
/// (zero-based). `None` for one degree of freedom.
pub fn reduced_matrix(x: &DMatrix<f64>, pivot_tol: f64) -> Result<Option<DMatrix<f64>>> {
    let d = x.nrows();
    if d < 2 || d % 2 != 0 || x.ncols() != d {
        return Err(Error::InvalidInput(format!("expected an even square matrix, got {}x{}", d, x.ncols())));
    }
    if d == 2 {
        return Ok(None);
    }
    let p = x[(0, 1)];
    if p.abs() <= pivot_tol {
        return Err(Error::Undefined(format!("pivot x12 = {p:e} vanishes")));
    }
    let m = d - 2;
    Ok(Some(DMatrix::from_fn(m, m, |i, j| -x[(0, j + 2)] * x[(i + 2, 1)] / p + x[(i + 2, j + 2)])))
}

/// Fills `A_bar` and `A_cal_bar`; an undefined one is left absent with a note.
pub fn reduced_matrices(mut g: GrazingMatrices, pivot_tol: f64) -> GrazingMatrices {
    g.reduced_notes.clear();
    g.a_bar = match reduced_matrix(&g.a, pivot_tol) {
        Ok(m) => m,
        Err(e) => {
            g.reduced_notes.push(format!("A_bar: {e}"));
            None
        }
    };
    g.a_cal_bar = match reduced_matrix(&g.a_inv, pivot_tol) {
        Ok(m) => m,
        Err(e) => {
            g.reduced_notes.push(format!("A_cal_bar: {e}"));
            None
        }
    };
    g
}

fn shift_into(t: f64, start: f64, period: f64) -> f64 {
    let k = ((t - start) / period).floor();
    let mut s = t - k * period;
    if s <= start {
        s += period;
    }
    s
}

/// Distance between two instants modulo the period.
fn phase_gap(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

/// State of the periodic orbit at time `t`, and `t` shifted into the first
/// period after the family section.
fn transport(
    sys: &SystemDefinition,
    family_theta: f64,
    orbit: &PeriodicOrbit,
    t: f64,
    opts: &IntegratorOptions,
) -> Result<(f64, DVector<f64>)> {
    let t0 = -family_theta;
    let ts = shift_into(t, t0, sys.period());
    let z = map_between(sys, t0, &orbit.z_star, ts, orbit.mu, opts)?;
    Ok((ts, z))
}

/// Jacobian of the orbit from `tau0 + theta` to `tau0 + T - theta`, which
/// skips the near-grazing impact but includes the other `n_other`.
fn window_jacobian(
    sys: &SystemDefinition,
    family_theta: f64,
    orbit: &PeriodicOrbit,
    tau0: f64,
    theta: f64,
    n_other: usize,
    opts: &IntegratorOptions,
) -> Result<DMatrix<f64>> {
    let (ts, z) = transport(sys, family_theta, orbit, tau0 + theta, opts)?;
    let mj = map_jacobian(sys, ts, &z, ts + sys.period() - 2.0 * theta, orbit.mu, opts)?;
    if mj.impacts.len() != n_other {
        return Err(Error::NotTransversal {
            t: ts,
            what: format!("expected {n_other} impacts away from the grazing window, found {}", mj.impacts.len()),
        });
    }
    Ok(mj.jacobian)
}

/// `A` along the grazing orbit itself, with the tangency contact masked:
/// two half-period legs ending and starting at the tangency.
fn direct_limit(sys: &SystemDefinition, rec: &GrazingRecord, opts: &IntegratorOptions) -> Result<DMatrix<f64>> {
    let half = 0.5 * sys.period();
    let z = DVector::from_column_slice(&rec.z_graze);
    let mask = Some(rec.mask());
    let first = map_jacobian_with(sys, rec.tau0, &z, rec.tau0 + half, rec.mu_star, opts, mask)?;
    let second = map_jacobian_with(sys, rec.tau0 - half, &first.z_end, rec.tau0, rec.mu_star, opts, mask)?;
    Ok(second.jacobian * first.jacobian)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Pre-grazing samples ordered by increasing `Y_0`.
fn by_y0(family: &OrbitFamily) -> Vec<&PeriodicOrbit> {
    let mut s = family.pre_grazing();
    s.sort_by(|a, b| a.y0().unwrap_or(f64::INFINITY).total_cmp(&b.y0().unwrap_or(f64::INFINITY)));
    s
}

fn grazing_record(family: &OrbitFamily) -> Result<&GrazingRecord> {
    family.grazing.as_ref().ok_or_else(|| Error::NoGrazing("family has no grazing record".into()))
}

/// Admissible section offsets: inside `(0, theta_0)` and wider than the
/// distance of every used sample's near-grazing impact from `tau0`.
fn admissible_thetas(seq: &[f64], theta0: f64, gaps: &[f64]) -> Vec<f64> {
    let widest = gaps.iter().copied().fold(0.0, f64::max);
    seq.iter().copied().filter(|&t| t > 0.0 && t < theta0 && t > 2.0 * widest).collect()
}

/// Default section offsets `theta_0 2^-k` for `k = 2..=6`.
pub fn default_theta_seq(theta0: f64) -> Vec<f64> {
    (2..=6).map(|k| theta0 / f64::from(1u32 << k)).collect()
}

/// Limit Jacobian `A` of the grazing orbit from just after to just before
/// the tangency, excluding the tangency contact itself.
///
/// For each of the smallest-`Y_0` family samples the Jacobian from
/// `tau0 + theta` to `tau0 + T - theta` is computed for every admissible
/// theta and extrapolated to `theta = 0`; the per-sample limits are then
/// extrapolated to `Y_0 = 0`. As a cross-check, `A` is also computed on the
/// grazing orbit at `mu*` with the tangency contact suppressed.
pub fn limit_matrix_a(
    sys: &SystemDefinition,
    family: &OrbitFamily,
    theta_seq: Option<&[f64]>,
    opts: &GrazingOptions,
) -> Result<GrazingMatrices> {
    let rec = grazing_record(family)?;
    let period = sys.period();
    let iopts = &opts.orbit.integrator;
    let theta0 = family.theta0(period);
    let seq = match theta_seq {
        Some(s) => s.to_vec(),
        None => opts.theta_seq.clone().unwrap_or_else(|| default_theta_seq(theta0)),
    };
    let mut samples = by_y0(family);
    samples.truncate(opts.y0_samples.max(1));
    if samples.is_empty() {
        return Err(Error::NoGrazing("family has no impacting samples".into()));
    }
    let gaps: Vec<f64> = samples
        .iter()
        .map(|s| s.grazing_impact().map_or(0.0, |g| phase_gap(g.tau, rec.tau0, period)))
        .collect();
    let thetas = admissible_thetas(&seq, theta0, &gaps);
    if thetas.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least two admissible theta values below theta0 = {theta0:e}, got {thetas:?}"
        )));
    }
    let mut limits = Vec::new();
    let mut theta_error: f64 = 0.0;
    let mut successive = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        let n_other = s.n_impacts.saturating_sub(1);
        let mats = thetas
            .iter()
            .map(|&th| window_jacobian(sys, family.theta, s, rec.tau0, th, n_other, iopts))
            .collect::<Result<Vec<_>>>()?;
        if k == 0 {
            successive = mats.windows(2).map(|w| max_abs(&(&w[1] - &w[0]))).collect();
        }
        let (lim, err) = extrapolate_matrices(&thetas, &mats);
        theta_error = theta_error.max(max_abs(&err));
        debug!("theta limit at mu = {:e}: error {:e}", s.mu, max_abs(&err));
        limits.push(lim);
    }
    let y0s: Vec<f64> = samples.iter().map(|s| s.y0().unwrap_or(0.0)).collect();
    let (a, y0_error) = if limits.len() >= 2 {
        let (a, err) = extrapolate_matrices(&y0s, &limits);
        (a, max_abs(&err))
    } else {
        (limits[0].clone(), f64::INFINITY)
    };
    let limit = opts.extrapolation_tol * a.norm();
    let spread = theta_error.max(if y0_error.is_finite() { y0_error } else { 0.0 });
    if spread > limit {
        return Err(Error::Extrapolation { spread, limit });
    }
    let a_inv = a.clone().try_inverse().ok_or_else(|| Error::Undefined("limit matrix A is singular".into()))?;
    let (direct, direct_difference) = match direct_limit(sys, rec, iopts) {
        Ok(m) => {
            let diff = max_abs(&(&m - &a));
            (Some(m), Some(diff))
        }
        Err(e) => {
            warn!("direct route to A failed: {e}");
            (None, None)
        }
    };
    let monotone = successive.windows(2).all(|w| w[1] <= w[0]);
    let g = GrazingMatrices {
        delta0: a.determinant(),
        a,
        a_inv,
        a_bar: None,
        a_cal_bar: None,
        reduced_notes: Vec::new(),
        theta_sequence: thetas,
        sample_mu: samples.iter().map(|s| s.mu).collect(),
        sample_y0: y0s,
        theta_error,
        y0_error,
        successive_differences: successive,
        monotone,
        direct,
        direct_difference,
    };
    Ok(reduced_matrices(g, opts.pivot_tol))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyperbolicity {
    /// One degree of freedom: nothing to check.
    Vacuous,
    Hyperbolic,
    /// Some eigenvalue lies within the margin of the unit circle.
    Inconclusive,
    /// The reduced matrix does not exist.
    Undefined,
}

/// One of the two mirrored conditions, on `X = A` or `X = A^-1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub hyperbolicity: Hyperbolicity,
    /// `min | |lambda| - 1 |` over the reduced matrix.
    pub margin: Option<f64>,
    /// Eigenvalues of the reduced matrix as `[re, im]`.
    pub eigenvalues: Vec<[f64; 2]>,
    pub x12: f64,
    pub ineq_x12: bool,
    /// `sum_k x_1k x_k2`.
    pub sum: f64,
    pub ineq_sum: bool,
    pub holds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// The condition holds on `A`; analyse `S`.
    Forward,
    /// It holds only on `A^-1`; analyse `S^-1`.
    Inverse,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub cond3: ConditionCheck,
    pub cond4: ConditionCheck,
    pub chosen_branch: Branch,
    /// `|sum_k a_1k a_k2 - (A^2)_12|`.
    pub square_identity_error: f64,
    /// First components of `A_2` and `(A^2)_2` have opposite signs.
    pub opposite_half_spaces: bool,
}

fn condition(x: &DMatrix<f64>, bar: &Option<DMatrix<f64>>, n: usize, tol: f64) -> ConditionCheck {
    let d = x.nrows();
    let sum: f64 = (0..d).map(|k| x[(0, k)] * x[(k, 1)]).sum();
    let x12 = x[(0, 1)];
    let (hyperbolicity, margin, eigenvalues) = match (n, bar) {
        (1, _) => (Hyperbolicity::Vacuous, None, Vec::new()),
        (_, None) => (Hyperbolicity::Undefined, None, Vec::new()),
        (_, Some(m)) => {
            let margin = hyperbolicity_margin(m);
            let ev = crate::numeric::eigenvalues(m).iter().map(|l| [l.re, l.im]).collect();
            let h = if margin > tol { Hyperbolicity::Hyperbolic } else { Hyperbolicity::Inconclusive };
            (h, Some(margin), ev)
        }
    };
    let ineq_x12 = x12 > 0.0;
    let ineq_sum = sum < 0.0;
    let holds =
        matches!(hyperbolicity, Hyperbolicity::Vacuous | Hyperbolicity::Hyperbolic) && ineq_x12 && ineq_sum;
    ConditionCheck { hyperbolicity, margin, eigenvalues, x12, ineq_x12, sum, ineq_sum, holds }
}

/// Evaluates both conditions; the forward one takes precedence.
pub fn check_conditions(g: &GrazingMatrices, margin_tol: f64) -> ConditionReport {
    let n = g.dof();
    let cond3 = condition(&g.a, &g.a_bar, n, margin_tol);
    let cond4 = condition(&g.a_inv, &g.a_cal_bar, n, margin_tol);
    let chosen_branch = if cond3.holds {
        Branch::Forward
    } else if cond4.holds {
        Branch::Inverse
    } else {
        Branch::None
    };
    let sq = &g.a * &g.a;
    ConditionReport {
        square_identity_error: (cond3.sum - sq[(0, 1)]).abs(),
        opposite_half_spaces: g.a[(0, 1)] * sq[(0, 1)] < 0.0,
        cond3,
        cond4,
        chosen_branch,
    }
}

/// Spectrum of `D` at one family sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralSample {
    pub mu: f64,
    pub y0: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub lambda_plus_pred: f64,
    pub lambda_minus_pred: f64,
    pub rel_dev_plus: f64,
    pub rel_dev_minus: f64,
    pub spectral_radius: f64,
    pub det_d: f64,
    /// `det D / (r^2 Delta_0)`.
    pub det_ratio: f64,
    /// Angles (radians) between the measured eigenvectors and `A_2`, `e_2`.
    pub angle_u_plus: f64,
    pub angle_u_minus: f64,
    /// Saltation entry `b_21` of the near-grazing impact and `b_21 Y_0`.
    pub b21: f64,
    pub b21_y: f64,
    #[serde(skip)]
    pub d: DMatrix<f64>,
    /// Jacobian across the grazing window `[tau0 - theta, tau0 + theta]`,
    /// when exactly one impact falls in it.
    #[serde(skip)]
    pub b_part: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralAsymptotics {
    /// Restitution at vanishing approach speed.
    pub r: f64,
    pub phi0: f64,
    pub a12: f64,
    pub alpha12: f64,
    pub delta0: f64,
    pub theta: f64,
    pub branch: Branch,
    pub samples: Vec<SpectralSample>,
    /// Slope of `log rho(D)` against `log Y_0` over the fit samples.
    pub loglog_slope: f64,
    pub lambda_plus_y0_limit: f64,
    pub lambda_plus_y0_error: f64,
    pub lambda_plus_y0_pred: f64,
    pub lambda_plus_deviation: f64,
    /// Slope of `lambda_+ Y_0 / pred - 1` against `Y_0`.
    pub correction_slope: f64,
    pub lambda_minus_over_y0_limit: f64,
    pub lambda_minus_over_y0_pred: f64,
    pub det_ratio_smallest: f64,
    pub b21_y_limit: f64,
    pub b21_y_pred: f64,
    pub b21_deviation: f64,
}

/// `D` at the section `tau0 - theta`, split at `tau0 + theta`.
fn section_jacobian(
    sys: &SystemDefinition,
    family_theta: f64,
    orbit: &PeriodicOrbit,
    tau0: f64,
    theta: f64,
    opts: &IntegratorOptions,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>, Vec<crate::variational::SaltationData>)> {
    let (ts, z) = transport(sys, family_theta, orbit, tau0 - theta, opts)?;
    let split = ts + 2.0 * theta;
    let first = map_jacobian(sys, ts, &z, split, orbit.mu, opts)?;
    let second = map_jacobian(sys, split, &first.z_end, ts + sys.period(), orbit.mu, opts)?;
    let d = &second.jacobian * &first.jacobian;
    let b_part = (first.impacts.len() == 1).then(|| first.jacobian.clone());
    let mut salt = first.saltations;
    salt.extend(second.saltations);
    Ok((d, b_part, salt))
}

/// Section offset used for eigenvectors: the requested one or the smallest
/// admissible theta.
pub fn analysis_theta(g: &GrazingMatrices, opts: &GrazingOptions) -> f64 {
    opts.spectral_theta.unwrap_or_else(|| g.theta_sequence.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Eigenvalue asymptotics of `D` along the family as `Y_0 -> 0`.
pub fn spectral_asymptotics(
    sys: &SystemDefinition,
    family: &OrbitFamily,
    g: &GrazingMatrices,
    branch: Branch,
    opts: &GrazingOptions,
) -> Result<SpectralAsymptotics> {
    let rec = grazing_record(family)?;
    let iopts = &opts.orbit.integrator;
    let theta = analysis_theta(g, opts);
    let r = sys.restitution(0.0, rec.mu_star)?;
    let phi0 = rec.phi0;
    let (a12, alpha12) = (g.a[(0, 1)], g.a_inv[(0, 1)]);
    let a2 = g.a.column(1).into_owned();
    let mut e2 = DVector::zeros(g.a.nrows());
    e2[1] = 1.0;
    let mut chosen = by_y0(family);
    chosen.truncate(opts.spectral_samples);
    if chosen.len() < 4 {
        return Err(Error::InvalidInput(format!("need at least 4 pre-grazing samples, got {}", chosen.len())));
    }
    chosen.reverse();
    let mut samples = Vec::new();
    for s in chosen {
        let y0 = s.y0().unwrap_or(0.0);
        let (d, b_part, salt) = section_jacobian(sys, family.theta, s, rec.tau0, theta, iopts)?;
        let ev = eigenvalues(&d);
        let k = ev.len();
        let (top, bottom) = (ev[0], ev[k - 1]);
        if (ev[1].norm() - top.norm()).abs() <= opts.pairing_tol * top.norm() {
            return Err(Error::PairingAmbiguity(format!("two eigenvalues of modulus ~{:e} at mu = {:e}", top.norm(), s.mu)));
        }
        if (ev[k - 2].norm() - bottom.norm()).abs() <= opts.pairing_tol * bottom.norm() {
            return Err(Error::PairingAmbiguity(format!(
                "two eigenvalues of modulus ~{:e} at mu = {:e}",
                bottom.norm(),
                s.mu
            )));
        }
        let (lp, lm) = (top.re, bottom.re);
        let lp_pred = -(r + 1.0) * a12 * phi0 / y0;
        let lm_pred = r * r * y0 / ((r + 1.0) * phi0 * alpha12);
        let u_plus = real_eigenvector(&d, lp);
        let u_minus = real_eigenvector(&d, lm);
        let graze = salt
            .iter()
            .min_by(|a, b| a.approach_speed.total_cmp(&b.approach_speed))
            .ok_or_else(|| Error::NotTransversal { t: rec.tau0, what: "no impact near the tangency".into() })?;
        let det_d = d.determinant();
        samples.push(SpectralSample {
            mu: s.mu,
            y0,
            lambda_plus: lp,
            lambda_minus: lm,
            lambda_plus_pred: lp_pred,
            lambda_minus_pred: lm_pred,
            rel_dev_plus: (lp - lp_pred).abs() / lp_pred.abs(),
            rel_dev_minus: (lm - lm_pred).abs() / lm_pred.abs(),
            spectral_radius: top.norm(),
            det_d,
            det_ratio: det_d / (r * r * g.delta0),
            angle_u_plus: line_angle(&u_plus, &a2),
            angle_u_minus: line_angle(&u_minus, &e2),
            b21: graze.b21,
            b21_y: graze.b21 * graze.approach_speed,
            d,
            b_part,
        });
    }
    let nfit = opts.fit_samples.min(samples.len()).max(2);
    let tail = &samples[samples.len() - nfit..];
    let ly: Vec<f64> = tail.iter().map(|s| s.y0.ln()).collect();
    let lr: Vec<f64> = tail.iter().map(|s| s.spectral_radius.ln()).collect();
    let (_, loglog_slope) = linear_fit(&ly, &lr);
    let last3 = &samples[samples.len() - 3..];
    let ys: Vec<f64> = last3.iter().map(|s| s.y0).collect();
    let (lpy, lpy_err) = extrapolate_to_zero(&ys, &last3.iter().map(|s| s.lambda_plus * s.y0).collect::<Vec<_>>());
    let (lmy, _) = extrapolate_to_zero(&ys, &last3.iter().map(|s| s.lambda_minus / s.y0).collect::<Vec<_>>());
    let (by, _) = extrapolate_to_zero(&ys, &last3.iter().map(|s| s.b21_y).collect::<Vec<_>>());
    let lpy_pred = -(r + 1.0) * a12 * phi0;
    let ty: Vec<f64> = tail.iter().map(|s| s.y0).collect();
    let rel: Vec<f64> = tail.iter().map(|s| s.lambda_plus * s.y0 / lpy_pred - 1.0).collect();
    let (_, correction_slope) = linear_fit(&ty, &rel);
    let b21_y_pred = -(r + 1.0) * phi0;
    Ok(SpectralAsymptotics {
        r,
        phi0,
        a12,
        alpha12,
        delta0: g.delta0,
        theta,
        branch,
        loglog_slope,
        lambda_plus_y0_limit: lpy,
        lambda_plus_y0_error: lpy_err,
        lambda_plus_y0_pred: lpy_pred,
        lambda_plus_deviation: (lpy - lpy_pred).abs() / lpy_pred.abs(),
        correction_slope,
        lambda_minus_over_y0_limit: lmy,
        lambda_minus_over_y0_pred: r * r / ((r + 1.0) * phi0 * alpha12),
        det_ratio_smallest: samples.last().map_or(f64::NAN, |s| s.det_ratio),
        b21_y_limit: by,
        b21_y_pred,
        b21_deviation: (by - b21_y_pred).abs() / b21_y_pred.abs(),
        samples,
    })
}

/// Sampled persistence of hyperbolicity of `A' B` under perturbations of `A`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub eps0: f64,
    pub trials: usize,
    pub products: usize,
    pub hyperbolic: usize,
    pub min_margin: f64,
}

/// Draws `trials` perturbations `A'` with `|A' - A|_F <= eps_rel |A|_F` and
/// counts products `A' B` (over every `B` given) that keep all eigenvalues
/// off the unit circle.
pub fn perturbation_robustness(
    a: &DMatrix<f64>,
    b_parts: &[DMatrix<f64>],
    trials: usize,
    eps_rel: f64,
    margin_tol: f64,
    seed: u64,
) -> RobustnessReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps0 = eps_rel * a.norm();
    let (rows, cols) = a.shape();
    let mut hyperbolic = 0;
    let mut min_margin = f64::INFINITY;
    for _ in 0..trials {
        let e = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let scale: f64 = rng.random_range(0.0..=1.0);
        let en = e.norm();
        let ap = if en > 0.0 { a + e * (scale * eps0 / en) } else { a.clone() };
        for b in b_parts {
            let m = hyperbolicity_margin(&(&ap * b));
            min_margin = min_margin.min(m);
            if m > margin_tol {
                hyperbolic += 1;
            }
        }
    }
    RobustnessReport { eps0, trials, products: trials * b_parts.len(), hyperbolic, min_margin }
}

/// Fitted grazing surface `x_1 = c y_1^2` near a section point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaFit {
    pub c: f64,
    /// Fits restricted to `y_1 < 0` and `y_1 > 0`.
    pub c_negative: f64,
    pub c_positive: f64,
    /// `max |x_1 - c y_1^2| / max |x_1|` over the samples.
    pub residual: f64,
    /// `f_1` at the section point.
    pub f1_section: f64,
    /// `1 / f_1`, the constant of the printed quadratic law.
    pub printed_constant: f64,
    /// `1 / (2 f_1)`, the constant of the ballistic parabola.
    pub derived_constant: f64,
    pub deviation_from_derived: f64,
    pub deviation_from_printed: f64,
    /// The fit rejects `1 / f_1` but agrees with `1 / (2 f_1)`.
    pub printed_constant_disagrees: bool,
    /// `(y_1, offset index, x_1)` on the surface.
    pub points: Vec<(f64, usize, f64)>,
}

fn step_min_x1(step: &DenseStep) -> f64 {
    let (a, b) = (step.start(), step.end());
    let mut m = a[0].min(b[0]);
    if a[1] < 0.0 && b[1] > 0.0 {
        if let Ok(t) = brent(|t| Ok(step.component(1, t)), step.t0, step.t1, 1e-16 * step.t1.abs().max(1.0), 200) {
            m = m.min(step.component(0, t));
        }
    }
    m
}

/// Smallest `x_1` over `[t0 - w, t0 + w]` of the smooth solution through
/// `(t0, z0)`, ignoring the wall.
fn free_min_x1(sys: &SystemDefinition, t0: f64, z0: &[f64], w: f64, mu: f64, opts: &IntegratorOptions) -> Result<f64> {
    let cfg = RunConfig { record: true, mask: Some((f64::NEG_INFINITY, f64::INFINITY)), ..RunConfig::plain() };
    let fwd = run(sys, t0, z0, t0 + w, mu, opts, cfg).map_err(|(e, _)| e)?;
    let rev = Reversed(sys);
    let bwd = run(&rev, -t0, &Reversed::flip(z0), -t0 + w, mu, opts, cfg).map_err(|(e, _)| e)?;
    let mut m = z0[0];
    for traj in [&fwd.traj, &bwd.traj] {
        for seg in &traj.segments {
            for step in &seg.steps {
                m = m.min(step_min_x1(step));
            }
        }
    }
    Ok(m)
}

/// Samples the boundary of the set of states at `section.t` whose smooth
/// continuation touches `x_1 = 0` tangentially near that time, and fits
/// `x_1 = c y_1^2`.
///
/// For each `y_1` (and tangential offset), the boundary `x_1` is the root of
/// `x_1 -> min x_1(t)` over the window, found by bracketing root search.
pub fn fit_gamma_surface(
    sys: &SystemDefinition,
    section: &State,
    mu: f64,
    spec: &GammaSpec,
    opts: &IntegratorOptions,
) -> Result<GammaFit> {
    let d = sys.dim();
    if section.z.len() != d {
        return Err(Error::InvalidInput(format!("section state has length {}, expected {d}", section.z.len())));
    }
    if !(spec.y1_max > 0.0) || spec.y1_count == 0 {
        return Err(Error::InvalidInput("gamma sampling needs y1_max > 0 and y1_count > 0".into()));
    }
    let w = spec.window.unwrap_or(0.25 * sys.period());
    let mut f1 = vec![0.0; sys.dof()];
    sys.accel(section.t, section.z.as_slice(), mu, &mut f1)?;
    let f1 = f1[0];
    if !(f1 > 0.0) {
        return Err(Error::DegenerateGrazing { phi0: f1 });
    }
    let offsets: Vec<Vec<f64>> =
        if spec.zbar_offsets.is_empty() { vec![vec![0.0; d - 2]] } else { spec.zbar_offsets.clone() };
    let mut points = Vec::new();
    for (oi, off) in offsets.iter().enumerate() {
        if off.len() != d - 2 {
            return Err(Error::InvalidInput(format!("offset {oi} has length {}, expected {}", off.len(), d - 2)));
        }
        for side in [-1.0, 1.0] {
            for k in 1..=spec.y1_count {
                let y1 = side * spec.y1_max * k as f64 / spec.y1_count as f64;
                let mut z = section.z.as_slice().to_vec();
                z[1] = y1;
                for (j, o) in off.iter().enumerate() {
                    z[2 + j] += o;
                }
                let g = |x1: f64| {
                    let mut zz = z.clone();
                    zz[0] = x1;
                    free_min_x1(sys, section.t, &zz, w, mu, opts)
                };
                let mut hi = (2.0 * y1 * y1 / f1).max(1e-14);
                let mut tries = 0;
                while g(hi)? <= 0.0 {
                    hi *= 2.0;
                    tries += 1;
                    if tries > 60 {
                        return Err(Error::BracketFailure { lo: 0.0, hi });
                    }
                }
                let x1 = brent(g, 0.0, hi, 1e-13 * hi, 200)?;
                points.push((y1, oi, x1));
            }
        }
    }
    let fit = |pred: &dyn Fn(f64) -> bool| {
        let (num, den) = points
            .iter()
            .filter(|p| pred(p.0))
            .fold((0.0, 0.0), |(n, d), &(y, _, x)| (n + x * y * y, d + y.powi(4)));
        num / den
    };
    let c = fit(&|_| true);
    let c_negative = fit(&|y| y < 0.0);
    let c_positive = fit(&|y| y > 0.0);
    let scale = points.iter().fold(0.0f64, |m, p| m.max(p.2.abs()));
    let residual = points.iter().fold(0.0f64, |m, &(y, _, x)| m.max((x - c * y * y).abs())) / scale;
    let printed = 1.0 / f1;
    let derived = 0.5 / f1;
    let deviation_from_derived = (c - derived).abs() / derived;
    let deviation_from_printed = (c - printed).abs() / printed;
    Ok(GammaFit {
        c,
        c_negative,
        c_positive,
        residual,
        f1_section: f1,
        printed_constant: printed,
        derived_constant: derived,
        deviation_from_derived,
        deviation_from_printed,
        printed_constant_disagrees: deviation_from_printed > 0.1 && deviation_from_derived < 0.1,
        points,
    })
}

/// End-to-end grazing analysis of a family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrazingReport {
    pub system: String,
    pub dof: usize,
    pub grazing: GrazingRecord,
    pub family_theta: f64,
    pub analysis_theta: f64,
    pub matrices: GrazingMatrices,
    pub conditions: ConditionReport,
    pub spectral: Option<SpectralAsymptotics>,
    pub robustness: Option<RobustnessReport>,
    pub gamma: Option<GammaFit>,
    pub warnings: Vec<String>,
}

/// Runs every grazing diagnostic. Only failures to build `A` are fatal;
/// later stages that fail leave their section empty with a warning.
pub fn grazing_report(sys: &SystemDefinition, family: &OrbitFamily, opts: &GrazingOptions) -> Result<GrazingReport> {
    let rec = grazing_record(family)?.clone();
    let g = limit_matrix_a(sys, family, None, opts)?;
    let conditions = check_conditions(&g, opts.hyperbolic_margin);
    let theta = analysis_theta(&g, opts);
    let mut warnings = g.reduced_notes.clone();
    if !g.monotone {
        warnings.push("theta estimates of A do not converge monotonically".into());
    }
    if conditions.chosen_branch == Branch::None {
        warnings.push("neither the forward nor the inverse condition holds".into());
    }
    let spectral = match spectral_asymptotics(sys, family, &g, conditions.chosen_branch, opts) {
        Ok(s) => Some(s),
        Err(e) => {
            warnings.push(format!("spectral asymptotics: {e}"));
            None
        }
    };
    let robustness = spectral.as_ref().map(|s| {
        let b: Vec<DMatrix<f64>> =
            s.samples.iter().rev().filter_map(|x| x.b_part.clone()).take(opts.robustness_samples).collect();
        perturbation_robustness(&g.a, &b, opts.robustness_trials, opts.robustness_eps, opts.hyperbolic_margin, opts.seed)
    });
    let iopts = &opts.orbit.integrator;
    let gamma = grazing_section(sys, family, &rec, theta, iopts)
        .and_then(|section| fit_gamma_surface(sys, &section, rec.mu_star, &opts.gamma, iopts));
    let gamma = match gamma {
        Ok(f) => {
            if f.printed_constant_disagrees {
                warnings.push(format!(
                    "grazing surface coefficient {:.6e} matches 1/(2 f1) = {:.6e}, not 1/f1 = {:.6e}",
                    f.c, f.derived_constant, f.printed_constant
                ));
            }
            Some(f)
        }
        Err(e) => {
            warnings.push(format!("grazing surface fit: {e}"));
            None
        }
    };
    Ok(GrazingReport {
        system: sys.name().to_string(),
        dof: sys.dof(),
        family_theta: family.theta,
        analysis_theta: theta,
        grazing: rec,
        matrices: g,
        conditions,
        spectral,
        robustness,
        gamma,
        warnings,
    })
}

/// Point of the grazing orbit at `tau0 - theta`.
pub fn grazing_section(
    sys: &SystemDefinition,
    family: &OrbitFamily,
    rec: &GrazingRecord,
    theta: f64,
    opts: &IntegratorOptions,
) -> Result<State> {
    let t0 = -family.theta;
    let ts = shift_into(rec.tau0 - theta, t0, sys.period());
    let z0 = DVector::from_column_slice(&rec.z_section);
    let cfg = RunConfig { mask: Some(rec.mask()), ..RunConfig::plain() };
    let out = run(sys, t0, z0.as_slice(), ts, rec.mu_star, opts, cfg).map_err(|(e, _)| e)?;
    Ok(State::new(ts, out.z.as_slice().to_vec()))
}
