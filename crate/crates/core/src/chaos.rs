//! Numerical chaos diagnostics around a saddle fixed point of the
//! stroboscopic map: local and grown invariant manifolds, transversal
//! homoclinic points refined by multiple shooting, the largest Lyapunov
//! exponent, and a census of periodic points of `S^m`.
//!
//! These are surrogates. They do not certify a hyperbolic invariant set.

use std::io::Write;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{count_impacts, inverse_iterate, iterate_map, simulate, IntegratorOptions};
use crate::model::{State, SystemDefinition};
use crate::numeric::{eigenvalues, hyperbolicity_margin, real_eigenvector};
use crate::orbit::PeriodicOrbit;
use crate::report::{matrix_rows, vector};
use crate::variational::map_jacobian;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosOptions {
    pub integrator: IntegratorOptions,
    /// Offset of the first manifold points from the fixed point; defaults to
    /// `1e-5 |z*| + 1e-8`.
    pub seed_delta: Option<f64>,
    pub escape_radius: f64,
    /// Largest distance between consecutive points of a grown curve.
    pub max_gap: f64,
    /// Images of the fundamental domain added to each branch.
    pub depth: usize,
    /// Point budget per fundamental-domain image.
    pub max_points: usize,
    /// Crossings at a smaller angle (radians) are not transversal.
    pub angle_min: f64,
    /// Regrow the curves at half the gap and check each homoclinic point.
    pub check_persistence: bool,
    /// Iterates on each side checked for monotone approach to `z*`.
    pub validation_steps: usize,
    /// Per-step residual accepted for a refined homoclinic orbit.
    pub orbit_tol: f64,
    /// Largest excursion length reported as `m`.
    pub m_max: usize,
    /// Radius of the neighbourhood of `z*` that counts as local, relative to
    /// `1 + |z*|`.
    pub local_radius: f64,
    /// Periods of the periodic-point search.
    pub periodic_m: Vec<usize>,
    /// Grid points per state dimension for periodic-point seeds.
    pub seed_grid: usize,
    /// Half-width of the seed box around `z*`, relative to `1 + |z*|`.
    pub seed_box: f64,
    pub dedupe_tol: f64,
    pub residual_tol: f64,
    pub max_newton: usize,
    pub lyapunov_iter: usize,
    pub burn_in: usize,
    pub blocks: usize,
    /// Relative step of finite-difference Jacobians.
    pub fd_step: f64,
}

impl Default for ChaosOptions {
    fn default() -> Self {
        Self {
            integrator: IntegratorOptions::default(),
            seed_delta: None,
            escape_radius: 1e3,
            max_gap: 0.05,
            depth: 5,
            max_points: 4000,
            angle_min: 1e-3,
            check_persistence: true,
            validation_steps: 5,
            orbit_tol: 1e-10,
            m_max: 6,
            local_radius: 0.1,
            periodic_m: vec![1, 2, 3],
            seed_grid: 5,
            seed_box: 0.2,
            dedupe_tol: 1e-6,
            residual_tol: 1e-8,
            max_newton: 30,
            lyapunov_iter: 2000,
            burn_in: 100,
            blocks: 20,
            fd_step: 1e-7,
        }
    }
}

/// The stroboscopic map at fixed `(theta, mu)`.
#[derive(Clone, Copy)]
pub struct MapContext<'a> {
    pub sys: &'a SystemDefinition,
    pub theta: f64,
    pub mu: f64,
    pub opts: &'a IntegratorOptions,
}

impl MapContext<'_> {
    /// `S^k(z)` and the number of wall contacts on the way.
    pub fn forward(&self, z: &DVector<f64>, k: usize) -> Result<(DVector<f64>, usize)> {
        let t0 = -self.theta;
        count_impacts(self.sys, t0, z, t0 + k as f64 * self.sys.period(), self.mu, self.opts)
            .map(|(z, ev)| (z, ev.len()))
    }

    /// `S^-k(z)` and the number of wall contacts on the way.
    pub fn backward(&self, z: &DVector<f64>, k: usize) -> Result<(DVector<f64>, usize)> {
        inverse_iterate(self.sys, self.theta, z, self.mu, k, self.opts)
    }

    fn apply(&self, kind: ManifoldKind, z: &DVector<f64>, k: usize) -> Result<(DVector<f64>, usize)> {
        if k == 0 {
            return Ok((z.clone(), 0));
        }
        match kind {
            ManifoldKind::Unstable => self.forward(z, k),
            ManifoldKind::Stable => self.backward(z, k),
        }
    }

    /// One period with its Jacobian; falls back to central differences when
    /// the period contains a grazing contact or a sticking phase. The flag
    /// is true for the fallback.
    pub fn jacobian(&self, z: &DVector<f64>, fd_step: f64) -> Result<(DVector<f64>, DMatrix<f64>, bool)> {
        let t0 = -self.theta;
        match map_jacobian(self.sys, t0, z, t0 + self.sys.period(), self.mu, self.opts) {
            Ok(mj) => Ok((mj.z_end, mj.jacobian, false)),
            Err(Error::NearGrazing { .. } | Error::NotTransversal { .. }) => {
                let (z1, _) = self.forward(z, 1)?;
                Ok((z1, self.fd_jacobian(z, fd_step)?, true))
            }
            Err(e) => Err(e),
        }
    }

    pub fn fd_jacobian(&self, z: &DVector<f64>, fd_step: f64) -> Result<DMatrix<f64>> {
        let d = z.len();
        let mut j = DMatrix::zeros(d, d);
        for c in 0..d {
            let h = fd_step * (1.0 + z[c].abs());
            let mut zp = z.clone();
            zp[c] += h;
            let (fp, _) = self.forward(&zp, 1)?;
            // one-sided in x1 on the wall: the map is undefined inside it
            if c == 0 && z[0] - h < 0.0 {
                let (f0, _) = self.forward(z, 1)?;
                j.set_column(c, &((fp - f0) / h));
                continue;
            }
            let mut zm = z.clone();
            zm[c] -= h;
            let (fm, _) = self.forward(&zm, 1)?;
            j.set_column(c, &((fp - fm) / (2.0 * h)));
        }
        Ok(j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    Stable,
    Unstable,
}

/// Eigen-split of the Jacobian at a saddle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleSplit {
    #[serde(serialize_with = "vector")]
    pub z_star: DVector<f64>,
    #[serde(serialize_with = "matrix_rows")]
    pub d: DMatrix<f64>,
    /// Dominant unstable and strongest stable eigenvalues.
    pub lambda_u: f64,
    pub lambda_s: f64,
    #[serde(serialize_with = "vector")]
    pub u_plus: DVector<f64>,
    #[serde(serialize_with = "vector")]
    pub u_minus: DVector<f64>,
    /// Left eigenvector for `lambda_u`: normal of the local stable set when
    /// the unstable subspace is one-dimensional.
    #[serde(serialize_with = "vector")]
    pub left_unstable: DVector<f64>,
    #[serde(skip)]
    pub stable_basis: DMatrix<f64>,
    pub unstable_dim: usize,
    pub margin: f64,
}

/// Orthonormal basis of the complement of the unit vector `v`, from a
/// Householder reflection.
fn complement_basis(v: &DVector<f64>) -> DMatrix<f64> {
    let d = v.len();
    let mut e1 = DVector::zeros(d);
    e1[0] = 1.0;
    let w = if v[0] > 0.0 { v - &e1 } else { v + &e1 };
    let wn = w.norm();
    let h = if wn < 1e-300 {
        DMatrix::identity(d, d)
    } else {
        let w = w / wn;
        DMatrix::identity(d, d) - &w * w.transpose() * 2.0
    };
    h.columns(1, d - 1).into_owned()
}

/// Splits `D` at a saddle fixed point. Fails when the spectrum touches the
/// unit circle or when there is no real dominant unstable and strongest
/// stable eigenvalue.
pub fn saddle_split(z_star: &DVector<f64>, d: &DMatrix<f64>, margin_tol: f64) -> Result<SaddleSplit> {
    let margin = hyperbolicity_margin(d);
    if !(margin > margin_tol) {
        return Err(Error::NonHyperbolic { margin });
    }
    let ev = eigenvalues(d);
    let (top, bottom) = (ev[0], ev[ev.len() - 1]);
    if top.norm() <= 1.0 || bottom.norm() >= 1.0 {
        return Err(Error::InvalidInput(format!(
            "fixed point is not a saddle (multiplier moduli {:.6} to {:.6})",
            bottom.norm(),
            top.norm()
        )));
    }
    if top.im.abs() > 1e-12 * top.norm() || bottom.im.abs() > 1e-12 * bottom.norm() {
        return Err(Error::PairingAmbiguity("extreme eigenvalues are complex".into()));
    }
    let u_plus = real_eigenvector(d, top.re);
    let u_minus = real_eigenvector(d, bottom.re);
    let left = real_eigenvector(&d.transpose(), top.re);
    let unstable_dim = ev.iter().filter(|l| l.norm() > 1.0).count();
    Ok(SaddleSplit {
        z_star: z_star.clone(),
        d: d.clone(),
        lambda_u: top.re,
        lambda_s: bottom.re,
        stable_basis: complement_basis(&left),
        u_plus,
        u_minus,
        left_unstable: left,
        unstable_dim,
        margin,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalManifolds {
    pub split: SaddleSplit,
    pub seed_delta: f64,
    /// `|S(z* + d u+) - z* - lambda_u d u+|` (worst sign).
    pub unstable_residual: f64,
    /// `|S^-1(z* + d u-) - z* - d u- / lambda_s|` (worst sign).
    pub stable_residual: f64,
    pub shrinks: usize,
}

/// Default seed offset `1e-5 |z*| + 1e-8`.
pub fn default_seed_delta(z_star: &DVector<f64>) -> f64 {
    1e-5 * z_star.norm() + 1e-8
}

/// First-order consistency of the seeds: returns the unstable and stable
/// residuals at offset `delta`.
pub fn seed_residuals(ctx: &MapContext, split: &SaddleSplit, delta: f64) -> Result<(f64, f64)> {
    let z = &split.z_star;
    let mut ru: f64 = 0.0;
    let mut rs: f64 = 0.0;
    for sign in [1.0, -1.0] {
        let q = z + &split.u_plus * (sign * delta);
        let (img, _) = ctx.forward(&q, 1)?;
        ru = ru.max((img - z - &split.u_plus * (split.lambda_u * sign * delta)).norm());
        let q = z + &split.u_minus * (sign * delta);
        let (pre, _) = ctx.backward(&q, 1)?;
        rs = rs.max((pre - z - &split.u_minus * (sign * delta / split.lambda_s)).norm());
    }
    Ok((ru, rs))
}

/// Seeds of the local manifolds of the fixed point `orbit`, validated by
/// `|S(z* + d u+) - z* - lambda d u+| <= 0.1 |lambda| d` and its inverse-map
/// counterpart. The offset shrinks by 4 up to four times before failing.
pub fn local_manifolds(ctx: &MapContext, orbit: &PeriodicOrbit, seed_delta: Option<f64>) -> Result<LocalManifolds> {
    let split = saddle_split(&orbit.z_star, &orbit.jacobian, 1e-6)?;
    let mut delta = seed_delta.unwrap_or_else(|| default_seed_delta(&orbit.z_star));
    let mut last = (f64::INFINITY, f64::INFINITY);
    for shrinks in 0..=4 {
        let (ru, rs) = seed_residuals(ctx, &split, delta)?;
        let lu = 0.1 * split.lambda_u.abs() * delta;
        let ls = 0.1 * delta / split.lambda_s.abs();
        if ru <= lu && rs <= ls {
            return Ok(LocalManifolds { split, seed_delta: delta, unstable_residual: ru, stable_residual: rs, shrinks });
        }
        debug!("seed validation failed at delta = {delta:e}: {ru:e} / {lu:e}, {rs:e} / {ls:e}");
        last = (ru / lu, rs / ls);
        if shrinks < 4 {
            delta *= 0.25;
        }
    }
    let (residual, limit) = if last.0 > last.1 {
        (0.1 * split.lambda_u.abs() * delta * last.0, 0.1 * split.lambda_u.abs() * delta)
    } else {
        (0.1 * delta / split.lambda_s.abs() * last.1, 0.1 * delta / split.lambda_s.abs())
    };
    Err(Error::ManifoldValidation { residual, limit })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldPoint {
    /// `+1` or `-1`: side of the fixed point the branch leaves from.
    pub branch: i8,
    /// Number of map applications from the local segment.
    pub piece: usize,
    /// Seed parameter: the point is the `piece`-th image of
    /// `z* + side exp(sigma) u`.
    pub sigma: f64,
    pub z: Vec<f64>,
    /// Wall contacts along the `piece` map applications.
    pub contacts: usize,
    /// The contact count differs from the previous point of the piece: the
    /// curve crossed the grazing surface there.
    pub corner: bool,
    pub arclength: f64,
    /// Connected to the next point by a resolved segment.
    pub linked: bool,
}

/// Polyline approximation of a one-dimensional invariant curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldCurve {
    pub kind: ManifoldKind,
    pub center: Vec<f64>,
    pub direction: Vec<f64>,
    /// Eigenvalue of `S` along `direction`.
    pub eigenvalue: f64,
    pub seed_delta: f64,
    pub max_gap: f64,
    pub depth: usize,
    pub points: Vec<ManifoldPoint>,
    /// Points dropped because the orbit left the escape radius.
    pub escaped: usize,
    /// Points dropped because the map could not be evaluated.
    pub failed: usize,
    /// Segments left longer than `max_gap` after refinement.
    pub unresolved: usize,
}

impl ManifoldCurve {
    /// Index pairs of connected consecutive points.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.points.iter().enumerate().filter(|(_, p)| p.linked).map(|(i, _)| (i, i + 1))
    }

    /// Expansion factor of the map along the curve direction.
    fn growth(&self) -> f64 {
        match self.kind {
            ManifoldKind::Unstable => self.eigenvalue,
            ManifoldKind::Stable => 1.0 / self.eigenvalue,
        }
    }

    /// Sum of segment lengths per piece, over both branches.
    pub fn piece_lengths(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.depth + 1];
        for (i, j) in self.segments() {
            let (a, b) = (&self.points[i], &self.points[j]);
            if a.piece == b.piece {
                out[a.piece] += dist(&a.z, &b.z);
            }
        }
        out
    }

    /// Distance from `z` to the polyline.
    pub fn distance_to(&self, z: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for (i, j) in self.segments() {
            best = best.min(point_segment_distance(z, &self.points[i].z, &self.points[j].z));
        }
        for p in &self.points {
            best = best.min(dist(z, &p.z));
        }
        best
    }

    /// CSV with columns `branch, piece, arclength, x1, y1, ..., contacts, corner, linked`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.center.len() / 2;
        let mut header = vec!["branch".to_string(), "piece".into(), "arclength".into()];
        for k in 1..=n {
            header.push(format!("x{k}"));
            header.push(format!("y{k}"));
        }
        header.extend(["contacts".to_string(), "corner".into(), "linked".into()]);
        writeln!(w, "{}", header.join(","))?;
        for p in &self.points {
            write!(w, "{},{},{:.16e}", p.branch, p.piece, p.arclength)?;
            for v in &p.z {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w, ",{},{},{}", p.contacts, u8::from(p.corner), u8::from(p.linked))?;
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn point_segment_distance(z: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    if len2 == 0.0 {
        return dist(z, a);
    }
    let t = (z.iter().zip(a).zip(&ab).map(|((zi, ai), di)| (zi - ai) * di).sum::<f64>() / len2).clamp(0.0, 1.0);
    let p: Vec<f64> = a.iter().zip(&ab).map(|(ai, di)| ai + t * di).collect();
    dist(z, &p)
}

struct Sample {
    sigma: f64,
    z: Option<DVector<f64>>,
    contacts: usize,
}

/// Grows one branch piece: the `k`-th image of the fundamental domain on
/// seed side `side`, refined until consecutive points are within `max_gap`.
fn grow_piece(
    ctx: &MapContext,
    kind: ManifoldKind,
    center: &DVector<f64>,
    dir: &DVector<f64>,
    side: f64,
    sigma_range: (f64, f64),
    k: usize,
    opts: &ChaosOptions,
    stats: &mut (usize, usize, usize),
) -> Vec<Sample> {
    let eval = |sigma: f64| -> Sample {
        let q = center + dir * (side * sigma.exp());
        match ctx.apply(kind, &q, k) {
            Ok((z, c)) if z.norm() <= opts.escape_radius => Sample { sigma, z: Some(z), contacts: c },
            Ok(_) => Sample { sigma, z: None, contacts: usize::MAX },
            Err(_) => Sample { sigma, z: None, contacts: usize::MAX - 1 },
        }
    };
    let n0 = 9;
    let (lo, hi) = sigma_range;
    let mut pts: Vec<Sample> =
        (0..n0).into_par_iter().map(|i| eval(lo + (hi - lo) * i as f64 / (n0 - 1) as f64)).collect();
    loop {
        if pts.len() >= opts.max_points {
            break;
        }
        let mut mids = Vec::new();
        for w in pts.windows(2) {
            if let (Some(a), Some(b)) = (&w[0].z, &w[1].z) {
                let gap = (a - b).norm();
                let ds = w[1].sigma - w[0].sigma;
                if gap > opts.max_gap && ds > 1e-13 * (1.0 + w[0].sigma.abs()) {
                    mids.push(0.5 * (w[0].sigma + w[1].sigma));
                }
            }
        }
        if mids.is_empty() {
            break;
        }
        mids.truncate(opts.max_points - pts.len());
        let new: Vec<Sample> = mids.into_par_iter().map(eval).collect();
        pts.extend(new);
        pts.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
    }
    for p in &pts {
        match (p.z.is_none(), p.contacts) {
            (true, usize::MAX) => stats.0 += 1,
            (true, _) => stats.1 += 1,
            _ => {}
        }
    }
    pts
}

/// Grows a one-dimensional invariant curve from the validated seeds: the
/// fundamental domain `z* + s u`, `|s|` in `[delta, delta |g|]` with `g` the
/// expansion factor, and its first `depth` images under `S` (unstable) or
/// `S^-1` (stable), on both sides of the fixed point.
pub fn grow_manifold(
    ctx: &MapContext,
    local: &LocalManifolds,
    kind: ManifoldKind,
    opts: &ChaosOptions,
) -> ManifoldCurve {
    let split = &local.split;
    let (dir, eigenvalue) = match kind {
        ManifoldKind::Unstable => (&split.u_plus, split.lambda_u),
        ManifoldKind::Stable => (&split.u_minus, split.lambda_s),
    };
    let mut curve = ManifoldCurve {
        kind,
        center: split.z_star.as_slice().to_vec(),
        direction: dir.as_slice().to_vec(),
        eigenvalue,
        seed_delta: local.seed_delta,
        max_gap: opts.max_gap,
        depth: opts.depth,
        points: Vec::new(),
        escaped: 0,
        failed: 0,
        unresolved: 0,
    };
    let g = curve.growth();
    let delta = local.seed_delta;
    let range = (delta.ln(), (delta * g.abs()).ln());
    let flip = g.signum();
    let mut stats = (0, 0, 0);
    for branch in [1i8, -1] {
        let mut side = f64::from(branch);
        let start = curve.points.len();
        for k in 0..=opts.depth {
            let pts = grow_piece(ctx, kind, &split.z_star, dir, side, range, k, opts, &mut stats);
            let mut prev_contacts = None;
            for p in pts {
                let Some(z) = p.z else {
                    if let Some(last) = curve.points.last_mut() {
                        last.linked = false;
                    }
                    prev_contacts = None;
                    continue;
                };
                let corner = prev_contacts.is_some_and(|c| c != p.contacts);
                prev_contacts = Some(p.contacts);
                curve.points.push(ManifoldPoint {
                    branch,
                    piece: k,
                    sigma: p.sigma,
                    z: z.as_slice().to_vec(),
                    contacts: p.contacts,
                    corner,
                    arclength: 0.0,
                    linked: true,
                });
            }
            side *= flip;
        }
        if let Some(last) = curve.points.last_mut() {
            last.linked = false;
        }
        let mut s = 0.0;
        for i in start..curve.points.len() {
            curve.points[i].arclength = s;
            if curve.points[i].linked {
                let gap = dist(&curve.points[i].z, &curve.points[i + 1].z);
                if gap > opts.max_gap {
                    curve.points[i].linked = false;
                    stats.2 += 1;
                } else {
                    s += gap;
                }
            }
        }
    }
    curve.failed = stats.0;
    curve.escaped = stats.1;
    curve.unresolved = stats.2;
    debug!(
        "{kind:?} curve: {} points, {} escaped, {} failed, {} unresolved",
        curve.points.len(),
        curve.escaped,
        curve.failed,
        curve.unresolved
    );
    curve
}

/// Planar crossing of two polylines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Crossing {
    pub point: Vec<f64>,
    /// Angle between the crossing segments, in `[0, pi/2]`.
    pub angle: f64,
    /// Segment start indices in the stable and unstable curves, and the
    /// fractions along them.
    pub s_index: usize,
    pub u_index: usize,
    pub s_frac: f64,
    pub u_frac: f64,
}

/// Crossings of the stable and unstable polylines of a planar map, away from
/// the fixed point by more than `exclude_radius`.
pub fn find_homoclinic(ws: &ManifoldCurve, wu: &ManifoldCurve, exclude_radius: f64) -> Result<Vec<Crossing>> {
    if ws.center.len() != 2 || wu.center.len() != 2 {
        return Err(Error::InvalidInput("polyline crossings need planar curves".into()));
    }
    let center = &wu.center;
    let bbox = |a: &[f64], b: &[f64]| (a[0].min(b[0]), a[0].max(b[0]), a[1].min(b[1]), a[1].max(b[1]));
    let useg: Vec<(usize, (f64, f64, f64, f64))> =
        wu.segments().map(|(i, j)| (i, bbox(&wu.points[i].z, &wu.points[j].z))).collect();
    let mut out = Vec::new();
    for (i, j) in ws.segments() {
        let (p, p2) = (&ws.points[i].z, &ws.points[j].z);
        let bs = bbox(p, p2);
        for &(ui, bu) in &useg {
            if bs.1 < bu.0 || bu.1 < bs.0 || bs.3 < bu.2 || bu.3 < bs.2 {
                continue;
            }
            let (q, q2) = (&wu.points[ui].z, &wu.points[ui + 1].z);
            let r = [p2[0] - p[0], p2[1] - p[1]];
            let s = [q2[0] - q[0], q2[1] - q[1]];
            let den = r[0] * s[1] - r[1] * s[0];
            if den == 0.0 {
                continue;
            }
            let qp = [q[0] - p[0], q[1] - p[1]];
            let t = (qp[0] * s[1] - qp[1] * s[0]) / den;
            let u = (qp[0] * r[1] - qp[1] * r[0]) / den;
            if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&u) {
                continue;
            }
            let point = vec![p[0] + t * r[0], p[1] + t * r[1]];
            if dist(&point, center) <= exclude_radius {
                continue;
            }
            let cos = (r[0] * s[0] + r[1] * s[1]).abs() / (r[0].hypot(r[1]) * s[0].hypot(s[1]));
            out.push(Crossing { point, angle: cos.min(1.0).acos(), s_index: i, u_index: ui, s_frac: t, u_frac: u });
        }
    }
    Ok(out)
}

/// Homoclinic point refined to a multiple-shooting orbit
/// `p_-M, ..., p_0, ..., p_M` with `p_-M` on the local unstable segment and
/// `p_M` on the local stable set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomoclinicPoint {
    pub point: Vec<f64>,
    /// Angle (radians) between the unstable curve and the stable set at the
    /// point, from the linearized orbit.
    pub angle: f64,
    /// Crossing angle of the polylines (planar case only).
    pub polyline_angle: Option<f64>,
    pub transversal: bool,
    /// Map applications from the seed segment to the point, and from the
    /// point to the seed neighbourhood of the stable set.
    pub unstable_iterates: usize,
    pub stable_iterates: usize,
    pub orbit: Vec<Vec<f64>>,
    /// `|p_j - z*|` for `j = -M..M`.
    pub distances: Vec<f64>,
    /// Index of `p_0` in `orbit`.
    pub center_index: usize,
    /// Map applications spent outside the local neighbourhood of `z*`: one
    /// more than the number of orbit points outside it.
    pub excursion: usize,
    pub forward_monotone: bool,
    pub backward_monotone: bool,
    /// Mean distance ratio over the last three forward steps; close to
    /// `|lambda_s|` once the orbit is in the linear regime.
    pub approach_ratio: f64,
    /// Reproduced by curves grown at half the gap, when checked.
    pub persistent: Option<bool>,
    /// Largest `|S(p_j) - p_{j+1}|`.
    pub orbit_residual: f64,
    pub newton_iterations: usize,
}

impl HomoclinicPoint {
    /// Transversal, monotone on both sides, and not shown to be an
    /// artifact of the curve resolution.
    pub fn validated(&self) -> bool {
        self.transversal && self.forward_monotone && self.backward_monotone && self.persistent != Some(false)
    }
}

/// Candidate link between the two manifolds: the unstable seed parameter
/// and piece, and the stable piece with a point near the local stable set.
#[derive(Debug, Clone)]
struct Candidate {
    u_side: f64,
    u_sigma: f64,
    u_piece: usize,
    s_piece: usize,
    /// Approximate point where the orbit enters the local stable set.
    s_entry: DVector<f64>,
    /// Unrefined homoclinic point on the unstable polyline.
    u_point: DVector<f64>,
    polyline_angle: Option<f64>,
}

fn seed_point(split: &SaddleSplit, dir: &DVector<f64>, side: f64, sigma: f64) -> DVector<f64> {
    &split.z_star + dir * (side * sigma.exp())
}

/// Solves for the homoclinic orbit through a candidate by Newton's method
/// on the shooting equations `S(p_j) = p_{j+1}`.
fn refine(ctx: &MapContext, split: &SaddleSplit, cand: &Candidate, opts: &ChaosOptions) -> Result<HomoclinicPoint> {
    let d = split.z_star.len();
    let zs = &split.z_star;
    let steps = opts.validation_steps.max(1);
    let mb = cand.u_piece.max(steps);
    let mf = cand.s_piece.max(steps);
    let legs = mb + mf;
    let lam_u = split.lambda_u;
    let lam_s = split.lambda_s;
    let w = &split.stable_basis;
    let su0 = cand.u_side * cand.u_sigma.exp();
    // initial orbit p_{-mb} .. p_{mf}
    let mut orbit: Vec<DVector<f64>> = Vec::with_capacity(legs + 1);
    for j in 0..=legs {
        let idx = j as isize - mb as isize;
        let back = -idx - cand.u_piece as isize;
        let p = if back >= 0 {
            zs + &split.u_plus * (su0 * lam_u.powi(-(back as i32)))
        } else if idx <= 0 {
            ctx.forward(&seed_point(split, &split.u_plus, cand.u_side, cand.u_sigma), (cand.u_piece as isize + idx) as usize)?.0
        } else if (idx as usize) < cand.s_piece {
            ctx.backward(&cand.s_entry, cand.s_piece - idx as usize)?.0
        } else {
            let off = &cand.s_entry - zs;
            let proj = w * (w.transpose() * off);
            zs + proj * lam_s.powi(idx as i32 - cand.s_piece as i32)
        };
        orbit.push(p);
    }
    let mut su = su0 * lam_u.powi(-((mb - cand.u_piece) as i32));
    let mut c = w.transpose() * (&orbit[legs] - zs);
    let n_unknown = 1 + (legs - 1) * d + (d - 1);
    let assemble = |su: f64, c: &DVector<f64>, inner: &[DVector<f64>]| -> Vec<DVector<f64>> {
        let mut pts = Vec::with_capacity(legs + 1);
        pts.push(zs + &split.u_plus * su);
        pts.extend(inner.iter().cloned());
        pts.push(zs + w * c);
        pts
    };
    let mut inner: Vec<DVector<f64>> = orbit[1..legs].to_vec();
    let residuals = |pts: &[DVector<f64>]| -> Result<(Vec<DVector<f64>>, f64)> {
        let imgs: Vec<Result<DVector<f64>>> =
            (0..legs).into_par_iter().map(|j| ctx.forward(&pts[j], 1).map(|(z, _)| z - &pts[j + 1])).collect();
        let imgs = imgs.into_iter().collect::<Result<Vec<_>>>()?;
        let worst = imgs.iter().fold(0.0f64, |m, r| m.max(r.amax()));
        Ok((imgs, worst))
    };
    let mut pts = assemble(su, &c, &inner);
    let (mut res, mut worst) = residuals(&pts)?;
    let mut iterations = 0;
    while worst > opts.orbit_tol && iterations < opts.max_newton {
        iterations += 1;
        let jacs: Vec<Result<DMatrix<f64>>> =
            (0..legs).into_par_iter().map(|j| ctx.jacobian(&pts[j], opts.fd_step).map(|(_, m, _)| m)).collect();
        let jacs = jacs.into_iter().collect::<Result<Vec<_>>>()?;
        let mut big = DMatrix::zeros(legs * d, n_unknown);
        let mut rhs = DVector::zeros(legs * d);
        for j in 0..legs {
            let row = j * d;
            rhs.rows_mut(row, d).copy_from(&(-&res[j]));
            if j == 0 {
                big.view_mut((row, 0), (d, 1)).copy_from(&(&jacs[0] * &split.u_plus));
            } else {
                let col = 1 + (j - 1) * d;
                big.view_mut((row, col), (d, d)).copy_from(&jacs[j]);
            }
            if j + 1 < legs {
                let col = 1 + j * d;
                big.view_mut((row, col), (d, d)).copy_from(&(-DMatrix::identity(d, d)));
            } else {
                let col = 1 + (legs - 1) * d;
                big.view_mut((row, col), (d, d - 1)).copy_from(&(-w));
            }
        }
        let step = big.svd(true, true).solve(&rhs, 1e-14).map_err(|e| Error::Undefined(e.to_string()))?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let su_t = su + lambda * step[0];
            let inner_t: Vec<DVector<f64>> =
                (0..legs - 1).map(|j| &inner[j] + step.rows(1 + j * d, d) * lambda).collect();
            let c_t = &c + step.rows(1 + (legs - 1) * d, d - 1) * lambda;
            let pts_t = assemble(su_t, &c_t, &inner_t);
            if let Ok((r_t, w_t)) = residuals(&pts_t) {
                if w_t < worst {
                    su = su_t;
                    inner = inner_t;
                    c = c_t;
                    pts = pts_t;
                    res = r_t;
                    worst = w_t;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if worst > opts.orbit_tol {
        return Err(Error::NewtonFailure { iterations, residual: worst });
    }
    // tangent of the unstable curve at p_0 and normal of the stable set there
    let jacs: Vec<DMatrix<f64>> = (0..legs)
        .into_par_iter()
        .map(|j| ctx.jacobian(&pts[j], opts.fd_step).map(|(_, m, _)| m))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut v = split.u_plus.clone();
    for jac in &jacs[..mb] {
        v = jac * v;
        v /= v.norm();
    }
    let mut nrm = split.left_unstable.clone();
    for jac in jacs[mb..].iter().rev() {
        nrm = jac.transpose() * nrm;
        nrm /= nrm.norm();
    }
    let angle = (nrm.dot(&v).abs() / (nrm.norm() * v.norm())).min(1.0).asin();
    let distances: Vec<f64> = pts.iter().map(|p| (p - zs).norm()).collect();
    let radius = opts.local_radius * (1.0 + zs.norm());
    let tail = mf.min(3);
    let approach_ratio = (distances[legs] / distances[legs - tail]).powf(1.0 / tail as f64);
    let excursion = 1 + distances.iter().filter(|&&r| r > radius).count();
    let steps_f = &distances[mb + 1..=mb + steps];
    let forward_monotone = steps_f.windows(2).all(|w| w[1] < w[0]);
    let back: Vec<f64> = (1..=steps).map(|j| distances[mb - j]).collect();
    let backward_monotone = back.windows(2).all(|w| w[1] < w[0]);
    Ok(HomoclinicPoint {
        point: pts[mb].as_slice().to_vec(),
        angle,
        polyline_angle: cand.polyline_angle,
        transversal: angle >= opts.angle_min,
        unstable_iterates: cand.u_piece,
        stable_iterates: cand.s_piece,
        orbit: pts.iter().map(|p| p.as_slice().to_vec()).collect(),
        distances,
        center_index: mb,
        excursion,
        forward_monotone,
        backward_monotone,
        approach_ratio,
        persistent: None,
        orbit_residual: worst,
        newton_iterations: iterations,
    })
}

/// Interpolated seed data of a point along a curve segment.
fn segment_seed(curve: &ManifoldCurve, i: usize, frac: f64) -> (f64, f64, usize) {
    let (a, b) = (&curve.points[i], &curve.points[i + 1]);
    let side_of = |p: &ManifoldPoint| {
        let flip = curve.growth().signum();
        f64::from(p.branch) * if p.piece % 2 == 1 { flip } else { 1.0 }
    };
    if a.piece == b.piece {
        (side_of(a), a.sigma + frac * (b.sigma - a.sigma), a.piece)
    } else if frac < 0.5 {
        (side_of(a), a.sigma, a.piece)
    } else {
        (side_of(b), b.sigma, b.piece)
    }
}

/// Candidates from planar polyline crossings.
fn planar_candidates(
    split: &SaddleSplit,
    ws: &ManifoldCurve,
    wu: &ManifoldCurve,
    crossings: &[Crossing],
) -> Vec<Candidate> {
    crossings
        .iter()
        .map(|x| {
            let (u_side, u_sigma, u_piece) = segment_seed(wu, x.u_index, x.u_frac);
            let (s_side, s_sigma, s_piece) = segment_seed(ws, x.s_index, x.s_frac);
            Candidate {
                u_side,
                u_sigma,
                u_piece,
                s_piece,
                s_entry: seed_point(split, &split.u_minus, s_side, s_sigma),
                u_point: DVector::from_column_slice(&x.point),
                polyline_angle: Some(x.angle),
            }
        })
        .collect()
}

/// Candidates where the unstable curve crosses the codimension-one stable
/// set. A sign change of `g_k(q) = l+ . (S^k(q) - z*)` between neighbouring
/// points of one piece is bisected in the seed parameter; the limit is kept
/// when its `k`-th image lies within `local_radius` of the fixed point, so
/// that the hyperplane `g_k = 0` is a good local model of the stable set.
fn stable_set_candidates(
    ctx: &MapContext,
    split: &SaddleSplit,
    wu: &ManifoldCurve,
    local_radius: f64,
    opts: &ChaosOptions,
) -> Vec<Candidate> {
    let kmax = 2 * opts.depth.max(1);
    let zs = &split.z_star;
    let images: Vec<Vec<Option<DVector<f64>>>> = wu
        .points
        .par_iter()
        .map(|p| {
            let mut z = DVector::from_column_slice(&p.z);
            let mut out = Vec::with_capacity(kmax);
            for _ in 0..kmax {
                match ctx.forward(&z, 1) {
                    Ok((zn, _)) if zn.norm() <= opts.escape_radius => {
                        z = zn;
                        out.push(Some(z.clone()));
                    }
                    _ => break,
                }
            }
            out.resize(kmax, None);
            out
        })
        .collect();
    let g = |z: &DVector<f64>| split.left_unstable.dot(&(z - zs));
    let mut brackets = Vec::new();
    for (i, j) in wu.segments() {
        let (a, b) = (&wu.points[i], &wu.points[j]);
        if a.piece != b.piece {
            continue;
        }
        for k in 0..kmax {
            if let (Some(za), Some(zb)) = (&images[i][k], &images[j][k]) {
                // the crossing image can only be local if an end is within
                // reach of the neighbourhood
                let reach = local_radius + (za - zb).norm();
                let near = (za - zs).norm().min((zb - zs).norm()) <= reach;
                if near && g(za) * g(zb) <= 0.0 {
                    brackets.push((i, j, k));
                }
            }
        }
    }
    let side_of = |p: &ManifoldPoint| {
        let flip = wu.growth().signum();
        f64::from(p.branch) * if p.piece % 2 == 1 { flip } else { 1.0 }
    };
    let found: Vec<Option<Candidate>> = brackets
        .par_iter()
        .map(|&(i, j, k)| {
            let (a, b) = (&wu.points[i], &wu.points[j]);
            let side = side_of(a);
            let steps = a.piece + k + 1;
            let image = |sigma: f64| ctx.forward(&seed_point(split, &split.u_plus, side, sigma), steps).ok().map(|r| r.0);
            let (mut lo, mut hi) = (a.sigma, b.sigma);
            let mut zlo = images[i][k].clone()?;
            let mut zhi = images[j][k].clone()?;
            // a rough bracket suffices: the shooting solve polishes it
            while (&zlo - &zhi).norm() > 1e-4 * local_radius && hi - lo > 1e-13 * (1.0 + lo.abs()) {
                let mid = 0.5 * (lo + hi);
                let zm = image(mid)?;
                if g(&zm) * g(&zlo) <= 0.0 {
                    hi = mid;
                    zhi = zm;
                } else {
                    lo = mid;
                    zlo = zm;
                }
            }
            let sigma = 0.5 * (lo + hi);
            let entry = (&zlo + &zhi) * 0.5;
            if (&entry - zs).norm() > local_radius {
                return None;
            }
            let q = ctx.forward(&seed_point(split, &split.u_plus, side, sigma), a.piece).ok()?.0;
            Some(Candidate {
                u_side: side,
                u_sigma: sigma,
                u_piece: a.piece,
                s_piece: k + 1,
                s_entry: entry,
                u_point: q,
                polyline_angle: None,
            })
        })
        .collect();
    found.into_iter().flatten().collect()
}

/// Largest Lyapunov exponent (per unit time) with a block standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovEstimate {
    pub exponent: f64,
    pub std_error: f64,
    /// `exponent -/+ 3 std_error`.
    pub band: (f64, f64),
    pub periods: usize,
    pub burn_in: usize,
    pub blocks: usize,
    /// Periods whose Jacobian came from finite differences.
    pub fd_periods: usize,
    pub final_state: Vec<f64>,
}

impl LyapunovEstimate {
    /// Positive with the band clear of zero.
    pub fn positive(&self) -> bool {
        self.band.0 > 0.0
    }
}

/// Averages the logarithmic growth of a tangent vector along the orbit of
/// `z0`, renormalized every period, after `burn_in` periods.
pub fn lyapunov_exponent(
    ctx: &MapContext,
    z0: &DVector<f64>,
    n_iter: usize,
    opts: &ChaosOptions,
) -> Result<LyapunovEstimate> {
    let period = ctx.sys.period();
    let d = z0.len();
    let blocks = opts.blocks.max(2).min(n_iter.max(2));
    if n_iter < blocks {
        return Err(Error::InvalidInput(format!("need at least {blocks} periods, got {n_iter}")));
    }
    let mut z = z0.clone();
    for it in 0..opts.burn_in {
        z = ctx.forward(&z, 1)?.0;
        if !(z.norm() <= opts.escape_radius) {
            return Err(Error::Escape { norm: z.norm(), iterations: it + 1 });
        }
    }
    let mut v = DVector::from_element(d, 1.0 / (d as f64).sqrt());
    let mut vbar: DVector<f64> = DVector::from_element(d - 2, 1.0 / ((d - 2).max(1) as f64).sqrt());
    let mut logs = Vec::with_capacity(n_iter);
    let mut bar_logs = Vec::new();
    let mut fd_periods = 0;
    let mut stuck = 0;
    for it in 0..n_iter {
        let (zn, jac, fd) = ctx.jacobian(&z, opts.fd_step)?;
        if fd {
            fd_periods += 1;
            // the fallback also covers sticking periods; detect them directly
            let t0 = -ctx.theta;
            let cfg_stuck = simulate(ctx.sys, &State::new(t0, z.as_slice().to_vec()), t0 + period, ctx.mu, ctx.opts)
                .map(|tr| !tr.sticking.is_empty())
                .unwrap_or(false);
            if cfg_stuck {
                stuck += 1;
                if d > 2 {
                    let sub = jac.view((2, 2), (d - 2, d - 2)) * &vbar;
                    let nb = sub.norm();
                    bar_logs.push(if nb > 0.0 { nb.ln() } else { f64::NEG_INFINITY });
                    if nb > 0.0 {
                        vbar = sub / nb;
                    }
                } else {
                    bar_logs.push(f64::NEG_INFINITY);
                }
            }
        }
        v = jac * v;
        let nv = v.norm();
        logs.push(if nv > 0.0 { nv.ln() / period } else { f64::NEG_INFINITY });
        if nv > 0.0 {
            v /= nv;
        } else {
            v = DVector::from_element(d, 1.0 / (d as f64).sqrt());
        }
        z = zn;
        if !(z.norm() <= opts.escape_radius) {
            return Err(Error::Escape { norm: z.norm(), iterations: opts.burn_in + it + 1 });
        }
    }
    let fraction = stuck as f64 / n_iter as f64;
    if fraction > 0.5 {
        let constrained = bar_logs.iter().sum::<f64>() / (bar_logs.len() as f64 * period);
        return Err(Error::StickingDominated { fraction, constrained_exponent: constrained });
    }
    let per = n_iter / blocks;
    let means: Vec<f64> = (0..blocks).map(|b| logs[b * per..(b + 1) * per].iter().sum::<f64>() / per as f64).collect();
    let used = &logs[..blocks * per];
    let exponent = used.iter().sum::<f64>() / used.len() as f64;
    let var = means.iter().map(|m| (m - exponent).powi(2)).sum::<f64>() / (blocks - 1) as f64;
    let std_error = (var / blocks as f64).sqrt();
    Ok(LyapunovEstimate {
        exponent,
        std_error,
        band: (exponent - 3.0 * std_error, exponent + 3.0 * std_error),
        periods: n_iter,
        burn_in: opts.burn_in,
        blocks,
        fd_periods,
        final_state: z.as_slice().to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Saddle,
    Stable,
    Unstable,
    /// Some multiplier within the margin of the unit circle.
    Nonhyperbolic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodicPoint {
    pub z: Vec<f64>,
    /// Minimal period.
    pub period: usize,
    /// Power of the map the Newton search ran on.
    pub searched_m: usize,
    /// `|S^p(z) - z|` from a fresh simulation over the minimal period.
    pub residual: f64,
    /// Moduli of the multipliers over the minimal period.
    pub multipliers: Vec<f64>,
    pub stability: Stability,
    pub orbit: Vec<Vec<f64>>,
    /// The orbit is the fixed point the analysis started from.
    pub is_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodicCensus {
    pub points: Vec<PeriodicPoint>,
    pub seeds: usize,
    pub failures: usize,
}

impl PeriodicCensus {
    /// Distinct saddle orbits other than the reference fixed point.
    pub fn extra_saddles(&self) -> usize {
        self.points.iter().filter(|p| p.stability == Stability::Saddle && !p.is_reference).count()
    }
}

fn newton_periodic(ctx: &MapContext, z0: &DVector<f64>, m: usize, opts: &ChaosOptions) -> Result<DVector<f64>> {
    let mut z = z0.clone();
    let d = z.len();
    let g = |z: &DVector<f64>| -> Result<DVector<f64>> { Ok(iterate_map(ctx.sys, ctx.theta, z, ctx.mu, m, ctx.opts)? - z) };
    let mut r = g(&z)?;
    let tol = 1e-2 * opts.residual_tol;
    for _ in 0..opts.max_newton {
        if r.norm() <= tol {
            return Ok(z);
        }
        let mut jac = DMatrix::identity(d, d);
        let mut y = z.clone();
        for _ in 0..m {
            let (yn, j, _) = ctx.jacobian(&y, opts.fd_step)?;
            jac = j * jac;
            y = yn;
        }
        let lhs = jac - DMatrix::identity(d, d);
        let step = lhs.lu().solve(&(-&r)).ok_or(Error::NewtonFailure { iterations: 0, residual: r.norm() })?;
        let mut lambda = 1.0;
        let mut ok = false;
        for _ in 0..10 {
            let zt = &z + &step * lambda;
            if zt.norm() <= opts.escape_radius {
                if let Ok(rt) = g(&zt) {
                    if rt.norm() < r.norm() {
                        z = zt;
                        r = rt;
                        ok = true;
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        if !ok {
            break;
        }
    }
    if r.norm() <= opts.residual_tol {
        Ok(z)
    } else {
        Err(Error::NewtonFailure { iterations: opts.max_newton, residual: r.norm() })
    }
}

fn classify(ctx: &MapContext, z: &DVector<f64>, m: usize, opts: &ChaosOptions) -> Result<(Vec<f64>, Stability)> {
    let d = z.len();
    let mut jac = DMatrix::identity(d, d);
    let mut y = z.clone();
    for _ in 0..m {
        let (yn, j, _) = ctx.jacobian(&y, opts.fd_step)?;
        jac = j * jac;
        y = yn;
    }
    let mods: Vec<f64> = eigenvalues(&jac).iter().map(|l| l.norm()).collect();
    let margin = 1e-6;
    let stability = if mods.iter().any(|&l| (l - 1.0).abs() <= margin) {
        Stability::Nonhyperbolic
    } else if mods.iter().all(|&l| l < 1.0) {
        Stability::Stable
    } else if mods.iter().all(|&l| l > 1.0) {
        Stability::Unstable
    } else {
        Stability::Saddle
    };
    Ok((mods, stability))
}

/// Newton search for periodic points of `S^m` from every seed, with
/// deduplication by orbit and classification by the multipliers over the
/// minimal period. Seeds that fail are counted, not fatal.
pub fn find_periodic_points(
    ctx: &MapContext,
    m: usize,
    seeds: &[DVector<f64>],
    reference: Option<&DVector<f64>>,
    opts: &ChaosOptions,
) -> Result<PeriodicCensus> {
    if m == 0 {
        return Err(Error::InvalidInput("period m must be at least 1".into()));
    }
    let found: Vec<Option<DVector<f64>>> =
        seeds.par_iter().map(|s| newton_periodic(ctx, s, m, opts).ok()).collect();
    let failures = found.iter().filter(|f| f.is_none()).count();
    let mut points: Vec<PeriodicPoint> = Vec::new();
    for z in found.into_iter().flatten() {
        if points.iter().any(|p| p.orbit.iter().any(|q| dist(q, z.as_slice()) <= opts.dedupe_tol)) {
            continue;
        }
        let mut orbit = vec![z.clone()];
        let mut period = m;
        let mut y = z.clone();
        for k in 1..m {
            y = ctx.forward(&y, 1)?.0;
            if (&y - &z).norm() <= opts.dedupe_tol {
                period = k;
                break;
            }
            orbit.push(y.clone());
        }
        if m % period != 0 {
            continue;
        }
        let residual = (iterate_map(ctx.sys, ctx.theta, &z, ctx.mu, period, ctx.opts)? - &z).norm();
        let (multipliers, stability) = classify(ctx, &z, period, opts)?;
        let is_reference = reference.is_some_and(|r| orbit.iter().any(|q| (q - r).norm() <= opts.dedupe_tol));
        points.push(PeriodicPoint {
            z: z.as_slice().to_vec(),
            period,
            searched_m: m,
            residual,
            multipliers,
            stability,
            orbit: orbit.iter().map(|q| q.as_slice().to_vec()).collect(),
            is_reference,
        });
    }
    points.sort_by(|a, b| a.period.cmp(&b.period).then(a.z[0].total_cmp(&b.z[0])).then(a.z[1].total_cmp(&b.z[1])));
    Ok(PeriodicCensus { points, seeds: seeds.len(), failures })
}

/// Seed grid in a box around `center` plus the given extra points.
pub fn seed_grid(center: &DVector<f64>, half_width: f64, per_dim: usize, extra: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let d = center.len();
    let per = per_dim.max(1);
    let total = per.pow(d as u32);
    let mut out = Vec::with_capacity(total + extra.len());
    for idx in 0..total {
        let mut z = center.clone();
        let mut k = idx;
        for c in 0..d {
            let i = k % per;
            k /= per;
            let f = if per == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (per - 1) as f64 };
            z[c] += half_width * f;
        }
        out.push(z);
    }
    out.extend(extra.iter().cloned());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveSummary {
    pub points: usize,
    pub corners: usize,
    pub escaped: usize,
    pub failed: usize,
    pub unresolved: usize,
    pub piece_lengths: Vec<f64>,
}

impl From<&ManifoldCurve> for CurveSummary {
    fn from(c: &ManifoldCurve) -> Self {
        Self {
            points: c.points.len(),
            corners: c.points.iter().filter(|p| p.corner).count(),
            escaped: c.escaped,
            failed: c.failed,
            unresolved: c.unresolved,
            piece_lengths: c.piece_lengths(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosReport {
    pub system: String,
    pub mu: f64,
    pub theta: f64,
    #[serde(serialize_with = "vector")]
    pub z_star: DVector<f64>,
    pub fixed_point_residual: f64,
    pub multipliers: Vec<[f64; 2]>,
    pub local: Option<LocalManifolds>,
    pub unstable: Option<CurveSummary>,
    pub stable: Option<CurveSummary>,
    /// `planar` for one degree of freedom, `reduced` otherwise.
    pub fidelity: String,
    pub homoclinic_points: Vec<HomoclinicPoint>,
    pub rejected_candidates: usize,
    /// Smallest excursion of a validated transversal homoclinic orbit, if
    /// at most `m_max`.
    pub m: Option<usize>,
    pub lyapunov: Option<LyapunovEstimate>,
    pub periodic: Vec<PeriodicCensus>,
    pub notes: Vec<String>,
    pub disclaimers: Vec<String>,
}

/// Curves and report of a chaos analysis.
#[derive(Debug, Clone)]
pub struct ChaosAnalysis {
    pub report: ChaosReport,
    pub unstable: Option<ManifoldCurve>,
    pub stable: Option<ManifoldCurve>,
}

fn candidates(
    ctx: &MapContext,
    local: &LocalManifolds,
    ws: &ManifoldCurve,
    wu: &ManifoldCurve,
    opts: &ChaosOptions,
) -> Result<Vec<Candidate>> {
    let split = &local.split;
    if split.z_star.len() == 2 {
        let xs = find_homoclinic(ws, wu, 10.0 * local.seed_delta)?;
        Ok(planar_candidates(split, ws, wu, &xs))
    } else {
        let radius = opts.local_radius * (1.0 + split.z_star.norm());
        Ok(stable_set_candidates(ctx, split, wu, radius, opts))
    }
}

/// Unrefined homoclinic points found with curves grown at half the gap;
/// marks each point reproduced within `10 max_gap`.
pub fn check_persistence(
    ctx: &MapContext,
    local: &LocalManifolds,
    points: &mut [HomoclinicPoint],
    opts: &ChaosOptions,
) -> Result<()> {
    let fine = ChaosOptions { max_gap: 0.5 * opts.max_gap, max_points: 2 * opts.max_points, ..opts.clone() };
    let wu = grow_manifold(ctx, local, ManifoldKind::Unstable, &fine);
    let ws = grow_manifold(ctx, local, ManifoldKind::Stable, &fine);
    let raw = candidates(ctx, local, &ws, &wu, &fine)?;
    for h in points {
        h.persistent = Some(raw.iter().any(|c| dist(c.u_point.as_slice(), &h.point) <= 10.0 * opts.max_gap));
    }
    Ok(())
}

/// Homoclinic points of the saddle: crossings (planar) or stable-set sign
/// changes (higher dimension) refined by multiple shooting and deduplicated.
pub fn homoclinic_points(
    ctx: &MapContext,
    local: &LocalManifolds,
    ws: &ManifoldCurve,
    wu: &ManifoldCurve,
    opts: &ChaosOptions,
) -> Result<(Vec<HomoclinicPoint>, usize)> {
    let split = &local.split;
    let exclude = 10.0 * local.seed_delta;
    let cands = candidates(ctx, local, ws, wu, opts)?;
    debug!("{} homoclinic candidates", cands.len());
    let refined: Vec<Result<HomoclinicPoint>> = cands.par_iter().map(|c| refine(ctx, split, c, opts)).collect();
    let mut out: Vec<HomoclinicPoint> = Vec::new();
    let mut rejected = 0;
    for r in refined {
        match r {
            Ok(h) if dist(&h.point, split.z_star.as_slice()) > exclude => {
                if !out.iter().any(|o| dist(&o.point, &h.point) <= 1e-8 * (1.0 + split.z_star.norm())) {
                    out.push(h);
                }
            }
            Ok(_) => rejected += 1,
            Err(e) => {
                debug!("homoclinic refinement failed: {e}");
                rejected += 1;
            }
        }
    }
    out.sort_by(|a, b| {
        (a.unstable_iterates + a.stable_iterates)
            .cmp(&(b.unstable_iterates + b.stable_iterates))
            .then(a.point[0].total_cmp(&b.point[0]))
            .then(a.point[1].total_cmp(&b.point[1]))
    });
    Ok((out, rejected))
}

/// Full chaos analysis around the fixed point `orbit` of `S_{mu,theta}`.
/// A fixed point that is not a saddle yields no manifolds or homoclinic
/// points; the exponent and the periodic census are still computed.
pub fn chaos_analysis(sys: &SystemDefinition, orbit: &PeriodicOrbit, opts: &ChaosOptions) -> Result<ChaosAnalysis> {
    let ctx = MapContext { sys, theta: orbit.theta, mu: orbit.mu, opts: &opts.integrator };
    let z_star = orbit.z_star.clone();
    let residual = (ctx.forward(&z_star, 1)?.0 - &z_star).norm();
    let multipliers = eigenvalues(&orbit.jacobian).iter().map(|l| [l.re, l.im]).collect();
    let mut notes = Vec::new();
    let mut disclaimers = vec![
        "periodic points, Lyapunov exponent and homoclinic transversality are numerical surrogates; \
         no invariant set is certified"
            .to_string(),
        "homoclinic orbits are refined multiple-shooting pseudo-orbits; their monotone approach is \
         checked on the refined orbit"
            .to_string(),
    ];
    let fidelity = if sys.dof() == 1 { "planar" } else { "reduced" }.to_string();
    if sys.dof() > 1 {
        disclaimers.push(
            "reduced fidelity: only the dominant one-dimensional unstable curve is grown and tested \
             against the codimension-one stable set"
                .into(),
        );
    }
    let (local, wu, ws, hom, rejected) = match local_manifolds(&ctx, orbit, opts.seed_delta) {
        Ok(local) => {
            let wu = grow_manifold(&ctx, &local, ManifoldKind::Unstable, opts);
            let ws = grow_manifold(&ctx, &local, ManifoldKind::Stable, opts);
            let (mut hom, rejected) = homoclinic_points(&ctx, &local, &ws, &wu, opts)?;
            if opts.check_persistence && !hom.is_empty() {
                check_persistence(&ctx, &local, &mut hom, opts)?;
            }
            (Some(local), Some(wu), Some(ws), hom, rejected)
        }
        Err(e) => {
            notes.push(format!("no manifolds: {e}"));
            (None, None, None, Vec::new(), 0)
        }
    };
    info!("{} homoclinic points ({} candidates rejected)", hom.len(), rejected);
    let m = hom
        .iter()
        .filter(|h| h.validated())
        .map(|h| h.excursion)
        .filter(|&k| k <= opts.m_max)
        .min();
    let start = match &local {
        Some(l) => &z_star + &l.split.u_plus * (100.0 * l.seed_delta),
        None => z_star.add_scalar(1e-3),
    };
    let lyapunov = match lyapunov_exponent(&ctx, &start, opts.lyapunov_iter, opts) {
        Ok(l) => Some(l),
        Err(e) => {
            notes.push(format!("lyapunov exponent: {e}"));
            None
        }
    };
    let extra: Vec<DVector<f64>> = hom
        .iter()
        .flat_map(|h| h.orbit.iter().map(|p| DVector::from_column_slice(p)))
        .filter(|p| (p - &z_star).norm() > 1e-3 * (1.0 + z_star.norm()))
        .collect();
    let seeds = seed_grid(&z_star, opts.seed_box * (1.0 + z_star.norm()), opts.seed_grid, &extra);
    let mut periodic = Vec::new();
    for &mm in &opts.periodic_m {
        periodic.push(find_periodic_points(&ctx, mm, &seeds, Some(&z_star), opts)?);
    }
    let report = ChaosReport {
        system: sys.name().to_string(),
        mu: orbit.mu,
        theta: orbit.theta,
        z_star,
        fixed_point_residual: residual,
        multipliers,
        unstable: wu.as_ref().map(CurveSummary::from),
        stable: ws.as_ref().map(CurveSummary::from),
        local,
        fidelity,
        homoclinic_points: hom,
        rejected_candidates: rejected,
        m,
        lyapunov,
        periodic,
        notes,
        disclaimers,
    };
    Ok(ChaosAnalysis { report, unstable: wu, stable: ws })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub(points: &[[f64; 2]]) -> ManifoldCurve {
        let n = points.len();
        ManifoldCurve {
            kind: ManifoldKind::Unstable,
            center: vec![0.0, 0.0],
            direction: vec![1.0, 0.0],
            eigenvalue: 2.0,
            seed_delta: 1e-3,
            max_gap: 1.0,
            depth: 0,
            points: points
                .iter()
                .enumerate()
                .map(|(i, p)| ManifoldPoint {
                    branch: 1,
                    piece: 0,
                    sigma: i as f64,
                    z: p.to_vec(),
                    contacts: 0,
                    corner: false,
                    arclength: 0.0,
                    linked: i + 1 < n,
                })
                .collect(),
            escaped: 0,
            failed: 0,
            unresolved: 0,
        }
    }

    #[test]
    fn perpendicular_stubs_cross_once() {
        let a = stub(&[[0.0, 1.0], [2.0, 1.0]]);
        let b = stub(&[[1.0, 0.0], [1.0, 2.0]]);
        let x = find_homoclinic(&a, &b, 1e-2).unwrap();
        assert_eq!(x.len(), 1);
        assert!((x[0].point[0] - 1.0).abs() < 1e-15 && (x[0].point[1] - 1.0).abs() < 1e-15);
        assert!((x[0].angle - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn parallel_stubs_do_not_cross() {
        let a = stub(&[[0.0, 1.0], [2.0, 1.0]]);
        let b = stub(&[[0.0, 2.0], [2.0, 2.0]]);
        assert!(find_homoclinic(&a, &b, 1e-2).unwrap().is_empty());
    }

    #[test]
    fn complement_is_orthonormal() {
        let v = DVector::from_vec(vec![0.3, -0.5, 0.1, 0.8]).normalize();
        let w = complement_basis(&v);
        assert!((w.transpose() * &v).amax() < 1e-15);
        assert!((w.transpose() * &w - DMatrix::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn saddle_split_of_diagonal() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let s = saddle_split(&DVector::zeros(2), &d, 1e-6).unwrap();
        assert_eq!(s.lambda_u, 2.0);
        assert_eq!(s.lambda_s, 0.5);
        assert!((s.u_plus[0].abs() - 1.0).abs() < 1e-15 && (s.u_minus[1].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_covers_box() {
        let g = seed_grid(&DVector::zeros(2), 1.0, 3, &[]);
        assert_eq!(g.len(), 9);
        assert!(g.iter().any(|z| z[0] == -1.0 && z[1] == 1.0));
    }
}
