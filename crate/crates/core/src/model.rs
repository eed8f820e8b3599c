//! Vibro-impact systems: smooth dynamics `x_k' = y_k, y_k' = f_k(t, z, mu)`
//! on the half space `x_1 >= 0`, a Newtonian impact law at `x_1 = 0`, and the
//! constrained motion along the wall while the normal force pushes into it.
//!
//! State vectors are ordered `(x_1, y_1, x_2, y_2, ..., x_n, y_n)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Accelerations `f(t, z, mu)` written into a slice of length `n`.
pub type AccelFn = dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync;
/// Partials of `f` with respect to `(t, z_1, ..., z_2n)`, written row-major
/// into a slice of length `(2n + 1) * n`: row 0 holds `df/dt`, row `1 + j`
/// holds `df/dz_j`.
pub type AccelPartialsFn = dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync;
/// Restitution coefficient `r(Y, mu)` as a function of the approach speed.
pub type RestitutionFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

const FD_REL_STEP: f64 = 6.0e-6;

/// The tuple `(n, T, f, df, r, dr, J)` describing one vibro-impact system.
///
/// Immutable once built; clones share the underlying closures.
#[derive(Clone)]
pub struct SystemDefinition {
    name: String,
    dof: usize,
    period: f64,
    accel: Arc<AccelFn>,
    accel_partials: Option<Arc<AccelPartialsFn>>,
    restitution: Arc<RestitutionFn>,
    restitution_slope: Option<Arc<RestitutionFn>>,
    mu_range: (f64, f64),
}

impl fmt::Debug for SystemDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemDefinition")
            .field("name", &self.name)
            .field("dof", &self.dof)
            .field("period", &self.period)
            .field("analytic_partials", &self.accel_partials.is_some())
            .field("analytic_restitution_slope", &self.restitution_slope.is_some())
            .field("mu_range", &self.mu_range)
            .finish()
    }
}

impl SystemDefinition {
    pub fn new<F, R>(
        name: impl Into<String>,
        dof: usize,
        period: f64,
        accel: F,
        restitution: R,
    ) -> Result<Self>
    where
        F: Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync + 'static,
        R: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        if dof == 0 {
            return Err(Error::InvalidInput("degrees of freedom must be positive".into()));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::InvalidInput(format!("period must be positive, got {period}")));
        }
        Ok(Self {
            name: name.into(),
            dof,
            period,
            accel: Arc::new(accel),
            accel_partials: None,
            restitution: Arc::new(restitution),
            restitution_slope: None,
            mu_range: (0.0, f64::INFINITY),
        })
    }

    pub fn with_partials<P>(mut self, partials: P) -> Self
    where
        P: Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        self.accel_partials = Some(Arc::new(partials));
        self
    }

    pub fn with_restitution_slope<D>(mut self, slope: D) -> Self
    where
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        self.restitution_slope = Some(Arc::new(slope));
        self
    }

    pub fn with_mu_range(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::InvalidInput(format!("empty parameter range [{lo}, {hi}]")));
        }
        self.mu_range = (lo, hi);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    /// State dimension `2n`.
    pub fn dim(&self) -> usize {
        2 * self.dof
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn mu_range(&self) -> (f64, f64) {
        self.mu_range
    }

    pub fn has_analytic_partials(&self) -> bool {
        self.accel_partials.is_some()
    }

    pub fn check_mu(&self, mu: f64) -> Result<()> {
        let (lo, hi) = self.mu_range;
        if mu.is_finite() && mu >= lo && mu <= hi {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("mu = {mu} outside [{lo}, {hi}]")))
        }
    }

    /// Accelerations at `(t, z, mu)`; non-finite output is a model error.
    pub fn accel(&self, t: f64, z: &[f64], mu: f64, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(z.len(), self.dim());
        (self.accel)(t, z, mu, out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::ModelEvaluation { t, what: format!("non-finite acceleration {out:?}") })
        }
    }

    /// `(2n + 1) x n` partials of `f`, row-major. Falls back to central
    /// differences when no analytic partials were supplied.
    pub fn accel_partials(&self, t: f64, z: &[f64], mu: f64, out: &mut [f64]) -> Result<()> {
        let n = self.dof;
        debug_assert_eq!(out.len(), (2 * n + 1) * n);
        if let Some(p) = &self.accel_partials {
            p(t, z, mu, out);
            if out.iter().all(|v| v.is_finite()) {
                return Ok(());
            }
            return Err(Error::ModelEvaluation { t, what: "non-finite partials".into() });
        }
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        let h = FD_REL_STEP * t.abs().max(1.0);
        self.accel(t + h, z, mu, &mut fp)?;
        self.accel(t - h, z, mu, &mut fm)?;
        for k in 0..n {
            out[k] = (fp[k] - fm[k]) / (2.0 * h);
        }
        let mut zz = z.to_vec();
        for j in 0..2 * n {
            let h = FD_REL_STEP * z[j].abs().max(1.0);
            zz[j] = z[j] + h;
            self.accel(t, &zz, mu, &mut fp)?;
            zz[j] = z[j] - h;
            self.accel(t, &zz, mu, &mut fm)?;
            zz[j] = z[j];
            for k in 0..n {
                out[(1 + j) * n + k] = (fp[k] - fm[k]) / (2.0 * h);
            }
        }
        Ok(())
    }

    /// Restitution coefficient for approach speed `y >= 0`; must lie in (0, 1].
    pub fn restitution(&self, y: f64, mu: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "restitution takes the non-negative approach speed, got {y}"
            )));
        }
        let r = (self.restitution)(y, mu);
        if r.is_finite() && r > 0.0 && r <= 1.0 {
            Ok(r)
        } else {
            Err(Error::ModelEvaluation {
                t: f64::NAN,
                what: format!("restitution r({y}, {mu}) = {r} outside (0, 1]"),
            })
        }
    }

    /// `dr/dY` at approach speed `y`.
    pub fn restitution_slope(&self, y: f64, mu: f64) -> Result<f64> {
        if let Some(d) = &self.restitution_slope {
            let v = d(y, mu);
            return if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::ModelEvaluation { t: f64::NAN, what: "non-finite dr/dY".into() })
            };
        }
        let h = FD_REL_STEP * y.abs().max(1.0);
        if y >= h {
            Ok((self.restitution(y + h, mu)? - self.restitution(y - h, mu)?) / (2.0 * h))
        } else {
            // one-sided second-order stencil at the boundary of Y >= 0
            let r0 = self.restitution(y, mu)?;
            let r1 = self.restitution(y + h, mu)?;
            let r2 = self.restitution(y + 2.0 * h, mu)?;
            Ok((-3.0 * r0 + 4.0 * r1 - r2) / (2.0 * h))
        }
    }

    /// `r + (dr/dY) Y`, the derivative of the rebound speed `r(Y) Y`.
    pub fn r_tilde(&self, y: f64, mu: f64) -> Result<f64> {
        Ok(self.restitution(y, mu)? + self.restitution_slope(y, mu)? * y)
    }

    /// Full `2n x 2n` Jacobian of the first-order vector field.
    pub fn field_jacobian(&self, t: f64, z: &[f64], mu: f64) -> Result<DMatrix<f64>> {
        let n = self.dof;
        let mut p = vec![0.0; (2 * n + 1) * n];
        self.accel_partials(t, z, mu, &mut p)?;
        let mut j = DMatrix::zeros(2 * n, 2 * n);
        for k in 0..n {
            j[(2 * k, 2 * k + 1)] = 1.0;
            for c in 0..2 * n {
                j[(2 * k + 1, c)] = p[(1 + c) * n + k];
            }
        }
        Ok(j)
    }

    /// Trace of the field Jacobian, `sum_k df_k/dy_k`.
    pub fn field_divergence(&self, t: f64, z: &[f64], mu: f64) -> Result<f64> {
        let n = self.dof;
        let mut p = vec![0.0; (2 * n + 1) * n];
        self.accel_partials(t, z, mu, &mut p)?;
        Ok((0..n).map(|k| p[(2 + 2 * k) * n + k]).sum())
    }
}

/// A point `(t, z)` of the extended phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub t: f64,
    pub z: DVector<f64>,
}

impl State {
    pub fn new(t: f64, z: impl Into<Vec<f64>>) -> Self {
        Self { t, z: DVector::from_vec(z.into()) }
    }

    pub fn dof(&self) -> usize {
        self.z.len() / 2
    }

    /// Position of degree of freedom `k` (0-based).
    pub fn x(&self, k: usize) -> f64 {
        self.z[2 * k]
    }

    /// Velocity of degree of freedom `k` (0-based).
    pub fn y(&self, k: usize) -> f64 {
        self.z[2 * k + 1]
    }

    /// Tangential block `(x_2, y_2, ..., x_n, y_n)`.
    pub fn zbar(&self) -> DVector<f64> {
        self.z.rows(2, self.z.len() - 2).into_owned()
    }

    pub fn xbar(&self) -> Vec<f64> {
        (1..self.dof()).map(|k| self.x(k)).collect()
    }

    pub fn ybar(&self) -> Vec<f64> {
        (1..self.dof()).map(|k| self.y(k)).collect()
    }
}

/// One crossing of the wall `x_1 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImpactEvent {
    pub tau: f64,
    pub z_pre: Vec<f64>,
    pub z_post: Vec<f64>,
    /// Approach speed `Y = -y_1(tau - 0)`.
    pub approach_speed: f64,
    /// Set when `Y < graze_tol`; no velocity reversal was applied.
    pub grazing: bool,
}

/// `(y_1, f_1, ..., y_n, f_n)` at `(s.t, s.z, mu)`.
pub fn eval_vector_field(sys: &SystemDefinition, s: &State, mu: f64) -> Result<DVector<f64>> {
    check_dim(sys, s.z.len())?;
    let n = sys.dof();
    let mut f = vec![0.0; n];
    sys.accel(s.t, s.z.as_slice(), mu, &mut f)?;
    let mut out = DVector::zeros(2 * n);
    for k in 0..n {
        out[2 * k] = s.z[2 * k + 1];
        out[2 * k + 1] = f[k];
    }
    Ok(out)
}

/// Newtonian impact: `y_1 -> -r(-y_1, mu) y_1`, everything else unchanged.
pub fn apply_impact(sys: &SystemDefinition, s_pre: &State, mu: f64) -> Result<State> {
    check_dim(sys, s_pre.z.len())?;
    let y1 = s_pre.z[1];
    if !(y1 < 0.0) {
        return Err(Error::NotApproaching { y1 });
    }
    let approach = -y1;
    let r = sys.restitution(approach, mu)?;
    let mut post = s_pre.clone();
    post.z[1] = r * approach;
    Ok(post)
}

/// Reduced dynamics of `z_bar` with `(x_1, y_1)` pinned to the wall.
///
/// Empty for `n = 1`: the sticking state is then fully constrained.
pub fn sticking_vector_field(
    sys: &SystemDefinition,
    t: f64,
    zbar: &[f64],
    mu: f64,
) -> Result<DVector<f64>> {
    let n = sys.dof();
    if zbar.len() != 2 * n - 2 {
        return Err(Error::InvalidInput(format!(
            "tangential state has length {}, expected {}",
            zbar.len(),
            2 * n - 2
        )));
    }
    if n == 1 {
        return Ok(DVector::zeros(0));
    }
    let z = pinned(zbar);
    let mut f = vec![0.0; n];
    sys.accel(t, &z, mu, &mut f)?;
    let mut out = DVector::zeros(2 * n - 2);
    for k in 1..n {
        out[2 * k - 2] = zbar[2 * k - 1];
        out[2 * k - 1] = f[k];
    }
    Ok(out)
}

/// `f_1(t, 0, 0, z_bar, mu)`. Sticking persists while this is `<= 0`.
pub fn release_test(sys: &SystemDefinition, t: f64, zbar: &[f64], mu: f64) -> Result<f64> {
    let n = sys.dof();
    if zbar.len() != 2 * n - 2 {
        return Err(Error::InvalidInput(format!(
            "tangential state has length {}, expected {}",
            zbar.len(),
            2 * n - 2
        )));
    }
    let z = pinned(zbar);
    let mut f = vec![0.0; n];
    sys.accel(t, &z, mu, &mut f)?;
    Ok(f[0])
}

pub(crate) fn pinned(zbar: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(zbar.len() + 2);
    z.extend_from_slice(&[0.0, 0.0]);
    z.extend_from_slice(zbar);
    z
}

pub(crate) fn check_dim(sys: &SystemDefinition, len: usize) -> Result<()> {
    if len == sys.dim() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("state has length {len}, expected {}", sys.dim())))
    }
}
