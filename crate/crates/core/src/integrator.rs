//! Event-driven integration of the hybrid system.
//!
//! Smooth arcs use the Dormand-Prince 5(4) pair with error control on the
//! state only; the matrix variational equation can ride along on the same
//! step sequence. Dense output is a quintic Hermite interpolant built from the
//! state and its first two time derivatives at each step end.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{check_dim, ImpactEvent, State, SystemDefinition};
use crate::numeric::brent;
use crate::variational::{saltation_from, SaltationData};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegratorOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Absolute tolerance on `x_1` at located events.
    pub tol_event: f64,
    /// Approach speeds below this are grazing contacts.
    pub graze_tol: f64,
    /// Chatter cap: impacts within one unit of time before snapping to sticking.
    pub max_impacts: usize,
    /// Rebound speeds below this enter sticking when the wall pushes back.
    pub v_stick: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            tol_event: 1e-10,
            graze_tol: 1e-6,
            max_impacts: 50,
            v_stick: 1e-5,
            max_step: 0.1,
            max_steps: 5_000_000,
        }
    }
}

impl IntegratorOptions {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("tol_event", self.tol_event),
            ("graze_tol", self.graze_tol),
            ("v_stick", self.v_stick),
            ("max_step", self.max_step),
        ];
        for (k, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{k} must be positive, got {v}")));
            }
        }
        if self.max_impacts == 0 || self.max_steps == 0 {
            return Err(Error::InvalidInput("max_impacts and max_steps must be positive".into()));
        }
        if self.v_stick < self.graze_tol {
            return Err(Error::InvalidInput(format!(
                "v_stick ({}) must not be below graze_tol ({})",
                self.v_stick, self.graze_tol
            )));
        }
        Ok(())
    }
}

/// Internal view of a hybrid system: smooth accelerations plus the map from
/// approach speed to rebound speed. Lets the engine run both the forward
/// system and its time reversal.
pub(crate) trait Dynamics {
    fn dof(&self) -> usize;
    fn accel(&self, t: f64, z: &[f64], mu: f64, out: &mut [f64]) -> Result<()>;
    fn partials(&self, t: f64, z: &[f64], mu: f64, out: &mut [f64]) -> Result<()>;
    /// Rebound speed for approach speed `y`.
    fn rebound(&self, y: f64, mu: f64) -> Result<f64>;
    /// Derivative of the rebound speed with respect to the approach speed.
    fn rebound_slope(&self, y: f64, mu: f64) -> Result<f64>;
}

impl Dynamics for SystemDefinition {
    fn dof(&self) -> usize {
        SystemDefinition::dof(self)
    }
    fn accel(&self, t: f64, z: &[f64], mu: f64, out: &mut [f64]) -> Result<()> {
        SystemDefinition::accel(self, t, z, mu, out)
    }
    fn partials(&self, t: f64, z: &[f64], mu: f64, out: &mut [f64]) -> Result<()> {
        self.accel_partials(t, z, mu, out)
    }
    fn rebound(&self, y: f64, mu: f64) -> Result<f64> {
        Ok(self.restitution(y, mu)? * y)
    }
    fn rebound_slope(&self, y: f64, mu: f64) -> Result<f64> {
        self.r_tilde(y, mu)
    }
}

/// Time reversal `s = -t`, `w = (x, -y)`. The reversed system has the same
/// form; its impact law inverts the forward rebound map.
pub(crate) struct Reversed<'a>(pub &'a SystemDefinition);

impl Reversed<'_> {
    pub(crate) fn flip(z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(i, v)| if i % 2 == 1 { -v } else { *v }).collect()
    }

    /// Approach speed `Y` with `r(Y) Y = v`, by Newton iteration.
    fn inverse_rebound(&self, v: f64, mu: f64) -> Result<f64> {
        if v == 0.0 {
            return Ok(0.0);
        }
        let sys = self.0;
        let mut y = v / sys.restitution(v, mu)?;
        for _ in 0..50 {
            let g = sys.restitution(y, mu)? * y - v;
            let dg = sys.r_tilde(y, mu)?;
            let step = g / dg;
            y = (y - step).max(0.5 * y);
            if step.abs() <= 1e-15 * y {
                return Ok(y);
            }
        }
        Err(Error::ModelEvaluation { t: f64::NAN, what: format!("inverse restitution did not converge for speed {v}") })
    }
}

impl Dynamics for Reversed<'_> {
    fn dof(&self) -> usize {
        self.0.dof()
    }
    fn accel(&self, s: f64, w: &[f64], mu: f64, out: &mut [f64]) -> Result<()> {
        self.0.accel(-s, &Self::flip(w), mu, out)
    }
    fn partials(&self, s: f64, w: &[f64], mu: f64, out: &mut [f64]) -> Result<()> {
        let n = self.0.dof();
        self.0.accel_partials(-s, &Self::flip(w), mu, out)?;
        for k in 0..n {
            out[k] = -out[k];
        }
        for j in 0..n {
            // rows for the velocity components y_j sit at 1 + (2j + 1)
            let row = 2 + 2 * j;
            for k in 0..n {
                out[row * n + k] = -out[row * n + k];
            }
        }
        Ok(())
    }
    fn rebound(&self, v: f64, mu: f64) -> Result<f64> {
        self.inverse_rebound(v, mu)
    }
    fn rebound_slope(&self, v: f64, mu: f64) -> Result<f64> {
        let y = self.inverse_rebound(v, mu)?;
        Ok(1.0 / self.0.r_tilde(y, mu)?)
    }
}

/// One accepted step with its interpolation data (state components only).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStep {
    pub t0: f64,
    pub t1: f64,
    z0: Vec<f64>,
    z1: Vec<f64>,
    d0: Vec<f64>,
    d1: Vec<f64>,
    a0: Vec<f64>,
    a1: Vec<f64>,
}

impl DenseStep {
    fn basis(s: f64) -> [f64; 6] {
        let (s2, s3) = (s * s, s * s * s);
        let (s4, s5) = (s3 * s, s3 * s2);
        [
            1.0 - 10.0 * s3 + 15.0 * s4 - 6.0 * s5,
            s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5,
            0.5 * s2 - 1.5 * s3 + 1.5 * s4 - 0.5 * s5,
            10.0 * s3 - 15.0 * s4 + 6.0 * s5,
            -4.0 * s3 + 7.0 * s4 - 3.0 * s5,
            0.5 * s3 - s4 + 0.5 * s5,
        ]
    }

    fn basis_deriv(s: f64) -> [f64; 6] {
        let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
        [
            -30.0 * s2 + 60.0 * s3 - 30.0 * s4,
            1.0 - 18.0 * s2 + 32.0 * s3 - 15.0 * s4,
            s - 4.5 * s2 + 6.0 * s3 - 2.5 * s4,
            30.0 * s2 - 60.0 * s3 + 30.0 * s4,
            -12.0 * s2 + 28.0 * s3 - 15.0 * s4,
            1.5 * s2 - 4.0 * s3 + 2.5 * s4,
        ]
    }

    fn h(&self) -> f64 {
        self.t1 - self.t0
    }

    /// Interpolated component `i` at time `t`.
    pub fn component(&self, i: usize, t: f64) -> f64 {
        let h = self.h();
        if h == 0.0 {
            return self.z0[i];
        }
        let b = Self::basis((t - self.t0) / h);
        b[0] * self.z0[i]
            + b[1] * h * self.d0[i]
            + b[2] * h * h * self.a0[i]
            + b[3] * self.z1[i]
            + b[4] * h * self.d1[i]
            + b[5] * h * h * self.a1[i]
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.z0.len(), (0..self.z0.len()).map(|i| self.component(i, t)))
    }

    /// Time derivative of the interpolant.
    pub fn eval_derivative(&self, t: f64) -> DVector<f64> {
        let h = self.h();
        if h == 0.0 {
            return DVector::from_vec(self.d0.clone());
        }
        let b = Self::basis_deriv((t - self.t0) / h);
        DVector::from_iterator(
            self.z0.len(),
            (0..self.z0.len()).map(|i| {
                (b[0] * self.z0[i] + b[3] * self.z1[i]) / h
                    + b[1] * self.d0[i]
                    + b[2] * h * self.a0[i]
                    + b[4] * self.d1[i]
                    + b[5] * h * self.a1[i]
            }),
        )
    }

    pub fn start(&self) -> &[f64] {
        &self.z0
    }

    pub fn end(&self) -> &[f64] {
        &self.z1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SegmentKind {
    Flight,
    Sticking,
}

/// A smooth arc between junctions.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub t_start: f64,
    pub t_end: f64,
    pub steps: Vec<DenseStep>,
}

impl Segment {
    pub fn sample(&self, t: f64) -> Option<DVector<f64>> {
        if t < self.t_start || t > self.t_end {
            return None;
        }
        let i = self.steps.partition_point(|s| s.t1 < t);
        self.steps.get(i.min(self.steps.len().saturating_sub(1))).map(|s| s.eval(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StickingInterval {
    pub t_enter: f64,
    /// `None` when the trajectory ends while still on the wall.
    pub t_release: Option<f64>,
}

/// Piecewise-smooth solution over `[t0, t1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub t0: f64,
    pub t1: f64,
    pub segments: Vec<Segment>,
    pub impacts: Vec<ImpactEvent>,
    pub sticking: Vec<StickingInterval>,
    /// Right-limit state at `t1` (or at the failure time for partial results).
    pub final_state: Option<State>,
}

impl Trajectory {
    /// Dense-output state at `t`; at junctions the earlier segment wins.
    pub fn sample(&self, t: f64) -> Option<DVector<f64>> {
        self.segments.iter().find_map(|s| s.sample(t))
    }

    /// Impacts that actually reversed the velocity (grazing contacts excluded).
    pub fn transversal_impacts(&self) -> impl Iterator<Item = &ImpactEvent> {
        self.impacts.iter().filter(|e| !e.grazing)
    }

    pub fn step_count(&self) -> usize {
        self.segments.iter().map(|s| s.steps.len()).sum()
    }

    /// CSV with columns `t, x1, y1, ..., xn, yn, segment_id`. Each step
    /// contributes its start point plus `interior` evenly spaced samples;
    /// every segment closes with its end point.
    pub fn write_csv<W: Write>(&self, mut w: W, dof: usize, interior: usize) -> std::io::Result<()> {
        let mut header = vec!["t".to_string()];
        for k in 1..=dof {
            header.push(format!("x{k}"));
            header.push(format!("y{k}"));
        }
        header.push("segment_id".into());
        writeln!(w, "{}", header.join(","))?;
        for (id, seg) in self.segments.iter().enumerate() {
            for step in &seg.steps {
                for j in 0..=interior {
                    let t = step.t0 + (step.t1 - step.t0) * j as f64 / (interior + 1) as f64;
                    write_row(&mut w, t, step.eval(t).as_slice(), id)?;
                }
            }
            if let Some(last) = seg.steps.last() {
                write_row(&mut w, last.t1, last.end(), id)?;
            }
        }
        Ok(())
    }

    /// CSV with columns `tau, Y, grazing_flag`.
    pub fn write_impacts_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tau,Y,grazing_flag")?;
        for e in &self.impacts {
            writeln!(w, "{:.16e},{:.16e},{}", e.tau, e.approach_speed, u8::from(e.grazing))?;
        }
        Ok(())
    }
}

fn write_row<W: Write>(w: &mut W, t: f64, z: &[f64], id: usize) -> std::io::Result<()> {
    write!(w, "{t:.16e}")?;
    for v in z {
        write!(w, ",{v:.16e}")?;
    }
    writeln!(w, ",{id}")
}

/// Smooth arc from [`flow_smooth`]. When `bracket` is set, the arc ends at the
/// close of the step where `x_1` first crosses zero downward and the bracket
/// holds that sign change.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothArc {
    pub start: State,
    pub end: State,
    pub steps: Vec<DenseStep>,
    pub bracket: Option<(f64, f64)>,
}

impl SmoothArc {
    pub fn crossed(&self) -> bool {
        self.bracket.is_some()
    }

    pub fn sample(&self, t: f64) -> Option<DVector<f64>> {
        let i = self.steps.partition_point(|s| s.t1 < t);
        self.steps.get(i).filter(|s| t >= s.t0).map(|s| s.eval(t))
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Flight,
    Sticking,
}

/// Right-hand side evaluation with scratch buffers.
struct Field<'a, D: Dynamics> {
    dynm: &'a D,
    mu: f64,
    n: usize,
    d: usize,
    with_jac: bool,
    f: Vec<f64>,
    p: Vec<f64>,
    zbuf: Vec<f64>,
}

impl<'a, D: Dynamics> Field<'a, D> {
    fn new(dynm: &'a D, mu: f64, with_jac: bool) -> Self {
        let n = dynm.dof();
        Self {
            dynm,
            mu,
            n,
            d: 2 * n,
            with_jac,
            f: vec![0.0; n],
            p: vec![0.0; (2 * n + 1) * n],
            zbuf: vec![0.0; 2 * n],
        }
    }

    fn len(&self) -> usize {
        if self.with_jac {
            self.d + self.d * self.d
        } else {
            self.d
        }
    }

    fn eval(&mut self, mode: Mode, t: f64, u: &[f64], du: &mut [f64]) -> Result<()> {
        let (n, d) = (self.n, self.d);
        self.zbuf.copy_from_slice(&u[..d]);
        if mode == Mode::Sticking {
            self.zbuf[0] = 0.0;
            self.zbuf[1] = 0.0;
        }
        self.dynm.accel(t, &self.zbuf, self.mu, &mut self.f)?;
        for k in 0..n {
            du[2 * k] = self.zbuf[2 * k + 1];
            du[2 * k + 1] = self.f[k];
        }
        if mode == Mode::Sticking {
            du[0] = 0.0;
            du[1] = 0.0;
        }
        if self.with_jac {
            self.dynm.partials(t, &self.zbuf, self.mu, &mut self.p)?;
            let (phi, dphi) = (&u[d..], &mut du[d..]);
            for c in 0..d {
                let col = &phi[c * d..(c + 1) * d];
                let out = &mut dphi[c * d..(c + 1) * d];
                for k in 0..n {
                    out[2 * k] = col[2 * k + 1];
                    let mut s = 0.0;
                    for m in 0..d {
                        s += self.p[(1 + m) * n + k] * col[m];
                    }
                    out[2 * k + 1] = s;
                }
            }
        }
        Ok(())
    }

    /// Second time derivative of the state, from the field partials.
    fn second_derivative(&mut self, mode: Mode, t: f64, z: &[f64], zdot: &[f64]) -> Result<Vec<f64>> {
        let (n, d) = (self.n, self.d);
        self.zbuf.copy_from_slice(&z[..d]);
        let mut zd = zdot[..d].to_vec();
        if mode == Mode::Sticking {
            self.zbuf[0] = 0.0;
            self.zbuf[1] = 0.0;
            zd[0] = 0.0;
            zd[1] = 0.0;
        }
        self.dynm.partials(t, &self.zbuf, self.mu, &mut self.p)?;
        let mut a = vec![0.0; d];
        for k in 0..n {
            a[2 * k] = zd[2 * k + 1];
            let mut s = self.p[k];
            for m in 0..d {
                s += self.p[(1 + m) * n + k] * zd[m];
            }
            a[2 * k + 1] = s;
        }
        if mode == Mode::Sticking {
            a[0] = 0.0;
            a[1] = 0.0;
        }
        Ok(a)
    }

    /// One Dormand-Prince step. Returns the new state, the FSAL derivative
    /// at the new point and the scaled error norm (state components only).
    fn step(
        &mut self,
        mode: Mode,
        t: f64,
        u: &[f64],
        k1: &[f64],
        h: f64,
        opts: &IntegratorOptions,
    ) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let m = u.len();
        let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
        k.push(k1.to_vec());
        let mut tmp = vec![0.0; m];
        for s in 1..7 {
            for i in 0..m {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += A[s][j] * kj[i];
                }
                tmp[i] = u[i] + h * acc;
            }
            let mut ks = vec![0.0; m];
            self.eval(mode, t + C[s] * h, &tmp, &mut ks)?;
            k.push(ks);
        }
        // stage 7 is evaluated at the 5th-order solution, which is `tmp`
        let unew = tmp;
        let mut err = 0.0;
        for i in 0..self.d {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            let sc = opts.abs_tol + opts.rel_tol * u[i].abs().max(unew[i].abs());
            let q = h * e / sc;
            err += q * q;
        }
        let err = (err / self.d as f64).sqrt();
        if !unew.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { t: t + h });
        }
        Ok((unew, k.pop().unwrap_or_default(), err))
    }

    fn dense(
        &mut self,
        mode: Mode,
        t0: f64,
        u0: &[f64],
        d0: &[f64],
        a0: &[f64],
        t1: f64,
        u1: &[f64],
        d1: &[f64],
    ) -> Result<(DenseStep, Vec<f64>)> {
        let d = self.d;
        let a1 = self.second_derivative(mode, t1, u1, d1)?;
        Ok((
            DenseStep {
                t0,
                t1,
                z0: u0[..d].to_vec(),
                z1: u1[..d].to_vec(),
                d0: d0[..d].to_vec(),
                d1: d1[..d].to_vec(),
                a0: a0.to_vec(),
                a1: a1.clone(),
            },
            a1,
        ))
    }
}

/// Adaptive step attempt loop. Returns the accepted `(t_new, u_new, k_new)`.
#[allow(clippy::too_many_arguments)]
fn accepted_step<D: Dynamics>(
    field: &mut Field<'_, D>,
    mode: Mode,
    t: f64,
    u: &[f64],
    k1: &[f64],
    h: &mut f64,
    t_end: f64,
    opts: &IntegratorOptions,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut rejected = false;
    loop {
        let remaining = t_end - t;
        let hh = h.min(opts.max_step).min(remaining);
        if hh <= 1e-14 * t.abs().max(1.0) && hh < remaining {
            return Err(Error::StepUnderflow { t, state: u[..field.d].to_vec() });
        }
        let (unew, knew, err) = field.step(mode, t, u, k1, hh, opts)?;
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        if err <= 1.0 {
            let grow = if rejected { fac.min(1.0) } else { fac };
            // a step shortened to hit the end of the span keeps the nominal size
            let truncated = hh < h.min(opts.max_step);
            if !truncated || grow < 1.0 {
                *h = (hh * grow).min(opts.max_step);
            }
            let t_new = if hh == remaining { t_end } else { t + hh };
            return Ok((t_new, unew, knew));
        }
        rejected = true;
        *h = hh * fac.min(0.9);
    }
}

fn initial_step(opts: &IntegratorOptions) -> f64 {
    opts.max_step.min(1e-2)
}

/// Where a located crossing starts its bracket.
enum Detection {
    None,
    Bracket(f64, f64),
    /// A departing arc fell back below the wall without a resolvable apex.
    Recontact,
}

fn detect_crossing(step: &DenseStep, departing: bool) -> Result<Detection> {
    let (xa, xb) = (step.z0[0], step.z1[0]);
    let (ya, yb) = (step.z0[1], step.z1[1]);
    let xtol = 1e-15 * step.t1.abs().max(1.0);
    if departing {
        if xb >= 0.0 {
            return Ok(Detection::None);
        }
        if ya > 0.0 && yb < 0.0 {
            let t_ap = brent(|t| Ok(step.component(1, t)), step.t0, step.t1, xtol, 200)?;
            if step.component(0, t_ap) > 0.0 {
                return Ok(Detection::Bracket(t_ap, step.t1));
            }
        }
        if yb >= 0.0 {
            // still rising from the wall: round-off below zero, not a return
            return Ok(Detection::None);
        }
        return Ok(Detection::Recontact);
    }
    if xa <= 0.0 {
        return Ok(Detection::None);
    }
    if xb < 0.0 {
        return Ok(Detection::Bracket(step.t0, step.t1));
    }
    if ya < 0.0 && yb > 0.0 {
        let t_m = brent(|t| Ok(step.component(1, t)), step.t0, step.t1, xtol, 200)?;
        if step.component(0, t_m) < 0.0 {
            return Ok(Detection::Bracket(step.t0, t_m));
        }
    }
    Ok(Detection::None)
}

/// What the engine should do besides integrating.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RunConfig {
    pub with_jac: bool,
    pub record: bool,
    /// Treat entry into sticking as an error (Jacobian runs, reversed time).
    pub forbid_sticking: bool,
    /// Wall contacts whose bracket starts inside this time window are
    /// ignored; used to follow a grazing orbit through its tangency.
    pub mask: Option<(f64, f64)>,
}

impl RunConfig {
    pub fn plain() -> Self {
        Self { with_jac: false, record: false, forbid_sticking: false, mask: None }
    }

    pub fn jacobian() -> Self {
        Self { with_jac: true, record: false, forbid_sticking: true, mask: None }
    }
}

pub(crate) struct RunOutput {
    pub traj: Trajectory,
    pub z: DVector<f64>,
    pub phi: Option<DMatrix<f64>>,
    pub saltations: Vec<SaltationData>,
}

struct Engine<'a, D: Dynamics> {
    field: Field<'a, D>,
    opts: &'a IntegratorOptions,
    cfg: RunConfig,
    t: f64,
    u: Vec<f64>,
    k1: Vec<f64>,
    a0: Vec<f64>,
    h: f64,
    mode: Mode,
    departing: bool,
    armed: bool,
    steps_taken: usize,
    recent: Vec<(f64, f64)>,
    traj: Trajectory,
    current: Vec<DenseStep>,
    seg_start: f64,
    saltations: Vec<SaltationData>,
}

impl<'a, D: Dynamics> Engine<'a, D> {
    fn d(&self) -> usize {
        self.field.d
    }

    fn refresh_derivatives(&mut self) -> Result<()> {
        let mut k = vec![0.0; self.u.len()];
        self.field.eval(self.mode, self.t, &self.u, &mut k)?;
        self.a0 = self.field.second_derivative(self.mode, self.t, &self.u, &k)?;
        self.k1 = k;
        Ok(())
    }

    fn f1_at(&mut self, t: f64, z: &[f64]) -> Result<f64> {
        let mut f = vec![0.0; self.field.n];
        self.field.dynm.accel(t, z, self.field.mu, &mut f)?;
        Ok(f[0])
    }

    fn pinned_f1(&mut self, t: f64) -> Result<f64> {
        let mut z = self.u[..self.d()].to_vec();
        z[0] = 0.0;
        z[1] = 0.0;
        self.f1_at(t, &z)
    }

    fn close_segment(&mut self) {
        if !self.cfg.record || (self.current.is_empty() && self.seg_start == self.t) {
            return;
        }
        let kind = match self.mode {
            Mode::Flight => SegmentKind::Flight,
            Mode::Sticking => SegmentKind::Sticking,
        };
        let steps = std::mem::take(&mut self.current);
        self.traj.segments.push(Segment { kind, t_start: self.seg_start, t_end: self.t, steps });
        self.seg_start = self.t;
    }

    fn push_step(&mut self, step: DenseStep) {
        if self.cfg.record {
            self.current.push(step);
        }
    }

    fn count_step(&mut self) -> Result<()> {
        self.steps_taken += 1;
        if self.steps_taken > self.opts.max_steps {
            return Err(Error::StepBudget { t: self.t, max_steps: self.opts.max_steps });
        }
        Ok(())
    }

    fn masked(&self, t: f64) -> bool {
        self.cfg.mask.is_some_and(|(a, b)| t >= a && t <= b)
    }

    /// Handles a start state lying on the wall.
    fn start(&mut self) -> Result<()> {
        let z = &self.u[..self.d()];
        let (x1, y1) = (z[0], z[1]);
        if x1 < -self.opts.tol_event {
            return Err(Error::InvalidInput(format!("initial state has x1 = {x1} < 0")));
        }
        if x1 > self.opts.tol_event || self.masked(self.t) {
            return Ok(());
        }
        self.u[0] = 0.0;
        if y1 < 0.0 {
            return self.contact();
        }
        if y1 == 0.0 {
            let f1 = self.pinned_f1(self.t)?;
            if f1 <= 0.0 {
                return self.enter_sticking();
            }
        }
        self.departing = true;
        Ok(())
    }

    fn run(&mut self, t_end: f64) -> Result<()> {
        self.start()?;
        self.refresh_derivatives()?;
        while self.t < t_end {
            self.count_step()?;
            match self.mode {
                Mode::Flight => self.flight_step(t_end)?,
                Mode::Sticking => self.sticking_step(t_end)?,
            }
        }
        Ok(())
    }

    fn flight_step(&mut self, t_end: f64) -> Result<()> {
        let (t, u, k1) = (self.t, self.u.clone(), self.k1.clone());
        let (tb, ub, kb) = accepted_step(&mut self.field, Mode::Flight, t, &u, &k1, &mut self.h, t_end, self.opts)?;
        let (step, ab) = self.field.dense(Mode::Flight, t, &u, &k1, &self.a0, tb, &ub, &kb)?;
        let mut detection = if self.armed { detect_crossing(&step, self.departing)? } else { Detection::None };
        match detection {
            Detection::Bracket(lo, _) if self.masked(lo) => detection = Detection::None,
            Detection::Recontact if self.masked(t) => detection = Detection::None,
            _ => {}
        }
        match detection {
            Detection::None => {
                self.push_step(step);
                self.t = tb;
                self.u = ub;
                self.k1 = kb;
                self.a0 = ab;
                if self.departing && self.u[0] > 0.0 {
                    self.departing = false;
                }
                if !self.armed && self.u[1] > 0.0 {
                    self.armed = true;
                    self.departing = self.u[0] <= 0.0;
                }
                Ok(())
            }
            Detection::Bracket(lo, hi) => {
                let tau = self.locate(&step, lo, hi, &u, &k1)?;
                let u_tau = self.advance_to(Mode::Flight, t, &u, &k1, tau)?;
                self.finish_partial_step(Mode::Flight, t, &u, &k1, tau, u_tau)?;
                self.contact()
            }
            Detection::Recontact => {
                // the rebound never cleared the wall at resolvable precision
                self.push_step(step);
                self.t = tb;
                self.u = ub;
                self.k1 = kb;
                self.a0 = ab;
                self.u[0] = 0.0;
                let f1 = self.pinned_f1(self.t)?;
                if f1 <= 0.0 {
                    self.enter_sticking()?;
                } else {
                    self.u[1] = self.u[1].max(0.0);
                    self.refresh_derivatives()?;
                }
                Ok(())
            }
        }
    }

    /// Root of `x_1` on the dense output, then Newton polishing on single
    /// Runge-Kutta steps from the step start.
    fn locate(&mut self, step: &DenseStep, lo: f64, hi: f64, u: &[f64], k1: &[f64]) -> Result<f64> {
        let xtol = 1e-15 * hi.abs().max(1.0);
        let mut tau = brent(|t| Ok(step.component(0, t)), lo, hi, xtol, 200)?;
        for _ in 0..4 {
            let ut = self.advance_to(Mode::Flight, step.t0, u, k1, tau)?;
            let (x, v) = (ut[0], ut[1]);
            if x.abs() <= 1e-3 * self.opts.tol_event || v.abs() < self.opts.graze_tol {
                break;
            }
            let next = (tau - x / v).clamp(lo, hi);
            if next == tau {
                break;
            }
            tau = next;
        }
        Ok(tau)
    }

    fn advance_to(&mut self, mode: Mode, t: f64, u: &[f64], k1: &[f64], tau: f64) -> Result<Vec<f64>> {
        if tau == t {
            return Ok(u.to_vec());
        }
        let (ut, _, _) = self.field.step(mode, t, u, k1, tau - t, self.opts)?;
        Ok(ut)
    }

    fn finish_partial_step(
        &mut self,
        mode: Mode,
        t: f64,
        u: &[f64],
        k1: &[f64],
        tau: f64,
        u_tau: Vec<f64>,
    ) -> Result<()> {
        let mut k_tau = vec![0.0; u_tau.len()];
        self.field.eval(mode, tau, &u_tau, &mut k_tau)?;
        if tau > t && self.cfg.record {
            let a0 = self.a0.clone();
            let (step, _) = self.field.dense(mode, t, u, k1, &a0, tau, &u_tau, &k_tau)?;
            self.push_step(step);
        }
        self.t = tau;
        self.u = u_tau;
        Ok(())
    }

    /// State sits on the wall at `self.t`: impact, grazing contact or sticking.
    fn contact(&mut self) -> Result<()> {
        let d = self.d();
        let mu = self.field.mu;
        self.u[0] = 0.0;
        let z_pre: Vec<f64> = self.u[..d].to_vec();
        let approach = -z_pre[1];
        if approach >= self.opts.graze_tol {
            let rebound = self.field.dynm.rebound(approach, mu)?;
            if self.cfg.with_jac {
                let salt = saltation_from(self.field.dynm, self.t, &z_pre, mu)?;
                let phi = DMatrix::from_column_slice(d, d, &self.u[d..]);
                let updated = &salt.b * phi;
                self.u[d..].copy_from_slice(updated.as_slice());
                self.saltations.push(salt);
            }
            self.u[1] = rebound;
            self.traj.impacts.push(ImpactEvent {
                tau: self.t,
                z_pre,
                z_post: self.u[..d].to_vec(),
                approach_speed: approach,
                grazing: false,
            });
            self.close_segment();
            let chatter = self.record_recent(approach);
            let f1 = self.pinned_f1(self.t)?;
            if f1 <= 0.0 && (rebound < self.opts.v_stick || chatter) {
                return self.enter_sticking();
            }
            self.departing = true;
            self.refresh_derivatives()
        } else {
            let f1 = self.f1_at(self.t, &z_pre)?;
            if self.cfg.with_jac {
                return Err(Error::NearGrazing { y: approach, graze_tol: self.opts.graze_tol });
            }
            self.traj.impacts.push(ImpactEvent {
                tau: self.t,
                z_pre: z_pre.clone(),
                z_post: z_pre,
                approach_speed: approach.max(0.0),
                grazing: true,
            });
            if f1 > 0.0 {
                self.armed = false;
                self.refresh_derivatives()
            } else if f1 < 0.0 {
                self.close_segment();
                self.enter_sticking()
            } else {
                Err(Error::DegenerateTangency { t: self.t })
            }
        }
    }

    /// Tracks impacts within the last unit of time; true when the chatter
    /// cap is reached with monotonically decreasing approach speeds.
    fn record_recent(&mut self, approach: f64) -> bool {
        let now = self.t;
        self.recent.retain(|(t, _)| *t >= now - 1.0);
        self.recent.push((now, approach));
        self.recent.len() >= self.opts.max_impacts && self.recent.windows(2).all(|w| w[1].1 < w[0].1)
    }

    fn enter_sticking(&mut self) -> Result<()> {
        if self.cfg.forbid_sticking {
            return Err(Error::NotTransversal { t: self.t, what: "orbit enters a sticking phase".into() });
        }
        self.close_segment();
        self.u[0] = 0.0;
        self.u[1] = 0.0;
        self.mode = Mode::Sticking;
        self.recent.clear();
        self.traj.sticking.push(StickingInterval { t_enter: self.t, t_release: None });
        self.refresh_derivatives()
    }

    fn sticking_step(&mut self, t_end: f64) -> Result<()> {
        let (t, u, k1) = (self.t, self.u.clone(), self.k1.clone());
        let (tb, ub, kb) =
            accepted_step(&mut self.field, Mode::Sticking, t, &u, &k1, &mut self.h, t_end, self.opts)?;
        let (step, ab) = self.field.dense(Mode::Sticking, t, &u, &k1, &self.a0, tb, &ub, &kb)?;
        let mut zb = ub[..self.d()].to_vec();
        zb[0] = 0.0;
        zb[1] = 0.0;
        let g_end = self.f1_at(tb, &zb)?;
        if g_end <= 0.0 {
            self.push_step(step);
            self.t = tb;
            self.u = ub;
            self.k1 = kb;
            self.a0 = ab;
            return Ok(());
        }
        let n = self.field.n;
        let mu = self.field.mu;
        let dynm = self.field.dynm;
        let mut f = vec![0.0; n];
        let xtol = 1e-15 * tb.abs().max(1.0);
        let tau = brent(
            |s| {
                let mut z: Vec<f64> = step.eval(s).iter().copied().collect();
                z[0] = 0.0;
                z[1] = 0.0;
                dynm.accel(s, &z, mu, &mut f)?;
                Ok(f[0])
            },
            t,
            tb,
            xtol,
            200,
        )?;
        let u_tau = self.advance_to(Mode::Sticking, t, &u, &k1, tau)?;
        self.finish_partial_step(Mode::Sticking, t, &u, &k1, tau, u_tau)?;
        self.close_segment();
        if let Some(last) = self.traj.sticking.last_mut() {
            last.t_release = Some(self.t);
        }
        self.mode = Mode::Flight;
        self.departing = true;
        self.armed = true;
        self.refresh_derivatives()
    }
}

/// Runs the hybrid engine from `(t0, z0)` to `t1`. On failure the partial
/// trajectory (if recorded) is returned with the error.
pub(crate) fn run<D: Dynamics>(
    dynm: &D,
    t0: f64,
    z0: &[f64],
    t1: f64,
    mu: f64,
    opts: &IntegratorOptions,
    cfg: RunConfig,
) -> std::result::Result<RunOutput, (Error, Trajectory)> {
    let n = dynm.dof();
    let d = 2 * n;
    let fail = |e: Error| (e, Trajectory { t0, t1, ..Default::default() });
    opts.validate().map_err(fail)?;
    if z0.len() != d {
        return Err(fail(Error::InvalidInput(format!("state has length {}, expected {d}", z0.len()))));
    }
    if !(t1 >= t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(fail(Error::InvalidInput(format!("invalid time span [{t0}, {t1}]"))));
    }
    if !z0.iter().all(|v| v.is_finite()) {
        return Err(fail(Error::InvalidInput("non-finite initial state".into())));
    }
    let field = Field::new(dynm, mu, cfg.with_jac);
    let mut u = vec![0.0; field.len()];
    u[..d].copy_from_slice(z0);
    if cfg.with_jac {
        for i in 0..d {
            u[d + i * d + i] = 1.0;
        }
    }
    let mut eng = Engine {
        field,
        opts,
        cfg,
        t: t0,
        u,
        k1: Vec::new(),
        a0: Vec::new(),
        h: initial_step(opts),
        mode: Mode::Flight,
        departing: false,
        armed: true,
        steps_taken: 0,
        recent: Vec::new(),
        traj: Trajectory { t0, t1, ..Default::default() },
        current: Vec::new(),
        seg_start: t0,
        saltations: Vec::new(),
    };
    let outcome = eng.run(t1);
    eng.close_segment();
    eng.traj.final_state = Some(State::new(eng.t, eng.u[..d].to_vec()));
    if let Err(e) = outcome {
        return Err((e, eng.traj));
    }
    let phi = cfg.with_jac.then(|| DMatrix::from_column_slice(d, d, &eng.u[d..]));
    Ok(RunOutput { z: DVector::from_column_slice(&eng.u[..d]), traj: eng.traj, phi, saltations: eng.saltations })
}

/// Adaptive smooth flow from `s0` until `t_end` or the first step in which
/// `x_1` crosses zero downward.
pub fn flow_smooth(
    sys: &SystemDefinition,
    s0: &State,
    t_end: f64,
    mu: f64,
    opts: &IntegratorOptions,
) -> Result<SmoothArc> {
    opts.validate()?;
    check_dim(sys, s0.z.len())?;
    if !(t_end >= s0.t) {
        return Err(Error::InvalidInput(format!("end time {t_end} precedes start {}", s0.t)));
    }
    let (x1, y1) = (s0.z[0], s0.z[1]);
    let departing = x1 <= opts.tol_event;
    if x1 < -opts.tol_event || (departing && y1 < 0.0) {
        return Err(Error::InvalidInput(format!("flow must start off the wall or departing, got x1 = {x1}, y1 = {y1}")));
    }
    let mut field = Field::new(sys, mu, false);
    let mut u = s0.z.as_slice().to_vec();
    let mut k1 = vec![0.0; u.len()];
    field.eval(Mode::Flight, s0.t, &u, &mut k1)?;
    let mut a0 = field.second_derivative(Mode::Flight, s0.t, &u, &k1)?;
    let mut t = s0.t;
    let mut h = initial_step(opts);
    let mut steps = Vec::new();
    let mut departing = departing;
    let mut bracket = None;
    let mut count = 0;
    while t < t_end {
        count += 1;
        if count > opts.max_steps {
            return Err(Error::StepBudget { t, max_steps: opts.max_steps });
        }
        let (tb, ub, kb) = accepted_step(&mut field, Mode::Flight, t, &u, &k1, &mut h, t_end, opts)?;
        let (step, ab) = field.dense(Mode::Flight, t, &u, &k1, &a0, tb, &ub, &kb)?;
        let det = detect_crossing(&step, departing)?;
        steps.push(step);
        t = tb;
        u = ub;
        k1 = kb;
        a0 = ab;
        match det {
            Detection::Bracket(lo, hi) => {
                bracket = Some((lo, hi));
                break;
            }
            Detection::Recontact => {
                bracket = Some((steps.last().map_or(t, |s| s.t0), t));
                break;
            }
            Detection::None => {
                if departing && u[0] > 0.0 {
                    departing = false;
                }
            }
        }
    }
    Ok(SmoothArc { start: s0.clone(), end: State::new(t, u), steps, bracket })
}

/// Impact instant inside the bracket of a crossing arc.
pub fn locate_impact(arc: &SmoothArc, opts: &IntegratorOptions) -> Result<f64> {
    let (lo, hi) = arc.bracket.ok_or(Error::BracketFailure { lo: arc.start.t, hi: arc.end.t })?;
    let step = arc.steps.last().ok_or(Error::BracketFailure { lo, hi })?;
    let xtol = (1e-3 * opts.tol_event).min(1e-15 * hi.abs().max(1.0));
    brent(|t| Ok(step.component(0, t)), lo, hi, xtol, 200)
}

/// Full hybrid simulation over `[s0.t, t1]`. Failures carry the trajectory
/// computed so far.
pub fn simulate(
    sys: &SystemDefinition,
    s0: &State,
    t1: f64,
    mu: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    let cfg = RunConfig { record: true, ..RunConfig::plain() };
    match run(sys, s0.t, s0.z.as_slice(), t1, mu, opts, cfg) {
        Ok(out) => Ok(out.traj),
        Err((e, partial)) => Err(Error::Simulation { source: Box::new(e), partial: Box::new(partial) }),
    }
}

/// `S_{mu,theta}`: state at `T - theta` (right limit) of the solution started
/// at time `-theta` from `z0`.
pub fn stroboscopic_map(
    sys: &SystemDefinition,
    theta: f64,
    z0: &DVector<f64>,
    mu: f64,
    opts: &IntegratorOptions,
) -> Result<DVector<f64>> {
    iterate_map(sys, theta, z0, mu, 1, opts)
}

/// `S^m` as a single simulation over `m` periods.
pub fn iterate_map(
    sys: &SystemDefinition,
    theta: f64,
    z0: &DVector<f64>,
    mu: f64,
    m: usize,
    opts: &IntegratorOptions,
) -> Result<DVector<f64>> {
    let t0 = -theta;
    let t1 = t0 + m as f64 * sys.period();
    map_between(sys, t0, z0, t1, mu, opts)
}

/// State at `t1` of the hybrid solution from `(t0, z0)`, without recording.
pub fn map_between(
    sys: &SystemDefinition,
    t0: f64,
    z0: &DVector<f64>,
    t1: f64,
    mu: f64,
    opts: &IntegratorOptions,
) -> Result<DVector<f64>> {
    check_dim(sys, z0.len())?;
    run(sys, t0, z0.as_slice(), t1, mu, opts, RunConfig::plain()).map(|o| o.z).map_err(|(e, _)| e)
}

/// Number of wall contacts (transversal and grazing) on `[t0, t1]`.
pub fn count_impacts(
    sys: &SystemDefinition,
    t0: f64,
    z0: &DVector<f64>,
    t1: f64,
    mu: f64,
    opts: &IntegratorOptions,
) -> Result<(DVector<f64>, Vec<ImpactEvent>)> {
    check_dim(sys, z0.len())?;
    run(sys, t0, z0.as_slice(), t1, mu, opts, RunConfig::plain()).map(|o| (o.z, o.traj.impacts)).map_err(|(e, _)| e)
}

/// `S_{mu,theta}^{-1}` by integrating the time-reversed system, whose
/// impact law inverts the forward restitution map.
pub fn inverse_stroboscopic_map(
    sys: &SystemDefinition,
    theta: f64,
    z: &DVector<f64>,
    mu: f64,
    opts: &IntegratorOptions,
) -> Result<DVector<f64>> {
    inverse_iterate(sys, theta, z, mu, 1, opts).map(|(z, _)| z)
}

/// `S^{-m}` as one reversed-time simulation over `m` periods, with the
/// number of wall contacts met on the way. A backward orbit that would have
/// to leave a sticking phase is an error.
pub fn inverse_iterate(
    sys: &SystemDefinition,
    theta: f64,
    z: &DVector<f64>,
    mu: f64,
    m: usize,
    opts: &IntegratorOptions,
) -> Result<(DVector<f64>, usize)> {
    check_dim(sys, z.len())?;
    let rev = Reversed(sys);
    let w0 = Reversed::flip(z.as_slice());
    let s0 = theta - m as f64 * sys.period();
    let cfg = RunConfig { forbid_sticking: true, ..RunConfig::plain() };
    let out = run(&rev, s0, &w0, theta, mu, opts, cfg).map_err(|(e, _)| e)?;
    Ok((DVector::from_vec(Reversed::flip(out.z.as_slice())), out.traj.impacts.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{BouncingBall, ImpactOscillator};

    fn opts() -> IntegratorOptions {
        IntegratorOptions::default()
    }

    #[test]
    fn hermite_reproduces_quintics() {
        let p = |t: f64| 1.0 - 2.0 * t + 0.5 * t.powi(3) + 0.25 * t.powi(5);
        let dp = |t: f64| -2.0 + 1.5 * t * t + 1.25 * t.powi(4);
        let ddp = |t: f64| 3.0 * t + 5.0 * t.powi(3);
        let (t0, t1) = (0.3, 1.1);
        let step = DenseStep {
            t0,
            t1,
            z0: vec![p(t0)],
            z1: vec![p(t1)],
            d0: vec![dp(t0)],
            d1: vec![dp(t1)],
            a0: vec![ddp(t0)],
            a1: vec![ddp(t1)],
        };
        for t in [0.3, 0.5, 0.77, 1.1] {
            assert!((step.component(0, t) - p(t)).abs() < 1e-13);
            assert!((step.eval_derivative(t)[0] - dp(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn ball_first_crossing() {
        let sys = BouncingBall { g: 1.0, r: 0.5, period: 1.0 }.system().unwrap();
        let arc = flow_smooth(&sys, &State::new(0.0, vec![1.0, 0.0]), 5.0, 0.0, &opts()).unwrap();
        assert!(arc.crossed());
        let tau = locate_impact(&arc, &opts()).unwrap();
        assert!((tau - 2f64.sqrt()).abs() < 1e-10);
        let z = arc.sample(tau).unwrap();
        assert!((z[1] + 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn quadratic_touch_without_crossing() {
        // x1 = (t - 1)^2 + 1e-3 stays positive
        let up = SystemDefinition::new("up", 1, 1.0, |_, _, _, o| o[0] = 2.0, |_, _| 0.5).unwrap();
        let arc = flow_smooth(&up, &State::new(0.0, vec![1.001, -2.0]), 2.0, 0.0, &opts()).unwrap();
        assert!(!arc.crossed());
    }

    #[test]
    fn departing_grazing_start_lifts_off() {
        let up = SystemDefinition::new("up", 1, 1.0, |_, _, _, o| o[0] = 1.0, |_, _| 0.5).unwrap();
        let arc = flow_smooth(&up, &State::new(0.0, vec![0.0, 0.0]), 1.0, 0.0, &opts()).unwrap();
        assert!(!arc.crossed());
        assert!((arc.end.z[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oscillator_free_flight_matches_closed_form() {
        let fx = ImpactOscillator::default();
        let sys = fx.system().unwrap();
        // mu = -0.5 keeps the free response off the wall
        let mu = -0.5;
        let z0 = fx.free_response(0.0, mu);
        let traj = simulate(&sys, &State::new(0.0, z0.as_slice().to_vec()), fx.period(), mu, &opts()).unwrap();
        assert!(traj.impacts.is_empty());
        let end = traj.final_state.unwrap();
        let expect = fx.free_response(fx.period(), mu);
        assert!((end.z - expect).norm() < 1e-8);
    }

    #[test]
    fn ball_chatters_to_rest() {
        let sys = BouncingBall::default().system().unwrap();
        let traj = simulate(&sys, &State::new(0.0, vec![1.0, 0.0]), 10.0, 0.0, &opts()).unwrap();
        assert_eq!(traj.sticking.len(), 1);
        assert!(traj.sticking[0].t_release.is_none());
        let end = traj.final_state.unwrap();
        assert_eq!(end.z.as_slice(), &[0.0, 0.0]);
        // accumulation time sqrt(2) (1 + 2r/(1-r)) = 3 sqrt(2)
        assert!((traj.sticking[0].t_enter - 3.0 * 2f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn sticking_release_on_sine_forcing() {
        let sys = SystemDefinition::new("sin", 1, 2.0 * std::f64::consts::PI, |t, _, _, o| o[0] = t.sin(), |_, _| 0.5)
            .unwrap();
        let pi = std::f64::consts::PI;
        let traj = simulate(&sys, &State::new(pi, vec![0.0, 0.0]), 7.0, 0.0, &opts()).unwrap();
        assert_eq!(traj.sticking.len(), 1);
        let rel = traj.sticking[0].t_release.unwrap();
        assert!((rel - 2.0 * pi).abs() < 1e-9, "{rel}");
        let end = traj.final_state.unwrap();
        assert!(end.z[0] > 0.0);
    }

    #[test]
    fn time_reversal_roundtrip_elastic() {
        let fx = ImpactOscillator { r0: 1.0, zeta: 0.0, ..Default::default() };
        let sys = fx.system().unwrap();
        let z0 = DVector::from_vec(vec![0.5, 0.3]);
        let z1 = stroboscopic_map(&sys, 0.1, &z0, 0.4, &opts()).unwrap();
        let back = inverse_stroboscopic_map(&sys, 0.1, &z1, 0.4, &opts()).unwrap();
        assert!((back - z0).norm() < 1e-7);
    }
}
