//! Jacobians of flows and hybrid maps: matrix variational equations along
//! smooth arcs, the closed-form saltation matrix of a Newtonian impact on a
//! flat wall, and their products.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{run, Dynamics, IntegratorOptions, RunConfig};
use crate::model::{check_dim, ImpactEvent, State, SystemDefinition};

/// Jump of the state Jacobian across one transversal impact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaltationData {
    #[serde(serialize_with = "crate::report::matrix_rows")]
    pub b: DMatrix<f64>,
    pub tau: f64,
    /// Approach speed `Y`.
    pub approach_speed: f64,
    /// `r(Y)`; for a reversed-time system, rebound over approach speed.
    pub r: f64,
    /// Derivative of the rebound speed `r(Y) Y` in `Y`.
    pub r_tilde: f64,
    /// Accelerations just before the impact.
    pub f_pre: Vec<f64>,
    /// Accelerations just after the impact.
    pub f_post: Vec<f64>,
    pub b21: f64,
}

impl SaltationData {
    pub fn det(&self) -> f64 {
        self.b.determinant()
    }
}

/// Closed-form saltation matrix at pre-impact state `z_pre` (`x_1 = 0`,
/// `y_1 = -Y < 0`).
///
/// With `f^-`, `f^+` the accelerations before and after the velocity jump:
/// `B[0][0] = -r`, `B[1][1] = -r~`, `B[1][0] = -(f_1^+ + r~ f_1^-) / Y`,
/// `B[2j+1][0] = (f_j^- - f_j^+) / Y` for the tangential velocities, and the
/// identity elsewhere. The last sign follows from differentiating the impact
/// time: a later impact leaves less time to accumulate `f^+` instead of `f^-`.
pub(crate) fn saltation_from<D: Dynamics + ?Sized>(
    dynm: &D,
    tau: f64,
    z_pre: &[f64],
    mu: f64,
) -> Result<SaltationData> {
    let n = dynm.dof();
    let d = 2 * n;
    let y = -z_pre[1];
    if !(y > 0.0) {
        return Err(Error::NotApproaching { y1: z_pre[1] });
    }
    let rebound = dynm.rebound(y, mu)?;
    let r = rebound / y;
    let r_tilde = dynm.rebound_slope(y, mu)?;
    let mut pre = z_pre.to_vec();
    pre[0] = 0.0;
    let mut post = pre.clone();
    post[1] = rebound;
    let mut f_pre = vec![0.0; n];
    let mut f_post = vec![0.0; n];
    dynm.accel(tau, &pre, mu, &mut f_pre)?;
    dynm.accel(tau, &post, mu, &mut f_post)?;
    let mut b = DMatrix::identity(d, d);
    b[(0, 0)] = -r;
    b[(1, 1)] = -r_tilde;
    let b21 = -(f_post[0] + r_tilde * f_pre[0]) / y;
    b[(1, 0)] = b21;
    for j in 1..n {
        b[(2 * j + 1, 0)] = (f_pre[j] - f_post[j]) / y;
    }
    Ok(SaltationData { b, tau, approach_speed: y, r, r_tilde, f_pre, f_post, b21 })
}

/// Saltation matrix for a located impact. Grazing contacts
/// (`Y < graze_tol`) are rejected: the matrix blows up like `1/Y`.
pub fn saltation_matrix(
    sys: &SystemDefinition,
    ev: &ImpactEvent,
    mu: f64,
    graze_tol: f64,
) -> Result<SaltationData> {
    check_dim(sys, ev.z_pre.len())?;
    if ev.grazing || ev.approach_speed < graze_tol {
        return Err(Error::NearGrazing { y: ev.approach_speed, graze_tol });
    }
    saltation_from(sys, ev.tau, &ev.z_pre, mu)
}

/// `dz(t_end)/dz(t_start)` along a smooth arc; an impact or sticking phase on
/// the way is an error.
pub fn flow_jacobian(
    sys: &SystemDefinition,
    s0: &State,
    t_end: f64,
    mu: f64,
    opts: &IntegratorOptions,
) -> Result<DMatrix<f64>> {
    let mj = map_jacobian(sys, s0.t, &s0.z, t_end, mu, opts)?;
    if let Some(ev) = mj.impacts.first() {
        return Err(Error::NotTransversal { t: ev.tau, what: "arc contains an impact".into() });
    }
    Ok(mj.jacobian)
}

/// Hybrid map from `t0` to `t1` with its Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct MapJacobian {
    pub z_end: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub impacts: Vec<ImpactEvent>,
    pub saltations: Vec<SaltationData>,
}

/// Jacobian of the hybrid flow map `(t0, z0) -> z(t1)`: flow Jacobians and
/// saltation matrices multiplied in time order.
pub fn map_jacobian(
    sys: &SystemDefinition,
    t0: f64,
    z0: &DVector<f64>,
    t1: f64,
    mu: f64,
    opts: &IntegratorOptions,
) -> Result<MapJacobian> {
    map_jacobian_with(sys, t0, z0, t1, mu, opts, None)
}

/// As [`map_jacobian`], ignoring wall contacts that start inside `mask`.
pub fn map_jacobian_with(
    sys: &SystemDefinition,
    t0: f64,
    z0: &DVector<f64>,
    t1: f64,
    mu: f64,
    opts: &IntegratorOptions,
    mask: Option<(f64, f64)>,
) -> Result<MapJacobian> {
    check_dim(sys, z0.len())?;
    let cfg = RunConfig { mask, ..RunConfig::jacobian() };
    let out = run(sys, t0, z0.as_slice(), t1, mu, opts, cfg).map_err(|(e, _)| e)?;
    Ok(MapJacobian {
        z_end: out.z,
        jacobian: out.phi.expect("jacobian run"),
        impacts: out.traj.impacts,
        saltations: out.saltations,
    })
}

/// Jacobian `D` of the stroboscopic map.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincareJacobian {
    pub z_end: DVector<f64>,
    pub d: DMatrix<f64>,
    pub impacts: Vec<ImpactEvent>,
    pub saltations: Vec<SaltationData>,
    /// `(A_part, B_part)` with `D = A_part B_part`, where `B_part` covers
    /// `[-theta, theta]` and `A_part` covers `[theta, T - theta]`. Present when
    /// exactly one impact falls in the first window.
    pub split: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Jacobian of `S_{mu,theta}` at `z0`, split at `t = theta`.
pub fn poincare_jacobian(
    sys: &SystemDefinition,
    theta: f64,
    z0: &DVector<f64>,
    mu: f64,
    opts: &IntegratorOptions,
) -> Result<PoincareJacobian> {
    let period = sys.period();
    if !(theta > 0.0 && 2.0 * theta < period) {
        let whole = map_jacobian(sys, -theta, z0, period - theta, mu, opts)?;
        return Ok(PoincareJacobian {
            z_end: whole.z_end,
            d: whole.jacobian,
            impacts: whole.impacts,
            saltations: whole.saltations,
            split: None,
        });
    }
    let first = map_jacobian(sys, -theta, z0, theta, mu, opts)?;
    let second = map_jacobian(sys, theta, &first.z_end, period - theta, mu, opts)?;
    let d = &second.jacobian * &first.jacobian;
    let split = (first.impacts.len() == 1).then(|| (second.jacobian.clone(), first.jacobian.clone()));
    let mut impacts = first.impacts;
    impacts.extend(second.impacts);
    let mut saltations = first.saltations;
    saltations.extend(second.saltations);
    Ok(PoincareJacobian { z_end: second.z_end, d, impacts, saltations, split })
}

/// Jacobian of `S^m` at `z0` as the product of one-period Jacobians, with
/// the intermediate points.
pub fn iterated_jacobian(
    sys: &SystemDefinition,
    theta: f64,
    z0: &DVector<f64>,
    mu: f64,
    m: usize,
    opts: &IntegratorOptions,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = sys.dim();
    let mut z = z0.clone();
    let mut jac = DMatrix::identity(d, d);
    for _ in 0..m {
        let pj = map_jacobian(sys, -theta, &z, sys.period() - theta, mu, opts)?;
        jac = &pj.jacobian * jac;
        z = pj.z_end;
    }
    Ok((z, jac))
}
