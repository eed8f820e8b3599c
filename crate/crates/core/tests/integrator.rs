mod common;

use common::{oscillator, oscillator_orbit, rk4, tight};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vibro::fixtures::{BouncingBall, CoupledOscillator, ImpactOscillator};
use vibro::integrator::{count_impacts, inverse_iterate, iterate_map, SegmentKind};
use vibro::model::{eval_vector_field, release_test, sticking_vector_field};
use vibro::{simulate, stroboscopic_map, IntegratorOptions, State, SystemDefinition};

#[test]
fn ball_impacts_follow_geometric_series() {
    let (g, r) = (1.0, 0.5);
    let sys = BouncingBall { g, r, period: 1.0 }.system().unwrap();
    let opts = IntegratorOptions::default();
    let traj = simulate(&sys, &State::new(0.0, vec![1.0, 0.0]), 6.0, 0.0, &opts).unwrap();
    assert!(traj.impacts.len() <= opts.max_impacts);
    assert!(traj.impacts.len() >= 10);
    // flight times sqrt(2h/g), then 2 r^k v0 / g between impacts
    let v0 = (2.0 * g).sqrt();
    let mut tau = v0 / g;
    let mut v = v0;
    for (k, ev) in traj.impacts.iter().enumerate().take(20) {
        if ev.grazing {
            break;
        }
        assert!((ev.tau - tau).abs() <= 1e-8 * tau, "impact {k}: {} vs {tau}", ev.tau);
        assert!((ev.approach_speed - v).abs() <= 1e-8 * v0, "impact {k}");
        v *= r;
        tau += 2.0 * v / g;
    }
    let end = traj.final_state.unwrap();
    assert_eq!(end.z.as_slice(), &[0.0, 0.0]);
    assert_eq!(traj.sticking.len(), 1);
}

#[test]
fn map_composes_with_itself() {
    let (sys, theta) = oscillator();
    let opts = IntegratorOptions::default();
    let z0 = DVector::from_vec(vec![0.7, -1.3]);
    for mu in [0.05, 0.5] {
        let once = stroboscopic_map(&sys, theta, &z0, mu, &opts).unwrap();
        let twice = stroboscopic_map(&sys, theta, &once, mu, &opts).unwrap();
        let direct = iterate_map(&sys, theta, &z0, mu, 2, &opts).unwrap();
        assert!((&twice - &direct).norm() <= 1e-7 * (1.0 + direct.norm()), "mu = {mu}");
    }
}

#[test]
fn free_flight_at_rest_is_a_fixed_point() {
    let sys = SystemDefinition::new("free", 2, 1.7, |_, _, _, o| o.fill(0.0), |_, _| 0.5).unwrap();
    let z0 = DVector::from_vec(vec![1.0, 0.0, -0.4, 0.0]);
    let z1 = stroboscopic_map(&sys, 0.3, &z0, 0.0, &IntegratorOptions::default()).unwrap();
    assert_eq!(z1, z0);
    let traj = simulate(&sys, &State::new(0.0, vec![1.0, 0.25, 0.0, 0.0]), 2.0, 0.0, &IntegratorOptions::default())
        .unwrap();
    assert!(traj.impacts.is_empty());
    assert!((traj.final_state.unwrap().z[0] - 1.5).abs() < 1e-12);
}

#[test]
fn periodic_orbit_closes_under_simulation() {
    let (sys, orb) = oscillator_orbit(0.5);
    let traj = simulate(
        &sys,
        &State::new(-orb.theta, orb.z_star.as_slice().to_vec()),
        sys.period() - orb.theta,
        0.5,
        &IntegratorOptions::default(),
    )
    .unwrap();
    let end = traj.final_state.clone().unwrap();
    assert!((end.z - &orb.z_star).norm() <= 1e-6);
    assert_eq!(traj.transversal_impacts().count(), orb.n_impacts);
}

#[test]
fn impact_count_is_locally_constant_and_map_is_smooth() {
    let (sys, orb) = oscillator_orbit(0.5);
    let opts = tight();
    let t0 = -orb.theta;
    let t1 = t0 + sys.period();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let dir = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)).normalize();
        let z = &orb.z_star + dir * rng.random_range(0.0..1e-6);
        let (_, ev) = count_impacts(&sys, t0, &z, t1, 0.5, &opts).unwrap();
        assert_eq!(ev.len(), orb.n_impacts);
    }
    // central differences at h, h/2, h/4 converge with order two
    let dir = DVector::from_vec(vec![0.6, 0.8]);
    let s = |z: &DVector<f64>| stroboscopic_map(&sys, orb.theta, z, 0.5, &opts).unwrap();
    let cd = |h: f64| (s(&(&orb.z_star + &dir * h)) - s(&(&orb.z_star - &dir * h))) / (2.0 * h);
    let (d1, d2, d3) = (cd(0.04), cd(0.02), cd(0.01));
    let order = ((&d1 - &d2).norm() / (&d2 - &d3).norm()).log2();
    assert!(order >= 1.9, "observed order {order}");
}

#[test]
fn dense_output_satisfies_the_field() {
    let (sys, theta) = oscillator();
    let opts = IntegratorOptions::default();
    let traj = simulate(&sys, &State::new(-theta, vec![0.9, -2.0]), 20.0, 0.05, &opts).unwrap();
    let steps: Vec<_> = traj
        .segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Flight)
        .flat_map(|s| s.steps.iter())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let step = steps[rng.random_range(0..steps.len())];
        let t = step.t0 + (step.t1 - step.t0) * rng.random_range(0.01..0.99);
        let z = step.eval(t);
        let dz = step.eval_derivative(t);
        let f = eval_vector_field(&sys, &State::new(t, z.as_slice().to_vec()), 0.05).unwrap();
        assert!((&dz - &f).norm() <= 10.0 * opts.rel_tol * f.norm(), "t = {t}: {:e}", (&dz - &f).norm());
        assert!(z[0] >= -opts.tol_event);
    }
}

#[test]
fn events_are_impacts_or_flagged_grazing() {
    let (sys, theta) = oscillator();
    let opts = IntegratorOptions::default();
    let traj = simulate(&sys, &State::new(-theta, vec![1.1, -2.6]), 200.0, 0.05, &opts).unwrap();
    assert!(traj.impacts.len() > 50);
    for ev in &traj.impacts {
        let y1 = ev.z_pre[1];
        assert!(ev.z_pre[0].abs() <= opts.tol_event && ev.z_post[0].abs() <= opts.tol_event);
        if ev.grazing {
            assert!(y1.abs() < opts.graze_tol);
        } else {
            assert!(y1 <= -opts.graze_tol);
            let r = sys.restitution(ev.approach_speed, 0.05).unwrap();
            assert!((ev.z_post[1] - r * ev.approach_speed).abs() <= 1e-15 * ev.approach_speed);
        }
    }
    for seg in &traj.segments {
        for step in &seg.steps {
            assert!(step.start()[0] >= -opts.tol_event && step.end()[0] >= -opts.tol_event);
        }
    }
}

#[test]
fn slow_touch_is_flagged_grazing_and_not_reversed() {
    // x'' = 1 with x(1) = 0, y(1) = -1e-4
    let sys = SystemDefinition::new("up", 1, 2.0, |_, _, _, o| o[0] = 1.0, |_, _| 0.5).unwrap();
    let opts = IntegratorOptions { graze_tol: 1e-3, v_stick: 1e-3, ..Default::default() };
    let y = -1e-4;
    let s0 = State::new(0.0, vec![-y + 0.5, y - 1.0]);
    let traj = simulate(&sys, &s0, 2.0, 0.0, &opts).unwrap();
    assert_eq!(traj.impacts.len(), 1);
    assert!(traj.impacts[0].grazing);
    let end = traj.final_state.unwrap();
    // wall-free parabola at t = 2
    assert!((end.z[0] - (y + 0.5)).abs() < 1e-9);
    assert!((end.z[1] - (y + 1.0)).abs() < 1e-9);
}

#[test]
fn oscillator_without_contact_matches_closed_form() {
    let fx = ImpactOscillator::default();
    let sys = fx.system().unwrap();
    let mu = -0.3;
    let z0 = fx.free_response(0.4, mu);
    let z1 = vibro::integrator::map_between(&sys, 0.4, &z0, 0.4 + fx.period(), mu, &IntegratorOptions::default())
        .unwrap();
    assert!((z1 - fx.free_response(0.4 + fx.period(), mu)).norm() <= 1e-9);
}

#[test]
fn elastic_undamped_roundtrip() {
    let fx = ImpactOscillator { r0: 1.0, zeta: 0.0, ..Default::default() };
    let sys = fx.system().unwrap();
    let opts = IntegratorOptions::default();
    let z0 = DVector::from_vec(vec![0.4, -1.0]);
    let (z3, contacts) = count_impacts(&sys, -0.2, &z0, -0.2 + 3.0 * fx.period(), 0.3, &opts).unwrap();
    assert!(contacts.len() >= 2);
    let (back, k) = inverse_iterate(&sys, 0.2, &z3, 0.3, 3, &opts).unwrap();
    assert_eq!(k, contacts.len());
    assert!((back - z0).norm() <= 1e-7);
}

/// Time and tangential state at which the coupled fixture sits on the wall
/// with the wall pushing back.
fn sticking_start() -> (SystemDefinition, f64, Vec<f64>) {
    let sys = CoupledOscillator::default().system().unwrap();
    let zbar = vec![0.0, 0.0];
    let mut t = 0.0;
    while release_test(&sys, t, &zbar, 0.5).unwrap() > -0.3 {
        t += 0.01;
    }
    (sys, t, zbar)
}

#[test]
fn sticking_release_matches_bisection() {
    let (sys, t0, zbar) = sticking_start();
    let mu = 0.5;
    let mut z0 = vec![0.0, 0.0];
    z0.extend(&zbar);
    let traj = simulate(&sys, &State::new(t0, z0), t0 + sys.period(), mu, &IntegratorOptions::default()).unwrap();
    let stick = traj.sticking.first().expect("sticking phase");
    assert!((stick.t_enter - t0).abs() < 1e-12);
    let release = stick.t_release.expect("release within a period");

    // reduced flow by RK4 and the sign of f1 along it
    let reduced = |t1: f64| {
        let n = 4000;
        let h = (t1 - t0) / n as f64;
        let mut w = zbar.clone();
        let mut t = t0;
        let f = |t: f64, w: &[f64]| sticking_vector_field(&sys, t, w, mu).unwrap();
        for _ in 0..n {
            let k1 = f(t, &w);
            let a: Vec<f64> = w.iter().zip(k1.iter()).map(|(x, k)| x + 0.5 * h * k).collect();
            let k2 = f(t + 0.5 * h, &a);
            let b: Vec<f64> = w.iter().zip(k2.iter()).map(|(x, k)| x + 0.5 * h * k).collect();
            let k3 = f(t + 0.5 * h, &b);
            let c: Vec<f64> = w.iter().zip(k3.iter()).map(|(x, k)| x + h * k).collect();
            let k4 = f(t + h, &c);
            for i in 0..w.len() {
                w[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t += h;
        }
        w
    };
    let sign = |t: f64| release_test(&sys, t, &reduced(t), mu).unwrap();
    // first upward sign change on a coarse scan, then bisection
    let mut lo = t0 + 1e-3;
    assert!(sign(lo) < 0.0);
    while sign(lo + 0.01) <= 0.0 {
        lo += 0.01;
    }
    let mut hi = lo + 0.01;
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if sign(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!((release - lo).abs() < 1e-7, "{release} vs {lo}");
}

#[test]
fn sticking_flow_matches_penalty_wall() {
    let (sys, t0, zbar) = sticking_start();
    let mu = 0.5;
    let mut z0 = vec![0.0, 0.0];
    z0.extend(&zbar);
    let traj = simulate(&sys, &State::new(t0, z0.clone()), t0 + sys.period(), mu, &IntegratorOptions::default())
        .unwrap();
    let release = traj.sticking[0].t_release.unwrap();
    let t1 = t0 + 0.8 * (release - t0);
    let exact = traj.sample(t1).unwrap();
    // stiff spring-damper wall in place of the constraint
    let (k, c) = (1e6, 2e3);
    let penal = SystemDefinition::new(
        "penalty",
        2,
        sys.period(),
        {
            let sys = sys.clone();
            move |t: f64, z: &[f64], mu: f64, o: &mut [f64]| {
                sys.accel(t, z, mu, o).unwrap();
                if z[0] < 0.0 {
                    o[0] -= k * z[0] + c * z[1];
                }
            }
        },
        |_, _| 1.0,
    )
    .unwrap();
    let soft = rk4(&penal, t0, &z0, t1, mu, 200_000);
    for i in 0..4 {
        assert!((soft[i] - exact[i]).abs() < 1e-4, "component {i}: {} vs {}", soft[i], exact[i]);
    }
}
