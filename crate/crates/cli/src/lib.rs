//! Batch front end: reads a TOML run configuration, runs one analysis
//! command and writes plot-ready CSVs, JSON reports and a manifest with
//! content hashes into an output directory.

pub mod config;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use vibro::chaos::{chaos_analysis, ChaosOptions};
use vibro::grazing::{grazing_report, GammaSpec, GrazingOptions};
use vibro::integrator::iterate_map;
use vibro::orbit::{continue_family, find_periodic};
use vibro::{simulate, Error, ErrorClass, OrbitFamily, PeriodicOrbit, State, SystemDefinition, Trajectory};

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 0 ok, 1 configuration, 2 model, 3 integrator or analysis failure,
    /// 4 continuation stall, 5 no grazing.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e.class() {
                ErrorClass::Input => 1,
                ErrorClass::Model => 2,
                ErrorClass::Integrator | ErrorClass::Analysis => 3,
                ErrorClass::Continuation => 4,
                ErrorClass::NoGrazing => 5,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Family,
    GrazingReport,
    ChaosReport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Family => "family",
            Command::GrazingReport => "grazing-report",
            Command::ChaosReport => "chaos-report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Writes output files and remembers their hashes for the manifest.
struct Emitter {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Emitter {
    fn new(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(FileEntry {
            name: name.to_string(),
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> io::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(v).map_err(io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn finish(self, command: Command, cfg: &RunConfig, status: &str) -> io::Result<Vec<FileEntry>> {
        let manifest = json!({
            "tool": "vibro",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command.name(),
            "status": status,
            "config": cfg,
            "files": &self.files,
        });
        let mut text = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(self.files)
    }
}

/// Runs `command` and writes its outputs and `manifest.json` into `out`.
/// The manifest is written on failure too, listing whatever was flushed.
pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> Result<Vec<FileEntry>, CliError> {
    let sys = cfg.validate()?;
    let mut em = Emitter::new(out)?;
    let res = match command {
        Command::Simulate => cmd_simulate(&sys, cfg, &mut em),
        Command::Family => cmd_family(&sys, cfg, &mut em),
        Command::GrazingReport => cmd_grazing_report(&sys, cfg, &mut em),
        Command::ChaosReport => cmd_chaos_report(&sys, cfg, &mut em),
    };
    let status = match &res {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    let files = em.finish(command, cfg, &status)?;
    res.map(|()| files)
}

fn write_trajectory(em: &mut Emitter, traj: &Trajectory, dof: usize, interior: usize) -> io::Result<()> {
    em.csv("trajectory.csv", |w| traj.write_csv(w, dof, interior))?;
    em.csv("impacts.csv", |w| traj.write_impacts_csv(w))
}

fn cmd_simulate(sys: &SystemDefinition, cfg: &RunConfig, em: &mut Emitter) -> Result<(), CliError> {
    let sc = cfg.simulate.as_ref().ok_or_else(|| cfg.section("simulate"))?;
    let [t0, t1] = sc.t_span;
    let s0 = State::new(t0, sc.initial_state.clone());
    let traj = match simulate(sys, &s0, t1, sc.mu, &cfg.integrator()) {
        Ok(t) => t,
        Err(Error::Simulation { source, partial }) => {
            write_trajectory(em, &partial, sys.dof(), sc.interior)?;
            return Err((*source).into());
        }
        Err(e) => return Err(e.into()),
    };
    write_trajectory(em, &traj, sys.dof(), sc.interior)?;
    let summary = json!({
        "system": sys.name(),
        "mu": sc.mu,
        "t_span": [t0, t1],
        "segments": traj.segments.len(),
        "impacts": traj.impacts.len(),
        "grazing_contacts": traj.impacts.iter().filter(|e| e.grazing).count(),
        "sticking": traj.sticking.iter().map(|s| json!({"t_enter": s.t_enter, "t_release": s.t_release})).collect::<Vec<_>>(),
        "final_state": traj.final_state.as_ref().map(|s| s.z.as_slice().to_vec()),
    });
    em.json("summary.json", &summary)?;
    Ok(())
}

fn family_theta(sys: &SystemDefinition, cfg: &RunConfig) -> f64 {
    cfg.family.as_ref().and_then(|f| f.theta).unwrap_or(0.25 * sys.period())
}

/// Periodic orbit at `family.mu_start` after a settling transient.
fn start_orbit(sys: &SystemDefinition, cfg: &RunConfig) -> Result<PeriodicOrbit, CliError> {
    let fc = cfg.family.as_ref().ok_or_else(|| cfg.section("family"))?;
    let opts = cfg.orbit();
    let theta = family_theta(sys, cfg);
    let z0 = match &fc.initial_state {
        Some(z) => DVector::from_column_slice(z),
        None => {
            let mut z = DVector::zeros(sys.dim());
            z[0] = 1.0;
            z
        }
    };
    let z = iterate_map(sys, theta, &z0, fc.mu_start, fc.settle_periods, &opts.integrator)?;
    Ok(find_periodic(sys, theta, fc.mu_start, &z, &opts)?)
}

/// Continues the family, flushing the partial CSV on a stall.
fn build_family(sys: &SystemDefinition, cfg: &RunConfig, em: &mut Emitter) -> Result<OrbitFamily, CliError> {
    let fc = cfg.family.as_ref().ok_or_else(|| cfg.section("family"))?;
    let orb = start_orbit(sys, cfg)?;
    match continue_family(sys, family_theta(sys, cfg), fc.mu_end, orb, &cfg.orbit()) {
        Ok(fam) => {
            em.csv("family.csv", |w| fam.write_csv(w))?;
            Ok(fam)
        }
        Err(Error::ContinuationStall { mu, step, partial }) => {
            warn!("continuation stalled at mu = {mu:e}; flushing {} samples", partial.samples.len());
            em.csv("family.csv", |w| partial.write_csv(w))?;
            Err(Error::ContinuationStall { mu, step, partial }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_family(sys: &SystemDefinition, cfg: &RunConfig, em: &mut Emitter) -> Result<(), CliError> {
    let fam = build_family(sys, cfg, em)?;
    match &fam.grazing {
        Some(g) => em.json("grazing.json", g)?,
        None => info!("family ended at mu = {:e} without grazing", fam.samples.last().map_or(f64::NAN, |s| s.mu)),
    }
    Ok(())
}

fn cmd_grazing_report(sys: &SystemDefinition, cfg: &RunConfig, em: &mut Emitter) -> Result<(), CliError> {
    let fam = build_family(sys, cfg, em)?;
    if fam.grazing.is_none() {
        return Err(Error::NoGrazing("no grazing detected along the family".into()).into());
    }
    let gc = cfg.grazing.clone().unwrap_or_default();
    let d = GrazingOptions::default();
    let opts = GrazingOptions {
        orbit: cfg.orbit(),
        theta_seq: gc.theta_seq,
        robustness_trials: gc.robustness_trials.unwrap_or(d.robustness_trials),
        seed: gc.seed.unwrap_or(d.seed),
        gamma: GammaSpec { y1_max: gc.y1_max.unwrap_or(d.gamma.y1_max), ..d.gamma.clone() },
        ..d
    };
    let rep = grazing_report(sys, &fam, &opts)?;
    for w in &rep.warnings {
        warn!("{w}");
    }
    em.json("grazing_report.json", &rep)?;
    Ok(())
}

/// Fixed point at `chaos.mu`, continued from the family start.
fn chaos_orbit(sys: &SystemDefinition, cfg: &RunConfig, mu: f64) -> Result<PeriodicOrbit, CliError> {
    let orb = start_orbit(sys, cfg)?;
    if orb.mu == mu {
        return Ok(orb);
    }
    let base = cfg.orbit();
    let opts = vibro::OrbitOptions { y0_stop: base.y0_stop.min(1e-6), ..base };
    let fam = continue_family(sys, orb.theta, mu, orb, &opts)?;
    let last = fam.samples.last().expect("families are never empty").clone();
    if last.mu != mu {
        return Err(Error::Undefined(format!("the family grazes at mu = {:e} before reaching {mu:e}", last.mu)).into());
    }
    Ok(last)
}

fn cmd_chaos_report(sys: &SystemDefinition, cfg: &RunConfig, em: &mut Emitter) -> Result<(), CliError> {
    let cc = cfg.chaos.as_ref().ok_or_else(|| cfg.section("chaos"))?;
    let orb = chaos_orbit(sys, cfg, cc.mu)?;
    let d = ChaosOptions::default();
    let opts = ChaosOptions {
        integrator: cfg.integrator(),
        m_max: cc.m_max,
        lyapunov_iter: cc.n_iter,
        seed_grid: cc.seed_grid,
        periodic_m: cc.periods.clone(),
        max_gap: cc.max_gap.unwrap_or(d.max_gap),
        depth: cc.depth.unwrap_or(d.depth),
        ..d
    };
    let an = chaos_analysis(sys, &orb, &opts)?;
    em.json("chaos_report.json", &an.report)?;
    if let Some(wu) = &an.unstable {
        em.csv("unstable_manifold.csv", |w| wu.write_csv(w))?;
    }
    if let Some(ws) = &an.stable {
        em.csv("stable_manifold.csv", |w| ws.write_csv(w))?;
    }
    Ok(())
}
