//! Nonlinear magnetized Vlasov solver and characteristics diagnostics.
//!
//! A Strang step is half an exact free flow, a field kick in v at the
//! half-step fields, and another half free flow. The free flow is exact: the
//! velocity content is rotated by `R(h)` and multiplied by `e^{−2πi q·v}` with
//! `q = R(h)M(h)ᵀk`. The kick is performed at physical points in x, where it
//! is a Boris map `v ↦ R_B(v + a) + a`, `a = E·dt/2`, `R_B` the rotation about
//! the perturbation `B` by `|B|dt`.
//!
//! Free streaming pushes velocity content of the mode `k` to `η = k₃t`, past
//! the η-grid. A smooth filament filter removes content above a cutoff
//! fraction of the parallel Nyquist frequency so it cannot alias back.

use std::path::PathBuf;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{advance_b, electric_field, knorm, CVec3, FieldState, InteractionPotential};
use crate::kinematics::{
    drift_matrix, exact_flow_unwrapped, mat_t_vec, mat_vec, reduce_torus, rotation_matrix, Kinematics, Mat3,
    PhasePoint, Vec3,
};
use crate::phase_space::{density, write_checkpoint, SpectralDistribution};
use crate::spectral::{phase_multiply, VOps};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    Strang,
}

/// Damping `exp(−h·strength·e^{1−1/u²})`, `u = (|η|−η_c)/(η_max−η_c)`, above
/// `η_c = cutoff·η_max`. The onset is flat to all orders at `η_c`, so the
/// removed content has no algebraic tails in v that could reach the box edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub strength: f64,
    pub cutoff: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { strength: 40.0, cutoff: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub dt: f64,
    pub t_end: f64,
    pub splitting: Splitting,
    /// Kick on `3·kmax + 1` points per dimension so products are unaliased.
    pub dealias: bool,
    /// Record the field history for the characteristics integrators.
    pub track_deflection: bool,
    pub filter: Option<FilterConfig>,
    /// Diagnostics cadence in steps.
    pub diag_every: usize,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl SolverConfig {
    pub fn new(dt: f64, t_end: f64) -> Self {
        Self {
            dt,
            t_end,
            splitting: Splitting::Strang,
            dealias: true,
            track_deflection: false,
            filter: Some(FilterConfig::default()),
            diag_every: 1,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// `dt·max|k|·lv < 1`.
    pub fn validate(&self, dist: &SpectralDistribution) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) {
            return Err(Error::Parameter("dt must be positive and t_end non-negative".into()));
        }
        let kmax = dist.geometry.modes().iter().map(|k| knorm(*k)).fold(0.0, f64::max);
        let value = self.dt * kmax * dist.geometry.lv;
        if value >= 1.0 {
            return Err(Error::StepTooLarge { dt: self.dt, value });
        }
        Ok(())
    }
}

/// Exact free flow over `h` applied to every mode.
pub fn free_flow(ops: &mut VOps, dist: &mut SpectralDistribution, h: f64, kin: &Kinematics) {
    let g = dist.geometry;
    let r = rotation_matrix(h, kin);
    let m = drift_matrix(h, kin);
    let rotate = g.dim_v == 3 && kin.omega * h != 0.0;
    for (i, k) in g.modes().iter().enumerate() {
        let block = dist.block_mut(i);
        if rotate {
            ops.rotate(block, &r);
        }
        let q = mat_vec(&r, mat_t_vec(&m, [k[0] as f64, k[1] as f64, k[2] as f64]));
        if q != [0.0; 3] {
            phase_multiply(&ops.grid, block, q);
        }
    }
    dist.time += h;
}

/// Filament filter over a time `h`.
pub fn filter(ops: &mut VOps, dist: &mut SpectralDistribution, h: f64, cfg: &FilterConfig) {
    let g = dist.geometry;
    let vg = ops.grid;
    let axes: Vec<usize> = if g.dim_x == 3 { (0..3).filter(|&a| vg.active(a)).collect() } else { vec![2] };
    for i in 0..g.n_modes() {
        for &a in &axes {
            let emax = vg.eta_max(a);
            let ec = cfg.cutoff * emax;
            ops.filter_axis(dist.block_mut(i), a, |m| {
                let e = vg.eta_of(a, m).abs();
                if e <= ec {
                    1.0
                } else {
                    let u = (e - ec) / (emax - ec);
                    (-h * cfg.strength * (1.0 - 1.0 / (u * u)).exp()).exp()
                }
            });
        }
    }
}

/// Rotation about `axis` by `theta` (right-handed).
pub fn axis_rotation(axis: Vec3, theta: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if n == 0.0 || theta == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Physical sample points of the kick grid.
pub fn kick_points(dim_x: usize, nx: usize) -> Vec<Vec3> {
    let c = |j: usize| j as f64 / nx as f64;
    if dim_x == 1 {
        (0..nx).map(|j| [0.0, 0.0, c(j)]).collect()
    } else {
        let mut out = Vec::with_capacity(nx * nx * nx);
        for a in 0..nx {
            for b in 0..nx {
                for d in 0..nx {
                    out.push([c(a), c(b), c(d)]);
                }
            }
        }
        out
    }
}

fn real_field(coeffs: &[CVec3], modes: &[[i64; 3]], x: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for (c, k) in coeffs.iter().zip(modes) {
        let ph = Complex64::from_polar(1.0, TWO_PI * (k[0] as f64 * x[0] + k[1] as f64 * x[1] + k[2] as f64 * x[2]));
        for a in 0..3 {
            out[a] += (c[a] * ph).re;
        }
    }
    out
}

/// Field kick over `dt` with the fields `e_hat`, `b_hat` given per mode.
pub fn kick(
    ops: &mut VOps,
    dist: &mut SpectralDistribution,
    e_hat: &[CVec3],
    b_hat: &[CVec3],
    dt: f64,
    nx: usize,
) {
    let g = dist.geometry;
    let modes = g.modes();
    let n = g.vlen();
    let points = kick_points(g.dim_x, nx);
    let phases: Vec<Vec<Complex64>> = points
        .iter()
        .map(|x| {
            modes
                .iter()
                .map(|k| Complex64::from_polar(1.0, TWO_PI * (k[0] as f64 * x[0] + k[1] as f64 * x[1] + k[2] as f64 * x[2])))
                .collect()
        })
        .collect();
    let src = &dist.data;
    let vg = ops.grid;
    let kicked: Vec<Vec<Complex64>> = points
        .par_iter()
        .zip(phases.par_iter())
        .map_init(
            || VOps::new(vg),
            |ops, (x, ph)| {
                let mut block = vec![ZERO; n];
                for (i, p) in ph.iter().enumerate() {
                    for (b, s) in block.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                        *b += s * p;
                    }
                }
                let e = real_field(e_hat, &modes, *x);
                let b = real_field(b_hat, &modes, *x);
                let a = [0.5 * dt * e[0], 0.5 * dt * e[1], 0.5 * dt * e[2]];
                let active = |v: Vec3| -> Vec3 {
                    let mut v = v;
                    for (ax, c) in v.iter_mut().enumerate() {
                        if !vg.active(ax) {
                            *c = 0.0;
                        }
                    }
                    v
                };
                let a = active(a);
                ops.translate(&mut block, a);
                let bn = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
                if bn * dt > 0.0 && vg.active(0) {
                    ops.rotate(&mut block, &axis_rotation(b, bn * dt));
                }
                ops.translate(&mut block, a);
                block
            },
        )
        .collect();
    let _ = ops;
    let np = points.len() as f64;
    for (i, _) in modes.iter().enumerate() {
        let out = &mut dist.data[i * n..(i + 1) * n];
        out.iter_mut().for_each(|o| *o = ZERO);
        for (blk, ph) in kicked.iter().zip(&phases) {
            let c = ph[i].conj() / np;
            for (o, b) in out.iter_mut().zip(blk) {
                *o += b * c;
            }
        }
    }
}

/// Fields at one instant, stored per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldHistory {
    pub modes: Vec<[i64; 3]>,
    pub dt: f64,
    pub e_hat: Vec<Vec<CVec3>>,
    pub b_hat: Vec<Vec<CVec3>>,
}

impl FieldHistory {
    pub fn t_end(&self) -> f64 {
        (self.e_hat.len().saturating_sub(1)) as f64 * self.dt
    }

    /// Same history with every field multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let sc = |v: &Vec<Vec<CVec3>>| v.iter().map(|r| r.iter().map(|c| [c[0] * s, c[1] * s, c[2] * s]).collect()).collect();
        Self { modes: self.modes.clone(), dt: self.dt, e_hat: sc(&self.e_hat), b_hat: sc(&self.b_hat) }
    }

    /// Cubic Lagrange weights in time over the four nearest samples.
    fn weights(&self, t: f64) -> Vec<(usize, f64)> {
        let n = self.e_hat.len();
        if n == 1 {
            return vec![(0, 1.0)];
        }
        let s = (t / self.dt).clamp(0.0, (n - 1) as f64);
        if n < 4 {
            let i = (s.floor() as usize).min(n - 2);
            let f = s - i as f64;
            return vec![(i, 1.0 - f), (i + 1, f)];
        }
        let i0 = (s.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
        let nodes: Vec<f64> = (i0..i0 + 4).map(|j| j as f64).collect();
        (0..4)
            .map(|a| {
                let mut w = 1.0;
                for b in 0..4 {
                    if a != b {
                        w *= (s - nodes[b]) / (nodes[a] - nodes[b]);
                    }
                }
                (i0 + a, w)
            })
            .collect()
    }

    /// `(E(t,x), B(t,x))`.
    pub fn eval(&self, t: f64, x: Vec3) -> (Vec3, Vec3) {
        let mut e = [0.0; 3];
        let mut b = [0.0; 3];
        for (i, w) in self.weights(t) {
            let ei = real_field(&self.e_hat[i], &self.modes, x);
            let bi = real_field(&self.b_hat[i], &self.modes, x);
            for a in 0..3 {
                e[a] += w * ei[a];
                b[a] += w * bi[a];
            }
        }
        (e, b)
    }

    /// Largest `|B̂(t,k)|` over the record.
    pub fn b_sup(&self) -> f64 {
        self.b_hat
            .iter()
            .flat_map(|r| r.iter())
            .map(|c| (c[0].norm_sqr() + c[1].norm_sqr() + c[2].norm_sqr()).sqrt())
            .fold(0.0, f64::max)
    }
}

/// One diagnostics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub t: f64,
    pub rho: Vec<Complex64>,
    pub electric_energy: f64,
    pub magnetic_energy: f64,
    pub mass: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub modes: Vec<[i64; 3]>,
    pub diagnostics: Vec<Diagnostic>,
    pub history: Option<FieldHistory>,
    pub warnings: Vec<String>,
    pub final_state: SpectralDistribution,
}

/// Stepping state: distribution, field state at the last half step.
pub struct Solver {
    pub dist: SpectralDistribution,
    pub w: InteractionPotential,
    pub kin: Kinematics,
    pub cfg: SolverConfig,
    ops: VOps,
    nx: usize,
    fields: FieldState,
    step: usize,
}

impl Solver {
    pub fn new(dist: SpectralDistribution, w: InteractionPotential, kin: Kinematics, cfg: SolverConfig) -> Result<Self> {
        cfg.validate(&dist)?;
        let g = dist.geometry;
        let modes = g.modes();
        let e0 = electric_field(&density(&dist), &modes, &w);
        let nx = if cfg.dealias { 3 * g.kmax + 1 } else { 2 * g.kmax + 1 }.max(1);
        Ok(Self { ops: VOps::new(g.vgrid()), nx, fields: FieldState::new(modes, e0), step: 0, dist, w, kin, cfg })
    }

    /// Fields `(Ê, B̂)` at the current integer time.
    pub fn current_fields(&self) -> (Vec<CVec3>, Vec<CVec3>) {
        let modes = self.dist.geometry.modes();
        let e = electric_field(&density(&self.dist), &modes, &self.w);
        if self.step == 0 {
            return (e, self.fields.b_hat.clone());
        }
        let mut st = self.fields.clone();
        advance_b(&mut st, &e, 0.5 * self.cfg.dt);
        (e, st.b_hat)
    }

    pub fn strang_step(&mut self) -> Result<()> {
        let dt = self.cfg.dt;
        let kin = self.kin;
        free_flow(&mut self.ops, &mut self.dist, 0.5 * dt, &kin);
        let modes = self.dist.geometry.modes();
        let e_half = electric_field(&density(&self.dist), &modes, &self.w);
        let span = if self.step == 0 { 0.5 * dt } else { dt };
        advance_b(&mut self.fields, &e_half, span);
        let b_half = self.fields.b_hat.clone();
        kick(&mut self.ops, &mut self.dist, &e_half, &b_half, dt, self.nx);
        free_flow(&mut self.ops, &mut self.dist, 0.5 * dt, &kin);
        if let Some(fc) = self.cfg.filter {
            filter(&mut self.ops, &mut self.dist, dt, &fc);
        }
        self.step += 1;
        if self.dist.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite { step: self.step, what: "distribution".into() });
        }
        Ok(())
    }

    fn diagnostic(&self) -> Diagnostic {
        let (e, b) = self.current_fields();
        let st = FieldState { modes: self.dist.geometry.modes(), e_hat: e, b_hat: b, time: self.dist.time };
        Diagnostic {
            t: self.dist.time,
            rho: density(&self.dist),
            electric_energy: st.electric_energy(),
            magnetic_energy: st.magnetic_energy(),
            mass: self.dist.mass(),
            l2: self.dist.l2_squared().sqrt(),
        }
    }
}

/// Run to `t_end`, recording diagnostics, optional history and checkpoints.
pub fn run(dist0: SpectralDistribution, w: InteractionPotential, kin: Kinematics, cfg: SolverConfig) -> Result<RunOutput> {
    let modes = dist0.geometry.modes();
    let mut warnings = Vec::new();
    let mut solver = Solver::new(dist0, w, kin, cfg.clone())?;
    let rho0 = density(&solver.dist);
    let i0 = solver.dist.geometry.mode_index([0, 0, 0]).expect("zero mode");
    let rel = rho0.iter().enumerate().filter(|(i, _)| *i != i0).map(|(_, r)| r.norm()).fold(0.0, f64::max)
        / rho0[i0].norm().max(f64::MIN_POSITIVE);
    if !cfg.dealias && rel > 0.1 {
        warnings.push(format!("dealiasing disabled with relative amplitude {rel:.3e} > 0.1: products will alias"));
    }
    let mut history = cfg.track_deflection.then(|| FieldHistory { modes: modes.clone(), dt: cfg.dt, e_hat: vec![], b_hat: vec![] });
    let mut diagnostics = vec![solver.diagnostic()];
    let record = |s: &Solver, h: &mut Option<FieldHistory>| {
        if let Some(h) = h.as_mut() {
            let (e, b) = s.current_fields();
            h.e_hat.push(e);
            h.b_hat.push(b);
        }
    };
    record(&solver, &mut history);
    let every = cfg.diag_every.max(1);
    for n in 1..=cfg.steps() {
        solver.strang_step()?;
        record(&solver, &mut history);
        if n % every == 0 || n == cfg.steps() {
            let d = solver.diagnostic();
            if !d.mass.is_finite() || !d.electric_energy.is_finite() {
                return Err(Error::NonFinite { step: n, what: "diagnostics".into() });
            }
            diagnostics.push(d);
        }
        if let (Some(c), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref()) {
            if c > 0 && n % c == 0 {
                let path = dir.join(format!("checkpoint_{n:06}.bin"));
                let file = std::fs::File::create(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
                write_checkpoint(&solver.dist, std::io::BufWriter::new(file))?;
            }
        }
    }
    Ok(RunOutput { modes, diagnostics, history, warnings, final_state: solver.dist })
}

/// Deflection `(δX, δV)` from the exact free flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deflection {
    pub dx: Vec3,
    pub dv: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeflectionTrace {
    pub tau: f64,
    /// `(t, sup|δX|, sup|δV|)` over the probe set.
    pub samples: Vec<(f64, f64, f64)>,
}

type State = (Vec3, Vec3);

fn add(a: Vec3, b: Vec3, s: f64) -> Vec3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn propagate(y: State, h: f64, kin: &Kinematics) -> State {
    exact_flow_unwrapped(h, y.0, y.1, kin)
}

fn lawson_step<N>(y: State, t: f64, h: f64, kin: &Kinematics, n: &N) -> State
where
    N: Fn(f64, State) -> Vec3,
{
    let half = |s: State| propagate(s, 0.5 * h, kin);
    let lift = |dv: Vec3| -> State { ([0.0; 3], dv) };
    let axpy = |a: State, b: State, s: f64| -> State { (add(a.0, b.0, s), add(a.1, b.1, s)) };
    let u = half(y);
    let k1 = half(lift(n(t, y)));
    let k2 = lift(n(t + 0.5 * h, axpy(u, k1, 0.5 * h)));
    let k3 = lift(n(t + 0.5 * h, axpy(u, k2, 0.5 * h)));
    let k4 = lift(n(t + h, half(axpy(u, k3, h))));
    let mid = axpy(axpy(axpy(u, k1, h / 6.0), k2, h / 3.0), k3, h / 3.0);
    axpy(half(mid), k4, h / 6.0)
}

fn integrate<N>(t: f64, tau: f64, p: PhasePoint, h_target: f64, kin: &Kinematics, n: N, mut visit: impl FnMut(f64, State)) -> State
where
    N: Fn(f64, State) -> Vec3,
{
    let span = t - tau;
    let steps = ((span.abs() / h_target).ceil() as usize).max(1);
    let h = span / steps as f64;
    let mut y = (p.x, p.v);
    visit(tau, y);
    for i in 0..steps {
        let s = tau + i as f64 * h;
        y = lawson_step(y, s, h, kin, &n);
        visit(s + h, y);
    }
    y
}

fn deflection(t: f64, tau: f64, p: PhasePoint, y: State, kin: &Kinematics) -> Deflection {
    let (xf, vf) = exact_flow_unwrapped(t - tau, p.x, p.v, kin);
    Deflection { dx: add(y.0, xf, -1.0), dv: add(y.1, vf, -1.0) }
}

fn finish(y: State) -> PhasePoint {
    PhasePoint { x: reduce_torus(y.0), v: y.1 }
}

/// Reduced characteristics `dX/dt = V`, `dV/dt = B₀ẑ×V + E(t,X)`, launched
/// from `p` at `tau` and integrated to `t`.
pub fn reduced_characteristics(t: f64, tau: f64, p: PhasePoint, history: &FieldHistory, kin: &Kinematics) -> (PhasePoint, Deflection) {
    let y = integrate(t, tau, p, 0.5 * history.dt, kin, |s, y| history.eval(s, y.0).0, |_, _| {});
    (finish(y), deflection(t, tau, p, y, kin))
}

/// Characteristics with the full force `(B₀ẑ + B)×V + E`.
pub fn full_characteristics(t: f64, tau: f64, p: PhasePoint, history: &FieldHistory, kin: &Kinematics) -> PhasePoint {
    let y = integrate(
        t,
        tau,
        p,
        0.5 * history.dt,
        kin,
        |s, y| {
            let (e, b) = history.eval(s, y.0);
            let bxv = crate::kinematics::cross(b, y.1);
            add(e, bxv, 1.0)
        },
        |_, _| {},
    );
    finish(y)
}

/// Unwrapped endpoint of the full characteristics, for differences.
pub fn full_endpoint(t: f64, tau: f64, p: PhasePoint, history: &FieldHistory, kin: &Kinematics) -> (Vec3, Vec3) {
    integrate(
        t,
        tau,
        p,
        0.5 * history.dt,
        kin,
        |s, y| {
            let (e, b) = history.eval(s, y.0);
            add(e, crate::kinematics::cross(b, y.1), 1.0)
        },
        |_, _| {},
    )
}

/// Unwrapped endpoint of the reduced characteristics.
pub fn reduced_endpoint(t: f64, tau: f64, p: PhasePoint, history: &FieldHistory, kin: &Kinematics) -> (Vec3, Vec3) {
    integrate(t, tau, p, 0.5 * history.dt, kin, |s, y| history.eval(s, y.0).0, |_, _| {})
}

/// Sup over probes of the reduced deflection, sampled every `every` steps.
pub fn deflection_trace(
    tau: f64,
    t_end: f64,
    probes: &[PhasePoint],
    history: &FieldHistory,
    kin: &Kinematics,
) -> DeflectionTrace {
    let per: Vec<Vec<(f64, f64, f64)>> = probes
        .par_iter()
        .map(|p| {
            let mut rows = Vec::new();
            integrate(t_end, tau, *p, 0.5 * history.dt, kin, |s, y| history.eval(s, y.0).0, |s, y| {
                let d = deflection(s, tau, *p, y, kin);
                rows.push((s, crate::kinematics::norm3(d.dx), crate::kinematics::norm3(d.dv)));
            });
            rows
        })
        .collect();
    let mut samples = per.first().cloned().unwrap_or_default();
    for rows in per.iter().skip(1) {
        for (acc, r) in samples.iter_mut().zip(rows) {
            acc.1 = acc.1.max(r.1);
            acc.2 = acc.2.max(r.2);
        }
    }
    DeflectionTrace { tau, samples }
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Deterministic Halton probes: x from bases 2, 3, 5 and v from 7, 11, 13 in
/// the cube of half-width `5v_T/√3`, so `|v| ≤ 5v_T`.
pub fn halton_probes(n: usize, v_thermal: f64) -> Vec<PhasePoint> {
    let half = 5.0 * v_thermal / 3f64.sqrt();
    (1..=n)
        .map(|i| {
            let x = [radical_inverse(i, 2), radical_inverse(i, 3), radical_inverse(i, 5)];
            let v = [7, 11, 13].map(|b| half * (2.0 * radical_inverse(i, b) - 1.0));
            PhasePoint { x, v }
        })
        .collect()
}

/// Largest endpoint difference `|full − reduced|` in `(x, v)` over the probes.
pub fn reduction_error(t: f64, tau: f64, probes: &[PhasePoint], history: &FieldHistory, kin: &Kinematics) -> f64 {
    probes
        .par_iter()
        .map(|p| {
            let a = full_endpoint(t, tau, *p, history, kin);
            let b = reduced_endpoint(t, tau, *p, history, kin);
            let dx = add(a.0, b.0, -1.0);
            let dv = add(a.1, b.1, -1.0);
            crate::kinematics::norm3(dx).max(crate::kinematics::norm3(dv))
        })
        .reduce(|| 0.0, f64::max)
}

/// Measured exponent of the reduction error under rescaling the field history
/// by each `s`: the log-log slope of error against `s·sup|B̂|`.
pub fn reduction_scaling(
    t: f64,
    tau: f64,
    probes: &[PhasePoint],
    history: &FieldHistory,
    kin: &Kinematics,
    scales: &[f64],
) -> (Vec<(f64, f64)>, f64) {
    let b0 = history.b_sup();
    let rows: Vec<(f64, f64)> = scales
        .iter()
        .map(|&s| (s * b0, reduction_error(t, tau, probes, &history.scaled(s), kin)))
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.0.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
    (rows, sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::WRule;
    use crate::kinematics::exact_flow;
    use crate::phase_space::{maxwellian, perturbed_state, Equilibrium, Geometry, Perturbation, VelocityProfile};

    fn small_geometry() -> Geometry {
        Geometry::new(1, 2, 64, 8.0, 3, 32).unwrap()
    }

    fn perturbed(g: &Geometry, amp: f64) -> SpectralDistribution {
        let eq = Equilibrium::isotropic(1.0);
        perturbed_state(g, &eq, &[Perturbation { mode: [0, 0, 1], amplitude: amp, profile: VelocityProfile::Equilibrium }]).unwrap()
    }

    #[test]
    fn axis_rotation_matches_background_rotation() {
        let kin = Kinematics::new(0.7);
        let a = axis_rotation([0.0, 0.0, 2.0], 0.7 * 1.3);
        let b = rotation_matrix(1.3, &kin);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_field_steps_equal_exact_free_transport() {
        let g = small_geometry();
        let d0 = perturbed(&g, 1e-2);
        let w = InteractionPotential::odd_perp(2.0).scaled(0.0);
        let kin = Kinematics::new(0.5);
        let mut cfg = SolverConfig::new(0.05, 0.5);
        cfg.filter = None;
        let out = run(d0.clone(), w, kin, cfg).unwrap();
        let mut ops = VOps::new(g.vgrid());
        let mut exact = d0;
        free_flow(&mut ops, &mut exact, 0.5, &kin);
        let err = out.final_state.data.iter().zip(&exact.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn background_only_step_rotates_velocity_marginal() {
        // Off-centre bump in (v₁, v₂), zero mode only.
        let g = Geometry::new(1, 0, 64, 10.0, 3, 64).unwrap();
        let vg = g.vgrid();
        let mut d = SpectralDistribution::zeros(g);
        let c = [1.5, -0.5];
        for (idx, z) in d.block_mut(0).iter_mut().enumerate() {
            let i = vg.unindex(idx);
            let v = [vg.coord(0, i[0]), vg.coord(1, i[1]), vg.coord(2, i[2])];
            *z = (-((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2) + v[2] * v[2]) / 2.0).exp().into();
        }
        let kin = Kinematics::new(2.0);
        let mut cfg = SolverConfig::new(0.1, 0.1);
        cfg.filter = None;
        let w = InteractionPotential::odd_perp(2.0).scaled(0.0);
        let out = run(d, w, kin, cfg).unwrap();
        let r = rotation_matrix(0.1, &kin);
        let nc = mat_vec(&r, [c[0], c[1], 0.0]);
        let mut err: f64 = 0.0;
        for (idx, z) in out.final_state.block(0).iter().enumerate() {
            let i = vg.unindex(idx);
            let v = [vg.coord(0, i[0]), vg.coord(1, i[1]), vg.coord(2, i[2])];
            let want = (-((v[0] - nc[0]).powi(2) + (v[1] - nc[1]).powi(2) + v[2] * v[2]) / 2.0).exp();
            err = err.max((z.re - want).abs());
        }
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn mass_is_conserved_and_homogeneous_data_stays_put() {
        let g = small_geometry();
        let (eq, f0) = maxwellian(&g, 1.0).unwrap();
        let _ = eq;
        let mut d = SpectralDistribution::zeros(g);
        let i0 = g.mode_index([0, 0, 0]).unwrap();
        d.block_mut(i0).copy_from_slice(&f0);
        let w = InteractionPotential::odd_perp(2.0);
        let out = run(d.clone(), w, Kinematics::new(0.5), SolverConfig::new(0.05, 1.0)).unwrap();
        let m0 = out.diagnostics[0].mass;
        for row in &out.diagnostics {
            assert!((row.mass - m0).abs() < 1e-12);
            assert!(row.electric_energy < 1e-28);
        }
        let err = out.final_state.data.iter().zip(&d.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn perturbed_run_conserves_mass() {
        let g = small_geometry();
        let out = run(perturbed(&g, 1e-2), InteractionPotential::odd_perp(2.0), Kinematics::new(0.5), SolverConfig::new(0.05, 1.0)).unwrap();
        let m0 = out.diagnostics[0].mass;
        assert!(out.diagnostics.iter().all(|r| (r.mass - m0).abs() < 1e-12));
    }

    #[test]
    fn strang_self_convergence() {
        // kmax = 2 keeps the content projected out by each kick at O(ε³).
        let g = Geometry::new(1, 2, 64, 8.0, 3, 32).unwrap();
        let eq = Equilibrium::isotropic(1.0);
        let d0 = perturbed_state(&g, &eq, &[Perturbation { mode: [0, 0, 1], amplitude: 0.01, profile: VelocityProfile::Equilibrium }]).unwrap();
        let w = InteractionPotential::new(2.0, 1.0, WRule::OddPerp).unwrap();
        let kin = Kinematics::new(0.5);
        let mut finals = Vec::new();
        for dt in [0.05, 0.025, 0.0125] {
            let mut cfg = SolverConfig::new(dt, 1.0);
            cfg.filter = None;
            finals.push(run(d0.clone(), w, kin, cfg).unwrap().final_state);
        }
        let diff = |a: &SpectralDistribution, b: &SpectralDistribution| {
            a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
        };
        let e1 = diff(&finals[0], &finals[1]);
        let e2 = diff(&finals[1], &finals[2]);
        assert!(e1 / e2 >= 3.5, "{e1} {e2}");
    }

    #[test]
    fn checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let g = small_geometry();
        let mut cfg = SolverConfig::new(0.05, 0.2);
        cfg.checkpoint_every = Some(2);
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        run(perturbed(&g, 1e-3), InteractionPotential::odd_perp(2.0), Kinematics::new(0.5), cfg).unwrap();
        let back = crate::phase_space::read_checkpoint(std::fs::File::open(dir.path().join("checkpoint_000004.bin")).unwrap()).unwrap();
        assert!((back.time - 0.2).abs() < 1e-12);
    }

    #[test]
    fn step_guard_and_alias_warning() {
        let g = small_geometry();
        let err = SolverConfig::new(0.1, 1.0).validate(&perturbed(&g, 1e-3)).unwrap_err();
        assert!(matches!(err, Error::StepTooLarge { .. }));
        let mut cfg = SolverConfig::new(0.05, 0.05);
        cfg.dealias = false;
        let out = run(perturbed(&g, 0.2), InteractionPotential::odd_perp(2.0), Kinematics::new(0.5), cfg).unwrap();
        assert_eq!(out.warnings.len(), 1);
    }

    fn uniform_history(e: Vec3, b: Vec3, n: usize, dt: f64) -> FieldHistory {
        // A uniform field is the k = 0 coefficient.
        let c = |v: Vec3| [Complex64::from(v[0]), v[1].into(), v[2].into()];
        FieldHistory { modes: vec![[0, 0, 0]], dt, e_hat: vec![vec![c(e)]; n], b_hat: vec![vec![c(b)]; n] }
    }

    #[test]
    fn zero_field_gives_zero_deflection() {
        let h = uniform_history([0.0; 3], [0.0; 3], 50, 0.1);
        let kin = Kinematics::new(1.0);
        for p in halton_probes(8, 1.0) {
            let (end, d) = reduced_characteristics(3.0, 0.5, p, &h, &kin);
            assert!(crate::kinematics::norm3(d.dx) < 1e-13 && crate::kinematics::norm3(d.dv) < 1e-13);
            let ex = exact_flow(3.0, 0.5, p, &kin);
            assert!(crate::kinematics::norm3(crate::kinematics::torus_delta(end.x, ex.x)) < 1e-12);
        }
    }

    #[test]
    fn uniform_acceleration_closed_form() {
        let e1 = 0.3;
        let h = uniform_history([e1, 0.0, 0.0], [0.0; 3], 60, 0.1);
        let kin = Kinematics::landau();
        let p = PhasePoint::new([0.1, 0.2, 0.3], [0.5, -0.2, 1.0]);
        let (_, d) = reduced_characteristics(4.0, 1.0, p, &h, &kin);
        assert!((d.dv[0] - e1 * 3.0).abs() < 1e-12);
        assert!((d.dx[0] - e1 * 9.0 / 2.0).abs() < 1e-12);
        assert!(d.dv[1].abs() < 1e-14 && d.dx[2].abs() < 1e-14);
    }

    #[test]
    fn full_equals_reduced_without_b_and_reverses() {
        let h = uniform_history([0.2, -0.1, 0.0], [0.0; 3], 80, 0.1);
        let kin = Kinematics::new(1.3);
        for p in halton_probes(6, 1.0) {
            let a = full_characteristics(5.0, 0.0, p, &h, &kin);
            let (b, _) = reduced_characteristics(5.0, 0.0, p, &h, &kin);
            assert!(crate::kinematics::norm3(crate::kinematics::torus_delta(a.x, b.x)) < 1e-12);
            assert!(crate::kinematics::norm3(add(a.v, b.v, -1.0)) < 1e-12);
        }
        let hb = uniform_history([0.2, -0.1, 0.0], [0.05, 0.0, 0.02], 80, 0.1);
        let p = halton_probes(3, 1.0)[2];
        let fwd = full_endpoint(6.0, 1.0, p, &hb, &kin);
        let back = full_endpoint(1.0, 6.0, PhasePoint { x: fwd.0, v: fwd.1 }, &hb, &kin);
        assert!(crate::kinematics::norm3(add(back.0, p.x, -1.0)) < 1e-9);
        assert!(crate::kinematics::norm3(add(back.1, p.v, -1.0)) < 1e-9);
    }

    #[test]
    fn decaying_field_deflection_matches_duhamel_bound() {
        // |E(s)| = δe^{−λs} along x₁, B₀ = 0: |δV(t,τ)| ≤ ∫_τ^t δe^{−λs}ds ≤ (δ/λ)e^{−λτ}.
        let (delta, lambda) = (0.2, 0.5);
        let dt = 0.05;
        let n = 400;
        let c = |v: f64| [Complex64::from(v), ZERO, ZERO];
        let h = FieldHistory {
            modes: vec![[0, 0, 0]],
            dt,
            e_hat: (0..n).map(|i| vec![c(delta * (-lambda * i as f64 * dt).exp())]).collect(),
            b_hat: vec![vec![[ZERO; 3]]; n],
        };
        let kin = Kinematics::landau();
        let probes = halton_probes(16, 1.0);
        let mut prev = f64::INFINITY;
        for tau in [0.0, 2.0, 4.0, 6.0] {
            let tr = deflection_trace(tau, tau + 10.0, &probes, &h, &kin);
            let sup = tr.samples.iter().map(|s| s.2).fold(0.0, f64::max);
            let duhamel = delta / lambda * ((-lambda * tau).exp() - (-lambda * (tau + 10.0)).exp());
            assert!((sup - duhamel).abs() < 1e-6 * duhamel, "{sup} {duhamel}");
            assert!(sup <= prev);
            prev = sup;
        }
    }

    #[test]
    fn halton_probes_are_bounded() {
        let p = halton_probes(64, 1.3);
        assert_eq!(p.len(), 64);
        assert!(p.iter().all(|q| crate::kinematics::norm3(q.v) <= 5.0 * 1.3 + 1e-12));
        assert!(p.iter().all(|q| q.x.iter().all(|c| (0.0..1.0).contains(c))));
    }
}
