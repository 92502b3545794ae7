//! Linear theory: the free-streamed source `Â(t,k)`, the time-domain kernel
//! `K̂⁰(t,k)`, the Volterra march for `ρ̂(t,k)`, the stability margin and
//! decay-rate fitting.
//!
//! Linearizing around a Maxwellian and integrating along the exact flow gives,
//! per mode, `ρ̂(t) = Â(t) + ∫₀ᵗ K̂⁰(t−s)ρ̂(s) ds` with `η(τ) = M(τ)ᵀk` and
//!
//! ```text
//! K̂⁰(τ) = −2πi (Ŵ·η) f̃⁰(η) + 2πi (k×Ŵ)·∫₀^τ G(η(σ)) dσ,
//! G(η)  = 4π²(v_T² − v_T⊥²) η₃ (η₂, −η₁, 0) f̃⁰(η).
//! ```
//!
//! The first term is the electric response; the second is the magnetic
//! perturbation `B̂ = 2πi k×∫Ê` acting on an anisotropic equilibrium and
//! vanishes when `v_T⊥ = v_T`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{kf, rcross, CVec3, InteractionPotential};
use crate::kinematics::{streamed_frequency, Kinematics, Vec3};
use crate::phase_space::{
    eta_grid, transform_at, v_transform_block, Equilibrium, SpectralDistribution, VelocityProfile,
};
use crate::spectral::VOps;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Per-mode source, kernel and solution on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VolterraSystem {
    pub k: [i64; 3],
    pub dt: f64,
    pub t_grid: Vec<f64>,
    pub a_of_t: Vec<Complex64>,
    pub kernel_of_t: Vec<Complex64>,
    pub rho_of_t: Vec<Complex64>,
}

impl VolterraSystem {
    pub fn new(k: [i64; 3], dt: f64, a_of_t: Vec<Complex64>, kernel_of_t: Vec<Complex64>) -> Self {
        let t_grid = uniform_grid(dt, a_of_t.len());
        Self { k, dt, t_grid, a_of_t, kernel_of_t, rho_of_t: Vec::new() }
    }
}

pub fn uniform_grid(dt: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 * dt).collect()
}

/// How the η-grid is sampled off-node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMethod {
    /// Tensor cubic Lagrange interpolation of the η-grid values, linear in
    /// the last cell before the grid edge.
    Cubic,
    /// Direct trapezoid evaluation `Δv Σ f(v) e^{−2πiη·v}`, which is the
    /// band-limited interpolant of the η-grid.
    Exact,
}

/// `Â(t,k) = f̂₀(k, M(t)ᵀk)`: the free-streamed perturbation's density.
pub fn source_a(
    pert: &SpectralDistribution,
    k: [i64; 3],
    t_grid: &[f64],
    kin: &Kinematics,
    method: SourceMethod,
) -> Result<Vec<Complex64>> {
    let g = pert.geometry;
    let block = pert
        .mode_block(k)
        .ok_or_else(|| Error::Geometry(format!("mode {k:?} is not retained")))?;
    let vg = g.vgrid();
    let etas: Vec<Vec3> = t_grid.iter().map(|&t| streamed_frequency(k, t, kin)).collect();
    for eta in &etas {
        for a in 0..2 {
            if !vg.active(a) && eta[a].abs() > 1e-12 {
                return Err(Error::Geometry(format!(
                    "mode {k:?} streams perpendicular frequencies but dim_v = 1"
                )));
            }
        }
    }
    match method {
        SourceMethod::Exact => Ok(etas.iter().map(|e| transform_at(&g, block, *e)).collect()),
        SourceMethod::Cubic => {
            let mut ops = VOps::new(vg);
            let spec = v_transform_block(&mut ops, block);
            let axes: Vec<Vec<f64>> = (0..3).map(|a| eta_grid(&g, a)).collect();
            etas.iter()
                .map(|e| interpolate_centered(&vg, &spec, &axes, *e))
                .collect()
        }
    }
}

/// Closed-form source for a profile perturbation `amplitude·g(v)·2cos(2πk·x)`.
pub fn source_closed_form(
    profile: &VelocityProfile,
    eq: &Equilibrium,
    amplitude: f64,
    k: [i64; 3],
    t_grid: &[f64],
    kin: &Kinematics,
) -> Vec<Complex64> {
    t_grid
        .iter()
        .map(|&t| Complex64::new(amplitude * profile.transform(eq, streamed_frequency(k, t, kin)), 0.0))
        .collect()
}

fn lagrange4(x: f64) -> [f64; 4] {
    // Nodes −1, 0, 1, 2.
    [
        -x * (x - 1.0) * (x - 2.0) / 6.0,
        (x + 1.0) * (x - 1.0) * (x - 2.0) / 2.0,
        -(x + 1.0) * x * (x - 2.0) / 2.0,
        (x + 1.0) * x * (x - 1.0) / 6.0,
    ]
}

fn interpolate_centered(
    vg: &crate::spectral::VGrid,
    spec: &[Complex64],
    axes: &[Vec<f64>],
    eta: Vec3,
) -> Result<Complex64> {
    let mut stencils: Vec<Vec<(usize, f64)>> = Vec::with_capacity(3);
    for a in 0..3 {
        let n = vg.n[a];
        if n == 1 {
            stencils.push(vec![(0, 1.0)]);
            continue;
        }
        let d = axes[a][1] - axes[a][0];
        let c = (eta[a] - axes[a][0]) / d;
        let i = c.floor();
        let x = c - i;
        let i = i as i64;
        if i < 0 || i + 1 > n as i64 - 1 {
            return Err(Error::Extrapolation {
                eta,
                limit: axes[a][n - 1].min(-axes[a][0]),
            });
        }
        if i >= 1 && i + 2 <= n as i64 - 1 {
            let w = lagrange4(x);
            stencils.push((0..4).map(|j| ((i - 1 + j as i64) as usize, w[j])).collect());
        } else {
            stencils.push(vec![(i as usize, 1.0 - x), (i as usize + 1, x)]);
        }
    }
    let mut acc = ZERO;
    for &(i0, w0) in &stencils[0] {
        for &(i1, w1) in &stencils[1] {
            for &(i2, w2) in &stencils[2] {
                acc += spec[vg.index([i0, i1, i2])] * (w0 * w1 * w2);
            }
        }
    }
    Ok(acc)
}

/// Magnetic coupling factor `G(η)` for an anisotropic Maxwellian.
fn magnetic_factor(eq: &Equilibrium, eta: Vec3) -> Vec3 {
    let a = eq.v_thermal_perp * eq.v_thermal_perp;
    let b = eq.v_thermal * eq.v_thermal;
    if a == b {
        return [0.0; 3];
    }
    let s = 4.0 * std::f64::consts::PI.powi(2) * (b - a) * eta[2] * eq.transform(eta);
    [s * eta[1], -s * eta[0], 0.0]
}

fn cdot(a: CVec3, b: Vec3) -> Complex64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `K̂⁰(t,k)` on a time grid starting at 0. The inner magnetic integral uses
/// the cumulative trapezoid rule on the same grid.
pub fn kernel_k0(
    eq: &Equilibrium,
    w: &InteractionPotential,
    k: [i64; 3],
    t_grid: &[f64],
    kin: &Kinematics,
) -> Vec<Complex64> {
    let wk = w.w_hat(k);
    let kxw = rcross(kf(k), wk);
    let i2pi = Complex64::new(0.0, TWO_PI);
    let has_b = kxw.iter().any(|c| *c != ZERO) && eq.v_thermal != eq.v_thermal_perp;
    let mut inner = [0.0f64; 3];
    let mut prev: Option<(f64, Vec3)> = None;
    t_grid
        .iter()
        .map(|&t| {
            let eta = streamed_frequency(k, t, kin);
            let e_part = -i2pi * cdot(wk, eta) * eq.transform(eta);
            if !has_b {
                return e_part;
            }
            let gcur = magnetic_factor(eq, eta);
            if let Some((tp, gp)) = prev {
                for i in 0..3 {
                    inner[i] += 0.5 * (t - tp) * (gp[i] + gcur[i]);
                }
            }
            prev = Some((t, gcur));
            e_part + i2pi * cdot(kxw, inner)
        })
        .collect()
}

/// Trapezoid product integration of `ρ = A + K∗ρ`.
pub fn volterra_march(system: &mut VolterraSystem) -> Result<Vec<Complex64>> {
    let rho = march(&system.a_of_t, &system.kernel_of_t, system.dt)?;
    system.rho_of_t = rho.clone();
    Ok(rho)
}

/// `ρ_n(1 − dt/2·K₀) = A_n + dt(½K_nρ₀ + Σ_{j=1}^{n−1} K_{n−j}ρ_j)`.
pub fn march(a: &[Complex64], kernel: &[Complex64], dt: f64) -> Result<Vec<Complex64>> {
    if a.len() != kernel.len() {
        return Err(Error::Parameter("source and kernel lengths differ".into()));
    }
    let n = a.len();
    let mut rho = Vec::with_capacity(n);
    if n == 0 {
        return Ok(rho);
    }
    let denom = Complex64::new(1.0, 0.0) - kernel[0] * (0.5 * dt);
    if denom.norm() < 1e-8 {
        return Err(Error::NearSingular { step: 0, value: denom.norm() });
    }
    // At t = 0 the integral is empty.
    rho.push(a[0]);
    for i in 1..n {
        let mut acc = kernel[i] * rho[0] * 0.5;
        for j in 1..i {
            acc += kernel[i - j] * rho[j];
        }
        let r = (a[i] + acc * dt) / denom;
        if !r.re.is_finite() || !r.im.is_finite() {
            return Err(Error::NonFinite { step: i, what: "rho".into() });
        }
        rho.push(r);
    }
    Ok(rho)
}

/// Linearized magnetic perturbation `B̂(t) = 2πi (k×Ŵ) ∫₀ᵗ ρ̂`.
pub fn linear_b_field(rho: &[Complex64], k: [i64; 3], w: &InteractionPotential, dt: f64) -> Vec<CVec3> {
    let kxw = rcross(kf(k), w.w_hat(k));
    let i2pi = Complex64::new(0.0, TWO_PI);
    let mut acc = ZERO;
    let mut out = Vec::with_capacity(rho.len());
    for (i, r) in rho.iter().enumerate() {
        if i > 0 {
            acc += (rho[i - 1] + r) * (0.5 * dt);
        }
        out.push([kxw[0] * acc * i2pi, kxw[1] * acc * i2pi, kxw[2] * acc * i2pi]);
    }
    out
}

/// Options for [`stability_margin`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityOptions {
    /// Resonance threshold velocity `v_Te`.
    pub v_te: f64,
    pub kappa_min: f64,
    /// Laplace regularization; `None` picks `1e-3·|k₃|v_T`.
    pub sigma: Option<f64>,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self { v_te: 1.0, kappa_min: 0.1, sigma: None }
    }
}

/// Measured stand-in for the stability condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub k: [i64; 3],
    pub sup: f64,
    pub argmax_omega: f64,
    pub kappa_margin: f64,
    pub sigma: f64,
    pub v_te: f64,
    pub resonant_mass: f64,
    pub stable: bool,
}

/// Default ω-grid: `n` points on `±5·max(5|k₃|v_T, Ω)`.
pub fn default_omega_grid(k: [i64; 3], eq: &Equilibrium, kin: &Kinematics, n: usize) -> Vec<f64> {
    let mut span = 5.0 * (5.0 * k[2].abs() as f64 * eq.v_thermal).max(kin.omega.abs());
    if span == 0.0 {
        span = 5.0 * 5.0 * crate::fields::knorm(k).max(1.0) * eq.v_thermal_perp;
    }
    let n = n.max(2);
    (0..n).map(|i| -span + 2.0 * span * i as f64 / (n - 1) as f64).collect()
}

pub fn default_sigma(k: [i64; 3], eq: &Equilibrium, kin: &Kinematics) -> f64 {
    if k[2] != 0 {
        1e-3 * k[2].abs() as f64 * eq.v_thermal
    } else {
        1e-3 * kin.omega.abs().max(eq.v_thermal_perp * crate::fields::knorm(k))
    }
}

/// `K̃⁰(ω) = ∫₀^∞ e^{(2πiω − σ)t} K̂⁰(t) dt` on a set of frequencies.
pub fn kernel_laplace(
    eq: &Equilibrium,
    w: &InteractionPotential,
    k: [i64; 3],
    omega_grid: &[f64],
    kin: &Kinematics,
    sigma: f64,
) -> Vec<Complex64> {
    let omax = omega_grid.iter().fold(0.0f64, |m, o| m.max(o.abs()));
    let kn = crate::fields::knorm(k);
    if kn == 0.0 {
        return vec![ZERO; omega_grid.len()];
    }
    let periodic = k[2] == 0 && kin.omega != 0.0;
    // Horizon where f̃⁰(M(t)ᵀk) < 1e-18; for k₃ = 0, Ω > 0 one gyro-period.
    let horizon = if periodic {
        TWO_PI / kin.omega.abs()
    } else if k[2] != 0 {
        1.5 * (18.0 * std::f64::consts::LN_10 / (2.0 * std::f64::consts::PI.powi(2))).sqrt()
            / (eq.v_thermal * k[2].abs() as f64)
    } else {
        1.5 * (18.0 * std::f64::consts::LN_10 / (2.0 * std::f64::consts::PI.powi(2))).sqrt()
            / (eq.v_thermal_perp * kn)
    };
    let rate = omax.max(kin.omega.abs() / TWO_PI).max(kn * eq.v_thermal.max(eq.v_thermal_perp)).max(1.0);
    let steps = ((horizon * rate * 40.0).ceil() as usize).max(2000);
    let h = horizon / steps as f64;
    let t_grid = uniform_grid(h, steps + 1);
    let kern = kernel_k0(eq, w, k, &t_grid, kin);
    let k_inf = *kern.last().expect("non-empty grid");
    omega_grid
        .par_iter()
        .map(|&om| {
            let z = Complex64::new(-sigma, TWO_PI * om);
            let step = (z * h).exp();
            let mut ph = Complex64::new(1.0, 0.0);
            let mut acc = ZERO;
            for (i, kv) in kern.iter().enumerate() {
                let wgt = if i == 0 || i == steps { 0.5 } else { 1.0 };
                if i % 64 == 0 {
                    ph = (z * t_grid[i]).exp();
                }
                acc += kv * ph * wgt;
                ph *= step;
            }
            acc *= h;
            if periodic {
                acc / (Complex64::new(1.0, 0.0) - (z * horizon).exp())
            } else {
                // Magnetic terms settle to a constant K_∞; its tail is analytic.
                acc + k_inf * (z * horizon).exp() / (-z)
            }
        })
        .collect()
}

/// Sup of `|K̃⁰(ω,k)|` over the grid, the margin `1 − sup`, and the resonant
/// mass `∫_{|v₃|≤v_Te} f⁰ dv₃ = erf(v_Te/(√2 v_T))`.
pub fn stability_margin(
    eq: &Equilibrium,
    w: &InteractionPotential,
    k: [i64; 3],
    omega_grid: &[f64],
    kin: &Kinematics,
    opts: &StabilityOptions,
) -> StabilityReport {
    let sigma = opts.sigma.unwrap_or_else(|| default_sigma(k, eq, kin));
    let vals = kernel_laplace(eq, w, k, omega_grid, kin, sigma);
    let (mut sup, mut arg) = (0.0, 0.0);
    for (o, v) in omega_grid.iter().zip(&vals) {
        if v.norm() > sup {
            sup = v.norm();
            arg = *o;
        }
    }
    let kappa_margin = 1.0 - sup;
    StabilityReport {
        k,
        sup,
        argmax_omega: arg,
        kappa_margin,
        sigma,
        v_te: opts.v_te,
        resonant_mass: libm::erf(opts.v_te / (std::f64::consts::SQRT_2 * eq.v_thermal)),
        stable: kappa_margin >= opts.kappa_min,
    }
}

/// Result of [`fit_decay_rate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub rate: f64,
    pub r_squared: f64,
    pub points: usize,
    /// The two half-window rates differ by more than 10%.
    pub non_exponential: bool,
    pub first_half_rate: f64,
    pub second_half_rate: f64,
}

/// Envelope: forward running max of `|ρ|` over one `period` (or `|ρ|` itself).
pub fn envelope(t: &[f64], rho: &[Complex64], period: Option<f64>) -> Vec<f64> {
    let mag: Vec<f64> = rho.iter().map(|c| c.norm()).collect();
    let Some(p) = period else { return mag };
    let mut out = Vec::with_capacity(mag.len());
    let mut j = 0;
    let mut window: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    for i in 0..mag.len() {
        while j < mag.len() && t[j] <= t[i] + p {
            while window.back().is_some_and(|&b| mag[b] <= mag[j]) {
                window.pop_back();
            }
            window.push_back(j);
            j += 1;
        }
        while window.front().is_some_and(|&f| f < i) {
            window.pop_front();
        }
        out.push(window.front().map_or(mag[i], |&f| mag[f]));
    }
    out
}

fn log_slope(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let sxx: f64 = t.iter().map(|a| (a - mt).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

/// Least-squares decay rate of the log-envelope over `window = (t0, t1)`.
/// Envelope points at the end of the trace whose forward period extends past
/// the data are excluded.
pub fn fit_decay_rate(
    t: &[f64],
    rho: &[Complex64],
    window: (f64, f64),
    period: Option<f64>,
) -> Result<DecayFit> {
    let env = envelope(t, rho, period);
    let t_last = *t.last().unwrap_or(&0.0);
    let usable = t_last - period.unwrap_or(0.0);
    let (mut ts, mut ys) = (Vec::new(), Vec::new());
    for (ti, e) in t.iter().zip(&env) {
        if *ti >= window.0 && *ti <= window.1 && *ti <= usable && *e > 0.0 {
            ts.push(*ti);
            ys.push(e.ln());
        }
    }
    if ts.len() < 8 {
        return Err(Error::WindowTooShort { points: ts.len() });
    }
    let (slope, r2) = log_slope(&ts, &ys);
    let half = ts.len() / 2;
    let (s1, _) = log_slope(&ts[..half], &ys[..half]);
    let (s2, _) = log_slope(&ts[half..], &ys[half..]);
    let (r1, r2h) = (-s1, -s2);
    let non_exponential = (r1 - r2h).abs() > 0.1 * r1.abs().max(r2h.abs());
    Ok(DecayFit {
        rate: -slope,
        r_squared: r2,
        points: ts.len(),
        non_exponential,
        first_half_rate: r1,
        second_half_rate: r2h,
    })
}

/// Everything needed to solve the linear problem for a set of modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSetup {
    pub eq: Equilibrium,
    pub w: InteractionPotential,
    pub kin: Kinematics,
    pub profile: VelocityProfile,
    pub amplitude: f64,
    pub dt: f64,
    pub t_end: f64,
}

/// Closed-form source, kernel and march for one mode.
pub fn solve_mode(setup: &LinearSetup, k: [i64; 3]) -> Result<VolterraSystem> {
    let n = (setup.t_end / setup.dt).round() as usize + 1;
    let t = uniform_grid(setup.dt, n);
    let a = source_closed_form(&setup.profile, &setup.eq, setup.amplitude, k, &t, &setup.kin);
    let kern = kernel_k0(&setup.eq, &setup.w, k, &t, &setup.kin);
    let mut sys = VolterraSystem::new(k, setup.dt, a, kern);
    volterra_march(&mut sys)?;
    Ok(sys)
}

/// [`solve_mode`] over many modes in parallel.
pub fn solve_modes(setup: &LinearSetup, modes: &[[i64; 3]]) -> Result<Vec<VolterraSystem>> {
    modes.par_iter().map(|k| solve_mode(setup, *k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::WRule;
    use crate::phase_space::{maxwellian, perturbed_state, Geometry, Perturbation};

    #[test]
    fn zero_kernel_returns_source() {
        let a: Vec<Complex64> = (0..50).map(|i| Complex64::new((i as f64 * 0.1).sin(), 0.3)).collect();
        let mut sys = VolterraSystem::new([0, 0, 1], 0.1, a.clone(), vec![ZERO; 50]);
        assert_eq!(volterra_march(&mut sys).unwrap(), a);
    }

    #[test]
    fn constant_kernel_matches_exponential_resolvent() {
        let c = Complex64::new(-0.7, 0.4);
        let mut errs = Vec::new();
        for &dt in &[0.02, 0.01, 0.005] {
            let n = (2.0 / dt) as usize + 1;
            let rho = march(&vec![Complex64::new(1.3, 0.0); n], &vec![c; n], dt).unwrap();
            let t = (n - 1) as f64 * dt;
            errs.push((rho[n - 1] - (c * t).exp() * 1.3).norm());
        }
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() > 1.9, "{errs:?}");
        }
        assert!(errs[2] < 1e-5);
    }

    #[test]
    fn near_singular_update_is_reported() {
        let err = march(&[Complex64::new(1.0, 0.0); 3], &[Complex64::new(20.0, 0.0); 3], 0.1).unwrap_err();
        assert!(matches!(err, Error::NearSingular { .. }));
    }

    #[test]
    fn kernel_vanishes_for_zero_potential_and_parallel_modes() {
        let eq = Equilibrium::isotropic(1.0);
        let kin = Kinematics::new(1.0);
        let t = uniform_grid(0.05, 100);
        let w0 = InteractionPotential::odd_perp(2.0).scaled(0.0);
        assert!(kernel_k0(&eq, &w0, [1, 0, 1], &t, &kin).iter().all(|c| *c == ZERO));
        let w = InteractionPotential::odd_perp(2.0);
        assert!(kernel_k0(&eq, &w, [0, 0, 2], &t, &kin).iter().all(|c| c.norm() == 0.0));
        assert!(kernel_k0(&eq, &w, [1, 1, 0], &t, &kin).iter().all(|c| c.norm() == 0.0));
        assert!(kernel_k0(&eq, &w, [1, 0, 1], &t, &kin).iter().any(|c| c.norm() > 1e-3));
    }

    #[test]
    fn maxwellian_kernel_envelope_decays() {
        let eq = Equilibrium::isotropic(1.0);
        let kin = Kinematics::new(2.0);
        let w = InteractionPotential::odd_perp(2.0);
        let t = uniform_grid(0.01, 301);
        let kern = kernel_k0(&eq, &w, [1, 0, 1], &t, &kin);
        let fit = fit_decay_rate(&t, &kern, (0.5, 2.5), Some(std::f64::consts::PI / 2.0)).unwrap();
        assert!(fit.rate > 0.0);
    }

    #[test]
    fn anisotropic_magnetic_term_tends_to_a_constant() {
        let eq = Equilibrium::anisotropic(1.0, 1.3);
        let kin = Kinematics::new(1.0);
        let w = InteractionPotential::odd_perp(2.0);
        let t = uniform_grid(0.005, 1201);
        let kern = kernel_k0(&eq, &w, [1, 0, 1], &t, &kin);
        let tail = kern[1100];
        assert!(tail.norm() > 1e-6);
        assert!((kern[1200] - tail).norm() < 1e-12);
    }

    #[test]
    fn cubic_and_exact_sources_agree_with_closed_form() {
        let g = Geometry::new(1, 1, 256, 16.0, 1, 1).unwrap();
        let (eq, _) = maxwellian(&g, 1.0).unwrap();
        let p = Perturbation { mode: [0, 0, 1], amplitude: 1e-3, profile: VelocityProfile::Gaussian { width: 0.8 } };
        let d = perturbed_state(&g, &eq, &[p]).unwrap();
        let kin = Kinematics::landau();
        let t = uniform_grid(0.1, 30);
        let closed = source_closed_form(&p.profile, &eq, p.amplitude, [0, 0, 1], &t, &kin);
        let exact = source_a(&d, [0, 0, 1], &t, &kin, SourceMethod::Exact).unwrap();
        let cubic = source_a(&d, [0, 0, 1], &t, &kin, SourceMethod::Cubic).unwrap();
        for i in 0..t.len() {
            assert!((exact[i] - closed[i]).norm() < 1e-15);
            assert!((cubic[i] - closed[i]).norm() < 1e-3 * p.amplitude, "{i}");
        }
        let unperturbed = perturbed_state(&g, &eq, &[]).unwrap();
        let a0 = source_a(&unperturbed, [0, 0, 1], &t, &kin, SourceMethod::Cubic).unwrap();
        assert!(a0.iter().all(|c| c.norm() == 0.0));
        let far = uniform_grid(1.0, 20);
        assert!(matches!(
            source_a(&d, [0, 0, 1], &far, &kin, SourceMethod::Cubic),
            Err(Error::Extrapolation { .. })
        ));
    }

    #[test]
    fn maxwellian_shaped_source_follows_the_mixing_law() {
        let eq = Equilibrium::isotropic(1.0);
        let t = uniform_grid(0.05, 20);
        let a = source_closed_form(&VelocityProfile::Equilibrium, &eq, 1.0, [0, 0, 1], &t, &Kinematics::new(0.7));
        for (ti, ai) in t.iter().zip(&a) {
            let want = (-2.0 * std::f64::consts::PI.powi(2) * ti * ti).exp();
            assert!((ai.re - want).abs() < 1e-15);
        }
    }

    #[test]
    fn stability_margin_examples() {
        let eq = Equilibrium::isotropic(1.0);
        let kin = Kinematics::new(2.0);
        let w = InteractionPotential::odd_perp(2.0);
        let opts = StabilityOptions::default();
        let k = [1, 0, 1];
        let grid = default_omega_grid(k, &eq, &kin, 801);
        let rep = stability_margin(&eq, &w.scaled(0.0), k, &grid, &kin, &opts);
        assert_eq!(rep.sup, 0.0);
        assert_eq!(rep.kappa_margin, 1.0);
        let rep = stability_margin(&eq, &w, k, &grid, &kin, &opts);
        assert!(rep.kappa_margin > 0.0 && rep.stable, "{rep:?}");
        let half = stability_margin(&eq, &w.scaled(0.5), k, &grid, &kin, &opts);
        assert!((half.sup - 0.5 * rep.sup).abs() < 1e-10 * rep.sup);
        assert!((rep.resonant_mass - libm::erf(1.0 / 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn margin_is_stable_as_sigma_vanishes() {
        let eq = Equilibrium::isotropic(1.0);
        let kin = Kinematics::new(2.0);
        let w = InteractionPotential::odd_perp(2.0);
        let k = [1, 0, 2];
        let grid = default_omega_grid(k, &eq, &kin, 401);
        let sups: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&s| {
                let o = StabilityOptions { sigma: Some(s), ..Default::default() };
                stability_margin(&eq, &w, k, &grid, &kin, &o).sup
            })
            .collect();
        assert!((sups[1] - sups[2]).abs() < 1e-3 * sups[2], "{sups:?}");
    }

    #[test]
    fn landau_limit_matches_the_classical_kernel() {
        let eq = Equilibrium::isotropic(1.0);
        let w = InteractionPotential::new(2.0, 1.0, WRule::Longitudinal).unwrap();
        let t = uniform_grid(0.01, 300);
        for k1 in 1..=3i64 {
            let kern = kernel_k0(&eq, &w, [k1, 0, 0], &t, &Kinematics::new(1e-9));
            let kk = k1 as f64;
            let ws = 1.0 / (TWO_PI * kk * (1.0 + kk * kk));
            for (ti, kv) in t.iter().zip(&kern) {
                let fhat = (-2.0 * std::f64::consts::PI.powi(2) * kk * kk * ti * ti).exp();
                let want = -4.0 * std::f64::consts::PI.powi(2) * ws * fhat * kk * kk * ti;
                assert!((kv - want).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn fit_decay_rate_examples() {
        let t = uniform_grid(0.01, 2001);
        let pure: Vec<Complex64> = t.iter().map(|x| Complex64::new((-0.5 * x).exp(), 0.0)).collect();
        let f = fit_decay_rate(&t, &pure, (1.0, 15.0), None).unwrap();
        assert!((f.rate - 0.5).abs() < 1e-6 && !f.non_exponential);
        let osc: Vec<Complex64> = t.iter().map(|x| Complex64::new((-0.3 * x).exp() * (4.0 * x).cos(), 0.0)).collect();
        let f = fit_decay_rate(&t, &osc, (1.0, 15.0), Some(std::f64::consts::FRAC_PI_4)).unwrap();
        assert!((f.rate - 0.3).abs() < 0.02, "{f:?}");
        let gauss: Vec<Complex64> = t.iter().map(|x| Complex64::new((-0.5 * x * x).exp(), 0.0)).collect();
        let f = fit_decay_rate(&t, &gauss, (0.5, 6.0), None).unwrap();
        assert!(f.non_exponential && f.second_half_rate > f.first_half_rate);
        assert!(matches!(fit_decay_rate(&t, &pure, (1.0, 1.05), None), Err(Error::WindowTooShort { .. })));
    }
}
