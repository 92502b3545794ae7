//! Plasma echoes, Gaussian phase mixing, the bilinear transfer bounds for
//! `σ = ∫ R G ∘ S⁰ ds`, the echo kernel `K^{(α),γ}` with its exponential
//! moments, and the worst-case growth-control march.
//!
//! Echo experiments run under free transport with the fields off. A pulse
//! `f ← f·(1 + a cos 2πk x₃)` shifts mode content as
//! `f̂(k') += (a/2)(f̂(k'−k) + f̂(k'+k))`.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic_norms::{f_norm, z_norm, NormParams};
use crate::error::{Error, Result};
use crate::kinematics::Kinematics;
use crate::linear_volterra::{kernel_k0, march, stability_margin, uniform_grid, StabilityOptions};
use crate::nonlinear_vlasov::free_flow;
use crate::phase_space::{density, maxwellian, Equilibrium, Geometry, SpectralDistribution};
use crate::fields::InteractionPotential;
use crate::spectral::{phase_multiply, VOps};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

// ---------------------------------------------------------------------------
// Echoes

/// Two-pulse echo experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoScenario {
    pub a1: f64,
    pub a2: f64,
    pub k1: i64,
    pub k2: i64,
    pub tau_pulse: f64,
    pub v_thermal: f64,
}

impl EchoScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.k2 > self.k1 && self.k1 >= 1) {
            return Err(Error::Parameter(format!("need k2 > k1 >= 1, got k1 = {}, k2 = {}", self.k1, self.k2)));
        }
        if !(self.tau_pulse > 0.0) || !(self.v_thermal > 0.0) {
            return Err(Error::Parameter("tau_pulse and v_thermal must be positive".into()));
        }
        Ok(())
    }

    /// `τ' = k₂τ/(k₂ − k₁)`.
    pub fn predicted_time(&self) -> f64 {
        self.k2 as f64 * self.tau_pulse / (self.k2 - self.k1) as f64
    }

    pub fn echo_mode(&self) -> i64 {
        self.k2 - self.k1
    }
}

/// `|ρ̂(t, k₂ − k₁)|` on the output grid and the detected peak after the second pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoTrace {
    pub t: Vec<f64>,
    pub rho: Vec<f64>,
    pub predicted_time: f64,
    pub peak_time: f64,
    pub peak_value: f64,
    /// Largest `|ρ̂(t, k₁)|`, the first-pulse density peak.
    pub first_pulse_peak: f64,
}

/// Geometry for the echo run: parallel velocity only, modes up to `k₁ + k₂`.
pub fn echo_geometry(scenario: &EchoScenario, nv: usize, lv: f64) -> Result<Geometry> {
    Geometry::new(1, (scenario.k1 + scenario.k2) as usize, nv, lv, 1, 1)
}

/// `f ← f·(1 + a cos 2πk x₃)`, truncated to the retained modes.
pub fn apply_pulse(dist: &mut SpectralDistribution, k: i64, a: f64) {
    let g = dist.geometry;
    let n = g.vlen();
    let old = dist.data.clone();
    for (i, m) in g.modes().iter().enumerate() {
        for src in [m[2] - k, m[2] + k] {
            if let Some(j) = g.mode_index([0, 0, src]) {
                let (dst, from) = (&mut dist.data[i * n..(i + 1) * n], &old[j * n..(j + 1) * n]);
                for (d, s) in dst.iter_mut().zip(from) {
                    *d += s * (0.5 * a);
                }
            }
        }
    }
}

/// Free-transport echo: pulse `k₁` at `t = 0`, pulse `k₂` at `τ`, trace of the
/// echo mode every `dt_out` up to `t_end`.
pub fn run_echo(
    scenario: &EchoScenario,
    geometry: &Geometry,
    kin: &Kinematics,
    dt_out: f64,
    t_end: f64,
) -> Result<EchoTrace> {
    scenario.validate()?;
    let predicted = scenario.predicted_time();
    if predicted > t_end {
        return Err(Error::Horizon { predicted, t_end });
    }
    if geometry.dim_x != 1 || geometry.kmax < (scenario.k1 + scenario.k2) as usize {
        return Err(Error::Geometry("echo needs dim_x = 1 and kmax >= k1 + k2".into()));
    }
    if !(dt_out > 0.0) {
        return Err(Error::Parameter("dt_out must be positive".into()));
    }
    let (_, f0) = maxwellian(geometry, scenario.v_thermal)?;
    let mut base = SpectralDistribution::zeros(*geometry);
    let i0 = geometry.mode_index([0, 0, 0]).expect("zero mode retained");
    base.block_mut(i0).copy_from_slice(&f0);
    apply_pulse(&mut base, scenario.k1, scenario.a1);

    let ke = geometry.mode_index([0, 0, scenario.echo_mode()]).expect("echo mode retained");
    let k1i = geometry.mode_index([0, 0, scenario.k1]).expect("k1 retained");
    let mut ops = VOps::new(geometry.vgrid());
    let n_out = (t_end / dt_out).round() as usize;
    let pulse_step = (scenario.tau_pulse / dt_out).round() as usize;

    // Each output is one exact flow from the latest pulse, so no phase error accumulates.
    let mut second = None;
    let (mut t, mut rho) = (Vec::with_capacity(n_out + 1), Vec::with_capacity(n_out + 1));
    let mut first_peak: f64 = 0.0;
    for step in 0..=n_out {
        let ts = step as f64 * dt_out;
        if step == pulse_step && scenario.a2 != 0.0 {
            let mut s = base.clone();
            free_flow(&mut ops, &mut s, scenario.tau_pulse, kin);
            apply_pulse(&mut s, scenario.k2, scenario.a2);
            second = Some(s);
        }
        let (start, t0) = match &second {
            Some(s) => (s, scenario.tau_pulse),
            None => (&base, 0.0),
        };
        let mut s = SpectralDistribution { geometry: *geometry, data: Vec::new(), time: t0 };
        let n = geometry.vlen();
        s.data = vec![ZERO; geometry.n_modes() * n];
        for idx in [ke, k1i] {
            s.block_mut(idx).copy_from_slice(start.block(idx));
        }
        free_flow(&mut ops, &mut s, ts - t0, kin);
        let r = density(&s);
        t.push(ts);
        rho.push(r[ke].norm());
        if second.is_none() {
            first_peak = first_peak.max(r[k1i].norm());
        }
    }
    let (mut peak_time, mut peak_value) = (f64::NAN, -1.0);
    for (ti, r) in t.iter().zip(&rho) {
        if *ti > scenario.tau_pulse && *r > peak_value {
            peak_time = *ti;
            peak_value = *r;
        }
    }
    Ok(EchoTrace { t, rho, predicted_time: predicted, peak_time, peak_value, first_pulse_peak: first_peak })
}

// ---------------------------------------------------------------------------
// Gaussian phase mixing

/// Comparison of free-streamed single-pulse densities with the Gaussian law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub t: Vec<f64>,
    /// `|ρ̂(t,k₁)|/|ρ̂(0,k₁)|` from the transported distribution.
    pub simulated: Vec<f64>,
    /// `exp(−½κ²v_T²t²)` with the angular wavenumber `κ = 2πk₁`.
    pub law: Vec<f64>,
    /// Independent fine-midpoint quadrature of `∫f⁰(v)cos(κvt)dv`.
    pub oracle: Vec<f64>,
    pub max_rel_error: f64,
    pub max_oracle_error: f64,
}

/// `exp(−½κ²v_T²t²)`, `κ = 2πk`: the transform of a Maxwellian at `η = kt`.
pub fn gaussian_law(k: f64, v_thermal: f64, t: f64) -> f64 {
    let kappa = TWO_PI * k;
    (-0.5 * (kappa * v_thermal * t).powi(2)).exp()
}

/// Midpoint rule on `[−12v_T, 12v_T]` with `n` cells.
pub fn mixing_oracle(k: f64, v_thermal: f64, t: f64, n: usize) -> f64 {
    let l = 12.0 * v_thermal;
    let h = 2.0 * l / n as f64;
    let norm = 1.0 / (TWO_PI.sqrt() * v_thermal);
    let mut acc = 0.0;
    for i in 0..n {
        let v = -l + (i as f64 + 0.5) * h;
        acc += norm * (-0.5 * (v / v_thermal).powi(2)).exp() * (TWO_PI * k * v * t).cos();
    }
    acc * h
}

/// Single pulse of wavenumber `k₁` on a Maxwellian, transported freely.
pub fn gaussian_mixing_check(k1: i64, v_thermal: f64, t_grid: &[f64]) -> Result<MixingReport> {
    if k1 < 1 || !(v_thermal > 0.0) {
        return Err(Error::Parameter("need k1 >= 1 and v_thermal > 0".into()));
    }
    let lv = (8.0 * v_thermal).max(8.0);
    let g = Geometry::new(1, k1 as usize, 2048, lv, 1, 1)?;
    let (_, f0) = maxwellian(&g, v_thermal)?;
    let mut base = SpectralDistribution::zeros(g);
    base.block_mut(g.mode_index([0, 0, 0]).expect("zero mode")).copy_from_slice(&f0);
    apply_pulse(&mut base, k1, 1.0);
    let ik = g.mode_index([0, 0, k1]).expect("k1 retained");
    let rho0 = density(&base)[ik].norm();
    let kin = Kinematics::landau();
    let mut ops = VOps::new(g.vgrid());
    let (mut simulated, mut law, mut oracle) = (Vec::new(), Vec::new(), Vec::new());
    let (mut max_rel, mut max_or) = (0.0_f64, 0.0_f64);
    for &t in t_grid {
        let mut s = base.clone();
        free_flow(&mut ops, &mut s, t, &kin);
        let sim = density(&s)[ik].norm() / rho0;
        let l = gaussian_law(k1 as f64, v_thermal, t);
        let o = mixing_oracle(k1 as f64, v_thermal, t, 200_000);
        max_rel = max_rel.max((sim - l).abs() / l);
        max_or = max_or.max((sim - o).abs() / o.abs());
        simulated.push(sim);
        law.push(l);
        oracle.push(o);
    }
    Ok(MixingReport {
        t: t_grid.to_vec(),
        simulated,
        law,
        oracle,
        max_rel_error: max_rel,
        max_oracle_error: max_or,
    })
}

// ---------------------------------------------------------------------------
// Bilinear transfer bounds

/// Norm indices of the bilinear bounds, with `2λ ≥ λ̄ > λ` and
/// `μ̄ ≥ μ' > μ > μ̂`. The shift parameter is `b(t,s) = D·s/(t(1+t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaParams {
    pub lambda: f64,
    pub lambda_bar: f64,
    pub mu_hat: f64,
    pub mu: f64,
    pub mu_prime: f64,
    pub mu_bar: f64,
    pub t: f64,
    pub d: f64,
    /// Simpson intervals in `s` (even).
    pub n_s: usize,
}

impl SigmaParams {
    pub fn validate(&self) -> Result<()> {
        let ok_l = 2.0 * self.lambda >= self.lambda_bar && self.lambda_bar > self.lambda && self.lambda > 0.0;
        let ok_m = self.mu_bar >= self.mu_prime && self.mu_prime > self.mu && self.mu > self.mu_hat && self.mu_hat > 0.0;
        if !ok_l || !ok_m {
            return Err(Error::Parameter("need 2λ ≥ λ̄ > λ > 0 and μ̄ ≥ μ' > μ > μ̂ > 0".into()));
        }
        if !(self.t > 0.0) || !(self.d > 0.0 && self.d < 1.0) || self.n_s < 2 || self.n_s % 2 != 0 {
            return Err(Error::Parameter("need t > 0, 0 < D < 1 and an even n_s >= 2".into()));
        }
        Ok(())
    }

    pub fn b(&self, s: f64) -> f64 {
        self.d * s / (self.t * (1.0 + self.t))
    }
}

/// Both sides of the four bilinear bounds, in the order
/// (σ, F̄-weighted), (σ, sup-weighted), (σ₁, sup-weighted), (σ₁, F̄-weighted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    pub lhs: [f64; 4],
    pub rhs: [f64; 4],
    pub ratios: [f64; 4],
}

impl SigmaReport {
    /// The third bound, `‖σ₁‖_{F^{λt+μ}}` against the sup-weighted integral.
    pub fn sigma1_sup_holds(&self) -> bool {
        self.lhs[2] <= self.rhs[2] * (1.0 + 1e-10)
    }
}

/// `sup_{k, l≠0} e^{−π(μ̄−μ)|l|} e^{−π(λ̄−λ)|k(t−s)+ls|} e^{−2π[μ'−μ+λb(t−s)]|k−l|}`,
/// `k = 0` included.
pub fn sigma_sup_weight(p: &SigmaParams, s: f64) -> f64 {
    let lag = p.t - s;
    let cm = std::f64::consts::PI * (p.mu_bar - p.mu);
    let cl = std::f64::consts::PI * (p.lambda_bar - p.lambda);
    let cd = TWO_PI * (p.mu_prime - p.mu + p.lambda * p.b(s) * lag);
    let term = |k: f64, l: f64| (-cm * l.abs() - cl * (k * lag + l * s).abs() - cd * (k - l).abs()).exp();
    let mut best: f64 = 0.0;
    for la in 1..100_000i64 {
        if (-cm * la as f64).exp() < best {
            break;
        }
        for l in [la as f64, -(la as f64)] {
            let mut cands = vec![l, 0.0];
            if lag > 0.0 {
                let kc = -l * s / lag;
                cands.extend([kc.floor(), kc.ceil()]);
            }
            for k in cands {
                best = best.max(term(k, l));
            }
        }
    }
    best
}

fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    (0..=n)
        .map(|j| {
            let c = if j == 0 || j == n {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

/// `P̂(k, v) = Σ_l R̂(k−l) Ĝ(l, v)` on the modes of `g`.
fn product(r: &[Complex64], g: &SpectralDistribution) -> SpectralDistribution {
    let geo = g.geometry;
    let n = geo.vlen();
    let modes = geo.modes();
    let mut out = SpectralDistribution::zeros(geo);
    for (i, k) in modes.iter().enumerate() {
        for (j, l) in modes.iter().enumerate() {
            let d = [k[0] - l[0], k[1] - l[1], k[2] - l[2]];
            let Some(ir) = geo.mode_index(d) else { continue };
            let c = r[ir];
            if c == ZERO {
                continue;
            }
            let src = &g.data[j * n..(j + 1) * n];
            for (o, x) in out.data[i * n..(i + 1) * n].iter_mut().zip(src) {
                *o += c * x;
            }
        }
    }
    out
}

/// `σ̂(t,k,v) = ∫₀ᵗ e^{−2πik(t−s)v} Σ_l R̂(s,k−l)Ĝ(s,l,v) ds` by Simpson's rule.
///
/// This is `σ(t,x,v) = ∫₀ᵗ (RG)(s, x−(t−s)v, v) ds`, the orientation for which
/// `‖(RG)(s)∘S⁰_{s−t}‖_{Z_t} = ‖(RG)(s)‖_{Z_s}`.
pub fn sigma_field<R, G>(r: &R, g: &G, geometry: &Geometry, t: f64, n_s: usize) -> SpectralDistribution
where
    R: Fn(f64) -> Vec<Complex64>,
    G: Fn(f64) -> SpectralDistribution,
{
    let h = t / n_s as f64;
    let w = simpson_weights(n_s, h);
    let vg = geometry.vgrid();
    let n = geometry.vlen();
    let mut sigma = SpectralDistribution::zeros(*geometry);
    sigma.time = t;
    for (j, wj) in w.iter().enumerate() {
        let s = j as f64 * h;
        let mut p = product(&r(s), &g(s));
        for (i, k) in geometry.modes().iter().enumerate() {
            let q = [0.0, 0.0, k[2] as f64 * (t - s)];
            let block = p.block_mut(i);
            if q[2] != 0.0 {
                phase_multiply(&vg, block, q);
            }
            for (o, x) in sigma.data[i * n..(i + 1) * n].iter_mut().zip(block.iter()) {
                *o += x * wj;
            }
        }
    }
    sigma
}

/// Measures both sides of the four bilinear bounds on the parallel line
/// `(x₃, v₃)` with Landau kinematics. `r(s)` returns the modes of `R(s)` and
/// `g(s)` the distribution `G(s)` on `geometry` (dim_x = dim_v = 1).
pub fn bilinear_sigma_norms<R, G>(r: &R, g: &G, geometry: &Geometry, p: &SigmaParams) -> Result<SigmaReport>
where
    R: Fn(f64) -> Vec<Complex64>,
    G: Fn(f64) -> SpectralDistribution,
{
    p.validate()?;
    if geometry.dim_x != 1 || geometry.dim_v != 1 {
        return Err(Error::Geometry("bilinear bounds run with dim_x = dim_v = 1".into()));
    }
    let kin = Kinematics::landau();
    let modes = geometry.modes();
    let t = p.t;
    let sigma = sigma_field(r, g, geometry, t, p.n_s);
    let lhs_sigma = z_norm(&sigma, &NormParams::new(p.lambda, p.mu, t, 1.0)?, &kin)?.value;
    let lhs_sigma1 = f_norm(&density(&sigma), &modes, p.lambda * t + p.mu)?;

    let h = t / p.n_s as f64;
    let w = simpson_weights(p.n_s, h);
    let mut rhs = [0.0; 4];
    for (j, wj) in w.iter().enumerate() {
        let s = j as f64 * h;
        let b = p.b(s);
        let rs = r(s);
        let gs = g(s);
        let zn = |lambda: f64, mu: f64, tau: f64| -> Result<f64> {
            Ok(z_norm(&gs, &NormParams::new(lambda, mu, tau, 1.0)?, &kin)?.value)
        };
        let w62 = (-TWO_PI * (p.mu_bar - p.mu) - TWO_PI * (p.lambda_bar - p.lambda) * s).exp();
        let i62 = w62
            * f_norm(&rs, &modes, p.lambda_bar * s + p.mu_bar)?
            * zn(p.lambda * (1.0 - b), p.mu_hat, s)?;
        let wsup = sigma_sup_weight(p, s);
        let i63 = wsup
            * f_norm(&rs, &modes, p.lambda * s + p.mu_prime - p.lambda * b * (t - s))?
            * zn(p.lambda_bar * (1.0 + b), p.mu_bar, s - b * t / (1.0 + b))?;
        let w65 = (-TWO_PI * (p.lambda_bar - p.lambda) * s).exp();
        let i65 = w65
            * f_norm(&rs, &modes, p.lambda_bar * s + p.mu + p.lambda * b * (t - s))?
            * zn(p.lambda * (1.0 - b), p.mu, s + b * t / (1.0 - b))?;
        rhs[0] += wj * i62;
        rhs[1] += wj * i63;
        rhs[2] += wj * i63;
        rhs[3] += wj * i65;
    }
    let lhs = [lhs_sigma, lhs_sigma, lhs_sigma1, lhs_sigma1];
    let ratios = std::array::from_fn(|i| if lhs[i] == 0.0 { 0.0 } else { lhs[i] / rhs[i] });
    Ok(SigmaReport { lhs, rhs, ratios })
}

/// A seeded `(R, G)` pair: `R(s) = R₀e^{−0.1s}` and a time-independent `G`,
/// both on the modes `±1, ±2`, conjugate-symmetric and with zero mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSample {
    pub geometry: Geometry,
    pub r0: Vec<Complex64>,
    pub decay: f64,
    pub g: SpectralDistribution,
    pub params: SigmaParams,
}

impl SigmaSample {
    pub fn r_at(&self, s: f64) -> Vec<Complex64> {
        let f = (-self.decay * s).exp();
        self.r0.iter().map(|c| c * f).collect()
    }
}

pub fn sigma_geometry() -> Result<Geometry> {
    Geometry::new(1, 4, 512, 8.0, 1, 1)
}

pub fn random_sigma_sample(seed: u64) -> Result<SigmaSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = sigma_geometry()?;
    let mut r0 = vec![ZERO; geometry.n_modes()];
    let mut g = SpectralDistribution::zeros(geometry);
    let v = g.geometry.vgrid().coords(2);
    for k in 1..=2i64 {
        let c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        r0[geometry.mode_index([0, 0, k]).expect("mode")] = c;
        r0[geometry.mode_index([0, 0, -k]).expect("mode")] = c.conj();
        let amp = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let center: f64 = rng.random_range(-1.0..1.0);
        let width: f64 = rng.random_range(0.5..1.0);
        let ip = geometry.mode_index([0, 0, k]).expect("mode");
        let im = geometry.mode_index([0, 0, -k]).expect("mode");
        for (j, vj) in v.iter().enumerate() {
            let bump = (-0.5 * ((vj - center) / width).powi(2)).exp();
            g.block_mut(ip)[j] = amp * bump;
            g.block_mut(im)[j] = amp.conj() * bump;
        }
    }
    let lambda = rng.random_range(0.05..0.15);
    let lambda_bar = lambda * (1.0 + rng.random_range(0.05..1.0));
    let mu_hat = rng.random_range(0.02..0.05);
    let mu = mu_hat + rng.random_range(0.005..0.05);
    let mu_prime = mu + rng.random_range(0.005..0.05);
    let mu_bar = mu_prime + rng.random_range(0.0..0.05);
    let t = rng.random_range(0.5..1.5);
    let params = SigmaParams { lambda, lambda_bar, mu_hat, mu, mu_prime, mu_bar, t, d: 0.5, n_s: 64 };
    Ok(SigmaSample { geometry, r0, decay: 0.1, g, params })
}

/// Bilinear bounds on one seeded sample.
pub fn sigma_sample_report(sample: &SigmaSample) -> Result<SigmaReport> {
    let g = sample.g.clone();
    bilinear_sigma_norms(&|s| sample.r_at(s), &|_| g.clone(), &sample.geometry, &sample.params)
}

// ---------------------------------------------------------------------------
// Echo kernel and moments

/// Parameters of `K^{(α),γ}` and the growth-control error term `c₀/(1+τ)^m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoKernelParams {
    pub alpha: f64,
    pub gamma: f64,
    pub eps: f64,
    pub c0: f64,
    pub m: f64,
    /// Largest `|l|` in the sup; `ceil(40/α)` certifies the tail below `e^{−40}`.
    pub kmax_sup: usize,
}

impl EchoKernelParams {
    pub fn new(alpha: f64, gamma: f64, eps: f64) -> Result<Self> {
        let p = Self { alpha, gamma, eps, c0: 0.0, m: 2.0, kmax_sup: (40.0 / alpha).ceil() as usize };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma > 1.0) || !self.gamma.is_finite() {
            return Err(Error::Parameter(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Parameter(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        if !(self.c0 >= 0.0) || !(self.m > 1.0) {
            return Err(Error::Parameter("need c0 >= 0 and m > 1".into()));
        }
        if self.kmax_sup == 0 {
            return Err(Error::Parameter("kmax_sup must be positive".into()));
        }
        Ok(())
    }
}

/// `ln` of the lattice term of `K^{(α),γ}` without the `(1+τ)` prefactor.
fn kernel_log_term(t: f64, tau: f64, k: f64, l: f64, alpha: f64, gamma: f64) -> f64 {
    let d = (k - l).abs();
    -alpha * l.abs() - alpha * (t - tau) * d / t - alpha * (k * (t - tau) + l * tau).abs() - d.powf(gamma).ln_1p()
}

/// `K^{(α),γ}(t,τ) = (1+τ) sup_{k,l≠0} e^{−α|l|} e^{−α(t−τ)|k−l|/t} e^{−α|k(t−τ)+lτ|} / (1+|k−l|^γ)`.
///
/// For each `l` the maximizing `k` lies within three of `l` or next to the
/// resonance `k = −lτ/(t−τ)`. The scan over `|l|` stops once `e^{−α|l|}`
/// falls below the running sup or `|l|` exceeds `kmax_sup`.
pub fn kernel_value(t: f64, tau: f64, p: &EchoKernelParams) -> f64 {
    let (alpha, gamma) = (p.alpha, p.gamma);
    let mut best = f64::NEG_INFINITY;
    let mut cands: Vec<f64> = Vec::with_capacity(16);
    for la in 1..=p.kmax_sup as i64 {
        if -alpha * la as f64 <= best {
            break;
        }
        for l in [la, -la] {
            cands.clear();
            for dk in -3..=3 {
                cands.push((l + dk) as f64);
            }
            if t > tau {
                let kc = -(l as f64) * tau / (t - tau);
                if kc.abs() < 1e15 {
                    for dk in -1..=2 {
                        cands.push(kc.floor() + dk as f64);
                    }
                }
            }
            for &k in &cands {
                if k != 0.0 {
                    best = best.max(kernel_log_term(t, tau, k, l as f64, alpha, gamma));
                }
            }
        }
    }
    (1.0 + tau) * best.exp()
}

/// Brute-force sup over `|k|, |l| ≤ n`, used to check [`kernel_value`].
pub fn kernel_value_lattice(t: f64, tau: f64, p: &EchoKernelParams, n: i64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for l in -n..=n {
        for k in -n..=n {
            if k != 0 && l != 0 {
                best = best.max(kernel_log_term(t, tau, k as f64, l as f64, p.alpha, p.gamma));
            }
        }
    }
    (1.0 + tau) * best.exp()
}

fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
    h / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(fa, flm, fm, m - a);
    let right = simpson(fm, frm, fb, b - m);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson on `panels` equal panels with absolute tolerance `tol`.
pub fn integrate_adaptive<F: Fn(f64) -> f64 + Sync>(f: &F, a: f64, b: f64, panels: usize, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / panels as f64;
    (0..panels)
        .into_par_iter()
        .map(|i| {
            let (x0, x1) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (f0, fm, f1) = (f(x0), f(0.5 * (x0 + x1)), f(x1));
            adaptive(f, x0, x1, f0, fm, f1, simpson(f0, fm, f1, h), tol / panels as f64, 40)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

/// [`integrate_adaptive`] with the tolerance relative to a composite
/// Simpson estimate on the same panels.
pub fn integrate_relative<F: Fn(f64) -> f64 + Sync>(f: &F, a: f64, b: f64, panels: usize, rtol: f64) -> f64 {
    let h = (b - a) / panels as f64;
    let coarse: f64 = (0..panels)
        .into_par_iter()
        .map(|i| {
            let x0 = a + i as f64 * h;
            simpson(f(x0), f(x0 + 0.5 * h), f(x0 + h), h)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    integrate_adaptive(f, a, b, panels, rtol * coarse.abs().max(1e-300))
}

/// Relative tolerance of the moment quadratures.
pub const MOMENT_RTOL: f64 = 1e-8;

/// A moment with its bound shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentValue {
    pub t: f64,
    pub moment: f64,
    pub bound_shape: f64,
}

/// `e^{−εt}∫₀ᵗK^{(α),γ}(t,τ)e^{ετ}dτ` with the shape `1/(α³ε^{1+γ}t^{γ−1})`.
pub fn forward_moment(t: f64, p: &EchoKernelParams) -> MomentValue {
    let bound_shape = 1.0 / (p.alpha.powi(3) * p.eps.powf(1.0 + p.gamma) * t.powf(p.gamma - 1.0));
    if t <= 0.0 {
        return MomentValue { t, moment: 0.0, bound_shape };
    }
    let f = |tau: f64| kernel_value(t, tau, p) * (-p.eps * (t - tau)).exp();
    let panels = (t.ceil() as usize).clamp(16, 4096);
    let moment = integrate_relative(&f, 0.0, t, panels, MOMENT_RTOL);
    MomentValue { t, moment, bound_shape }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Forward moments on a geometric `t` grid and their log-log slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub params: EchoKernelParams,
    pub rows: Vec<MomentValue>,
    pub slope: f64,
}

pub fn forward_moment_table(t0: f64, t1: f64, n: usize, p: &EchoKernelParams) -> MomentTable {
    let ts: Vec<f64> = (0..n).map(|i| t0 * (t1 / t0).powf(i as f64 / (n - 1).max(1) as f64)).collect();
    let rows: Vec<MomentValue> = ts.iter().map(|&t| forward_moment(t, p)).collect();
    let slope = log_log_slope(&ts, &rows.iter().map(|r| r.moment).collect::<Vec<_>>());
    MomentTable { params: *p, rows, slope }
}

/// `sup_τ e^{ετ}∫_τ^∞ e^{−εt}K^{(α),γ}(t,τ)dt` over a uniform `τ` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardMoment {
    pub value: f64,
    pub argmax_tau: f64,
    /// Bound on the dropped tail `∫_{τ+H}^∞`.
    pub tail: f64,
    /// `1/(α²ε) + 1/(αε^γ)`.
    pub bound_shape: f64,
    pub samples: Vec<(f64, f64)>,
}

/// One backward moment at `τ`, integrated to `τ + H` with
/// `H = ln((1+τ)/(ε·tol))/ε`, so the tail is below `tol` since `K ≤ 1+τ`.
pub fn backward_moment_at(tau: f64, p: &EchoKernelParams, tol: f64) -> f64 {
    let h = ((1.0 + tau) / (p.eps * tol)).ln() / p.eps;
    let f = |t: f64| {
        if t <= 0.0 {
            return 0.0;
        }
        kernel_value(t, tau, p) * (-p.eps * (t - tau)).exp()
    };
    let panels = (h.ceil() as usize).clamp(16, 4096);
    integrate_relative(&f, tau, tau + h, panels, MOMENT_RTOL)
}

pub fn backward_moment(tau_max: f64, n_tau: usize, p: &EchoKernelParams) -> BackwardMoment {
    let tol = 1e-10;
    let taus: Vec<f64> = (0..=n_tau).map(|i| tau_max * i as f64 / n_tau.max(1) as f64).collect();
    let samples: Vec<(f64, f64)> = taus.iter().map(|&tau| (tau, backward_moment_at(tau, p, tol))).collect();
    let (mut value, mut argmax_tau) = (f64::NEG_INFINITY, 0.0);
    for &(tau, v) in &samples {
        if v > value {
            value = v;
            argmax_tau = tau;
        }
    }
    let bound_shape = 1.0 / (p.alpha * p.alpha * p.eps) + 1.0 / (p.alpha * p.eps.powf(p.gamma));
    BackwardMoment { value, argmax_tau, tail: tol, bound_shape, samples }
}

// ---------------------------------------------------------------------------
// Growth control

/// The linear kernel `K̂⁰(k, t_j)` on the march grid and its stability margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearKernel {
    pub mode: [i64; 3],
    pub table: Vec<Complex64>,
    pub margin: f64,
}

impl LinearKernel {
    /// Closed-form kernel on `n` points spaced `dt`, margin from the Laplace sup.
    pub fn from_equilibrium(
        eq: &Equilibrium,
        w: &InteractionPotential,
        k: [i64; 3],
        kin: &Kinematics,
        dt: f64,
        n: usize,
        opts: &StabilityOptions,
    ) -> Self {
        let t = uniform_grid(dt, n);
        let table = kernel_k0(eq, w, k, &t, kin);
        let omega = crate::linear_volterra::default_omega_grid(k, eq, kin, 801);
        let report = stability_margin(eq, w, k, &omega, kin, opts);
        Self { mode: k, table, margin: report.kappa_margin }
    }
}

/// Extra non-negative kernel `K₀(t, τ)`.
pub type ExtraKernel = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Worst case of the growth-control inequality: for one mode `k`,
/// `Ψ(t) − ∫₀ᵗ K⁰(t−τ)e^{2πλ|k|(t−τ)}Ψ(τ)dτ = A + ∫₀ᵗ (K₀ + cK^{(α),γ} + c₀/(1+τ)^m)|Ψ(τ)|dτ`,
/// where `Ψ = Φ̂(k)e^{2π(λt+μ)|k|}` and `φ = |Ψ| = ‖Φ‖_{λt+μ}`.
#[derive(Clone)]
pub struct GrowthProblem {
    pub a: f64,
    pub lambda: f64,
    /// Coefficient `c` of `K₁ = c·K^{(α),γ}`.
    pub c: f64,
    pub kernel: EchoKernelParams,
    pub k0_extra: Option<ExtraKernel>,
    pub linear: Option<LinearKernel>,
    pub dt: f64,
    pub t_end: f64,
    pub kappa_min: f64,
}

impl GrowthProblem {
    pub fn new(a: f64, kernel: EchoKernelParams, dt: f64, t_end: f64) -> Self {
        Self { a, lambda: 0.0, c: 0.0, kernel, k0_extra: None, linear: None, dt, t_end, kappa_min: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub t: Vec<f64>,
    pub phi: Vec<f64>,
    /// Log-slope of `φ` over the final third of the horizon.
    pub slope: f64,
    pub eps: f64,
    /// `max_t φ(t)e^{−εt}/A`, the constant in front of the `e^{εt}` envelope.
    pub envelope_constant: f64,
}

/// Least-squares slope of `ln φ` over `[t0, t1]`.
pub fn log_slope(t: &[f64], phi: &[f64], t0: f64, t1: f64) -> f64 {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (ti, p) in t.iter().zip(phi) {
        if *ti >= t0 && *ti <= t1 && *p > 0.0 {
            xs.push(*ti);
            ys.push(p.ln());
        }
    }
    let n = xs.len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Trapezoid march of the worst case with a fixed-point solve on the diagonal.
pub fn growth_control_solve(problem: &GrowthProblem) -> Result<GrowthReport> {
    let pr = problem;
    pr.kernel.validate()?;
    if !(pr.dt > 0.0) || !(pr.t_end > 0.0) || !(pr.a >= 0.0) || !(pr.c >= 0.0) || !(pr.lambda >= 0.0) {
        return Err(Error::Parameter("need dt, t_end > 0 and A, c, λ >= 0".into()));
    }
    let n = (pr.t_end / pr.dt).round() as usize + 1;
    let dt = pr.dt;
    let t = uniform_grid(dt, n);

    let lin: Vec<Complex64> = match &pr.linear {
        Some(lk) => {
            if lk.margin < pr.kappa_min {
                return Err(Error::MarginTooSmall { margin: lk.margin, kappa_min: pr.kappa_min });
            }
            if lk.table.len() < n {
                return Err(Error::Parameter(format!("linear kernel has {} points, need {n}", lk.table.len())));
            }
            let kn = crate::fields::knorm(lk.mode);
            lk.table[..n]
                .iter()
                .zip(&t)
                .map(|(kv, s)| kv * (TWO_PI * pr.lambda * kn * s).exp())
                .collect()
        }
        None => vec![ZERO; n],
    };
    let denom = Complex64::new(1.0, 0.0) - lin[0] * (0.5 * dt);
    if denom.norm() < 1e-8 {
        return Err(Error::NearSingular { step: 0, value: denom.norm() });
    }

    // Damping kernel G(t_i, t_j) for j ≤ i, rows in parallel.
    let kp = pr.kernel;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..=i)
                .map(|j| {
                    let (ti, tj) = (t[i], t[j]);
                    let mut v = kp.c0 / (1.0 + tj).powf(kp.m);
                    if pr.c > 0.0 && ti > 0.0 {
                        v += pr.c * kernel_value(ti, tj, &kp);
                    }
                    if let Some(f) = &pr.k0_extra {
                        v += f(ti, tj);
                    }
                    v
                })
                .collect()
        })
        .collect();

    let mut psi: Vec<Complex64> = Vec::with_capacity(n);
    let mut phi: Vec<f64> = Vec::with_capacity(n);
    psi.push(Complex64::new(pr.a, 0.0));
    phi.push(pr.a);
    for i in 1..n {
        let row = &rows[i];
        let mut lin_known = lin[i] * psi[0] * 0.5;
        for j in 1..i {
            lin_known += lin[i - j] * psi[j];
        }
        let mut damp_known = 0.5 * row[0] * phi[0];
        for j in 1..i {
            damp_known += row[j] * phi[j];
        }
        let known = Complex64::new(pr.a + dt * damp_known, 0.0) + lin_known * dt;
        let diag = 0.5 * dt * row[i];
        let mut x = known / denom;
        for it in 0..200 {
            let next = (known + diag * x.norm()) / denom;
            let done = (next - x).norm() <= 1e-15 * next.norm().max(1e-300);
            x = next;
            if done {
                break;
            }
            if it == 199 {
                return Err(Error::NonFinite { step: i, what: "diagonal fixed point did not converge".into() });
            }
        }
        if !x.re.is_finite() || !x.im.is_finite() {
            return Err(Error::NonFinite { step: i, what: "phi".into() });
        }
        psi.push(x);
        phi.push(x.norm());
    }
    let t_last = t[n - 1];
    let slope = log_slope(&t, &phi, t_last * 2.0 / 3.0, t_last);
    let envelope_constant = if pr.a > 0.0 {
        t.iter().zip(&phi).map(|(ti, p)| p * (-kp.eps * ti).exp() / pr.a).fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(GrowthReport { t, phi, slope, eps: kp.eps, envelope_constant })
}

/// `Ψ` from [`march`] for the pure linear problem `Ψ − ∫K̃⁰Ψ = A`.
pub fn linear_reference(a: f64, lambda: f64, linear: &LinearKernel, dt: f64, n: usize) -> Result<Vec<Complex64>> {
    let kn = crate::fields::knorm(linear.mode);
    let kern: Vec<Complex64> = linear.table[..n]
        .iter()
        .enumerate()
        .map(|(j, kv)| kv * (TWO_PI * lambda * kn * j as f64 * dt).exp())
        .collect();
    march(&vec![Complex64::new(a, 0.0); n], &kern, dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scen(k1: i64, k2: i64, tau: f64, a2: f64) -> EchoScenario {
        EchoScenario { a1: 0.1, a2, k1, k2, tau_pulse: tau, v_thermal: 1.0 }
    }

    #[test]
    fn echo_peak_k1_1_k2_2_tau_10() {
        let s = scen(1, 2, 10.0, 0.1);
        let g = echo_geometry(&s, 2048, 8.0).unwrap();
        let tr = run_echo(&s, &g, &Kinematics::landau(), 0.05, 25.0).unwrap();
        assert!((tr.peak_time - 20.0).abs() <= 2.0 * 0.05 + 1e-9, "peak {}", tr.peak_time);
    }

    #[test]
    fn echo_peak_k1_2_k2_3_tau_6() {
        let s = scen(2, 3, 6.0, 0.1);
        let g = echo_geometry(&s, 2048, 8.0).unwrap();
        let tr = run_echo(&s, &g, &Kinematics::landau(), 0.05, 22.0).unwrap();
        assert!((tr.peak_time - 18.0).abs() <= 0.05 + 1e-9, "peak {}", tr.peak_time);
        // Second-order echo amplitude: (a1a2/4)·f̃⁰(0) = a1a2/4.
        assert!((tr.peak_value - 0.1 * 0.1 / 4.0).abs() < 1e-6, "{}", tr.peak_value);
    }

    #[test]
    fn no_second_pulse_no_echo() {
        let s = scen(1, 2, 10.0, 0.0);
        let g = echo_geometry(&s, 2048, 8.0).unwrap();
        let tr = run_echo(&s, &g, &Kinematics::landau(), 0.05, 25.0).unwrap();
        for (t, r) in tr.t.iter().zip(&tr.rho) {
            if *t > 10.0 {
                assert!(*r < 1e-10 * tr.first_pulse_peak, "t = {t}: {r}");
            }
        }
    }

    #[test]
    fn echo_beyond_horizon_is_an_error() {
        let s = scen(1, 2, 10.0, 0.1);
        let g = echo_geometry(&s, 2048, 8.0).unwrap();
        let e = run_echo(&s, &g, &Kinematics::landau(), 0.05, 15.0).unwrap_err();
        assert!(matches!(e, Error::Horizon { .. }));
    }

    #[test]
    fn echo_time_with_magnetic_field() {
        // Parallel streaming is unaffected by the gyration.
        let s = scen(1, 3, 6.0, 0.1);
        let g = echo_geometry(&s, 2048, 8.0).unwrap();
        let tr = run_echo(&s, &g, &Kinematics::new(1.3), 0.05, 12.0).unwrap();
        assert!((tr.peak_time - 9.0).abs() <= 0.05 + 1e-9);
    }

    #[test]
    fn mixing_law_at_kappa_vt_t_two() {
        // κv_Tt = 2 gives e^{−2}.
        let t = 2.0 / TWO_PI;
        let r = gaussian_mixing_check(1, 1.0, &[0.0, t]).unwrap();
        assert!((r.simulated[0] - 1.0).abs() < 1e-12);
        assert!((r.simulated[1] - (-2.0f64).exp()).abs() / (-2.0f64).exp() < 1e-6);
        assert!(r.max_oracle_error < 1e-6);
    }

    #[test]
    fn doubling_k_quadruples_log_decay() {
        let t = 0.2;
        let r1 = gaussian_mixing_check(1, 1.0, &[t]).unwrap();
        let r2 = gaussian_mixing_check(2, 1.0, &[t]).unwrap();
        let ratio = r2.simulated[0].ln() / r1.simulated[0].ln();
        assert!((ratio - 4.0).abs() < 1e-6, "{ratio}");
    }

    fn single_mode_pair() -> (Geometry, Vec<Complex64>, SpectralDistribution) {
        let g = sigma_geometry().unwrap();
        let mut r = vec![ZERO; g.n_modes()];
        r[g.mode_index([0, 0, 1]).unwrap()] = Complex64::new(1.0, 0.0);
        let (_, f0) = maxwellian(&g, 1.0).unwrap();
        let mut gd = SpectralDistribution::zeros(g);
        gd.block_mut(g.mode_index([0, 0, 1]).unwrap()).copy_from_slice(&f0);
        (g, r, gd)
    }

    fn params() -> SigmaParams {
        SigmaParams {
            lambda: 0.1,
            lambda_bar: 0.15,
            mu_hat: 0.03,
            mu: 0.05,
            mu_prime: 0.07,
            mu_bar: 0.1,
            t: 1.0,
            d: 0.5,
            n_s: 64,
        }
    }

    #[test]
    fn zero_g_gives_zero_ratios() {
        let (g, r, _) = single_mode_pair();
        let zero = SpectralDistribution::zeros(g);
        let rep = bilinear_sigma_norms(&|_| r.clone(), &|_| zero.clone(), &g, &params()).unwrap();
        assert_eq!(rep.lhs, [0.0; 4]);
        assert_eq!(rep.ratios, [0.0; 4]);
    }

    #[test]
    fn single_modes_match_closed_form() {
        let (g, r, gd) = single_mode_pair();
        let p = params();
        let sigma = sigma_field(&|_| r.clone(), &|_| gd.clone(), &g, p.t, p.n_s);
        for (i, k) in g.modes().iter().enumerate() {
            if k[2] != 2 {
                assert!(sigma.block(i).iter().all(|z| z.norm() == 0.0));
            }
        }
        // σ̂₁(t,2) = ∫₀ᵗ e^{−2π²·4(t−s)²} ds.
        let a = 8.0 * std::f64::consts::PI.powi(2);
        let exact = std::f64::consts::PI.sqrt() / (2.0 * a.sqrt()) * libm::erf(a.sqrt() * p.t);
        let lhs_exact = exact * (TWO_PI * 2.0 * (p.lambda * p.t + p.mu)).exp();
        let rep = bilinear_sigma_norms(&|_| r.clone(), &|_| gd.clone(), &g, &p).unwrap();
        assert!((rep.lhs[2] - lhs_exact).abs() / lhs_exact < 1e-7, "{} vs {lhs_exact}", rep.lhs[2]);
        for ratio in rep.ratios {
            assert!(ratio <= 1.0, "{:?}", rep.ratios);
        }
    }

    #[test]
    fn sup_weight_matches_brute_force() {
        let p = params();
        for s in [0.0, 0.3, 0.77, 1.0] {
            let lag = p.t - s;
            let mut best: f64 = 0.0;
            for l in -200i64..=200 {
                if l == 0 {
                    continue;
                }
                for k in -200i64..=200 {
                    let (kf, lf) = (k as f64, l as f64);
                    let v = (-std::f64::consts::PI * (p.mu_bar - p.mu) * lf.abs()
                        - std::f64::consts::PI * (p.lambda_bar - p.lambda) * (kf * lag + lf * s).abs()
                        - TWO_PI * (p.mu_prime - p.mu + p.lambda * p.b(s) * lag) * (kf - lf).abs())
                    .exp();
                    best = best.max(v);
                }
            }
            assert!((sigma_sup_weight(&p, s) - best).abs() < 1e-14, "s = {s}");
        }
    }

    fn kp() -> EchoKernelParams {
        EchoKernelParams::new(0.1, 2.0, 0.05).unwrap()
    }

    #[test]
    fn kernel_diagonal_closed_form() {
        let p = kp();
        for t in [0.5, 3.0, 40.0] {
            let want = (1.0 + t) * (-p.alpha * (1.0 + t)).exp();
            assert!((kernel_value(t, t, &p) - want).abs() < 1e-14 * want);
        }
    }

    #[test]
    fn kernel_matches_lattice_scan() {
        let p = EchoKernelParams::new(0.3, 1.5, 0.05).unwrap();
        for (t, tau) in [(5.0, 0.0), (5.0, 2.3), (17.0, 11.0), (30.0, 29.0), (2.0, 1.0)] {
            let a = kernel_value(t, tau, &p);
            let b = kernel_value_lattice(t, tau, &p, 150);
            assert!((a - b).abs() <= 1e-14 * b, "({t},{tau}): {a} vs {b}");
        }
    }

    #[test]
    fn kernel_tau_zero_decays_in_t() {
        let p = kp();
        let vals: Vec<f64> = [1.0, 5.0, 20.0, 80.0].iter().map(|&t| kernel_value(t, 0.0, &p)).collect();
        for w in vals.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn kernel_monotone_in_alpha_and_gamma() {
        let mut prev = f64::INFINITY;
        for a in [0.05, 0.1, 0.2, 0.5, 0.9] {
            let v = kernel_value(10.0, 4.0, &EchoKernelParams::new(a, 2.0, 0.05).unwrap());
            assert!(v <= prev);
            prev = v;
        }
        let g15 = kernel_value(10.0, 4.0, &EchoKernelParams::new(0.1, 1.5, 0.05).unwrap());
        let g3 = kernel_value(10.0, 4.0, &EchoKernelParams::new(0.1, 3.0, 0.05).unwrap());
        assert!(g3 <= g15);
    }

    #[test]
    fn kernel_cutoff_is_certified() {
        let p = kp();
        let mut big = p;
        big.kmax_sup *= 3;
        for (t, tau) in [(10.0, 3.0), (100.0, 99.0), (50.0, 0.0)] {
            assert!((kernel_value(t, tau, &p) - kernel_value(t, tau, &big)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_moment_small_t_and_alpha_order() {
        let p = kp();
        assert!(forward_moment(1e-6, &p).moment < 1e-5);
        let p2 = EchoKernelParams::new(0.2, 2.0, 0.05).unwrap();
        for t in [1.0, 10.0, 60.0] {
            assert!(forward_moment(t, &p2).moment <= forward_moment(t, &p).moment);
        }
    }

    #[test]
    fn backward_moment_decreases_with_eps() {
        let a = backward_moment_at(5.0, &kp(), 1e-10);
        let b = backward_moment_at(5.0, &EchoKernelParams::new(0.1, 2.0, 0.1).unwrap(), 1e-10);
        assert!(a.is_finite() && b < a);
    }

    #[test]
    fn growth_all_zero_is_constant() {
        let r = growth_control_solve(&GrowthProblem::new(1.5, kp(), 0.1, 20.0)).unwrap();
        assert!(r.phi.iter().all(|p| (p - 1.5).abs() < 1e-14));
    }

    #[test]
    fn growth_gronwall_bound() {
        let mut k = kp();
        k.c0 = 0.7;
        k.m = 2.0;
        let r = growth_control_solve(&GrowthProblem::new(1.0, k, 0.05, 200.0)).unwrap();
        // Separable case: φ(t) = A exp(c₀(1 − 1/(1+t))).
        let last = *r.phi.last().unwrap();
        assert!(last <= 0.7f64.exp());
        let t = *r.t.last().unwrap();
        let exact = (0.7 * (1.0 - 1.0 / (1.0 + t))).exp();
        assert!((last - exact).abs() < 1e-3, "{last} vs {exact}");
    }

    #[test]
    fn growth_linear_only_matches_volterra_march() {
        let g = Geometry::new(1, 1, 64, 8.0, 3, 32).unwrap();
        let (eq, _) = maxwellian(&g, 1.0).unwrap();
        let w = InteractionPotential::odd_perp(2.0);
        let kin = Kinematics::new(0.5);
        let (dt, n) = (0.05, 301);
        let lk = LinearKernel::from_equilibrium(&eq, &w, [0, 0, 1], &kin, dt, n, &StabilityOptions::default());
        let mut pr = GrowthProblem::new(1.0, kp(), dt, (n - 1) as f64 * dt);
        pr.lambda = 0.02;
        pr.linear = Some(lk.clone());
        let r = growth_control_solve(&pr).unwrap();
        let reference = linear_reference(1.0, 0.02, &lk, dt, n).unwrap();
        for (p, q) in r.phi.iter().zip(&reference) {
            assert!((p - q.norm()).abs() < 1e-12 * q.norm().max(1.0));
        }
    }

    #[test]
    fn growth_refuses_small_margin() {
        let lk = LinearKernel { mode: [0, 0, 1], table: vec![ZERO; 11], margin: 0.01 };
        let mut pr = GrowthProblem::new(1.0, kp(), 0.1, 1.0);
        pr.linear = Some(lk);
        assert!(matches!(growth_control_solve(&pr), Err(Error::MarginTooSmall { .. })));
    }
}
