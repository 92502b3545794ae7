//! Interaction potential, the electric field `E = W ∗ ρ`, the magnetic
//! perturbation from `∂_tB = ∇×E`, and the force term of the Vlasov equation.
//!
//! The magnetic force is written `B×v` so that the background term generates
//! the counter-clockwise rotation `R(Ωt)` of [`crate::kinematics`].
//! With `f̂(k) = ∫e^{−2πik·x}f dx`, Faraday's law reads `∂_tB̂ = 2πi k×Ê`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{Kinematics, Vec3};
use crate::phase_space::SpectralDistribution;
use crate::spectral::VOps;

pub type CVec3 = [Complex64; 3];

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Component rule for `Ŵ(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WRule {
    /// `Ŵ₁ = i·sign(k₃)·a/(1+|k|^γ)`, `Ŵ₂ = 0`: perpendicular and odd in `x₃`.
    OddPerp,
    /// `Ŵ⊥ = −i·(k⊥/|k|)·a/(1+|k|^γ)`: the perpendicular gradient of a scalar
    /// even potential with `φ̂ = a/(2π|k|(1+|k|^γ))`.
    Longitudinal,
}

/// The potential `W = (W₁, W₂, 0)` with `|Ŵ(k)| ≤ a/(1+|k|^γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionPotential {
    pub gamma: f64,
    pub amplitude: f64,
    pub rule: WRule,
}

impl InteractionPotential {
    /// Checked constructor: `γ > 1` and `0 ≤ a ≤ 1`.
    pub fn new(gamma: f64, amplitude: f64, rule: WRule) -> Result<Self> {
        if !(gamma > 1.0) {
            return Err(Error::Parameter(format!("gamma must exceed 1, got {gamma}")));
        }
        if !(0.0..=1.0).contains(&amplitude) {
            return Err(Error::Parameter(format!(
                "amplitude {amplitude} breaks |W(k)| <= 1/(1+|k|^gamma)"
            )));
        }
        Ok(Self { gamma, amplitude, rule })
    }

    pub fn odd_perp(gamma: f64) -> Self {
        Self { gamma, amplitude: 1.0, rule: WRule::OddPerp }
    }

    /// A copy with the amplitude multiplied by `c`, bypassing the bound check.
    pub fn scaled(&self, c: f64) -> Self {
        Self { amplitude: self.amplitude * c, ..*self }
    }

    /// Whether `Ŵ(k₁,k₂,−k₃) = −Ŵ(k₁,k₂,k₃)`.
    pub fn odd_in_x3(&self) -> bool {
        matches!(self.rule, WRule::OddPerp)
    }

    pub fn envelope(&self, k: [i64; 3]) -> f64 {
        let kn = knorm(k);
        self.amplitude / (1.0 + kn.powf(self.gamma))
    }

    pub fn w_hat(&self, k: [i64; 3]) -> CVec3 {
        let env = self.envelope(k);
        match self.rule {
            WRule::OddPerp => {
                let s = k[2].signum() as f64;
                [Complex64::new(0.0, s * env), ZERO, ZERO]
            }
            WRule::Longitudinal => {
                let kn = knorm(k);
                if kn == 0.0 {
                    return [ZERO; 3];
                }
                [
                    Complex64::new(0.0, -(k[0] as f64) / kn * env),
                    Complex64::new(0.0, -(k[1] as f64) / kn * env),
                    ZERO,
                ]
            }
        }
    }
}

pub fn knorm(k: [i64; 3]) -> f64 {
    let k = kf(k);
    (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt()
}

pub fn kf(k: [i64; 3]) -> Vec3 {
    [k[0] as f64, k[1] as f64, k[2] as f64]
}

pub fn ccross(a: CVec3, b: CVec3) -> CVec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn rcross(k: Vec3, b: CVec3) -> CVec3 {
    let k = [k[0].into(), k[1].into(), k[2].into()];
    ccross(k, b)
}

/// `Ê(k) = Ŵ(k)ρ̂(k)` for each mode.
pub fn electric_field(rho_hat: &[Complex64], modes: &[[i64; 3]], w: &InteractionPotential) -> Vec<CVec3> {
    rho_hat
        .iter()
        .zip(modes)
        .map(|(r, k)| {
            let wk = w.w_hat(*k);
            [wk[0] * r, wk[1] * r, wk[2] * r]
        })
        .collect()
}

/// Electric and magnetic perturbation modes at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub modes: Vec<[i64; 3]>,
    pub e_hat: Vec<CVec3>,
    pub b_hat: Vec<CVec3>,
    pub time: f64,
}

impl FieldState {
    /// Fields at `t = 0`: `B̂ = 0`.
    pub fn new(modes: Vec<[i64; 3]>, e_hat: Vec<CVec3>) -> Self {
        let n = modes.len();
        Self { modes, e_hat, b_hat: vec![[ZERO; 3]; n], time: 0.0 }
    }

    /// `max_k |k·B̂(k)|`.
    pub fn divergence_error(&self) -> f64 {
        self.modes
            .iter()
            .zip(&self.b_hat)
            .map(|(k, b)| {
                let k = kf(*k);
                (b[0] * k[0] + b[1] * k[1] + b[2] * k[2]).norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn electric_energy(&self) -> f64 {
        self.e_hat.iter().map(|e| e.iter().map(|c| c.norm_sqr()).sum::<f64>()).sum()
    }

    pub fn magnetic_energy(&self) -> f64 {
        self.b_hat.iter().map(|e| e.iter().map(|c| c.norm_sqr()).sum::<f64>()).sum()
    }
}

/// Trapezoid step of `∂_tB̂ = 2πi k×Ê` from the stored `Ê` to `e_next`;
/// `e_next` becomes the stored field.
pub fn advance_b(state: &mut FieldState, e_next: &[CVec3], dt: f64) {
    let i2pi = Complex64::new(0.0, TWO_PI);
    for ((k, b), (e0, e1)) in state
        .modes
        .iter()
        .zip(state.b_hat.iter_mut())
        .zip(state.e_hat.iter().zip(e_next))
    {
        let avg = [
            (e0[0] + e1[0]) * 0.5,
            (e0[1] + e1[1]) * 0.5,
            (e0[2] + e1[2]) * 0.5,
        ];
        let c = rcross(kf(*k), avg);
        for i in 0..3 {
            b[i] += c[i] * i2pi * dt;
        }
    }
    state.e_hat = e_next.to_vec();
    state.time += dt;
}

/// `(E + (B₀ẑ + B)×v)·∇_v f` in the `(k, v)` representation. Products in x
/// are convolutions over the retained lattice; modes outside it are dropped.
pub fn lorentz_term(
    dist: &SpectralDistribution,
    state: &FieldState,
    kin: &Kinematics,
) -> SpectralDistribution {
    let g = dist.geometry;
    let vg = g.vgrid();
    let mut ops = VOps::new(vg);
    let modes = g.modes();
    let n = g.vlen();
    // Velocity gradients of each mode block.
    let grads: Vec<[Vec<Complex64>; 3]> = (0..modes.len())
        .map(|i| {
            let mut out: [Vec<Complex64>; 3] = [vec![], vec![], vec![]];
            for (a, o) in out.iter_mut().enumerate() {
                let mut d = dist.block(i).to_vec();
                ops.derivative(&mut d, a);
                *o = d;
            }
            out
        })
        .collect();
    let coords: Vec<Vec3> = (0..n)
        .map(|idx| {
            let i = vg.unindex(idx);
            [vg.coord(0, i[0]), vg.coord(1, i[1]), vg.coord(2, i[2])]
        })
        .collect();
    let field_index = |k: [i64; 3]| state.modes.iter().position(|m| *m == k);
    let mut out = SpectralDistribution::zeros(g);
    out.time = dist.time;
    for (i, k) in modes.iter().enumerate() {
        let block = out.block_mut(i);
        // Background rotation: (B₀ẑ×v)·∇f = B₀(−v₂∂₁f + v₁∂₂f).
        if kin.b0 != 0.0 {
            for (idx, o) in block.iter_mut().enumerate() {
                let v = coords[idx];
                *o += (grads[i][1][idx] * v[0] - grads[i][0][idx] * v[1]) * kin.b0;
            }
        }
        for (j, kp) in modes.iter().enumerate() {
            let q = [k[0] - kp[0], k[1] - kp[1], k[2] - kp[2]];
            let Some(f) = field_index(q) else { continue };
            let e = state.e_hat[f];
            let b = state.b_hat[f];
            if e.iter().chain(b.iter()).all(|c| *c == ZERO) {
                continue;
            }
            for (idx, o) in block.iter_mut().enumerate() {
                let v = coords[idx];
                let vc = [v[0].into(), v[1].into(), v[2].into()];
                let bxv = ccross(b, vc);
                for a in 0..3 {
                    *o += (e[a] + bxv[a]) * grads[j][a][idx];
                }
            }
        }
    }
    out
}
