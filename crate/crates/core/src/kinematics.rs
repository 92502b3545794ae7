//! Exact charged-particle motion in the uniform background field `B₀ẑ`.
//!
//! Units follow the `q = m = 1` convention, so the cyclotron frequency equals
//! the field magnitude. Velocities rotate counter-clockwise about `ẑ`:
//! `v(t) = R(Ωt)v`, `x(t) = x + M(t)v` with `M(t) = ∫₀ᵗ R(s) ds`.
//!
//! The singular ratios `sin(Ωt)/Ω` and `(cos(Ωt) − 1)/Ω` switch to a Taylor
//! branch when `|Ωt| < 1e-4`, so every function here is continuous at `Ω = 0`.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const SERIES_THRESHOLD: f64 = 1e-4;

/// Cyclotron frequency and background field magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    pub omega: f64,
    pub b0: f64,
}

impl Kinematics {
    pub fn new(b0: f64) -> Self {
        Self { omega: b0, b0 }
    }

    /// The unmagnetized (Landau) limit.
    pub fn landau() -> Self {
        Self::new(0.0)
    }

    /// `(sin(Ωdt)/Ω, (cos(Ωdt) − 1)/Ω)`, evaluated by series near `Ωdt = 0`.
    pub fn gyro_ratios(&self, dt: f64) -> (f64, f64) {
        let theta = self.omega * dt;
        if theta.abs() < SERIES_THRESHOLD {
            let t2 = theta * theta;
            let s = dt * (1.0 - t2 / 6.0 + t2 * t2 / 120.0);
            let c = dt * theta * (-0.5 + t2 / 24.0 - t2 * t2 / 720.0);
            (s, c)
        } else {
            (theta.sin() / self.omega, (theta.cos() - 1.0) / self.omega)
        }
    }
}

/// A point of `T³ × R³`; positions are kept in `[0, 1)` componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec3,
    pub v: Vec3,
}

impl PhasePoint {
    pub fn new(x: Vec3, v: Vec3) -> Self {
        Self { x: reduce_torus(x), v }
    }
}

/// Rotated frequencies `η_{k1}, η_{k2}` and `ν_k = |η_{k1}| + |η_{k2}| + |k₃|t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedFrequency {
    pub eta_k1: f64,
    pub eta_k2: f64,
    pub nu_k: f64,
}

pub fn reduce_torus(x: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for (o, xi) in out.iter_mut().zip(x) {
        let r = xi.rem_euclid(1.0);
        *o = if r >= 1.0 { 0.0 } else { r };
    }
    out
}

/// Signed componentwise distance on the torus, each entry in `[-0.5, 0.5]`.
pub fn torus_delta(a: Vec3, b: Vec3) -> Vec3 {
    let mut d = [0.0; 3];
    for i in 0..3 {
        let mut di = a[i] - b[i];
        di -= di.round();
        d[i] = di;
    }
    d
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
    }
    out
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2];
    }
    out
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    out
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `R(Ωdt)`: rotation by `Ωdt` about `ẑ`.
pub fn rotation_matrix(dt: f64, kin: &Kinematics) -> Mat3 {
    let (s, c) = (kin.omega * dt).sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// `M(dt) = ∫₀^dt R(s) ds`; equals `dt·I` at `Ω = 0`.
pub fn drift_matrix(dt: f64, kin: &Kinematics) -> Mat3 {
    let (s, c) = kin.gyro_ratios(dt);
    [[s, c, 0.0], [-c, s, 0.0], [0.0, 0.0, dt]]
}

/// Exact solution at time `t` of the gyration flow started from `p` at `tau`.
pub fn exact_flow(t: f64, tau: f64, p: PhasePoint, kin: &Kinematics) -> PhasePoint {
    let (x, v) = exact_flow_unwrapped(t - tau, p.x, p.v, kin);
    PhasePoint::new(x, v)
}

/// Same as [`exact_flow`] without the torus reduction, for lag `dt`.
pub fn exact_flow_unwrapped(dt: f64, x: Vec3, v: Vec3, kin: &Kinematics) -> (Vec3, Vec3) {
    let m = drift_matrix(dt, kin);
    let r = rotation_matrix(dt, kin);
    let dx = mat_vec(&m, v);
    ([x[0] + dx[0], x[1] + dx[1], x[2] + dx[2]], mat_vec(&r, v))
}

/// The diagonal shift `x + (v₁ sinΩδ/Ω, v₂ sinΩδ/Ω, v₃δ)` with `δ = t − τ`;
/// velocity unchanged.
///
/// Composition `S(t₂,t₃)∘S(t₁,t₂) = S(t₁,t₃)` holds exactly in the parallel
/// component for every `Ω` and in all components at `Ω = 0`. For `Ω ≠ 0` the
/// perpendicular shifts add as `sin a + sin b`, not `sin(a + b)`; the true
/// gyration semigroup is [`exact_flow`].
pub fn shift_s0(t: f64, tau: f64, p: PhasePoint, kin: &Kinematics) -> PhasePoint {
    let s = shift_vector(t - tau, kin);
    PhasePoint::new(
        [
            p.x[0] + s[0] * p.v[0],
            p.x[1] + s[1] * p.v[1],
            p.x[2] + s[2] * p.v[2],
        ],
        p.v,
    )
}

/// The componentwise multiplier `(sinΩδ/Ω, sinΩδ/Ω, δ)` used by the shifted
/// norms and by [`shift_s0`].
pub fn shift_vector(lag: f64, kin: &Kinematics) -> Vec3 {
    let (s, _) = kin.gyro_ratios(lag);
    [s, s, lag]
}

/// `η_{k1} = (−k₂cosΩt + k₂ − k₁sinΩt)/Ω`, `η_{k2} = (−k₂sinΩt − k₁ + k₁cosΩt)/Ω`.
pub fn rotated_frequencies(k: [i64; 3], t: f64, kin: &Kinematics) -> RotatedFrequency {
    let (s, c) = kin.gyro_ratios(t);
    let (k1, k2, k3) = (k[0] as f64, k[1] as f64, k[2] as f64);
    let eta_k1 = -k2 * c - k1 * s;
    let eta_k2 = -k2 * s + k1 * c;
    RotatedFrequency {
        eta_k1,
        eta_k2,
        nu_k: eta_k1.abs() + eta_k2.abs() + k3.abs() * t.abs(),
    }
}

/// `M(dt)ᵀk`: the frequency at which the free-streamed datum is sampled.
pub fn streamed_frequency(k: [i64; 3], dt: f64, kin: &Kinematics) -> Vec3 {
    let m = drift_matrix(dt, kin);
    mat_t_vec(&m, [k[0] as f64, k[1] as f64, k[2] as f64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rotation_quarter_turn() {
        let kin = Kinematics::new(1.0);
        let r = rotation_matrix(PI / 2.0, &kin);
        let e1 = mat_vec(&r, [1.0, 0.0, 0.0]);
        let e3 = mat_vec(&r, [0.0, 0.0, 1.0]);
        assert!(close(e1[0], 0.0, 1e-15) && close(e1[1], 1.0, 1e-15));
        assert_eq!(e3, [0.0, 0.0, 1.0]);
        assert_eq!(rotation_matrix(0.0, &kin), [[1.0, -0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn rotation_composes() {
        let kin = Kinematics::new(1.0);
        let ab = mat_mul(&rotation_matrix(0.3, &kin), &rotation_matrix(0.4, &kin));
        let c = rotation_matrix(0.7, &kin);
        for i in 0..3 {
            for j in 0..3 {
                assert!(close(ab[i][j], c[i][j], 1e-14));
            }
        }
    }

    #[test]
    fn drift_matrix_special_values() {
        let kin = Kinematics::new(1.0);
        assert_eq!(drift_matrix(0.0, &kin), [[0.0; 3]; 3]);
        let m = drift_matrix(2.0 * PI, &kin);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == 2 && j == 2 { 2.0 * PI } else { 0.0 };
                assert!(close(m[i][j], want, 1e-14), "{i}{j} {}", m[i][j]);
            }
        }
        let tiny = Kinematics::new(1e-8);
        let m = drift_matrix(1.0, &tiny);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(close(m[i][j], want, 1e-7));
            }
        }
    }

    #[test]
    fn drift_is_integral_of_rotation() {
        // Simpson quadrature of R(s) over [0, dt].
        let kin = Kinematics::new(1.7);
        let dt = 2.3;
        let n = 2000;
        let h = dt / n as f64;
        let mut acc = [[0.0; 3]; 3];
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let r = rotation_matrix(i as f64 * h, &kin);
            for a in 0..3 {
                for b in 0..3 {
                    acc[a][b] += w * h / 3.0 * r[a][b];
                }
            }
        }
        let m = drift_matrix(dt, &kin);
        for a in 0..3 {
            for b in 0..3 {
                assert!(close(acc[a][b], m[a][b], 1e-11));
            }
        }
    }

    #[test]
    fn series_branch_is_continuous() {
        for &om in &[0.99e-4, 1.01e-4] {
            let kin = Kinematics::new(om);
            let (s, c) = kin.gyro_ratios(1.0);
            let th: f64 = om;
            assert!(close(s, th.sin() / om, 1e-12));
            assert!(close(c, (th.cos() - 1.0) / om, 1e-9));
        }
    }

    #[test]
    fn rotated_frequency_examples() {
        let kin = Kinematics::new(1.0);
        let r = rotated_frequencies([1, 0, 0], PI, &kin);
        assert!(close(r.eta_k1, 0.0, 1e-14) && close(r.eta_k2, -2.0, 1e-14));
        let r = rotated_frequencies([0, 0, 5], 1.3, &kin);
        assert_eq!((r.eta_k1, r.eta_k2), (0.0, 0.0));
        assert!(close(r.nu_k, 6.5, 1e-14));
        let r = rotated_frequencies([2, -1, 3], 0.0, &kin);
        assert_eq!(r.nu_k, 0.0);
        let landau = rotated_frequencies([2, -1, 0], 1.5, &Kinematics::landau());
        assert!(close(landau.eta_k1, -3.0, 1e-14) && close(landau.eta_k2, 1.5, 1e-14));
    }

    #[test]
    fn rotated_and_streamed_frequencies_share_magnitude() {
        let kin = Kinematics::new(0.8);
        for &t in &[0.1, 1.0, 3.7, 11.0] {
            let r = rotated_frequencies([2, -3, 1], t, &kin);
            let m = streamed_frequency([2, -3, 1], t, &kin);
            let a = r.eta_k1.hypot(r.eta_k2);
            let b = m[0].hypot(m[1]);
            assert!(close(a, b, 1e-12));
        }
    }

    #[test]
    fn shift_parallel_component_composes_for_any_omega() {
        let kin = Kinematics::new(1.0);
        let p = PhasePoint::new([0.1, 0.2, 0.3], [0.5, -1.0, 0.7]);
        let a = shift_s0(1.9, 0.7, shift_s0(0.7, 0.0, p, &kin), &kin);
        let b = shift_s0(1.9, 0.0, p, &kin);
        assert!(torus_delta(a.x, b.x)[2].abs() < 1e-12);
        // Perpendicular components do not compose when Ω ≠ 0.
        assert!(torus_delta(a.x, b.x)[0].abs() > 1e-3);
    }
}
