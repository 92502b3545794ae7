//! Grids, the spectral distribution `f̂(k, v)`, Fourier conventions,
//! Maxwellian equilibria and velocity moments.
//!
//! Transforms use `f̂(k) = ∫ e^{−2πik·x} f dx` in space and
//! `f̃(η) = ∫ e^{−2πiη·v} f dv` in velocity. The velocity box is periodic,
//! `v_j = −lv + jΔv`, and the η-grid has spacing `1/(2·lv)`.

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Vec3;
use crate::spectral::{self, VGrid, VOps};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const BOUNDARY_LIMIT: f64 = 1e-12;
const CHECKPOINT_MAGIC: &[u8; 8] = b"CYDMCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Discretization of `T³ × R³`.
///
/// `dim_x = 1` keeps the modes `(0, 0, k₃)`; `dim_x = 3` keeps the full cube
/// `|kᵢ| ≤ kmax`. `dim_v = 1` keeps only `v₃` (the parallel marginal) and
/// requires `dim_x = 1`. The perpendicular velocity axes may use a coarser
/// `nv_perp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dim_x: usize,
    pub kmax: usize,
    pub nv: usize,
    pub lv: f64,
    pub dim_v: usize,
    pub nv_perp: usize,
}

/// Validated geometry with three velocity dimensions and `nv_perp = nv`.
pub fn make_geometry(dim_x: usize, kmax: usize, nv: usize, lv: f64) -> Result<Geometry> {
    Geometry::new(dim_x, kmax, nv, lv, 3, nv)
}

impl Geometry {
    pub fn new(
        dim_x: usize,
        kmax: usize,
        nv: usize,
        lv: f64,
        dim_v: usize,
        nv_perp: usize,
    ) -> Result<Self> {
        if dim_x != 1 && dim_x != 3 {
            return Err(Error::Geometry(format!("dim_x must be 1 or 3, got {dim_x}")));
        }
        if dim_v != 1 && dim_v != 3 {
            return Err(Error::Geometry(format!("dim_v must be 1 or 3, got {dim_v}")));
        }
        if dim_v == 1 && dim_x != 1 {
            return Err(Error::Geometry("dim_v = 1 requires dim_x = 1".into()));
        }
        if !nv.is_power_of_two() || nv < 32 {
            return Err(Error::Geometry(format!(
                "nv must be a power of two and at least 32, got {nv}"
            )));
        }
        if dim_v == 3 && (!nv_perp.is_power_of_two() || nv_perp < 8) {
            return Err(Error::Geometry(format!(
                "nv_perp must be a power of two and at least 8, got {nv_perp}"
            )));
        }
        if !(lv > 0.0) || !lv.is_finite() {
            return Err(Error::Geometry(format!("lv must be positive, got {lv}")));
        }
        Ok(Self {
            dim_x,
            kmax,
            nv,
            lv,
            dim_v,
            nv_perp: if dim_v == 1 { 1 } else { nv_perp },
        })
    }

    /// Same geometry with a different velocity layout.
    pub fn with_velocity(self, dim_v: usize, nv_perp: usize) -> Result<Self> {
        Self::new(self.dim_x, self.kmax, self.nv, self.lv, dim_v, nv_perp)
    }

    pub fn dv(&self) -> f64 {
        2.0 * self.lv / self.nv as f64
    }

    pub fn deta(&self) -> f64 {
        1.0 / (2.0 * self.lv)
    }

    pub fn vgrid(&self) -> VGrid {
        let p = if self.dim_v == 1 { 1 } else { self.nv_perp };
        VGrid {
            n: [p, p, self.nv],
            lv: self.lv,
        }
    }

    pub fn vlen(&self) -> usize {
        self.vgrid().len()
    }

    /// Retained Fourier modes in storage order.
    pub fn modes(&self) -> Vec<[i64; 3]> {
        let km = self.kmax as i64;
        if self.dim_x == 1 {
            (-km..=km).map(|k| [0, 0, k]).collect()
        } else {
            let mut out = Vec::new();
            for a in -km..=km {
                for b in -km..=km {
                    for c in -km..=km {
                        out.push([a, b, c]);
                    }
                }
            }
            out
        }
    }

    pub fn n_modes(&self) -> usize {
        let side = 2 * self.kmax + 1;
        if self.dim_x == 1 {
            side
        } else {
            side * side * side
        }
    }

    pub fn mode_index(&self, k: [i64; 3]) -> Option<usize> {
        let km = self.kmax as i64;
        if k.iter().any(|c| c.abs() > km) {
            return None;
        }
        let side = 2 * km + 1;
        if self.dim_x == 1 {
            if k[0] != 0 || k[1] != 0 {
                return None;
            }
            Some((k[2] + km) as usize)
        } else {
            Some((((k[0] + km) * side + (k[1] + km)) * side + (k[2] + km)) as usize)
        }
    }
}

/// Truncated Fourier-in-x, gridded-in-v distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDistribution {
    pub geometry: Geometry,
    pub data: Vec<Complex64>,
    pub time: f64,
}

impl SpectralDistribution {
    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            geometry,
            data: vec![Complex64::new(0.0, 0.0); geometry.n_modes() * geometry.vlen()],
            time: 0.0,
        }
    }

    pub fn block(&self, mode: usize) -> &[Complex64] {
        let n = self.geometry.vlen();
        &self.data[mode * n..(mode + 1) * n]
    }

    pub fn block_mut(&mut self, mode: usize) -> &mut [Complex64] {
        let n = self.geometry.vlen();
        &mut self.data[mode * n..(mode + 1) * n]
    }

    pub fn mode_block(&self, k: [i64; 3]) -> Option<&[Complex64]> {
        self.geometry.mode_index(k).map(|i| self.block(i))
    }

    /// `max |f̂(−k, v) − conj f̂(k, v)|`.
    pub fn reality_error(&self) -> f64 {
        let g = &self.geometry;
        let mut worst: f64 = 0.0;
        for (i, k) in g.modes().iter().enumerate() {
            let j = g.mode_index([-k[0], -k[1], -k[2]]).expect("lattice is symmetric");
            for (a, b) in self.block(i).iter().zip(self.block(j)) {
                worst = worst.max((a - b.conj()).norm());
            }
        }
        worst
    }

    /// `∫∫ f dx dv`, the real part of `ρ̂(0)`.
    pub fn mass(&self) -> f64 {
        let i0 = self.geometry.mode_index([0, 0, 0]).expect("zero mode retained");
        spectral::integrate(&self.geometry.vgrid(), self.block(i0)).re
    }

    /// `Σ_k ∫|f̂(k,v)|² dv`, the squared L² norm of `f` by Parseval in x.
    pub fn l2_squared(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.geometry.vgrid().cell()
    }
}

/// Equilibrium family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquilibriumKind {
    Maxwellian,
}

/// A normalized Maxwellian with thermal speeds `v_T` (parallel) and
/// `v_T⊥` (perpendicular), and an analyticity certificate
/// `|f̃⁰(η)| ≤ C₀e^{−2πλ₀|η|}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub kind: EquilibriumKind,
    pub v_thermal: f64,
    pub v_thermal_perp: f64,
    pub c0: f64,
    pub lambda0: f64,
}

impl Equilibrium {
    pub fn isotropic(v_thermal: f64) -> Self {
        Self::anisotropic(v_thermal, v_thermal)
    }

    pub fn anisotropic(v_thermal: f64, v_thermal_perp: f64) -> Self {
        // Completing the square: 2πλ|η| − 2π²v²|η|² ≤ λ²/(2v²) with λ = v.
        let vmin = v_thermal.min(v_thermal_perp);
        let lambda0 = vmin;
        Self {
            kind: EquilibriumKind::Maxwellian,
            v_thermal,
            v_thermal_perp,
            c0: (lambda0 * lambda0 / (2.0 * vmin * vmin)).exp(),
            lambda0,
        }
    }

    /// Parallel factor `e^{−v₃²/(2v_T²)}/(√(2π)v_T)`.
    pub fn parallel(&self, v3: f64) -> f64 {
        gaussian_1d(v3, self.v_thermal)
    }

    pub fn perpendicular(&self, v1: f64, v2: f64) -> f64 {
        gaussian_1d(v1, self.v_thermal_perp) * gaussian_1d(v2, self.v_thermal_perp)
    }

    pub fn value(&self, v: Vec3) -> f64 {
        self.perpendicular(v[0], v[1]) * self.parallel(v[2])
    }

    /// `f̃⁰(η) = e^{−2π²(v_T⊥²(η₁² + η₂²) + v_T²η₃²)}`.
    pub fn transform(&self, eta: Vec3) -> f64 {
        let a = self.v_thermal_perp * self.v_thermal_perp;
        let b = self.v_thermal * self.v_thermal;
        (-2.0 * std::f64::consts::PI.powi(2)
            * (a * (eta[0] * eta[0] + eta[1] * eta[1]) + b * eta[2] * eta[2]))
            .exp()
    }

    /// Largest normalized boundary value `e^{−lv²/(2v²)}` over active axes.
    pub fn boundary_value(&self, geometry: &Geometry) -> f64 {
        let lv = geometry.lv;
        let mut v = self.v_thermal;
        if geometry.dim_v == 3 {
            v = v.max(self.v_thermal_perp);
        }
        (-lv * lv / (2.0 * v * v)).exp()
    }

    /// Gridded values over the geometry's velocity block.
    pub fn grid_values(&self, geometry: &Geometry) -> Vec<Complex64> {
        profile_grid(geometry, |v| self.value_in(geometry, v))
    }

    fn value_in(&self, geometry: &Geometry, v: Vec3) -> f64 {
        if geometry.dim_v == 1 {
            self.parallel(v[2])
        } else {
            self.value(v)
        }
    }
}

fn gaussian_1d(v: f64, vt: f64) -> f64 {
    (-v * v / (2.0 * vt * vt)).exp() / ((TWO_PI).sqrt() * vt)
}

fn profile_grid<F: Fn(Vec3) -> f64>(geometry: &Geometry, f: F) -> Vec<Complex64> {
    let g = geometry.vgrid();
    (0..g.len())
        .map(|idx| {
            let i = g.unindex(idx);
            let v = [g.coord(0, i[0]), g.coord(1, i[1]), g.coord(2, i[2])];
            Complex64::new(f(v), 0.0)
        })
        .collect()
}

/// Normalized isotropic Maxwellian and its gridded values.
pub fn maxwellian(geometry: &Geometry, v_thermal: f64) -> Result<(Equilibrium, Vec<Complex64>)> {
    maxwellian_anisotropic(geometry, v_thermal, v_thermal)
}

pub fn maxwellian_anisotropic(
    geometry: &Geometry,
    v_thermal: f64,
    v_thermal_perp: f64,
) -> Result<(Equilibrium, Vec<Complex64>)> {
    if !(v_thermal > 0.0) || !(v_thermal_perp > 0.0) {
        return Err(Error::Parameter("thermal speeds must be positive".into()));
    }
    let eq = Equilibrium::anisotropic(v_thermal, v_thermal_perp);
    let boundary = eq.boundary_value(geometry);
    let vmax = if geometry.dim_v == 3 {
        v_thermal.max(v_thermal_perp)
    } else {
        v_thermal
    };
    if boundary > BOUNDARY_LIMIT || geometry.lv < 6.0 * vmax {
        return Err(Error::BoundaryTruncation {
            lv: geometry.lv,
            value: boundary,
        });
    }
    Ok((eq, eq.grid_values(geometry)))
}

/// Velocity shape of a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VelocityProfile {
    /// The equilibrium itself.
    Equilibrium,
    /// Parallel Gaussian of the given width; perpendicular part from the equilibrium.
    Gaussian { width: f64 },
    /// Parallel `sech(v₃/w)/(πw)`; perpendicular part from the equilibrium.
    Sech { width: f64 },
}

impl VelocityProfile {
    pub fn parallel(&self, eq: &Equilibrium, v3: f64) -> f64 {
        match *self {
            VelocityProfile::Equilibrium => eq.parallel(v3),
            VelocityProfile::Gaussian { width } => gaussian_1d(v3, width),
            VelocityProfile::Sech { width } => 1.0 / ((v3 / width).cosh() * std::f64::consts::PI * width),
        }
    }

    /// Closed-form parallel transform.
    pub fn parallel_transform(&self, eq: &Equilibrium, eta3: f64) -> f64 {
        let pi2 = std::f64::consts::PI.powi(2);
        match *self {
            VelocityProfile::Equilibrium => (-2.0 * pi2 * eq.v_thermal.powi(2) * eta3 * eta3).exp(),
            VelocityProfile::Gaussian { width } => (-2.0 * pi2 * width * width * eta3 * eta3).exp(),
            VelocityProfile::Sech { width } => 1.0 / (pi2 * width * eta3).cosh(),
        }
    }

    /// Closed-form transform of the full profile.
    pub fn transform(&self, eq: &Equilibrium, eta: Vec3) -> f64 {
        let a = eq.v_thermal_perp * eq.v_thermal_perp;
        let perp = (-2.0 * std::f64::consts::PI.powi(2) * a * (eta[0] * eta[0] + eta[1] * eta[1])).exp();
        perp * self.parallel_transform(eq, eta[2])
    }

    fn value(&self, geometry: &Geometry, eq: &Equilibrium, v: Vec3) -> f64 {
        let par = self.parallel(eq, v[2]);
        if geometry.dim_v == 1 {
            par
        } else {
            eq.perpendicular(v[0], v[1]) * par
        }
    }

    pub fn width(&self, eq: &Equilibrium) -> f64 {
        match *self {
            VelocityProfile::Equilibrium => eq.v_thermal,
            VelocityProfile::Gaussian { width } | VelocityProfile::Sech { width } => width,
        }
    }

    /// Profile value at the box edge relative to its peak.
    pub fn boundary_value(&self, lv: f64, eq: &Equilibrium) -> f64 {
        match *self {
            VelocityProfile::Sech { width } => 1.0 / (lv / width).cosh(),
            _ => {
                let w = self.width(eq);
                (-lv * lv / (2.0 * w * w)).exp()
            }
        }
    }
}

/// One cosine modulation `amplitude·g(v)·2cos(2πk·x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub mode: [i64; 3],
    pub amplitude: f64,
    pub profile: VelocityProfile,
}

/// `f⁰(v) + Σ aᵢgᵢ(v)·2cos(2πkᵢ·x)` as a spectral distribution.
pub fn perturbed_state(
    geometry: &Geometry,
    eq: &Equilibrium,
    perturbations: &[Perturbation],
) -> Result<SpectralDistribution> {
    let mut dist = SpectralDistribution::zeros(*geometry);
    let i0 = geometry.mode_index([0, 0, 0]).expect("zero mode retained");
    let f0 = eq.grid_values(geometry);
    dist.block_mut(i0).copy_from_slice(&f0);
    for p in perturbations {
        let g = profile_grid(geometry, |v| p.profile.value(geometry, eq, v));
        let neg = [-p.mode[0], -p.mode[1], -p.mode[2]];
        let (ip, ineg) = match (geometry.mode_index(p.mode), geometry.mode_index(neg)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Geometry(format!(
                    "perturbation mode {:?} is not retained by the lattice",
                    p.mode
                )))
            }
        };
        if p.profile.boundary_value(geometry.lv, eq) > BOUNDARY_LIMIT {
            return Err(Error::BoundaryTruncation {
                lv: geometry.lv,
                value: p.profile.boundary_value(geometry.lv, eq),
            });
        }
        if ip == ineg {
            for (d, gv) in dist.block_mut(ip).iter_mut().zip(&g) {
                *d += gv * (2.0 * p.amplitude);
            }
        } else {
            for ib in [ip, ineg] {
                for (d, gv) in dist.block_mut(ib).iter_mut().zip(&g) {
                    *d += gv * p.amplitude;
                }
            }
        }
    }
    Ok(dist)
}

/// Centered η-grid on `axis` of the velocity block.
pub fn eta_grid(geometry: &Geometry, axis: usize) -> Vec<f64> {
    let g = geometry.vgrid();
    let n = g.n[axis] as i64;
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|c| g.eta_of(axis, c - n / 2)).collect()
}

/// Velocity transform of one block in centered η order:
/// `f̃(η_m) = Δv·(−1)^m·DFT[f](m)` per active axis.
pub fn v_transform_block(ops: &mut VOps, block: &[Complex64]) -> Vec<Complex64> {
    let g = ops.grid;
    let mut data = block.to_vec();
    for a in 0..3 {
        ops.dft_axis(&mut data, a, true);
    }
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    let cell = g.cell();
    for (idx, d) in data.iter().enumerate() {
        let i = g.unindex(idx);
        let mut c = [0usize; 3];
        let mut sign = 1.0;
        for a in 0..3 {
            let n = g.n[a];
            if n > 1 {
                let m = g.signed(a, i[a]);
                c[a] = (m + (n / 2) as i64) as usize;
                if m.rem_euclid(2) == 1 {
                    sign = -sign;
                }
            }
        }
        out[g.index(c)] = d * (sign * cell);
    }
    out
}

/// Inverse of [`v_transform_block`].
pub fn v_inverse_block(ops: &mut VOps, spec: &[Complex64]) -> Vec<Complex64> {
    let g = ops.grid;
    let mut data = vec![Complex64::new(0.0, 0.0); spec.len()];
    let cell = g.cell();
    let total = g.len() as f64;
    for (idx, s) in spec.iter().enumerate() {
        let c = g.unindex(idx);
        let mut i = [0usize; 3];
        let mut sign = 1.0;
        for a in 0..3 {
            let n = g.n[a];
            if n > 1 {
                let m = c[a] as i64 - (n / 2) as i64;
                i[a] = m.rem_euclid(n as i64) as usize;
                if m.rem_euclid(2) == 1 {
                    sign = -sign;
                }
            }
        }
        data[g.index(i)] = s * (sign / (cell * total));
    }
    for a in 0..3 {
        ops.dft_axis(&mut data, a, false);
    }
    data
}

/// `f̂(k, η)` for every retained mode, blocks in storage order.
pub fn v_transform(dist: &SpectralDistribution) -> Vec<Complex64> {
    let g = dist.geometry;
    let mut ops = VOps::new(g.vgrid());
    let mut out = Vec::with_capacity(dist.data.len());
    for i in 0..g.n_modes() {
        out.extend(v_transform_block(&mut ops, dist.block(i)));
    }
    out
}

pub fn v_inverse(geometry: &Geometry, spec: &[Complex64], time: f64) -> SpectralDistribution {
    let mut ops = VOps::new(geometry.vgrid());
    let n = geometry.vlen();
    let mut data = Vec::with_capacity(spec.len());
    for i in 0..geometry.n_modes() {
        data.extend(v_inverse_block(&mut ops, &spec[i * n..(i + 1) * n]));
    }
    SpectralDistribution {
        geometry: *geometry,
        data,
        time,
    }
}

/// `ρ̂(k) = ∫ f̂(k, v) dv` by the trapezoid rule, per retained mode.
pub fn density(dist: &SpectralDistribution) -> Vec<Complex64> {
    let g = dist.geometry.vgrid();
    (0..dist.geometry.n_modes())
        .map(|i| spectral::integrate(&g, dist.block(i)))
        .collect()
}

/// Exact evaluation of the trapezoid transform `Δv Σ f(v) e^{−2πiη·v}` at an
/// arbitrary frequency (the band-limited interpolant of the η-grid values).
pub fn transform_at(geometry: &Geometry, block: &[Complex64], eta: Vec3) -> Complex64 {
    spectral::weighted_integral(&geometry.vgrid(), block, [-eta[0], -eta[1], -eta[2]])
}

/// Write a checkpoint: magic `CYDMCKPT`, then little-endian
/// `u32 version, u32 dim_x, u32 kmax, u32 nv, u32 dim_v, u32 nv_perp,
/// f64 lv, f64 time, u64 count`, then `count` pairs `(f64 re, f64 im)`.
pub fn write_checkpoint<W: Write>(dist: &SpectralDistribution, mut w: W) -> Result<()> {
    let g = &dist.geometry;
    let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    for v in [
        CHECKPOINT_VERSION,
        g.dim_x as u32,
        g.kmax as u32,
        g.nv as u32,
        g.dim_v as u32,
        g.nv_perp as u32,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.write_all(&g.lv.to_le_bytes()).map_err(io)?;
    w.write_all(&dist.time.to_le_bytes()).map_err(io)?;
    w.write_all(&(dist.data.len() as u64).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(dist.data.len() * 16);
    for c in &dist.data {
        buf.extend_from_slice(&c.re.to_le_bytes());
        buf.extend_from_slice(&c.im.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<SpectralDistribution> {
    let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut u = [0u32; 6];
    for x in u.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        *x = u32::from_le_bytes(b);
    }
    if u[0] != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", u[0])));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let lv = f64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(io)?;
    let time = f64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(io)?;
    let count = u64::from_le_bytes(b8) as usize;
    let geometry = Geometry::new(u[1] as usize, u[2] as usize, u[3] as usize, lv, u[4] as usize, u[5] as usize)?;
    if count != geometry.n_modes() * geometry.vlen() {
        return Err(Error::Checkpoint(format!(
            "payload holds {count} values, geometry needs {}",
            geometry.n_modes() * geometry.vlen()
        )));
    }
    let mut raw = vec![0u8; count * 16];
    r.read_exact(&mut raw).map_err(io)?;
    let data = raw
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            Complex64::new(re, im)
        })
        .collect();
    Ok(SpectralDistribution { geometry, data, time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geo1(nv: usize) -> Geometry {
        Geometry::new(1, 3, nv, 8.0, 1, 1).unwrap()
    }

    #[test]
    fn make_geometry_examples() {
        let g = make_geometry(1, 8, 64, 8.0).unwrap();
        assert_eq!(g.dv(), 0.25);
        assert_eq!(g.deta(), 1.0 / 16.0);
        assert!(make_geometry(3, 4, 32, 6.0).is_ok());
        assert!(matches!(make_geometry(1, 8, 48, 8.0), Err(Error::Geometry(_))));
        assert!(make_geometry(1, 8, 64, 0.0).is_err());
        assert!(Geometry::new(3, 2, 64, 8.0, 1, 1).is_err());
    }

    #[test]
    fn mode_indexing_round_trips() {
        for g in [geo1(32), make_geometry(3, 2, 32, 8.0).unwrap()] {
            for (i, k) in g.modes().iter().enumerate() {
                assert_eq!(g.mode_index(*k), Some(i));
            }
            assert_eq!(g.modes().len(), g.n_modes());
        }
    }

    #[test]
    fn maxwellian_mass_boundary_and_transform() {
        let g = Geometry::new(1, 2, 64, 8.0, 3, 32).unwrap();
        let (eq, f0) = maxwellian(&g, 1.0).unwrap();
        assert!((spectral::integrate(&g.vgrid(), &f0).re - 1.0).abs() < 1e-12);
        assert!(eq.parallel(8.0) / eq.parallel(0.0) < 1e-13);
        let g1 = geo1(64);
        let (eq1, f01) = maxwellian(&g1, 1.0).unwrap();
        let mut ops = VOps::new(g1.vgrid());
        let ft = v_transform_block(&mut ops, &f01);
        for (m, eta) in eta_grid(&g1, 2).iter().enumerate() {
            let want = (-2.0 * std::f64::consts::PI.powi(2) * eta * eta).exp();
            assert!((ft[m].re - want).abs() < 1e-10 && ft[m].im.abs() < 1e-12);
            assert!((eq1.transform([0.0, 0.0, *eta]) - want).abs() < 1e-15);
        }
        assert!(matches!(maxwellian(&g1, 3.0), Err(Error::BoundaryTruncation { .. })));
    }

    #[test]
    fn certificate_bounds_the_transform() {
        let g = Geometry::new(1, 1, 128, 12.0, 1, 1).unwrap();
        let (eq, _) = maxwellian(&g, 1.3).unwrap();
        for eta in eta_grid(&g, 2) {
            let bound = eq.c0 * (-TWO_PI * eq.lambda0 * eta.abs()).exp();
            assert!(eq.transform([0.0, 0.0, eta]) <= bound * (1.0 + 1e-14));
        }
    }

    #[test]
    fn transform_round_trip_and_parseval() {
        let g = Geometry::new(1, 1, 32, 6.0, 3, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ops = VOps::new(g.vgrid());
        let block: Vec<Complex64> = (0..g.vlen())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let ft = v_transform_block(&mut ops, &block);
        let back = v_inverse_block(&mut ops, &ft);
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).norm() < 1e-12);
        }
        let vg = g.vgrid();
        let lhs: f64 = block.iter().map(|c| c.norm_sqr()).sum::<f64>() * vg.cell();
        let deta: f64 = (0..3).filter(|&a| vg.active(a)).map(|a| 1.0 / (vg.n[a] as f64 * vg.dv(a))).product();
        let rhs: f64 = ft.iter().map(|c| c.norm_sqr()).sum::<f64>() * deta;
        assert!((lhs - rhs).abs() < 1e-10 * lhs);
    }

    #[test]
    fn constant_in_v_concentrates_at_zero_frequency() {
        let g = geo1(32);
        let mut ops = VOps::new(g.vgrid());
        let block = vec![Complex64::new(1.0, 0.0); g.vlen()];
        let ft = v_transform_block(&mut ops, &block);
        let center = g.nv / 2;
        for (m, c) in ft.iter().enumerate() {
            if m == center {
                assert!((c.re - 16.0).abs() < 1e-12);
            } else {
                assert!(c.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn density_examples() {
        let g = geo1(64);
        let (eq, _) = maxwellian(&g, 1.0).unwrap();
        let hom = perturbed_state(&g, &eq, &[]).unwrap();
        let rho = density(&hom);
        for (k, r) in g.modes().iter().zip(&rho) {
            let want = if k[2] == 0 { 1.0 } else { 0.0 };
            assert!((r - want).norm() < 1e-12);
        }
        let p = Perturbation { mode: [0, 0, 1], amplitude: 0.01, profile: VelocityProfile::Equilibrium };
        let d = perturbed_state(&g, &eq, &[p]).unwrap();
        let rho = density(&d);
        assert!((rho[g.mode_index([0, 0, 1]).unwrap()].re - 0.01).abs() < 1e-14);
        assert!((rho[g.mode_index([0, 0, -1]).unwrap()].re - 0.01).abs() < 1e-14);
        assert!(d.reality_error() == 0.0);
    }

    #[test]
    fn density_matches_direct_summation() {
        let g = Geometry::new(1, 2, 32, 8.0, 3, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut d = SpectralDistribution::zeros(g);
        for c in d.data.iter_mut() {
            *c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let rho = density(&d);
        let vg = g.vgrid();
        for (i, r) in rho.iter().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for i1 in 0..vg.n[0] {
                for i2 in 0..vg.n[1] {
                    for i3 in 0..vg.n[2] {
                        acc += d.block(i)[vg.index([i1, i2, i3])] * (vg.dv(0) * vg.dv(1) * vg.dv(2));
                    }
                }
            }
            assert!((acc - r).norm() < 1e-13 * acc.norm().max(1.0));
        }
    }

    #[test]
    fn transform_at_matches_grid_and_closed_form() {
        let g = geo1(128);
        let (eq, f0) = maxwellian(&g, 1.0).unwrap();
        for &eta in &[0.0, 0.137, 0.5, 1.21] {
            let v = transform_at(&g, &f0, [0.0, 0.0, eta]);
            assert!((v.re - eq.transform([0.0, 0.0, eta])).abs() < 1e-14);
        }
        let sech = VelocityProfile::Sech { width: 0.25 };
        let vals = profile_grid(&g, |v| sech.value(&g, &eq, v));
        // Aliasing: the trapezoid sum adds Σ_{p≠0} g̃(η + p/Δv).
        for &eta in &[0.0, 0.3, 1.1] {
            let v = transform_at(&g, &vals, [0.0, 0.0, eta]);
            let err = (v.re - sech.parallel_transform(&eq, eta)).abs();
            let alias: f64 = [-1.0, 1.0]
                .iter()
                .map(|p| sech.parallel_transform(&eq, eta + p / g.dv()))
                .sum();
            assert!(err < 1.1 * alias, "{eta} {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = Geometry::new(1, 1, 32, 8.0, 3, 8).unwrap();
        let (eq, _) = maxwellian(&g, 1.0).unwrap();
        let p = Perturbation { mode: [0, 0, 1], amplitude: 0.1, profile: VelocityProfile::Sech { width: 0.25 } };
        let mut d = perturbed_state(&g, &eq, &[p]).unwrap();
        d.time = 1.25;
        let mut buf = Vec::new();
        write_checkpoint(&d, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"CYDMCKPT");
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, d);
        buf[0] = b'X';
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
