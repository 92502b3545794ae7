//! Velocity-grid transforms shared by the distribution, field and solver code.
//!
//! A velocity block is a flat complex array over the grid `v_j = −lv + jΔv`
//! with `v₃` fastest. Inactive axes have a single point at `v = 0`.
//! Frequencies follow the `e^{−2πiη·v}` convention: DFT index `m` (signed)
//! corresponds to `η = m/(2·lv)`. Displacements and rotations act on
//! trigonometric interpolants; the Nyquist coefficient always receives a real
//! multiplier so real data stays real and the mean (`η = 0`) is untouched.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::kinematics::Vec3;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Shape of a velocity grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VGrid {
    pub n: [usize; 3],
    pub lv: f64,
}

impl VGrid {
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn active(&self, axis: usize) -> bool {
        self.n[axis] > 1
    }

    pub fn dv(&self, axis: usize) -> f64 {
        if self.active(axis) {
            2.0 * self.lv / self.n[axis] as f64
        } else {
            1.0
        }
    }

    /// Quadrature weight of one cell.
    pub fn cell(&self) -> f64 {
        (0..3).map(|a| self.dv(a)).product()
    }

    pub fn coord(&self, axis: usize, j: usize) -> f64 {
        if self.active(axis) {
            -self.lv + j as f64 * self.dv(axis)
        } else {
            0.0
        }
    }

    pub fn coords(&self, axis: usize) -> Vec<f64> {
        (0..self.n[axis]).map(|j| self.coord(axis, j)).collect()
    }

    pub fn index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.n[1] + i[1]) * self.n[2] + i[2]
    }

    pub fn unindex(&self, idx: usize) -> [usize; 3] {
        let i2 = idx % self.n[2];
        let r = idx / self.n[2];
        [r / self.n[1], r % self.n[1], i2]
    }

    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => self.n[1] * self.n[2],
            1 => self.n[2],
            _ => 1,
        }
    }

    /// Signed frequency index of DFT slot `m` on `axis`.
    pub fn signed(&self, axis: usize, m: usize) -> i64 {
        let n = self.n[axis];
        if m < n.div_ceil(2) {
            m as i64
        } else {
            m as i64 - n as i64
        }
    }

    pub fn eta_of(&self, axis: usize, signed: i64) -> f64 {
        if self.active(axis) {
            signed as f64 / (2.0 * self.lv)
        } else {
            0.0
        }
    }

    /// Largest representable `|η|` on `axis`.
    pub fn eta_max(&self, axis: usize) -> f64 {
        self.n[axis] as f64 / (4.0 * self.lv)
    }
}

/// FFT plans and scratch for one velocity grid. Clone per worker.
#[derive(Clone)]
pub struct VOps {
    pub grid: VGrid,
    fwd: [Option<Arc<dyn Fft<f64>>>; 3],
    inv: [Option<Arc<dyn Fft<f64>>>; 3],
    line: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl std::fmt::Debug for VOps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VOps").field("grid", &self.grid).finish()
    }
}

impl VOps {
    pub fn new(grid: VGrid) -> Self {
        let mut planner = FftPlanner::new();
        let mut fwd: [Option<Arc<dyn Fft<f64>>>; 3] = [None, None, None];
        let mut inv: [Option<Arc<dyn Fft<f64>>>; 3] = [None, None, None];
        let mut scratch_len = 0;
        for a in 0..3 {
            if grid.active(a) {
                let f = planner.plan_fft_forward(grid.n[a]);
                let i = planner.plan_fft_inverse(grid.n[a]);
                scratch_len = scratch_len
                    .max(f.get_inplace_scratch_len())
                    .max(i.get_inplace_scratch_len());
                fwd[a] = Some(f);
                inv[a] = Some(i);
            }
        }
        let nmax = grid.n.iter().copied().max().unwrap_or(1);
        Self {
            grid,
            fwd,
            inv,
            line: vec![Complex64::new(0.0, 0.0); nmax],
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
        }
    }

    /// Iterate over every line along `axis`: for each, transform, let `op`
    /// modify the coefficients (given the line's base multi-index), and
    /// transform back.
    fn for_lines<F>(&mut self, data: &mut [Complex64], axis: usize, mut op: F)
    where
        F: FnMut([usize; 3], &mut [Complex64]),
    {
        let g = self.grid;
        if !g.active(axis) {
            return;
        }
        let n = g.n[axis];
        let stride = g.stride(axis);
        let fwd = self.fwd[axis].clone().expect("active axis has a plan");
        let inv = self.inv[axis].clone().expect("active axis has a plan");
        let scale = 1.0 / n as f64;
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for ia in 0..g.n[oa] {
            for ib in 0..g.n[ob] {
                let mut base = [0usize; 3];
                base[oa] = ia;
                base[ob] = ib;
                let start = g.index(base);
                let line = &mut self.line[..n];
                if stride == 1 {
                    line.copy_from_slice(&data[start..start + n]);
                } else {
                    for (j, l) in line.iter_mut().enumerate() {
                        *l = data[start + j * stride];
                    }
                }
                fwd.process_with_scratch(line, &mut self.scratch);
                op(base, line);
                inv.process_with_scratch(line, &mut self.scratch);
                if stride == 1 {
                    for (d, l) in data[start..start + n].iter_mut().zip(line.iter()) {
                        *d = l * scale;
                    }
                } else {
                    for (j, l) in line.iter().enumerate() {
                        data[start + j * stride] = l * scale;
                    }
                }
            }
        }
    }

    /// Displace content along `axis` by `d(base)`: `f(v) ← f(v − d e_axis)`.
    pub fn displace<D>(&mut self, data: &mut [Complex64], axis: usize, d: D)
    where
        D: Fn([usize; 3]) -> f64,
    {
        let g = self.grid;
        let n = g.n[axis];
        let dv = g.dv(axis);
        self.for_lines(data, axis, |base, coef| {
            let shift = d(base);
            if shift == 0.0 {
                return;
            }
            let step = -TWO_PI * shift / (n as f64 * dv);
            let w = Complex64::from_polar(1.0, step);
            let half = n / 2;
            // Phase recurrence, resynchronized every 16 slots.
            let mut ph = Complex64::new(1.0, 0.0);
            for m in 1..half {
                ph = if m % 16 == 0 { Complex64::from_polar(1.0, step * m as f64) } else { ph * w };
                coef[m] *= ph;
                coef[n - m] *= ph.conj();
            }
            if n % 2 == 0 {
                coef[half] *= (std::f64::consts::PI * shift / dv).cos();
            }
        });
    }

    /// Constant translation of the content by `shift`.
    pub fn translate(&mut self, data: &mut [Complex64], shift: Vec3) {
        for (a, &s) in shift.iter().enumerate() {
            if s != 0.0 && self.grid.active(a) {
                self.displace(data, a, |_| s);
            }
        }
    }

    /// Rotate the content by `theta` in the `(p, q)` plane, turning `e_p`
    /// toward `e_q`: `f(v) ← f(R(−θ)v)`.
    pub fn rotate_plane(&mut self, data: &mut [Complex64], p: usize, q: usize, theta: f64) {
        if theta == 0.0 {
            return;
        }
        let g = self.grid;
        assert!(g.active(p) && g.active(q), "rotation plane must be active");
        let mut th = theta.rem_euclid(std::f64::consts::TAU);
        if th > std::f64::consts::PI {
            th -= std::f64::consts::TAU;
        }
        if th.abs() > std::f64::consts::FRAC_PI_2 {
            self.flip_plane(data, p, q);
            th -= std::f64::consts::PI * th.signum();
        }
        if th == 0.0 {
            return;
        }
        let t = (0.5 * th).tan();
        let s = th.sin();
        let cq = g;
        self.displace(data, p, |b| -t * cq.coord(q, b[q]));
        self.displace(data, q, |b| s * cq.coord(p, b[p]));
        self.displace(data, p, |b| -t * cq.coord(q, b[q]));
    }

    /// Rotation by `π` in the `(p, q)` plane, exact on the periodic grid.
    fn flip_plane(&mut self, data: &mut [Complex64], p: usize, q: usize) {
        let g = self.grid;
        let src = data.to_vec();
        for (idx, out) in data.iter_mut().enumerate() {
            let mut i = g.unindex(idx);
            i[p] = (g.n[p] - i[p]) % g.n[p];
            i[q] = (g.n[q] - i[q]) % g.n[q];
            *out = src[g.index(i)];
        }
    }

    /// Apply the content rotation `f(v) ← f(Q⁻¹v)` for a proper rotation `Q`,
    /// factored as `Q = R_x(a)R_y(b)R_z(c)`.
    pub fn rotate(&mut self, data: &mut [Complex64], q: &crate::kinematics::Mat3) {
        let b = q[0][2].clamp(-1.0, 1.0).asin();
        let a = (-q[1][2]).atan2(q[2][2]);
        let c = (-q[0][1]).atan2(q[0][0]);
        if c != 0.0 {
            self.rotate_plane(data, 0, 1, c);
        }
        if b != 0.0 {
            self.rotate_plane(data, 2, 0, b);
        }
        if a != 0.0 {
            self.rotate_plane(data, 1, 2, a);
        }
    }

    /// Multiply every line along `axis` in frequency space by `w(signed m)`.
    pub fn filter_axis<W>(&mut self, data: &mut [Complex64], axis: usize, w: W)
    where
        W: Fn(i64) -> f64,
    {
        let g = self.grid;
        let weights: Vec<f64> = (0..g.n[axis]).map(|m| w(g.signed(axis, m))).collect();
        self.for_lines(data, axis, |_, coef| {
            for (c, wt) in coef.iter_mut().zip(&weights) {
                *c *= *wt;
            }
        });
    }

    /// Spectral derivative `∂f/∂v_axis` (Nyquist mode dropped).
    pub fn derivative(&mut self, data: &mut [Complex64], axis: usize) {
        let g = self.grid;
        if !g.active(axis) {
            data.iter_mut().for_each(|d| *d = Complex64::new(0.0, 0.0));
            return;
        }
        let n = g.n[axis];
        let mult: Vec<Complex64> = (0..n)
            .map(|m| {
                if n % 2 == 0 && m == n / 2 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, TWO_PI * g.eta_of(axis, g.signed(axis, m)))
                }
            })
            .collect();
        self.for_lines(data, axis, |_, coef| {
            for (c, m) in coef.iter_mut().zip(&mult) {
                *c *= m;
            }
        });
    }

    /// Raw forward DFT along `axis` in place (no scaling).
    pub fn dft_axis(&mut self, data: &mut [Complex64], axis: usize, forward: bool) {
        let g = self.grid;
        if !g.active(axis) {
            return;
        }
        let n = g.n[axis];
        let stride = g.stride(axis);
        let plan = if forward { &self.fwd[axis] } else { &self.inv[axis] };
        let plan = plan.clone().expect("active axis has a plan");
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for ia in 0..g.n[oa] {
            for ib in 0..g.n[ob] {
                let mut base = [0usize; 3];
                base[oa] = ia;
                base[ob] = ib;
                let start = g.index(base);
                let line = &mut self.line[..n];
                for (j, l) in line.iter_mut().enumerate() {
                    *l = data[start + j * stride];
                }
                plan.process_with_scratch(line, &mut self.scratch);
                for (j, l) in line.iter().enumerate() {
                    data[start + j * stride] = *l;
                }
            }
        }
    }
}

/// `e^{−2πi q·v}` multiplier over the grid, separable per axis.
pub fn phase_multiply(grid: &VGrid, data: &mut [Complex64], q: Vec3) {
    let ph: Vec<Vec<Complex64>> = (0..3)
        .map(|a| {
            grid.coords(a)
                .iter()
                .map(|&v| Complex64::from_polar(1.0, -TWO_PI * q[a] * v))
                .collect()
        })
        .collect();
    let mut idx = 0;
    for p0 in &ph[0] {
        for p1 in &ph[1] {
            let p01 = p0 * p1;
            for p2 in &ph[2] {
                data[idx] *= p01 * p2;
                idx += 1;
            }
        }
    }
}

/// Trapezoid integral of a block over the grid.
pub fn integrate(grid: &VGrid, data: &[Complex64]) -> Complex64 {
    data.iter().sum::<Complex64>() * grid.cell()
}

/// Trapezoid integral of `e^{2πi q·v} f(v)`: the transform `f̃(−q)`... sampled at `η = −q`.
pub fn weighted_integral(grid: &VGrid, data: &[Complex64], q: Vec3) -> Complex64 {
    let ph: Vec<Vec<Complex64>> = (0..3)
        .map(|a| {
            grid.coords(a)
                .iter()
                .map(|&v| Complex64::from_polar(1.0, TWO_PI * q[a] * v))
                .collect()
        })
        .collect();
    let mut idx = 0;
    let mut acc = Complex64::new(0.0, 0.0);
    for p0 in &ph[0] {
        for p1 in &ph[1] {
            let p01 = p0 * p1;
            for p2 in &ph[2] {
                acc += data[idx] * p01 * p2;
                idx += 1;
            }
        }
    }
    acc * grid.cell()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss_block(g: &VGrid, c: Vec3, w: f64) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); g.len()];
        for (idx, o) in out.iter_mut().enumerate() {
            let i = g.unindex(idx);
            let mut r2 = 0.0;
            for a in 0..3 {
                if g.active(a) {
                    let d = g.coord(a, i[a]) - c[a];
                    r2 += d * d;
                }
            }
            *o = Complex64::new((-r2 / (2.0 * w * w)).exp(), 0.0);
        }
        out
    }

    #[test]
    fn displacement_moves_a_gaussian() {
        let g = VGrid { n: [1, 1, 160], lv: 10.0 };
        let mut ops = VOps::new(g);
        let mut f = gauss_block(&g, [0.0, 0.0, 0.3], 1.0);
        ops.displace(&mut f, 2, |_| 0.45);
        let want = gauss_block(&g, [0.0, 0.0, 0.75], 1.0);
        let err = f.iter().zip(&want).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn plane_rotation_matches_rotated_gaussian() {
        let g = VGrid { n: [96, 96, 1], lv: 12.0 };
        let mut ops = VOps::new(g);
        for &th in &[0.2, 0.9, 1.3, 1.5, -2.6, 3.0] {
            let mut f = gauss_block(&g, [1.0, -0.5, 0.0], 1.0);
            ops.rotate_plane(&mut f, 0, 1, th);
            let (s, c) = f64::sin_cos(th);
            let want = gauss_block(&g, [c * 1.0 - s * -0.5, s * 1.0 + c * -0.5, 0.0], 1.0);
            let err = f.iter().zip(&want).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-10, "theta {th}: {err}");
        }
    }

    #[test]
    fn general_rotation_matches_matrix() {
        let g = VGrid { n: [48, 48, 48], lv: 8.0 };
        let mut ops = VOps::new(g);
        let axis = [0.3, -0.5, 0.81];
        let nrm = crate::kinematics::norm3(axis);
        let u = [axis[0] / nrm, axis[1] / nrm, axis[2] / nrm];
        let th: f64 = 0.7;
        let (s, c) = th.sin_cos();
        let mut q = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { c } else { 0.0 };
                q[i][j] = e + (1.0 - c) * u[i] * u[j];
            }
        }
        q[0][1] -= s * u[2];
        q[0][2] += s * u[1];
        q[1][0] += s * u[2];
        q[1][2] -= s * u[0];
        q[2][0] -= s * u[1];
        q[2][1] += s * u[0];
        let center = [1.0, 0.5, -0.7];
        let mut f = gauss_block(&g, center, 1.0);
        ops.rotate(&mut f, &q);
        let want = gauss_block(&g, crate::kinematics::mat_vec(&q, center), 1.0);
        let err = f.iter().zip(&want).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn mean_is_preserved_by_all_operations() {
        let g = VGrid { n: [16, 16, 32], lv: 6.0 };
        let mut ops = VOps::new(g);
        let mut f = gauss_block(&g, [0.4, 0.1, -0.3], 0.9);
        let m0 = integrate(&g, &f);
        ops.translate(&mut f, [0.2, -0.3, 0.05]);
        ops.rotate_plane(&mut f, 1, 2, 0.4);
        ops.filter_axis(&mut f, 2, |m| if m.abs() > 4 { 0.5 } else { 1.0 });
        assert!((integrate(&g, &f) - m0).norm() < 1e-13);
    }
}
