//! Forward solvers for the time-local equation dρ/dt = −iG(t)ρ and the time-nonlocal
//! equation dρ/dt = −i∫₀^t K(t,s)ρ(s)ds, both on a uniform grid.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::error::{QmeError, Result};
use crate::fixedpoint::{
    anti_time_ordered_exp, cell_moments, KernelSplit, NonlocalKernel, SuperopTrajectory, TimeGrid, TwoTimeKernelFn,
};
use crate::liouville::{devectorize, superop_exp, OperatorVec, Superoperator};
use crate::quad::gauss_legendre;

const MINUS_I: C64 = C64 { re: 0.0, im: -1.0 };

/// Density operators on a grid.
#[derive(Clone, Debug)]
pub struct StateTrajectory {
    grid: TimeGrid,
    states: Vec<OperatorVec>,
    source: String,
}

impl StateTrajectory {
    /// Wraps states computed elsewhere, one per grid node.
    pub fn from_states(grid: TimeGrid, states: Vec<OperatorVec>, source: &str) -> Result<Self> {
        if states.len() != grid.nodes() {
            return Err(QmeError::GridMismatch(format!(
                "{} states for {} nodes",
                states.len(),
                grid.nodes()
            )));
        }
        Ok(Self {
            grid,
            states,
            source: source.to_string(),
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn states(&self) -> &[OperatorVec] {
        &self.states
    }

    pub fn state(&self, k: usize) -> &OperatorVec {
        &self.states[k]
    }

    /// Which generator or kernel produced the states.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// ⟨1|ρ|1⟩
    pub fn occupation(&self, k: usize) -> f64 {
        self.states[k].entry(1, 1).re
    }

    /// Re ⟨0|ρ|1⟩
    pub fn coherence(&self, k: usize) -> f64 {
        self.states[k].entry(0, 1).re
    }

    pub fn max_trace_error(&self) -> f64 {
        self.states.iter().map(|r| (r.trace() - 1.0).norm()).fold(0.0, f64::max)
    }

    pub fn max_hermiticity_error(&self) -> f64 {
        self.states.iter().map(|r| r.max_abs_diff(&r.adjoint())).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &StateTrajectory) -> f64 {
        self.states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// CSV: t, re/im of every ρ_{νν'}, occupation, re ρ_01.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let ser = |e: csv::Error| QmeError::Serialization(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let d = self.states[0].dim();
        let mut header = vec!["t".to_string()];
        for nu in 0..d {
            for nup in 0..d {
                header.push(format!("re_rho{nu}{nup}"));
                header.push(format!("im_rho{nu}{nup}"));
            }
        }
        header.push("occupation".into());
        header.push("coherence_re".into());
        w.write_record(&header).map_err(ser)?;
        for (k, r) in self.states.iter().enumerate() {
            let mut row = vec![self.grid.time(k).to_string()];
            for z in r.data().iter() {
                row.push(z.re.to_string());
                row.push(z.im.to_string());
            }
            row.push(self.occupation(k).to_string());
            row.push(self.coherence(k).to_string());
            w.write_record(&row).map_err(ser)?;
        }
        w.flush().map_err(|e| QmeError::Serialization(e.to_string()))
    }
}

/// A time-dependent generator G(t) for [`solve_timelocal`].
pub trait TimeLocalGenerator: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64) -> Result<Superoperator>;

    /// G at the grid nodes, `None` where it is singular.
    fn node_values(&self, grid: &TimeGrid) -> Result<Vec<Option<Superoperator>>>;

    /// ρ(b) from ρ(a) across singular nodes.
    fn cross(&self, a: f64, b: f64, rho: &OperatorVec) -> Result<OperatorVec>;

    /// Whether `cross` also replaces RK4 on unmasked steps close to a singularity.
    fn cross_near_singular(&self) -> bool {
        false
    }
}

/// G given as a function of time; a `SingularTime` error marks a singular node.
pub struct GeneratorFn<F> {
    dim: usize,
    f: F,
}

impl<F> GeneratorFn<F>
where
    F: Fn(f64) -> Result<Superoperator> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> TimeLocalGenerator for GeneratorFn<F>
where
    F: Fn(f64) -> Result<Superoperator> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64) -> Result<Superoperator> {
        (self.f)(t)
    }

    fn node_values(&self, grid: &TimeGrid) -> Result<Vec<Option<Superoperator>>> {
        grid.times()
            .into_iter()
            .map(|t| match (self.f)(t) {
                Ok(g) if g.is_finite() => Ok(Some(g)),
                Ok(_) | Err(QmeError::SingularTime { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect()
    }

    fn cross(&self, a: f64, b: f64, rho: &OperatorVec) -> Result<OperatorVec> {
        collocation_split(self, a, b, rho, 4)
    }

    fn cross_near_singular(&self) -> bool {
        true
    }
}

impl TimeLocalGenerator for SuperopTrajectory {
    fn dim(&self) -> usize {
        SuperopTrajectory::dim(self)
    }

    fn eval(&self, t: f64) -> Result<Superoperator> {
        self.interpolate(t)
    }

    fn node_values(&self, grid: &TimeGrid) -> Result<Vec<Option<Superoperator>>> {
        if *grid != self.grid() {
            return Err(QmeError::GridMismatch("generator sampled on a different grid".into()));
        }
        Ok(self.values().to_vec())
    }

    /// Inverse of the monodromy-corrected divisor Π(a)Π(b)^{-1}.
    fn cross(&self, a: f64, b: f64, rho: &OperatorVec) -> Result<OperatorVec> {
        let d = anti_time_ordered_exp(self, a, b)?;
        let inv = d.inverse().ok_or(QmeError::SingularNode(a))?;
        Ok(inv.apply(rho))
    }
}

/// Four-stage Gauss collocation step for dρ/dt = −iG(t)ρ from a to b. The stages avoid
/// the endpoints and the midpoint.
pub fn gauss_collocation_step<G>(gen: &G, a: f64, b: f64, rho: &OperatorVec) -> Result<OperatorVec>
where
    G: TimeLocalGenerator + ?Sized,
{
    const S: usize = 4;
    let (x, w) = gauss_legendre(S);
    let c: Vec<f64> = x.iter().map(|xi| 0.5 * (xi + 1.0)).collect();
    let bw: Vec<f64> = w.iter().map(|wi| 0.5 * wi).collect();
    // a_ij = ∫₀^{c_i} ℓ_j, exact with the same rule since ℓ_j is cubic
    let lagrange = |j: usize, t: f64| -> f64 {
        (0..S).filter(|&m| m != j).map(|m| (t - c[m]) / (c[j] - c[m])).product()
    };
    let integral = |j: usize, upper: f64| -> f64 {
        x.iter().zip(&w).map(|(xi, wi)| 0.5 * upper * wi * lagrange(j, 0.5 * upper * (xi + 1.0))).sum()
    };
    let h = b - a;
    let n = rho.data().len();
    let f: Vec<DMatrix<C64>> = c
        .iter()
        .map(|ci| gen.eval(a + ci * h).map(|g| g.matrix() * MINUS_I))
        .collect::<Result<_>>()?;
    let mut sys = DMatrix::<C64>::identity(S * n, S * n);
    let mut rhs = DVector::<C64>::zeros(S * n);
    for i in 0..S {
        for j in 0..S {
            let aij = integral(j, c[i]);
            let block = &f[i] * C64::new(-h * aij, 0.0);
            let mut view = sys.view_mut((i * n, j * n), (n, n));
            view += block;
        }
        rhs.rows_mut(i * n, n).copy_from(&(&f[i] * rho.data()));
    }
    let stages = sys.lu().solve(&rhs).ok_or(QmeError::SingularNode(0.5 * (a + b)))?;
    let mut out = rho.data().clone();
    for j in 0..S {
        out += stages.rows(j * n, n) * C64::new(h * bw[j], 0.0);
    }
    OperatorVec::new(rho.dim(), out.iter().copied().collect())
}

/// Collocation step, halved when a stage falls inside the guard of a singular time.
fn collocation_split<G>(gen: &G, a: f64, b: f64, rho: &OperatorVec, depth: usize) -> Result<OperatorVec>
where
    G: TimeLocalGenerator + ?Sized,
{
    match gauss_collocation_step(gen, a, b, rho) {
        Err(QmeError::SingularTime { .. }) if depth > 0 => {
            let m = 0.5 * (a + b);
            let mid = collocation_split(gen, a, m, rho, depth - 1)?;
            collocation_split(gen, m, b, &mid, depth - 1)
        }
        other => other,
    }
}

fn rk4_step<G>(gen: &G, t: f64, h: f64, rho: &DVector<C64>) -> Result<DVector<C64>>
where
    G: TimeLocalGenerator + ?Sized,
{
    let f = |t: f64, r: &DVector<C64>| -> Result<DVector<C64>> { Ok(gen.eval(t)?.matrix() * r * MINUS_I) };
    let k1 = f(t, rho)?;
    let k2 = f(t + 0.5 * h, &(rho + &k1 * C64::new(0.5 * h, 0.0)))?;
    let k3 = f(t + 0.5 * h, &(rho + &k2 * C64::new(0.5 * h, 0.0)))?;
    let k4 = f(t + h, &(rho + &k3 * C64::new(h, 0.0)))?;
    Ok(rho + (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0))
}

/// Relative second difference of G above which a step counts as close to a singularity.
const NEAR_SINGULAR: f64 = 1e-3;

fn near_singular(values: &[Option<Superoperator>], j: usize) -> bool {
    let (lo, mid, hi) = match j {
        0 => (0, 1, 2),
        _ if j + 1 == values.len() => (j - 2, j - 1, j),
        _ => (j - 1, j, j + 1),
    };
    match (&values[lo], &values[mid], &values[hi]) {
        (Some(a), Some(b), Some(c)) => {
            let second = &(a + c) - &b.scale_re(2.0);
            second.max_abs() > NEAR_SINGULAR * b.max_abs().max(a.max_abs()).max(c.max_abs())
        }
        _ => true,
    }
}

/// Classical fourth-order Runge–Kutta for dρ/dt = −iG(t)ρ. Runs of masked nodes are crossed
/// with [`TimeLocalGenerator::cross`], as are steps close to a singularity when the generator
/// asks for it; states at masked nodes are filled by cubic Hermite interpolation.
pub fn solve_timelocal<G>(gen: &G, rho0: &OperatorVec, grid: &TimeGrid) -> Result<StateTrajectory>
where
    G: TimeLocalGenerator + ?Sized,
{
    if rho0.data().len() != gen.dim() * gen.dim() {
        return Err(QmeError::DimensionMismatch { expected: gen.dim() * gen.dim(), got: rho0.data().len() });
    }
    let values = gen.node_values(grid)?;
    let nodes = grid.nodes();
    if values[0].is_none() {
        return Err(QmeError::SingularNode(0.0));
    }
    if values[nodes - 1].is_none() {
        return Err(QmeError::SingularNode(grid.t_max()));
    }
    let dim = rho0.dim();
    let careful: Vec<bool> = if gen.cross_near_singular() && nodes >= 3 {
        (0..nodes).map(|j| near_singular(&values, j)).collect()
    } else {
        vec![false; nodes]
    };
    let mut states: Vec<Option<DVector<C64>>> = vec![None; nodes];
    states[0] = Some(rho0.data().clone());
    let mut k = 0;
    while k + 1 < nodes {
        let rho = states[k].clone().expect("state at an unmasked node");
        let (t, tn) = (grid.time(k), grid.time(k + 1));
        if values[k + 1].is_some() {
            let next = if careful[k] || careful[k + 1] {
                let r = OperatorVec::new(dim, rho.iter().copied().collect())?;
                gen.cross(t, tn, &r)?.data().clone()
            } else {
                rk4_step(gen, t, tn - t, &rho)?
            };
            states[k + 1] = Some(next);
            k += 1;
            continue;
        }
        let b = (k + 1..nodes).find(|&j| values[j].is_some()).expect("last node unmasked");
        let tb = grid.time(b);
        let rho_a = OperatorVec::new(dim, rho.iter().copied().collect())?;
        let rho_b = gen.cross(t, tb, &rho_a)?;
        let fa = values[k].as_ref().expect("unmasked").matrix() * rho_a.data() * MINUS_I;
        let fb = values[b].as_ref().expect("unmasked").matrix() * rho_b.data() * MINUS_I;
        let h = tb - t;
        for (j, slot) in states.iter_mut().enumerate().take(b).skip(k + 1) {
            let s = (grid.time(j) - t) / h;
            let (h00, h10) = (2.0 * s.powi(3) - 3.0 * s * s + 1.0, s.powi(3) - 2.0 * s * s + s);
            let (h01, h11) = (-2.0 * s.powi(3) + 3.0 * s * s, s.powi(3) - s * s);
            *slot = Some(
                rho_a.data() * C64::new(h00, 0.0)
                    + &fa * C64::new(h10 * h, 0.0)
                    + rho_b.data() * C64::new(h01, 0.0)
                    + &fb * C64::new(h11 * h, 0.0),
            );
        }
        states[b] = Some(rho_b.data().clone());
        k = b;
    }
    let states = states
        .into_iter()
        .map(|s| OperatorVec::new(dim, s.expect("filled").iter().copied().collect()))
        .collect::<Result<_>>()?;
    Ok(StateTrajectory { grid: *grid, states, source: "time-local".into() })
}

/// Volterra solver for dρ/dt = −iK_lρ(t) − i∫₀^t K_n(t,s)ρ(s)ds. The local part enters with
/// weight one at s = t and is propagated exactly by e^{−iΔt K_l}; the memory term uses
/// product integration against the piecewise-linear state (trapezoid in s for two-time
/// kernels) and the trapezoid rule in t, solved implicitly at each step.
pub fn solve_timenonlocal(kernel: &KernelSplit, rho0: &OperatorVec, grid: &TimeGrid) -> Result<StateTrajectory> {
    let dim = kernel.dim();
    let n = dim * dim;
    if rho0.data().len() != n {
        return Err(QmeError::DimensionMismatch { expected: n, got: rho0.data().len() });
    }
    let nodes = grid.nodes();
    let h = grid.dt();
    let prop = superop_exp(kernel.local(), -h)?.into_matrix();

    // W(k, j): weight of ρ_j in M_k = ∫₀^{t_k} K_n(t_k, s) ρ(s) ds
    enum Memory {
        /// By lag ℓ = k − j: `interior[ℓ]` = B_{ℓ−1} + A_ℓ, `last[ℓ]` = B_{ℓ−1}, `first` = A_0.
        Product { first: DMatrix<C64>, interior: Vec<DMatrix<C64>>, last: Vec<DMatrix<C64>> },
        Trapezoid(TwoTimeKernelFn),
    }
    let memory_rule = match kernel.nonlocal() {
        NonlocalKernel::Translational(kn) => {
            let moments = cell_moments(kn, dim, h, nodes - 1)?;
            let zero = DMatrix::<C64>::zeros(n, n);
            let interior = (0..nodes)
                .map(|l| if l == 0 || l >= moments.len() { zero.clone() } else { &moments[l - 1].1 + &moments[l].0 })
                .collect();
            let last = (0..nodes).map(|l| if l == 0 { zero.clone() } else { moments[l - 1].1.clone() }).collect();
            Memory::Product { first: moments[0].0.clone(), interior, last }
        }
        NonlocalKernel::General(f) => Memory::Trapezoid(f.clone()),
    };
    let history_at = |k: usize, states: &[DVector<C64>]| -> DVector<C64> {
        let mut acc = DVector::<C64>::zeros(n);
        match &memory_rule {
            Memory::Product { interior, last, .. } => {
                acc.gemv(C64::new(1.0, 0.0), &last[k], &states[0], C64::new(1.0, 0.0));
                for (j, r) in states.iter().enumerate().skip(1) {
                    acc.gemv(C64::new(1.0, 0.0), &interior[k - j], r, C64::new(1.0, 0.0));
                }
            }
            Memory::Trapezoid(f) => {
                for (j, r) in states.iter().enumerate() {
                    let half = if j == 0 { 0.5 } else { 1.0 };
                    let w = f(grid.time(k), grid.time(j)).into_matrix();
                    acc.gemv(C64::new(half * h, 0.0), &w, r, C64::new(1.0, 0.0));
                }
            }
        }
        acc
    };
    let own_weight = |k: usize| -> DMatrix<C64> {
        match &memory_rule {
            Memory::Product { first, .. } => first.clone(),
            Memory::Trapezoid(f) => f(grid.time(k), grid.time(k)).into_matrix() * C64::new(0.5 * h, 0.0),
        }
    };

    let mut states: Vec<DVector<C64>> = Vec::with_capacity(nodes);
    states.push(rho0.data().clone());
    let mut memory = DVector::<C64>::zeros(n);
    let half = C64::new(0.0, -0.5 * h);
    for k in 0..nodes - 1 {
        let next = k + 1;
        let history = history_at(next, &states);
        let w0 = own_weight(next);
        let lhs = DMatrix::<C64>::identity(n, n) - &w0 * half;
        let rhs = &prop * (&states[k] + &memory * half) + &history * half;
        let rho = lhs.lu().solve(&rhs).ok_or(QmeError::SingularNode(grid.time(next)))?;
        memory = history + &w0 * &rho;
        states.push(rho);
    }
    let states = states
        .into_iter()
        .map(|s| OperatorVec::new(dim, s.iter().copied().collect()))
        .collect::<Result<_>>()?;
    Ok(StateTrajectory { grid: *grid, states, source: "time-nonlocal".into() })
}

/// Density operator from a d×d matrix, for building initial states.
pub fn density_from_matrix(m: &DMatrix<C64>) -> Result<OperatorVec> {
    crate::liouville::vectorize(m)
}

/// ρ as a d×d matrix.
pub fn density_matrix(rho: &OperatorVec) -> DMatrix<C64> {
    devectorize(rho)
}
