//! Kernel functional K̂[X], the stationary transform K̂(X) and the two fixed-point
//! iterations built on them.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QmeError, Result};
use crate::liouville::{spectral_decompose, superop_exp, Superoperator};
use crate::quad::{integrate_vec, integrate_vec_halfline, superop_to_vec, vec_to_superop};

pub type KernelFn = Arc<dyn Fn(f64) -> Superoperator + Send + Sync>;
pub type TwoTimeKernelFn = Arc<dyn Fn(f64, f64) -> Superoperator + Send + Sync>;
pub type KhatFn = Arc<dyn Fn(C64) -> Result<Superoperator> + Send + Sync>;

#[derive(Clone)]
pub enum NonlocalKernel {
    /// K_n(t, s) = K_n(t − s).
    Translational(KernelFn),
    /// Arbitrary K_n(t, s), e.g. for driven systems.
    General(TwoTimeKernelFn),
}

/// K(t, s) = K_l δ̄(t − s) + K_n(t, s).
#[derive(Clone)]
pub struct KernelSplit {
    local: Superoperator,
    nonlocal: NonlocalKernel,
    khat: Option<KhatFn>,
    decay_rate: f64,
}

impl fmt::Debug for KernelSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelSplit")
            .field("local", &self.local)
            .field("translational", &self.is_translational())
            .field("khat", &self.khat.is_some())
            .field("decay_rate", &self.decay_rate)
            .finish()
    }
}

impl KernelSplit {
    /// `decay_rate` is a lower bound on the exponential decay of ‖K_n(t)‖.
    pub fn translational(
        local: Superoperator,
        kn: KernelFn,
        khat: Option<KhatFn>,
        decay_rate: f64,
    ) -> Self {
        Self {
            local,
            nonlocal: NonlocalKernel::Translational(kn),
            khat,
            decay_rate,
        }
    }

    pub fn general(local: Superoperator, kn: TwoTimeKernelFn, decay_rate: f64) -> Self {
        Self {
            local,
            nonlocal: NonlocalKernel::General(kn),
            khat: None,
            decay_rate,
        }
    }

    pub fn dim(&self) -> usize {
        self.local.dim()
    }

    pub fn local(&self) -> &Superoperator {
        &self.local
    }

    pub fn nonlocal(&self) -> &NonlocalKernel {
        &self.nonlocal
    }

    pub fn decay_rate(&self) -> f64 {
        self.decay_rate
    }

    pub fn is_translational(&self) -> bool {
        matches!(self.nonlocal, NonlocalKernel::Translational(_))
    }

    pub fn has_khat(&self) -> bool {
        self.khat.is_some()
    }

    /// K_n(t, s).
    pub fn kernel(&self, t: f64, s: f64) -> Superoperator {
        match &self.nonlocal {
            NonlocalKernel::Translational(f) => f(t - s),
            NonlocalKernel::General(f) => f(t, s),
        }
    }

    /// K̂(E), from the closed form when supplied and by quadrature otherwise.
    pub fn khat(&self, e: C64) -> Result<Superoperator> {
        match &self.khat {
            Some(f) => f(e),
            None => khat_of_superop(self, &Superoperator::scalar(self.dim(), e), StationaryRoute::Quadrature),
        }
    }
}

/// Uniform grid t_k = kΔt, k = 0..nodes−1, with t_{nodes−1} = t_max.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t_max: f64,
    nodes: usize,
}

impl TimeGrid {
    pub const DEFAULT_NODES: usize = 2000;

    pub fn new(t_max: f64, nodes: usize) -> Result<Self> {
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(QmeError::GridMismatch(format!("t_max must be positive, got {t_max}")));
        }
        if nodes < 2 {
            return Err(QmeError::GridMismatch(format!("need at least 2 nodes, got {nodes}")));
        }
        Ok(Self { t_max, nodes })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn dt(&self) -> f64 {
        self.t_max / (self.nodes - 1) as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k + 1 == self.nodes {
            self.t_max
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes).map(|k| self.time(k)).collect()
    }

    /// Index of the node at t, accepting a relative offset of 1e−9 of a step.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = t / self.dt();
        let k = x.round();
        if !(k >= 0.0 && k < self.nodes as f64) || (x - k).abs() > 1e-9 * x.abs().max(1.0) {
            return Err(QmeError::GridMismatch(format!("t = {t} is not a grid node")));
        }
        Ok(k as usize)
    }
}

/// Superoperator samples on a uniform grid. Nodes at which the function is singular
/// are masked (`None`).
#[derive(Clone, Debug)]
pub struct SuperopTrajectory {
    grid: TimeGrid,
    dim: usize,
    values: Vec<Option<Superoperator>>,
}

impl SuperopTrajectory {
    pub fn constant(grid: TimeGrid, x: &Superoperator) -> Self {
        Self {
            grid,
            dim: x.dim(),
            values: vec![Some(x.clone()); grid.nodes()],
        }
    }

    pub fn from_values(
        grid: TimeGrid,
        dim: usize,
        values: Vec<Option<Superoperator>>,
    ) -> Result<Self> {
        if values.len() != grid.nodes() {
            return Err(QmeError::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.nodes()
            )));
        }
        for v in values.iter().flatten() {
            if v.dim() != dim {
                return Err(QmeError::DimensionMismatch { expected: dim, got: v.dim() });
            }
            if !v.is_finite() {
                return Err(QmeError::NonFinite("trajectory value"));
            }
        }
        Ok(Self { grid, dim, values })
    }

    /// Samples f on the grid; a `SingularTime` error masks the node, other errors propagate.
    pub fn from_fn(
        grid: TimeGrid,
        dim: usize,
        f: impl Fn(f64) -> Result<Superoperator> + Sync,
    ) -> Result<Self> {
        let values = (0..grid.nodes())
            .into_par_iter()
            .map(|k| match f(grid.time(k)) {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                Ok(_) | Err(QmeError::SingularTime { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(grid, dim, values)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[Option<Superoperator>] {
        &self.values
    }

    pub fn get(&self, k: usize) -> Option<&Superoperator> {
        self.values.get(k).and_then(|v| v.as_ref())
    }

    pub fn is_masked(&self, k: usize) -> bool {
        self.values[k].is_none()
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&k| self.is_masked(k)).collect()
    }

    pub fn at_time(&self, t: f64) -> Result<&Superoperator> {
        let k = self.grid.index_of(t)?;
        self.get(k).ok_or(QmeError::SingularNode(t))
    }

    /// Max entry difference over nodes unmasked in both trajectories.
    pub fn max_abs_diff(&self, other: &SuperopTrajectory) -> Result<f64> {
        if self.grid != other.grid {
            return Err(QmeError::GridMismatch("trajectories on different grids".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .filter_map(|(a, b)| Some(a.as_ref()?.max_abs_diff(b.as_ref()?)))
            .fold(0.0, f64::max))
    }

    pub fn map(&self, f: impl Fn(&Superoperator) -> Superoperator) -> Self {
        Self {
            grid: self.grid,
            dim: self.dim,
            values: self.values.iter().map(|v| v.as_ref().map(&f)).collect(),
        }
    }

    /// Cubic Lagrange interpolation through four unmasked nodes around t, or linear
    /// interpolation when only the enclosing cell is unmasked.
    pub fn interpolate(&self, t: f64) -> Result<Superoperator> {
        let n = self.grid.nodes();
        let dt = self.grid.dt();
        if !(t >= -1e-12 * dt && t <= self.grid.t_max() * (1.0 + 1e-12)) {
            return Err(QmeError::GridMismatch(format!("t = {t} outside the grid")));
        }
        let j = ((t / dt).floor() as usize).min(n - 2);
        if n >= 4 {
            for start in [j as isize - 1, j as isize, j as isize - 2] {
                if start < 0 || start as usize + 3 >= n {
                    continue;
                }
                let start = start as usize;
                if (start..start + 4).any(|k| self.is_masked(k)) {
                    continue;
                }
                let mut out = Superoperator::zeros(self.dim);
                for a in start..start + 4 {
                    let mut w = 1.0;
                    for b in start..start + 4 {
                        if a != b {
                            w *= (t - self.grid.time(b)) / (self.grid.time(a) - self.grid.time(b));
                        }
                    }
                    out += &self.values[a].as_ref().expect("unmasked").scale_re(w);
                }
                return Ok(out);
            }
        }
        match (self.get(j), self.get(j + 1)) {
            (Some(a), Some(b)) => {
                let u = (t - self.grid.time(j)) / dt;
                Ok(&a.scale_re(1.0 - u) + &b.scale_re(u))
            }
            _ => Err(QmeError::SingularNode(t)),
        }
    }
}

/// Convergence record of an iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iters: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub oscillating: bool,
}

impl IterationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| QmeError::Serialization(e.to_string()))
    }

    fn push(&mut self, residual: f64) {
        self.iters += 1;
        self.residuals.push(residual);
        let n = self.residuals.len();
        if n > OSCILLATION_WINDOW {
            let old = self.residuals[n - 1 - OSCILLATION_WINDOW];
            if residual.is_finite() && residual < OSCILLATION_BOUND && residual >= old {
                self.oscillating = true;
            }
        }
    }
}

const OSCILLATION_WINDOW: usize = 10;
const OSCILLATION_BOUND: f64 = 1e8;
const TRANSIENT_TOL: f64 = 1e-10;

/// Unmasked nodes of a trajectory together with the one-step factors
/// exp(i(t_b − t_a)(X_a + X_b)/2) between consecutive unmasked nodes a < b.
struct Segments {
    unmasked: Vec<usize>,
    position: Vec<Option<usize>>,
    factors: Vec<DMatrix<C64>>,
    /// Masked node → (left neighbour, weight, right neighbour, weight).
    interp: Vec<Option<(usize, f64, usize, f64)>>,
}

impl Segments {
    fn new(x: &SuperopTrajectory, upto: usize) -> Result<Self> {
        let grid = x.grid();
        let unmasked: Vec<usize> = (0..=upto).filter(|&k| !x.is_masked(k)).collect();
        let mut position = vec![None; upto + 1];
        for (i, &u) in unmasked.iter().enumerate() {
            position[u] = Some(i);
        }
        let factors = unmasked
            .par_windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let (xa, xb) = (x.get(a).expect("unmasked"), x.get(b).expect("unmasked"));
                let (ta, tb) = (grid.time(a), grid.time(b));
                if b == a + 1 {
                    return superop_exp(&(xa + xb).scale_re(0.5), tb - ta).map(Superoperator::into_matrix);
                }
                // Masked run between a and b, centred on t_m: X ≈ R/(τ − t_m) + X_reg.
                // The symmetric principal value of the pole term vanishes, leaving the
                // monodromy e^{πR}.
                let tm = 0.5 * (ta + tb);
                let r = (&xa.scale_re(ta - tm) + &xb.scale_re(tb - tm)).scale_re(0.5);
                let reg = (&(xa - &r.scale_re(1.0 / (ta - tm))) + &(xb - &r.scale_re(1.0 / (tb - tm))))
                    .scale_re(0.5);
                let y = &reg.scale_re(tb - ta) + &r.scale(C64::new(0.0, -std::f64::consts::PI));
                superop_exp(&y, 1.0).map(Superoperator::into_matrix)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut interp = vec![None; upto + 1];
        for j in 0..=upto {
            if position[j].is_some() {
                continue;
            }
            let left = unmasked.iter().rev().find(|&&u| u < j).copied();
            let right = unmasked.iter().find(|&&u| u > j).copied();
            if let (Some(a), Some(b)) = (left, right) {
                let (ta, tb, tj) = (grid.time(a), grid.time(b), grid.time(j));
                interp[j] = Some((a, (tb - tj) / (tb - ta), b, (tj - ta) / (tb - ta)));
            }
        }
        Ok(Self {
            unmasked,
            position,
            factors,
            interp,
        })
    }
}

fn check_dims(k: &KernelSplit, x: &SuperopTrajectory) -> Result<()> {
    if k.dim() != x.dim() {
        return Err(QmeError::DimensionMismatch { expected: k.dim(), got: x.dim() });
    }
    Ok(())
}

/// T→ exp(i∫_s^t X): later steps multiply from the right, so D(s,t) = D(s,r) D(r,t).
pub fn anti_time_ordered_exp(x: &SuperopTrajectory, s: f64, t: f64) -> Result<Superoperator> {
    let grid = x.grid();
    let (ks, kt) = (grid.index_of(s)?, grid.index_of(t)?);
    if ks > kt {
        return Err(QmeError::GridMismatch(format!("s = {s} exceeds t = {t}")));
    }
    for (k, tk) in [(ks, s), (kt, t)] {
        if x.is_masked(k) {
            return Err(QmeError::SingularNode(tk));
        }
    }
    let segs = Segments::new(x, kt)?;
    let first = segs.position[ks].expect("unmasked");
    let n = x.dim() * x.dim();
    let mut d = DMatrix::<C64>::identity(n, n);
    for f in &segs.factors[first..] {
        d = &d * f;
    }
    Ok(Superoperator::from_matrix_unchecked(x.dim(), d))
}

/// Cell moments (A_m, B_m), m = 0..count, of a translational kernel:
/// A_m = ∫₀^Δ K_n(mΔ + v)(1 − v/Δ) dv, B_m = ∫₀^Δ K_n(mΔ + v)(v/Δ) dv.
pub(crate) fn cell_moments(
    kn: &KernelFn,
    dim: usize,
    dt: f64,
    count: usize,
) -> Result<Vec<(DMatrix<C64>, DMatrix<C64>)>> {
    let n = dim * dim;
    (0..count)
        .into_par_iter()
        .map(|m| {
            let lo = m as f64 * dt;
            let v = integrate_vec(
                |v| {
                    let kv = superop_to_vec(&kn(lo + v));
                    let u = v / dt;
                    let mut out = Vec::with_capacity(2 * n * n);
                    out.extend(kv.iter().map(|z| z * (1.0 - u)));
                    out.extend(kv.iter().map(|z| z * u));
                    out
                },
                0.0,
                dt,
                1e-16,
                1e-13,
            )?;
            let (a, b) = v.split_at(n * n);
            Ok((DMatrix::from_column_slice(n, n, a), DMatrix::from_column_slice(n, n, b)))
        })
        .collect()
}

/// Quadrature weights of ∫₀^{t_k} K_n(t_k − s) D(s) ds for D linear on each cell.
enum Weights {
    /// Node weights by lag ℓ = k − j: `interior[ℓ]` = B_{ℓ−1} + A_ℓ, `first` = A_0,
    /// `last[ℓ]` = B_{ℓ−1}, with cell moments
    /// A_m = ∫₀^Δ K_n(mΔ + v)(1 − v/Δ) dv and B_m = ∫₀^Δ K_n(mΔ + v)(v/Δ) dv.
    Product {
        first: DMatrix<C64>,
        interior: Vec<DMatrix<C64>>,
        last: Vec<DMatrix<C64>>,
    },
    /// Trapezoid in s for non-translational kernels.
    Trapezoid(TwoTimeKernelFn),
}

impl Weights {
    fn new(k: &KernelSplit, grid: TimeGrid, upto: usize) -> Result<Self> {
        match &k.nonlocal {
            NonlocalKernel::General(f) => Ok(Weights::Trapezoid(f.clone())),
            NonlocalKernel::Translational(kn) => {
                let moments = cell_moments(kn, k.dim(), grid.dt(), upto.max(1))?;
                let n = k.dim() * k.dim();
                let first = moments[0].0.clone();
                let interior = (0..moments.len())
                    .map(|l| {
                        if l == 0 {
                            DMatrix::zeros(n, n)
                        } else {
                            &moments[l - 1].1 + &moments[l].0
                        }
                    })
                    .collect();
                let last = (0..=moments.len())
                    .map(|l| {
                        if l == 0 {
                            DMatrix::zeros(n, n)
                        } else {
                            moments[l - 1].1.clone()
                        }
                    })
                    .collect();
                Ok(Weights::Product { first, interior, last })
            }
        }
    }

    /// out += α · W(k, j)
    fn add(&self, grid: TimeGrid, k: usize, j: usize, alpha: f64, out: &mut DMatrix<C64>) {
        let alpha = C64::new(alpha, 0.0);
        match self {
            Weights::Product { first, interior, last } => {
                let l = k - j;
                let w = if l == 0 {
                    first
                } else if j == 0 {
                    &last[l]
                } else {
                    &interior[l]
                };
                *out += w * alpha;
            }
            Weights::Trapezoid(f) => {
                let half = if j == 0 || j == k { 0.5 } else { 1.0 };
                let w = f(grid.time(k), grid.time(j));
                *out += w.matrix() * (alpha * half * grid.dt());
            }
        }
    }
}

/// K_l + ∫₀^{t_k} K_n(t_k, s) D(s, t_k) ds at an unmasked node k.
fn functional_at(
    kernel: &KernelSplit,
    x: &SuperopTrajectory,
    segs: &Segments,
    weights: &Weights,
    k: usize,
) -> Result<Superoperator> {
    let grid = x.grid();
    let local = kernel.local.matrix();
    if k == 0 {
        return Ok(kernel.local.clone());
    }
    let p = segs.position[k].ok_or(QmeError::SingularNode(grid.time(k)))?;
    let n = local.nrows();
    let mut coef = DMatrix::<C64>::zeros(n, n);
    // Coefficient of D(u_i, t_k): its own weight plus shares of masked neighbours.
    let fill = |i: usize, coef: &mut DMatrix<C64>| -> Result<()> {
        coef.fill(C64::new(0.0, 0.0));
        let u = segs.unmasked[i];
        weights.add(grid, k, u, 1.0, coef);
        let lo = if i == 0 { 0 } else { segs.unmasked[i - 1] + 1 };
        let hi = if i == p { u } else { segs.unmasked[i + 1] };
        for j in lo..hi {
            if j == u {
                continue;
            }
            match segs.interp[j] {
                Some((a, wa, b, wb)) => {
                    let w = if a == u { wa } else if b == u { wb } else { 0.0 };
                    weights.add(grid, k, j, w, coef);
                }
                None => return Err(QmeError::SingularNode(grid.time(j))),
            }
        }
        Ok(())
    };
    let mut d = DMatrix::<C64>::identity(n, n);
    let mut tmp = DMatrix::<C64>::zeros(n, n);
    fill(p, &mut coef)?;
    let mut acc = coef.clone();
    for i in (0..p).rev() {
        tmp.gemm(C64::new(1.0, 0.0), &segs.factors[i], &d, C64::new(0.0, 0.0));
        std::mem::swap(&mut d, &mut tmp);
        fill(i, &mut coef)?;
        acc.gemm(C64::new(1.0, 0.0), &coef, &d, C64::new(1.0, 0.0));
    }
    Ok(Superoperator::from_matrix_unchecked(kernel.dim(), local + acc))
}

/// K̂[X](t) = K_l + ∫₀^t ds K_n(t, s) T→e^{i∫_s^t X}.
pub fn khat_functional(kernel: &KernelSplit, x: &SuperopTrajectory, t: f64) -> Result<Superoperator> {
    check_dims(kernel, x)?;
    let k = x.grid().index_of(t)?;
    let segs = Segments::new(x, k)?;
    let weights = Weights::new(kernel, x.grid(), k)?;
    functional_at(kernel, x, &segs, &weights, k)
}

/// K̂[X] at every grid node; nodes masked in X stay masked.
pub fn khat_functional_trajectory(
    kernel: &KernelSplit,
    x: &SuperopTrajectory,
) -> Result<SuperopTrajectory> {
    check_dims(kernel, x)?;
    let grid = x.grid();
    let last = grid.nodes() - 1;
    let segs = Segments::new(x, last)?;
    let weights = Weights::new(kernel, grid, last)?;
    let values = (0..grid.nodes())
        .into_par_iter()
        .map(|k| {
            if x.is_masked(k) {
                Ok(None)
            } else {
                functional_at(kernel, x, &segs, &weights, k).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    SuperopTrajectory::from_values(grid, kernel.dim(), values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StationaryRoute {
    /// Σ_i K̂(x_i) |x_i⟩⟩⟨⟨x̄_i| from the eigen-decomposition of X.
    Spectral,
    /// K_l + ∫₀^∞ ds K_n(s) e^{isX}.
    Quadrature,
}

/// K̂(X) = K_l + ∫₀^∞ ds K_n(s) e^{isX}.
pub fn khat_of_superop(
    kernel: &KernelSplit,
    x: &Superoperator,
    route: StationaryRoute,
) -> Result<Superoperator> {
    if x.dim() != kernel.dim() {
        return Err(QmeError::DimensionMismatch { expected: kernel.dim(), got: x.dim() });
    }
    if !x.is_finite() {
        return Err(QmeError::NonFinite("stationary argument"));
    }
    match (route, &kernel.khat) {
        (StationaryRoute::Spectral, Some(f)) => {
            let decomp = spectral_decompose(x, 1e-9)?;
            decomp.apply_superop_function(|g| f(g))
        }
        _ => khat_quadrature(kernel, x),
    }
}

fn khat_quadrature(kernel: &KernelSplit, x: &Superoperator) -> Result<Superoperator> {
    let kn = match &kernel.nonlocal {
        NonlocalKernel::Translational(f) => f.clone(),
        NonlocalKernel::General(_) => {
            return Err(QmeError::WrongRegime("stationary transform needs a time-translational kernel"))
        }
    };
    // |e^{isX}| grows at most like e^{s·max(−Im x_i)}.
    let growth = x.eigenvalues().iter().map(|g| -g.im).fold(f64::NEG_INFINITY, f64::max);
    let net = kernel.decay_rate - growth.max(0.0);
    if !(net > 1e-9 * kernel.decay_rate) {
        return Err(QmeError::DivergentQuadrature(format!(
            "e^{{isX}} grows at rate {growth:.4} against kernel decay {:.4}",
            kernel.decay_rate
        )));
    }
    let panel = (2.0 / net).min(5.0 / kernel.decay_rate.max(1e-12));
    let dim = kernel.dim();
    let v = integrate_vec_halfline(
        |s| {
            let e = superop_exp(x, s).map(Superoperator::into_matrix);
            match e {
                Ok(e) => (kn(s).matrix() * e).iter().copied().collect(),
                Err(_) => vec![C64::new(f64::NAN, 0.0); dim.pow(4)],
            }
        },
        0.0,
        panel,
        1e-14,
        4000,
    )?;
    if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(QmeError::DivergentQuadrature("non-finite integrand".into()));
    }
    Ok(kernel.local() + &vec_to_superop(dim, v))
}

/// X_{n+1} = K̂(X_n) until ‖X_{n+1} − X_n‖_max < tol.
pub fn stationary_iterate(
    kernel: &KernelSplit,
    x0: &Superoperator,
    tol: f64,
    max_iter: usize,
) -> Result<(Superoperator, IterationReport)> {
    if !x0.is_finite() {
        return Err(QmeError::NonFinite("initial superoperator"));
    }
    let mut report = IterationReport::default();
    let mut x = x0.clone();
    for _ in 0..max_iter {
        let next = khat_of_superop(kernel, &x, StationaryRoute::Spectral)?;
        let residual = next.max_abs_diff(&x);
        report.push(residual);
        x = next;
        if residual < tol {
            report.converged = true;
            report.oscillating = false;
            return Ok((x, report));
        }
    }
    Err(QmeError::MaxIterExceeded {
        report,
        last: Box::new(x),
    })
}

/// G^{(n+1)} = K̂[G^{(n)}] for n = 0..n_iters−1. A numerical failure stops the sweep
/// early; the report then holds fewer entries and `converged` is false.
pub fn transient_iterate(
    kernel: &KernelSplit,
    g0: &SuperopTrajectory,
    n_iters: usize,
) -> Result<(Vec<SuperopTrajectory>, IterationReport)> {
    check_dims(kernel, g0)?;
    let mut report = IterationReport::default();
    let mut iterates: Vec<SuperopTrajectory> = Vec::with_capacity(n_iters);
    let grid = g0.grid();
    let last = grid.nodes() - 1;
    let weights = Weights::new(kernel, grid, last)?;
    for _ in 0..n_iters {
        let prev = iterates.last().unwrap_or(g0);
        let next = Segments::new(prev, last).and_then(|segs| {
            let values = (0..grid.nodes())
                .into_par_iter()
                .map(|k| {
                    if prev.is_masked(k) {
                        Ok(None)
                    } else {
                        functional_at(kernel, prev, &segs, &weights, k).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            SuperopTrajectory::from_values(grid, kernel.dim(), values)
        });
        let next = match next {
            Ok(n) => n,
            Err(_) => break,
        };
        let residual = next.max_abs_diff(prev)?;
        report.push(residual);
        iterates.push(next);
    }
    report.converged = report.residuals.last().is_some_and(|r| *r < TRANSIENT_TOL);
    if report.converged {
        report.oscillating = false;
    }
    Ok((iterates, report))
}

/// Entries uniform in [−1, 1]² then projected so that −iX preserves hermicity.
pub fn random_superoperator<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Superoperator {
    let n = dim * dim;
    let m = DMatrix::from_fn(n, n, |_, _| {
        C64::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0))
    });
    Superoperator::from_matrix_unchecked(dim, m).hermicity_projection()
}

/// Random hermicity-preserving X with vanishing trace row.
pub fn random_trace_preserving<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Superoperator {
    let mut x = random_superoperator(dim, rng);
    let n = dim * dim;
    let m = x.matrix_mut();
    for c in 0..n {
        let mean = (0..dim).map(|v| m[(v * dim + v, c)]).sum::<C64>() / dim as f64;
        for v in 0..dim {
            m[(v * dim + v, c)] -= mean;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville::{check_hermicity_preserving, trace_row_error};
    use crate::model_jc::*;
    use crate::model_rlm::*;
    use crate::quad::integrate_superop;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn jc_over() -> JcParams {
        JcParams::from_ratio(0.495, 1.0).unwrap()
    }

    #[test]
    fn grid_indexing() {
        let g = TimeGrid::new(10.0, 2001).unwrap();
        assert_abs_diff_eq!(g.dt(), 0.005, epsilon = 1e-15);
        assert_eq!(g.index_of(2.5).unwrap(), 500);
        assert_eq!(g.time(2000), 10.0);
        assert!(g.index_of(2.5025).is_err());
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 5).is_err());
    }

    #[test]
    fn report_json_fields() {
        let r = IterationReport {
            iters: 2,
            residuals: vec![0.5, 0.25],
            converged: true,
            oscillating: false,
        };
        let s = r.to_json();
        assert_eq!(s, r#"{"iters":2,"residuals":[0.5,0.25],"converged":true,"oscillating":false}"#);
        assert_eq!(IterationReport::from_json(&s).unwrap(), r);
    }

    #[test]
    fn zero_kernel_gives_local_part() {
        let p = jc_over();
        let local = jc_kernel_local(&p);
        let k = KernelSplit::translational(local.clone(), Arc::new(|_| Superoperator::zeros(2)), None, 1.0);
        let grid = TimeGrid::new(2.0, 41).unwrap();
        let x = SuperopTrajectory::constant(grid, &Superoperator::zeros(2));
        let out = khat_functional_trajectory(&k, &x).unwrap();
        for v in out.values() {
            assert!(v.as_ref().unwrap().max_abs_diff(&local) < 1e-15);
        }
    }

    #[test]
    fn zero_argument_gives_cumulative_kernel() {
        let p = jc_over();
        let k = jc_kernel_split(&p);
        let grid = TimeGrid::new(3.0, 61).unwrap();
        let x = SuperopTrajectory::constant(grid, &Superoperator::zeros(2));
        for t in [0.0, 0.05, 1.0, 3.0] {
            let got = khat_functional(&k, &x, t).unwrap();
            let cum = integrate_superop(2, |s| jc_kernel_nonlocal(s, &p), 0.0, t, 1e-14).unwrap();
            assert!(got.max_abs_diff(&(k.local() + &cum)) < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn constant_argument_exponential_is_exact() {
        let p = jc_over();
        let x = jc_kernel_hat(C64::new(0.0, 0.0), &p).unwrap();
        let grid = TimeGrid::new(4.0, 9).unwrap();
        let traj = SuperopTrajectory::constant(grid, &x);
        let d = anti_time_ordered_exp(&traj, 0.5, 3.5).unwrap();
        assert!(d.max_abs_diff(&superop_exp(&x, 3.0).unwrap()) < 1e-12);
        assert!(anti_time_ordered_exp(&traj, 1.0, 1.0).unwrap().max_abs_diff(&Superoperator::identity(2)) == 0.0);
        assert!(anti_time_ordered_exp(&traj, 2.0, 1.0).is_err());
        assert!(anti_time_ordered_exp(&traj, 0.3, 1.0).is_err());
    }

    #[test]
    fn divisor_composition() {
        let p = jc_over();
        let grid = TimeGrid::new(4.0, 81).unwrap();
        let g = SuperopTrajectory::from_fn(grid, 2, |t| jc_generator(t, &p)).unwrap();
        let full = anti_time_ordered_exp(&g, 0.5, 3.0).unwrap();
        let split = &anti_time_ordered_exp(&g, 0.5, 1.75).unwrap() * &anti_time_ordered_exp(&g, 1.75, 3.0).unwrap();
        assert!(full.max_abs_diff(&split) < 1e-13);
    }

    /// D(s,t) against Π(s)Π(t)^{-1} from the closed-form propagator.
    fn divisor_error(nodes: usize) -> f64 {
        let p = jc_over();
        let grid = TimeGrid::new(4.0, nodes).unwrap();
        let g = SuperopTrajectory::from_fn(grid, 2, |t| jc_generator(t, &p)).unwrap();
        let (s, t) = (1.0, 3.0);
        let exact = &jc_propagator(s, &p) * &jc_propagator(t, &p).inverse().unwrap();
        anti_time_ordered_exp(&g, s, t).unwrap().max_abs_diff(&exact)
    }

    #[test]
    fn divisor_matches_closed_form_at_second_order() {
        let (e1, e2, e3) = (divisor_error(41), divisor_error(81), divisor_error(161));
        assert!(e3 < 1e-4, "error {e3}");
        assert!(e1 / e2 >= 3.5 && e2 / e3 >= 3.5, "ratios {} {}", e1 / e2, e2 / e3);
    }

    #[test]
    fn masked_nodes_are_crossed() {
        let p = JcParams::from_ratio(13.0, 20.0).unwrap();
        let t1 = p.singular_time(1).unwrap();
        // the grid hits t_1 exactly, so that node is masked
        let nodes = 401;
        let grid = TimeGrid::new(t1 * 2.0, nodes).unwrap();
        let g = SuperopTrajectory::from_fn(grid, 2, |t| jc_generator(t, &p)).unwrap();
        assert_eq!(g.masked(), vec![200]);
        let (s, t) = (grid.time(150), grid.time(250));
        let exact = &jc_propagator(s, &p) * &jc_propagator(t, &p).inverse().unwrap();
        let got = anti_time_ordered_exp(&g, s, t).unwrap();
        assert!(got.is_finite());
        assert!(got.max_abs_diff(&exact) < 1e-3 * exact.max_abs(), "{}", got.max_abs_diff(&exact));
    }

    #[test]
    fn interpolation_reproduces_cubics() {
        let grid = TimeGrid::new(1.0, 11).unwrap();
        let f = |t: f64| Superoperator::scalar(2, C64::new(t * t * t - t, 2.0 * t));
        let traj = SuperopTrajectory::from_fn(grid, 2, |t| Ok(f(t))).unwrap();
        for t in [0.0, 0.013, 0.37, 0.95, 1.0] {
            assert!(traj.interpolate(t).unwrap().max_abs_diff(&f(t)) < 1e-13);
        }
    }

    #[test]
    fn rlm_terminates_after_one_step() {
        let p = RlmParams::from_detuning(2.0 * std::f64::consts::PI, 0.1 / (2.0 * std::f64::consts::PI)).unwrap();
        let k = rlm_kernel_split(&p);
        let grid = TimeGrid::new(10.0, 401).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_trace_preserving(2, &mut rng);
        let traj = SuperopTrajectory::constant(grid, &x);
        let out = khat_functional_trajectory(&k, &traj).unwrap();
        for kk in (0..grid.nodes()).step_by(20) {
            let exact = rlm_generator(grid.time(kk), &p);
            assert!(out.get(kk).unwrap().max_abs_diff(&exact) < 1e-8, "node {kk}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn functional_trace_row_and_hermicity(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = jc_over();
            let k = jc_kernel_split(&p);
            let grid = TimeGrid::new(1.0, 21).unwrap();
            let xs: Vec<_> = (0..grid.nodes()).map(|_| Some(random_superoperator(2, &mut rng).scale_re(0.5))).collect();
            let x = SuperopTrajectory::from_values(grid, 2, xs).unwrap();
            let out = khat_functional_trajectory(&k, &x).unwrap();
            for v in out.values() {
                let v = v.as_ref().unwrap();
                prop_assert!(trace_row_error(v) < 1e-12);
                prop_assert!(check_hermicity_preserving(v, 1e-12));
            }
        }
    }

    #[test]
    fn scalar_argument_is_laplace_transform() {
        let p = jc_over();
        let k = jc_kernel_split(&p);
        let e = C64::new(0.4, 0.3);
        let x = Superoperator::scalar(2, e);
        let direct = jc_kernel_hat(e, &p).unwrap();
        for route in [StationaryRoute::Spectral, StationaryRoute::Quadrature] {
            let got = khat_of_superop(&k, &x, route).unwrap();
            assert!(got.max_abs_diff(&direct) < 1e-9, "{route:?}");
        }
    }

    #[test]
    fn stationary_fixed_points_are_reproduced() {
        let p = jc_over();
        let k = jc_kernel_split(&p);
        let ginf = jc_g_infty(&p).unwrap();
        for route in [StationaryRoute::Spectral, StationaryRoute::Quadrature] {
            assert!(khat_of_superop(&k, &ginf, route).unwrap().max_abs_diff(&ginf) < 1e-8, "{route:?}");
        }
        let pr = RlmParams::from_detuning(2.0, 0.3).unwrap();
        let kr = rlm_kernel_split(&pr);
        let k0 = rlm_kernel_hat(C64::new(0.0, 0.0), &pr).unwrap();
        assert!(khat_of_superop(&kr, &k0, StationaryRoute::Spectral).unwrap().max_abs_diff(&k0) < 1e-10);
    }

    #[test]
    fn routes_agree_on_random_arguments() {
        let p = jc_over();
        let k = jc_kernel_split(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for _ in 0..10 {
            let x = random_superoperator(2, &mut rng).scale_re(0.2);
            let Ok(q) = khat_of_superop(&k, &x, StationaryRoute::Quadrature) else { continue };
            let s = khat_of_superop(&k, &x, StationaryRoute::Spectral).unwrap();
            assert!(q.max_abs_diff(&s) < 1e-8);
            checked += 1;
        }
        assert!(checked >= 5);
    }

    #[test]
    fn quadrature_route_rejects_growth() {
        let p = jc_over();
        let k = jc_kernel_split(&p);
        let x = Superoperator::scalar(2, C64::new(0.0, -3.0));
        assert!(matches!(
            khat_of_superop(&k, &x, StationaryRoute::Quadrature),
            Err(QmeError::DivergentQuadrature(_))
        ));
    }

    #[test]
    fn overdamped_stationary_iteration_converges() {
        let p = jc_over();
        let k = jc_kernel_split(&p);
        let k0 = k.khat(C64::new(0.0, 0.0)).unwrap();
        let (g, report) = stationary_iterate(&k, &k0, 1e-10, 5000).unwrap();
        assert!(report.converged && !report.oscillating);
        assert_eq!(report.residuals.len(), report.iters);
        assert!(g.max_abs_diff(&jc_g_infty(&p).unwrap()) < 1e-8);
        assert!(khat_of_superop(&k, &g, StationaryRoute::Spectral).unwrap().max_abs_diff(&g) < 1e-10);
    }

    #[test]
    fn iterates_are_trace_preserving_from_any_start() {
        let p = jc_over();
        let k = jc_kernel_split(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random_superoperator(2, &mut rng);
        assert!(trace_row_error(&x0) > 1e-3);
        let x1 = khat_of_superop(&k, &x0, StationaryRoute::Spectral).unwrap();
        assert!(trace_row_error(&x1) < 1e-12);
    }

    #[test]
    fn underdamped_occupation_converges_and_coherence_oscillates() {
        let p = JcParams::from_ratio(13.0, 20.0).unwrap();
        let k = jc_kernel_split(&p);
        let k0 = k.khat(C64::new(0.0, 0.0)).unwrap();
        // the occupation map contracts with multiplier (γ − Γ)/Γ, so 1e−8 takes ~230 steps
        let err = stationary_iterate(&k, &k0, 1e-10, 400).unwrap_err();
        let QmeError::MaxIterExceeded { report, last } = err else { panic!("unexpected error") };
        assert!(report.oscillating);
        let r = &report.residuals;
        let onset = (10..r.len()).find(|&n| r[n] >= r[n - 10]).unwrap();
        assert!(onset < 200, "onset {onset}");
        let target = jc_structure(C64::new(0.0, -p.gamma), C64::new(0.0, 0.0), C64::new(0.0, 0.0));
        for (r, c) in [(0, 0), (0, 3), (3, 0), (3, 3)] {
            assert!((last.get(r, c) - target.get(r, c)).norm() < 1e-8, "({r},{c}) {} {}", last.get(r, c), target.get(r, c));
        }
    }

    #[test]
    fn transient_iterates_start_at_local_part() {
        let p = jc_over();
        let k = jc_kernel_split(&p);
        let grid = TimeGrid::new(0.01, 11).unwrap();
        let k0 = k.khat(C64::new(0.0, 0.0)).unwrap();
        let (its, report) = transient_iterate(&k, &SuperopTrajectory::constant(grid, &k0), 3).unwrap();
        assert_eq!(report.iters, 3);
        let kn0 = jc_kernel_nonlocal(0.0, &p);
        for it in &its {
            assert_eq!(it.get(0).unwrap(), k.local());
            let t = grid.time(1);
            let g = it.get(1).unwrap();
            let linear = k.local() + &kn0.scale_re(t);
            assert!(g.max_abs_diff(&linear) < 1e-5 * g.max_abs());
        }
    }

    #[test]
    fn rlm_first_transient_iterate_is_exact() {
        let p = RlmParams::from_detuning(2.0 * std::f64::consts::PI, 0.1 / (2.0 * std::f64::consts::PI)).unwrap();
        let k = rlm_kernel_split(&p);
        let grid = TimeGrid::new(10.0, 501).unwrap();
        let k0 = k.khat(C64::new(0.0, 0.0)).unwrap();
        let (its, report) = transient_iterate(&k, &SuperopTrajectory::constant(grid, &k0), 2).unwrap();
        assert!(report.residuals[1] < 1e-7);
        let exact = SuperopTrajectory::from_fn(grid, 2, |t| Ok(rlm_generator(t, &p))).unwrap();
        assert!(its[0].max_abs_diff(&exact).unwrap() < 1e-8);
    }
}
