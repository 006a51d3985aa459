//! Memory-expansion coefficients F^n_{p₁…p_n}, the superoperators F^k(t) built from G and
//! its time derivatives, truncated gradient expansions of the stationary generator and
//! the first two orders of a perturbative series for G(t).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use num_bigint::BigUint;
use num_complex::Complex64 as C64;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{QmeError, Result};
use crate::fixedpoint::{KernelSplit, SuperopTrajectory, TimeGrid};
use crate::liouville::Superoperator;
use crate::quad::integrate_superop;

const MINUS_I: C64 = C64 { re: 0.0, im: -1.0 };

/// Highest k accepted by [`fk_superop`].
pub const MAX_FK_ORDER: usize = 5;
/// Highest truncation order accepted by [`gradient_expansion_stationary`].
pub const MAX_GRADIENT_ORDER: usize = 4;

const SELF_CONSISTENCY_TOL: f64 = 1e-13;
const SELF_CONSISTENCY_MAX_ITER: usize = 20_000;

/// F^n_p by the coefficient recursion, n = p.len(). Exact integer arithmetic.
pub fn fcoeff_recursive(p: &[usize]) -> BigUint {
    let mut memo = HashMap::new();
    recursive_memo(p, &mut memo)
}

fn recursive_memo(p: &[usize], memo: &mut HashMap<Vec<usize>, BigUint>) -> BigUint {
    // F^0 of the empty index is the trailing-(−1) reduction of F^1_0 = 1.
    if p.is_empty() {
        return BigUint::one();
    }
    if let Some(v) = memo.get(p) {
        return v.clone();
    }
    let n = p.len();
    let mut q = p.to_vec();
    let mut total = BigUint::zero();
    let lowered = if p[n - 1] == 0 { n - 1 } else { n };
    for j in 0..lowered {
        if q[j] > 0 {
            q[j] -= 1;
            total += recursive_memo(&q, memo);
            q[j] += 1;
        }
    }
    if p[n - 1] == 0 {
        total += recursive_memo(&p[..n - 1], memo);
    }
    memo.insert(p.to_vec(), total.clone());
    total
}

fn factorial(m: usize) -> BigUint {
    (1..=m).fold(BigUint::one(), |acc, i| acc * BigUint::from(i))
}

/// F^n_p from the closed form (n + Σp)! / (∏ p_i! ∏_{i=0}^{n−1} Σ_{j=0}^{i} (p_{n−j} + 1)).
/// Returns `None` if the quotient is not an integer.
pub fn fcoeff_explicit(p: &[usize]) -> Option<BigUint> {
    let n = p.len();
    let k = n + p.iter().sum::<usize>();
    let mut denom = BigUint::one();
    for &pi in p {
        denom *= factorial(pi);
    }
    let mut partial = 0usize;
    for &pi in p.iter().rev() {
        partial += pi + 1;
        denom *= BigUint::from(partial);
    }
    let num = factorial(k);
    if (&num % &denom).is_zero() {
        Some(num / denom)
    } else {
        None
    }
}

/// All multi-indices of length n with entry sum `total`, in lexicographic order.
pub fn multi_indices(n: usize, total: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n == 0 {
            if total == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        if n == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 0..=total {
            prefix.push(first);
            rec(n - 1, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, total, &mut Vec::new(), &mut out);
    out
}

/// Coefficients F^n_p for every n + Σp ≤ max_k, built sequentially and read-only afterwards.
#[derive(Clone, Debug)]
pub struct FCoeffTable {
    max_k: usize,
    entries: BTreeMap<Vec<usize>, BigUint>,
}

impl FCoeffTable {
    /// Builds the table from the recursion and checks every entry against the closed form.
    pub fn build(max_k: usize) -> Result<Self> {
        let mut memo = HashMap::new();
        let mut entries = BTreeMap::new();
        for k in 1..=max_k {
            for n in 1..=k {
                for p in multi_indices(n, k - n) {
                    let v = recursive_memo(&p, &mut memo);
                    if fcoeff_explicit(&p).as_ref() != Some(&v) {
                        return Err(QmeError::ConventionMismatch { n, p });
                    }
                    entries.insert(p, v);
                }
            }
        }
        Ok(Self { max_k, entries })
    }

    pub fn max_k(&self) -> usize {
        self.max_k
    }

    pub fn get(&self, p: &[usize]) -> Option<&BigUint> {
        self.entries.get(p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries ordered by k = n + Σp, then n, then the index.
    pub fn ordered(&self) -> Vec<(&[usize], &BigUint)> {
        let mut rows: Vec<_> = self.entries.iter().map(|(p, v)| (p.as_slice(), v)).collect();
        rows.sort_by_key(|(p, _)| (p.len() + p.iter().sum::<usize>(), p.len(), p.to_vec()));
        rows
    }

    /// CSV with columns n, p (dash-joined), value.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let ser = |e: csv::Error| QmeError::Serialization(e.to_string());
        w.write_record(["n", "p", "value"]).map_err(ser)?;
        for (p, v) in self.ordered() {
            let idx = p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-");
            w.write_record([p.len().to_string(), idx, v.to_string()]).map_err(ser)?;
        }
        w.flush().map_err(|e| QmeError::Serialization(e.to_string()))
    }
}

/// F^k from derivs[p] = ∂ₜ^p G, p < k:
/// Σ_n Σ_{Σp = k−n} F^n_p [−i∂^{p₁}G] ⋯ [−i∂^{p_n}G].
pub fn fk_from_derivatives(k: usize, derivs: &[Superoperator], table: &FCoeffTable) -> Result<Superoperator> {
    let dim = derivs
        .first()
        .map(Superoperator::dim)
        .ok_or_else(|| QmeError::DomainError("no derivatives supplied".into()))?;
    if k == 0 {
        return Ok(Superoperator::identity(dim));
    }
    if derivs.len() < k {
        return Err(QmeError::DomainError(format!("F^{k} needs {k} derivatives, got {}", derivs.len())));
    }
    if k > table.max_k() {
        return Err(QmeError::DerivativeOrderTooHigh(k));
    }
    let factors: Vec<Superoperator> = derivs[..k].iter().map(|d| d.scale(MINUS_I)).collect();
    let mut total = Superoperator::zeros(dim);
    for n in 1..=k {
        for p in multi_indices(n, k - n) {
            let c = table
                .get(&p)
                .and_then(ToPrimitive::to_f64)
                .ok_or(QmeError::DerivativeOrderTooHigh(k))?;
            let mut prod = factors[p[0]].clone();
            for &pi in &p[1..] {
                prod = &prod * &factors[pi];
            }
            total += &prod.scale_re(c);
        }
    }
    Ok(total)
}

/// Finite-difference weights for derivatives 0..=order at x0 from the given nodes.
fn fornberg(x0: f64, nodes: &[f64], order: usize) -> Vec<Vec<f64>> {
    let m = nodes.len();
    let mut c = vec![vec![vec![0.0; m]; m]; order + 1];
    c[0][0][0] = 1.0;
    let mut c1 = 1.0;
    for i in 1..m {
        let mut c2 = 1.0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            for k in 0..=order.min(i) {
                let prev_same = c[k][i - 1][j];
                let prev_lower = if k > 0 { c[k - 1][i - 1][j] } else { 0.0 };
                c[k][i][j] = ((nodes[i] - x0) * prev_same - k as f64 * prev_lower) / c3;
            }
        }
        for k in 0..=order.min(i) {
            let lower = if k > 0 { c[k - 1][i - 1][i - 1] } else { 0.0 };
            c[k][i][i] = c1 / c2 * (k as f64 * lower - (nodes[i - 1] - x0) * c[k][i - 1][i - 1]);
        }
        c1 = c2;
    }
    (0..=order).map(|k| c[k][m - 1].clone()).collect()
}

/// ∂ₜ^p G(t) for p = 0..=order from nodes around t.
pub fn trajectory_derivatives(g: &SuperopTrajectory, t: f64, order: usize) -> Result<Vec<Superoperator>> {
    let grid = g.grid();
    let dt = grid.dt();
    let half = order / 2 + 2;
    let width = 2 * half + 1;
    if grid.nodes() < width {
        return Err(QmeError::GridMismatch(format!("{width}-point stencil needs more nodes")));
    }
    if !(0.0..=grid.t_max()).contains(&t) {
        return Err(QmeError::GridMismatch(format!("t = {t} outside the grid")));
    }
    let centre = (t / dt).round() as usize;
    let start = centre.saturating_sub(half).min(grid.nodes() - width);
    let idx: Vec<usize> = (start..start + width).collect();
    let mut samples = Vec::with_capacity(width);
    for &k in &idx {
        samples.push(g.get(k).ok_or(QmeError::SingularNode(grid.time(k)))?);
    }
    let nodes: Vec<f64> = idx.iter().map(|&k| grid.time(k)).collect();
    let weights = fornberg(t, &nodes, order);
    Ok(weights
        .iter()
        .map(|w| {
            let mut acc = Superoperator::zeros(g.dim());
            for (wi, s) in w.iter().zip(&samples) {
                acc += &s.scale_re(*wi);
            }
            acc
        })
        .collect())
}

/// F^k(t) = (∂ₜ^k Π) Π^{-1} from G on a grid, derivatives by finite differences.
pub fn fk_superop(k: usize, g: &SuperopTrajectory, t: f64) -> Result<Superoperator> {
    if k > MAX_FK_ORDER {
        return Err(QmeError::DerivativeOrderTooHigh(k));
    }
    if k == 0 {
        return Ok(Superoperator::identity(g.dim()));
    }
    let derivs = trajectory_derivatives(g, t, k - 1)?;
    let table = FCoeffTable::build(k)?;
    fk_from_derivatives(k, &derivs, &table)
}

/// Σ_{k ≤ order} ((−1)^k / k!) (t−s)^k F^k(t).
pub fn divisor_series(g: &SuperopTrajectory, s: f64, t: f64, order: usize) -> Result<Superoperator> {
    if order > MAX_FK_ORDER {
        return Err(QmeError::DerivativeOrderTooHigh(order));
    }
    let table = FCoeffTable::build(order.max(1))?;
    let derivs = trajectory_derivatives(g, t, order.max(1) - 1)?;
    let mut total = Superoperator::identity(g.dim());
    let mut coeff = 1.0;
    for k in 1..=order {
        coeff *= -(t - s) / k as f64;
        total += &fk_from_derivatives(k, &derivs, &table)?.scale_re(coeff);
    }
    Ok(total)
}

fn central_difference<F>(khat: &F, order: usize, h: f64) -> Result<Superoperator>
where
    F: Fn(C64) -> Result<Superoperator> + ?Sized,
{
    let mut acc: Option<Superoperator> = None;
    let mut binom = 1.0;
    for j in 0..=order {
        let x = (order as f64 / 2.0 - j as f64) * h;
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let term = khat(C64::new(x, 0.0))?.scale_re(sign * binom);
        acc = Some(match acc {
            Some(a) => &a + &term,
            None => term,
        });
        binom = binom * (order - j) as f64 / (j + 1) as f64;
    }
    Ok(acc.expect("at least one term").scale_re(h.powi(-(order as i32))))
}

/// ∂_E^k K̂(0) for k = 0..=order: central differences at steps 1e−3·rate and 5e−4·rate,
/// combined by one Richardson step.
pub fn khat_derivatives<F>(khat: &F, order: usize, rate: f64) -> Result<Vec<Superoperator>>
where
    F: Fn(C64) -> Result<Superoperator> + ?Sized,
{
    if order > MAX_GRADIENT_ORDER {
        return Err(QmeError::DerivativeOrderTooHigh(order));
    }
    let mut out = vec![khat(C64::new(0.0, 0.0))?];
    let (h1, h2) = (1e-3 * rate, 5e-4 * rate);
    for k in 1..=order {
        let coarse = central_difference(khat, k, h1)?;
        let fine = central_difference(khat, k, h2)?;
        out.push((&fine.scale_re(4.0) - &coarse).scale_re(1.0 / 3.0));
    }
    Ok(out)
}

/// Σ_k (1/k!) ∂_E^k K̂(0) G^k.
pub fn gradient_expansion_step(derivs: &[Superoperator], g: &Superoperator) -> Superoperator {
    let mut total = derivs[0].clone();
    let mut power = Superoperator::identity(g.dim());
    let mut fact = 1.0;
    for (k, d) in derivs.iter().enumerate().skip(1) {
        power = &power * g;
        fact *= k as f64;
        total += &(d * &power).scale_re(1.0 / fact);
    }
    total
}

/// Self-consistent solution of the stationary gradient series truncated at `order`,
/// iterated from K̂(0).
pub fn gradient_expansion_stationary<F>(khat: &F, order: usize, rate: f64) -> Result<Superoperator>
where
    F: Fn(C64) -> Result<Superoperator> + ?Sized,
{
    let derivs = khat_derivatives(khat, order, rate)?;
    let mut g = derivs[0].clone();
    if order == 0 {
        return Ok(g);
    }
    let mut residual = f64::INFINITY;
    for _ in 0..SELF_CONSISTENCY_MAX_ITER {
        let next = gradient_expansion_step(&derivs, &g);
        if !next.is_finite() {
            return Err(QmeError::NoConvergence(f64::INFINITY));
        }
        residual = next.max_abs_diff(&g);
        g = next;
        if residual < SELF_CONSISTENCY_TOL * g.max_abs().max(1.0) {
            return Ok(g);
        }
    }
    Err(QmeError::NoConvergence(residual))
}

/// G^(1) and G^(2) on the grid from the first two kernel orders:
/// G^(1)(t) = ∫₀^t K^(1)(t,s) and
/// G^(2)(t) = ∫₀^t K^(2)(t,s) + i ∫₀^t ds ∫_s^t dτ K^(1)(t,s) G^(1)(τ).
/// The δ̄ part of each order sits at s = t and contributes its local term with weight 1;
/// it drops out of the nested integral, whose inner range vanishes there.
/// The nested integral uses the trapezoid rule on the grid.
pub fn perturbative_g(orders: &[KernelSplit], grid: &TimeGrid) -> Result<Vec<SuperopTrajectory>> {
    let Some(first) = orders.first() else {
        return Ok(Vec::new());
    };
    let dim = first.dim();
    for k in orders {
        if k.dim() != dim {
            return Err(QmeError::DimensionMismatch { expected: dim, got: k.dim() });
        }
    }
    let direct = |kernel: &KernelSplit, t: f64| -> Result<Superoperator> {
        let mut v = kernel.local().clone();
        if t > 0.0 {
            v += &integrate_superop(dim, |s| kernel.kernel(t, s), 0.0, t, 1e-13)?;
        }
        Ok(v)
    };
    let times = grid.times();
    let g1: Vec<Superoperator> = times.iter().map(|&t| direct(first, t)).collect::<Result<_>>()?;
    let mut out = vec![SuperopTrajectory::from_values(*grid, dim, g1.iter().cloned().map(Some).collect())?];
    let Some(second) = orders.get(1) else {
        return Ok(out);
    };

    // cum[j] = ∫₀^{t_j} G^(1)
    let mut cum = vec![Superoperator::zeros(dim)];
    for j in 1..times.len() {
        let h = times[j] - times[j - 1];
        let step = (&g1[j] + &g1[j - 1]).scale_re(0.5 * h);
        let next = &cum[j - 1] + &step;
        cum.push(next);
    }
    let i = C64::new(0.0, 1.0);
    let mut g2 = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let mut nested = Superoperator::zeros(dim);
        for j in 0..k {
            let h = times[j + 1] - times[j];
            let left = &first.kernel(t, times[j]) * &(&cum[k] - &cum[j]);
            let right = &first.kernel(t, times[j + 1]) * &(&cum[k] - &cum[j + 1]);
            nested += &(&left + &right).scale_re(0.5 * h);
        }
        g2.push(Some(&direct(second, t)? + &nested.scale(i)));
    }
    out.push(SuperopTrajectory::from_values(*grid, dim, g2)?);
    Ok(out)
}
