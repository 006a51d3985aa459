//! Liouville-space algebra.
//!
//! Operators on a d-dimensional Hilbert space are stored as vectors of length d²
//! in the row-major basis |νν'⟩⟩ = |ν⟩⟨ν'| (index ν·d + ν'). Superoperators are
//! d²×d² complex matrices in the same basis. Covectors (bras) are represented by
//! the operator they pair with through the Hilbert–Schmidt product
//! ⟨⟨B|A⟩⟩ = tr(B†A).

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{QmeError, Result};

pub const BASIS_NAME: &str = "rowmajor-nu-nuprime";
pub const DEFAULT_CONDITION_CAP: f64 = 1e8;

const I: C64 = C64::new(0.0, 1.0);

fn all_finite(it: impl IntoIterator<Item = C64>) -> bool {
    it.into_iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Vectorized operator |A⟩⟩.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorVec {
    dim: usize,
    data: DVector<C64>,
}

impl OperatorVec {
    pub fn new(dim: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(QmeError::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        Ok(Self {
            dim,
            data: DVector::from_vec(data),
        })
    }

    pub fn from_real(dim: usize, data: &[f64]) -> Result<Self> {
        Self::new(dim, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub(crate) fn from_dvector(dim: usize, data: DVector<C64>) -> Self {
        debug_assert_eq!(data.len(), dim * dim);
        Self { dim, data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_dvector(dim, DVector::zeros(dim * dim))
    }

    /// |νν'⟩⟩
    pub fn basis(dim: usize, nu: usize, nu_prime: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.data[nu * dim + nu_prime] = C64::new(1.0, 0.0);
        v
    }

    pub fn identity(dim: usize) -> Self {
        let mut v = Self::zeros(dim);
        for n in 0..dim {
            v.data[n * dim + n] = C64::new(1.0, 0.0);
        }
        v
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &DVector<C64> {
        &self.data
    }

    pub fn entry(&self, nu: usize, nu_prime: usize) -> C64 {
        self.data[nu * self.dim + nu_prime]
    }

    /// Hilbert–Schmidt pairing ⟨⟨self|other⟩⟩ = tr(self† other).
    pub fn inner(&self, other: &OperatorVec) -> C64 {
        self.data.dotc(&other.data)
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|n| self.entry(n, n)).sum()
    }

    /// The operator A† in vectorized form.
    pub fn adjoint(&self) -> OperatorVec {
        let d = self.dim;
        let mut out = Self::zeros(d);
        for a in 0..d {
            for b in 0..d {
                out.data[a * d + b] = self.data[b * d + a].conj();
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn scale(&self, z: C64) -> OperatorVec {
        Self::from_dvector(self.dim, &self.data * z)
    }

    pub fn max_abs_diff(&self, other: &OperatorVec) -> f64 {
        (&self.data - &other.data)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

impl Add for &OperatorVec {
    type Output = OperatorVec;
    fn add(self, rhs: &OperatorVec) -> OperatorVec {
        OperatorVec::from_dvector(self.dim, &self.data + &rhs.data)
    }
}

impl Sub for &OperatorVec {
    type Output = OperatorVec;
    fn sub(self, rhs: &OperatorVec) -> OperatorVec {
        OperatorVec::from_dvector(self.dim, &self.data - &rhs.data)
    }
}

/// Row-major vectorization of a d×d operator.
pub fn vectorize(op: &DMatrix<C64>) -> Result<OperatorVec> {
    if op.nrows() != op.ncols() {
        return Err(QmeError::DimensionMismatch {
            expected: op.nrows(),
            got: op.ncols(),
        });
    }
    let d = op.nrows();
    let mut data = Vec::with_capacity(d * d);
    for a in 0..d {
        for b in 0..d {
            data.push(op[(a, b)]);
        }
    }
    OperatorVec::new(d, data)
}

pub fn devectorize(v: &OperatorVec) -> DMatrix<C64> {
    let d = v.dim;
    DMatrix::from_fn(d, d, |a, b| v.data[a * d + b])
}

/// Trace functional ⟨⟨𝟙| as the identity operator.
pub fn trace_functional(dim: usize) -> OperatorVec {
    OperatorVec::identity(dim)
}

/// A linear map on Liouville space.
#[derive(Clone, Debug, PartialEq)]
pub struct Superoperator {
    dim: usize,
    m: DMatrix<C64>,
}

impl Superoperator {
    pub fn from_matrix(dim: usize, m: DMatrix<C64>) -> Result<Self> {
        let n = dim * dim;
        if m.nrows() != n || m.ncols() != n {
            return Err(QmeError::DimensionMismatch {
                expected: n,
                got: m.nrows().max(m.ncols()),
            });
        }
        if !all_finite(m.iter().copied()) {
            return Err(QmeError::NonFinite("superoperator"));
        }
        Ok(Self { dim, m })
    }

    /// Skips validation; callers guarantee shape, finiteness is checked in debug builds.
    pub(crate) fn from_matrix_unchecked(dim: usize, m: DMatrix<C64>) -> Self {
        debug_assert_eq!(m.nrows(), dim * dim);
        Self { dim, m }
    }

    pub fn zeros(dim: usize) -> Self {
        let n = dim * dim;
        Self::from_matrix_unchecked(dim, DMatrix::zeros(n, n))
    }

    pub fn identity(dim: usize) -> Self {
        let n = dim * dim;
        Self::from_matrix_unchecked(dim, DMatrix::identity(n, n))
    }

    pub fn scalar(dim: usize, z: C64) -> Self {
        Self::identity(dim).scale(z)
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize, usize) -> C64) -> Result<Self> {
        let n = dim * dim;
        Self::from_matrix(dim, DMatrix::from_fn(n, n, f))
    }

    /// Outer product |a⟩⟩⟨⟨b|.
    pub fn outer(a: &OperatorVec, b: &OperatorVec) -> Self {
        let m = &a.data * b.data.adjoint();
        Self::from_matrix_unchecked(a.dim, m)
    }

    /// Left multiplication A• .
    pub fn left(a: &DMatrix<C64>) -> Self {
        let d = a.nrows();
        let id = DMatrix::<C64>::identity(d, d);
        Self::from_matrix_unchecked(d, a.kronecker(&id))
    }

    /// Right multiplication •A .
    pub fn right(a: &DMatrix<C64>) -> Self {
        let d = a.nrows();
        let id = DMatrix::<C64>::identity(d, d);
        Self::from_matrix_unchecked(d, id.kronecker(&a.transpose()))
    }

    /// Commutator [H, •].
    pub fn commutator(h: &DMatrix<C64>) -> Self {
        &Self::left(h) - &Self::right(h)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.dim * self.dim
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut DMatrix<C64> {
        &mut self.m
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.m
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.m[(r, c)]
    }

    pub fn apply(&self, v: &OperatorVec) -> OperatorVec {
        OperatorVec::from_dvector(self.dim, &self.m * &v.data)
    }

    /// ⟨⟨b| X as an operator (the covector b composed with X).
    pub fn covector_apply(&self, b: &OperatorVec) -> OperatorVec {
        OperatorVec::from_dvector(self.dim, self.m.adjoint() * &b.data)
    }

    pub fn scale(&self, z: C64) -> Self {
        Self::from_matrix_unchecked(self.dim, &self.m * z)
    }

    pub fn scale_re(&self, x: f64) -> Self {
        self.scale(C64::new(x, 0.0))
    }

    pub fn is_finite(&self) -> bool {
        all_finite(self.m.iter().copied())
    }

    pub fn max_abs(&self) -> f64 {
        self.m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Superoperator) -> f64 {
        self.m
            .iter()
            .zip(other.m.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn norm1(&self) -> f64 {
        (0..self.m.ncols())
            .map(|c| self.m.column(c).iter().map(|z| z.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn inverse(&self) -> Option<Self> {
        self.m
            .clone()
            .try_inverse()
            .filter(|m| all_finite(m.iter().copied()))
            .map(|m| Self::from_matrix_unchecked(self.dim, m))
    }

    /// Eigenvalues from the diagonal of the complex Schur form, unordered.
    pub fn eigenvalues(&self) -> Vec<C64> {
        let (_, t) = self.m.clone().schur().unpack();
        (0..self.size()).map(|k| t[(k, k)]).collect()
    }

    /// Entrywise projection onto the set of X for which −iX is hermicity-preserving.
    pub fn hermicity_projection(&self) -> Self {
        let d = self.dim;
        let y = &self.m * (-I);
        let n = d * d;
        let m = DMatrix::from_fn(n, n, |r, c| {
            let (a, b) = (r / d, r % d);
            let (cc, dd) = (c / d, c % d);
            let partner = y[(b * d + a, dd * d + cc)].conj();
            I * ((y[(r, c)] + partner) * 0.5)
        });
        Self::from_matrix_unchecked(d, m)
    }

    pub fn to_json(&self) -> String {
        let data: Vec<[f64; 2]> = (0..self.size())
            .flat_map(|r| (0..self.size()).map(move |c| (r, c)))
            .map(|(r, c)| [self.m[(r, c)].re, self.m[(r, c)].im])
            .collect();
        serde_json::to_string(&SuperopJson {
            dim: self.dim,
            basis: BASIS_NAME.to_string(),
            data,
        })
        .expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: SuperopJson =
            serde_json::from_str(s).map_err(|e| QmeError::Serialization(e.to_string()))?;
        if j.basis != BASIS_NAME {
            return Err(QmeError::Serialization(format!(
                "unsupported basis '{}'",
                j.basis
            )));
        }
        let n = j.dim * j.dim;
        if j.data.len() != n * n {
            return Err(QmeError::DimensionMismatch {
                expected: n * n,
                got: j.data.len(),
            });
        }
        Self::from_fn(j.dim, |r, c| {
            let [re, im] = j.data[r * n + c];
            C64::new(re, im)
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SuperopJson {
    dim: usize,
    basis: String,
    data: Vec<[f64; 2]>,
}

impl fmt::Display for Superoperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.size() {
            for c in 0..self.size() {
                let z = self.m[(r, c)];
                write!(f, "{:>12.6}{:+.6}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl Add for &Superoperator {
    type Output = Superoperator;
    fn add(self, rhs: &Superoperator) -> Superoperator {
        Superoperator::from_matrix_unchecked(self.dim, &self.m + &rhs.m)
    }
}

impl Sub for &Superoperator {
    type Output = Superoperator;
    fn sub(self, rhs: &Superoperator) -> Superoperator {
        Superoperator::from_matrix_unchecked(self.dim, &self.m - &rhs.m)
    }
}

impl Mul for &Superoperator {
    type Output = Superoperator;
    fn mul(self, rhs: &Superoperator) -> Superoperator {
        Superoperator::from_matrix_unchecked(self.dim, &self.m * &rhs.m)
    }
}

impl Neg for &Superoperator {
    type Output = Superoperator;
    fn neg(self) -> Superoperator {
        Superoperator::from_matrix_unchecked(self.dim, -&self.m)
    }
}

impl AddAssign<&Superoperator> for Superoperator {
    fn add_assign(&mut self, rhs: &Superoperator) {
        self.m += &rhs.m;
    }
}

/// Eigen-decomposition X = Σ g_i |g_i⟩⟩⟨⟨ḡ_i| with biorthonormal pairs.
#[derive(Clone, Debug)]
pub struct SpectralDecomp {
    pub eigenvalues: Vec<C64>,
    pub right: Vec<OperatorVec>,
    /// Dual operators; ⟨⟨ḡ_i|g_j⟩⟩ = δ_ij under the Hilbert–Schmidt pairing.
    pub left: Vec<OperatorVec>,
    /// 2-norm condition number of the right-eigenvector matrix.
    pub condition: f64,
}

impl SpectralDecomp {
    pub fn dim(&self) -> usize {
        self.right[0].dim()
    }

    pub fn reconstruct(&self) -> Superoperator {
        self.apply_function(|g| g)
    }

    /// f(X) = Σ f(g_i) |g_i⟩⟩⟨⟨ḡ_i| .
    pub fn apply_function(&self, f: impl Fn(C64) -> C64) -> Superoperator {
        let mut out = Superoperator::zeros(self.dim());
        for ((g, r), l) in self.eigenvalues.iter().zip(&self.right).zip(&self.left) {
            out += &Superoperator::outer(r, l).scale(f(*g));
        }
        out
    }

    /// Σ F(g_i) |g_i⟩⟩⟨⟨ḡ_i| for a superoperator-valued F, i.e. Σ_i F(g_i) P_i .
    pub fn apply_superop_function(
        &self,
        mut f: impl FnMut(C64) -> Result<Superoperator>,
    ) -> Result<Superoperator> {
        let mut out = Superoperator::zeros(self.dim());
        for ((g, r), l) in self.eigenvalues.iter().zip(&self.right).zip(&self.left) {
            let fg = f(*g)?;
            out += &(&fg * &Superoperator::outer(r, l));
        }
        Ok(out)
    }

    pub fn biorthogonality_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for (i, l) in self.left.iter().enumerate() {
            for (j, r) in self.right.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((l.inner(r) - target).norm());
            }
        }
        err
    }
}

fn condition_number(m: &DMatrix<C64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn columns_to_vecs(dim: usize, m: &DMatrix<C64>) -> Vec<OperatorVec> {
    (0..m.ncols())
        .map(|c| OperatorVec::from_dvector(dim, m.column(c).into_owned()))
        .collect()
}

/// Dual covectors of a basis of right vectors (rows of the inverse basis matrix).
pub fn biorthonormalize(rights: &[OperatorVec]) -> Result<Vec<OperatorVec>> {
    biorthonormalize_with_cap(rights, DEFAULT_CONDITION_CAP)
}

pub fn biorthonormalize_with_cap(rights: &[OperatorVec], cap: f64) -> Result<Vec<OperatorVec>> {
    let Some(first) = rights.first() else {
        return Ok(Vec::new());
    };
    let dim = first.dim();
    let n = dim * dim;
    if rights.len() != n {
        return Err(QmeError::DimensionMismatch {
            expected: n,
            got: rights.len(),
        });
    }
    let v = DMatrix::from_fn(n, n, |r, c| rights[c].data[r]);
    let condition = condition_number(&v);
    if !(condition < cap) {
        return Err(QmeError::SingularBasis { condition });
    }
    let inv = v
        .try_inverse()
        .ok_or(QmeError::SingularBasis { condition })?;
    // Row i of V⁻¹ is the covector; the dual operator is its conjugate.
    Ok((0..n)
        .map(|i| OperatorVec::from_dvector(dim, inv.row(i).adjoint()))
        .collect())
}

pub fn spectral_decompose(s: &Superoperator, tol: f64) -> Result<SpectralDecomp> {
    spectral_decompose_with_cap(s, tol, DEFAULT_CONDITION_CAP)
}

/// Right eigenvectors by back-substitution on the complex Schur form, duals from the
/// inverse eigenvector matrix. Eigenvalues are ordered by imaginary part descending,
/// ties by real part ascending.
pub fn spectral_decompose_with_cap(
    s: &Superoperator,
    tol: f64,
    cap: f64,
) -> Result<SpectralDecomp> {
    let dim = s.dim();
    let n = s.size();
    let scale = s.max_abs().max(f64::MIN_POSITIVE);
    let (q, t) = s.matrix().clone().schur().unpack();
    let small = f64::EPSILON * scale;

    let mut vt = DMatrix::<C64>::zeros(n, n);
    for k in 0..n {
        let lambda = t[(k, k)];
        vt[(k, k)] = C64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut acc = C64::new(0.0, 0.0);
            for j in (i + 1)..=k {
                acc += t[(i, j)] * vt[(j, k)];
            }
            let mut denom = t[(i, i)] - lambda;
            if denom.norm() < small {
                denom = C64::new(small, 0.0);
            }
            vt[(i, k)] = -acc / denom;
        }
    }
    let mut v = &q * vt;
    for mut col in v.column_iter_mut() {
        let nrm = col.norm();
        col /= C64::new(nrm, 0.0);
    }

    let mut order: Vec<usize> = (0..n).collect();
    let tie = 1e-12 * scale;
    order.sort_by(|&a, &b| {
        let (ga, gb) = (t[(a, a)], t[(b, b)]);
        if (ga.im - gb.im).abs() > tie {
            gb.im.total_cmp(&ga.im)
        } else {
            ga.re.total_cmp(&gb.re)
        }
    });
    let eigenvalues: Vec<C64> = order.iter().map(|&k| t[(k, k)]).collect();
    let v = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);

    let condition = condition_number(&v);
    if !(condition < cap) || !all_finite(v.iter().copied()) {
        return Err(QmeError::NonDiagonalizable { condition });
    }
    let right = columns_to_vecs(dim, &v);
    let left = biorthonormalize_with_cap(&right, cap).map_err(|e| match e {
        QmeError::SingularBasis { condition } => QmeError::NonDiagonalizable { condition },
        other => other,
    })?;
    let decomp = SpectralDecomp {
        eigenvalues,
        right,
        left,
        condition,
    };
    let recon_err = decomp.reconstruct().max_abs_diff(s);
    if recon_err > tol.max(1e3 * f64::EPSILON * condition) * scale {
        return Err(QmeError::NonDiagonalizable { condition });
    }
    Ok(decomp)
}

/// e^{isX} by scaling and squaring with a truncated Taylor series.
pub fn superop_exp(x: &Superoperator, s: f64) -> Result<Superoperator> {
    if !s.is_finite() {
        return Err(QmeError::NonFinite("exponential time"));
    }
    let a = x.matrix() * C64::new(0.0, s);
    let norm = x.norm1() * s.abs();
    if norm > 1e6 {
        return Err(QmeError::Overflow { norm });
    }
    let mut squarings = 0u32;
    let mut scaled = norm;
    while scaled > 0.5 {
        scaled *= 0.5;
        squarings += 1;
    }
    let a = a * C64::new(0.5f64.powi(squarings as i32), 0.0);
    let n = x.size();
    let mut result = DMatrix::<C64>::identity(n, n);
    let mut term = DMatrix::<C64>::identity(n, n);
    for k in 1..=30 {
        term = &term * &a / C64::new(k as f64, 0.0);
        result += &term;
        if term.iter().all(|z| z.norm() < 1e-18) {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    if !all_finite(result.iter().copied()) {
        return Err(QmeError::Overflow { norm });
    }
    Ok(Superoperator::from_matrix_unchecked(x.dim(), result))
}

/// True iff ⟨⟨𝟙|X = 0 within tol.
pub fn check_trace_preserving(x: &Superoperator, tol: f64) -> bool {
    trace_row_error(x) <= tol
}

pub fn trace_row_error(x: &Superoperator) -> f64 {
    let d = x.dim();
    (0..x.size())
        .map(|c| (0..d).map(|n| x.get(n * d + n, c)).sum::<C64>().norm())
        .fold(0.0, f64::max)
}

/// True iff Y = −iX satisfies Y(A†) = (Y A)† for every basis operator A, which in the
/// row-major basis reads Y[ab,cd] = conj(Y[ba,dc]).
pub fn check_hermicity_preserving(x: &Superoperator, tol: f64) -> bool {
    hermicity_error(x) <= tol
}

pub fn hermicity_error(x: &Superoperator) -> f64 {
    let d = x.dim();
    let n = x.size();
    let mut err: f64 = 0.0;
    for r in 0..n {
        for c in 0..n {
            let (a, b) = (r / d, r % d);
            let (cc, dd) = (c / d, c % d);
            let y = -I * x.get(r, c);
            let partner = (-I * x.get(b * d + a, dd * d + cc)).conj();
            err = err.max((y - partner).norm());
        }
    }
    err
}
