//! Quadrature: adaptive Gauss–Kronrod for vector-valued integrands, fixed Gauss–Legendre
//! rules, half-line integration and Bromwich inversion of Laplace transforms.

use num_complex::Complex64 as C64;

use crate::error::{QmeError, Result};
use crate::liouville::Superoperator;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> Vec<C64>>(f: &mut F, a: f64, b: f64) -> (Vec<C64>, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let n = fc.len();
    let mut kron: Vec<C64> = fc.iter().map(|v| v * WGK[7]).collect();
    let mut gauss: Vec<C64> = fc.iter().map(|v| v * WG[3]).collect();
    for j in 0..7 {
        let x = h * XGK[j];
        let f1 = f(c - x);
        let f2 = f(c + x);
        for k in 0..n {
            let s = f1[k] + f2[k];
            kron[k] += s * WGK[j];
            if j % 2 == 1 {
                gauss[k] += s * WG[j / 2];
            }
        }
    }
    let mut err: f64 = 0.0;
    for k in 0..n {
        kron[k] *= h;
        gauss[k] *= h;
        err = err.max((kron[k] - gauss[k]).norm());
    }
    (kron, err)
}

/// Adaptive Gauss–Kronrod (7/15) integral of a vector-valued function on [a, b].
pub fn integrate_vec<F: FnMut(f64) -> Vec<C64>>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<Vec<C64>> {
    if a == b {
        return Ok(vec![C64::new(0.0, 0.0); f(a).len()]);
    }
    let mut stack = vec![(a, b, 0usize)];
    let mut total: Option<Vec<C64>> = None;
    let (whole, _) = gk15(&mut f, a, b);
    let scale = whole.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let tol = abs_tol.max(rel_tol * scale);
    let width = (b - a).abs();
    let mut evaluations = 0usize;
    while let Some((lo, hi, depth)) = stack.pop() {
        let (val, err) = gk15(&mut f, lo, hi);
        evaluations += 15;
        let local_tol = tol * ((hi - lo).abs() / width);
        if err <= local_tol.max(1e-15 * scale) || depth >= 48 || evaluations > 2_000_000 {
            if depth >= 48 || evaluations > 2_000_000 {
                if err > 1e3 * local_tol.max(1e-15 * scale) {
                    return Err(QmeError::DivergentQuadrature(format!(
                        "adaptive subdivision failed on [{lo}, {hi}]"
                    )));
                }
            }
            match total.as_mut() {
                None => total = Some(val),
                Some(t) => t.iter_mut().zip(val).for_each(|(x, y)| *x += y),
            }
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((mid, hi, depth + 1));
            stack.push((lo, mid, depth + 1));
        }
    }
    Ok(total.expect("at least one panel"))
}

pub fn integrate_complex<F: FnMut(f64) -> C64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<C64> {
    integrate_vec(|t| vec![f(t)], a, b, abs_tol, rel_tol).map(|v| v[0])
}

pub fn integrate_real<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    integrate_complex(|t| C64::new(f(t), 0.0), a, b, abs_tol, rel_tol).map(|z| z.re)
}

/// ∫_a^∞ f on consecutive panels of width `panel` until three successive panels
/// contribute less than `abs_tol` each.
pub fn integrate_vec_halfline<F: FnMut(f64) -> Vec<C64>>(
    mut f: F,
    a: f64,
    panel: f64,
    abs_tol: f64,
    max_panels: usize,
) -> Result<Vec<C64>> {
    let mut total = integrate_vec(&mut f, a, a + panel, abs_tol, 1e-14)?;
    let mut quiet = 0;
    for k in 1..max_panels {
        let lo = a + panel * k as f64;
        let part = integrate_vec(&mut f, lo, lo + panel, abs_tol, 1e-14)?;
        let size = part.iter().map(|z| z.norm()).fold(0.0, f64::max);
        total.iter_mut().zip(part).for_each(|(x, y)| *x += y);
        quiet = if size < abs_tol { quiet + 1 } else { 0 };
        if quiet >= 3 {
            return Ok(total);
        }
    }
    Err(QmeError::DivergentQuadrature(
        "half-line integral did not settle".to_string(),
    ))
}

pub fn superop_to_vec(s: &Superoperator) -> Vec<C64> {
    s.matrix().iter().copied().collect()
}

pub fn vec_to_superop(dim: usize, v: Vec<C64>) -> Superoperator {
    let n = dim * dim;
    Superoperator::from_matrix_unchecked(dim, nalgebra::DMatrix::from_vec(n, n, v))
}

/// Adaptive integral of a superoperator-valued function.
pub fn integrate_superop<F: FnMut(f64) -> Superoperator>(
    dim: usize,
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
) -> Result<Superoperator> {
    integrate_vec(|t| superop_to_vec(&f(t)), a, b, abs_tol, 1e-14).map(|v| vec_to_superop(dim, v))
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = nf * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Laplace convention f̂(E) = ∫₀^∞ e^{iEt} f(t) dt, so i/(E − z) ↔ e^{−izt}.
/// Inverse along the line E = x + ic with c above every singularity:
/// f(t) = (e^{−ct}/2π) ∫ e^{−ixt} f̂(x + ic) dx .
///
/// The slowly decaying part i·f0/(E − z0) with f0 = f(0⁺) is subtracted analytically
/// before integrating; the remainder is O(E⁻²) and is truncated at |x| = `cutoff`.
#[derive(Clone, Copy, Debug)]
pub struct Bromwich {
    /// Height of the contour above the real axis.
    pub c: f64,
    /// Truncation |x| ≤ cutoff.
    pub cutoff: f64,
    /// Reference pole of the subtracted tail; must lie below the contour.
    pub z0: C64,
}

impl Bromwich {
    pub fn invert<F: FnMut(C64) -> Vec<C64>>(
        &self,
        mut fhat: F,
        f0: &[C64],
        t: f64,
        abs_tol: f64,
    ) -> Result<Vec<C64>> {
        let i = C64::new(0.0, 1.0);
        let c = self.c;
        let integrand = |x: f64| {
            let e = C64::new(x, c);
            let tail = i / (e - self.z0);
            let phase = (-i * x * t).exp();
            fhat(e)
                .into_iter()
                .zip(f0)
                .map(|(v, f0k)| (v - tail * f0k) * phase)
                .collect::<Vec<_>>()
        };
        // split the line into panels so oscillations stay resolved
        let panels = 64usize;
        let width = 2.0 * self.cutoff / panels as f64;
        let mut sum = vec![C64::new(0.0, 0.0); f0.len()];
        let mut integrand = integrand;
        for p in 0..panels {
            let lo = -self.cutoff + width * p as f64;
            let part = integrate_vec(&mut integrand, lo, lo + width, abs_tol / panels as f64, 1e-13)?;
            sum.iter_mut().zip(part).for_each(|(s, v)| *s += v);
        }
        let pref = (c * t).exp() / (2.0 * std::f64::consts::PI);
        let tail_time = (-i * self.z0 * t).exp();
        Ok(sum
            .into_iter()
            .zip(f0)
            .map(|(s, f0k)| s * pref + f0k * tail_time)
            .collect())
    }
}
