//! Resonant level model: a single fermionic level ε tunnel-coupled (rate Γ) to a
//! wide-band reservoir at temperature T and chemical potential μ.
//!
//! Operator basis: |𝟙⟩⟩, |(−𝟙)^N⟩⟩, |d†⟩⟩ = |1⟩⟨0|, |d⟩⟩ = |0⟩⟨1|. Coherences rotate with
//! the level energy ε; the reservoir enters through ϵ = ε − μ.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64 as C64;

use crate::error::{QmeError, Result};
use crate::fixedpoint::KernelSplit;
use crate::liouville::{OperatorVec, Superoperator};
use crate::quad::{integrate_real, integrate_vec_halfline};
use crate::special::{digamma, lerch_phi};

const I: C64 = C64::new(0.0, 1.0);
const LERCH_Z_MAX: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlmParams {
    pub big_gamma: f64,
    pub temperature: f64,
    pub eps: f64,
    pub mu: f64,
}

impl RlmParams {
    pub fn new(big_gamma: f64, temperature: f64, eps: f64, mu: f64) -> Result<Self> {
        if !(big_gamma > 0.0 && big_gamma.is_finite()) {
            return Err(QmeError::DomainError(format!("Gamma must be positive, got {big_gamma}")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(QmeError::DomainError(format!("T must be positive, got {temperature}")));
        }
        if !(eps.is_finite() && mu.is_finite()) {
            return Err(QmeError::DomainError("eps and mu must be finite".into()));
        }
        Ok(Self {
            big_gamma,
            temperature,
            eps,
            mu,
        })
    }

    /// Γ = 1 units with μ = 0, so that the level energy equals the detuning.
    pub fn from_detuning(detuning: f64, temperature: f64) -> Result<Self> {
        Self::new(1.0, temperature, detuning, 0.0)
    }

    pub fn detuning(&self) -> f64 {
        self.eps - self.mu
    }

    /// Eigenvalue poles {0, ε − iΓ/2, −ε − iΓ/2, −iΓ}.
    pub fn eigenvalue_poles(&self) -> [C64; 4] {
        let h = self.big_gamma / 2.0;
        [
            C64::new(0.0, 0.0),
            C64::new(self.eps, -h),
            C64::new(-self.eps, -h),
            C64::new(0.0, -self.big_gamma),
        ]
    }

    /// Eigenvector poles ±ϵ − iΓ/2 − iπT(2n+1), n = 0..count.
    pub fn eigenvector_poles(&self, count: usize) -> Vec<C64> {
        let d = self.detuning();
        let h = self.big_gamma / 2.0;
        (0..count)
            .flat_map(|n| {
                let im = -h - PI * self.temperature * (2 * n + 1) as f64;
                [C64::new(d, im), C64::new(-d, im)]
            })
            .collect()
    }
}

pub fn identity_vec() -> OperatorVec {
    OperatorVec::identity(2)
}

/// (−𝟙)^N = 𝟙 − 2d†d
pub fn parity_vec() -> OperatorVec {
    OperatorVec::from_real(2, &[1.0, 0.0, 0.0, -1.0]).expect("static shape")
}

pub fn d_dagger_vec() -> OperatorVec {
    OperatorVec::basis(2, 1, 0)
}

pub fn d_vec() -> OperatorVec {
    OperatorVec::basis(2, 0, 1)
}

/// k(t) = 2T sin(ϵt)/sinh(πTt)
pub fn rlm_k(t: f64, p: &RlmParams) -> f64 {
    let d = p.detuning();
    if t == 0.0 {
        return 2.0 * d / PI;
    }
    2.0 * p.temperature * (d * t).sin() / (PI * p.temperature * t).sinh()
}

/// k̂(ω) from the digamma representation; valid in the whole plane off its poles.
pub fn rlm_khat(omega: C64, p: &RlmParams) -> Result<C64> {
    let d = p.detuning();
    if d == 0.0 {
        return Ok(C64::new(0.0, 0.0));
    }
    let scale = 2.0 * PI * p.temperature;
    let a = C64::new(0.5, 0.0) - I * (omega - d) / scale;
    let b = C64::new(0.5, 0.0) - I * (omega + d) / scale;
    Ok((digamma(a)? - digamma(b)?) / (I * PI))
}

/// k̂(ω) by direct quadrature of the Laplace integral; requires Im ω > −πT.
pub fn rlm_khat_quadrature(omega: C64, p: &RlmParams) -> Result<C64> {
    let decay = PI * p.temperature + omega.im;
    if decay <= 0.0 {
        return Err(QmeError::ConvergenceRegion(omega));
    }
    let panel = (4.0 / decay).min(10.0);
    integrate_vec_halfline(
        |t| vec![(I * omega * t).exp() * rlm_k(t, p)],
        0.0,
        panel,
        1e-15,
        1_000_000,
    )
    .map(|v| v[0])
}

/// g(t) = ∫₀^t e^{−Γs/2} k(s) ds
pub fn rlm_g(t: f64, p: &RlmParams) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let pieces = (t * (p.detuning().abs() + p.big_gamma)).ceil().max(1.0) as usize;
    let h = t / pieces as f64;
    (0..pieces)
        .map(|j| {
            integrate_real(
                |s| (-p.big_gamma * s / 2.0).exp() * rlm_k(s, p),
                j as f64 * h,
                (j + 1) as f64 * h,
                1e-16,
                1e-14,
            )
            .expect("smooth integrand")
        })
        .sum()
}

/// g on an increasing list of times, accumulated panel by panel.
pub fn rlm_g_on(times: &[f64], p: &RlmParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    let mut last = 0.0;
    for &t in times {
        acc += rlm_g_between(last, t, p);
        last = t;
        out.push(acc);
    }
    out
}

fn rlm_g_between(a: f64, b: f64, p: &RlmParams) -> f64 {
    if b <= a {
        return 0.0;
    }
    let pieces = ((b - a) * (p.detuning().abs() + p.big_gamma)).ceil().max(1.0) as usize;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|j| {
            integrate_real(
                |s| (-p.big_gamma * s / 2.0).exp() * rlm_k(s, p),
                a + j as f64 * h,
                a + (j + 1) as f64 * h,
                1e-16,
                1e-14,
            )
            .expect("smooth integrand")
        })
        .sum()
}

/// g(∞) = k̂(iΓ/2)
pub fn rlm_g_infinity(p: &RlmParams) -> Result<f64> {
    rlm_khat(C64::new(0.0, p.big_gamma / 2.0), p).map(|z| z.re)
}

/// p(t) in closed form through Lerch Φ and digamma Ψ; falls back to the integral
/// representation when e^{−2πTt} is too close to one for the series.
pub fn rlm_p(t: f64, p: &RlmParams) -> Result<f64> {
    if t <= 0.0 {
        return Ok(0.0);
    }
    let z = (-2.0 * PI * p.temperature * t).exp();
    if z > LERCH_Z_MAX {
        return rlm_p_integral(t, p);
    }
    let gg = p.big_gamma;
    let d = p.detuning();
    let scale = 2.0 * PI * p.temperature;
    // 1/sinh(Γt/2) = 2 e^{−Γt/2}/(1 − e^{−Γt})
    let denom = -(-gg * t).exp_m1();
    let mut total = 0.0;
    for eta in [1.0, -1.0] {
        let a = C64::new(0.5 + eta * gg / (2.0 * scale), d / scale);
        let lerch = lerch_phi(C64::new(z, 0.0), a)?;
        let front = C64::new(-(PI * p.temperature + gg / 2.0) * t, -d * t).exp() * (2.0 / (PI * denom));
        let back = 2.0 * ((eta - 1.0) * gg * t / 2.0).exp() / (PI * denom);
        total += eta * (front * lerch + digamma(a)? * back).im;
    }
    Ok(total)
}

/// p(t) = ∫₀^t (1 − e^{−Γ(t−s)}) e^{−Γs/2} k(s) ds / (1 − e^{−Γt}), the integral identity
/// after one integration by parts.
pub fn rlm_p_integral(t: f64, p: &RlmParams) -> Result<f64> {
    if t <= 0.0 {
        return Ok(0.0);
    }
    let gg = p.big_gamma;
    let pieces = (t * (p.detuning().abs() + gg)).ceil().max(1.0) as usize;
    let h = t / pieces as f64;
    let mut num = 0.0;
    for j in 0..pieces {
        num += integrate_real(
            |s| -(-gg * (t - s)).exp_m1() * (-gg * s / 2.0).exp() * rlm_k(s, p),
            j as f64 * h,
            (j + 1) as f64 * h,
            1e-17,
            1e-14,
        )?;
    }
    Ok(num / -(-gg * t).exp_m1())
}

fn coherence_part(f: impl Fn(f64) -> C64) -> Superoperator {
    // η = +: d_+† = d ; η = −: d_−† = d†
    &Superoperator::outer(&d_vec(), &d_vec()).scale(f(1.0))
        + &Superoperator::outer(&d_dagger_vec(), &d_dagger_vec()).scale(f(-1.0))
}

fn parity_outer(bra: &OperatorVec) -> Superoperator {
    Superoperator::outer(&parity_vec(), bra)
}

pub fn rlm_propagator(t: f64, p: &RlmParams) -> Result<Superoperator> {
    let h = p.big_gamma / 2.0;
    let pt = rlm_p(t, p)?;
    let decay = (-p.big_gamma * t).exp();
    let coh = coherence_part(|eta| C64::new(-h * t, eta * p.eps * t).exp());
    let one = identity_vec();
    let par = parity_vec();
    let stationary_like = Superoperator::outer(&(&one + &par.scale(pt.into())), &one).scale_re(0.5);
    let relax = parity_outer(&(&par - &one.scale(pt.into()))).scale_re(0.5 * decay);
    Ok(&(&coh + &stationary_like) + &relax)
}

fn generator_from_g(g: C64, p: &RlmParams) -> Superoperator {
    let h = p.big_gamma / 2.0;
    let coh = coherence_part(|eta| C64::new(-eta * p.eps, -h));
    let par = parity_vec();
    let relax = parity_outer(&(&par - &identity_vec().scale(g.conj()))).scale(C64::new(0.0, -h));
    &coh + &relax
}

/// G(t) with g(t) from quadrature.
pub fn rlm_generator(t: f64, p: &RlmParams) -> Superoperator {
    generator_from_g(rlm_g(t, p).into(), p)
}

/// G(t) built from a precomputed g(t).
pub fn rlm_generator_with_g(g: f64, p: &RlmParams) -> Superoperator {
    generator_from_g(g.into(), p)
}

pub fn rlm_g_infty(p: &RlmParams) -> Result<Superoperator> {
    Ok(generator_from_g(rlm_g_infinity(p)?.into(), p))
}

fn check_poles(e: C64, p: &RlmParams) -> Result<()> {
    let mut poles = p.eigenvalue_poles().to_vec();
    poles.extend(p.eigenvector_poles(64));
    for pole in poles {
        if (e - pole).norm() < 1e-12 {
            return Err(QmeError::PoleHit { e, pole });
        }
    }
    Ok(())
}

/// K̂(E): the generator structure with g replaced by k̂(E + iΓ/2).
pub fn rlm_kernel_hat(e: C64, p: &RlmParams) -> Result<Superoperator> {
    let kh = rlm_khat(e + I * (p.big_gamma / 2.0), p)?;
    let k = generator_from_g(kh, p);
    if !k.is_finite() {
        return Err(QmeError::PoleHit { e, pole: e });
    }
    Ok(k)
}

/// Π̂(E) from the Laplace-transformed equations of motion of each component.
pub fn rlm_propagator_hat(e: C64, p: &RlmParams) -> Result<Superoperator> {
    check_poles(e, p)?;
    let h = p.big_gamma / 2.0;
    let coh = coherence_part(|eta| I / (e + eta * p.eps + I * h));
    let one = identity_vec();
    let par = parity_vec();
    let g_hat = I / e * rlm_khat(e + I * h, p)?;
    let trace_part = Superoperator::outer(&one, &one).scale(I / e * 0.5);
    let bra = &par + &one.scale((g_hat * p.big_gamma).conj());
    let relax = parity_outer(&bra).scale(I / (e + I * p.big_gamma) * 0.5);
    Ok(&(&coh + &trace_part) + &relax)
}

pub fn rlm_kernel_local(p: &RlmParams) -> Superoperator {
    generator_from_g(C64::new(0.0, 0.0), p)
}

/// K_n(t) = (iΓ/2) e^{−Γt/2} k(t) |(−𝟙)^N⟩⟩⟨⟨𝟙|
pub fn rlm_kernel_nonlocal(t: f64, p: &RlmParams) -> Superoperator {
    let c = I * (p.big_gamma / 2.0) * ((-p.big_gamma * t / 2.0).exp() * rlm_k(t, p));
    parity_outer(&identity_vec()).scale(c)
}

pub fn rlm_kernel_split(p: &RlmParams) -> KernelSplit {
    let (pk, pn) = (*p, *p);
    KernelSplit::translational(
        rlm_kernel_local(p),
        Arc::new(move |t| rlm_kernel_nonlocal(t, &pn)),
        Some(Arc::new(move |e| rlm_kernel_hat(e, &pk))),
        p.big_gamma / 2.0 + PI * p.temperature,
    )
}

/// Laplace transform of Π(t) by quadrature; used in validation.
pub fn rlm_propagator_hat_quadrature(e: C64, p: &RlmParams) -> Result<Superoperator> {
    let v = integrate_vec_halfline(
        |t| {
            crate::quad::superop_to_vec(&rlm_propagator(t, p).expect("valid time").scale((I * e * t).exp()))
        },
        0.0,
        2.0,
        1e-13,
        10_000,
    )?;
    Ok(crate::quad::vec_to_superop(2, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate_complex;
    use crate::liouville::{biorthonormalize, check_trace_preserving, spectral_decompose};
    use approx::assert_abs_diff_eq;

    fn fig5() -> RlmParams {
        RlmParams::from_detuning(2.0 * PI, 0.1 / (2.0 * PI)).unwrap()
    }

    #[test]
    fn basis_pairings() {
        let (one, par) = (identity_vec(), parity_vec());
        assert_abs_diff_eq!(one.inner(&one).re, 2.0);
        assert_abs_diff_eq!(par.inner(&par).re, 2.0);
        assert_abs_diff_eq!(one.inner(&par).norm(), 0.0);
        assert_abs_diff_eq!(d_vec().inner(&d_vec()).re, 1.0);
        assert_abs_diff_eq!(d_vec().inner(&d_dagger_vec()).norm(), 0.0);
    }

    #[test]
    fn k_values() {
        let p = fig5();
        assert_abs_diff_eq!(rlm_k(0.0, &p), 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rlm_k(1e-9, &p), 4.0, epsilon = 1e-9);
        // 50-digit reference values
        assert_abs_diff_eq!(rlm_k(1.0, &p), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rlm_k(0.3, &p), 2.018_128_929_022_177_6, epsilon = 1e-12);
        assert_abs_diff_eq!(rlm_k(2.7, &p), -0.223_565_258_083_085_2, epsilon = 1e-12);
        let flat = RlmParams::new(1.0, 0.2, 0.4, 0.4).unwrap();
        assert_eq!(rlm_k(2.0, &flat), 0.0);
        assert_eq!(rlm_khat(C64::new(0.3, 0.1), &flat).unwrap(), C64::new(0.0, 0.0));
    }

    #[test]
    fn khat_digamma_matches_quadrature() {
        let p = fig5();
        let w = C64::new(0.0, 0.5);
        let q = rlm_khat_quadrature(w, &p).unwrap();
        let d = rlm_khat(w, &p).unwrap();
        assert_abs_diff_eq!((q - d).norm(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.re, 0.949_444_884_960, epsilon = 1e-9);
        let other = RlmParams::new(1.0, 0.3, 1.2, -0.4).unwrap();
        for w in [C64::new(0.7, 0.2), C64::new(-2.0, 1.0), C64::new(3.0, -0.5)] {
            let q = rlm_khat_quadrature(w, &other).unwrap();
            let d = rlm_khat(w, &other).unwrap();
            assert_abs_diff_eq!((q - d).norm(), 0.0, epsilon = 1e-9);
        }
        assert!(matches!(rlm_khat_quadrature(C64::new(0.0, -1.0), &other), Err(QmeError::ConvergenceRegion(_))));
    }

    #[test]
    fn khat_conjugation_identity() {
        let p = RlmParams::new(1.0, 0.3, 1.2, -0.4).unwrap();
        for k in 0..10 {
            let w = C64::new(-2.0 + 0.45 * k as f64, 0.1 + 0.07 * k as f64);
            let lhs = rlm_khat(w, &p).unwrap().conj();
            let rhs = rlm_khat_quadrature(-w.conj(), &p).unwrap();
            assert_abs_diff_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn g_limits() {
        let p = fig5();
        assert_eq!(rlm_g(0.0, &p), 0.0);
        assert_abs_diff_eq!(rlm_g(400.0, &p), rlm_g_infinity(&p).unwrap(), epsilon = 1e-10);
        let grid = [0.5, 1.0, 2.5];
        let acc = rlm_g_on(&grid, &p);
        for (t, g) in grid.iter().zip(acc) {
            assert_abs_diff_eq!(g, rlm_g(*t, &p), epsilon = 1e-13);
        }
    }

    #[test]
    fn p_closed_form_matches_integral_identity() {
        let p = fig5();
        assert_abs_diff_eq!(rlm_p(0.5, &p).unwrap(), 0.770_340_308_286_3, epsilon = 1e-10);
        assert_abs_diff_eq!(rlm_p(1.0, &p).unwrap(), 0.894_540_612_186_4, epsilon = 1e-10);
        assert_abs_diff_eq!(rlm_p(3.0, &p).unwrap(), 0.944_275_814_823_7, epsilon = 1e-10);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let t: f64 = rng.gen_range(0.01..10.0);
            // literal form Γ/(1 − e^{−Γt}) ∫₀^t e^{−Γ(t−s)} g(s) ds
            let outer = integrate_real(|s| (-(t - s)).exp() * rlm_g(s, &p), 0.0, t, 1e-14, 1e-12).unwrap();
            let literal = outer / (1.0 - (-t).exp());
            assert_abs_diff_eq!(rlm_p(t, &p).unwrap(), literal, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(rlm_p(200.0, &p).unwrap(), rlm_g_infinity(&p).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn propagator_and_generator() {
        let p = fig5();
        assert!(rlm_propagator(0.0, &p).unwrap().max_abs_diff(&Superoperator::identity(2)) < 1e-14);
        for t in [0.3, 1.1, 4.0] {
            let pi = rlm_propagator(t, &p).unwrap();
            assert!(check_trace_preserving(&(&pi - &Superoperator::identity(2)), 1e-14));
            let h = 1e-5;
            let d = (&rlm_propagator(t + h, &p).unwrap() - &rlm_propagator(t - h, &p).unwrap()).scale_re(0.5 / h);
            let lhs = &rlm_generator(t, &p) * &pi;
            assert!(lhs.max_abs_diff(&d.scale(I)) < 1e-7);
            let g = spectral_decompose(&rlm_generator(t, &p), 1e-12).unwrap();
            assert!(g.eigenvalues.iter().any(|z| (z - C64::new(-p.eps, -0.5)).norm() < 1e-12));
            assert!(g.eigenvalues.iter().any(|z| (z - C64::new(p.eps, -0.5)).norm() < 1e-12));
        }
    }

    #[test]
    fn propagator_hat_identities() {
        let p = fig5();
        let e = C64::new(0.4, 0.8);
        let quad = rlm_propagator_hat_quadrature(e, &p).unwrap();
        let closed = rlm_propagator_hat(e, &p).unwrap();
        assert!(quad.max_abs_diff(&closed) < 1e-9);
        for e in [C64::new(0.4, 0.8), C64::new(-3.0, -0.2), C64::new(6.0, 0.05)] {
            let resolvent = rlm_propagator_hat(e, &p).unwrap();
            let via = &Superoperator::scalar(2, e) - &resolvent.inverse().unwrap().scale(I);
            assert!(via.max_abs_diff(&rlm_kernel_hat(e, &p).unwrap()) < 1e-9);
        }
        assert!(matches!(rlm_propagator_hat(C64::new(0.0, -1.0), &p), Err(QmeError::PoleHit { .. })));
    }

    #[test]
    fn exact_stationary_relation() {
        let p = fig5();
        let k0 = rlm_kernel_hat(C64::new(0.0, 0.0), &p).unwrap();
        assert!(rlm_g_infty(&p).unwrap().max_abs_diff(&k0) < 1e-12);
    }

    #[test]
    fn table_poles() {
        let p = fig5();
        for e in p.eigenvalue_poles() {
            let m = &Superoperator::scalar(2, e) - &rlm_kernel_hat(e, &p).unwrap();
            assert!(m.matrix().determinant().norm() < 1e-8);
        }
        // eigenvector poles show up as poles of Π̂ matrix elements, not as zeros of det
        for pole in p.eigenvector_poles(4) {
            let near = |delta: f64| rlm_propagator_hat(pole + delta, &p).unwrap().get(3, 0).norm();
            let ratio = near(1e-6) / near(1e-4);
            assert!((ratio - 100.0).abs() < 1.0, "ratio {ratio}");
        }
    }

    #[test]
    fn sampled_eigenvectors_give_duals() {
        let p = fig5();
        let g_inf = rlm_g_infinity(&p).unwrap();
        let rights = vec![
            (&identity_vec() + &parity_vec().scale(g_inf.into())).scale(0.5.into()),
            d_vec(),
            d_dagger_vec(),
            parity_vec(),
        ];
        let duals = biorthonormalize(&rights).unwrap();
        let expected = (&parity_vec() - &identity_vec().scale(g_inf.into())).scale(0.5.into());
        assert!(duals[3].max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn kernel_split_parts() {
        let p = fig5();
        let local = rlm_kernel_local(&p);
        let far = rlm_kernel_hat(C64::new(0.0, 1e3), &p).unwrap();
        assert!(far.max_abs_diff(&local) < 1e-2);
        for t in [0.0, 0.7, 5.0] {
            assert!(check_trace_preserving(&rlm_kernel_nonlocal(t, &p), 1e-15));
            let integral = integrate_complex(|s| (-s / 2.0).exp() * rlm_k(s, &p) * C64::new(1.0, 0.0), 0.0, t, 1e-15, 1e-13).unwrap();
            let g = &local + &parity_outer(&identity_vec()).scale(I * 0.5 * integral);
            assert!(g.max_abs_diff(&rlm_generator(t, &p)) < 1e-12);
        }
    }

    #[test]
    fn occupation_reentrance() {
        let p = fig5();
        let rho0 = OperatorVec::basis(2, 0, 0);
        let occ = |t: f64| rlm_propagator(t, &p).unwrap().apply(&rho0).entry(1, 1).re;
        let samples: Vec<f64> = (1..400).map(|k| occ(k as f64 * 0.025)).collect();
        let stationary = occ(200.0);
        let peak = samples.iter().cloned().fold(0.0, f64::max);
        assert!(peak > stationary + 0.02);
        let k0 = rlm_kernel_hat(C64::new(0.0, 0.0), &p).unwrap();
        let semi: Vec<f64> = (1..400)
            .map(|k| crate::liouville::superop_exp(&k0, -(k as f64) * 0.025).unwrap().apply(&rho0).entry(1, 1).re)
            .collect();
        assert!(semi.windows(2).all(|w| w[1] >= w[0] - 1e-15));
    }
}
