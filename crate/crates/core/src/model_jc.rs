//! Dissipative Jaynes–Cummings model: a two-level system coupled to a Lorentzian
//! reservoir of width γ and strength Γ, transition frequency ε.
//!
//! All superoperators share the structure
//!   a·[|11⟩⟩−|00⟩⟩]⟨⟨11| + b·|01⟩⟩⟨⟨01| + c·|10⟩⟩⟨⟨10|   (+ |00⟩⟩⟨⟨𝟙| for propagators)
//! with basis indices 0 = |00⟩⟩, 1 = |01⟩⟩, 2 = |10⟩⟩, 3 = |11⟩⟩.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64 as C64;

use crate::error::{QmeError, Result};
use crate::fixedpoint::KernelSplit;
use crate::liouville::Superoperator;
use crate::quad::{superop_to_vec, vec_to_superop, Bromwich};

const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JcParams {
    pub gamma: f64,
    pub big_gamma: f64,
    pub eps: f64,
    /// Singular-time guard as a fraction of the period 2π/Ω.
    pub guard_fraction: f64,
}

impl JcParams {
    pub fn new(gamma: f64, big_gamma: f64, eps: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(QmeError::DomainError(format!("gamma must be positive, got {gamma}")));
        }
        if !(big_gamma > 0.0 && big_gamma.is_finite()) {
            return Err(QmeError::DomainError(format!("Gamma must be positive, got {big_gamma}")));
        }
        if !eps.is_finite() {
            return Err(QmeError::DomainError("eps must be finite".into()));
        }
        Ok(Self {
            gamma,
            big_gamma,
            eps,
            guard_fraction: 1e-6,
        })
    }

    /// γ = 1 units.
    pub fn from_ratio(gamma_ratio: f64, eps: f64) -> Result<Self> {
        Self::new(1.0, gamma_ratio, eps)
    }

    pub fn is_overdamped(&self) -> bool {
        self.gamma >= 2.0 * self.big_gamma
    }

    /// γ'² = γ(γ − 2Γ)
    pub fn gamma_prime_sq(&self) -> f64 {
        self.gamma * (self.gamma - 2.0 * self.big_gamma)
    }

    /// γ', purely imaginary (= iΩ) in the underdamped regime.
    pub fn gamma_prime(&self) -> C64 {
        C64::new(self.gamma_prime_sq(), 0.0).sqrt()
    }

    pub fn omega(&self) -> Option<f64> {
        (!self.is_overdamped()).then(|| (-self.gamma_prime_sq()).sqrt())
    }

    /// The n-th singular time of the generator, n ≥ 1.
    pub fn singular_time(&self, n: usize) -> Option<f64> {
        let omega = self.omega()?;
        if omega == 0.0 || n == 0 {
            return None;
        }
        Some(2.0 * PI / omega * (n as f64 - (omega / self.gamma).atan() / PI))
    }

    pub fn singular_times_until(&self, t_max: f64) -> Vec<f64> {
        (1..)
            .map_while(|n| self.singular_time(n).filter(|&t| t <= t_max))
            .collect()
    }

    pub fn guard(&self) -> f64 {
        self.omega()
            .map(|w| self.guard_fraction * 2.0 * PI / w)
            .unwrap_or(0.0)
    }

    /// Poles of Π̂(E): E0..E7.
    pub fn poles(&self) -> [C64; 8] {
        let g = self.gamma;
        let gp = self.gamma_prime();
        let e = C64::new(self.eps, 0.0);
        let half = |x: C64| x * 0.5;
        [
            C64::new(0.0, 0.0),
            e - I * half(g - gp),
            -e - I * half(g - gp),
            -I * (g - gp),
            e - I * half(g + gp),
            -e - I * half(g + gp),
            -I * g,
            -I * (g + gp),
        ]
    }
}

/// e^{−γt/2}·cosh(γ't/2) and e^{−γt/2}·sinh(γ't/2)/γ' for γ'² = `q` (any sign),
/// written so that neither overflows nor loses accuracy near γ' = 0.
fn damped_cosh_sinhc(q: f64, decay: f64, t: f64) -> (f64, f64) {
    let x = q * t * t / 4.0;
    let damp = (-decay * t).exp();
    if x.abs() < 1e-2 {
        let (mut c, mut s) = (0.0, 0.0);
        let mut term_c = 1.0;
        let mut term_s = 1.0;
        for k in 0..12 {
            c += term_c;
            s += term_s;
            let kf = k as f64;
            term_c *= x / ((2.0 * kf + 1.0) * (2.0 * kf + 2.0));
            term_s *= x / ((2.0 * kf + 2.0) * (2.0 * kf + 3.0));
        }
        (damp * c, damp * s * t / 2.0)
    } else if q > 0.0 {
        let r = q.sqrt();
        let ep = ((r / 2.0 - decay) * t).exp();
        let em = ((-r / 2.0 - decay) * t).exp();
        (0.5 * (ep + em), 0.5 * (ep - em) / r)
    } else {
        let w = (-q).sqrt();
        (damp * (w * t / 2.0).cos(), damp * (w * t / 2.0).sin() / w)
    }
}

/// π(t) = e^{−iεt} e^{−γt/2} [cosh(γ't/2) + γ sinh(γ't/2)/γ'].
pub fn jc_pi(t: f64, p: &JcParams) -> C64 {
    let (c, s) = damped_cosh_sinhc(p.gamma_prime_sq(), p.gamma / 2.0, t);
    C64::from_polar(c + p.gamma * s, -p.eps * t)
}

/// π̇(t)/π(t); diverges at the singular times of the underdamped regime.
pub fn jc_pi_log_derivative(t: f64, p: &JcParams) -> C64 {
    let q = p.gamma_prime_sq();
    // any common factor cancels in the ratio; scale out the growing exponential
    let (c, s) = damped_cosh_sinhc(q, q.max(0.0).sqrt() / 2.0, t);
    let g = p.gamma;
    C64::new(-g / 2.0 + (q * s + g * c) / (2.0 * (c + g * s)), -p.eps)
}

/// a·[|11⟩⟩−|00⟩⟩]⟨⟨11| + b·|01⟩⟩⟨⟨01| + c·|10⟩⟩⟨⟨10|
pub fn jc_structure(a: C64, b: C64, c: C64) -> Superoperator {
    let mut s = Superoperator::zeros(2);
    let m = s.matrix_mut();
    m[(3, 3)] = a;
    m[(0, 3)] = -a;
    m[(1, 1)] = b;
    m[(2, 2)] = c;
    s
}

pub fn jc_propagator(t: f64, p: &JcParams) -> Superoperator {
    let pi = jc_pi(t, p);
    let mut s = jc_structure(C64::new(pi.norm_sqr(), 0.0), pi, pi.conj());
    let m = s.matrix_mut();
    m[(0, 0)] = C64::new(1.0, 0.0);
    m[(0, 3)] += C64::new(1.0, 0.0);
    s
}

fn check_singular(t: f64, p: &JcParams) -> Result<()> {
    if let Some(omega) = p.omega() {
        let period = 2.0 * PI / omega;
        let guard = p.guard();
        let phase = (omega / p.gamma).atan() / PI;
        let n = (t / period + phase).round();
        if n >= 1.0 {
            let tn = period * (n - phase);
            if (t - tn).abs() <= guard {
                return Err(QmeError::SingularTime { t, tn });
            }
        }
    }
    Ok(())
}

/// G(t) = iΠ̇(t)Π(t)⁻¹.
pub fn jc_generator(t: f64, p: &JcParams) -> Result<Superoperator> {
    check_singular(t, p)?;
    let r = jc_pi_log_derivative(t, p);
    let g = jc_structure(C64::new(0.0, 2.0 * r.re), I * r, I * r.conj());
    if !g.is_finite() {
        let tn = t;
        return Err(QmeError::SingularTime { t, tn });
    }
    Ok(g)
}

/// Transform of π(t): (γ − iu)/(γΓ/2 − iγu − u²), u = E − ε.
pub fn jc_pi_hat(e: C64, p: &JcParams) -> C64 {
    let u = e - p.eps;
    let g = p.gamma;
    (g - I * u) / (g * p.big_gamma / 2.0 - I * g * u - u * u)
}

/// Transform of |π(t)|²: (s² + γs + γΓ)/(s(s² − γ'²)), s = γ − iE.
pub fn jc_occupation_hat(e: C64, p: &JcParams) -> C64 {
    let s = p.gamma - I * e;
    let g = p.gamma;
    (s * s + g * s + g * p.big_gamma) / (s * (s * s - p.gamma_prime_sq()))
}

fn check_poles(e: C64, p: &JcParams) -> Result<()> {
    for pole in p.poles() {
        if (e - pole).norm() < 1e-12 {
            return Err(QmeError::PoleHit { e, pole });
        }
    }
    Ok(())
}

pub fn jc_propagator_hat(e: C64, p: &JcParams) -> Result<Superoperator> {
    check_poles(e, p)?;
    let pi_hat = jc_pi_hat(e, p);
    let pi_conj_hat = jc_pi_hat(-e.conj(), p).conj();
    let occ = jc_occupation_hat(e, p);
    let mut s = jc_structure(occ, pi_hat, pi_conj_hat);
    let m = s.matrix_mut();
    let trace_part = I / e;
    m[(0, 0)] = trace_part;
    m[(0, 3)] += trace_part;
    Ok(s)
}

/// Occupation branch k_o(E) = −iγΓ(s + γ)/(s² + γs + γΓ).
pub fn jc_k_occupation(e: C64, p: &JcParams) -> C64 {
    let s = p.gamma - I * e;
    let g = p.gamma;
    -I * g * p.big_gamma * (s + g) / (s * s + g * s + g * p.big_gamma)
}

/// Coherence branches k_±(E) = ±ε + (γΓ/2)/(E ∓ ε + iγ).
pub fn jc_k_coherence(e: C64, sign: f64, p: &JcParams) -> C64 {
    let eps = sign * p.eps;
    eps + (p.gamma * p.big_gamma / 2.0) / (e - eps + I * p.gamma)
}

pub fn jc_kernel_hat(e: C64, p: &JcParams) -> Result<Superoperator> {
    let zero_pi = C64::new(p.eps, -p.gamma);
    let zero_pi_conj = C64::new(-p.eps, -p.gamma);
    for z in [zero_pi, zero_pi_conj] {
        if (e - z).norm() < 1e-12 {
            return Err(QmeError::TransformZero(e));
        }
    }
    let k = jc_structure(
        jc_k_occupation(e, p),
        jc_k_coherence(e, 1.0, p),
        jc_k_coherence(e, -1.0, p),
    );
    if !k.is_finite() {
        return Err(QmeError::TransformZero(e));
    }
    Ok(k)
}

/// Stationary generator, overdamped regime.
pub fn jc_g_infty(p: &JcParams) -> Result<Superoperator> {
    if !p.is_overdamped() {
        return Err(QmeError::WrongRegime("jc_g_infty requires gamma >= 2 Gamma"));
    }
    let rate = (p.gamma - p.gamma_prime_sq().sqrt()) / 2.0;
    Ok(jc_structure(
        C64::new(0.0, -2.0 * rate),
        C64::new(p.eps, -rate),
        C64::new(-p.eps, -rate),
    ))
}

/// Time-averaged stationary generator of the underdamped regime (π̇/π → −iε − γ/2).
pub fn jc_g_infty_reg(p: &JcParams) -> Result<Superoperator> {
    if p.is_overdamped() {
        return Err(QmeError::WrongRegime("jc_g_infty_reg requires gamma < 2 Gamma"));
    }
    let g = p.gamma;
    Ok(jc_structure(
        C64::new(0.0, -g),
        C64::new(p.eps, -g / 2.0),
        C64::new(-p.eps, -g / 2.0),
    ))
}

/// Time-local part: the E-independent limit of K̂(E), equal to G(0).
pub fn jc_kernel_local(p: &JcParams) -> Superoperator {
    jc_structure(
        C64::new(0.0, 0.0),
        C64::new(p.eps, 0.0),
        C64::new(-p.eps, 0.0),
    )
}

/// Smooth part K_n(t), the inverse transform of K̂(E) − K_l in closed form.
pub fn jc_kernel_nonlocal(t: f64, p: &JcParams) -> Superoperator {
    let g = p.gamma;
    let gg = p.big_gamma;
    let (c, s) = damped_cosh_sinhc(g * (g - 4.0 * gg), 1.5 * g, t);
    let occ = -I * g * gg * (c + g * s);
    let coh = |sign: f64| C64::new(-g * t, -sign * p.eps * t).exp() * (-I * g * gg / 2.0);
    jc_structure(occ, coh(1.0), coh(-1.0))
}

/// K_n(t) by Bromwich inversion of K̂(E) − K_l along Im E = γ/2; validation route.
pub fn jc_kernel_nonlocal_bromwich(t: f64, p: &JcParams) -> Result<Superoperator> {
    let local = jc_kernel_local(p);
    let rate = p.gamma.max(p.big_gamma).max(p.eps.abs());
    let far = C64::new(0.0, 1e7 * rate);
    let f0 = superop_to_vec(&(&jc_kernel_hat(far, p)? - &local).scale(-I * far));
    let b = Bromwich {
        c: 0.5 * p.gamma,
        cutoff: 4000.0 * rate,
        z0: C64::new(0.0, -p.gamma),
    };
    let v = b.invert(
        |e| {
            jc_kernel_hat(e, p)
                .map(|k| superop_to_vec(&(&k - &local)))
                .unwrap_or_else(|_| vec![C64::new(0.0, 0.0); 16])
        },
        &f0,
        t,
        1e-10,
    )?;
    Ok(vec_to_superop(2, v))
}

pub fn jc_kernel_split(p: &JcParams) -> KernelSplit {
    let (pk, pn) = (*p, *p);
    KernelSplit::translational(
        jc_kernel_local(p),
        Arc::new(move |t| jc_kernel_nonlocal(t, &pn)),
        Some(Arc::new(move |e| jc_kernel_hat(e, &pk))),
        p.gamma,
    )
}

/// The occupation block of the kernel alone (coherence entries set to zero). The
/// structure a·A + b·P01 + c·P10 is closed under products, so the occupation block of
/// the fixed-point iteration evolves independently of the coherence blocks.
pub fn jc_occupation_kernel_split(p: &JcParams) -> KernelSplit {
    let (pk, pn) = (*p, *p);
    let zero = C64::new(0.0, 0.0);
    KernelSplit::translational(
        Superoperator::zeros(2),
        Arc::new(move |t| jc_structure(jc_kernel_nonlocal(t, &pn).get(3, 3), zero, zero)),
        Some(Arc::new(move |e| Ok(jc_structure(jc_k_occupation(e, &pk), zero, zero)))),
        p.gamma,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville::{check_hermicity_preserving, check_trace_preserving, spectral_decompose, OperatorVec};
    use crate::quad::{integrate_superop, integrate_vec_halfline};
    use approx::assert_abs_diff_eq;

    fn over() -> JcParams {
        JcParams::from_ratio(0.495, 1.0).unwrap()
    }

    fn under() -> JcParams {
        JcParams::from_ratio(13.0, 20.0).unwrap()
    }

    /// π from the pseudomode equations π̇ = −iεπ − b, ḃ = (γΓ/2)π − (iε+γ)b by RK4.
    fn pi_by_ode(t: f64, p: &JcParams) -> C64 {
        let n = 20_000;
        let h = t / n as f64;
        let f = |x: [C64; 2]| {
            [
                -I * p.eps * x[0] - x[1],
                x[0] * (p.gamma * p.big_gamma / 2.0) - (I * p.eps + p.gamma) * x[1],
            ]
        };
        let mut y = [C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        let add = |a: [C64; 2], b: [C64; 2], s: f64| [a[0] + b[0] * s, a[1] + b[1] * s];
        for _ in 0..n {
            let k1 = f(y);
            let k2 = f(add(y, k1, h / 2.0));
            let k3 = f(add(y, k2, h / 2.0));
            let k4 = f(add(y, k3, h));
            y = [
                y[0] + (k1[0] + k2[0] * 2.0 + k3[0] * 2.0 + k4[0]) * (h / 6.0),
                y[1] + (k1[1] + k2[1] * 2.0 + k3[1] * 2.0 + k4[1]) * (h / 6.0),
            ];
        }
        y[0]
    }

    #[test]
    fn pi_values() {
        let p = JcParams::from_ratio(0.495, 0.0).unwrap();
        assert_eq!(jc_pi(0.0, &p), C64::new(1.0, 0.0));
        let v = jc_pi(1.0, &p);
        let closed = (-0.5f64).exp() * (0.05f64.cosh() + 10.0 * 0.05f64.sinh());
        assert_abs_diff_eq!(v.re, closed, epsilon = 1e-14);
        assert_abs_diff_eq!(v.re, 0.910_680_687_207_563_1, epsilon = 1e-14);
        assert_abs_diff_eq!(v.norm_sqr(), 0.829_339_314_052_839_4, epsilon = 1e-13);
        for q in [over(), under(), JcParams::from_ratio(0.5, 2.0).unwrap()] {
            for t in [0.3, 1.7, 4.0] {
                assert_abs_diff_eq!((jc_pi(t, &q) - pi_by_ode(t, &q)).norm(), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pi_bounded_and_continuous_at_boundary() {
        let crit = JcParams::from_ratio(0.5, 0.0).unwrap();
        for t in [0.1, 1.0, 5.0] {
            let limit = (-t / 2.0f64).exp() * (1.0 + t / 2.0);
            assert_abs_diff_eq!(jc_pi(t, &crit).re, limit, epsilon = 1e-14);
            let below = JcParams::from_ratio(0.5 - 1e-9, 0.0).unwrap();
            let above = JcParams::from_ratio(0.5 + 1e-9, 0.0).unwrap();
            assert_abs_diff_eq!(jc_pi(t, &below).re, limit, epsilon = 1e-7);
            assert_abs_diff_eq!(jc_pi(t, &above).re, limit, epsilon = 1e-7);
        }
        for t in (0..200).map(|k| k as f64 * 0.05) {
            assert!(jc_pi(t, &under()).norm() <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn first_singular_time() {
        let p = under();
        assert_abs_diff_eq!(p.omega().unwrap(), 5.0, epsilon = 1e-14);
        let t1 = p.singular_time(1).unwrap();
        assert_abs_diff_eq!(t1, 0.707_276_754_657_910_8, epsilon = 1e-13);
        assert!(jc_pi(t1, &p).norm() < 1e-14);
        assert!(matches!(jc_generator(t1, &p), Err(QmeError::SingularTime { .. })));
        assert!(jc_generator(t1 + 1e-3, &p).is_ok());
    }

    #[test]
    fn propagator_properties() {
        let p = over();
        assert!(jc_propagator(0.0, &p).max_abs_diff(&Superoperator::identity(2)) < 1e-15);
        let late = jc_propagator(400.0, &p);
        let expected = Superoperator::outer(&OperatorVec::basis(2, 0, 0), &OperatorVec::identity(2));
        assert!(late.max_abs_diff(&expected) < 1e-12);
        let pi = jc_pi(1.0, &p);
        let pop = jc_propagator(1.0, &p).apply(&OperatorVec::basis(2, 1, 1));
        assert_abs_diff_eq!(pop.entry(1, 1).re, pi.norm_sqr(), epsilon = 1e-15);
        assert!(check_trace_preserving(&(&jc_propagator(2.3, &under()) - &Superoperator::identity(2)), 1e-15));
    }

    #[test]
    fn propagator_hat_matches_quadrature() {
        let p = over();
        let e = C64::new(0.0, 1.0);
        let numeric = integrate_superop(2, |t| jc_propagator(t, &p).scale((I * e * t).exp()), 0.0, 60.0, 1e-13).unwrap();
        assert!(numeric.max_abs_diff(&jc_propagator_hat(e, &p).unwrap()) < 1e-8);
        let e1 = p.poles()[1];
        assert!(matches!(jc_propagator_hat(e1, &p), Err(QmeError::PoleHit { .. })));
        let e = C64::new(0.7, 0.2);
        let rho = OperatorVec::from_real(2, &[0.3, 0.1, 0.1, 0.7]).unwrap();
        let tr = OperatorVec::identity(2).inner(&jc_propagator_hat(e, &p).unwrap().apply(&rho));
        assert_abs_diff_eq!((tr - I / e).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn generator_properties() {
        let p = over();
        assert!(jc_generator(0.0, &p).unwrap().max_abs_diff(&jc_kernel_local(&p)) < 1e-15);
        let ginf = jc_g_infty(&p).unwrap();
        assert!(jc_generator(300.0, &p).unwrap().max_abs_diff(&ginf) < 1e-12);
        assert_abs_diff_eq!(ginf.get(3, 3).im, -0.9, epsilon = 1e-14);
        for q in [over(), under()] {
            for t in [0.2, 0.9, 2.5] {
                let h = 1e-5;
                let d = (&jc_propagator(t + h, &q) - &jc_propagator(t - h, &q)).scale_re(0.5 / h);
                let lhs = &jc_generator(t, &q).unwrap() * &jc_propagator(t, &q);
                assert!(lhs.max_abs_diff(&d.scale(I)) < 1e-6);
            }
        }
    }

    #[test]
    fn generator_times_propagator_finite_across_singularity() {
        let p = under();
        let t1 = p.singular_time(1).unwrap();
        for dt in [1e-3, 1e-4, 1e-5] {
            let lhs = &jc_generator(t1 + dt, &p).unwrap() * &jc_propagator(t1 + dt, &p);
            let h = 1e-5;
            let d = (&jc_propagator(t1 + dt + h, &p) - &jc_propagator(t1 + dt - h, &p)).scale_re(0.5 / h);
            assert!(lhs.max_abs_diff(&d.scale(I)) < 1e-5 * d.max_abs().max(1.0));
        }
    }

    #[test]
    fn kernel_hat_identities() {
        let p = over();
        let k0 = jc_kernel_hat(C64::new(0.0, 0.0), &p).unwrap();
        assert_abs_diff_eq!(k0.get(3, 3).im, -0.495 / (1.0 + 0.2475), epsilon = 1e-14);
        assert_abs_diff_eq!(k0.get(3, 3).im, -0.396_793_587_174_348_7, epsilon = 1e-12);
        assert!(check_hermicity_preserving(&k0, 1e-14));
        assert!(check_trace_preserving(&k0, 1e-14));
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for q in [over(), under()] {
            for _ in 0..20 {
                let e = C64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0));
                let resolvent = jc_propagator_hat(e, &q).unwrap();
                let via = &Superoperator::scalar(2, e) - &resolvent.inverse().unwrap().scale(I);
                assert!(via.max_abs_diff(&jc_kernel_hat(e, &q).unwrap()) < 1e-10);
            }
        }
    }

    #[test]
    fn table_poles_solve_branch_equation() {
        let p = over();
        for e in p.poles() {
            let m = &Superoperator::scalar(2, e) - &jc_kernel_hat(e, &p).unwrap();
            assert!(m.matrix().determinant().norm() < 1e-8);
        }
    }

    #[test]
    fn anomalous_pole_ordering() {
        let window = JcParams::new(2.1, 1.0, 1.0).unwrap();
        let poles = window.poles();
        assert!(poles[4].im > poles[3].im);
        let outside = JcParams::new(3.0, 1.0, 1.0).unwrap();
        let poles = outside.poles();
        assert!(poles[4].im < poles[3].im);
    }

    #[test]
    fn stationary_generators() {
        let p = over();
        let d = spectral_decompose(&jc_g_infty(&p).unwrap(), 1e-12).unwrap();
        let expected = [C64::new(0.0, 0.0), C64::new(-1.0, -0.45), C64::new(1.0, -0.45), C64::new(0.0, -0.9)];
        for (g, e) in d.eigenvalues.iter().zip(expected) {
            assert_abs_diff_eq!((g - e).norm(), 0.0, epsilon = 1e-12);
        }
        assert!(jc_g_infty(&under()).is_err());
        assert!(jc_g_infty_reg(&p).is_err());
        let reg = jc_g_infty_reg(&under()).unwrap();
        assert_eq!(reg.get(3, 3), C64::new(0.0, -1.0));
        let wide = JcParams::new(1e4, 1.0, 1.0).unwrap();
        let diff = jc_g_infty(&wide).unwrap().max_abs_diff(&jc_kernel_hat(C64::new(0.0, 0.0), &wide).unwrap());
        assert!(diff < 1e-3);
    }

    #[test]
    fn kernel_split_identities() {
        let p = over();
        let local = jc_kernel_local(&p);
        let coherence = local.apply(&OperatorVec::basis(2, 0, 1));
        assert_abs_diff_eq!(coherence.entry(0, 1).re, p.eps, epsilon = 1e-15);
        let integral = integrate_vec_halfline(|t| superop_to_vec(&jc_kernel_nonlocal(t, &p)), 0.0, 2.0, 1e-14, 400).unwrap();
        let total = &vec_to_superop(2, integral) + &local;
        assert!(total.max_abs_diff(&jc_kernel_hat(C64::new(0.0, 0.0), &p).unwrap()) < 1e-10);
        for t in [0.0, 0.5, 3.0] {
            assert!(check_trace_preserving(&jc_kernel_nonlocal(t, &p), 1e-15));
        }
        let far = C64::new(0.0, 1e3);
        assert!(jc_kernel_hat(far, &p).unwrap().max_abs_diff(&local) < 1e-2);
    }

    #[test]
    fn nonlocal_kernel_matches_bromwich_inversion() {
        for p in [over(), under()] {
            for t in [0.5, 2.0] {
                let b = jc_kernel_nonlocal_bromwich(t, &p).unwrap();
                assert!(b.max_abs_diff(&jc_kernel_nonlocal(t, &p)) < 1e-6, "t={t}");
            }
        }
    }

    #[test]
    fn occupation_block_kernel() {
        let p = JcParams::from_ratio(13.0, 20.0).unwrap();
        let full = jc_kernel_split(&p);
        let occ = jc_occupation_kernel_split(&p);
        let keep = [(0, 3), (3, 3)];
        for t in [0.0, 0.4, 1.3] {
            let (a, b) = (full.kernel(t, 0.0), occ.kernel(t, 0.0));
            for r in 0..4 {
                for c in 0..4 {
                    let want = if keep.contains(&(r, c)) { a.get(r, c) } else { C64::new(0.0, 0.0) };
                    assert_eq!(b.get(r, c), want);
                }
            }
        }
        let e = C64::new(0.3, 0.2);
        assert_eq!(occ.khat(e).unwrap().get(3, 3), full.khat(e).unwrap().get(3, 3));
        assert_eq!(occ.local(), &Superoperator::zeros(2));
    }
}
