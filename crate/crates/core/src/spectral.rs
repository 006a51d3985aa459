//! Poles of the resolvent, the sampling relation between G(∞) and K̂(E), the slippage
//! superoperator and the two stationary semigroup approximations.

use std::io::Write;

use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{QmeError, Result};
use crate::liouville::{biorthonormalize, spectral_decompose, superop_exp, OperatorVec, SpectralDecomp, Superoperator};

const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Solution of E = k_j(E) on one eigenvalue branch of K̂.
#[derive(Clone, Debug)]
pub struct PoleRecord {
    pub e: C64,
    /// Position of the branch in the eigenvalue ordering of K̂(E_p).
    pub branch: usize,
    pub sampled: bool,
    pub right: OperatorVec,
    /// Dual of `right` in the decomposition of K̂(E_p).
    pub left: OperatorVec,
    /// ∂k_j/∂E at E_p.
    pub slope: C64,
}

#[derive(Clone, Copy, Debug)]
pub struct PoleSearch {
    /// Required |k_j(E_p) − E_p|.
    pub tol: f64,
    /// Natural rate of the model; sets the derivative step and the Newton step cap.
    pub rate: f64,
    pub max_iter: usize,
    /// Derivative step relative to `rate`.
    pub fd_step: f64,
}

impl PoleSearch {
    pub fn new(tol: f64, rate: f64) -> Self {
        Self {
            tol,
            rate,
            max_iter: 80,
            fd_step: 1e-6,
        }
    }
}

/// Rectangular grid of seeds, `n × n` points over [re_lo, re_hi] × [im_lo, im_hi].
pub fn seed_grid(re_lo: f64, re_hi: f64, im_lo: f64, im_hi: f64, n: usize) -> Vec<C64> {
    let lin = |lo: f64, hi: f64, k: usize| {
        if n == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * k as f64 / (n - 1) as f64
        }
    };
    (0..n)
        .flat_map(|i| (0..n).map(move |j| C64::new(lin(re_lo, re_hi, i), lin(im_lo, im_hi, j))))
        .collect()
}

fn normalized_overlap(a: &OperatorVec, b: &OperatorVec) -> f64 {
    a.inner(b).norm() / (a.norm() * b.norm())
}

/// Central-difference derivative of K̂.
fn khat_derivative<F>(khat: &F, e: C64, h: f64) -> Result<Superoperator>
where
    F: Fn(C64) -> Result<Superoperator> + ?Sized,
{
    Ok((&khat(e + h)? - &khat(e - h)?).scale_re(0.5 / h))
}

/// ∂k/∂E = ⟨⟨l| K̂'(E) |r⟩⟩ for a biorthonormal eigenpair.
fn branch_slope<F>(khat: &F, e: C64, right: &OperatorVec, left: &OperatorVec, h: f64) -> Result<C64>
where
    F: Fn(C64) -> Result<Superoperator> + ?Sized,
{
    let d = khat_derivative(khat, e, h)?;
    Ok(left.inner(&d.apply(right)))
}

/// Index of the eigenvector of `dec` most parallel to `v`, with its overlap.
fn best_match(dec: &SpectralDecomp, v: &OperatorVec) -> (usize, f64) {
    dec.right
        .iter()
        .enumerate()
        .map(|(i, r)| (i, normalized_overlap(r, v)))
        .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
}

/// Damped Newton iteration on k_j(E) − E from `seed`, starting on branch `branch`
/// and following it by eigenvector continuity.
pub fn track_pole<F>(khat: &F, seed: C64, branch: usize, opts: &PoleSearch) -> Result<PoleRecord>
where
    F: Fn(C64) -> Result<Superoperator> + ?Sized,
{
    let h = opts.fd_step * opts.rate;
    let max_step = 0.5 * opts.rate;
    let mut e = seed;
    let mut prev: Option<OperatorVec> = None;
    for _ in 0..opts.max_iter {
        let dec = spectral_decompose(&khat(e)?, 1e-8)?;
        let idx = match &prev {
            None => branch.min(dec.eigenvalues.len() - 1),
            Some(v) => {
                let (i, overlap) = best_match(&dec, v);
                if overlap < 0.7 {
                    return Err(QmeError::BranchSwitch { e, overlap });
                }
                i
            }
        };
        let (k, r, l) = (dec.eigenvalues[idx], dec.right[idx].clone(), dec.left[idx].clone());
        let f = k - e;
        let slope = branch_slope(khat, e, &r, &l, h)?;
        if f.norm() < 1e-3 * opts.tol {
            return Ok(PoleRecord {
                e,
                branch: idx,
                sampled: false,
                right: r,
                left: l,
                slope,
            });
        }
        let mut step = -f / (slope - 1.0);
        if !(step.re.is_finite() && step.im.is_finite()) {
            return Err(QmeError::HigherOrderPole(e));
        }
        if step.norm() > max_step {
            step *= max_step / step.norm();
        }
        e += step;
        prev = Some(r);
    }
    // accept the last iterate if it meets the requested tolerance
    let dec = spectral_decompose(&khat(e)?, 1e-8)?;
    let (idx, overlap) = match &prev {
        Some(v) => best_match(&dec, v),
        None => (branch, 1.0),
    };
    if overlap < 0.7 {
        return Err(QmeError::BranchSwitch { e, overlap });
    }
    let f = dec.eigenvalues[idx] - e;
    if f.norm() < opts.tol {
        let slope = branch_slope(khat, e, &dec.right[idx], &dec.left[idx], h)?;
        return Ok(PoleRecord {
            e,
            branch: idx,
            sampled: false,
            right: dec.right[idx].clone(),
            left: dec.left[idx].clone(),
            slope,
        });
    }
    Err(QmeError::NoConvergence(f.norm()))
}

/// All eigenvalue poles reachable from `seeds`, each branch tried from each seed.
/// Seeds whose continuation fails are skipped; duplicates within 10·tol are merged and
/// the result is sorted by (Re E, Im E).
pub fn find_poles<F>(khat: &F, seeds: &[C64], opts: &PoleSearch) -> Result<Vec<PoleRecord>>
where
    F: Fn(C64) -> Result<Superoperator> + Sync + ?Sized,
{
    let branches = seeds
        .iter()
        .find_map(|&s| khat(s).ok())
        .map(|k| k.size())
        .ok_or_else(|| QmeError::DomainError("K̂ is undefined at every seed".into()))?;
    let mut found: Vec<PoleRecord> = seeds
        .par_iter()
        .flat_map_iter(|&s| (0..branches).filter_map(move |b| track_pole(khat, s, b, opts).ok()))
        .collect();
    found.sort_by(|a, b| a.e.re.total_cmp(&b.e.re).then(a.e.im.total_cmp(&b.e.im)));
    let mut merged: Vec<PoleRecord> = Vec::new();
    for p in found {
        if !merged.iter().any(|q| (q.e - p.e).norm() < 10.0 * opts.tol) {
            merged.push(p);
        }
    }
    Ok(merged)
}

/// Flags poles that coincide with an eigenvalue of G(∞) with a parallel right eigenvector.
pub fn mark_sampled(poles: &mut [PoleRecord], g: &SpectralDecomp, tol: f64) {
    for p in poles.iter_mut() {
        p.sampled = g.eigenvalues.iter().zip(&g.right).any(|(gi, ri)| {
            (p.e - gi).norm() < tol && normalized_overlap(&p.right, ri) > 1.0 - tol
        });
    }
}

#[derive(Clone, Debug)]
pub struct SamplingEntry {
    pub index: usize,
    pub g: C64,
    /// Branch of K̂(g_i) whose eigenvalue equals g_i.
    pub branch: usize,
    pub eigenvalue_error: f64,
    /// |⟨⟨k|g⟩⟩| / (‖k‖‖g‖) for the right eigenvectors.
    pub right_overlap: f64,
    /// ‖k̄ − ḡ_i‖ after normalizing ⟨⟨k̄|g_i⟩⟩ = 1.
    pub left_mismatch: f64,
    pub right: OperatorVec,
    pub left: OperatorVec,
}

#[derive(Clone, Debug)]
pub struct SamplingReport {
    pub entries: Vec<SamplingEntry>,
    /// ‖Σ k(g_i)|k(g_i)⟩⟩⟨⟨dual_i| − G(∞)‖_max with duals biorthonormal to the sampled
    /// right eigenvectors.
    pub reconstruction_error: f64,
}

/// Checks that each eigenpair (g_i, |g_i⟩⟩) of G(∞) is an eigenpair of K̂(g_i).
pub fn verify_sampling<F>(g: &SpectralDecomp, khat: &F, tol: f64) -> Result<SamplingReport>
where
    F: Fn(C64) -> Result<Superoperator> + ?Sized,
{
    let scale = g.eigenvalues.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let mut entries = Vec::with_capacity(g.eigenvalues.len());
    for (i, (gi, ri)) in g.eigenvalues.iter().zip(&g.right).enumerate() {
        let dec = spectral_decompose(&khat(*gi)?, 1e-9)?;
        let (branch, err) = dec
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(j, k)| (j, (k - gi).norm()))
            .filter(|(j, _)| normalized_overlap(&dec.right[*j], ri) > 1.0 - tol)
            .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        if branch == usize::MAX {
            return Err(QmeError::SamplingViolation {
                index: i,
                reason: format!("no eigenvector of K̂({gi}) is parallel to |g_{i}⟩⟩"),
            });
        }
        if err > tol * scale {
            return Err(QmeError::SamplingViolation {
                index: i,
                reason: format!("eigenvalue mismatch {err:.3e} at g = {gi}"),
            });
        }
        let kl = &dec.left[branch];
        let kl = kl.scale(kl.inner(ri).conj().inv());
        let left_mismatch = (&kl - &g.left[i]).norm();
        entries.push(SamplingEntry {
            index: i,
            g: *gi,
            branch,
            eigenvalue_error: err,
            right_overlap: normalized_overlap(&dec.right[branch], ri),
            left_mismatch,
            right: dec.right[branch].clone(),
            left: dec.left[branch].clone(),
        });
    }
    let rights: Vec<OperatorVec> = entries.iter().map(|e| e.right.clone()).collect();
    let duals = biorthonormalize(&rights)?;
    let mut recon = Superoperator::zeros(g.dim());
    for (e, d) in entries.iter().zip(&duals) {
        recon += &Superoperator::outer(&e.right, d).scale(e.g);
    }
    let reconstruction_error = recon.max_abs_diff(&g.reconstruct());
    if reconstruction_error > tol * scale {
        return Err(QmeError::SamplingViolation {
            index: 0,
            reason: format!("reconstruction error {reconstruction_error:.3e}"),
        });
    }
    Ok(SamplingReport {
        entries,
        reconstruction_error,
    })
}

/// S = Σ_i |g_i⟩⟩⟨⟨k̄(g_i)| / (1 − ∂k/∂E(g_i)) over sampled first-order poles.
pub fn slippage(poles: &[PoleRecord]) -> Result<Superoperator> {
    let sampled: Vec<&PoleRecord> = poles.iter().filter(|p| p.sampled).collect();
    let first = sampled
        .first()
        .ok_or_else(|| QmeError::DomainError("no sampled poles".into()))?;
    let mut s = Superoperator::zeros(first.right.dim());
    for p in sampled {
        let denom = C64::new(1.0, 0.0) - p.slope;
        if denom.norm() < 1e-8 {
            return Err(QmeError::HigherOrderPole(p.e));
        }
        s += &Superoperator::outer(&p.right, &p.left).scale(denom.inv());
    }
    Ok(s)
}

/// Π̂(E) = i (E − K̂(E))^{-1}.
pub fn resolvent<F>(khat: &F, e: C64) -> Result<Superoperator>
where
    F: Fn(C64) -> Result<Superoperator> + ?Sized,
{
    let k = khat(e)?;
    let a = &Superoperator::scalar(k.dim(), e) - &k;
    let inv = a.inverse().ok_or(QmeError::SingularResolvent(e))?;
    if inv.norm1() * a.norm1() > 1e14 {
        return Err(QmeError::SingularResolvent(e));
    }
    Ok(inv.scale(I))
}

/// e^{−itX}.
pub fn semigroup_evolution(x: &Superoperator, t: f64) -> Result<Superoperator> {
    superop_exp(x, -t)
}

/// K̂(0) + K̂'(0) K̂(0), derivative by central difference with step 1e−6·rate.
pub fn adiabatic_generator<F>(khat: &F, rate: f64) -> Result<Superoperator>
where
    F: Fn(C64) -> Result<Superoperator> + ?Sized,
{
    let zero = C64::new(0.0, 0.0);
    let k0 = khat(zero)?;
    let d = khat_derivative(khat, zero, 1e-6 * rate)?;
    Ok(&k0 + &(&d * &k0))
}

/// Pole table as CSV: re(E), im(E), branch, sampled, re(slope), im(slope).
pub fn write_pole_csv<W: Write>(poles: &[PoleRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| QmeError::Serialization(e.to_string());
    w.write_record(["re_E", "im_E", "branch", "sampled", "re_slope", "im_slope"])
        .map_err(ser)?;
    for p in poles {
        w.write_record([
            format!("{:.12e}", p.e.re),
            format!("{:.12e}", p.e.im),
            p.branch.to_string(),
            p.sampled.to_string(),
            format!("{:.12e}", p.slope.re),
            format!("{:.12e}", p.slope.im),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| QmeError::Serialization(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville::{check_trace_preserving, trace_row_error};
    use crate::model_jc::*;
    use crate::model_rlm::*;

    fn jc_over() -> JcParams {
        JcParams::from_ratio(0.495, 1.0).unwrap()
    }

    fn fig5() -> RlmParams {
        RlmParams::from_detuning(2.0 * std::f64::consts::PI, 0.1 / (2.0 * std::f64::consts::PI)).unwrap()
    }

    fn jc_seeds(p: &JcParams) -> Vec<C64> {
        seed_grid(-3.0 * p.eps, 3.0 * p.eps, -3.0 * p.gamma, 0.0, 21)
    }

    #[test]
    fn jc_pole_census() {
        let p = jc_over();
        let khat = |e| jc_kernel_hat(e, &p);
        let mut poles = find_poles(&khat, &jc_seeds(&p), &PoleSearch::new(1e-10, p.gamma)).unwrap();
        assert_eq!(poles.len(), 8);
        for expected in p.poles() {
            assert!(poles.iter().any(|q| (q.e - expected).norm() < 1e-8), "{expected}");
        }
        let g = spectral_decompose(&jc_g_infty(&p).unwrap(), 1e-12).unwrap();
        mark_sampled(&mut poles, &g, 1e-6);
        let sampled: Vec<C64> = poles.iter().filter(|q| q.sampled).map(|q| q.e).collect();
        assert_eq!(sampled.len(), 4);
        for e in &p.poles()[..4] {
            assert!(sampled.iter().any(|q| (q - e).norm() < 1e-8));
        }
    }

    #[test]
    fn rlm_eigenvalue_poles_only() {
        let p = fig5();
        let khat = |e| rlm_kernel_hat(e, &p);
        let seeds = seed_grid(-3.0 * p.eps, 3.0 * p.eps, -3.0, 0.0, 21);
        let poles = find_poles(&khat, &seeds, &PoleSearch::new(1e-10, p.big_gamma)).unwrap();
        assert_eq!(poles.len(), 4, "{:?}", poles.iter().map(|q| q.e).collect::<Vec<_>>());
        for expected in p.eigenvalue_poles() {
            assert!(poles.iter().any(|q| (q.e - expected).norm() < 1e-8));
        }
        for ev in p.eigenvector_poles(5) {
            assert!(poles.iter().all(|q| (q.e - ev).norm() > 1e-3));
        }
    }

    #[test]
    fn constant_kernel_poles_are_its_eigenvalues() {
        let p = jc_over();
        let c = jc_kernel_hat(C64::new(0.3, 0.1), &p).unwrap();
        let cc = c.clone();
        let khat = move |_e: C64| Ok(cc.clone());
        let seeds = seed_grid(-2.0, 2.0, -2.0, 0.5, 7);
        let poles = find_poles(&khat, &seeds, &PoleSearch::new(1e-10, 1.0)).unwrap();
        let eig = c.eigenvalues();
        assert_eq!(poles.len(), eig.len());
        for q in &poles {
            assert!(eig.iter().any(|g| (g - q.e).norm() < 1e-9));
            assert!(q.slope.norm() < 1e-9);
        }
        let mut poles = poles;
        poles.iter_mut().for_each(|q| q.sampled = true);
        assert!(slippage(&poles).unwrap().max_abs_diff(&Superoperator::identity(2)) < 1e-9);
    }

    #[test]
    fn jc_sampling_holds() {
        let p = jc_over();
        let g = spectral_decompose(&jc_g_infty(&p).unwrap(), 1e-12).unwrap();
        let report = verify_sampling(&g, &|e| jc_kernel_hat(e, &p), 1e-8).unwrap();
        assert!(report.reconstruction_error < 1e-12);
        for e in &report.entries {
            assert!(e.left_mismatch < 1e-8);
        }
    }

    #[test]
    fn rlm_sampling_detects_left_mismatch() {
        let p = fig5();
        let g = spectral_decompose(&rlm_g_infty(&p).unwrap(), 1e-12).unwrap();
        let report = verify_sampling(&g, &|e| rlm_kernel_hat(e, &p), 1e-8).unwrap();
        assert!((report.entries[3].g - C64::new(0.0, -1.0)).norm() < 1e-12);
        assert!(report.entries[3].left_mismatch > 1e-3);
        for e in &report.entries[..3] {
            assert!(e.left_mismatch < 1e-8, "{}: {}", e.index, e.left_mismatch);
        }
    }

    #[test]
    fn zero_mode_is_stationary_state() {
        let p = jc_over();
        let g = spectral_decompose(&jc_g_infty(&p).unwrap(), 1e-12).unwrap();
        let k0 = jc_kernel_hat(C64::new(0.0, 0.0), &p).unwrap();
        let rho = g.right[0].scale(g.right[0].trace().inv());
        assert!(k0.apply(&rho).norm() < 1e-14);
        assert!((rho.entry(0, 0) - 1.0).norm() < 1e-14);
    }

    #[test]
    fn broken_sampling_is_reported() {
        let p = jc_over();
        let g = spectral_decompose(&jc_g_infty(&p).unwrap(), 1e-12).unwrap();
        let wrong = JcParams::from_ratio(0.3, 1.0).unwrap();
        let err = verify_sampling(&g, &|e| jc_kernel_hat(e, &wrong), 1e-8).unwrap_err();
        assert!(matches!(err, QmeError::SamplingViolation { .. }));
    }

    #[test]
    fn resolvent_matches_closed_forms() {
        let p = jc_over();
        let pr = fig5();
        for e in [C64::new(0.3, 0.5), C64::new(-2.0, 1.5), C64::new(0.1, -0.2)] {
            let r = resolvent(&|z| jc_kernel_hat(z, &p), e).unwrap();
            assert!(r.max_abs_diff(&jc_propagator_hat(e, &p).unwrap()) < 1e-9);
            let r = resolvent(&|z| rlm_kernel_hat(z, &pr), e).unwrap();
            assert!(r.max_abs_diff(&rlm_propagator_hat(e, &pr).unwrap()) < 1e-9);
            // trace column: ⟨⟨𝟙|Π̂(E) = i/E ⟨⟨𝟙|
            let tr = r.covector_apply(&OperatorVec::identity(2));
            assert!((&tr - &OperatorVec::identity(2).scale((I / e).conj())).norm() < 1e-9);
        }
        assert!(matches!(
            resolvent(&|z| jc_kernel_hat(z, &p), C64::new(0.0, 0.0)),
            Err(QmeError::SingularResolvent(_))
        ));
    }

    fn occupation(pi: &Superoperator) -> f64 {
        pi.apply(&OperatorVec::basis(2, 1, 1)).entry(1, 1).re
    }

    #[test]
    fn semigroups_approach_from_opposite_sides() {
        let p = jc_over();
        let k0 = jc_kernel_hat(C64::new(0.0, 0.0), &p).unwrap();
        let ginf = jc_g_infty(&p).unwrap();
        for t in [6.0, 8.0, 10.0] {
            let exact = jc_pi(t, &p).norm_sqr();
            assert!(occupation(&semigroup_evolution(&k0, t).unwrap()) > exact);
            assert!(occupation(&semigroup_evolution(&ginf, t).unwrap()) < exact);
        }
        let late = semigroup_evolution(&ginf, 200.0).unwrap();
        assert!(occupation(&late).abs() < 1e-12);
    }

    #[test]
    fn slippage_error_decays_at_slowest_unsampled_rate() {
        let p = jc_over();
        let khat = |e| jc_kernel_hat(e, &p);
        let mut poles = find_poles(&khat, &jc_seeds(&p), &PoleSearch::new(1e-10, p.gamma)).unwrap();
        let ginf = jc_g_infty(&p).unwrap();
        mark_sampled(&mut poles, &spectral_decompose(&ginf, 1e-12).unwrap(), 1e-6);
        let s = slippage(&poles).unwrap();
        let err = |t: f64| (&semigroup_evolution(&ginf, t).unwrap() * &s).max_abs_diff(&jc_propagator(t, &p));
        let (t0, t1) = (5.0, 20.0);
        let rate = -(err(t1).ln() - err(t0).ln()) / (t1 - t0);
        let expected = (p.gamma + p.gamma_prime().re) / 2.0;
        assert!((rate - expected).abs() < 0.1 * expected, "rate {rate} vs {expected}");
        // long-time limit is the stationary projector |ρ(∞)⟩⟩⟨⟨𝟙|
        let proj = Superoperator::outer(&OperatorVec::basis(2, 0, 0), &OperatorVec::identity(2));
        assert!((&semigroup_evolution(&ginf, 400.0).unwrap() * &s).max_abs_diff(&proj) < 1e-10);
    }

    #[test]
    fn adiabatic_generator_properties() {
        let p = JcParams::from_ratio(0.1, 1.0).unwrap();
        let khat = |e| jc_kernel_hat(e, &p);
        let ad = adiabatic_generator(&khat, p.gamma).unwrap();
        assert!(check_trace_preserving(&ad, 1e-12));
        let ginf = jc_g_infty(&p).unwrap();
        let k0 = khat(C64::new(0.0, 0.0)).unwrap();
        assert!(ad.max_abs_diff(&ginf) < k0.max_abs_diff(&ginf));

        let pr = fig5();
        let khat = |e| rlm_kernel_hat(e, &pr);
        let ad = adiabatic_generator(&khat, pr.big_gamma).unwrap();
        let k0 = khat(C64::new(0.0, 0.0)).unwrap();
        let correction = &ad - &k0;
        let dec = spectral_decompose(&k0, 1e-12).unwrap();
        let rho = &dec.right[0];
        assert!(dec.eigenvalues[0].norm() < 1e-12);
        assert!(correction.apply(rho).norm() < 1e-9);
        assert!(trace_row_error(&ad) < 1e-12);

        let constant = k0.clone();
        let ad = adiabatic_generator(&move |_| Ok(constant.clone()), 1.0).unwrap();
        assert!(ad.max_abs_diff(&k0) == 0.0);
    }

    #[test]
    fn pole_csv_columns() {
        let p = jc_over();
        let khat = |e| jc_kernel_hat(e, &p);
        let poles = find_poles(&khat, &[C64::new(0.0, -0.1)], &PoleSearch::new(1e-10, 1.0)).unwrap();
        let mut buf = Vec::new();
        write_pole_csv(&poles, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "re_E,im_E,branch,sampled,re_slope,im_slope");
        assert_eq!(lines.count(), poles.len());
    }

    #[test]
    fn anomalous_window_ordering() {
        // at γ = 2.1Γ the unsampled E_4 decays slower than the sampled E_3
        let p = JcParams::from_ratio(1.0 / 2.1, 1.0).unwrap();
        let e = p.poles();
        assert!(e[4].im > e[3].im);
    }
}
