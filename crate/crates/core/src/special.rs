//! Complex digamma and the Lerch transcendent Φ(z, 1, a).

use num_complex::Complex64 as C64;

use crate::error::{QmeError, Result};

// B_{2k} / (2k) for k = 1..8
const ASYMPTOTIC: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
];

/// Ψ(z) by upward recurrence to Re z ≥ 10 followed by the asymptotic series.
pub fn digamma(z: C64) -> Result<C64> {
    if !(z.re.is_finite() && z.im.is_finite()) {
        return Err(QmeError::DomainError(format!("digamma({z})")));
    }
    if z.im == 0.0 && z.re <= 0.0 && z.re == z.re.round() {
        return Err(QmeError::DomainError(format!("digamma pole at {z}")));
    }
    if z.re < -20.0 {
        // Ψ(z) = Ψ(1−z) − π cot(πz)
        let pz = z * std::f64::consts::PI;
        let cot = pz.cos() / pz.sin();
        return Ok(digamma(C64::new(1.0, 0.0) - z)? - cot * std::f64::consts::PI);
    }
    let mut w = z;
    let mut acc = C64::new(0.0, 0.0);
    while w.re < 10.0 {
        acc -= w.inv();
        w += 1.0;
    }
    let w2inv = (w * w).inv();
    let mut series = C64::new(0.0, 0.0);
    let mut pow = w2inv;
    for c in ASYMPTOTIC {
        series += pow * c;
        pow *= w2inv;
    }
    Ok(acc + w.ln() - w.inv() * 0.5 - series)
}

const LERCH_MAX_TERMS: usize = 50_000_000;

/// Φ(z, 1, a) = Σ_{n≥0} zⁿ/(n+a) by direct summation, stopped once the geometric tail
/// bound |z|^N / ((N + Re a)(1 − |z|)) falls below 1e−16 relative to the partial sum.
pub fn lerch_phi(z: C64, a: C64) -> Result<C64> {
    let r = z.norm();
    if !(r < 1.0) {
        return Err(QmeError::DomainError(format!("lerch_phi requires |z| < 1, got {z}")));
    }
    if a.im == 0.0 && a.re <= 0.0 && a.re == a.re.round() {
        return Err(QmeError::DomainError(format!("lerch_phi: a = {a} is a non-positive integer")));
    }
    let mut sum = C64::new(0.0, 0.0);
    let mut zn = C64::new(1.0, 0.0);
    let mut rn = 1.0;
    for n in 0..LERCH_MAX_TERMS {
        let nf = n as f64;
        sum += zn / (a + nf);
        zn *= z;
        rn *= r;
        let shift = nf + 1.0 + a.re;
        if shift > 0.0 {
            let tail = rn / (shift * (1.0 - r));
            if tail <= 1e-16 * sum.norm().max(1e-300) {
                return Ok(sum);
            }
        }
    }
    Err(QmeError::DomainError(format!(
        "lerch_phi: series did not reach tolerance for |z| = {r}"
    )))
}
