//! Williams' t-test for H0: ρ12 = ρ13 when variables 2 and 3 are both
//! correlated with variable 1 and with each other (r23):
//!
//! ```text
//! t = (r12 − r13) · sqrt( (n−1)(1+r23) / ( 2K(n−1)/(n−3) + r̄²(1−r23)³ ) )
//! K = 1 − r12² − r13² − r23² + 2·r12·r13·r23,   r̄ = (r12 + r13)/2
//! ```
//!
//! with `n − 3` degrees of freedom and a two-sided p-value.

use statrs::distribution::{ContinuousCDF, StudentsT};

use super::NotComputable;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilliamsResult {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided tail probability `P(|T| >= |t|)` for Student's t with `df`
/// degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: usize) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    // upper tail of |t| computed directly avoids cancellation for large |t|
    (2.0 * dist.sf(t.abs())).min(1.0)
}

pub fn williams_test(
    r12: f64,
    r13: f64,
    r23: f64,
    n: usize,
) -> Result<WilliamsResult, NotComputable> {
    if n < 4 {
        return Err(NotComputable("Williams' test needs n >= 4"));
    }
    if [r12, r13, r23].iter().any(|r| !(-1.0..=1.0).contains(r)) {
        return Err(NotComputable("correlations must lie in [-1, 1]"));
    }
    let k = 1.0 - r12 * r12 - r13 * r13 - r23 * r23 + 2.0 * r12 * r13 * r23;
    if k <= 0.0 {
        return Err(NotComputable("singular correlation matrix (K <= 0)"));
    }
    let nf = n as f64;
    let rbar = (r12 + r13) / 2.0;
    let denom = 2.0 * k * (nf - 1.0) / (nf - 3.0) + rbar * rbar * (1.0 - r23).powi(3);
    let t = (r12 - r13) * ((nf - 1.0) * (1.0 + r23) / denom).sqrt();
    let df = n - 3;
    Ok(WilliamsResult {
        t,
        p: student_t_two_sided_p(t, df),
        df,
    })
}
