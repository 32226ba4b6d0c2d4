//! Distribution machinery shared by every delay formula: the trials-form
//! negative binomial, binomial block-decoding probabilities, the exact
//! expected maximum of i.i.d. negative binomial draws, and closed-form
//! approximations to that maximum.
//!
//! Conventions: `NB(k, p)` counts Bernoulli trials up to and including the
//! k-th success, so its support starts at `t = k` and its mean is `k / p`.
//! Channel parameters are erasure probabilities; success probabilities are
//! their complements.

use serde::Serialize;
use thiserror::Error;

/// Default relative tolerance for truncating the order-statistic tail sum.
pub const DEFAULT_REL_TOL: f64 = 1e-9;

/// Hard cap on tail-sum terms; sums that cannot converge within it fail.
pub const MAX_TAIL_TERMS: u64 = 100_000_000;

/// Consecutive below-tolerance terms required before a tail sum truncates.
/// The summand is monotone, so one qualifying term would already do; the run
/// guards against an unluckily small single term.
const TRUNCATION_RUN: u32 = 32;

/// Below this log-mass the pmf recurrence stays in log space; above it the
/// mass is comfortably inside the normal f64 range.
const LN_LINEAR_SWITCH: f64 = -640.0;

/// Early-exit threshold for monotonically decaying binomial tail walks,
/// relative to the partial sum.
const BINOM_TAIL_EXIT: f64 = 1e-22;

/// Natural log of the gamma function for `x >= 1`, by the Lanczos
/// approximation (g = 7, nine terms). Only log-binomial boundary terms need
/// it, so the argument never exceeds a block length plus one and the error
/// (~1e-14 relative) sits far below every truncation threshold in this
/// module.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x >= 1.0);
    const LANCZOS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;
    let z = x - 1.0;
    let mut series = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        series += c / (z + i as f64);
    }
    let t = z + 7.5;
    HALF_LN_TWO_PI + (z + 0.5) * t.ln() - t + series.ln()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("erasure probability must satisfy 0 <= p < 1, got {0}")]
    InvalidErasureProb(f64),
    #[error("negative binomial requires k >= 1 and 0 < p <= 1, got k={k}, p={p}")]
    InvalidNegBinomial { k: u64, p: f64 },
    #[error("block length n_s={n_s} is smaller than k_s={k_s}")]
    BlockShorterThanData { n_s: u64, k_s: u64 },
    #[error("relative tolerance must be positive and finite, got {0}")]
    InvalidTolerance(f64),
    #[error("user count must be at least 1")]
    InvalidUserCount,
    #[error(
        "tail sum cannot converge within {max_terms} terms (distribution mean {mean:.3e}); \
         the parameters are outside the tractable range"
    )]
    TailSumDiverged { max_terms: u64, mean: f64 },
    #[error(
        "packet erasure probability rounds to 1 (success probability {success:.3e}); \
         the value cannot be represented as a valid erasure probability"
    )]
    ErasureProbSaturated { success: f64 },
    #[error("approximation requires 0 < eps < 1, got eps={0}")]
    ApproxEpsOutOfRange(f64),
    #[error("approximation requires u >= 2, got u={0}")]
    ApproxTooFewUsers(u64),
    #[error(
        "approximation undefined for k > 1 when log_(1/eps)(u) < 1 \
         (k={k}, eps={eps}, u={u} gives log={log:.6})"
    )]
    ApproxOutsideDomain { k: u64, eps: f64, u: u64, log: f64 },
}

/// Symbol or packet erasure probability, constrained to `[0, 1)`.
///
/// The value 1 is rejected at construction: a channel that erases everything
/// makes every expected delay infinite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct ErasureProb(f64);

impl ErasureProb {
    pub fn new(value: f64) -> Result<Self, DistError> {
        if value.is_finite() && (0.0..1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(DistError::InvalidErasureProb(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Complementary per-trial success probability `1 - eps`, always in `(0, 1]`.
    pub fn success(self) -> f64 {
        1.0 - self.0
    }
}

impl std::fmt::Display for ErasureProb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parameters of the trials-form negative binomial `NB(k, p)`: the number of
/// independent Bernoulli(p) trials needed to collect `k` successes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegBinomialParams {
    k: u64,
    p: f64,
}

impl NegBinomialParams {
    pub fn new(k: u64, p: f64) -> Result<Self, DistError> {
        if k >= 1 && p > 0.0 && p <= 1.0 {
            Ok(Self { k, p })
        } else {
            Err(DistError::InvalidNegBinomial { k, p })
        }
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Exact mean `k / p`.
    pub fn mean(&self) -> f64 {
        self.k as f64 / self.p
    }
}

/// Kahan-compensated accumulator; keeps long monotone sums at O(1 ulp) error
/// independent of the number of terms.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    pub(crate) fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum
    }
}

/// Streams `(t, pmf(t))` for `t = k, k+1, ...` via the stable ratio recurrence
/// `pmf(t+1) = pmf(t) * (1-p) * t / (t-k+1)`, staying in log space until the
/// mass is large enough to carry full precision in linear space.
///
/// Requires `p < 1`; callers special-case the degenerate `p = 1`.
pub(crate) struct NbPmfScan {
    k: f64,
    ln_q: f64,
    q: f64,
    t: u64,
    ln_pmf: f64,
    pmf: f64,
    linear: bool,
}

impl NbPmfScan {
    pub(crate) fn new(params: &NegBinomialParams) -> Self {
        debug_assert!(params.p < 1.0, "p = 1 must be handled by the caller");
        let ln_pmf = params.k as f64 * params.p.ln();
        let linear = ln_pmf > LN_LINEAR_SWITCH;
        Self {
            k: params.k as f64,
            ln_q: (-params.p).ln_1p(),
            q: 1.0 - params.p,
            t: params.k,
            ln_pmf,
            pmf: if linear { ln_pmf.exp() } else { 0.0 },
            linear,
        }
    }

    /// Current support point and its pmf, then advances to the next point.
    pub(crate) fn next(&mut self) -> (u64, f64) {
        let out = (self.t, if self.linear { self.pmf } else { self.ln_pmf.exp() });
        let tf = self.t as f64;
        // Ratio pmf(t+1)/pmf(t) = q * t / (t - k + 1).
        if self.linear {
            self.pmf *= self.q * tf / (tf - self.k + 1.0);
        } else {
            self.ln_pmf += self.ln_q + tf.ln() - (tf - self.k + 1.0).ln();
            if self.ln_pmf > LN_LINEAR_SWITCH {
                self.linear = true;
                self.pmf = self.ln_pmf.exp();
            }
        }
        self.t += 1;
        out
    }
}

/// Tracks the cdf prefix of a pmf scan on whichever side avoids cancellation:
/// the cdf itself while it is at most 1/2, then the survival `1 - F` by
/// subtraction (the switch-point complement is exact for F in [1/2, 1]).
#[derive(Debug, Clone, Copy)]
pub(crate) enum CdfTracker {
    Lower(Kahan),
    Upper(Kahan),
}

impl CdfTracker {
    pub(crate) fn new() -> Self {
        CdfTracker::Lower(Kahan::default())
    }

    pub(crate) fn push(&mut self, pmf: f64) {
        match self {
            CdfTracker::Lower(acc) => {
                acc.add(pmf);
                if acc.value() > 0.5 {
                    let mut sf = Kahan::default();
                    sf.add(1.0 - acc.value());
                    *self = CdfTracker::Upper(sf);
                }
            }
            CdfTracker::Upper(acc) => acc.add(-pmf),
        }
    }

    /// Survival probability `1 - F(t)`, clamped into `[0, 1]`.
    pub(crate) fn survival(&self) -> f64 {
        match self {
            CdfTracker::Lower(acc) => (1.0 - acc.value()).clamp(0.0, 1.0),
            CdfTracker::Upper(acc) => acc.value().clamp(0.0, 1.0),
        }
    }

    pub(crate) fn cdf(&self) -> f64 {
        match self {
            CdfTracker::Lower(acc) => acc.value().min(1.0),
            CdfTracker::Upper(acc) => (1.0 - acc.value()).clamp(0.0, 1.0),
        }
    }
}

/// Probability that exactly `t` trials are needed for the k-th success:
/// `C(t-1, k-1) p^k (1-p)^(t-k)` for `t >= k`, zero otherwise.
///
/// Evaluated in log space so large `t` and `k` neither overflow the binomial
/// coefficient nor underflow prematurely.
pub fn nb_pmf(params: &NegBinomialParams, t: u64) -> f64 {
    let (k, p) = (params.k, params.p);
    if t < k {
        return 0.0;
    }
    if p == 1.0 {
        return if t == k { 1.0 } else { 0.0 };
    }
    let kf = k as f64;
    let tf = t as f64;
    let ln = ln_gamma(tf) - ln_gamma(kf) - ln_gamma(tf - kf + 1.0)
        + kf * p.ln()
        + (tf - kf) * (-p).ln_1p();
    ln.exp()
}

/// Probability that at most `t` trials are needed for the k-th success.
///
/// Accumulates the pmf with compensation and stops early once the remaining
/// survival mass is below f64 resolution near 1, so huge `t` costs only the
/// width of the distribution.
pub fn nb_cdf(params: &NegBinomialParams, t: u64) -> f64 {
    let k = params.k;
    if t < k {
        return 0.0;
    }
    if params.p == 1.0 {
        return 1.0;
    }
    let mut scan = NbPmfScan::new(params);
    let mut tracker = CdfTracker::new();
    loop {
        let (s, pmf) = scan.next();
        tracker.push(pmf);
        if s == t {
            return tracker.cdf();
        }
        if let CdfTracker::Upper(_) = tracker {
            // Further terms cannot change the rounded cdf.
            if tracker.survival() < 1e-18 {
                return tracker.cdf();
            }
        }
    }
}

/// Splits the binomial `Bin(n, eps)` erasure count at the decoding threshold:
/// returns `(success, erasure)` with `success = P(J <= n - k)` and
/// `erasure = P(J > n - k)`.
///
/// The side of the split that does not contain the distribution's mode is
/// summed directly (log-space start at the boundary term, ratio walk inward,
/// compensated, early exit once terms decay below [`BINOM_TAIL_EXIT`] of the
/// partial sum); the other side is its complement. This keeps both outputs
/// fully precise whether the erasure probability is near 0 or near 1, and
/// never starts a rising term run from an underflowed value.
fn binom_decoding_split(n: u64, k: u64, eps: ErasureProb) -> Result<(f64, f64), DistError> {
    if n < k {
        return Err(DistError::BlockShorterThanData { n_s: n, k_s: k });
    }
    let e = eps.value();
    let q = eps.success();
    if e == 0.0 {
        return Ok((1.0, 0.0));
    }
    if n == k {
        // Success needs all n symbols through; powi keeps the n = 1 case
        // bit-identical to the plain complement.
        let s = q.powi(n as i32);
        return Ok((s, 1.0 - s));
    }
    let m = n - k; // decoding succeeds iff at most m erasures
    let nf = n as f64;
    let ef = e;
    // ln pmf of Bin(n, e) at j.
    let ln_term = |j: u64| -> f64 {
        let jf = j as f64;
        ln_gamma(nf + 1.0) - ln_gamma(jf + 1.0) - ln_gamma(nf - jf + 1.0)
            + jf * ef.ln()
            + (nf - jf) * (-ef).ln_1p()
    };
    let mode = ef * (nf + 1.0);
    if ((m + 1) as f64) > mode {
        // Upper tail j = m+1 ..= n sits past the mode: terms decay as j grows.
        let mut acc = Kahan::default();
        let mut term = ln_term(m + 1).exp();
        let mut j = m + 1;
        let mut low_run = 0u32;
        loop {
            acc.add(term);
            if j == n {
                break;
            }
            if term < BINOM_TAIL_EXIT * acc.value() {
                low_run += 1;
                if low_run >= 4 {
                    break;
                }
            } else {
                low_run = 0;
            }
            let jf = j as f64;
            // Ratio b(j+1)/b(j) = (n-j)/(j+1) * e/q.
            term *= (nf - jf) / (jf + 1.0) * (ef / q);
            j += 1;
        }
        let erasure = acc.value().clamp(0.0, 1.0);
        Ok((1.0 - erasure, erasure))
    } else {
        // Lower tail j = 0 ..= m sits below the mode: walk downward from the
        // boundary, where the largest term lives.
        let mut acc = Kahan::default();
        let mut term = ln_term(m).exp();
        let mut j = m;
        let mut low_run = 0u32;
        loop {
            acc.add(term);
            if j == 0 {
                break;
            }
            if term < BINOM_TAIL_EXIT * acc.value() {
                low_run += 1;
                if low_run >= 4 {
                    break;
                }
            } else {
                low_run = 0;
            }
            let jf = j as f64;
            // Ratio b(j-1)/b(j) = j/(n-j+1) * q/e.
            term *= jf / (nf - jf + 1.0) * (q / ef);
            j -= 1;
        }
        let success = acc.value().clamp(0.0, 1.0);
        Ok((success, 1.0 - success))
    }
}

/// Probability that a fixed `n_s`-symbol block fails to decode: more than
/// `n_s - k_s` of its symbols erase, i.e. the binomial upper tail
/// `sum_{j = n_s - k_s + 1}^{n_s} C(n_s, j) eps^j (1-eps)^(n_s - j)`.
///
/// Strictly decreasing in `n_s` and increasing in `eps_s`. Fails if the value
/// rounds to 1, which the [`ErasureProb`] type excludes; use
/// [`packet_success_prob`] in that regime.
pub fn packet_erasure_prob(n_s: u64, k_s: u64, eps_s: ErasureProb) -> Result<ErasureProb, DistError> {
    let (success, erasure) = binom_decoding_split(n_s, k_s, eps_s)?;
    if erasure >= 1.0 {
        return Err(DistError::ErasureProbSaturated { success });
    }
    ErasureProb::new(erasure)
}

/// Complement of [`packet_erasure_prob`]: probability that at least `k_s` of
/// the `n_s` symbols survive. Computed on the cancellation-free side of the
/// binomial split, so it stays accurate arbitrarily close to 0.
pub fn packet_success_prob(n_s: u64, k_s: u64, eps_s: ErasureProb) -> Result<f64, DistError> {
    Ok(binom_decoding_split(n_s, k_s, eps_s)?.0)
}

/// Exact expected maximum of `u` i.i.d. `NB(k, p)` draws via the tail-sum
/// identity `E[max] = sum_{t >= 0} (1 - F(t)^u)`.
///
/// The first `k` terms are exactly 1. Subsequent terms are computed as
/// `-expm1(u * ln_1p(-sf))` from the survival `sf = 1 - F(t)`, which stays
/// precise as F approaches 1. Truncates once terms stay below
/// `rel_tol * partial_sum` for a run of consecutive terms; errors if that
/// bound is not reached within [`MAX_TAIL_TERMS`] terms (a pre-check rejects
/// parameters whose mean alone already exceeds the cap, since the sum must
/// walk past the mean).
pub fn max_orderstat_mean_exact(
    params: &NegBinomialParams,
    u: u64,
    rel_tol: f64,
) -> Result<f64, DistError> {
    if u == 0 {
        return Err(DistError::InvalidUserCount);
    }
    if !(rel_tol > 0.0 && rel_tol.is_finite()) {
        return Err(DistError::InvalidTolerance(rel_tol));
    }
    if params.p == 1.0 {
        // Every draw is exactly k.
        return Ok(params.k as f64);
    }
    if params.mean() > MAX_TAIL_TERMS as f64 {
        return Err(DistError::TailSumDiverged {
            max_terms: MAX_TAIL_TERMS,
            mean: params.mean(),
        });
    }
    let uf = u as f64;
    let mut scan = NbPmfScan::new(params);
    let mut tracker = CdfTracker::new();
    let mut total = Kahan::default();
    total.add(params.k as f64); // terms t = 0 .. k-1, where F(t) = 0
    let mut low_run = 0u32;
    let mut terms: u64 = 0;
    loop {
        let (_, pmf) = scan.next();
        tracker.push(pmf);
        let sf = tracker.survival();
        let term = if u == 1 {
            sf
        } else {
            // 1 - (1 - sf)^u without cancellation for small sf.
            -(uf * (-sf).ln_1p()).exp_m1()
        };
        total.add(term);
        terms += 1;
        if term < rel_tol * total.value() {
            low_run += 1;
            if low_run >= TRUNCATION_RUN {
                return Ok(total.value());
            }
        } else {
            low_run = 0;
        }
        if terms > MAX_TAIL_TERMS {
            return Err(DistError::TailSumDiverged {
                max_terms: MAX_TAIL_TERMS,
                mean: params.mean(),
            });
        }
    }
}

/// Shared domain checks for the closed-form maximum approximations; returns
/// `(L, ln(1/eps))` with `L = log_(1/eps)(u)`.
fn approx_domain(k: u64, eps: ErasureProb, u: u64) -> Result<(f64, f64), DistError> {
    let e = eps.value();
    if e <= 0.0 {
        return Err(DistError::ApproxEpsOutOfRange(e));
    }
    if u < 2 {
        return Err(DistError::ApproxTooFewUsers(u));
    }
    let base = -e.ln(); // ln(1/eps) > 0
    let l = (u as f64).ln() / base;
    if k > 1 && l < 1.0 {
        return Err(DistError::ApproxOutsideDomain { k, eps: e, u, log: l });
    }
    Ok((l, base))
}

/// First-order approximation to `E[max of u NB(k, 1-eps)]` in the
/// large-user regime: `L + (k - 1) log_(1/eps)(L)` with `L = log_(1/eps)(u)`.
///
/// Requires `0 < eps < 1` and `u >= 2`; for `k > 1` additionally `L >= 1`
/// (the iterated logarithm is nonpositive below that, and exactly zero at
/// L = 1, which is accepted). For `k = 1` the result is exactly `L`.
pub fn approx_grabner(k: u64, eps: ErasureProb, u: u64) -> Result<f64, DistError> {
    let (l, base) = approx_domain(k, eps, u)?;
    if k == 1 {
        return Ok(l);
    }
    Ok(l + (k as f64 - 1.0) * (l.ln() / base))
}

/// Refinement of [`approx_grabner`] with the constant correction
/// `(k - 1) log_(1/eps)((1-eps)/eps)` added; same domain. For `k = 1` it
/// degenerates to the same value `L`, bitwise equal to the first-order form.
pub fn approx_improved(k: u64, eps: ErasureProb, u: u64) -> Result<f64, DistError> {
    let (l, base) = approx_domain(k, eps, u)?;
    if k == 1 {
        return Ok(l);
    }
    let e = eps.value();
    Ok(l + (k as f64 - 1.0) * ((l.ln() + ((1.0 - e) / e).ln()) / base))
}

/// Law-of-large-numbers baseline `k / (1 - eps)`: the per-user mean, which the
/// expected maximum approaches only when users share most losses. Independent
/// of the user count.
pub fn approx_lln(k: u64, eps: ErasureProb) -> f64 {
    k as f64 / eps.success()
}
