//! Expected download delays, in symbol slots, for the three redundancy
//! layouts, plus the probability of decoding within a fixed slot budget.
//!
//! Delay formulas (file of `k_p` packets, `k_s` data symbols each, symbol
//! erasure probability `eps_s`, `u` users):
//!
//! * infinite incremental redundancy: each packet costs one `NB(k_s, 1-eps_s)`
//!   draw per user; users advance packet by packet, so the file takes
//!   `k_p * E[max_u NB(k_s, 1-eps_s)]` slots (`k_p k_s / (1-eps_s)` for one
//!   user).
//! * fixed redundancy: whole `n_s`-slot blocks succeed independently with the
//!   packet success probability, so the file takes
//!   `n_s * E[max_u NB(k_p, 1-eps_p)]` slots (`k_p n_s / (1-eps_p)` for one
//!   user, by Wald's identity).
//! * finite incremental redundancy (single user): each attempt spends
//!   `min(X, n_s)` slots where `X ~ NB(k_s, 1-eps_s)`, succeeding iff
//!   `X <= n_s`; renewal-reward gives `k_p * E[min(X, n_s)] / (1-eps_p)`.

use serde::{Deserialize, Serialize};

use crate::dist::{
    max_orderstat_mean_exact, nb_cdf, packet_success_prob, CdfTracker, DistError, ErasureProb,
    Kahan, NbPmfScan, NegBinomialParams, DEFAULT_REL_TOL,
};

/// Success probabilities below this are reported as an infinite expected
/// delay instead of producing astronomically large finite numbers or
/// infinities.
pub const INFINITE_DELAY_GUARD: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Infinite incremental redundancy (rateless inner code).
    Iir,
    /// Fixed redundancy (fixed-rate inner blocks, rateless outer repair).
    Fr,
    /// Finite incremental redundancy (incremental repair capped at n_s).
    Fir,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Iir => "iir",
            Scheme::Fr => "fr",
            Scheme::Fir => "fir",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iir" => Ok(Scheme::Iir),
            "fr" => Ok(Scheme::Fr),
            "fir" => Ok(Scheme::Fir),
            other => Err(SchemeError::UnknownScheme(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchemeError {
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("unknown scheme {0:?}, expected iir, fr, or fir")]
    UnknownScheme(String),
    #[error("code dimensions require k_s >= 1 and k_p >= 1, got k_s={k_s}, k_p={k_p}")]
    InvalidCode { k_s: u64, k_p: u64 },
    #[error("{scheme} requires a block length n_s")]
    MissingBlockLength { scheme: Scheme },
    #[error("finite incremental redundancy is only analyzed point-to-point, got users={users}")]
    FirMulticast { users: u64 },
    #[error("users must be at least 1")]
    NoUsers,
    #[error("{op} applies to {expected}, got {actual}")]
    WrongScheme {
        op: &'static str,
        expected: &'static str,
        actual: Scheme,
    },
    #[error(
        "expected delay is infinite: packet success probability {success:.3e} \
         is below the {guard:.0e} guard"
    )]
    InfiniteDelay { success: f64, guard: f64 },
    #[error("decode probability within a budget is undefined for finite incremental redundancy")]
    BudgetUnsupported,
    #[error("trials must be at least 1")]
    NoTrials,
}

/// Code dimensions: `k_p` packets per file, `k_s` data symbols per packet,
/// and for block-based schemes the block length `n_s >= k_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CodeConfig {
    k_s: u64,
    k_p: u64,
    n_s: Option<u64>,
}

impl CodeConfig {
    pub fn new(k_s: u64, k_p: u64, n_s: Option<u64>) -> Result<Self, SchemeError> {
        if k_s < 1 || k_p < 1 {
            return Err(SchemeError::InvalidCode { k_s, k_p });
        }
        if let Some(n) = n_s {
            if n < k_s {
                return Err(SchemeError::Dist(DistError::BlockShorterThanData {
                    n_s: n,
                    k_s,
                }));
            }
        }
        Ok(Self { k_s, k_p, n_s })
    }

    pub fn k_s(&self) -> u64 {
        self.k_s
    }

    pub fn k_p(&self) -> u64 {
        self.k_p
    }

    pub fn n_s(&self) -> Option<u64> {
        self.n_s
    }

    /// Total data symbols `k_p * k_s`, the normalization denominator.
    pub fn data_symbols(&self) -> f64 {
        self.k_p as f64 * self.k_s as f64
    }
}

/// A fully specified evaluation target: code, channel, audience, and scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scenario {
    code: CodeConfig,
    channel: ErasureProb,
    users: u64,
    scheme: Scheme,
}

impl Scenario {
    /// Validates scheme-specific structure: block-based schemes need `n_s`,
    /// and finite incremental redundancy is defined point-to-point only.
    pub fn new(
        code: CodeConfig,
        channel: ErasureProb,
        users: u64,
        scheme: Scheme,
    ) -> Result<Self, SchemeError> {
        if users < 1 {
            return Err(SchemeError::NoUsers);
        }
        match scheme {
            Scheme::Iir => {}
            Scheme::Fr | Scheme::Fir => {
                if code.n_s.is_none() {
                    return Err(SchemeError::MissingBlockLength { scheme });
                }
                if scheme == Scheme::Fir && users != 1 {
                    return Err(SchemeError::FirMulticast { users });
                }
            }
        }
        Ok(Self {
            code,
            channel,
            users,
            scheme,
        })
    }

    pub fn code(&self) -> &CodeConfig {
        &self.code
    }

    pub fn channel(&self) -> ErasureProb {
        self.channel
    }

    pub fn users(&self) -> u64 {
        self.users
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
}

/// How a delay value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Closed-form expression.
    Analytic,
    /// Numerically exact truncated tail sum.
    ExactSum,
    /// Seeded simulation.
    MonteCarlo,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Analytic => "analytic",
            Method::ExactSum => "exact_sum",
            Method::MonteCarlo => "monte_carlo",
        })
    }
}

/// An expected delay in symbol slots, never below `k_p * k_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayEstimate {
    pub mean_slots: f64,
    /// Present iff the estimate came from simulation.
    pub std_err: Option<f64>,
    pub method: Method,
    /// Delay per data symbol, `mean_slots / (k_p * k_s)`.
    pub normalized: Option<f64>,
}

impl DelayEstimate {
    fn exact(mean_slots: f64, method: Method, code: &CodeConfig) -> Self {
        debug_assert!(mean_slots >= code.data_symbols() * (1.0 - 1e-9));
        Self {
            mean_slots,
            std_err: None,
            method,
            normalized: Some(mean_slots / code.data_symbols()),
        }
    }
}

/// Probability of full decoding within a slot budget, per user and summed in
/// expectation over the audience.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeProbability {
    pub per_user: f64,
    /// Expected number of users that have decoded: `users * per_user`.
    pub expected_users: f64,
}

fn guarded_success(success: f64) -> Result<f64, SchemeError> {
    if success < INFINITE_DELAY_GUARD {
        Err(SchemeError::InfiniteDelay {
            success,
            guard: INFINITE_DELAY_GUARD,
        })
    } else {
        Ok(success)
    }
}

/// Packet success probability for an `(n_s, k_s)` block, rejected when it is
/// too small for finite expected delays.
pub(crate) fn packet_success_guard(
    n_s: u64,
    k_s: u64,
    channel: ErasureProb,
) -> Result<f64, SchemeError> {
    guarded_success(packet_success_prob(n_s, k_s, channel)?)
}

/// Expected delay under infinite incremental redundancy.
///
/// Point-to-point this is the closed form `k_p k_s / (1 - eps_s)`; for `u > 1`
/// users it is `k_p * E[max_u NB(k_s, 1-eps_s)]`, since all users must finish
/// each packet before the transmitter moves to the next.
pub fn iir_expected_delay(scenario: &Scenario) -> Result<DelayEstimate, SchemeError> {
    expect_scheme(scenario, Scheme::Iir, "iir_expected_delay")?;
    let code = scenario.code;
    let success = scenario.channel.success();
    if scenario.users == 1 {
        let mean = (code.k_p as f64 * code.k_s as f64) / success;
        return Ok(DelayEstimate::exact(mean, Method::Analytic, &code));
    }
    let per_packet = max_orderstat_mean_exact(
        &NegBinomialParams::new(code.k_s, success)?,
        scenario.users,
        DEFAULT_REL_TOL,
    )?;
    let mean = code.k_p as f64 * per_packet;
    Ok(DelayEstimate::exact(mean, Method::ExactSum, &code))
}

/// Expected delay under fixed redundancy.
///
/// Point-to-point this is `k_p n_s / (1 - eps_p)` with `eps_p` the block
/// failure probability; for `u > 1` users it is
/// `n_s * E[max_u NB(k_p, 1-eps_p)]` over whole-block successes.
pub fn fr_expected_delay(scenario: &Scenario) -> Result<DelayEstimate, SchemeError> {
    expect_scheme(scenario, Scheme::Fr, "fr_expected_delay")?;
    let code = scenario.code;
    let n_s = code.n_s.expect("validated at construction");
    let success = packet_success_guard(n_s, code.k_s, scenario.channel)?;
    if scenario.users == 1 {
        let mean = (code.k_p as f64 * n_s as f64) / success;
        return Ok(DelayEstimate::exact(mean, Method::Analytic, &code));
    }
    let blocks = max_orderstat_mean_exact(
        &NegBinomialParams::new(code.k_p, success)?,
        scenario.users,
        DEFAULT_REL_TOL,
    )?;
    let mean = n_s as f64 * blocks;
    Ok(DelayEstimate::exact(mean, Method::ExactSum, &code))
}

/// Expected slots one attempt of a capped incremental-redundancy packet
/// consumes: `E[min(X, n_s)]` for `X ~ NB(k_s, 1-eps_s)`, i.e.
/// `sum_{n=k_s}^{n_s} n pmf(n) + n_s (1 - F(n_s))`. Always in `[k_s, n_s]`.
pub fn fir_expected_symbol_budget(
    k_s: u64,
    n_s: u64,
    eps_s: ErasureProb,
) -> Result<f64, DistError> {
    if n_s < k_s {
        return Err(DistError::BlockShorterThanData { n_s, k_s });
    }
    let p = eps_s.success();
    // min(X, n_s) = k_s almost surely when the cap sits at the support floor
    // or the channel never erases.
    if n_s == k_s || p == 1.0 {
        return Ok(k_s as f64);
    }
    let params = NegBinomialParams::new(k_s, p)?;
    let mut scan = NbPmfScan::new(&params);
    let mut tracker = CdfTracker::new();
    let mut partial = Kahan::default();
    loop {
        let (t, pmf) = scan.next();
        partial.add(t as f64 * pmf);
        tracker.push(pmf);
        if t == n_s {
            break;
        }
    }
    let budget = partial.value() + n_s as f64 * tracker.survival();
    debug_assert!(budget >= k_s as f64 * (1.0 - 1e-12) && budget <= n_s as f64 * (1.0 + 1e-12));
    Ok(budget)
}

/// Expected delay under finite incremental redundancy (single user).
///
/// Renewal-reward over attempts: each attempt costs `E[min(X, n_s)]` slots
/// and succeeds with the packet success probability, so a packet costs their
/// ratio and the file `k_p` times that.
pub fn fir_expected_delay(scenario: &Scenario) -> Result<DelayEstimate, SchemeError> {
    expect_scheme(scenario, Scheme::Fir, "fir_expected_delay")?;
    let code = scenario.code;
    let n_s = code.n_s.expect("validated at construction");
    let success = packet_success_guard(n_s, code.k_s, scenario.channel)?;
    let budget = fir_expected_symbol_budget(code.k_s, n_s, scenario.channel)?;
    let mean = (code.k_p as f64 * budget) / success;
    Ok(DelayEstimate::exact(mean, Method::Analytic, &code))
}

/// Expected delay for any scheme, dispatching on the scenario's own scheme.
pub fn expected_delay(scenario: &Scenario) -> Result<DelayEstimate, SchemeError> {
    match scenario.scheme {
        Scheme::Iir => iir_expected_delay(scenario),
        Scheme::Fr => fr_expected_delay(scenario),
        Scheme::Fir => fir_expected_delay(scenario),
    }
}

/// Probability that a user finishes the whole file within `budget_slots`
/// symbol slots, plus the expected number of finished users.
///
/// For infinite incremental redundancy the file needs `NB(k_p k_s, 1-eps_s)`
/// slots in total; for fixed redundancy only whole `n_s`-slot blocks count,
/// so the budget buys `floor(budget / n_s)` block attempts. Undefined for
/// finite incremental redundancy (its slot process is not a stopping-time
/// count with a closed cdf here).
pub fn decode_prob_within_budget(
    scenario: &Scenario,
    budget_slots: u64,
) -> Result<DecodeProbability, SchemeError> {
    let code = scenario.code;
    let per_user = match scenario.scheme {
        Scheme::Fir => return Err(SchemeError::BudgetUnsupported),
        Scheme::Iir => {
            let params = NegBinomialParams::new(code.k_p * code.k_s, scenario.channel.success())?;
            nb_cdf(&params, budget_slots)
        }
        Scheme::Fr => {
            let n_s = code.n_s.expect("validated at construction");
            let success = packet_success_prob(n_s, code.k_s, scenario.channel)?;
            if success < INFINITE_DELAY_GUARD {
                // Decoding is almost surely impossible; the probability is 0
                // for any finite budget.
                0.0
            } else {
                let params = NegBinomialParams::new(code.k_p, success)?;
                nb_cdf(&params, budget_slots / n_s)
            }
        }
    };
    Ok(DecodeProbability {
        per_user,
        expected_users: scenario.users as f64 * per_user,
    })
}

fn expect_scheme(
    scenario: &Scenario,
    expected: Scheme,
    op: &'static str,
) -> Result<(), SchemeError> {
    if scenario.scheme == expected {
        Ok(())
    } else {
        Err(SchemeError::WrongScheme {
            op,
            expected: match expected {
                Scheme::Iir => "iir",
                Scheme::Fr => "fr",
                Scheme::Fir => "fir",
            },
            actual: scenario.scheme,
        })
    }
}
