//! Seeded Monte Carlo simulation of the generative transmission processes.
//!
//! Every trial draws from its own ChaCha8 stream (`seed_from_u64(seed)` plus
//! `set_stream(trial_index)`), so trial i's draws do not depend on how many
//! trials ran before it or on which thread ran it. Per-trial slot counts are
//! exact integers and are aggregated in integer arithmetic (u128 sums), which
//! makes the parallel and sequential paths bit-identical under any partition
//! of the trial range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::dist::NegBinomialParams;
use crate::schemes::{packet_success_guard, Scenario, Scheme, SchemeError};

/// A reproducible simulation request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationPlan {
    scenario: Scenario,
    trials: u64,
    seed: u64,
}

impl SimulationPlan {
    pub fn new(scenario: Scenario, trials: u64, seed: u64) -> Result<Self, SchemeError> {
        if trials < 1 {
            return Err(SchemeError::NoTrials);
        }
        Ok(Self {
            scenario,
            trials,
            seed,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Aggregated simulation output. `std_err` is the sample standard deviation
/// divided by sqrt(trials); it is 0 when every trial returned the same count
/// (and for single-trial runs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimResult {
    pub mean_slots: f64,
    pub std_err: f64,
    pub min_slots: u64,
    pub max_slots: u64,
    pub trials: u64,
}

/// One Bernoulli(p) trial-count draw via the inverse cdf of the geometric
/// distribution: `1 + floor(ln(U) / ln(1-p))` with `U` uniform on (0, 1).
/// `ln(1-p)` is supplied precomputed by the caller as `ln_q`.
fn sample_geometric<R: Rng + ?Sized>(rng: &mut R, ln_q: f64) -> u64 {
    let u: f64 = rng.sample(rand::distr::Open01);
    1 + (u.ln() / ln_q) as u64
}

/// Number of Bernoulli(p) trials to the k-th success, as the sum of k
/// inverse-cdf geometric draws. The degenerate `p = 1` returns `k` without
/// consuming any randomness.
pub fn sample_negative_binomial<R: Rng + ?Sized>(params: &NegBinomialParams, rng: &mut R) -> u64 {
    let k = params.k();
    let p = params.p();
    if p == 1.0 {
        return k;
    }
    // ln_1p keeps the log accurate when p is tiny.
    let ln_q = (-p).ln_1p();
    (0..k).fold(0u64, |acc, _| acc.saturating_add(sample_geometric(rng, ln_q)))
}

fn max_negative_binomial<R: Rng + ?Sized>(
    params: &NegBinomialParams,
    users: u64,
    rng: &mut R,
) -> u64 {
    (0..users)
        .map(|_| sample_negative_binomial(params, rng))
        .max()
        .expect("users >= 1")
}

#[derive(Debug, Clone, Copy)]
enum Process {
    /// Per packet, every user draws its own repair count; the slowest user
    /// gates the packet.
    Iir {
        packets: u64,
        users: u64,
        per_packet: NegBinomialParams,
    },
    /// Whole blocks succeed or fail; the slowest user's block count times the
    /// block length is the delay.
    Fr {
        block: u64,
        users: u64,
        blocks_needed: NegBinomialParams,
    },
    /// Attempt-by-attempt: draw the full repair demand, spend at most `cap`
    /// slots on it, succeed iff the demand fit under the cap.
    Fir {
        packets: u64,
        cap: u64,
        per_attempt: NegBinomialParams,
    },
}

/// A prepared per-trial sampler: scenario validation and packet-level success
/// probabilities are resolved once, then `slots(trial)` is pure and
/// thread-safe.
#[derive(Debug, Clone, Copy)]
pub struct TrialSampler {
    seed: u64,
    process: Process,
}

impl TrialSampler {
    pub fn new(scenario: &Scenario, seed: u64) -> Result<Self, SchemeError> {
        let code = scenario.code();
        let process = match scenario.scheme() {
            Scheme::Iir => Process::Iir {
                packets: code.k_p(),
                users: scenario.users(),
                per_packet: NegBinomialParams::new(code.k_s(), scenario.channel().success())?,
            },
            Scheme::Fr => {
                let n_s = code.n_s().expect("validated at construction");
                let success = packet_success_guard(n_s, code.k_s(), scenario.channel())?;
                Process::Fr {
                    block: n_s,
                    users: scenario.users(),
                    blocks_needed: NegBinomialParams::new(code.k_p(), success)?,
                }
            }
            Scheme::Fir => {
                let n_s = code.n_s().expect("validated at construction");
                // The guard keeps expected attempt counts representable.
                packet_success_guard(n_s, code.k_s(), scenario.channel())?;
                Process::Fir {
                    packets: code.k_p(),
                    cap: n_s,
                    per_attempt: NegBinomialParams::new(code.k_s(), scenario.channel().success())?,
                }
            }
        };
        Ok(Self { seed, process })
    }

    /// Total symbol slots one realization of the whole-file download takes.
    /// Deterministic in `(seed, trial)` regardless of evaluation order.
    pub fn slots(&self, trial: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial);
        match self.process {
            Process::Iir {
                packets,
                users,
                per_packet,
            } => (0..packets).fold(0u64, |acc, _| {
                acc.saturating_add(max_negative_binomial(&per_packet, users, &mut rng))
            }),
            Process::Fr {
                block,
                users,
                blocks_needed,
            } => max_negative_binomial(&blocks_needed, users, &mut rng).saturating_mul(block),
            Process::Fir {
                packets,
                cap,
                per_attempt,
            } => {
                let mut slots = 0u64;
                let mut delivered = 0u64;
                while delivered < packets {
                    let demand = sample_negative_binomial(&per_attempt, &mut rng);
                    slots = slots.saturating_add(demand.min(cap));
                    if demand <= cap {
                        delivered += 1;
                    }
                }
                slots
            }
        }
    }
}

/// Exact-integer aggregation of per-trial slot counts. Merging is
/// associative and commutative, so any parallel partition yields the same
/// result bit for bit.
#[derive(Debug, Clone, Copy)]
struct Accum {
    n: u64,
    sum: u128,
    sum_sq: u128,
    min: u64,
    max: u64,
}

impl Accum {
    fn empty() -> Self {
        Self {
            n: 0,
            sum: 0,
            sum_sq: 0,
            min: u64::MAX,
            max: 0,
        }
    }

    fn push(mut self, x: u64) -> Self {
        self.n += 1;
        self.sum += x as u128;
        self.sum_sq = self.sum_sq.saturating_add((x as u128) * (x as u128));
        self.min = self.min.min(x);
        self.max = self.max.max(x);
        self
    }

    fn merge(a: Self, b: Self) -> Self {
        Self {
            n: a.n + b.n,
            sum: a.sum + b.sum,
            sum_sq: a.sum_sq.saturating_add(b.sum_sq),
            min: a.min.min(b.min),
            max: a.max.max(b.max),
        }
    }

    fn into_result(self) -> SimResult {
        let n = self.n as f64;
        let mean = self.sum as f64 / n;
        let std_err = if self.n > 1 {
            // n * sum_sq - sum^2 >= 0 exactly (Cauchy-Schwarz in integers);
            // fall back to floats only on u128 overflow of the products.
            let var = match (self.n as u128)
                .checked_mul(self.sum_sq)
                .and_then(|a| self.sum.checked_mul(self.sum).map(|b| a - b))
            {
                Some(num) => num as f64 / (n * (n - 1.0)),
                None => {
                    let m = self.sum as f64 / n;
                    ((self.sum_sq as f64 / n) - m * m) * (n / (n - 1.0))
                }
            };
            (var / n).sqrt()
        } else {
            0.0
        };
        SimResult {
            mean_slots: mean,
            std_err,
            min_slots: self.min,
            max_slots: self.max,
            trials: self.n,
        }
    }
}

#[cfg(feature = "parallel")]
fn aggregate<F: Fn(u64) -> u64 + Sync>(trials: u64, per_trial: F) -> Accum {
    (0..trials)
        .into_par_iter()
        .fold(Accum::empty, |acc, i| acc.push(per_trial(i)))
        .reduce(Accum::empty, Accum::merge)
}

#[cfg(not(feature = "parallel"))]
fn aggregate<F: Fn(u64) -> u64>(trials: u64, per_trial: F) -> Accum {
    (0..trials).fold(Accum::empty(), |acc, i| acc.push(per_trial(i)))
}

/// Runs the plan and aggregates. Bit-identical across runs, thread counts,
/// and the parallel/sequential feature switch.
pub fn simulate(plan: &SimulationPlan) -> Result<SimResult, SchemeError> {
    let sampler = TrialSampler::new(&plan.scenario, plan.seed)?;
    let result = aggregate(plan.trials, |i| sampler.slots(i)).into_result();
    debug_assert!(result.min_slots as f64 >= plan.scenario.code().data_symbols());
    Ok(result)
}

/// Simulates `E[max of users draws of NB(k, p)]` directly: each trial draws
/// `users` samples from its own stream and keeps the maximum.
pub fn simulate_max_orderstat(
    params: &NegBinomialParams,
    users: u64,
    trials: u64,
    seed: u64,
) -> Result<SimResult, SchemeError> {
    if users < 1 {
        return Err(SchemeError::Dist(crate::dist::DistError::InvalidUserCount));
    }
    if trials < 1 {
        return Err(SchemeError::NoTrials);
    }
    let params = *params;
    let result = aggregate(trials, move |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i);
        max_negative_binomial(&params, users, &mut rng)
    })
    .into_result();
    Ok(result)
}
