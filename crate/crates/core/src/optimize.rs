//! Block-length search for the block-based schemes, and the audience size at
//! which optimized fixed redundancy starts beating infinite incremental
//! redundancy.
//!
//! The search is deliberately exhaustive: every `n_s` in `[k_s, ns_max]` is
//! evaluated and kept in the returned profile, with per-point errors recorded
//! instead of silently skipped. Points whose parameters put the expected
//! delay out of numeric reach fail fast (the tail-sum mean pre-check), so the
//! full profile stays tractable even when most of it is infeasible.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::dist::ErasureProb;
use crate::schemes::{
    expected_delay, iir_expected_delay, CodeConfig, DelayEstimate, Scenario, Scheme, SchemeError,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimizeError {
    #[error(
        "block-length optimization applies to fixed or finite incremental \
         redundancy, got {0}"
    )]
    UnsupportedScheme(Scheme),
    #[error("search range is empty: ns_max {ns_max} is below k_s {k_s}")]
    RangeEmpty { k_s: u64, ns_max: u64 },
    #[error("no block length in [{k_s}, {ns_max}] yields a finite expected delay")]
    NoFeasiblePoint { k_s: u64, ns_max: u64 },
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

/// One evaluated block length. Infeasible points carry the error that ruled
/// them out.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePoint {
    pub n_s: u64,
    pub delay: Result<DelayEstimate, SchemeError>,
}

/// Outcome of an exhaustive block-length search.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    /// Smallest block length attaining the minimum expected delay.
    pub best_ns: u64,
    pub best_delay: DelayEstimate,
    /// Every evaluated point, in ascending `n_s` order.
    pub profile: Vec<ProfilePoint>,
    /// True when the optimum sits on the search boundary `ns_max`, i.e. the
    /// unconstrained optimum may lie beyond the searched range.
    pub capped: bool,
}

/// Default search ceiling: three data lengths for fixed redundancy, five for
/// finite incremental redundancy (whose profile flattens toward the rateless
/// limit instead of turning upward). `None` for the rateless scheme, which
/// has no block length.
pub fn default_ns_max(scheme: Scheme, k_s: u64) -> Option<u64> {
    match scheme {
        Scheme::Iir => None,
        Scheme::Fr => Some(k_s.saturating_mul(3)),
        Scheme::Fir => Some(k_s.saturating_mul(5)),
    }
}

/// Exhaustively minimizes the expected delay over `n_s` in `[k_s, ns_max]`.
///
/// Ties go to the smallest block length. `Err(NoFeasiblePoint)` means every
/// point in the range failed (each point's error is lost in that case, but
/// the first point's is representative; re-run a single evaluation to see
/// it).
pub fn optimize_ns(
    scheme: Scheme,
    k_s: u64,
    k_p: u64,
    channel: ErasureProb,
    users: u64,
    ns_max: u64,
) -> Result<OptimizationResult, OptimizeError> {
    if scheme == Scheme::Iir {
        return Err(OptimizeError::UnsupportedScheme(scheme));
    }
    if ns_max < k_s {
        return Err(OptimizeError::RangeEmpty { k_s, ns_max });
    }
    // Structural errors (bad code dimensions, zero users, multicast with the
    // capped scheme) are hard errors, not per-point ones.
    Scenario::new(
        CodeConfig::new(k_s, k_p, Some(k_s))?,
        channel,
        users,
        scheme,
    )?;

    let eval = |n_s: u64| -> ProfilePoint {
        let delay = CodeConfig::new(k_s, k_p, Some(n_s))
            .and_then(|code| Scenario::new(code, channel, users, scheme))
            .and_then(|sc| expected_delay(&sc));
        ProfilePoint { n_s, delay }
    };

    #[cfg(feature = "parallel")]
    let profile: Vec<ProfilePoint> = (k_s..=ns_max).into_par_iter().map(eval).collect();
    #[cfg(not(feature = "parallel"))]
    let profile: Vec<ProfilePoint> = (k_s..=ns_max).map(eval).collect();

    let mut best: Option<(u64, DelayEstimate)> = None;
    for pt in &profile {
        if let Ok(d) = &pt.delay {
            // Strict comparison on an ascending scan keeps the smallest n_s
            // among exact ties.
            if best.as_ref().is_none_or(|(_, b)| d.mean_slots < b.mean_slots) {
                best = Some((pt.n_s, d.clone()));
            }
        }
    }
    let (best_ns, best_delay) =
        best.ok_or(OptimizeError::NoFeasiblePoint { k_s, ns_max })?;
    Ok(OptimizationResult {
        best_ns,
        best_delay,
        profile,
        capped: best_ns == ns_max,
    })
}

/// Audience sizes `1, 2, 5, 10, 20, 50, ...` up to `users_max`, with
/// `users_max` itself appended when the pattern skips it.
pub fn crossover_user_grid(users_max: u64) -> Vec<u64> {
    let mut grid = Vec::new();
    let mut decade = 1u64;
    'decades: loop {
        for m in [1u64, 2, 5] {
            let v = decade.saturating_mul(m);
            if v > users_max {
                break 'decades;
            }
            grid.push(v);
        }
        decade = decade.saturating_mul(10);
    }
    if grid.last() != Some(&users_max) && users_max >= 1 {
        grid.push(users_max);
    }
    grid
}

/// Both schemes evaluated at one audience size.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossoverPoint {
    pub users: u64,
    pub iir: Result<DelayEstimate, SchemeError>,
    pub fr: Result<OptimizationResult, OptimizeError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossoverResult {
    /// Smallest audience size from which optimized fixed redundancy strictly
    /// beats infinite incremental redundancy at every larger grid point, or
    /// `None` if it still loses (or ties) at `users_max`.
    pub crossover_users: Option<u64>,
    pub points: Vec<CrossoverPoint>,
}

/// Sweeps the audience grid comparing infinite incremental redundancy against
/// block-length-optimized fixed redundancy, and reports where the advantage
/// durably flips.
///
/// "Durably" means the maximal trailing run of grid points where optimized
/// fixed redundancy strictly wins; an isolated win followed by a loss does
/// not count. Points where either side fails to evaluate count as losses.
pub fn find_crossover_users(
    k_s: u64,
    k_p: u64,
    channel: ErasureProb,
    users_max: u64,
    ns_max: u64,
) -> Result<CrossoverResult, OptimizeError> {
    if users_max < 1 {
        return Err(SchemeError::NoUsers.into());
    }
    if ns_max < k_s {
        return Err(OptimizeError::RangeEmpty { k_s, ns_max });
    }
    let points: Vec<CrossoverPoint> = crossover_user_grid(users_max)
        .into_iter()
        .map(|users| {
            let iir = CodeConfig::new(k_s, k_p, None)
                .and_then(|code| Scenario::new(code, channel, users, Scheme::Iir))
                .and_then(|sc| iir_expected_delay(&sc));
            let fr = optimize_ns(Scheme::Fr, k_s, k_p, channel, users, ns_max);
            CrossoverPoint { users, iir, fr }
        })
        .collect();
    let mut crossover_users = None;
    for pt in points.iter().rev() {
        let fr_wins = match (&pt.iir, &pt.fr) {
            (Ok(iir), Ok(fr)) => fr.best_delay.mean_slots < iir.mean_slots,
            _ => false,
        };
        if fr_wins {
            crossover_users = Some(pt.users);
        } else {
            break;
        }
    }
    Ok(CrossoverResult {
        crossover_users,
        points,
    })
}
