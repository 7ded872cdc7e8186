//! Independent brute-force solvers and optimality certificates.
//!
//! Everything here exists to check the price-search solver, never to feed
//! it: a simplex grid search for tiny instances, projected gradient ascent
//! for arbitrary ones, and a KKT residual report. The library ships these so
//! verification can run against production binaries, not just in tests.

use thiserror::Error;

use crate::allocator::{AllocationReport, StageOutcome};
use crate::solver::{zero_rate_eval_point, Participant, ParticipantRate, StageInput};
use crate::utility::UtilityError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("grid search supports at most 3 participants, got {0}")]
    TooManyParticipants(usize),
    #[error("grid search needs at least 50 steps, got {0}")]
    TooFewSteps(u32),
    #[error("reservations exceed capacity")]
    InfeasibleReservations,
    #[error("gradient became non-finite at iterate {0}")]
    NonFiniteGradient(usize),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

/// Which oracle produced a result, with its resolution metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMethod {
    Grid { steps: u32, spacing: f64 },
    ProjectedGradient { iterations: u32, step: f64 },
}

/// A feasible point found by an oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub method: OracleMethod,
    /// Per-participant rates in the input's participant order.
    pub rates: Vec<ParticipantRate>,
    /// Sum of log-utilities at the totals (offset + reservation + rate).
    pub objective: f64,
}

/// KKT residuals of a candidate allocation at a candidate price.
///
/// This is a measurement, not a verdict: callers decide what residual is
/// acceptable. Participants whose incremental rate is zero are checked for
/// price dominance at their entry rate; participants clearly interior
/// (incremental above the zero-rate floor) are checked for stationarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// Max over interior participants of `|marginal - price| / price`.
    pub stationarity: f64,
    /// Max over zero-rate participants of `max(0, (marginal - price) / price)`,
    /// with the marginal taken at the participant's entry rate (floored away
    /// from the zero singularity).
    pub zero_rate_violation: f64,
    /// `|sum of totals - capacity|`.
    pub budget_residual: f64,
    pub interior_count: usize,
    pub zero_count: usize,
}

/// Sum of log-utilities of the totals reached from `incrementals`
/// (per-participant rates on top of reservations), with `-inf` for a zero
/// total. This is the objective every solver and oracle here maximizes.
pub fn stage_objective(input: &StageInput, incrementals: &[f64]) -> f64 {
    input
        .participants
        .iter()
        .zip(incrementals)
        .map(|(p, &r)| {
            p.utility
                .log_utility(p.offset + p.reservation + r)
                .unwrap_or(f64::NEG_INFINITY)
        })
        .sum()
}

fn to_rates(input: &StageInput, incrementals: &[f64]) -> Vec<ParticipantRate> {
    input
        .participants
        .iter()
        .zip(incrementals)
        .map(|(p, &r)| ParticipantRate {
            user_id: p.user_id,
            incremental: r,
            total: p.reservation + r,
        })
        .collect()
}

/// Exhaustive search over the budget simplex at spacing `capacity / steps`.
/// Exponential in the participant count, hence capped at 3.
pub fn grid_solve(input: &StageInput, steps: u32) -> Result<OracleResult, OracleError> {
    let n = input.participants.len();
    if n > 3 {
        return Err(OracleError::TooManyParticipants(n));
    }
    if steps < 50 {
        return Err(OracleError::TooFewSteps(steps));
    }
    let reserved: f64 = input.participants.iter().map(|p| p.reservation).sum();
    let free = input.capacity - reserved;
    if free < 0.0 {
        return Err(OracleError::InfeasibleReservations);
    }
    let h = input.capacity / steps as f64;
    let ticks = (free / h).floor() as u64;

    let mut best_obj = f64::NEG_INFINITY;
    let mut best: Vec<f64> = vec![0.0; n];
    let mut consider = |incr: &[f64]| {
        let obj = stage_objective(input, incr);
        if obj > best_obj {
            best_obj = obj;
            best = incr.to_vec();
        }
    };

    match n {
        0 => return Err(OracleError::TooManyParticipants(0)),
        1 => consider(&[free]),
        2 => {
            for i in 0..=ticks {
                let r0 = (i as f64 * h).min(free);
                consider(&[r0, free - r0]);
            }
        }
        3 => {
            for i in 0..=ticks {
                let r0 = (i as f64 * h).min(free);
                let rest = free - r0;
                let inner = (rest / h).floor() as u64;
                for j in 0..=inner {
                    let r1 = (j as f64 * h).min(rest);
                    consider(&[r0, r1, rest - r1]);
                }
            }
        }
        _ => unreachable!(),
    }

    Ok(OracleResult {
        method: OracleMethod::Grid { steps, spacing: h },
        rates: to_rates(input, &best),
        objective: best_obj,
    })
}

/// Euclidean projection of `v` onto `{ y : y >= 0, sum(y) = total }`.
fn project_simplex(v: &[f64], total: f64) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = (v.iter().sum::<f64>() - total) / v.len() as f64;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - total) / (i as f64 + 1.0);
        if u - t > 0.0 {
            threshold = t;
        } else {
            break;
        }
    }
    v.iter().map(|&x| (x - threshold).max(0.0)).collect()
}

/// Projected gradient ascent on the stage objective over the budget simplex.
///
/// `step` seeds the step size. The step adapts: it doubles after an accepted
/// move and is halved until a move stops decreasing the objective, so the
/// iteration is monotone and still crosses the near-flat plateaus of
/// saturated sigmoids. Iterates are kept at totals >= 1e-9 so the
/// log-utility gradient stays finite; the optimum is interior in total rate,
/// so the floor is inactive at convergence.
pub fn projected_gradient_solve(
    input: &StageInput,
    iterations: u32,
    step: f64,
) -> Result<OracleResult, OracleError> {
    let n = input.participants.len();
    if n == 0 {
        return Err(OracleError::TooManyParticipants(0));
    }
    let reserved: f64 = input.participants.iter().map(|p| p.reservation).sum();
    let free = input.capacity - reserved;
    if free < 0.0 {
        return Err(OracleError::InfeasibleReservations);
    }

    // Incremental-rate floor keeping every total away from the log
    // singularity at zero.
    let floors: Vec<f64> = input
        .participants
        .iter()
        .map(|p| (1e-9 - p.offset - p.reservation).max(0.0))
        .collect();
    let floor_sum: f64 = floors.iter().sum();
    let shifted_budget = (free - floor_sum).max(0.0);

    let project = |raw: &[f64]| -> Vec<f64> {
        let shifted: Vec<f64> = raw.iter().zip(&floors).map(|(r, f)| r - f).collect();
        project_simplex(&shifted, shifted_budget)
            .into_iter()
            .zip(&floors)
            .map(|(y, f)| y + f)
            .collect()
    };

    let mut rates = project(&vec![free / n as f64; n]);
    let mut objective = stage_objective(input, &rates);
    let mut performed = 0;
    let mut cur_step = step;

    'outer: for it in 0..iterations {
        let mut gradient = Vec::with_capacity(n);
        for (p, &r) in input.participants.iter().zip(&rates) {
            let g = p
                .utility
                .marginal_log_utility(p.offset + p.reservation + r)
                .map_err(|_| OracleError::NonFiniteGradient(it as usize))?;
            if !g.is_finite() {
                return Err(OracleError::NonFiniteGradient(it as usize));
            }
            gradient.push(g);
        }

        for _ in 0..80 {
            let candidate: Vec<f64> = rates
                .iter()
                .zip(&gradient)
                .map(|(r, g)| r + cur_step * g)
                .collect();
            let candidate = project(&candidate);
            let cand_obj = stage_objective(input, &candidate);
            if cand_obj >= objective {
                let moved = candidate
                    .iter()
                    .zip(&rates)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                rates = candidate;
                objective = cand_obj;
                performed = it + 1;
                cur_step = (cur_step * 2.0).min(1e12);
                if moved < 1e-13 {
                    break 'outer;
                }
                continue 'outer;
            }
            cur_step *= 0.5;
            if cur_step < 1e-18 {
                break 'outer;
            }
        }
        // No ascent step left at this point: converged.
        break;
    }

    Ok(OracleResult {
        method: OracleMethod::ProjectedGradient { iterations: performed, step },
        rates: to_rates(input, &rates),
        objective,
    })
}

/// Re-derives the KKT residuals of `totals` (per-participant carrier rates,
/// aligned with the input's participant order) at the price `price`.
pub fn kkt_check(input: &StageInput, totals: &[f64], price: f64) -> KktReport {
    assert_eq!(
        totals.len(),
        input.participants.len(),
        "one total per participant required"
    );
    let mut stationarity = 0.0f64;
    let mut zero_violation = 0.0f64;
    let mut interior_count = 0;
    let mut zero_count = 0;
    let mut allocated = 0.0;
    for (p, &total) in input.participants.iter().zip(totals) {
        allocated += total;
        let incremental = total - p.reservation;
        if incremental > crate::utility::ZERO_RATE_FLOOR {
            interior_count += 1;
            let m = p
                .utility
                .marginal_log_utility(p.offset + total)
                .unwrap_or(f64::INFINITY);
            stationarity = stationarity.max((m - price).abs() / price);
        } else if incremental <= 0.0 {
            zero_count += 1;
            let at = zero_rate_eval_point(p.offset + p.reservation);
            let m = p.utility.marginal_log_utility(at).unwrap_or(f64::INFINITY);
            zero_violation = zero_violation.max(((m - price) / price).max(0.0));
        }
        // Increments in (0, floor] are below the solver's resolution and
        // satisfy neither classification; they are left unchecked.
    }
    KktReport {
        stationarity,
        zero_rate_violation: zero_violation,
        budget_residual: (allocated - input.capacity).abs(),
        interior_count,
        zero_count,
    }
}

/// KKT certificate of one solved stage inside a full report.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCertificate {
    pub carrier_id: u32,
    pub report: KktReport,
}

/// Re-derives the KKT residuals of every solved stage in an allocation
/// report, rebuilding each stage's inputs from the recorded trace.
pub fn verify_report(report: &AllocationReport) -> Vec<StageCertificate> {
    let mut certificates = Vec::new();
    for stage in &report.stages {
        let StageOutcome::Solved { shadow_price, users: details, .. } = &stage.outcome else {
            continue;
        };
        let participants: Vec<Participant> = details
            .iter()
            .map(|d| {
                let user = report
                    .users
                    .iter()
                    .find(|u| u.id == d.user_id)
                    .expect("report references a known user");
                Participant {
                    user_id: d.user_id,
                    utility: user.utility,
                    offset: d.cumulative_after - d.total,
                    reservation: d.reservation,
                }
            })
            .collect();
        let input = StageInput {
            carrier_id: stage.carrier_id,
            capacity: stage.capacity,
            participants,
        };
        let totals: Vec<f64> = details.iter().map(|d| d.total).collect();
        certificates.push(StageCertificate {
            carrier_id: stage.carrier_id,
            report: kkt_check(&input, &totals, *shadow_price),
        });
    }
    certificates
}
