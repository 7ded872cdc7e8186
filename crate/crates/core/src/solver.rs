//! Single-carrier allocation by shadow-price search.
//!
//! One stage maximizes the sum of log-utilities of the participants' total
//! rates subject to the carrier's capacity. Strict concavity of every
//! log-utility makes aggregate demand strictly decreasing in the price, so
//! the capacity-clearing price is found by bisection: each participant's
//! best response at a price is the rate where its marginal log-utility
//! equals the price, truncated at zero and capped by the budget.

use thiserror::Error;

use crate::utility::{UtilityError, UtilityFunction, ZERO_RATE_FLOOR};

/// Lowest price the bracket extension will reach before giving up.
const PRICE_FLOOR: f64 = 1e-306;

const MAX_BISECTION_STEPS: u32 = 200;

/// One user's view of a stage: its utility, the rate it already holds from
/// earlier carriers (`offset`), and the rate pre-committed to it in this
/// stage (`reservation`).
#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub user_id: u32,
    pub utility: UtilityFunction,
    pub offset: f64,
    pub reservation: f64,
}

impl Participant {
    /// Rate the participant enters the price search with.
    fn base(&self) -> f64 {
        self.offset + self.reservation
    }
}

/// One carrier's allocation problem. Participants must be listed in a
/// deterministic order (the staged allocator sorts by user id).
#[derive(Debug, Clone, PartialEq)]
pub struct StageInput {
    pub carrier_id: u32,
    pub capacity: f64,
    pub participants: Vec<Participant>,
}

/// Rate assigned to one participant by a stage solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticipantRate {
    pub user_id: u32,
    /// Rate granted on top of the reservation (`>= 0`).
    pub incremental: f64,
    /// Rate the carrier hands the user: reservation + incremental.
    pub total: f64,
}

/// Result of one stage solve.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSolution {
    pub carrier_id: u32,
    /// Capacity-clearing price: marginal log-utility shared by every
    /// participant with an interior rate.
    pub shadow_price: f64,
    /// Per-participant rates, in the input's participant order.
    pub rates: Vec<ParticipantRate>,
    /// `|sum of totals - capacity|` actually achieved.
    pub residual: f64,
    /// Price bisection steps used.
    pub iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("stage has no participants")]
    EmptyParticipants,
    #[error("reservations ({required}) exceed capacity ({capacity})")]
    InfeasibleReservations { required: f64, capacity: f64 },
    #[error(
        "price search did not converge: bracket [{price_low}, {price_high}], residual {residual}"
    )]
    NoConvergence { price_low: f64, price_high: f64, residual: f64 },
    #[error("invalid stage input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

/// The participant's truncated best response: the incremental rate at which
/// its marginal log-utility (evaluated at offset + reservation + rate) hits
/// `price`, clamped to `[0, budget]`. Non-increasing in `price`.
pub fn demand_at_price(
    participant: &Participant,
    price: f64,
    budget: f64,
) -> Result<f64, SolverError> {
    let base = participant.base();
    let top = base + budget;
    let total = participant.utility.inverse_marginal(price, top)?;
    if total >= top {
        // Capped response: report the budget exactly rather than
        // (base + budget) - base, which can lose an ulp.
        return Ok(budget);
    }
    Ok((total - base).max(0.0))
}

/// Solves one carrier's allocation to tolerance `delta` (relative primal
/// feasibility: the returned totals sum to the capacity within
/// `delta * capacity`).
pub fn solve_stage(input: &StageInput, delta: f64) -> Result<StageSolution, SolverError> {
    if input.participants.is_empty() {
        return Err(SolverError::EmptyParticipants);
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(SolverError::InvalidInput(format!(
            "delta must be finite and > 0, got {delta}"
        )));
    }
    if !(input.capacity > 0.0 && input.capacity.is_finite()) {
        return Err(SolverError::InvalidInput(format!(
            "capacity must be finite and > 0, got {}",
            input.capacity
        )));
    }
    for p in &input.participants {
        if !(p.offset >= 0.0 && p.offset.is_finite()) || !(p.reservation >= 0.0 && p.reservation.is_finite())
        {
            return Err(SolverError::InvalidInput(format!(
                "participant {} has invalid offset/reservation",
                p.user_id
            )));
        }
        p.utility.validate()?;
    }
    let reserved: f64 = input.participants.iter().map(|p| p.reservation).sum();
    if reserved > input.capacity {
        return Err(SolverError::InfeasibleReservations {
            required: reserved,
            capacity: input.capacity,
        });
    }
    let free = input.capacity - reserved;

    let aggregate = |price: f64| -> Result<f64, SolverError> {
        let mut sum = 0.0;
        for p in &input.participants {
            sum += demand_at_price(p, price, input.capacity)?;
        }
        Ok(sum)
    };

    // Everything already committed (to within rounding): any price high
    // enough to zero out all demands clears the stage.
    if free <= 1e-9 * input.capacity {
        let mut price = 1.0;
        while aggregate(price)? > 0.0 && price < 1e300 {
            price *= 2.0;
        }
        return finish(input, price, 0);
    }
    // Demands capped at the budget round by an ulp or two; aim a hair under
    // the free capacity so the bracket search cannot chase rounding noise.
    let target = free - 1e-9 * input.capacity;

    // Bracket the clearing price. Demand grows as the price falls, so extend
    // downward until demand covers the target, upward until it does not. A
    // lower bracket end below the floor means the remaining capacity only
    // buys utility below f64 resolution (deeply saturated sigmoids).
    let mut p_lo = delta * 1e-3;
    while aggregate(p_lo)? < target {
        p_lo *= 0.5;
        if p_lo < PRICE_FLOOR {
            return Err(SolverError::NoConvergence {
                price_low: p_lo,
                price_high: delta * 1e-3,
                residual: target - aggregate(p_lo)?,
            });
        }
    }
    let mut p_hi = 1.0_f64.max(p_lo * 4.0);
    while aggregate(p_hi)? >= target {
        p_hi *= 2.0;
        if p_hi > 1e300 {
            return Err(SolverError::NoConvergence {
                price_low: p_lo,
                price_high: p_hi,
                residual: aggregate(p_hi)? - target,
            });
        }
    }

    // Geometric bisection, run to f64 resolution: prices span many decades,
    // and demand near a sigmoid plateau can swing by whole units across a
    // relative price window of 1e-12.
    let mut iterations = 0;
    while iterations < MAX_BISECTION_STEPS {
        iterations += 1;
        let mid = geometric_mid(p_lo, p_hi);
        if mid <= p_lo || mid >= p_hi {
            break;
        }
        if aggregate(mid)? >= target {
            p_lo = mid;
        } else {
            p_hi = mid;
        }
    }

    // Settle on whichever bracket point clears the capacity best.
    let mut best_price = p_lo;
    let mut best_gap = f64::INFINITY;
    for candidate in [p_lo, geometric_mid(p_lo, p_hi), p_hi] {
        let gap = (aggregate(candidate)? - free).abs();
        if gap < best_gap {
            best_gap = gap;
            best_price = candidate;
        }
    }

    let demands_at = |price: f64| -> Result<Vec<f64>, SolverError> {
        input
            .participants
            .iter()
            .map(|p| demand_at_price(p, price, input.capacity))
            .collect()
    };
    let mut incrementals = demands_at(best_price)?;

    // Where a marginal is flat to within an ulp of the price (sigmoids well
    // below their inflection), demand is set-valued at the clearing price
    // and the budget, not the price, pins the optimum. Ration the leftover
    // across participants in proportion to how far their demand moves
    // between the bracket ends; any rate in that span satisfies
    // stationarity at f64 resolution.
    let gap = free - incrementals.iter().sum::<f64>();
    if gap.abs() > 1e-12 * input.capacity {
        let reference = if gap > 0.0 { demands_at(p_lo)? } else { demands_at(p_hi)? };
        let headroom: Vec<f64> = reference
            .iter()
            .zip(&incrementals)
            .map(|(d, r)| (gap.signum() * (d - r)).max(0.0))
            .collect();
        let total_headroom: f64 = headroom.iter().sum();
        if total_headroom > 0.0 {
            let scale = (gap.abs() / total_headroom).min(1.0);
            for (r, h) in incrementals.iter_mut().zip(&headroom) {
                *r += gap.signum() * h * scale;
            }
        }
    }

    let solution = assemble(input, best_price, &incrementals, iterations);
    if solution.residual > delta * input.capacity {
        return Err(SolverError::NoConvergence {
            price_low: p_lo,
            price_high: p_hi,
            residual: solution.residual,
        });
    }
    Ok(solution)
}

/// Geometric midpoint computed in log space: the plain product underflows
/// once both ends sit below ~1e-154.
fn geometric_mid(lo: f64, hi: f64) -> f64 {
    (0.5 * (lo.ln() + hi.ln())).exp()
}

fn finish(input: &StageInput, price: f64, iterations: u32) -> Result<StageSolution, SolverError> {
    let mut incrementals = Vec::with_capacity(input.participants.len());
    for p in &input.participants {
        incrementals.push(demand_at_price(p, price, input.capacity)?);
    }
    Ok(assemble(input, price, &incrementals, iterations))
}

fn assemble(input: &StageInput, price: f64, incrementals: &[f64], iterations: u32) -> StageSolution {
    let mut rates = Vec::with_capacity(input.participants.len());
    let mut allocated = 0.0;
    for (p, &incremental) in input.participants.iter().zip(incrementals) {
        let total = p.reservation + incremental;
        allocated += total;
        rates.push(ParticipantRate { user_id: p.user_id, incremental, total });
    }
    StageSolution {
        carrier_id: input.carrier_id,
        shadow_price: price,
        rates,
        residual: (allocated - input.capacity).abs(),
        iterations,
    }
}

/// Floor used when evaluating marginals of participants that hold no rate.
pub(crate) fn zero_rate_eval_point(base: f64) -> f64 {
    base.max(ZERO_RATE_FLOOR)
}
