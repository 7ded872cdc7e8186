//! The staged multi-carrier allocation pipeline.
//!
//! Carriers are processed in ascending coverage order. Before each stage the
//! allocator computes every covered user's remaining minimum-rate deficit
//! and picks one of three regimes: all minimums already met (everyone under
//! coverage shares the carrier), VIP deficits exceed the carrier (only VIPs
//! participate), or VIP deficits fit (deficits become reservations and
//! everyone shares the remainder). Each stage is then a single convex solve;
//! rates accumulate across stages and a user's final rate is the sum of its
//! per-carrier rates.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::grouping::{build_groups, carrier_order, Carrier, CarrierGroup, GroupingError, User};
use crate::solver::{solve_stage, Participant, SolverError, StageInput};

/// The regime a stage was solved under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageCase {
    /// Every covered user already holds its minimum: plain shared allocation.
    AllSatisfied,
    /// Outstanding VIP deficits meet or exceed the carrier's capacity: only
    /// VIP users participate.
    VipOnly,
    /// Deficits fit inside the capacity: they become reservations and all
    /// covered users share the rest.
    Reserved,
}

impl StageCase {
    /// Stable label used in reports and CSV output.
    pub fn label(&self) -> &'static str {
        match self {
            StageCase::AllSatisfied => "all_satisfied",
            StageCase::VipOnly => "vip_only",
            StageCase::Reserved => "reserved",
        }
    }
}

impl fmt::Display for StageCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Case picked for a stage together with the participating users.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSelection {
    pub case: StageCase,
    /// User ids allocated to in this stage, ascending.
    pub eligible: Vec<u32>,
}

/// Everything one stage decided about one participating user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageUserDetail {
    pub user_id: u32,
    /// Outstanding minimum-rate gap entering the stage.
    pub deficit: f64,
    /// Rate pre-committed to the user this stage.
    pub reservation: f64,
    /// Rate won in the shared solve, on top of the reservation.
    pub incremental: f64,
    /// Rate this carrier hands the user: reservation + incremental.
    pub total: f64,
    /// Aggregated rate across all carriers processed so far.
    pub cumulative_after: f64,
}

/// Outcome of one carrier's stage.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    /// No user under coverage; the carrier's capacity stays unallocated.
    Skipped,
    Solved {
        case: StageCase,
        shadow_price: f64,
        /// `|sum of handed-out rates - capacity|`.
        residual: f64,
        /// Per-user details in ascending user-id order.
        users: Vec<StageUserDetail>,
    },
}

/// One entry of the stage trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub carrier_id: u32,
    pub capacity: f64,
    pub outcome: StageOutcome,
}

/// Final per-user outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserSummary {
    pub user_id: u32,
    /// Sum of the user's per-carrier rates.
    pub final_rate: f64,
    /// False when no carrier covers the user (final rate is then 0).
    pub reachable: bool,
}

/// Full multi-stage allocation trace: scenario echo, per-stage records in
/// allocation order, and final per-user rates.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationReport {
    pub users: Vec<User>,
    pub carriers: Vec<Carrier>,
    pub delta: f64,
    pub stages: Vec<StageReport>,
    pub summaries: Vec<UserSummary>,
}

impl AllocationReport {
    /// Rate carrier `carrier_id` handed `user_id` (0 when the user did not
    /// participate in that stage).
    pub fn carrier_rate(&self, user_id: u32, carrier_id: u32) -> f64 {
        self.stages
            .iter()
            .find(|s| s.carrier_id == carrier_id)
            .and_then(|s| match &s.outcome {
                StageOutcome::Solved { users, .. } => {
                    users.iter().find(|d| d.user_id == user_id).map(|d| d.total)
                }
                StageOutcome::Skipped => None,
            })
            .unwrap_or(0.0)
    }

    pub fn final_rate(&self, user_id: u32) -> Option<f64> {
        self.summaries.iter().find(|s| s.user_id == user_id).map(|s| s.final_rate)
    }

    pub fn stage(&self, carrier_id: u32) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.carrier_id == carrier_id)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocationError {
    #[error(transparent)]
    Invalid(#[from] GroupingError),
    #[error("tolerance must be finite and > 0, got {0}")]
    InvalidTolerance(f64),
    #[error("stage {stage} (carrier {carrier_id}) failed: {source}")]
    Stage { stage: usize, carrier_id: u32, source: SolverError },
}

/// Remaining minimum-rate gap `max(0, r_req - C)` for each listed user.
/// Regular users carry no minimum, so their deficit is always zero.
pub fn compute_deficits(
    users: &[User],
    member_ids: &[u32],
    cumulative: &BTreeMap<u32, f64>,
) -> BTreeMap<u32, f64> {
    member_ids
        .iter()
        .map(|&id| {
            let min_rate = users.iter().find(|u| u.id == id).map(|u| u.min_rate).unwrap_or(0.0);
            let held = cumulative.get(&id).copied().unwrap_or(0.0);
            (id, (min_rate - held).max(0.0))
        })
        .collect()
}

/// Picks the stage regime from the deficits. `None` when nobody is covered
/// (the stage is skipped, not an error). The capacity comparison uses the
/// VIP deficits only; regular users never carry a deficit.
pub fn select_case(
    group: &CarrierGroup,
    deficits: &BTreeMap<u32, f64>,
    capacity: f64,
) -> Option<StageSelection> {
    if group.members.is_empty() {
        return None;
    }
    let vip_deficit: f64 = group.vip.iter().map(|id| deficits.get(id).copied().unwrap_or(0.0)).sum();
    let any_unmet = group.members.iter().any(|id| deficits.get(id).copied().unwrap_or(0.0) > 0.0);
    let selection = if !any_unmet {
        StageSelection { case: StageCase::AllSatisfied, eligible: group.members.clone() }
    } else if vip_deficit >= capacity {
        StageSelection { case: StageCase::VipOnly, eligible: group.vip.clone() }
    } else {
        StageSelection { case: StageCase::Reserved, eligible: group.members.clone() }
    };
    Some(selection)
}

/// Per-user reservations for the stage: the deficits under [`StageCase::Reserved`],
/// zero for everyone otherwise.
pub fn build_reservations(
    selection: &StageSelection,
    deficits: &BTreeMap<u32, f64>,
) -> BTreeMap<u32, f64> {
    selection
        .eligible
        .iter()
        .map(|&id| {
            let r = match selection.case {
                StageCase::Reserved => deficits.get(&id).copied().unwrap_or(0.0),
                StageCase::AllSatisfied | StageCase::VipOnly => 0.0,
            };
            (id, r)
        })
        .collect()
}

/// Runs the full staged allocation. Deterministic: identical inputs produce
/// bit-identical reports.
pub fn allocate(
    users: &[User],
    carriers: &[Carrier],
    delta: f64,
) -> Result<AllocationReport, AllocationError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(AllocationError::InvalidTolerance(delta));
    }
    for u in users {
        u.validate()?;
    }
    for c in carriers {
        c.validate()?;
    }
    let groups = build_groups(users, carriers)?;
    let order = carrier_order(carriers);

    let mut cumulative: BTreeMap<u32, f64> = users.iter().map(|u| (u.id, 0.0)).collect();
    let mut stages = Vec::with_capacity(order.len());

    for (stage_idx, carrier_id) in order.iter().copied().enumerate() {
        let carrier = carriers.iter().find(|c| c.id == carrier_id).expect("ordered id exists");
        let group = groups.group(carrier_id).expect("grouped carrier");
        let deficits = compute_deficits(users, &group.members, &cumulative);
        let Some(selection) = select_case(group, &deficits, carrier.capacity) else {
            stages.push(StageReport {
                carrier_id,
                capacity: carrier.capacity,
                outcome: StageOutcome::Skipped,
            });
            continue;
        };
        let reservations = build_reservations(&selection, &deficits);
        let participants: Vec<Participant> = selection
            .eligible
            .iter()
            .map(|&id| {
                let user = users.iter().find(|u| u.id == id).expect("eligible id exists");
                Participant {
                    user_id: id,
                    utility: user.utility,
                    offset: cumulative[&id],
                    reservation: reservations[&id],
                }
            })
            .collect();
        let input = StageInput { carrier_id, capacity: carrier.capacity, participants };
        let solution = solve_stage(&input, delta).map_err(|source| AllocationError::Stage {
            stage: stage_idx,
            carrier_id,
            source,
        })?;

        let mut details = Vec::with_capacity(solution.rates.len());
        for rate in &solution.rates {
            let held = cumulative.get_mut(&rate.user_id).expect("participant is a known user");
            *held += rate.total;
            details.push(StageUserDetail {
                user_id: rate.user_id,
                deficit: deficits[&rate.user_id],
                reservation: reservations[&rate.user_id],
                incremental: rate.incremental,
                total: rate.total,
                cumulative_after: *held,
            });
        }
        stages.push(StageReport {
            carrier_id,
            capacity: carrier.capacity,
            outcome: StageOutcome::Solved {
                case: selection.case,
                shadow_price: solution.shadow_price,
                residual: solution.residual,
                users: details,
            },
        });
    }

    // Final rates are the fold of per-stage totals in stage order, so the
    // aggregation identity holds bitwise.
    let summaries = users
        .iter()
        .map(|u| {
            let mut final_rate = 0.0;
            for stage in &stages {
                if let StageOutcome::Solved { users: details, .. } = &stage.outcome {
                    if let Some(d) = details.iter().find(|d| d.user_id == u.id) {
                        final_rate += d.total;
                    }
                }
            }
            UserSummary {
                user_id: u.id,
                final_rate,
                reachable: !groups.in_range_carriers(u.id).is_empty(),
            }
        })
        .collect();

    Ok(AllocationReport {
        users: users.to_vec(),
        carriers: carriers.to_vec(),
        delta,
        stages,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::UserClass;
    use crate::utility::UtilityFunction;

    fn sig(a: f64, b: f64) -> UtilityFunction {
        UtilityFunction::sigmoidal(a, b).unwrap()
    }

    fn log(k: f64, r_max: f64) -> UtilityFunction {
        UtilityFunction::logarithmic(k, r_max).unwrap()
    }

    fn user(id: u32, class: UserClass, distance: f64, utility: UtilityFunction, min_rate: f64) -> User {
        User { id, class, distance, utility, min_rate }
    }

    /// The bundled two-carrier mixed-traffic scenario: eight users, inner
    /// ring 1-4, outer ring 5-8, VIPs on even ids.
    fn eight_users() -> Vec<User> {
        vec![
            user(1, UserClass::Regular, 150.0, sig(3.0, 20.0), 0.0),
            user(2, UserClass::Vip, 200.0, sig(1.0, 30.0), 30.0),
            user(3, UserClass::Regular, 250.0, log(3.0, 100.0), 0.0),
            user(4, UserClass::Vip, 300.0, log(0.5, 100.0), 15.0),
            user(5, UserClass::Regular, 600.0, sig(5.0, 10.0), 0.0),
            user(6, UserClass::Vip, 650.0, sig(1.0, 30.0), 30.0),
            user(7, UserClass::Regular, 700.0, log(15.0, 100.0), 0.0),
            user(8, UserClass::Vip, 750.0, log(0.5, 100.0), 15.0),
        ]
    }

    fn two_carriers(r1: f64, r2: f64) -> Vec<Carrier> {
        vec![
            Carrier { id: 1, coverage_radius: 500.0, capacity: r1 },
            Carrier { id: 2, coverage_radius: 1000.0, capacity: r2 },
        ]
    }

    #[test]
    fn deficits_follow_minimum_rates() {
        let users = eight_users();
        let mut cumulative: BTreeMap<u32, f64> = users.iter().map(|u| (u.id, 0.0)).collect();
        let q = compute_deficits(&users, &[5, 6], &cumulative);
        assert_eq!(q[&6], 30.0);
        assert_eq!(q[&5], 0.0);

        cumulative.insert(2, 42.0);
        let q = compute_deficits(&users, &[2], &cumulative);
        assert_eq!(q[&2], 0.0);
    }

    #[test]
    fn case_selection_covers_the_three_regimes() {
        let users = eight_users();
        let carriers = two_carriers(60.0, 40.0);
        let groups = build_groups(&users, &carriers).unwrap();
        let zeros: BTreeMap<u32, f64> = users.iter().map(|u| (u.id, 0.0)).collect();

        // Inner stage, nothing allocated yet: deficits 30 + 15 = 45 < 60.
        let g1 = groups.group(1).unwrap();
        let q1 = compute_deficits(&users, &g1.members, &zeros);
        let sel = select_case(g1, &q1, 60.0).unwrap();
        assert_eq!(sel.case, StageCase::Reserved);
        assert_eq!(sel.eligible, vec![1, 2, 3, 4]);

        // Outer stage with users 2 and 4 already satisfied: deficits are
        // 30 + 15 = 45 from users 6 and 8.
        let satisfied: BTreeMap<u32, f64> =
            [(1, 10.0), (2, 35.0), (3, 5.0), (4, 16.0), (5, 0.0), (6, 0.0), (7, 0.0), (8, 0.0)]
                .into_iter()
                .collect();
        let g2 = groups.group(2).unwrap();
        let q2 = compute_deficits(&users, &g2.members, &satisfied);
        let sel = select_case(g2, &q2, 40.0).unwrap();
        assert_eq!(sel.case, StageCase::VipOnly);
        assert_eq!(sel.eligible, vec![2, 4, 6, 8]);
        // Boundary: deficits equal to capacity still excludes regulars.
        assert_eq!(select_case(g2, &q2, 45.0).unwrap().case, StageCase::VipOnly);
        let sel = select_case(g2, &q2, 50.0).unwrap();
        assert_eq!(sel.case, StageCase::Reserved);
        assert_eq!(sel.eligible, vec![1, 2, 3, 4, 5, 6, 7, 8]);

        // All minimums met.
        let all_met: BTreeMap<u32, f64> = users.iter().map(|u| (u.id, 50.0)).collect();
        let q = compute_deficits(&users, &g2.members, &all_met);
        assert_eq!(select_case(g2, &q, 40.0).unwrap().case, StageCase::AllSatisfied);

        // Empty group is skipped.
        let empty = CarrierGroup::default();
        assert!(select_case(&empty, &zeros, 40.0).is_none());
    }

    #[test]
    fn reservations_only_under_reserved_case() {
        let deficits: BTreeMap<u32, f64> =
            [(1, 0.0), (2, 30.0), (3, 0.0), (4, 15.0)].into_iter().collect();
        let reserved = StageSelection { case: StageCase::Reserved, eligible: vec![1, 2, 3, 4] };
        let r = build_reservations(&reserved, &deficits);
        assert_eq!(r[&2], 30.0);
        assert_eq!(r[&4], 15.0);
        assert_eq!(r[&1], 0.0);
        assert_eq!(r[&3], 0.0);

        let vip_only = StageSelection { case: StageCase::VipOnly, eligible: vec![2, 4] };
        assert!(build_reservations(&vip_only, &deficits).values().all(|&v| v == 0.0));
        let met = StageSelection { case: StageCase::AllSatisfied, eligible: vec![1, 2, 3, 4] };
        assert!(build_reservations(&met, &deficits).values().all(|&v| v == 0.0));
    }

    #[test]
    fn two_stage_run_meets_every_minimum() {
        let users = eight_users();
        let report = allocate(&users, &two_carriers(60.0, 100.0), 1e-3).unwrap();
        let minimums = [(2u32, 30.0), (4, 15.0), (6, 30.0), (8, 15.0)];
        for (id, want) in minimums {
            let held: f64 = report.final_rate(id).unwrap();
            assert!(held >= want, "user {id} ended at {held} < {want}");
        }
        for s in &report.summaries {
            assert!(s.final_rate > 0.0, "user {} got nothing", s.user_id);
            assert!(s.reachable);
        }
        // Conservation: both carriers fully spent.
        let total: f64 = report.summaries.iter().map(|s| s.final_rate).sum();
        assert!((total - 160.0).abs() <= 1e-3 * 160.0, "total {total}");
    }

    #[test]
    fn final_rates_are_exact_stage_sums() {
        let users = eight_users();
        let report = allocate(&users, &two_carriers(60.0, 100.0), 1e-3).unwrap();
        for s in &report.summaries {
            let recomputed = report.carrier_rate(s.user_id, 1) + report.carrier_rate(s.user_id, 2);
            assert_eq!(recomputed, s.final_rate, "user {}", s.user_id);
        }
    }

    #[test]
    fn cumulative_rates_never_decrease() {
        let users = eight_users();
        let report = allocate(&users, &two_carriers(60.0, 100.0), 1e-3).unwrap();
        let mut last: BTreeMap<u32, f64> = users.iter().map(|u| (u.id, 0.0)).collect();
        for stage in &report.stages {
            if let StageOutcome::Solved { users: details, .. } = &stage.outcome {
                for d in details {
                    assert!(d.cumulative_after >= last[&d.user_id]);
                    last.insert(d.user_id, d.cumulative_after);
                }
            }
        }
    }

    #[test]
    fn scarce_outer_carrier_leaves_uncovered_regulars_at_zero() {
        let users = eight_users();
        let report = allocate(&users, &two_carriers(60.0, 40.0), 1e-3).unwrap();
        match &report.stages[1].outcome {
            StageOutcome::Solved { case, .. } => assert_eq!(*case, StageCase::VipOnly),
            other => panic!("expected solved stage, got {other:?}"),
        }
        assert_eq!(report.final_rate(5).unwrap(), 0.0);
        assert_eq!(report.final_rate(7).unwrap(), 0.0);
        // They are covered by carrier 2, just not eligible in its stage.
        assert!(report.summaries.iter().all(|s| s.reachable));
    }

    #[test]
    fn single_carrier_all_regular_matches_direct_solve() {
        let users: Vec<User> = vec![
            user(1, UserClass::Regular, 10.0, sig(2.0, 15.0), 0.0),
            user(2, UserClass::Regular, 20.0, log(1.0, 80.0), 0.0),
        ];
        let carriers = vec![Carrier { id: 1, coverage_radius: 100.0, capacity: 30.0 }];
        let report = allocate(&users, &carriers, 1e-3).unwrap();
        match &report.stages[0].outcome {
            StageOutcome::Solved { case, shadow_price, users: details, .. } => {
                assert_eq!(*case, StageCase::AllSatisfied);
                let input = StageInput {
                    carrier_id: 1,
                    capacity: 30.0,
                    participants: users
                        .iter()
                        .map(|u| Participant {
                            user_id: u.id,
                            utility: u.utility,
                            offset: 0.0,
                            reservation: 0.0,
                        })
                        .collect(),
                };
                let direct = solve_stage(&input, 1e-3).unwrap();
                assert_eq!(*shadow_price, direct.shadow_price);
                for (d, r) in details.iter().zip(&direct.rates) {
                    assert_eq!(d.total, r.total);
                }
            }
            other => panic!("expected solved stage, got {other:?}"),
        }
    }

    #[test]
    fn out_of_coverage_users_are_flagged_not_fatal() {
        let users = vec![
            user(1, UserClass::Regular, 10.0, log(1.0, 80.0), 0.0),
            user(2, UserClass::Regular, 5000.0, log(1.0, 80.0), 0.0),
        ];
        let carriers = vec![Carrier { id: 1, coverage_radius: 100.0, capacity: 30.0 }];
        let report = allocate(&users, &carriers, 1e-3).unwrap();
        let stray = report.summaries.iter().find(|s| s.user_id == 2).unwrap();
        assert_eq!(stray.final_rate, 0.0);
        assert!(!stray.reachable);
    }

    #[test]
    fn empty_coverage_stage_is_skipped() {
        let users = vec![user(1, UserClass::Regular, 800.0, log(1.0, 80.0), 0.0)];
        let carriers = vec![
            Carrier { id: 1, coverage_radius: 100.0, capacity: 30.0 },
            Carrier { id: 2, coverage_radius: 1000.0, capacity: 30.0 },
        ];
        let report = allocate(&users, &carriers, 1e-3).unwrap();
        assert_eq!(report.stages[0].outcome, StageOutcome::Skipped);
        assert!(matches!(report.stages[1].outcome, StageOutcome::Solved { .. }));
    }

    #[test]
    fn real_time_priority_over_delay_tolerant() {
        // A sigmoidal user below its inflection outranks a logarithmic user
        // at the same offset: if the log user receives rate, so does the
        // sigmoidal one, and more of it.
        let users = vec![
            user(1, UserClass::Regular, 10.0, sig(1.0, 30.0), 0.0),
            user(2, UserClass::Regular, 20.0, log(0.5, 100.0), 0.0),
        ];
        let carriers = vec![Carrier { id: 1, coverage_radius: 100.0, capacity: 20.0 }];
        let report = allocate(&users, &carriers, 1e-3).unwrap();
        let r_sig = report.final_rate(1).unwrap();
        let r_log = report.final_rate(2).unwrap();
        assert!(r_sig < 30.0, "sigmoidal user stayed below inflection: {r_sig}");
        if r_log > 1e-3 {
            assert!(r_sig > 1e-3, "log user served while sigmoidal starved");
        }
        assert!(r_sig > r_log, "{r_sig} vs {r_log}");
    }

    #[test]
    fn stage_failures_carry_their_position() {
        // Saturated lone sigmoid: the stage solve cannot converge, and the
        // error names the stage it happened in.
        let users = vec![user(1, UserClass::Regular, 10.0, sig(2.5, 5.0), 0.0)];
        let carriers = vec![Carrier { id: 7, coverage_radius: 100.0, capacity: 600.0 }];
        match allocate(&users, &carriers, 1e-3) {
            Err(AllocationError::Stage { stage: 0, carrier_id: 7, source }) => {
                assert!(matches!(source, SolverError::NoConvergence { .. }));
            }
            other => panic!("expected annotated stage error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut users = eight_users();
        users[0].min_rate = 5.0; // regular user with a minimum
        assert!(allocate(&users, &two_carriers(60.0, 100.0), 1e-3).is_err());

        let users = eight_users();
        assert!(matches!(
            allocate(&users, &two_carriers(60.0, 100.0), 0.0),
            Err(AllocationError::InvalidTolerance(_))
        ));
    }
}
