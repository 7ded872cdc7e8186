//! Coverage-based partitioning of users into per-carrier groups.
//!
//! A user belongs to a carrier's group when its distance from the base
//! station is strictly below the carrier's coverage radius. Sorting carriers
//! by ascending radius makes the groups nested, which is what the staged
//! allocator iterates over.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::utility::UtilityFunction;

/// Priority class of a user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserClass {
    /// Carries a minimum required rate; served with priority.
    #[serde(alias = "VIP")]
    Vip,
    /// No minimum rate guarantee.
    #[serde(alias = "Regular")]
    Regular,
}

/// One user terminal and the application it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct User {
    pub id: u32,
    pub class: UserClass,
    /// Distance from the base station, same length unit as coverage radii.
    pub distance: f64,
    pub utility: UtilityFunction,
    /// Minimum required rate; must be 0 for regular users and > 0 for VIPs.
    #[serde(rename = "r_req")]
    pub min_rate: f64,
}

impl User {
    /// Checks the per-user invariants (class/minimum-rate consistency,
    /// finite non-negative distance, valid utility parameters).
    pub fn validate(&self) -> Result<(), GroupingError> {
        if !(self.distance >= 0.0 && self.distance.is_finite()) {
            return Err(GroupingError::InvalidUser {
                id: self.id,
                reason: format!("distance must be finite and >= 0, got {}", self.distance),
            });
        }
        if !self.min_rate.is_finite() || self.min_rate < 0.0 {
            return Err(GroupingError::InvalidUser {
                id: self.id,
                reason: format!("r_req must be finite and >= 0, got {}", self.min_rate),
            });
        }
        match self.class {
            UserClass::Regular if self.min_rate != 0.0 => Err(GroupingError::InvalidUser {
                id: self.id,
                reason: format!("regular users must have r_req = 0, got {}", self.min_rate),
            }),
            UserClass::Vip if self.min_rate <= 0.0 => Err(GroupingError::InvalidUser {
                id: self.id,
                reason: "vip users must have r_req > 0".to_string(),
            }),
            _ => self.utility.validate().map_err(|e| GroupingError::InvalidUser {
                id: self.id,
                reason: e.to_string(),
            }),
        }
    }
}

/// One component carrier available at the base station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Carrier {
    pub id: u32,
    pub coverage_radius: f64,
    pub capacity: f64,
}

impl Carrier {
    pub fn validate(&self) -> Result<(), GroupingError> {
        if !(self.coverage_radius > 0.0 && self.coverage_radius.is_finite()) {
            return Err(GroupingError::InvalidCarrier {
                id: self.id,
                reason: format!(
                    "coverage_radius must be finite and > 0, got {}",
                    self.coverage_radius
                ),
            });
        }
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return Err(GroupingError::InvalidCarrier {
                id: self.id,
                reason: format!("capacity must be finite and > 0, got {}", self.capacity),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroupingError {
    #[error("duplicate user id {0}")]
    DuplicateUserId(u32),
    #[error("duplicate carrier id {0}")]
    DuplicateCarrierId(u32),
    #[error("invalid user {id}: {reason}")]
    InvalidUser { id: u32, reason: String },
    #[error("invalid carrier {id}: {reason}")]
    InvalidCarrier { id: u32, reason: String },
}

/// Membership sets for one carrier, each sorted by ascending user id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CarrierGroup {
    pub members: Vec<u32>,
    pub vip: Vec<u32>,
    pub regular: Vec<u32>,
}

/// Per-carrier user groups and the inverse per-user carrier sets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserGroups {
    by_carrier: BTreeMap<u32, CarrierGroup>,
    by_user: BTreeMap<u32, Vec<u32>>,
}

impl UserGroups {
    /// Membership sets of one carrier; `None` for an unknown carrier id.
    pub fn group(&self, carrier_id: u32) -> Option<&CarrierGroup> {
        self.by_carrier.get(&carrier_id)
    }

    /// Carrier ids (ascending) whose coverage contains the user. Empty for a
    /// user out of range of every carrier.
    pub fn in_range_carriers(&self, user_id: u32) -> &[u32] {
        self.by_user.get(&user_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_member(&self, user_id: u32, carrier_id: u32) -> bool {
        self.group(carrier_id)
            .map(|g| g.members.binary_search(&user_id).is_ok())
            .unwrap_or(false)
    }
}

/// Builds the coverage groups: user `i` joins carrier `j`'s group exactly
/// when `d_i < D_j` (a user at exactly the radius is outside).
pub fn build_groups(users: &[User], carriers: &[Carrier]) -> Result<UserGroups, GroupingError> {
    let mut seen_users = BTreeSet::new();
    for u in users {
        if !seen_users.insert(u.id) {
            return Err(GroupingError::DuplicateUserId(u.id));
        }
    }
    let mut seen_carriers = BTreeSet::new();
    for c in carriers {
        if !seen_carriers.insert(c.id) {
            return Err(GroupingError::DuplicateCarrierId(c.id));
        }
    }

    let mut by_carrier: BTreeMap<u32, CarrierGroup> = BTreeMap::new();
    let mut by_user: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for u in users {
        by_user.insert(u.id, Vec::new());
    }
    for c in carriers {
        let mut group = CarrierGroup::default();
        for u in users {
            if u.distance < c.coverage_radius {
                group.members.push(u.id);
                match u.class {
                    UserClass::Vip => group.vip.push(u.id),
                    UserClass::Regular => group.regular.push(u.id),
                }
            }
        }
        group.members.sort_unstable();
        group.vip.sort_unstable();
        group.regular.sort_unstable();
        for &uid in &group.members {
            by_user.get_mut(&uid).expect("member is a known user").push(c.id);
        }
        by_carrier.insert(c.id, group);
    }
    for carriers_of_user in by_user.values_mut() {
        carriers_of_user.sort_unstable();
    }
    Ok(UserGroups { by_carrier, by_user })
}

/// Carrier ids in allocation order: ascending coverage radius, ties broken
/// by ascending id.
pub fn carrier_order(carriers: &[Carrier]) -> Vec<u32> {
    let mut order: Vec<&Carrier> = carriers.iter().collect();
    order.sort_by(|x, y| {
        x.coverage_radius
            .total_cmp(&y.coverage_radius)
            .then(x.id.cmp(&y.id))
    });
    order.into_iter().map(|c| c.id).collect()
}
