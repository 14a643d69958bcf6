//! Cluster, workload and request types plus the cost/time arithmetic that
//! tenants use to price hardware.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{mul_div_round, Money, Progress, Rate, SimDuration, SimTime, MS_PER_HOUR, PROGRESS_SCALE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("launch table is empty")]
    EmptyLaunchTable,
    #[error("unknown hardware `{0}`")]
    UnknownHardware(AccelId),
    #[error("workload is incompatible with hardware `{0}`")]
    IncompatibleHardware(AccelId),
    #[error("hardware `{0}` listed more than once")]
    DuplicateEntry(AccelId),
    #[error("workload has no remaining work on the target hardware")]
    CompletedWorkload,
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
    #[error("invalid workload profile: {0}")]
    InvalidProfile(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(
    /// Identifier of an accelerator type, e.g. `A10`.
    AccelId
);
string_id!(TenantId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "req-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceleratorType {
    pub id: AccelId,
    pub name: String,
    /// Operator floor price; the rate charged when nobody competes.
    pub base_rate: Rate,
    pub instance_count: u32,
}

/// A concrete allocatable unit: `(type, index)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceRef {
    pub accel: AccelId,
    pub index: u32,
}

impl fmt::Display for InstanceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.accel, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceState {
    Free,
    Allocated {
        tenant: TenantId,
        rate: Rate,
        since: SimTime,
    },
    Draining {
        tenant: TenantId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub accel: AccelId,
    pub index: u32,
    pub state: InstanceState,
}

impl Instance {
    pub fn reference(&self) -> InstanceRef {
        InstanceRef {
            accel: self.accel.clone(),
            index: self.index,
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self.state, InstanceState::Free)
    }

    pub fn tenant(&self) -> Option<&TenantId> {
        match &self.state {
            InstanceState::Free => None,
            InstanceState::Allocated { tenant, .. } | InstanceState::Draining { tenant } => {
                Some(tenant)
            }
        }
    }
}

/// A pool of heterogeneous accelerators serving one computational function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionalCluster {
    pub id: String,
    pub function: String,
    types: Vec<AcceleratorType>,
    instances: Vec<Instance>,
}

impl FunctionalCluster {
    /// Builds a cluster with every instance free.
    pub fn new(
        id: impl Into<String>,
        function: impl Into<String>,
        types: Vec<AcceleratorType>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &types {
            if !seen.insert(t.id.clone()) {
                return Err(ModelError::InvalidCluster(format!(
                    "duplicate accelerator id `{}`",
                    t.id
                )));
            }
            if t.base_rate == Rate::ZERO {
                return Err(ModelError::InvalidCluster(format!(
                    "accelerator `{}` needs a positive base rate",
                    t.id
                )));
            }
            if t.instance_count == 0 {
                return Err(ModelError::InvalidCluster(format!(
                    "accelerator `{}` needs at least one instance",
                    t.id
                )));
            }
        }
        let instances = types
            .iter()
            .flat_map(|t| {
                (0..t.instance_count).map(|index| Instance {
                    accel: t.id.clone(),
                    index,
                    state: InstanceState::Free,
                })
            })
            .collect();
        Ok(FunctionalCluster {
            id: id.into(),
            function: function.into(),
            types,
            instances,
        })
    }

    pub fn types(&self) -> &[AcceleratorType] {
        &self.types
    }

    pub fn accel(&self, id: &AccelId) -> Option<&AcceleratorType> {
        self.types.iter().find(|t| &t.id == id)
    }

    pub fn base_rate(&self, id: &AccelId) -> Option<Rate> {
        self.accel(id).map(|t| t.base_rate)
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instances_of<'a>(&'a self, id: &'a AccelId) -> impl Iterator<Item = &'a Instance> + 'a {
        self.instances.iter().filter(move |i| &i.accel == id)
    }

    pub fn instance(&self, r: &InstanceRef) -> Option<&Instance> {
        self.instances
            .iter()
            .find(|i| i.accel == r.accel && i.index == r.index)
    }

    pub(crate) fn instance_mut(&mut self, r: &InstanceRef) -> Option<&mut Instance> {
        self.instances
            .iter_mut()
            .find(|i| i.accel == r.accel && i.index == r.index)
    }

    /// Lowest-index free instance of a type.
    pub fn first_free(&self, id: &AccelId) -> Option<InstanceRef> {
        self.instances_of(id).find(|i| i.is_free()).map(Instance::reference)
    }

    pub fn free_count(&self, id: &AccelId) -> usize {
        self.instances_of(id).filter(|i| i.is_free()).count()
    }

    /// Instances currently held by `tenant`, in cluster order.
    pub fn holdings_of(&self, tenant: &TenantId) -> Vec<InstanceRef> {
        self.instances
            .iter()
            .filter(|i| i.tenant() == Some(tenant))
            .map(Instance::reference)
            .collect()
    }
}

/// How a workload behaves on each accelerator type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    /// Total execution time per compatible type; absent types are incompatible.
    exec_times: BTreeMap<AccelId, SimDuration>,
    pub checkpoint_interval: Progress,
    /// Cost-equivalent of redoing the work since the last checkpoint.
    pub restart_surcharge: Money,
    /// Time from allocation until the workload is running (fresh or resumed).
    pub load_delay: SimDuration,
}

impl WorkloadProfile {
    pub fn new(
        exec_times: BTreeMap<AccelId, SimDuration>,
        checkpoint_interval: Progress,
        restart_surcharge: Money,
        load_delay: SimDuration,
    ) -> Result<Self> {
        if exec_times.is_empty() {
            return Err(ModelError::InvalidProfile(
                "at least one compatible accelerator is required".into(),
            ));
        }
        if let Some((id, _)) = exec_times.iter().find(|(_, t)| t.millis() == 0) {
            return Err(ModelError::InvalidProfile(format!(
                "execution time on `{id}` must be positive"
            )));
        }
        let step = checkpoint_interval.ppb();
        if step == 0 {
            return Err(ModelError::InvalidProfile(
                "checkpoint interval must be in (0, 1]".into(),
            ));
        }
        // Must tile [0, 1] to within one part per billion.
        let count = (PROGRESS_SCALE + step / 2) / step;
        if count == 0 || (count * step).abs_diff(PROGRESS_SCALE) > 1 {
            return Err(ModelError::InvalidProfile(format!(
                "checkpoint interval {} does not divide 1.0",
                checkpoint_interval.to_decimal_string()
            )));
        }
        Ok(WorkloadProfile {
            exec_times,
            checkpoint_interval,
            restart_surcharge,
            load_delay,
        })
    }

    pub fn total_time(&self, accel: &AccelId) -> Option<SimDuration> {
        self.exec_times.get(accel).copied()
    }

    pub fn is_compatible(&self, accel: &AccelId) -> bool {
        self.exec_times.contains_key(accel)
    }

    pub fn exec_times(&self) -> &BTreeMap<AccelId, SimDuration> {
        &self.exec_times
    }

    /// Last checkpoint boundary at or below `progress`.
    pub fn checkpoint_floor(&self, progress: Progress) -> Progress {
        let step = self.checkpoint_interval.ppb();
        let floor = Progress::from_ppb(progress.ppb() - progress.ppb() % step);
        // Snap the tail of a non-exact tiling onto 1.0.
        if PROGRESS_SCALE - floor.ppb() <= 1 {
            Progress::ONE
        } else {
            floor
        }
    }

    /// First checkpoint boundary strictly above `progress`, capped at 1.0.
    pub fn next_checkpoint(&self, progress: Progress) -> Progress {
        let next = self.checkpoint_floor(progress).ppb() + self.checkpoint_interval.ppb();
        if next + 1 >= PROGRESS_SCALE {
            Progress::ONE
        } else {
            Progress::from_ppb(next)
        }
    }

    pub fn is_checkpoint_boundary(&self, progress: Progress) -> bool {
        progress.is_complete() || progress.ppb().is_multiple_of(self.checkpoint_interval.ppb())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchEntry {
    pub accel: AccelId,
    pub max_bid: Rate,
}

/// A tenant's prioritized list of acceptable hardware with a price ceiling
/// for each entry. Earlier entries are preferred.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchTable {
    pub entries: Vec<LaunchEntry>,
}

impl LaunchTable {
    pub fn new(entries: impl IntoIterator<Item = (AccelId, Rate)>) -> Self {
        LaunchTable {
            entries: entries
                .into_iter()
                .map(|(accel, max_bid)| LaunchEntry { accel, max_bid })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, accel: &AccelId) -> Option<&LaunchEntry> {
        self.entries.iter().find(|e| &e.accel == accel)
    }

    /// Position in priority order (0 = most preferred).
    pub fn priority_of(&self, accel: &AccelId) -> Option<usize> {
        self.entries.iter().position(|e| &e.accel == accel)
    }

    pub fn contains(&self, accel: &AccelId) -> bool {
        self.get(accel).is_some()
    }

    /// An entry whose ceiling is below the type's base rate is never bid.
    pub fn is_inert(entry: &LaunchEntry, cluster: &FunctionalCluster) -> bool {
        cluster
            .base_rate(&entry.accel)
            .is_none_or(|base| entry.max_bid < base)
    }
}

/// Checks a launch table against the cluster and workload. Order is kept.
pub fn validate_launch_table(
    table: &LaunchTable,
    cluster: &FunctionalCluster,
    profile: &WorkloadProfile,
) -> Result<LaunchTable> {
    if table.is_empty() {
        return Err(ModelError::EmptyLaunchTable);
    }
    let mut seen = BTreeSet::new();
    for entry in &table.entries {
        if cluster.accel(&entry.accel).is_none() {
            return Err(ModelError::UnknownHardware(entry.accel.clone()));
        }
        if !profile.is_compatible(&entry.accel) {
            return Err(ModelError::IncompatibleHardware(entry.accel.clone()));
        }
        if !seen.insert(&entry.accel) {
            return Err(ModelError::DuplicateEntry(entry.accel.clone()));
        }
    }
    Ok(table.clone())
}

/// A tenant's submission to the work scheduler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRequest {
    pub id: RequestId,
    pub tenant: TenantId,
    /// Opaque stand-in for the deployable workload.
    pub payload: String,
    pub launch_table: LaunchTable,
    pub strategy: String,
    pub migration_policy: String,
    pub timeout: SimDuration,
    pub resume_from: Progress,
}

impl UserRequest {
    pub fn validate(
        &self,
        cluster: &FunctionalCluster,
        profile: &WorkloadProfile,
    ) -> Result<()> {
        if self.timeout.millis() == 0 {
            return Err(ModelError::InvalidRequest(format!(
                "{}: timeout must be positive",
                self.id
            )));
        }
        if !profile.is_checkpoint_boundary(self.resume_from) {
            return Err(ModelError::InvalidRequest(format!(
                "{}: resume point {} is not a checkpoint boundary",
                self.id,
                self.resume_from.to_decimal_string()
            )));
        }
        validate_launch_table(&self.launch_table, cluster, profile).map(|_| ())
    }
}

/// Time left on `accel` from `progress`, rounded half-up to the millisecond.
pub fn remaining_time(
    profile: &WorkloadProfile,
    accel: &AccelId,
    progress: Progress,
) -> Result<SimDuration> {
    let total = profile
        .total_time(accel)
        .ok_or_else(|| ModelError::IncompatibleHardware(accel.clone()))?;
    Ok(SimDuration::from_millis(mul_div_round(
        total.millis(),
        progress.remaining().ppb(),
        PROGRESS_SCALE,
    )))
}

pub fn cost_to_complete(
    profile: &WorkloadProfile,
    accel: &AccelId,
    progress: Progress,
    rate: Rate,
) -> Result<Money> {
    remaining_time(profile, accel, progress).map(|left| rate.cost_over(left))
}

/// The rate on `target` at which finishing there costs the same as finishing
/// on `alt` at `alt_rate` plus `switch_cost`. Rounded down to the default
/// rate tick.
pub fn break_even_bid(
    profile: &WorkloadProfile,
    target: &AccelId,
    alt: &AccelId,
    progress: Progress,
    alt_rate: Rate,
    switch_cost: Money,
) -> Result<Rate> {
    break_even_bid_with_tick(
        profile,
        target,
        alt,
        progress,
        alt_rate,
        switch_cost,
        Rate::DEFAULT_TICK,
    )
}

pub fn break_even_bid_with_tick(
    profile: &WorkloadProfile,
    target: &AccelId,
    alt: &AccelId,
    progress: Progress,
    alt_rate: Rate,
    switch_cost: Money,
    tick: Rate,
) -> Result<Rate> {
    let left_target = remaining_time(profile, target, progress)?;
    let left_alt = remaining_time(profile, alt, progress)?;
    if left_target.millis() == 0 {
        return Err(ModelError::CompletedWorkload);
    }
    // Work in micro-dollar-milliseconds per hour to avoid intermediate rounding.
    let alt_cost = u128::from(alt_rate.micros_per_hour()) * u128::from(left_alt.millis());
    let switch = u128::from(switch_cost.micros()) * u128::from(MS_PER_HOUR);
    let raw = (alt_cost + switch) / u128::from(left_target.millis());
    let raw = u64::try_from(raw).unwrap_or(u64::MAX);
    Ok(Rate::from_micros_per_hour(raw).floor_to_tick(tick))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn rate(s: &str) -> Rate {
        Rate::parse_dollars_per_hour(s).unwrap()
    }

    pub fn hours(s: &str) -> SimDuration {
        SimDuration::parse_hours(s).unwrap()
    }

    pub fn cluster() -> FunctionalCluster {
        FunctionalCluster::new(
            "gemm",
            "gemm",
            vec![
                AcceleratorType {
                    id: "A10".into(),
                    name: "NVIDIA A10".into(),
                    base_rate: rate("0.606"),
                    instance_count: 1,
                },
                AcceleratorType {
                    id: "L4".into(),
                    name: "NVIDIA L4".into(),
                    base_rate: rate("0.469"),
                    instance_count: 2,
                },
                AcceleratorType {
                    id: "Trainium".into(),
                    name: "AWS Trainium".into(),
                    base_rate: rate("0.804"),
                    instance_count: 2,
                },
            ],
        )
        .unwrap()
    }

    pub fn profile_a() -> WorkloadProfile {
        WorkloadProfile::new(
            [
                ("A10".into(), hours("0.35")),
                ("L4".into(), hours("0.51")),
                ("Trainium".into(), hours("0.30")),
            ]
            .into_iter()
            .collect(),
            Progress::from_ppb(250_000_000),
            Money::ZERO,
            SimDuration::from_secs(5),
        )
        .unwrap()
    }

    pub fn profile_b() -> WorkloadProfile {
        WorkloadProfile::new(
            [("A10".into(), hours("0.23")), ("L4".into(), hours("0.32"))]
                .into_iter()
                .collect(),
            Progress::from_ppb(200_000_000),
            Money::parse_dollars("0.0253").unwrap(),
            SimDuration::from_secs(5),
        )
        .unwrap()
    }
}
