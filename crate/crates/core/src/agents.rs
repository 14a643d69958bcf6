//! Tenant-side behaviour: workload progress, economic agents and migration.
//!
//! Agents are pure: they look at a [`TenantState`] and a read-only view of the
//! exchange and return one [`AgentDecision`]. The event loop applies it and
//! may ask again in the same instant, so an agent that wants to move two bids
//! returns one rebid per call.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exchange::ExchangeTable;
use crate::model::{
    break_even_bid_with_tick, cost_to_complete, remaining_time, AccelId, FunctionalCluster,
    InstanceRef, LaunchTable, TenantId, WorkloadProfile,
};
use crate::scheduler::Assignment;
use crate::units::{Money, Progress, Rate, SimDuration, SimTime, PROGRESS_SCALE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("`{tenant}` cannot run on `{accel}`")]
    IncompatibleDestination { tenant: TenantId, accel: AccelId },
    #[error("unknown agent strategy `{0}`")]
    UnknownStrategy(String),
    #[error("unknown migration policy `{0}`")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Queued,
    Loading,
    Running,
    Migrating,
    Terminated,
    Completed,
}

impl Phase {
    pub fn is_live(self) -> bool {
        !matches!(self, Phase::Terminated | Phase::Completed)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Queued => "queued",
            Phase::Loading => "loading",
            Phase::Running => "running",
            Phase::Migrating => "migrating",
            Phase::Terminated => "terminated",
            Phase::Completed => "completed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Holding {
    pub instance: InstanceRef,
    pub rate: Rate,
    pub since: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantState {
    pub id: TenantId,
    pub profile: WorkloadProfile,
    pub launch_table: LaunchTable,
    pub progress: Progress,
    pub last_checkpoint: Progress,
    /// The instance executing the workload comes first; a second holding
    /// only exists during a live-overlap migration.
    pub holdings: Vec<Holding>,
    pub phase: Phase,
    pub spent: Money,
}

impl TenantState {
    pub fn new(id: TenantId, profile: WorkloadProfile, launch_table: LaunchTable, resume_from: Progress) -> Self {
        TenantState {
            id,
            profile,
            launch_table,
            progress: resume_from,
            last_checkpoint: resume_from,
            holdings: Vec::new(),
            phase: Phase::Queued,
            spent: Money::ZERO,
        }
    }

    /// The instance the workload is executing on.
    pub fn occupied(&self) -> Option<&InstanceRef> {
        self.holdings.first().map(|h| &h.instance)
    }

    pub fn occupied_type(&self) -> Option<&AccelId> {
        self.occupied().map(|i| &i.accel)
    }

    /// Running with no work done since the last checkpoint.
    pub fn at_checkpoint_boundary(&self) -> bool {
        self.phase == Phase::Running && self.progress == self.last_checkpoint
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProgressEvent {
    CheckpointReached(Progress),
    WorkloadComplete,
}

/// Advances a running workload by `elapsed` on `accel`.
///
/// Progress is capped at 1.0. One checkpoint event is produced for every
/// boundary crossed below 1.0, and a completion event on reaching 1.0.
pub fn advance_progress(
    state: &TenantState,
    elapsed: SimDuration,
    accel: &AccelId,
) -> (TenantState, Vec<ProgressEvent>) {
    let mut next = state.clone();
    let mut events = Vec::new();
    let running = matches!(state.phase, Phase::Running | Phase::Migrating);
    let Some(total) = state.profile.total_time(accel) else {
        return (next, events);
    };
    if !running || elapsed.millis() == 0 || state.progress.is_complete() {
        return (next, events);
    }
    let gained = (u128::from(elapsed.millis()) * u128::from(PROGRESS_SCALE)
        / u128::from(total.millis())) as u64;
    let reached = Progress::from_ppb(state.progress.ppb().saturating_add(gained));
    let mut boundary = state.profile.next_checkpoint(state.progress);
    while boundary <= reached && !boundary.is_complete() {
        events.push(ProgressEvent::CheckpointReached(boundary));
        boundary = state.profile.next_checkpoint(boundary);
    }
    next.progress = reached;
    next.last_checkpoint = state.profile.checkpoint_floor(reached).max(state.last_checkpoint);
    if reached.is_complete() {
        next.last_checkpoint = Progress::ONE;
        events.push(ProgressEvent::WorkloadComplete);
    }
    (next, events)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentDecision {
    Stay,
    Rebid { accel: AccelId, rate: Rate },
    Migrate(LaunchTable),
    Terminate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MigrationMode {
    /// Stop at the last checkpoint, release, reacquire and reload.
    #[default]
    CheckpointStore,
    /// Hold source and destination until the state transfer completes.
    LiveOverlap,
}

impl MigrationMode {
    pub fn id(self) -> &'static str {
        match self {
            MigrationMode::CheckpointStore => "checkpoint-store",
            MigrationMode::LiveOverlap => "live-overlap",
        }
    }

    pub fn from_id(id: &str) -> Result<Self, AgentError> {
        match id {
            "checkpoint-store" => Ok(MigrationMode::CheckpointStore),
            "live-overlap" => Ok(MigrationMode::LiveOverlap),
            other => Err(AgentError::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationPolicy {
    pub mode: MigrationMode,
    pub load_delay: SimDuration,
    /// Tenant-side cost of moving state, counted in switching decisions.
    pub transfer_cost: Money,
}

/// What the loop sees when it wakes an agent.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a> {
    pub state: &'a TenantState,
    pub policy: &'a MigrationPolicy,
    pub exchange: &'a ExchangeTable,
    pub cluster: &'a FunctionalCluster,
    pub now: SimTime,
    /// A migration request from this tenant is already queued.
    pub migration_pending: bool,
}

/// A named bidding/migration behaviour.
pub trait Strategy: Send + Sync {
    fn decide(&self, view: &AgentView<'_>) -> AgentDecision;
}

impl<F> Strategy for F
where
    F: Fn(&AgentView<'_>) -> AgentDecision + Send + Sync,
{
    fn decide(&self, view: &AgentView<'_>) -> AgentDecision {
        self(view)
    }
}

/// Never rebids and never moves.
#[derive(Debug, Clone, Copy, Default)]
pub struct StaticStrategy;

impl Strategy for StaticStrategy {
    fn decide(&self, _: &AgentView<'_>) -> AgentDecision {
        AgentDecision::Stay
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BreakEvenStrategy;

impl Strategy for BreakEvenStrategy {
    fn decide(&self, view: &AgentView<'_>) -> AgentDecision {
        break_even_agent_decide(view)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckpointAwareStrategy;

impl Strategy for CheckpointAwareStrategy {
    fn decide(&self, view: &AgentView<'_>) -> AgentDecision {
        checkpoint_aware_agent_decide(view)
    }
}

/// Strategies addressable by id from scenario files.
#[derive(Clone)]
pub struct StrategyRegistry {
    strategies: BTreeMap<String, Arc<dyn Strategy>>,
}

impl fmt::Debug for StrategyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.strategies.keys()).finish()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut reg = StrategyRegistry {
            strategies: BTreeMap::new(),
        };
        reg.register("static", StaticStrategy);
        reg.register("break-even", BreakEvenStrategy);
        reg.register("checkpoint-aware", CheckpointAwareStrategy);
        reg
    }
}

impl StrategyRegistry {
    /// Adds or replaces a strategy.
    pub fn register(&mut self, id: impl Into<String>, strategy: impl Strategy + 'static) {
        self.strategies.insert(id.into(), Arc::new(strategy));
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Strategy>, AgentError> {
        self.strategies
            .get(id)
            .cloned()
            .ok_or_else(|| AgentError::UnknownStrategy(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.strategies.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.strategies.keys().map(String::as_str)
    }
}

/// Bid that makes `target` as attractive as the cheapest other listed type,
/// clamped to `[base rate, launch-table ceiling]`. `None` when the entry is
/// inert or there is nothing left to price.
fn desired_bid(view: &AgentView<'_>, target: &AccelId) -> Option<Rate> {
    let state = view.state;
    let entry = state.launch_table.get(target)?;
    let base = view.exchange.entry(target)?.base_rate;
    if entry.max_bid < base {
        return None;
    }
    let tenant = &state.id;
    let progress = state.progress;
    if remaining_time(&state.profile, target, progress).ok()?.millis() == 0 {
        return None;
    }
    let best_alt = state
        .launch_table
        .entries
        .iter()
        .filter(|e| &e.accel != target)
        .filter_map(|e| {
            let quote = view.exchange.quote_for(tenant, &e.accel)?;
            let cost = cost_to_complete(&state.profile, &e.accel, progress, quote).ok()?;
            Some((cost, &e.accel, quote))
        })
        .min_by(|a, b| a.0.cmp(&b.0));
    let Some((_, alt, alt_rate)) = best_alt else {
        return Some(entry.max_bid);
    };
    // Leaving the occupied type mid-epoch forfeits the work since the last
    // checkpoint; an unplaced tenant prices that in up front.
    let occupies_target = state.occupied_type() == Some(target);
    let unplaced = state.phase == Phase::Queued;
    let mut switch_cost = Money::ZERO;
    if (occupies_target || unplaced) && !state.at_checkpoint_boundary() {
        switch_cost += state.profile.restart_surcharge;
    }
    if occupies_target {
        switch_cost += view.policy.transfer_cost;
    }
    let raw = break_even_bid_with_tick(
        &state.profile,
        target,
        alt,
        progress,
        alt_rate,
        switch_cost,
        view.exchange.tick,
    )
    .ok()?;
    Some(raw.clamp(base, entry.max_bid))
}

/// First rebid the tenant wants to make, in launch-table order.
fn next_rebid(view: &AgentView<'_>) -> Option<AgentDecision> {
    let state = view.state;
    let tick = view.exchange.tick;
    for entry in &state.launch_table.entries {
        let Some(desired) = desired_bid(view, &entry.accel) else {
            continue;
        };
        let standing = view.exchange.bid_of(&state.id, &entry.accel).map(|b| b.rate);
        let Some(standing) = standing else {
            return Some(AgentDecision::Rebid {
                accel: entry.accel.clone(),
                rate: desired,
            });
        };
        if desired.abs_diff(standing) <= tick {
            continue;
        }
        // Lowering the bid on the type we hold only matters when somebody
        // else is bidding for it.
        let held = state.occupied_type() == Some(&entry.accel);
        let contested = view
            .exchange
            .entry(&entry.accel)
            .is_some_and(|e| e.is_contested_for(&state.id));
        if held && desired < standing && !contested {
            continue;
        }
        return Some(AgentDecision::Rebid {
            accel: entry.accel.clone(),
            rate: desired,
        });
    }
    None
}

fn migrate_to(view: &AgentView<'_>, accel: &AccelId) -> AgentDecision {
    let state = view.state;
    let rate = view
        .exchange
        .bid_of(&state.id, accel)
        .map(|b| b.rate)
        .or_else(|| state.launch_table.get(accel).map(|e| e.max_bid))
        .unwrap_or(Rate::ZERO);
    AgentDecision::Migrate(LaunchTable::new([(accel.clone(), rate)]))
}

fn can_take(view: &AgentView<'_>, accel: &AccelId) -> bool {
    view.exchange.is_entitled(&view.state.id, accel) && view.cluster.first_free(accel).is_some()
}

/// Entitled, free and strictly preferred over the occupied type.
fn better_entitled_type(view: &AgentView<'_>) -> Option<AccelId> {
    let state = view.state;
    let held = state.launch_table.priority_of(state.occupied_type()?)?;
    state.launch_table.entries[..held]
        .iter()
        .find(|e| can_take(view, &e.accel))
        .map(|e| e.accel.clone())
}

fn may_move(view: &AgentView<'_>) -> bool {
    view.state.phase == Phase::Running && !view.migration_pending
}

/// The break-even bidder: bids on each listed type what finishing there is
/// worth relative to the cheapest alternative, and moves up its launch table
/// only at checkpoint boundaries.
pub fn break_even_agent_decide(view: &AgentView<'_>) -> AgentDecision {
    if !matches!(view.state.phase, Phase::Queued | Phase::Running) {
        return AgentDecision::Stay;
    }
    if let Some(rebid) = next_rebid(view) {
        return rebid;
    }
    if may_move(view) && view.state.at_checkpoint_boundary() {
        if let Some(better) = better_entitled_type(view) {
            return migrate_to(view, &better);
        }
    }
    AgentDecision::Stay
}

/// Like the break-even bidder, and additionally leaves its current type at a
/// checkpoint once it no longer holds the entitlement there.
pub fn checkpoint_aware_agent_decide(view: &AgentView<'_>) -> AgentDecision {
    if !matches!(view.state.phase, Phase::Queued | Phase::Running) {
        return AgentDecision::Stay;
    }
    if let Some(rebid) = next_rebid(view) {
        return rebid;
    }
    let state = view.state;
    if !may_move(view) || !state.at_checkpoint_boundary() {
        return AgentDecision::Stay;
    }
    if let Some(held) = state.occupied_type() {
        if !view.exchange.is_entitled(&state.id, held) {
            let alt = state
                .launch_table
                .entries
                .iter()
                .filter(|e| &e.accel != held)
                .find(|e| can_take(view, &e.accel));
            if let Some(alt) = alt {
                return migrate_to(view, &alt.accel);
            }
        }
    }
    if let Some(better) = better_entitled_type(view) {
        return migrate_to(view, &better);
    }
    AgentDecision::Stay
}

/// What the event loop must do to carry out a migration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationEffects {
    pub mode: MigrationMode,
    /// Work discarded by rolling back to the last checkpoint.
    pub rollback: Progress,
    /// Source released at dispatch (checkpoint-store) rather than at the end
    /// of the transfer.
    pub release_source_now: bool,
    pub source: InstanceRef,
    pub destination: InstanceRef,
    pub noop: bool,
}

/// Moves a tenant from `from` to an already-dispatched assignment.
///
/// Returns the updated state, the effects for billing and the delay before
/// the workload runs on the destination.
pub fn apply_migration(
    state: &TenantState,
    from: &InstanceRef,
    to: &Assignment,
    policy: &MigrationPolicy,
) -> Result<(TenantState, MigrationEffects, SimDuration), AgentError> {
    if !state.profile.is_compatible(&to.instance.accel) {
        return Err(AgentError::IncompatibleDestination {
            tenant: state.id.clone(),
            accel: to.instance.accel.clone(),
        });
    }
    let mut next = state.clone();
    if &to.instance == from {
        let effects = MigrationEffects {
            mode: policy.mode,
            rollback: Progress::ZERO,
            release_source_now: false,
            source: from.clone(),
            destination: to.instance.clone(),
            noop: true,
        };
        return Ok((next, effects, SimDuration::ZERO));
    }
    let holding = Holding {
        instance: to.instance.clone(),
        rate: to.rate,
        since: to.decided_at,
    };
    let effects = match policy.mode {
        MigrationMode::CheckpointStore => {
            let rollback = state.progress.saturating_sub(state.last_checkpoint);
            next.progress = state.last_checkpoint;
            next.holdings.retain(|h| &h.instance != from);
            next.holdings.insert(0, holding);
            next.phase = Phase::Loading;
            MigrationEffects {
                mode: policy.mode,
                rollback,
                release_source_now: true,
                source: from.clone(),
                destination: to.instance.clone(),
                noop: false,
            }
        }
        MigrationMode::LiveOverlap => {
            next.holdings.push(holding);
            next.phase = Phase::Migrating;
            MigrationEffects {
                mode: policy.mode,
                rollback: Progress::ZERO,
                release_source_now: false,
                source: from.clone(),
                destination: to.instance.clone(),
                noop: false,
            }
        }
    };
    Ok((next, effects, policy.load_delay))
}

/// Which hardware the naive operator considers an upgrade.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NaiveTarget {
    /// Baseline disabled.
    #[default]
    Off,
    /// Any type earlier in the tenant's launch table.
    Preferred,
    /// Any listed type with a shorter total execution time.
    Faster,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationDirective {
    pub tenant: TenantId,
    pub target: AccelId,
}

/// Operator-driven baseline: as soon as a better type has a free instance,
/// move the tenant there with checkpoint-store, wherever it is in its epoch.
pub fn naive_operator_decide<'a>(
    cluster: &FunctionalCluster,
    tenants: impl IntoIterator<Item = &'a TenantState>,
    target: NaiveTarget,
) -> Vec<MigrationDirective> {
    if target == NaiveTarget::Off {
        return Vec::new();
    }
    let mut claimed: BTreeMap<AccelId, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for t in tenants {
        if t.phase != Phase::Running {
            continue;
        }
        let Some(held) = t.occupied_type() else { continue };
        let Some(held_prio) = t.launch_table.priority_of(held) else {
            continue;
        };
        let held_time = t.profile.total_time(held);
        let free_left = |a: &AccelId, claimed: &BTreeMap<AccelId, usize>| {
            cluster.free_count(a) > claimed.get(a).copied().unwrap_or(0)
        };
        let pick = t
            .launch_table
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| &e.accel != held && !LaunchTable::is_inert(e, cluster))
            .filter(|(i, e)| match target {
                NaiveTarget::Preferred => *i < held_prio,
                NaiveTarget::Faster => t.profile.total_time(&e.accel) < held_time,
                NaiveTarget::Off => false,
            })
            .filter(|(_, e)| free_left(&e.accel, &claimed))
            .min_by_key(|(i, e)| match target {
                NaiveTarget::Faster => (t.profile.total_time(&e.accel), *i),
                _ => (None, *i),
            })
            .map(|(_, e)| e.accel.clone());
        if let Some(accel) = pick {
            *claimed.entry(accel.clone()).or_default() += 1;
            out.push(MigrationDirective {
                tenant: t.id.clone(),
                target: accel,
            });
        }
    }
    out
}
