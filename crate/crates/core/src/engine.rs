//! Discrete-event kernel, billing ledger and the simulation loop.
//!
//! Events are totally ordered by `(time, sequence)`; sequence numbers are
//! handed out at scheduling time, so two runs of the same scenario replay
//! identically. Every billed interval is opened and closed by a trace record,
//! which is what lets [`crate::trace::rebuild_totals`] recompute the ledger.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    advance_progress, apply_migration, naive_operator_decide, AgentDecision, AgentError, AgentView,
    Holding, MigrationMode, MigrationPolicy, NaiveTarget, Phase, Strategy, StrategyRegistry,
    TenantState,
};
use crate::exchange::{ExchangeError, ExchangeTable, PriceEvent};
use crate::model::{
    validate_launch_table, AccelId, FunctionalCluster, InstanceRef, InstanceState, LaunchTable,
    ModelError, RequestId, TenantId, UserRequest,
};
use crate::scenario::{Scenario, ScenarioErrors, TenantSpec};
use crate::scheduler::{Assignment, Scheduler, SchedulerError};
use crate::trace::{Trace, TraceEvent, TraceHeader, TraceRecord, TRACE_SCHEMA_VERSION};
use crate::units::{Money, Progress, Rate, SimDuration, SimTime, PROGRESS_SCALE};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("event at {event} scheduled before the clock ({clock})")]
    TimeTravel { clock: SimTime, event: SimTime },
    #[error("invalid scenario:\n{0}")]
    Scenario(#[from] ScenarioErrors),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    RequestArrival { tenant: TenantId },
    /// `None` is the periodic sweep; `Some` applies a price change to the
    /// occupants of a type once the grace window has passed.
    PriceRecompute { apply_to: Option<AccelId> },
    AgentWake { tenant: TenantId, periodic: bool },
    CheckpointReached { tenant: TenantId, generation: u64 },
    MigrationComplete { tenant: TenantId, generation: u64 },
    LoadComplete { tenant: TenantId, generation: u64 },
    WorkloadComplete { tenant: TenantId, generation: u64 },
    Timeout { request: RequestId },
    Cancel { tenant: TenantId },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: SimTime,
    pub sequence: u64,
    pub kind: EventKind,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.sequence) == (other.time, other.sequence)
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.sequence).cmp(&(other.time, other.sequence))
    }
}

/// Pending events plus the simulation clock.
#[derive(Debug, Default)]
pub struct Kernel {
    clock: SimTime,
    next_sequence: u64,
    queue: BinaryHeap<Reverse<SimEvent>>,
}

impl Kernel {
    pub fn new() -> Self {
        Kernel::default()
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn schedule(&mut self, time: SimTime, kind: EventKind) -> Result<u64, EngineError> {
        if time < self.clock {
            return Err(EngineError::TimeTravel {
                clock: self.clock,
                event: time,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Reverse(SimEvent {
            time,
            sequence,
            kind,
        }));
        Ok(sequence)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(e)| e.time)
    }

    /// Removes the earliest event and advances the clock to it.
    pub fn pop(&mut self) -> Option<SimEvent> {
        let Reverse(e) = self.queue.pop()?;
        self.clock = e.time;
        Some(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BillingKind {
    Compute,
    /// Destination held while the source is still executing.
    Overlap,
    Load,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub tenant: TenantId,
    pub instance: InstanceRef,
    pub rate: Rate,
    pub start: SimTime,
    pub end: SimTime,
    pub kind: BillingKind,
    pub cost: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("{tenant} billed on {instance} over an interval already billed to {other}")]
    OverlapViolation {
        tenant: TenantId,
        other: TenantId,
        instance: InstanceRef,
    },
    #[error("interval ends at {end} before it starts at {start}")]
    NegativeInterval { start: SimTime, end: SimTime },
}

/// Append-only record of rated holding intervals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillingLedger {
    entries: Vec<LedgerEntry>,
    totals: BTreeMap<TenantId, Money>,
}

impl BillingLedger {
    pub fn new() -> Self {
        BillingLedger::default()
    }

    pub fn accrue(
        &mut self,
        tenant: &TenantId,
        instance: &InstanceRef,
        rate: Rate,
        start: SimTime,
        end: SimTime,
        kind: BillingKind,
    ) -> Result<Money, LedgerError> {
        if end < start {
            return Err(LedgerError::NegativeInterval { start, end });
        }
        if let Some(clash) = self.entries.iter().find(|e| {
            &e.instance == instance && &e.tenant != tenant && e.start < end && start < e.end
        }) {
            return Err(LedgerError::OverlapViolation {
                tenant: tenant.clone(),
                other: clash.tenant.clone(),
                instance: instance.clone(),
            });
        }
        let cost = rate.cost_over(end - start);
        self.entries.push(LedgerEntry {
            tenant: tenant.clone(),
            instance: instance.clone(),
            rate,
            start,
            end,
            kind,
            cost,
        });
        *self.totals.entry(tenant.clone()).or_default() += cost;
        Ok(cost)
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_for(&self, tenant: &TenantId) -> Money {
        self.totals.get(tenant).copied().unwrap_or(Money::ZERO)
    }

    pub fn totals(&self) -> &BTreeMap<TenantId, Money> {
        &self.totals
    }

    pub fn revenue(&self) -> Money {
        self.totals.values().copied().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Quiescent,
    /// The horizon was reached with tenants still live.
    NonQuiescent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantOutcome {
    pub id: TenantId,
    pub phase: Phase,
    pub arrival: SimTime,
    pub completed_at: Option<SimTime>,
    pub total_cost: Money,
    pub migrations: u32,
    /// Sum of work discarded by rollbacks, in workload fractions.
    pub rollback: Progress,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub ledger: BillingLedger,
    pub status: RunStatus,
    pub end_time: SimTime,
    pub tenants: Vec<TenantOutcome>,
}

impl RunOutput {
    pub fn tenant(&self, id: &str) -> Option<&TenantOutcome> {
        self.tenants.iter().find(|t| t.id.as_str() == id)
    }
}

/// Runs with the built-in strategies.
pub fn run(scenario: &Scenario, until: Option<SimTime>) -> Result<RunOutput, EngineError> {
    run_with(scenario, until, &StrategyRegistry::default())
}

/// Runs with a caller-supplied strategy registry.
pub fn run_with(
    scenario: &Scenario,
    until: Option<SimTime>,
    registry: &StrategyRegistry,
) -> Result<RunOutput, EngineError> {
    scenario.to_file().resolve(registry)?;
    let mut sim = Simulation::new(scenario, registry)?;
    sim.run(until)
}

struct Segment {
    accel: AccelId,
    start: SimTime,
    progress: Progress,
    last_checkpoint: Progress,
}

struct Runtime {
    spec: TenantSpec,
    strategy: Arc<dyn Strategy>,
    state: TenantState,
    arrived: bool,
    request: Option<RequestId>,
    /// The pending migration was ordered by the operator and always stores.
    forced_store: bool,
    segment: Option<Segment>,
    generation: u64,
    completed_at: Option<SimTime>,
    migrations: u32,
    rollback_ppb: u64,
    wake_pending: bool,
}

struct OpenInterval {
    rate: Rate,
    start: SimTime,
    kind: BillingKind,
}

/// Bounds same-instant agent wakes so bidding wars cannot stall the clock.
const WAKES_PER_INSTANT: u32 = 64;

struct Simulation {
    name: String,
    fingerprint: String,
    config: crate::scenario::EngineConfig,
    cluster: FunctionalCluster,
    exchange: ExchangeTable,
    scheduler: Scheduler,
    kernel: Kernel,
    tenants: BTreeMap<TenantId, Runtime>,
    /// Scenario order, used wherever iteration order is observable.
    order: Vec<TenantId>,
    ledger: BillingLedger,
    records: Vec<TraceRecord>,
    open: BTreeMap<(TenantId, InstanceRef), OpenInterval>,
    next_request: u64,
    wake_instant: SimTime,
    wakes_this_instant: BTreeMap<TenantId, u32>,
}

impl Simulation {
    fn new(scenario: &Scenario, registry: &StrategyRegistry) -> Result<Self, EngineError> {
        let cluster = scenario.cluster.clone();
        let mut tenants = BTreeMap::new();
        let mut order = Vec::new();
        for spec in &scenario.tenants {
            let state = TenantState::new(
                spec.id.clone(),
                spec.profile.clone(),
                spec.launch_table.clone(),
                spec.resume_from,
            );
            tenants.insert(
                spec.id.clone(),
                Runtime {
                    spec: spec.clone(),
                    strategy: registry.get(&spec.strategy)?,
                    state,
                    arrived: false,
                    request: None,
                    forced_store: false,
                    segment: None,
                    generation: 0,
                    completed_at: None,
                    migrations: 0,
                    rollback_ppb: 0,
                    wake_pending: false,
                },
            );
            order.push(spec.id.clone());
        }
        Ok(Simulation {
            name: scenario.name.clone(),
            fingerprint: scenario.fingerprint(),
            config: scenario.engine.clone(),
            exchange: ExchangeTable::new(&cluster, scenario.engine.rate_tick),
            scheduler: Scheduler::new(&cluster, scenario.engine.queue),
            cluster,
            kernel: Kernel::new(),
            tenants,
            order,
            ledger: BillingLedger::new(),
            records: Vec::new(),
            open: BTreeMap::new(),
            next_request: 0,
            wake_instant: SimTime::ZERO,
            wakes_this_instant: BTreeMap::new(),
        })
    }

    fn now(&self) -> SimTime {
        self.kernel.clock()
    }

    fn rt(&self, t: &TenantId) -> &Runtime {
        &self.tenants[t]
    }

    fn rt_mut(&mut self, t: &TenantId) -> &mut Runtime {
        self.tenants.get_mut(t).expect("tenant ids come from the scenario")
    }

    fn any_live(&self) -> bool {
        self.tenants.values().any(|r| r.state.phase.is_live())
    }

    fn run(&mut self, until: Option<SimTime>) -> Result<RunOutput, EngineError> {
        for id in self.order.clone() {
            let spec = &self.rt(&id).spec;
            let (arrival, cancel) = (spec.arrival, spec.cancel_at);
            self.kernel
                .schedule(arrival, EventKind::RequestArrival { tenant: id.clone() })?;
            if let Some(at) = cancel {
                self.kernel.schedule(at, EventKind::Cancel { tenant: id })?;
            }
        }
        if !self.tenants.is_empty() {
            let first = self.tenants.values().map(|r| r.spec.arrival).min().unwrap_or_default();
            self.kernel.schedule(
                first + self.config.price_sweep_period,
                EventKind::PriceRecompute { apply_to: None },
            )?;
        }
        let mut horizon_hit = false;
        while let Some(t) = self.kernel.peek_time() {
            if until.is_some_and(|u| t > u) {
                horizon_hit = true;
                break;
            }
            let event = self.kernel.pop().expect("peeked above");
            self.handle(event)?;
            self.settle()?;
        }
        let live = self.any_live();
        let status = if horizon_hit && live {
            RunStatus::NonQuiescent
        } else {
            RunStatus::Quiescent
        };
        let end_time = match (horizon_hit, until) {
            (true, Some(u)) => u,
            _ => self.records.last().map_or(SimTime::ZERO, |r| r.time),
        };
        if horizon_hit {
            self.close_all_at(end_time)?;
        }
        Ok(self.finish(status, end_time))
    }

    fn finish(&mut self, status: RunStatus, end_time: SimTime) -> RunOutput {
        let header = TraceHeader {
            schema: TRACE_SCHEMA_VERSION,
            scenario: self.name.clone(),
            scenario_hash: self.fingerprint.clone(),
            seed: self.config.seed,
            cluster: self
                .cluster
                .types()
                .iter()
                .map(|t| (t.id.clone(), t.instance_count))
                .collect(),
        };
        let tenants = self
            .order
            .iter()
            .map(|id| {
                let r = &self.tenants[id];
                TenantOutcome {
                    id: id.clone(),
                    phase: r.state.phase,
                    arrival: r.spec.arrival,
                    completed_at: r.completed_at,
                    total_cost: self.ledger.total_for(id),
                    migrations: r.migrations,
                    rollback: Progress::from_ppb(r.rollback_ppb),
                }
            })
            .collect();
        RunOutput {
            trace: Trace {
                header,
                records: std::mem::take(&mut self.records),
            },
            ledger: std::mem::take(&mut self.ledger),
            status,
            end_time,
            tenants,
        }
    }

    // ---- trace and billing -------------------------------------------------

    fn record(&mut self, mut r: TraceRecord) {
        if r.cumulative_cost.is_none() {
            if let Some(t) = &r.tenant {
                r.cumulative_cost = Some(self.ledger.total_for(t));
            }
        }
        self.records.push(r);
    }

    fn close_interval(&mut self, tenant: &TenantId, instance: &InstanceRef, at: SimTime) -> Result<(), EngineError> {
        if let Some(o) = self.open.remove(&(tenant.clone(), instance.clone())) {
            self.ledger.accrue(tenant, instance, o.rate, o.start, at, o.kind)?;
            self.rt_mut(tenant).state.spent = self.ledger.total_for(tenant);
        }
        Ok(())
    }

    /// Closes any interval the tenant has on `instance` and opens a new one.
    fn reopen(
        &mut self,
        tenant: &TenantId,
        instance: &InstanceRef,
        rate: Rate,
        kind: BillingKind,
        event: TraceEvent,
    ) -> Result<(), EngineError> {
        let now = self.now();
        self.close_interval(tenant, instance, now)?;
        self.open.insert(
            (tenant.clone(), instance.clone()),
            OpenInterval {
                rate,
                start: now,
                kind,
            },
        );
        let progress = self.rt(tenant).state.progress;
        self.record(
            TraceRecord::new(now, event)
                .tenant(tenant)
                .on(instance)
                .rate(rate)
                .progress(progress),
        );
        Ok(())
    }

    /// Stops billing and frees the instance.
    fn release(&mut self, tenant: &TenantId, instance: &InstanceRef) -> Result<(), EngineError> {
        let now = self.now();
        self.close_interval(tenant, instance, now)?;
        self.scheduler.release(&mut self.cluster, instance)?;
        self.rt_mut(tenant).state.holdings.retain(|h| &h.instance != instance);
        self.record(TraceRecord::new(now, TraceEvent::Release).tenant(tenant).on(instance));
        Ok(())
    }

    fn close_all_at(&mut self, at: SimTime) -> Result<(), EngineError> {
        let keys: Vec<_> = self.open.keys().cloned().collect();
        for (tenant, instance) in keys {
            self.close_interval(&tenant, &instance, at)?;
            self.record(TraceRecord::new(at, TraceEvent::HorizonClose).tenant(&tenant).on(&instance));
        }
        Ok(())
    }

    fn bids_of(&self, tenant: &TenantId) -> BTreeMap<AccelId, Rate> {
        self.exchange
            .bids_by(tenant)
            .into_iter()
            .map(|b| (b.accel.clone(), b.rate))
            .collect()
    }

    /// Records how `tenant`'s bids changed since `before`.
    fn record_bid_diff(&mut self, tenant: &TenantId, before: &BTreeMap<AccelId, Rate>) {
        let now = self.now();
        let after = self.bids_of(tenant);
        for (accel, rate) in &after {
            let event = match before.get(accel) {
                None => TraceEvent::BidPosted,
                Some(old) if old != rate => TraceEvent::BidUpdated,
                Some(_) => continue,
            };
            self.record(TraceRecord::new(now, event).tenant(tenant).accel(accel).rate(*rate));
        }
        for (accel, rate) in before {
            if !after.contains_key(accel) {
                self.record(
                    TraceRecord::new(now, TraceEvent::BidExpired)
                        .tenant(tenant)
                        .accel(accel)
                        .rate(*rate),
                );
            }
        }
    }

    fn price_events(&mut self, events: Vec<PriceEvent>) -> Result<(), EngineError> {
        let now = self.now();
        for ev in events {
            let mut r = TraceRecord::new(now, TraceEvent::PriceChange)
                .accel(&ev.accel)
                .rate(ev.new_rate);
            r.tenant = ev.new_entitled.first().cloned();
            self.record(r);
            if self.config.grace_window == SimDuration::ZERO {
                self.apply_rates(&ev.accel)?;
            } else {
                self.kernel.schedule(
                    now + self.config.grace_window,
                    EventKind::PriceRecompute {
                        apply_to: Some(ev.accel.clone()),
                    },
                )?;
            }
            let watchers: Vec<TenantId> = self
                .order
                .iter()
                .filter(|t| {
                    let r = &self.tenants[*t];
                    r.arrived && r.state.phase.is_live() && r.state.launch_table.contains(&ev.accel)
                })
                .cloned()
                .collect();
            for t in watchers {
                self.wake_now(&t)?;
            }
        }
        Ok(())
    }

    /// Moves every occupant of `accel` to the current clearing rate.
    fn apply_rates(&mut self, accel: &AccelId) -> Result<(), EngineError> {
        let Some(rate) = self.exchange.clearing_rate(accel) else {
            return Ok(());
        };
        let changes: Vec<(InstanceRef, TenantId)> = self
            .cluster
            .instances_of(accel)
            .filter_map(|i| match &i.state {
                InstanceState::Allocated { tenant, rate: old, .. } if *old != rate => {
                    Some((i.reference(), tenant.clone()))
                }
                _ => None,
            })
            .collect();
        for (instance, tenant) in changes {
            if let Some(slot) = self.cluster.instance_mut(&instance) {
                if let InstanceState::Allocated { rate: r, .. } = &mut slot.state {
                    *r = rate;
                }
            }
            if let Some(h) = self
                .rt_mut(&tenant)
                .state
                .holdings
                .iter_mut()
                .find(|h| h.instance == instance)
            {
                h.rate = rate;
            }
            let kind = self
                .open
                .get(&(tenant.clone(), instance.clone()))
                .map_or(BillingKind::Compute, |o| o.kind);
            self.reopen(&tenant, &instance, rate, kind, TraceEvent::RateChange)?;
        }
        Ok(())
    }

    // ---- progress ----------------------------------------------------------

    fn sync_progress(&mut self, tenant: &TenantId) {
        let now = self.now();
        let rt = self.rt_mut(tenant);
        let Some(seg) = &rt.segment else { return };
        let mut base = rt.state.clone();
        base.progress = seg.progress;
        base.last_checkpoint = seg.last_checkpoint;
        let (next, _) = advance_progress(&base, now - seg.start, &seg.accel);
        rt.state.progress = next.progress;
        rt.state.last_checkpoint = next.last_checkpoint;
    }

    /// Starts a fresh execution segment at the current progress.
    fn start_segment(&mut self, tenant: &TenantId, accel: &AccelId) -> Result<(), EngineError> {
        let now = self.now();
        let rt = self.rt_mut(tenant);
        rt.segment = Some(Segment {
            accel: accel.clone(),
            start: now,
            progress: rt.state.progress,
            last_checkpoint: rt.state.last_checkpoint,
        });
        self.schedule_progress(tenant)
    }

    fn schedule_progress(&mut self, tenant: &TenantId) -> Result<(), EngineError> {
        let rt = self.rt(tenant);
        let Some(seg) = &rt.segment else { return Ok(()) };
        let profile = &rt.state.profile;
        let total = profile
            .total_time(&seg.accel)
            .expect("segments only run on compatible hardware")
            .millis();
        let target = profile.next_checkpoint(rt.state.progress);
        let needed = u128::from(target.ppb() - seg.progress.ppb());
        let scale = u128::from(PROGRESS_SCALE);
        let elapsed = (needed * u128::from(total)).div_ceil(scale) as u64;
        let at = seg.start + SimDuration::from_millis(elapsed);
        let generation = rt.generation;
        let kind = if target.is_complete() {
            EventKind::WorkloadComplete {
                tenant: tenant.clone(),
                generation,
            }
        } else {
            EventKind::CheckpointReached {
                tenant: tenant.clone(),
                generation,
            }
        };
        self.kernel.schedule(at, kind)?;
        Ok(())
    }

    // ---- agents ------------------------------------------------------------

    fn wake_now(&mut self, tenant: &TenantId) -> Result<(), EngineError> {
        let now = self.now();
        if now != self.wake_instant {
            self.wake_instant = now;
            self.wakes_this_instant.clear();
        }
        let count = self.wakes_this_instant.entry(tenant.clone()).or_default();
        if *count >= WAKES_PER_INSTANT {
            return Ok(());
        }
        let rt = self.rt_mut(tenant);
        if rt.wake_pending {
            return Ok(());
        }
        rt.wake_pending = true;
        *self.wakes_this_instant.get_mut(tenant).expect("inserted above") += 1;
        self.kernel.schedule(
            now,
            EventKind::AgentWake {
                tenant: tenant.clone(),
                periodic: false,
            },
        )?;
        Ok(())
    }

    fn decide(&mut self, tenant: &TenantId) -> Result<(), EngineError> {
        self.sync_progress(tenant);
        for _ in 0..self.config.max_decisions_per_wake {
            let rt = self.rt(tenant);
            if !rt.state.phase.is_live() {
                return Ok(());
            }
            let decision = {
                let view = AgentView {
                    state: &rt.state,
                    policy: &rt.spec.migration,
                    exchange: &self.exchange,
                    cluster: &self.cluster,
                    now: self.now(),
                    migration_pending: rt.request.is_some() && rt.state.phase != Phase::Queued,
                };
                rt.strategy.decide(&view)
            };
            match decision {
                AgentDecision::Stay => return Ok(()),
                AgentDecision::Rebid { accel, rate } => {
                    if !self.rebid(tenant, &accel, rate)? {
                        return Ok(());
                    }
                }
                AgentDecision::Migrate(table) => return self.request_migration(tenant, table, false),
                AgentDecision::Terminate => return self.terminate(tenant),
            }
        }
        Ok(())
    }

    /// Returns whether the exchange changed.
    fn rebid(&mut self, tenant: &TenantId, accel: &AccelId, rate: Rate) -> Result<bool, EngineError> {
        let Some(entry) = self.rt(tenant).state.launch_table.get(accel) else {
            return Ok(false);
        };
        let Some(base) = self.cluster.base_rate(accel) else {
            return Ok(false);
        };
        if entry.max_bid < base {
            return Ok(false);
        }
        let rate = rate.clamp(base, entry.max_bid);
        let now = self.now();
        let before = self.bids_of(tenant);
        let events = match before.get(accel) {
            Some(old) if *old == rate => return Ok(false),
            Some(_) => self.exchange.update_bid(tenant, accel, rate, now)?,
            None => self.exchange.post_bid(tenant, accel, rate, now)?,
        };
        self.record_bid_diff(tenant, &before);
        self.price_events(events)?;
        Ok(true)
    }

    fn request_migration(&mut self, tenant: &TenantId, table: LaunchTable, forced: bool) -> Result<(), EngineError> {
        self.sync_progress(tenant);
        let rt = self.rt(tenant);
        if rt.state.phase != Phase::Running || rt.request.is_some() {
            return Ok(());
        }
        let Some(from) = rt.state.occupied().cloned() else {
            return Ok(());
        };
        // Ceilings of the tenant's own launch table always apply.
        let own = &rt.state.launch_table;
        let mut entries = Vec::new();
        for e in &table.entries {
            let Some(limit) = own.get(&e.accel) else {
                return Ok(());
            };
            entries.push((e.accel.clone(), e.max_bid.min(limit.max_bid)));
        }
        let table = LaunchTable::new(entries);
        if validate_launch_table(&table, &self.cluster, &rt.state.profile).is_err() {
            return Ok(());
        }
        let id = RequestId(self.next_request);
        let request = UserRequest {
            id,
            tenant: tenant.clone(),
            payload: rt.spec.payload.clone(),
            launch_table: table.clone(),
            strategy: rt.spec.strategy.clone(),
            migration_policy: if forced {
                MigrationMode::CheckpointStore.id().into()
            } else {
                rt.spec.migration.mode.id().into()
            },
            timeout: rt.spec.timeout,
            resume_from: rt.state.last_checkpoint,
        };
        let timeout = rt.spec.timeout;
        let progress = rt.state.progress;
        let now = self.now();
        let profile = rt.state.profile.clone();
        self.next_request += 1;
        let before = self.bids_of(tenant);
        let events = self.scheduler.enqueue(
            request,
            Some(from),
            now,
            &self.cluster,
            &profile,
            &mut self.exchange,
        )?;
        let rt = self.rt_mut(tenant);
        rt.request = Some(id);
        rt.forced_store = forced;
        let first = &table.entries[0];
        self.record(
            TraceRecord::new(now, TraceEvent::MigrationRequested)
                .tenant(tenant)
                .accel(&first.accel)
                .rate(first.max_bid)
                .progress(progress),
        );
        self.record_bid_diff(tenant, &before);
        self.price_events(events)?;
        self.kernel.schedule(
            now + timeout + SimDuration::from_millis(1),
            EventKind::Timeout { request: id },
        )?;
        Ok(())
    }

    /// Stops the workload, keeping the state stored at the last checkpoint.
    fn terminate(&mut self, tenant: &TenantId) -> Result<(), EngineError> {
        self.sync_progress(tenant);
        let now = self.now();
        let held: Vec<InstanceRef> = self.rt(tenant).state.holdings.iter().map(|h| h.instance.clone()).collect();
        for i in &held {
            self.release(tenant, i)?;
        }
        if let Some(req) = self.rt(tenant).request {
            if self.scheduler.queue.contains(req) {
                let (_, events) = self.scheduler.cancel(req, now, &mut self.exchange)?;
                self.price_events(events)?;
            }
        }
        let rt = self.rt_mut(tenant);
        rt.state.progress = rt.state.last_checkpoint;
        rt.state.phase = Phase::Terminated;
        rt.request = None;
        rt.segment = None;
        rt.generation += 1;
        let progress = rt.state.progress;
        self.record(TraceRecord::new(now, TraceEvent::Terminate).tenant(tenant).progress(progress));
        self.expire_all(tenant)
    }

    fn expire_all(&mut self, tenant: &TenantId) -> Result<(), EngineError> {
        let before = self.bids_of(tenant);
        let (_, events) = self.exchange.expire_tenant_bids(tenant, self.now());
        self.record_bid_diff(tenant, &before);
        self.price_events(events)
    }

    // ---- scheduling --------------------------------------------------------

    /// Places whatever can be placed and lets the operator baseline act,
    /// until nothing changes.
    fn settle(&mut self) -> Result<(), EngineError> {
        let limit = 4 * (self.tenants.len() + 1);
        for _ in 0..limit {
            let mut changed = false;
            while let Some(a) = self.scheduler.match_head(&self.cluster, &self.exchange, self.now()) {
                self.dispatch(a)?;
                changed = true;
            }
            if self.config.naive_operator != NaiveTarget::Off {
                changed |= self.naive_pass()?;
            }
            if !changed {
                break;
            }
        }
        Ok(())
    }

    fn naive_pass(&mut self) -> Result<bool, EngineError> {
        let candidates: Vec<&TenantState> = self
            .order
            .iter()
            .map(|t| &self.tenants[t])
            .filter(|r| r.request.is_none())
            .map(|r| &r.state)
            .collect();
        let directives = naive_operator_decide(&self.cluster, candidates, self.config.naive_operator);
        let mut changed = false;
        for d in directives {
            let rate = self
                .exchange
                .bid_of(&d.tenant, &d.target)
                .map(|b| b.rate)
                .or_else(|| self.rt(&d.tenant).state.launch_table.get(&d.target).map(|e| e.max_bid));
            let Some(rate) = rate else { continue };
            self.request_migration(&d.tenant, LaunchTable::new([(d.target.clone(), rate)]), true)?;
            changed |= self.rt(&d.tenant).request.is_some();
        }
        Ok(changed)
    }

    fn dispatch(&mut self, a: Assignment) -> Result<(), EngineError> {
        let queued = self.scheduler.dispatch(&a, &mut self.cluster)?;
        let tenant = a.tenant.clone();
        let now = self.now();
        let rt = self.rt_mut(&tenant);
        rt.request = None;
        let forced = std::mem::take(&mut rt.forced_store);
        let Some(from) = queued.migrating_from else {
            rt.state.holdings = vec![Holding {
                instance: a.instance.clone(),
                rate: a.rate,
                since: now,
            }];
            rt.state.phase = Phase::Loading;
            rt.generation += 1;
            let (generation, delay) = (rt.generation, rt.spec.migration.load_delay);
            self.reopen(&tenant, &a.instance, a.rate, BillingKind::Load, TraceEvent::Assignment)?;
            self.kernel.schedule(
                now + delay,
                EventKind::LoadComplete {
                    tenant,
                    generation,
                },
            )?;
            return Ok(());
        };
        self.sync_progress(&tenant);
        let rt = self.rt(&tenant);
        let policy = if forced {
            MigrationPolicy {
                mode: MigrationMode::CheckpointStore,
                ..rt.spec.migration.clone()
            }
        } else {
            rt.spec.migration.clone()
        };
        let departing = rt.state.progress;
        let (next, effects, delay) = apply_migration(&rt.state, &from, &a, &policy)?;
        if effects.noop {
            return Ok(());
        }
        self.rt_mut(&tenant).migrations += 1;
        self.record(
            TraceRecord::new(now, TraceEvent::MigrationDepart)
                .tenant(&tenant)
                .on(&from)
                .progress(departing),
        );
        match effects.mode {
            MigrationMode::CheckpointStore => {
                self.release(&tenant, &from)?;
                let rt = self.rt_mut(&tenant);
                rt.state = TenantState {
                    spent: rt.state.spent,
                    ..next
                };
                rt.segment = None;
                rt.generation += 1;
                rt.rollback_ppb += effects.rollback.ppb();
                let generation = rt.generation;
                if effects.rollback > Progress::ZERO {
                    let restored = rt.state.progress;
                    self.record(
                        TraceRecord::new(now, TraceEvent::Rollback)
                            .tenant(&tenant)
                            .progress(restored),
                    );
                }
                self.reopen(&tenant, &a.instance, a.rate, BillingKind::Load, TraceEvent::Assignment)?;
                self.kernel.schedule(
                    now + delay,
                    EventKind::LoadComplete {
                        tenant,
                        generation,
                    },
                )?;
            }
            MigrationMode::LiveOverlap => {
                let rt = self.rt_mut(&tenant);
                rt.state.holdings = next.holdings;
                rt.state.phase = next.phase;
                let generation = rt.generation;
                self.reopen(&tenant, &a.instance, a.rate, BillingKind::Overlap, TraceEvent::Assignment)?;
                self.kernel.schedule(
                    now + delay,
                    EventKind::MigrationComplete {
                        tenant,
                        generation,
                    },
                )?;
            }
        }
        Ok(())
    }

    // ---- event handlers ----------------------------------------------------

    fn handle(&mut self, event: SimEvent) -> Result<(), EngineError> {
        let now = event.time;
        match event.kind {
            EventKind::RequestArrival { tenant } => self.on_arrival(&tenant),
            EventKind::PriceRecompute { apply_to: Some(accel) } => self.apply_rates(&accel),
            EventKind::PriceRecompute { apply_to: None } => {
                let events = self.exchange.sweep(now);
                self.price_events(events)?;
                if self.any_live() {
                    self.kernel.schedule(
                        now + self.config.price_sweep_period,
                        EventKind::PriceRecompute { apply_to: None },
                    )?;
                }
                Ok(())
            }
            EventKind::AgentWake { tenant, periodic } => {
                let rt = self.rt_mut(&tenant);
                if !periodic {
                    rt.wake_pending = false;
                }
                if !rt.state.phase.is_live() {
                    return Ok(());
                }
                if periodic {
                    self.kernel.schedule(
                        now + self.config.agent_wake_period,
                        EventKind::AgentWake {
                            tenant: tenant.clone(),
                            periodic: true,
                        },
                    )?;
                }
                self.decide(&tenant)
            }
            EventKind::CheckpointReached { tenant, generation } => {
                if self.rt(&tenant).generation != generation {
                    return Ok(());
                }
                self.sync_progress(&tenant);
                let rt = self.rt_mut(&tenant);
                let boundary = rt.state.profile.checkpoint_floor(rt.state.progress);
                rt.state.progress = boundary;
                rt.state.last_checkpoint = boundary;
                let accel = rt.segment.as_ref().map(|s| s.accel.clone()).expect("running");
                let instance = rt.state.occupied().cloned();
                let mut r = TraceRecord::new(now, TraceEvent::CheckpointReached)
                    .tenant(&tenant)
                    .progress(boundary);
                if let Some(i) = &instance {
                    r = r.on(i);
                }
                self.record(r);
                self.start_segment(&tenant, &accel)?;
                self.wake_now(&tenant)
            }
            EventKind::LoadComplete { tenant, generation } => {
                let rt = self.rt(&tenant);
                if rt.generation != generation || rt.state.phase != Phase::Loading {
                    return Ok(());
                }
                let h = rt.state.holdings[0].clone();
                self.rt_mut(&tenant).state.phase = Phase::Running;
                self.reopen(&tenant, &h.instance, h.rate, BillingKind::Compute, TraceEvent::LoadComplete)?;
                self.start_segment(&tenant, &h.instance.accel)?;
                self.wake_now(&tenant)
            }
            EventKind::MigrationComplete { tenant, generation } => {
                let rt = self.rt(&tenant);
                if rt.generation != generation || rt.state.phase != Phase::Migrating {
                    return Ok(());
                }
                self.sync_progress(&tenant);
                let rt = self.rt(&tenant);
                let source = rt.state.holdings[0].instance.clone();
                let dest = rt.state.holdings[1].clone();
                self.release(&tenant, &source)?;
                let rt = self.rt_mut(&tenant);
                rt.state.phase = Phase::Running;
                rt.generation += 1;
                self.reopen(&tenant, &dest.instance, dest.rate, BillingKind::Compute, TraceEvent::MigrationComplete)?;
                self.start_segment(&tenant, &dest.instance.accel)?;
                self.wake_now(&tenant)
            }
            EventKind::WorkloadComplete { tenant, generation } => {
                if self.rt(&tenant).generation != generation {
                    return Ok(());
                }
                self.on_complete(&tenant)
            }
            EventKind::Timeout { .. } => {
                let snapshot: BTreeMap<TenantId, BTreeMap<AccelId, Rate>> = self
                    .scheduler
                    .queue
                    .iter()
                    .filter(|q| q.deadline_passed(now))
                    .map(|q| (q.request.tenant.clone(), self.bids_of(&q.request.tenant)))
                    .collect();
                let (removed, events) = self.scheduler.sweep_timeouts(now, &mut self.exchange);
                for q in removed {
                    let tenant = q.request.tenant.clone();
                    let rt = self.rt_mut(&tenant);
                    rt.request = None;
                    rt.forced_store = false;
                    if q.migrating_from.is_none() {
                        rt.state.phase = Phase::Terminated;
                        rt.generation += 1;
                    }
                    let progress = rt.state.progress;
                    self.record(TraceRecord::new(now, TraceEvent::Timeout).tenant(&tenant).progress(progress));
                    if let Some(before) = snapshot.get(&tenant) {
                        self.record_bid_diff(&tenant, before);
                    }
                }
                self.price_events(events)
            }
            EventKind::Cancel { tenant } => self.on_cancel(&tenant),
        }
    }

    fn on_arrival(&mut self, tenant: &TenantId) -> Result<(), EngineError> {
        let now = self.now();
        let rt = self.rt(tenant);
        if rt.arrived || !rt.state.phase.is_live() {
            return Ok(());
        }
        let id = RequestId(self.next_request);
        let spec = &rt.spec;
        let request = UserRequest {
            id,
            tenant: tenant.clone(),
            payload: spec.payload.clone(),
            launch_table: spec.launch_table.clone(),
            strategy: spec.strategy.clone(),
            migration_policy: spec.migration.mode.id().into(),
            timeout: spec.timeout,
            resume_from: spec.resume_from,
        };
        let (timeout, resume, profile) = (spec.timeout, spec.resume_from, spec.profile.clone());
        self.next_request += 1;
        self.record(TraceRecord::new(now, TraceEvent::RequestArrival).tenant(tenant).progress(resume));
        let before = self.bids_of(tenant);
        let events = self
            .scheduler
            .enqueue(request, None, now, &self.cluster, &profile, &mut self.exchange)?;
        let rt = self.rt_mut(tenant);
        rt.arrived = true;
        rt.request = Some(id);
        self.record_bid_diff(tenant, &before);
        self.price_events(events)?;
        self.kernel.schedule(
            now + timeout + SimDuration::from_millis(1),
            EventKind::Timeout { request: id },
        )?;
        self.kernel.schedule(
            now + self.config.agent_wake_period,
            EventKind::AgentWake {
                tenant: tenant.clone(),
                periodic: true,
            },
        )?;
        self.wake_now(tenant)
    }

    fn on_complete(&mut self, tenant: &TenantId) -> Result<(), EngineError> {
        self.sync_progress(tenant);
        let now = self.now();
        let held: Vec<InstanceRef> = self.rt(tenant).state.holdings.iter().map(|h| h.instance.clone()).collect();
        for i in &held {
            self.release(tenant, i)?;
        }
        if let Some(req) = self.rt(tenant).request {
            if self.scheduler.queue.contains(req) {
                let (_, events) = self.scheduler.cancel(req, now, &mut self.exchange)?;
                self.price_events(events)?;
            }
        }
        let rt = self.rt_mut(tenant);
        rt.state.progress = Progress::ONE;
        rt.state.last_checkpoint = Progress::ONE;
        rt.state.phase = Phase::Completed;
        rt.completed_at = Some(now);
        rt.request = None;
        rt.segment = None;
        rt.generation += 1;
        self.record(
            TraceRecord::new(now, TraceEvent::WorkloadComplete)
                .tenant(tenant)
                .progress(Progress::ONE),
        );
        self.expire_all(tenant)
    }

    fn on_cancel(&mut self, tenant: &TenantId) -> Result<(), EngineError> {
        let now = self.now();
        let rt = self.rt(tenant);
        if !rt.state.phase.is_live() {
            return Ok(());
        }
        if !rt.arrived {
            let rt = self.rt_mut(tenant);
            rt.state.phase = Phase::Terminated;
            self.record(TraceRecord::new(now, TraceEvent::Cancel).tenant(tenant));
            return Ok(());
        }
        let Some(req) = rt.request.filter(|r| self.scheduler.queue.contains(*r)) else {
            return Ok(());
        };
        let before = self.bids_of(tenant);
        let (q, events) = self.scheduler.cancel(req, now, &mut self.exchange)?;
        let rt = self.rt_mut(tenant);
        rt.request = None;
        rt.forced_store = false;
        if q.migrating_from.is_none() {
            rt.state.phase = Phase::Terminated;
            rt.generation += 1;
        }
        let progress = rt.state.progress;
        self.record(TraceRecord::new(now, TraceEvent::Cancel).tenant(tenant).progress(progress));
        self.record_bid_diff(tenant, &before);
        self.price_events(events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::rate;

    fn at(ms: u64) -> SimTime {
        SimTime::from_millis(ms)
    }

    #[test]
    fn kernel_orders_by_time_then_sequence() {
        let mut k = Kernel::new();
        let wake = |t: &str| EventKind::Cancel { tenant: t.into() };
        k.schedule(at(5), wake("late")).unwrap();
        k.schedule(at(1), wake("s1")).unwrap();
        k.schedule(at(1), wake("s2")).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| k.pop()).map(|e| e.kind).collect();
        assert_eq!(order, vec![wake("s1"), wake("s2"), wake("late")]);
        assert_eq!(k.clock(), at(5));
    }

    #[test]
    fn kernel_rejects_time_travel() {
        let mut k = Kernel::new();
        k.schedule(at(10), EventKind::Cancel { tenant: "x".into() }).unwrap();
        k.pop();
        assert!(matches!(
            k.schedule(at(9), EventKind::Cancel { tenant: "x".into() }),
            Err(EngineError::TimeTravel { .. })
        ));
        // Same instant is allowed and runs after anything already queued.
        k.schedule(at(10), EventKind::Cancel { tenant: "y".into() }).unwrap();
    }

    fn inst(a: &str, i: u32) -> InstanceRef {
        InstanceRef { accel: a.into(), index: i }
    }

    #[test]
    fn accrue_exact_cost() {
        let mut l = BillingLedger::new();
        let c = l
            .accrue(&"B".into(), &inst("A10", 0), rate("0.687"), at(0), at(360_000), BillingKind::Compute)
            .unwrap();
        assert_eq!(c, Money::from_micros(68_700));
        let z = l
            .accrue(&"B".into(), &inst("A10", 0), rate("0.687"), at(360_000), at(360_000), BillingKind::Compute)
            .unwrap();
        assert_eq!(z, Money::ZERO);
        assert_eq!(l.entries().len(), 2);
    }

    #[test]
    fn accrue_rejects_overlap_and_negative() {
        let mut l = BillingLedger::new();
        l.accrue(&"A".into(), &inst("A10", 0), rate("0.606"), at(0), at(100), BillingKind::Compute)
            .unwrap();
        assert!(matches!(
            l.accrue(&"B".into(), &inst("A10", 0), rate("0.606"), at(50), at(150), BillingKind::Compute),
            Err(LedgerError::OverlapViolation { .. })
        ));
        // Adjacent intervals and other instances are fine.
        l.accrue(&"B".into(), &inst("A10", 0), rate("0.606"), at(100), at(150), BillingKind::Compute)
            .unwrap();
        l.accrue(&"B".into(), &inst("L4", 0), rate("0.469"), at(0), at(150), BillingKind::Compute)
            .unwrap();
        assert!(matches!(
            l.accrue(&"B".into(), &inst("L4", 1), rate("0.469"), at(5), at(4), BillingKind::Load),
            Err(LedgerError::NegativeInterval { .. })
        ));
    }

    #[test]
    fn overlap_window_bills_both_instances() {
        let mut l = BillingLedger::new();
        let a: TenantId = "A".into();
        let window = (at(0), at(5_000));
        l.accrue(&a, &inst("Trainium", 0), rate("0.804"), window.0, window.1, BillingKind::Compute)
            .unwrap();
        l.accrue(&a, &inst("A10", 0), rate("0.652"), window.0, window.1, BillingKind::Overlap)
            .unwrap();
        // Each interval rounds on its own.
        let five = SimDuration::from_secs(5);
        let both = rate("0.804").cost_over(five) + rate("0.652").cost_over(five);
        assert_eq!(l.total_for(&a), both);
        assert_eq!(both, Money::from_micros(1_117 + 906));
    }
}
