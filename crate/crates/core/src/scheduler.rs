//! FIFO work scheduler.
//!
//! Requests wait in arrival order. A scheduling pass looks at the head of the
//! queue and walks its launch table in priority order; the first type on which
//! the tenant is entitled and an instance is free wins. Passes repeat until
//! the head cannot be placed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exchange::{ExchangeTable, PriceEvent};
use crate::model::{
    AccelId, FunctionalCluster, InstanceRef, InstanceState, LaunchTable, ModelError, RequestId,
    TenantId, UserRequest, WorkloadProfile,
};
use crate::units::{Rate, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error("request {0} is already queued")]
    DuplicateRequestId(RequestId),
    #[error("request {0} is not queued")]
    UnknownRequest(RequestId),
    #[error("instance {0} is not free")]
    InstanceNotFree(InstanceRef),
    #[error("instance {0} does not exist")]
    UnknownInstance(InstanceRef),
}

/// Whether requests behind a blocked head may be matched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueueDiscipline {
    /// Only the head is ever matched.
    #[default]
    Strict,
    /// The first matchable request in queue order is taken.
    SkipBlocked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedRequest {
    pub request: UserRequest,
    pub enqueued: SimTime,
    /// Type the tenant is running on when this is a migration request.
    pub migrating_from: Option<InstanceRef>,
}

impl QueuedRequest {
    pub fn deadline_passed(&self, now: SimTime) -> bool {
        self.enqueued + self.request.timeout < now
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestQueue {
    pending: Vec<QueuedRequest>,
}

impl RequestQueue {
    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn head(&self) -> Option<&QueuedRequest> {
        self.pending.first()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueuedRequest> {
        self.pending.iter()
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.pending.iter().any(|q| q.request.id == id)
    }

    pub fn get(&self, id: RequestId) -> Option<&QueuedRequest> {
        self.pending.iter().find(|q| q.request.id == id)
    }

    fn push(&mut self, entry: QueuedRequest) {
        // Stable insertion keeps ties on enqueue time ordered by request id.
        let pos = self
            .pending
            .iter()
            .position(|q| {
                (q.enqueued, q.request.id) > (entry.enqueued, entry.request.id)
            })
            .unwrap_or(self.pending.len());
        self.pending.insert(pos, entry);
    }

    fn remove(&mut self, id: RequestId) -> Option<QueuedRequest> {
        let pos = self.pending.iter().position(|q| q.request.id == id)?;
        Some(self.pending.remove(pos))
    }
}

/// Free-instance counts per type, kept in step with instance states.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityCache {
    free: BTreeMap<AccelId, usize>,
}

impl AvailabilityCache {
    pub fn from_cluster(cluster: &FunctionalCluster) -> Self {
        AvailabilityCache {
            free: cluster
                .types()
                .iter()
                .map(|t| (t.id.clone(), cluster.free_count(&t.id)))
                .collect(),
        }
    }

    pub fn free(&self, accel: &AccelId) -> usize {
        self.free.get(accel).copied().unwrap_or(0)
    }

    pub fn is_consistent_with(&self, cluster: &FunctionalCluster) -> bool {
        *self == AvailabilityCache::from_cluster(cluster)
    }
}

/// A decision to place a request on an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub request: RequestId,
    pub tenant: TenantId,
    pub instance: InstanceRef,
    pub rate: Rate,
    pub decided_at: SimTime,
}

/// Queue plus availability, owned by the event loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheduler {
    pub queue: RequestQueue,
    pub cache: AvailabilityCache,
    pub discipline: QueueDiscipline,
}

impl Scheduler {
    pub fn new(cluster: &FunctionalCluster, discipline: QueueDiscipline) -> Self {
        Scheduler {
            queue: RequestQueue::default(),
            cache: AvailabilityCache::from_cluster(cluster),
            discipline,
        }
    }

    /// Validates and queues a request, posting a bid for every entry of its
    /// launch table that clears the type's base rate. Existing bids by the
    /// same tenant are moved to the table's rate.
    pub fn enqueue(
        &mut self,
        request: UserRequest,
        migrating_from: Option<InstanceRef>,
        now: SimTime,
        cluster: &FunctionalCluster,
        profile: &WorkloadProfile,
        exchange: &mut ExchangeTable,
    ) -> Result<Vec<PriceEvent>, SchedulerError> {
        request.validate(cluster, profile)?;
        if self.queue.contains(request.id) {
            return Err(SchedulerError::DuplicateRequestId(request.id));
        }
        let mut events = Vec::new();
        for entry in &request.launch_table.entries {
            if LaunchTable::is_inert(entry, cluster) {
                continue;
            }
            let posted = if exchange.bid_of(&request.tenant, &entry.accel).is_some() {
                exchange.update_bid(&request.tenant, &entry.accel, entry.max_bid, now)
            } else {
                exchange.post_bid(&request.tenant, &entry.accel, entry.max_bid, now)
            };
            events.extend(posted.expect("non-inert launch entries clear the base rate"));
        }
        self.queue.push(QueuedRequest {
            request,
            enqueued: now,
            migrating_from,
        });
        Ok(events)
    }

    /// Finds the next placement, if any, without changing state.
    pub fn match_head(
        &self,
        cluster: &FunctionalCluster,
        exchange: &ExchangeTable,
        now: SimTime,
    ) -> Option<Assignment> {
        let candidates: Box<dyn Iterator<Item = &QueuedRequest>> = match self.discipline {
            QueueDiscipline::Strict => Box::new(self.queue.head().into_iter()),
            QueueDiscipline::SkipBlocked => Box::new(self.queue.iter()),
        };
        candidates
            .filter_map(|q| self.match_request(q, cluster, exchange, now))
            .next()
    }

    fn match_request(
        &self,
        queued: &QueuedRequest,
        cluster: &FunctionalCluster,
        exchange: &ExchangeTable,
        now: SimTime,
    ) -> Option<Assignment> {
        let req = &queued.request;
        req.launch_table
            .entries
            .iter()
            .filter(|e| !LaunchTable::is_inert(e, cluster))
            .find(|e| exchange.is_entitled(&req.tenant, &e.accel) && self.cache.free(&e.accel) > 0)
            .and_then(|e| {
                Some(Assignment {
                    request: req.id,
                    tenant: req.tenant.clone(),
                    instance: cluster.first_free(&e.accel)?,
                    rate: exchange.clearing_rate(&e.accel)?,
                    decided_at: now,
                })
            })
    }

    /// Binds an assignment: the instance becomes allocated and the request
    /// leaves the queue.
    pub fn dispatch(
        &mut self,
        assignment: &Assignment,
        cluster: &mut FunctionalCluster,
    ) -> Result<QueuedRequest, SchedulerError> {
        if !self.queue.contains(assignment.request) {
            return Err(SchedulerError::UnknownRequest(assignment.request));
        }
        self.allocate(
            cluster,
            &assignment.instance,
            &assignment.tenant,
            assignment.rate,
            assignment.decided_at,
        )?;
        Ok(self
            .queue
            .remove(assignment.request)
            .expect("presence checked above"))
    }

    pub fn allocate(
        &mut self,
        cluster: &mut FunctionalCluster,
        instance: &InstanceRef,
        tenant: &TenantId,
        rate: Rate,
        now: SimTime,
    ) -> Result<(), SchedulerError> {
        let slot = cluster
            .instance_mut(instance)
            .ok_or_else(|| SchedulerError::UnknownInstance(instance.clone()))?;
        if !slot.is_free() {
            return Err(SchedulerError::InstanceNotFree(instance.clone()));
        }
        slot.state = InstanceState::Allocated {
            tenant: tenant.clone(),
            rate,
            since: now,
        };
        *self.cache.free.entry(instance.accel.clone()).or_default() -= 1;
        Ok(())
    }

    pub fn release(
        &mut self,
        cluster: &mut FunctionalCluster,
        instance: &InstanceRef,
    ) -> Result<(), SchedulerError> {
        let slot = cluster
            .instance_mut(instance)
            .ok_or_else(|| SchedulerError::UnknownInstance(instance.clone()))?;
        if slot.is_free() {
            return Ok(());
        }
        slot.state = InstanceState::Free;
        *self.cache.free.entry(instance.accel.clone()).or_default() += 1;
        Ok(())
    }

    /// Removes requests whose timeout has elapsed and expires their bids.
    pub fn sweep_timeouts(
        &mut self,
        now: SimTime,
        exchange: &mut ExchangeTable,
    ) -> (Vec<QueuedRequest>, Vec<PriceEvent>) {
        let expired: Vec<RequestId> = self
            .queue
            .iter()
            .filter(|q| q.deadline_passed(now))
            .map(|q| q.request.id)
            .collect();
        let mut removed = Vec::new();
        let mut events = Vec::new();
        for id in expired {
            let (q, ev) = self.cancel(id, now, exchange).expect("id taken from the queue");
            removed.push(q);
            events.extend(ev);
        }
        (removed, events)
    }

    /// Tenant-initiated cancellation. A migration request keeps the bid on
    /// the type the tenant is still running on.
    pub fn cancel(
        &mut self,
        id: RequestId,
        now: SimTime,
        exchange: &mut ExchangeTable,
    ) -> Result<(QueuedRequest, Vec<PriceEvent>), SchedulerError> {
        let q = self
            .queue
            .remove(id)
            .ok_or(SchedulerError::UnknownRequest(id))?;
        let events = match &q.migrating_from {
            None => exchange.expire_tenant_bids(&q.request.tenant, now).1,
            Some(held) => {
                let drop: Vec<AccelId> = q
                    .request
                    .launch_table
                    .entries
                    .iter()
                    .map(|e| e.accel.clone())
                    .filter(|a| a != &held.accel)
                    .collect();
                exchange.expire_bids_on(&q.request.tenant, &drop, now).1
            }
        };
        Ok((q, events))
    }
}
