//! Run summaries computed from a trace alone, so a saved trace file yields
//! the same report as the run that produced it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::RunOutput;
use crate::model::{AccelId, InstanceRef, TenantId};
use crate::trace::{rebuild_totals, Trace, TraceEvent};
use crate::units::{Money, Progress, SimDuration, SimTime, PROGRESS_SCALE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantSummary {
    pub id: TenantId,
    pub total_cost: Money,
    pub completed_at: Option<SimTime>,
    pub migrations: u32,
    /// Work discarded by rollbacks, summed over migrations.
    pub rollback_ppb: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeUtilization {
    pub accel: AccelId,
    pub instances: u32,
    pub allocated: SimDuration,
    pub available: SimDuration,
    /// `allocated / available`, 0 for an empty run.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub span: SimDuration,
    pub tenants: Vec<TenantSummary>,
    pub utilization: Vec<TypeUtilization>,
    pub revenue: Money,
    pub migrations: u32,
    pub rollback_ppb: u64,
}

impl Report {
    pub fn tenant(&self, id: &str) -> Option<&TenantSummary> {
        self.tenants.iter().find(|t| t.id.as_str() == id)
    }

    pub fn total_cost(&self) -> Money {
        self.tenants.iter().map(|t| t.total_cost).sum()
    }
}

pub fn summarize(trace: &Trace) -> Report {
    let records = &trace.records;
    let totals = rebuild_totals(records);
    let span = records.last().map_or(SimDuration::ZERO, |r| r.time - SimTime::ZERO);

    let mut tenants: Vec<TenantSummary> = Vec::new();
    let mut index: BTreeMap<TenantId, usize> = BTreeMap::new();
    let mut departed: BTreeMap<TenantId, Progress> = BTreeMap::new();
    let mut held: BTreeMap<(TenantId, InstanceRef), SimTime> = BTreeMap::new();
    let mut allocated: BTreeMap<AccelId, u64> = BTreeMap::new();

    for r in records {
        let Some(t) = &r.tenant else { continue };
        if r.event == TraceEvent::PriceChange {
            continue;
        }
        let i = *index.entry(t.clone()).or_insert_with(|| {
            tenants.push(TenantSummary {
                id: t.clone(),
                total_cost: totals.get(t).copied().unwrap_or(Money::ZERO),
                completed_at: None,
                migrations: 0,
                rollback_ppb: 0,
            });
            tenants.len() - 1
        });
        let summary = &mut tenants[i];
        match r.event {
            TraceEvent::WorkloadComplete => summary.completed_at = Some(r.time),
            TraceEvent::MigrationDepart => {
                summary.migrations += 1;
                if let Some(p) = r.progress {
                    departed.insert(t.clone(), p);
                }
            }
            TraceEvent::Rollback => {
                if let (Some(from), Some(to)) = (departed.get(t), r.progress) {
                    summary.rollback_ppb += from.saturating_sub(to).ppb();
                }
            }
            TraceEvent::Assignment => {
                if let Some(inst) = r.instance_ref() {
                    held.entry((t.clone(), inst)).or_insert(r.time);
                }
            }
            e if e.closes_interval() => {
                if let Some(inst) = r.instance_ref() {
                    if let Some(start) = held.remove(&(t.clone(), inst.clone())) {
                        *allocated.entry(inst.accel).or_default() += (r.time - start).millis();
                    }
                }
            }
            _ => {}
        }
    }

    let utilization = trace
        .header
        .cluster
        .iter()
        .map(|(accel, count)| {
            let used = allocated.get(accel).copied().unwrap_or(0);
            let available = span.millis() * u64::from(*count);
            TypeUtilization {
                accel: accel.clone(),
                instances: *count,
                allocated: SimDuration::from_millis(used),
                available: SimDuration::from_millis(available),
                fraction: if available == 0 { 0.0 } else { used as f64 / available as f64 },
            }
        })
        .collect();

    Report {
        scenario: trace.header.scenario.clone(),
        span,
        revenue: tenants.iter().map(|t| t.total_cost).sum(),
        migrations: tenants.iter().map(|t| t.migrations).sum(),
        rollback_ppb: tenants.iter().map(|t| t.rollback_ppb).sum(),
        tenants,
        utilization,
    }
}

/// Summary of a finished run; identical to summarizing its trace.
pub fn summarize_run(output: &RunOutput) -> Report {
    summarize(&output.trace)
}

fn fraction(ppb: u64) -> String {
    format!("{}.{:09}", ppb / PROGRESS_SCALE, ppb % PROGRESS_SCALE)
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {} (span {})", self.scenario, SimTime::ZERO + self.span)?;
        writeln!(f, "{:<10} {:>12} {:>14} {:>10} {:>12}", "tenant", "cost_usd", "completed", "migrations", "rollback")?;
        for t in &self.tenants {
            let done = t.completed_at.map_or("-".to_string(), |c| c.to_string());
            writeln!(
                f,
                "{:<10} {:>12} {:>14} {:>10} {:>12}",
                t.id.as_str(),
                t.total_cost.to_decimal_string(),
                done,
                t.migrations,
                fraction(t.rollback_ppb)
            )?;
        }
        writeln!(f, "{:<10} {:>9} {:>14} {:>14} {:>8}", "accel", "instances", "allocated_ms", "available_ms", "util")?;
        for u in &self.utilization {
            writeln!(
                f,
                "{:<10} {:>9} {:>14} {:>14} {:>8.4}",
                u.accel.as_str(),
                u.instances,
                u.allocated.millis(),
                u.available.millis(),
                u.fraction
            )?;
        }
        writeln!(f, "revenue_usd {}", self.revenue.to_decimal_string())?;
        writeln!(f, "migrations {}", self.migrations)?;
        write!(f, "rollback {}", fraction(self.rollback_ppb))
    }
}
