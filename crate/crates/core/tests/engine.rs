use laissez_core::agents::{
    break_even_agent_decide, AgentDecision, AgentView, MigrationMode, Phase, StrategyRegistry,
};
use laissez_core::engine::{run, run_with, BillingKind, RunOutput, RunStatus};
use laissez_core::model::{AccelId, LaunchTable, TenantId};
use laissez_core::scenario::{bundled, bundled_names, parse_scenario, Scenario};
use laissez_core::trace::{rebuild_intervals, rebuild_totals, trace_to_string, TraceEvent, TraceFormat, TraceRecord};
use laissez_core::units::{Money, Progress, Rate, SimDuration, SimTime};

fn scenario(name: &str) -> Scenario {
    bundled(name).expect("bundled")
}

fn mins(m: u64) -> SimTime {
    SimTime::ZERO + SimDuration::from_mins(m)
}

fn events<'a>(out: &'a RunOutput, tenant: &'a str, kind: TraceEvent) -> impl Iterator<Item = &'a TraceRecord> + 'a {
    out.trace.records.iter().filter(move |r| r.event == kind && r.is_for(tenant))
}

fn assert_conserved(out: &RunOutput) {
    let sum: Money = out.ledger.entries().iter().map(|e| e.cost).sum();
    assert_eq!(sum, out.ledger.revenue());
    assert_eq!(&rebuild_totals(&out.trace.records), out.ledger.totals());
    for t in &out.tenants {
        assert_eq!(t.total_cost, out.ledger.total_for(&t.id));
    }
}

const EMPTY: &str = r#"
schema_version = 1
name = "empty"

[cluster]
[[cluster.accelerators]]
id = "A10"
base_rate = "0.606"
count = 1
"#;

#[test]
fn empty_scenario_is_quiescent_with_nothing_recorded() {
    let s = parse_scenario(EMPTY).unwrap();
    let out = run(&s, None).unwrap();
    assert!(out.trace.records.is_empty());
    assert!(out.ledger.is_empty());
    assert_eq!(out.status, RunStatus::Quiescent);
    assert_eq!(out.end_time, SimTime::ZERO);
}

#[test]
fn every_bundled_scenario_is_deterministic_and_conserves_money() {
    for name in bundled_names() {
        let s = scenario(name);
        let a = run(&s, None).unwrap();
        let b = run(&s, None).unwrap();
        assert_eq!(trace_to_string(&a.trace, TraceFormat::Csv), trace_to_string(&b.trace, TraceFormat::Csv));
        assert_eq!(a.status, RunStatus::Quiescent, "{name}");
        assert_conserved(&a);
    }
}

#[test]
fn clock_and_cumulative_cost_never_go_backwards() {
    for name in bundled_names() {
        let out = run(&scenario(name), None).unwrap();
        let rs = &out.trace.records;
        assert!(rs.windows(2).all(|w| w[0].time <= w[1].time), "{name}");
        let mut last = std::collections::BTreeMap::<TenantId, Money>::new();
        for r in rs {
            if let (Some(t), Some(c)) = (&r.tenant, r.cumulative_cost) {
                let prev = last.insert(t.clone(), c).unwrap_or(Money::ZERO);
                assert!(c >= prev, "{name}: {t} cost dropped at {}", r.time);
            }
        }
    }
}

#[test]
fn assignments_and_releases_bracket_each_holding() {
    for name in bundled_names() {
        let out = run(&scenario(name), None).unwrap();
        let mut held = std::collections::BTreeMap::new();
        for r in &out.trace.records {
            let Some(inst) = r.instance_ref() else { continue };
            match r.event {
                TraceEvent::Assignment => {
                    let prev = held.insert(inst.clone(), r.tenant.clone());
                    assert!(prev.is_none(), "{name}: {inst} assigned twice");
                }
                TraceEvent::Release | TraceEvent::HorizonClose => {
                    assert_eq!(held.remove(&inst), Some(r.tenant.clone()), "{name}: stray release of {inst}");
                }
                _ => {}
            }
        }
        assert!(held.is_empty(), "{name}: instances never released");
    }
}

#[test]
fn billed_rate_follows_the_latest_price() {
    let out = run(&scenario("laissez"), None).unwrap();
    let intervals = rebuild_intervals(&out.trace.records);
    assert_eq!(intervals.len(), out.ledger.entries().len());
    for e in out.ledger.entries() {
        // Latest published price for this type at or before the start,
        // falling back to the base rate.
        let published = out
            .trace
            .records
            .iter()
            .filter(|r| r.event == TraceEvent::PriceChange && r.accel.as_ref() == Some(&e.instance.accel) && r.time <= e.start)
            .filter_map(|r| r.rate)
            .next_back()
            .unwrap_or_else(|| out_base(&e.instance.accel));
        assert_eq!(e.rate, published, "{} on {} from {}", e.tenant, e.instance, e.start);
        let changed_inside = out.trace.records.iter().any(|r| {
            r.event == TraceEvent::PriceChange && r.accel.as_ref() == Some(&e.instance.accel) && r.time > e.start && r.time < e.end
        });
        assert!(!changed_inside, "price moved inside a billed interval");
    }
}

fn out_base(accel: &AccelId) -> Rate {
    scenario("laissez").cluster.base_rate(accel).unwrap()
}

#[test]
fn live_overlap_bills_both_instances_without_rollback() {
    let mut s = scenario("laissez");
    for t in &mut s.tenants {
        t.migration.mode = MigrationMode::LiveOverlap;
    }
    let out = run(&s, None).unwrap();
    assert_eq!(out.status, RunStatus::Quiescent);
    assert!(out.ledger.entries().iter().any(|e| e.kind == BillingKind::Overlap));
    assert!(out.tenants.iter().all(|t| t.rollback == Progress::ZERO));
    assert_eq!(events(&out, "A", TraceEvent::Rollback).count(), 0);
    assert!(events(&out, "A", TraceEvent::MigrationComplete).count() >= 1);
    assert_conserved(&out);
}

/// Break-even bidding that moves the moment it holds an entitlement on a
/// more preferred type, checkpoint or not.
fn eager(view: &AgentView<'_>) -> AgentDecision {
    let state = view.state;
    if state.phase == Phase::Running && !view.migration_pending {
        let current = state.occupied_type().and_then(|a| state.launch_table.priority_of(a)).unwrap_or(usize::MAX);
        for entry in state.launch_table.entries.iter().take(current) {
            let entitled = view.exchange.entry(&entry.accel).is_some_and(|x| x.is_entitled(&state.id));
            if entitled && state.occupied_type() != Some(&entry.accel) {
                return AgentDecision::Migrate(LaunchTable::new([(entry.accel.clone(), entry.max_bid)]));
            }
        }
    }
    break_even_agent_decide(view)
}

#[test]
fn migrating_off_a_checkpoint_discards_work_and_finishes_later() {
    let mut registry = StrategyRegistry::default();
    registry.register("eager", eager);
    let mut s = scenario("laissez");
    s.tenants.iter_mut().find(|t| t.id.as_str() == "A").unwrap().strategy = "eager".into();
    let out = run_with(&s, None, &registry).unwrap();
    let coordinated = run(&scenario("laissez"), None).unwrap();
    let (a, c) = (out.tenant("A").unwrap(), coordinated.tenant("A").unwrap());
    assert!(a.rollback > Progress::ZERO);
    assert!(a.completed_at.unwrap() > c.completed_at.unwrap());
    assert_eq!(events(&out, "A", TraceEvent::Rollback).count(), 1);
    assert_conserved(&out);
}

fn quit_after_first_checkpoint(view: &AgentView<'_>) -> AgentDecision {
    if view.state.last_checkpoint > Progress::ZERO && view.state.phase == Phase::Running {
        AgentDecision::Terminate
    } else {
        break_even_agent_decide(view)
    }
}

#[test]
fn terminate_keeps_the_last_checkpoint_and_frees_everything() {
    let mut registry = StrategyRegistry::default();
    registry.register("quitter", quit_after_first_checkpoint);
    let mut s = scenario("laissez");
    s.tenants.iter_mut().find(|t| t.id.as_str() == "A").unwrap().strategy = "quitter".into();
    let out = run_with(&s, None, &registry).unwrap();
    let a = out.tenant("A").unwrap();
    assert_eq!(a.phase, Phase::Terminated);
    assert_eq!(a.completed_at, None);
    let term = events(&out, "A", TraceEvent::Terminate).next().expect("terminate record");
    assert_eq!(term.progress, Some(Progress::parse("0.25").unwrap()));
    assert!(events(&out, "A", TraceEvent::Release).any(|r| r.time == term.time));
    assert!(events(&out, "A", TraceEvent::BidExpired).any(|r| r.time == term.time));
    assert!(events(&out, "A", TraceEvent::Assignment).all(|r| r.time <= term.time));
    assert_eq!(out.status, RunStatus::Quiescent);
    assert_conserved(&out);
}

const CONTENDED: &str = r#"
schema_version = 1
name = "contended"

[cluster]
[[cluster.accelerators]]
id = "A10"
base_rate = "0.606"
count = 1

[[tenants]]
id = "first"
arrival = "0m"
strategy = "static"
timeout = "1h"
launch_table = [{ accel = "A10", max_bid = "0.606" }]
profile = { checkpoint_interval = "0.5", load_delay = "5s", hours = { A10 = "0.5" } }

[[tenants]]
id = "second"
arrival = "1m"
strategy = "static"
timeout = "2m"
launch_table = [{ accel = "A10", max_bid = "0.606" }]
profile = { checkpoint_interval = "0.5", load_delay = "5s", hours = { A10 = "0.5" } }
"#;

#[test]
fn queued_request_times_out() {
    let s = parse_scenario(CONTENDED).unwrap();
    let out = run(&s, None).unwrap();
    let second = out.tenant("second").unwrap();
    assert_eq!(second.phase, Phase::Terminated);
    assert_eq!(second.total_cost, Money::ZERO);
    let t = events(&out, "second", TraceEvent::Timeout).next().expect("timeout record");
    assert!(t.time > mins(3) && t.time <= mins(3) + SimDuration::from_secs(1));
    assert_eq!(events(&out, "second", TraceEvent::Assignment).count(), 0);
    assert!(out.tenant("first").unwrap().completed_at.is_some());
}

#[test]
fn queued_request_can_be_cancelled() {
    let mut s = parse_scenario(CONTENDED).unwrap();
    let second = s.tenants.iter_mut().find(|t| t.id.as_str() == "second").unwrap();
    second.timeout = SimDuration::from_mins(60);
    second.cancel_at = Some(mins(2));
    let out = run(&s, None).unwrap();
    let c = events(&out, "second", TraceEvent::Cancel).next().expect("cancel record");
    assert_eq!(c.time, mins(2));
    assert_eq!(out.tenant("second").unwrap().phase, Phase::Terminated);
    assert_eq!(events(&out, "second", TraceEvent::Timeout).count(), 0);
}

#[test]
fn horizon_closes_open_intervals() {
    let out = run(&scenario("laissez"), Some(mins(10))).unwrap();
    assert_eq!(out.status, RunStatus::NonQuiescent);
    assert_eq!(out.end_time, mins(10));
    let closes: Vec<_> = out.trace.records.iter().filter(|r| r.event == TraceEvent::HorizonClose).collect();
    assert_eq!(closes.len(), 2);
    assert!(closes.iter().all(|r| r.time == mins(10)));
    assert_conserved(&out);
}

#[test]
fn grace_window_delays_the_billed_rate() {
    let mut s = scenario("laissez");
    s.engine.grace_window = SimDuration::from_secs(30);
    let out = run(&s, None).unwrap();
    let first = events(&out, "B", TraceEvent::RateChange).next().expect("B rate change");
    assert_eq!(first.time, mins(5) + SimDuration::from_secs(30));
    assert_eq!(first.rate, Some(Rate::parse_dollars_per_hour("0.687").unwrap()));
    assert_conserved(&out);
}

#[test]
fn unknown_strategy_is_rejected() {
    let mut s = scenario("laissez");
    s.tenants[0].strategy = "clairvoyant".into();
    let err = run(&s, None).unwrap_err();
    assert!(err.to_string().contains("clairvoyant"), "{err}");
}
