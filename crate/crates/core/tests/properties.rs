use std::collections::BTreeMap;

use num_rational::Ratio;
use proptest::prelude::*;

use laissez_core::agents::{advance_progress, MigrationMode, Phase, ProgressEvent, TenantState};
use laissez_core::engine::{run, RunStatus};
use laissez_core::exchange::{ExchangeEntry, ExchangeError, ExchangeTable};
use laissez_core::model::{break_even_bid, cost_to_complete, AccelId, LaunchTable, TenantId, WorkloadProfile};
use laissez_core::scenario::{bundled, parse_scenario};
use laissez_core::trace::{parse_trace, rebuild_totals, trace_to_string, TraceFormat};
use laissez_core::units::{Money, Progress, Rate, SimDuration, SimTime};

type Q = Ratio<i128>;

fn q(n: u64) -> Q {
    Q::from_integer(i128::from(n))
}

fn round_half_up(x: Q) -> i128 {
    (x + Q::new(1, 2)).floor().to_integer()
}

const MS_PER_HOUR: u64 = 3_600_000;
const SCALE: u64 = 1_000_000_000;

fn profile(a10_ms: u64, l4_ms: u64, interval_ppb: u64) -> WorkloadProfile {
    WorkloadProfile::new(
        BTreeMap::from([
            (AccelId::new("A10"), SimDuration::from_millis(a10_ms)),
            (AccelId::new("L4"), SimDuration::from_millis(l4_ms)),
        ]),
        Progress::from_ppb(interval_ppb),
        Money::ZERO,
        SimDuration::from_secs(5),
    )
    .unwrap()
}

fn remaining_oracle(total_ms: u64, progress_ppb: u64) -> Q {
    q(round_half_up(q(total_ms) * q(SCALE - progress_ppb) / q(SCALE)) as u64)
}

proptest! {
    #[test]
    fn cost_over_rounds_half_up(rate in 0u64..10_000_000_000, ms in 0u64..1_000_000_000) {
        let got = Rate::from_micros_per_hour(rate).cost_over(SimDuration::from_millis(ms));
        let want = round_half_up(q(rate) * q(ms) / q(MS_PER_HOUR));
        prop_assert_eq!(i128::from(got.micros()), want);
    }

    #[test]
    fn money_text_round_trips(micros in 0u64..1_000_000_000_000) {
        let m = Money::from_micros(micros);
        prop_assert_eq!(Money::parse_dollars(&m.to_decimal_string()).unwrap(), m);
        let r = Rate::from_micros_per_hour(micros);
        prop_assert_eq!(Rate::parse_dollars_per_hour(&r.to_decimal_string()).unwrap(), r);
    }

    #[test]
    fn progress_text_round_trips(ppb in 0u64..=SCALE) {
        let p = Progress::from_ppb(ppb);
        prop_assert_eq!(Progress::parse(&p.to_decimal_string()).unwrap(), p);
    }

    #[test]
    fn cost_to_complete_matches_exact_arithmetic(
        total in 1u64..10 * MS_PER_HOUR,
        progress in 0u64..SCALE,
        rate in 0u64..5_000_000,
    ) {
        let p = profile(total, total, SCALE / 4);
        let got = cost_to_complete(&p, &"A10".into(), Progress::from_ppb(progress), Rate::from_micros_per_hour(rate)).unwrap();
        let left = remaining_oracle(total, progress);
        let want = round_half_up(q(rate) * left / q(MS_PER_HOUR));
        prop_assert_eq!(i128::from(got.micros()), want);
    }

    #[test]
    fn break_even_matches_exact_arithmetic(
        target_ms in 60_000u64..5 * MS_PER_HOUR,
        alt_ms in 60_000u64..5 * MS_PER_HOUR,
        progress in 0u64..SCALE / 2,
        alt_rate in 100_000u64..5_000_000,
        switch in 0u64..200_000,
        extra in 0u64..200_000,
    ) {
        let p = profile(target_ms, alt_ms, SCALE / 4);
        let bid = |s: u64| {
            break_even_bid(&p, &"A10".into(), &"L4".into(), Progress::from_ppb(progress), Rate::from_micros_per_hour(alt_rate), Money::from_micros(s)).unwrap()
        };
        let got = bid(switch);
        // Equal finishing cost: bid * left_target = alt_rate * left_alt + switch.
        let left_t = remaining_oracle(target_ms, progress);
        let left_a = remaining_oracle(alt_ms, progress);
        let exact = (q(alt_rate) * left_a / q(MS_PER_HOUR) + q(switch)) * q(MS_PER_HOUR) / left_t;
        let want = exact.floor().to_integer() / 1000 * 1000;
        prop_assert_eq!(i128::from(got.micros_per_hour()), want);
        prop_assert!(bid(switch + extra) >= got);
    }

    #[test]
    fn progress_is_monotone_and_capped(
        total in 1_000u64..MS_PER_HOUR,
        interval in prop::sample::select(vec![SCALE / 10, SCALE / 5, SCALE / 4, SCALE / 3, SCALE / 2]),
        steps in prop::collection::vec(0u64..600_000, 1..40),
    ) {
        let p = profile(total, total, interval);
        let mut state = TenantState::new("t".into(), p, LaunchTable::default(), Progress::ZERO);
        state.phase = Phase::Running;
        let mut completions = 0;
        let mut last_boundary = Progress::ZERO;
        for step in steps {
            let (next, events) = advance_progress(&state, SimDuration::from_millis(step), &"A10".into());
            prop_assert!(next.progress >= state.progress);
            prop_assert!(next.progress <= Progress::ONE);
            prop_assert!(next.last_checkpoint <= next.progress);
            prop_assert!(next.last_checkpoint >= state.last_checkpoint);
            for e in events {
                match e {
                    ProgressEvent::CheckpointReached(b) => {
                        prop_assert!(b > last_boundary && b < Progress::ONE);
                        last_boundary = b;
                    }
                    ProgressEvent::WorkloadComplete => completions += 1,
                }
            }
            state = next;
        }
        prop_assert!(completions <= 1);
        prop_assert_eq!(completions == 1, state.progress.is_complete());
    }
}

#[derive(Debug, Clone)]
enum Op {
    Post(usize, u64, u64),
    Update(usize, u64),
    Withdraw(usize),
    Expire(usize),
}

fn op() -> impl Strategy<Value = Op> {
    let who = 0usize..6;
    let rate = 400_000u64..900_000;
    prop_oneof![
        (who.clone(), rate.clone(), 0u64..3).prop_map(|(w, r, t)| Op::Post(w, r, t)),
        (who.clone(), rate).prop_map(|(w, r)| Op::Update(w, r)),
        who.clone().prop_map(Op::Withdraw),
        who.prop_map(Op::Expire),
    ]
}

proptest! {
    #[test]
    fn exchange_clears_at_the_first_losing_bid(
        capacity in 1u32..4,
        ops in prop::collection::vec(op(), 1..60),
    ) {
        let base = Rate::from_micros_per_hour(606_000);
        let accel: AccelId = "A10".into();
        let mut x = ExchangeTable::from_entries(vec![ExchangeEntry::new(accel.clone(), base, capacity)], Rate::DEFAULT_TICK);
        let mut clock = 0u64;
        for op in ops {
            let before = x.entry(&accel).unwrap().entitled().to_vec();
            let tenant = |i: usize| TenantId::new(format!("t{i}"));
            let result = match op {
                Op::Post(w, r, dt) => {
                    clock += dt;
                    x.post_bid(&tenant(w), &accel, Rate::from_micros_per_hour(r), SimTime::from_millis(clock)).map(|_| ())
                }
                Op::Update(w, r) => x.update_bid(&tenant(w), &accel, Rate::from_micros_per_hour(r), SimTime::from_millis(clock)).map(|_| ()),
                Op::Withdraw(w) => x.withdraw_bid(&tenant(w), &accel, SimTime::from_millis(clock)).map(|_| ()),
                Op::Expire(w) => {
                    x.expire_tenant_bids(&tenant(w), SimTime::from_millis(clock));
                    Ok(())
                }
            };
            if let Err(e) = result {
                let expected = matches!(
                    e,
                    ExchangeError::BidBelowBase { .. } | ExchangeError::DuplicateBid { .. } | ExchangeError::NoSuchBid { .. }
                );
                prop_assert!(expected, "unexpected error {}", e);
            }
            let e = x.entry(&accel).unwrap();
            let bids = e.bids();
            prop_assert!(bids.iter().all(|b| b.rate >= base));
            let k = capacity as usize;
            let mut rates: Vec<Rate> = bids.iter().map(|b| b.rate).collect();
            rates.sort_by(|a, b| b.cmp(a));
            let entitled = e.entitled();
            prop_assert_eq!(entitled.len(), bids.len().min(k));
            // Winners hold the top k rates.
            let mut won: Vec<Rate> = entitled.iter().map(|t| e.bid_of(t).unwrap().rate).collect();
            won.sort_by(|a, b| b.cmp(a));
            prop_assert_eq!(&won[..], &rates[..won.len()]);
            let want_clearing = rates.get(k).copied().unwrap_or(base).max(base);
            prop_assert_eq!(e.clearing_rate(), want_clearing);
            prop_assert!(won.iter().all(|r| *r >= e.clearing_rate()));
            // An incumbent is never displaced by an equal bid.
            for t in &before {
                if let Some(b) = e.bid_of(t) {
                    let strictly_better = bids.iter().filter(|o| o.rate > b.rate).count();
                    if strictly_better < k {
                        prop_assert!(e.is_entitled(t), "{} displaced without being outbid", t);
                    }
                }
            }
            // The quote a tenant sees ignores its own bid.
            for b in bids {
                let others: Vec<Rate> = bids.iter().filter(|o| o.tenant != b.tenant).map(|o| o.rate).collect();
                let mut sorted = others.clone();
                sorted.sort_by(|a, b| b.cmp(a));
                let want = if sorted.len() < k { base } else { sorted[k - 1].saturating_add(Rate::DEFAULT_TICK).max(base) };
                prop_assert_eq!(e.quote_for(&b.tenant, Rate::DEFAULT_TICK), want);
            }
        }
    }
}

fn variant() -> impl Strategy<Value = (u64, &'static str, &'static str, &'static str, bool, u64)> {
    (
        0u64..20,
        prop::sample::select(vec!["0.1", "0.2", "0.25", "0.5"]),
        prop::sample::select(vec!["static", "break-even", "checkpoint-aware"]),
        prop::sample::select(vec!["static", "break-even", "checkpoint-aware"]),
        any::<bool>(),
        0u64..60,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scenario_variations_conserve_and_settle((arrival, interval, sa, sb, live, grace) in variant()) {
        let mut s = bundled("laissez").unwrap();
        for t in &mut s.tenants {
            let a = t.id.as_str() == "A";
            t.strategy = if a { sa } else { sb }.into();
            if a {
                t.arrival = SimTime::ZERO + SimDuration::from_mins(arrival);
            } else {
                t.profile = WorkloadProfile::new(
                    t.profile.exec_times().clone(),
                    Progress::parse(interval).unwrap(),
                    Money::parse_dollars("0.0253").unwrap(),
                    SimDuration::from_secs(5),
                )
                .unwrap();
            }
            if live {
                t.migration.mode = MigrationMode::LiveOverlap;
            }
        }
        s.engine.grace_window = SimDuration::from_secs(grace);

        let reparsed = parse_scenario(&s.to_toml()).unwrap();
        prop_assert_eq!(&reparsed, &s);
        prop_assert_eq!(reparsed.fingerprint(), s.fingerprint());

        let out = run(&s, Some(SimTime::ZERO + SimDuration::from_mins(24 * 60))).unwrap();
        prop_assert_eq!(out.status, RunStatus::Quiescent);
        prop_assert!(out.tenants.iter().all(|t| t.phase == Phase::Completed));
        let sum: Money = out.ledger.entries().iter().map(|e| e.cost).sum();
        prop_assert_eq!(sum, out.ledger.revenue());
        prop_assert_eq!(&rebuild_totals(&out.trace.records), out.ledger.totals());
        for fmt in [TraceFormat::Csv, TraceFormat::Jsonl] {
            let text = trace_to_string(&out.trace, fmt);
            let back = parse_trace(text.as_bytes()).unwrap();
            prop_assert_eq!(&back, &out.trace);
        }
    }
}
