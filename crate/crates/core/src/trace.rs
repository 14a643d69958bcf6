//! Trace records and their CSV / JSON-lines encodings.
//!
//! A trace is a header (scenario fingerprint, seed, cluster shape) followed by
//! one record per observable event. Money and rates are written as decimal
//! strings with six fractional digits so files can be re-read without loss.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AccelId, InstanceRef, TenantId};
use crate::units::{DecimalError, Money, Progress, Rate, SimTime};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 8] = [
    "time_ms",
    "event",
    "tenant",
    "accel",
    "instance",
    "rate_usd_per_hr",
    "progress",
    "cumulative_cost_usd",
];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl From<DecimalError> for TraceError {
    fn from(e: DecimalError) -> Self {
        TraceError::Parse {
            line: 0,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    RequestArrival,
    BidPosted,
    BidUpdated,
    BidExpired,
    PriceChange,
    MigrationRequested,
    MigrationDepart,
    Rollback,
    Assignment,
    LoadComplete,
    RateChange,
    CheckpointReached,
    MigrationComplete,
    Release,
    WorkloadComplete,
    Timeout,
    Cancel,
    Terminate,
    HorizonClose,
}

impl TraceEvent {
    pub const ALL: [TraceEvent; 19] = [
        TraceEvent::RequestArrival,
        TraceEvent::BidPosted,
        TraceEvent::BidUpdated,
        TraceEvent::BidExpired,
        TraceEvent::PriceChange,
        TraceEvent::MigrationRequested,
        TraceEvent::MigrationDepart,
        TraceEvent::Rollback,
        TraceEvent::Assignment,
        TraceEvent::LoadComplete,
        TraceEvent::RateChange,
        TraceEvent::CheckpointReached,
        TraceEvent::MigrationComplete,
        TraceEvent::Release,
        TraceEvent::WorkloadComplete,
        TraceEvent::Timeout,
        TraceEvent::Cancel,
        TraceEvent::Terminate,
        TraceEvent::HorizonClose,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TraceEvent::RequestArrival => "request_arrival",
            TraceEvent::BidPosted => "bid_posted",
            TraceEvent::BidUpdated => "bid_updated",
            TraceEvent::BidExpired => "bid_expired",
            TraceEvent::PriceChange => "price_change",
            TraceEvent::MigrationRequested => "migration_requested",
            TraceEvent::MigrationDepart => "migration_depart",
            TraceEvent::Rollback => "rollback",
            TraceEvent::Assignment => "assignment",
            TraceEvent::LoadComplete => "load_complete",
            TraceEvent::RateChange => "rate_change",
            TraceEvent::CheckpointReached => "checkpoint_reached",
            TraceEvent::MigrationComplete => "migration_complete",
            TraceEvent::Release => "release",
            TraceEvent::WorkloadComplete => "workload_complete",
            TraceEvent::Timeout => "timeout",
            TraceEvent::Cancel => "cancel",
            TraceEvent::Terminate => "terminate",
            TraceEvent::HorizonClose => "horizon_close",
        }
    }

    /// Starts (or restarts at a new rate) a billed interval on an instance.
    pub fn opens_interval(self) -> bool {
        matches!(
            self,
            TraceEvent::Assignment
                | TraceEvent::LoadComplete
                | TraceEvent::RateChange
                | TraceEvent::MigrationComplete
        )
    }

    /// Ends a billed interval on an instance.
    pub fn closes_interval(self) -> bool {
        matches!(self, TraceEvent::Release | TraceEvent::HorizonClose)
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TraceEvent {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TraceEvent::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown trace event `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: SimTime,
    pub event: TraceEvent,
    pub tenant: Option<TenantId>,
    pub accel: Option<AccelId>,
    pub instance: Option<u32>,
    pub rate: Option<Rate>,
    pub progress: Option<Progress>,
    /// Tenant's billed total at this point.
    pub cumulative_cost: Option<Money>,
}

impl TraceRecord {
    pub fn new(time: SimTime, event: TraceEvent) -> Self {
        TraceRecord {
            time,
            event,
            tenant: None,
            accel: None,
            instance: None,
            rate: None,
            progress: None,
            cumulative_cost: None,
        }
    }

    pub fn tenant(mut self, t: &TenantId) -> Self {
        self.tenant = Some(t.clone());
        self
    }

    pub fn accel(mut self, a: &AccelId) -> Self {
        self.accel = Some(a.clone());
        self
    }

    pub fn on(mut self, i: &InstanceRef) -> Self {
        self.accel = Some(i.accel.clone());
        self.instance = Some(i.index);
        self
    }

    pub fn rate(mut self, r: Rate) -> Self {
        self.rate = Some(r);
        self
    }

    pub fn progress(mut self, p: Progress) -> Self {
        self.progress = Some(p);
        self
    }

    pub fn cost(mut self, m: Money) -> Self {
        self.cumulative_cost = Some(m);
        self
    }

    pub fn instance_ref(&self) -> Option<InstanceRef> {
        Some(InstanceRef {
            accel: self.accel.clone()?,
            index: self.instance?,
        })
    }

    pub fn is_for(&self, tenant: &str) -> bool {
        self.tenant.as_ref().is_some_and(|t| t.as_str() == tenant)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: u32,
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    /// Instance count per accelerator type, in cluster order.
    pub cluster: Vec<(AccelId, u32)>,
}

impl TraceHeader {
    fn comment(&self) -> String {
        let cluster = self
            .cluster
            .iter()
            .map(|(a, n)| format!("{a}:{n}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "# laissez-trace schema={} scenario={} hash={} seed={} cluster={}",
            self.schema, self.scenario, self.scenario_hash, self.seed, cluster
        )
    }

    fn parse_comment(line: &str) -> Result<Self, String> {
        let body = line
            .strip_prefix("# laissez-trace")
            .ok_or("missing `# laissez-trace` header")?;
        let fields: BTreeMap<&str, &str> = body
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let get = |k: &str| fields.get(k).copied().ok_or(format!("header lacks `{k}`"));
        let cluster = get("cluster")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (a, n) = s.split_once(':').ok_or(format!("bad cluster item `{s}`"))?;
                Ok((AccelId::new(a), n.parse().map_err(|_| format!("bad count `{n}`"))?))
            })
            .collect::<Result<_, String>>()?;
        Ok(TraceHeader {
            schema: get("schema")?.parse().map_err(|_| "bad schema".to_string())?,
            scenario: get("scenario")?.to_string(),
            scenario_hash: get("hash")?.to_string(),
            seed: get("seed")?.parse().map_err(|_| "bad seed".to_string())?,
            cluster,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

impl FromStr for TraceFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "jsonl" | "json-lines" => Ok(TraceFormat::Jsonl),
            other => Err(format!("unknown trace format `{other}`")),
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn row(r: &TraceRecord) -> [String; 8] {
    [
        r.time.millis().to_string(),
        r.event.as_str().to_string(),
        opt(&r.tenant),
        opt(&r.accel),
        opt(&r.instance),
        r.rate.map(Rate::to_decimal_string).unwrap_or_default(),
        r.progress.map(Progress::to_decimal_string).unwrap_or_default(),
        r.cumulative_cost.map(Money::to_decimal_string).unwrap_or_default(),
    ]
}

/// JSON-lines shape: every field is a string or null.
#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    time_ms: u64,
    event: String,
    tenant: Option<String>,
    accel: Option<String>,
    instance: Option<u32>,
    rate_usd_per_hr: Option<String>,
    progress: Option<String>,
    cumulative_cost_usd: Option<String>,
}

pub fn emit_trace(trace: &Trace, format: TraceFormat, out: &mut impl Write) -> Result<(), TraceError> {
    match format {
        TraceFormat::Csv => {
            writeln!(out, "{}", trace.header.comment())?;
            let mut w = csv::WriterBuilder::new().from_writer(&mut *out);
            w.write_record(CSV_COLUMNS)?;
            for r in &trace.records {
                w.write_record(row(r))?;
            }
            w.flush()?;
        }
        TraceFormat::Jsonl => {
            serde_json::to_writer(&mut *out, &trace.header)?;
            writeln!(out)?;
            for r in &trace.records {
                let [_, _, _, _, _, rate, progress, cost] = row(r);
                let none_if_empty = |s: String| (!s.is_empty()).then_some(s);
                let j = JsonRecord {
                    time_ms: r.time.millis(),
                    event: r.event.as_str().to_string(),
                    tenant: r.tenant.as_ref().map(|t| t.to_string()),
                    accel: r.accel.as_ref().map(|a| a.to_string()),
                    instance: r.instance,
                    rate_usd_per_hr: none_if_empty(rate),
                    progress: none_if_empty(progress),
                    cumulative_cost_usd: none_if_empty(cost),
                };
                serde_json::to_writer(&mut *out, &j)?;
                writeln!(out)?;
            }
        }
    }
    Ok(())
}

pub fn trace_to_string(trace: &Trace, format: TraceFormat) -> String {
    let mut buf = Vec::new();
    emit_trace(trace, format, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("trace output is utf-8")
}

#[allow(clippy::too_many_arguments)]
fn parse_fields(
    line: usize,
    time: &str,
    event: &str,
    tenant: &str,
    accel: &str,
    instance: &str,
    rate: &str,
    progress: &str,
    cost: &str,
) -> Result<TraceRecord, TraceError> {
    let err = |message: String| TraceError::Parse { line, message };
    let nonempty = |s: &str| (!s.is_empty()).then(|| s.to_string());
    Ok(TraceRecord {
        time: SimTime::from_millis(time.parse().map_err(|_| err(format!("bad time `{time}`")))?),
        event: event.parse().map_err(err)?,
        tenant: nonempty(tenant).map(TenantId::new),
        accel: nonempty(accel).map(AccelId::new),
        instance: match instance {
            "" => None,
            s => Some(s.parse().map_err(|_| err(format!("bad instance `{s}`")))?),
        },
        rate: match rate {
            "" => None,
            s => Some(Rate::parse_dollars_per_hour(s).map_err(|e| err(e.to_string()))?),
        },
        progress: match progress {
            "" => None,
            s => Some(Progress::parse(s).map_err(|e| err(e.to_string()))?),
        },
        cumulative_cost: match cost {
            "" => None,
            s => Some(Money::parse_dollars(s).map_err(|e| err(e.to_string()))?),
        },
    })
}

/// Reads a trace written by [`emit_trace`], detecting the format.
pub fn parse_trace(input: impl BufRead) -> Result<Trace, TraceError> {
    let mut lines = input.lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    if first.starts_with('{') {
        let header: TraceHeader = serde_json::from_str(&first)?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let j: JsonRecord = serde_json::from_str(&line)?;
            let s = |o: &Option<String>| o.clone().unwrap_or_default();
            records.push(parse_fields(
                i + 2,
                &j.time_ms.to_string(),
                &j.event,
                &s(&j.tenant),
                &s(&j.accel),
                &j.instance.map(|n| n.to_string()).unwrap_or_default(),
                &s(&j.rate_usd_per_hr),
                &s(&j.progress),
                &s(&j.cumulative_cost_usd),
            )?);
        }
        return Ok(Trace { header, records });
    }
    let header = TraceHeader::parse_comment(&first).map_err(|message| TraceError::Parse { line: 1, message })?;
    let rest: String = lines.collect::<Result<Vec<_>, _>>()?.join("\n");
    let mut reader = csv::ReaderBuilder::new().from_reader(rest.as_bytes());
    let columns = reader.headers()?.clone();
    if columns.iter().ne(CSV_COLUMNS) {
        return Err(TraceError::Parse {
            line: 2,
            message: format!("unexpected columns {:?}", columns.iter().collect::<Vec<_>>()),
        });
    }
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let f = |k: usize| rec.get(k).unwrap_or("");
        records.push(parse_fields(i + 3, f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7))?);
    }
    Ok(Trace { header, records })
}

/// One billed interval rebuilt from trace records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RebuiltInterval {
    pub tenant: TenantId,
    pub instance: InstanceRef,
    pub rate: Rate,
    pub start: SimTime,
    pub end: SimTime,
}

impl RebuiltInterval {
    pub fn cost(&self) -> Money {
        self.rate.cost_over(self.end - self.start)
    }
}

/// Replays the interval-opening and -closing records of a trace.
pub fn rebuild_intervals(records: &[TraceRecord]) -> Vec<RebuiltInterval> {
    let mut open: BTreeMap<(TenantId, InstanceRef), (Rate, SimTime)> = BTreeMap::new();
    let mut out = Vec::new();
    for r in records {
        let (Some(tenant), Some(instance)) = (&r.tenant, r.instance_ref()) else {
            continue;
        };
        let key = (tenant.clone(), instance.clone());
        if r.event.opens_interval() || r.event.closes_interval() {
            if let Some((rate, start)) = open.remove(&key) {
                out.push(RebuiltInterval {
                    tenant: tenant.clone(),
                    instance: instance.clone(),
                    rate,
                    start,
                    end: r.time,
                });
            }
        }
        if r.event.opens_interval() {
            if let Some(rate) = r.rate {
                open.insert(key, (rate, r.time));
            }
        }
    }
    out
}

/// Per-tenant totals recomputed from the trace alone.
pub fn rebuild_totals(records: &[TraceRecord]) -> BTreeMap<TenantId, Money> {
    let mut totals: BTreeMap<TenantId, Money> = BTreeMap::new();
    for i in rebuild_intervals(records) {
        *totals.entry(i.tenant.clone()).or_default() += i.cost();
    }
    totals
}
