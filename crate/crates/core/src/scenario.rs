//! Declarative scenarios: a cluster, a set of tenants and engine settings.
//!
//! Files are TOML with `schema_version = 1`. Money, rates and fractions may
//! be written as strings (`"0.606"`) or numbers; numbers go through their
//! shortest decimal form so `0.606` is exactly 606000 micro-dollars.
//! Durations carry a unit: `"250ms"`, `"5s"`, `"5m"`, `"1h"`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{MigrationMode, MigrationPolicy, NaiveTarget, StrategyRegistry};
use crate::model::{
    validate_launch_table, AccelId, AcceleratorType, FunctionalCluster, LaunchTable, ModelError,
    TenantId, WorkloadProfile,
};
use crate::scheduler::QueueDiscipline;
use crate::units::{DecimalError, Money, Progress, Rate, SimDuration, SimTime};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineConfig {
    /// Period of the unconditional agent wake-up.
    pub agent_wake_period: SimDuration,
    pub price_sweep_period: SimDuration,
    /// Delay between a price change and the billed rate following it.
    pub grace_window: SimDuration,
    pub rate_tick: Rate,
    pub seed: u64,
    pub naive_operator: NaiveTarget,
    pub queue: QueueDiscipline,
    /// Bound on consecutive rebids an agent may issue within one wake.
    pub max_decisions_per_wake: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            agent_wake_period: SimDuration::from_secs(10),
            price_sweep_period: SimDuration::from_secs(1),
            grace_window: SimDuration::ZERO,
            rate_tick: Rate::DEFAULT_TICK,
            seed: 0,
            naive_operator: NaiveTarget::Off,
            queue: QueueDiscipline::Strict,
            max_decisions_per_wake: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TenantSpec {
    pub id: TenantId,
    pub arrival: SimTime,
    pub payload: String,
    pub launch_table: LaunchTable,
    pub profile: WorkloadProfile,
    pub strategy: String,
    /// `load_delay` mirrors the profile's.
    pub migration: MigrationPolicy,
    pub timeout: SimDuration,
    pub resume_from: Progress,
    /// Tenant withdraws its pending request at this time, if still queued.
    pub cancel_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub cluster: FunctionalCluster,
    pub tenants: Vec<TenantSpec>,
    pub engine: EngineConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SemanticError {
    #[error("unsupported schema version {0} (expected {SCENARIO_SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error(transparent)]
    Decimal(#[from] DecimalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("unknown migration policy `{0}`")]
    UnknownPolicy(String),
    #[error("unknown value `{value}` (expected one of {expected})")]
    UnknownValue { value: String, expected: &'static str },
    #[error("duplicate tenant id `{0}`")]
    DuplicateTenant(TenantId),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {error}")]
    Semantic { path: String, error: SemanticError },
}

impl ScenarioError {
    fn at(path: impl Into<String>, error: impl Into<SemanticError>) -> Self {
        ScenarioError::Semantic {
            path: path.into(),
            error: error.into(),
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            ScenarioError::Semantic { path, .. } => Some(path),
            ScenarioError::Syntax { .. } => None,
        }
    }
}

/// Every problem found in one scenario document.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ScenarioErrors(pub Vec<ScenarioError>);

impl fmt::Display for ScenarioErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

/// A decimal quantity written either as a string or as a TOML number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Number {
    Text(String),
    Int(i64),
    Float(f64),
}

impl Number {
    fn text(&self) -> String {
        match self {
            Number::Text(s) => s.trim().to_string(),
            Number::Int(i) => i.to_string(),
            Number::Float(f) => f.to_string(),
        }
    }
}

impl From<String> for Number {
    fn from(s: String) -> Self {
        Number::Text(s)
    }
}

fn trim_decimal(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub cluster: ClusterSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub tenants: Vec<TenantSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    #[serde(default = "default_cluster_id")]
    pub id: String,
    #[serde(default)]
    pub function: String,
    pub accelerators: Vec<AcceleratorSection>,
}

fn default_cluster_id() -> String {
    "cluster".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceleratorSection {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub base_rate: Number,
    pub count: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantSection {
    pub id: String,
    pub arrival: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub payload: String,
    pub strategy: String,
    #[serde(default = "default_migration")]
    pub migration: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_cost: Option<Number>,
    pub timeout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume_from: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancel_at: Option<String>,
    pub launch_table: Vec<LaunchSection>,
    pub profile: ProfileSection,
}

fn default_migration() -> String {
    MigrationMode::CheckpointStore.id().into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchSection {
    pub accel: String,
    pub max_bid: Number,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub checkpoint_interval: Number,
    #[serde(default = "zero")]
    pub restart_surcharge: Number,
    pub load_delay: String,
    /// Total execution hours per compatible type.
    pub hours: BTreeMap<String, Number>,
}

fn zero() -> Number {
    Number::Text("0".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub agent_wake_period: String,
    pub price_sweep_period: String,
    pub grace_window: String,
    pub rate_tick: Number,
    pub seed: u64,
    pub naive_operator: String,
    pub queue: String,
    pub max_decisions_per_wake: u32,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection::from(&EngineConfig::default())
    }
}

fn naive_id(t: NaiveTarget) -> &'static str {
    match t {
        NaiveTarget::Off => "off",
        NaiveTarget::Preferred => "preferred",
        NaiveTarget::Faster => "faster",
    }
}

fn queue_id(q: QueueDiscipline) -> &'static str {
    match q {
        QueueDiscipline::Strict => "strict",
        QueueDiscipline::SkipBlocked => "skip-blocked",
    }
}

impl From<&EngineConfig> for EngineSection {
    fn from(c: &EngineConfig) -> Self {
        EngineSection {
            agent_wake_period: c.agent_wake_period.to_unit_string(),
            price_sweep_period: c.price_sweep_period.to_unit_string(),
            grace_window: c.grace_window.to_unit_string(),
            rate_tick: Number::Text(trim_decimal(c.rate_tick.to_decimal_string())),
            seed: c.seed,
            naive_operator: naive_id(c.naive_operator).into(),
            queue: queue_id(c.queue).into(),
            max_decisions_per_wake: c.max_decisions_per_wake,
        }
    }
}

/// Collects errors while walking a [`ScenarioFile`].
struct Checker {
    errors: Vec<ScenarioError>,
}

impl Checker {
    fn ok<T, E: Into<SemanticError>>(&mut self, path: impl Into<String>, r: Result<T, E>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(ScenarioError::at(path, e));
                None
            }
        }
    }

    fn fail(&mut self, path: impl Into<String>, e: impl Into<SemanticError>) {
        self.errors.push(ScenarioError::at(path, e));
    }
}

fn money(n: &Number) -> Result<Money, DecimalError> {
    Money::parse_dollars(&n.text())
}

fn rate(n: &Number) -> Result<Rate, DecimalError> {
    Rate::parse_dollars_per_hour(&n.text())
}

impl ScenarioFile {
    /// Resolves every reference and converts to a validated [`Scenario`].
    pub fn resolve(&self, registry: &StrategyRegistry) -> Result<Scenario, ScenarioErrors> {
        let mut c = Checker { errors: Vec::new() };
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            c.fail("schema_version", SemanticError::SchemaVersion(self.schema_version));
        }
        let engine = self.resolve_engine(&mut c);
        let cluster = self.resolve_cluster(&mut c);
        let mut tenants = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, t) in self.tenants.iter().enumerate() {
            let path = format!("tenants[{i}]");
            if !seen.insert(t.id.clone()) {
                c.fail(format!("{path}.id"), SemanticError::DuplicateTenant(t.id.as_str().into()));
            }
            if let Some(spec) = resolve_tenant(t, &path, cluster.as_ref(), registry, &mut c) {
                tenants.push(spec);
            }
        }
        match (cluster, engine) {
            (Some(cluster), Some(engine)) if c.errors.is_empty() => Ok(Scenario {
                name: self.name.clone(),
                description: self.description.clone(),
                cluster,
                tenants,
                engine,
            }),
            _ => Err(ScenarioErrors(c.errors)),
        }
    }

    fn resolve_engine(&self, c: &mut Checker) -> Option<EngineConfig> {
        let e = &self.engine;
        let dur = |c: &mut Checker, field: &str, v: &str| {
            c.ok(format!("engine.{field}"), SimDuration::parse(v))
        };
        let wake = dur(c, "agent_wake_period", &e.agent_wake_period);
        let sweep = dur(c, "price_sweep_period", &e.price_sweep_period);
        let grace = dur(c, "grace_window", &e.grace_window);
        let tick = c.ok("engine.rate_tick", rate(&e.rate_tick));
        for (field, d) in [("agent_wake_period", wake), ("price_sweep_period", sweep)] {
            if d == Some(SimDuration::ZERO) {
                c.fail(format!("engine.{field}"), SemanticError::Invalid("period must be positive".into()));
            }
        }
        if tick == Some(Rate::ZERO) {
            c.fail("engine.rate_tick", SemanticError::Invalid("tick must be positive".into()));
        }
        let naive = match e.naive_operator.as_str() {
            "off" => Some(NaiveTarget::Off),
            "preferred" => Some(NaiveTarget::Preferred),
            "faster" => Some(NaiveTarget::Faster),
            other => {
                c.fail(
                    "engine.naive_operator",
                    SemanticError::UnknownValue {
                        value: other.into(),
                        expected: "off, preferred, faster",
                    },
                );
                None
            }
        };
        let queue = match e.queue.as_str() {
            "strict" => Some(QueueDiscipline::Strict),
            "skip-blocked" => Some(QueueDiscipline::SkipBlocked),
            other => {
                c.fail(
                    "engine.queue",
                    SemanticError::UnknownValue {
                        value: other.into(),
                        expected: "strict, skip-blocked",
                    },
                );
                None
            }
        };
        if e.max_decisions_per_wake == 0 {
            c.fail(
                "engine.max_decisions_per_wake",
                SemanticError::Invalid("must be at least 1".into()),
            );
        }
        Some(EngineConfig {
            agent_wake_period: wake?,
            price_sweep_period: sweep?,
            grace_window: grace?,
            rate_tick: tick?,
            seed: e.seed,
            naive_operator: naive?,
            queue: queue?,
            max_decisions_per_wake: e.max_decisions_per_wake,
        })
    }

    fn resolve_cluster(&self, c: &mut Checker) -> Option<FunctionalCluster> {
        let mut types = Vec::new();
        let mut ok = true;
        for (i, a) in self.cluster.accelerators.iter().enumerate() {
            let path = format!("cluster.accelerators[{i}]");
            let base = c.ok(format!("{path}.base_rate"), rate(&a.base_rate));
            let count = if a.count < 0 {
                c.fail(
                    format!("{path}.count"),
                    DecimalError::Negative(a.count.to_string()),
                );
                None
            } else {
                c.ok(
                    format!("{path}.count"),
                    u32::try_from(a.count).map_err(|_| DecimalError::Overflow(a.count.to_string())),
                )
            };
            match (base, count) {
                (Some(base_rate), Some(instance_count)) => types.push(AcceleratorType {
                    id: AccelId::new(a.id.clone()),
                    name: a.name.clone().unwrap_or_else(|| a.id.clone()),
                    base_rate,
                    instance_count,
                }),
                _ => ok = false,
            }
        }
        let cluster = c.ok(
            "cluster",
            FunctionalCluster::new(self.cluster.id.clone(), self.cluster.function.clone(), types),
        );
        cluster.filter(|_| ok)
    }
}

fn resolve_tenant(
    t: &TenantSection,
    path: &str,
    cluster: Option<&FunctionalCluster>,
    registry: &StrategyRegistry,
    c: &mut Checker,
) -> Option<TenantSpec> {
    let arrival = c.ok(format!("{path}.arrival"), SimDuration::parse(&t.arrival));
    let timeout = c.ok(format!("{path}.timeout"), SimDuration::parse(&t.timeout));
    if timeout == Some(SimDuration::ZERO) {
        c.fail(format!("{path}.timeout"), SemanticError::Invalid("timeout must be positive".into()));
    }
    let cancel_at = match &t.cancel_at {
        None => Some(None),
        Some(s) => c.ok(format!("{path}.cancel_at"), SimDuration::parse(s)).map(Some),
    };
    if !registry.contains(&t.strategy) {
        c.fail(format!("{path}.strategy"), SemanticError::UnknownStrategy(t.strategy.clone()));
    }
    let mode = match MigrationMode::from_id(&t.migration) {
        Ok(m) => Some(m),
        Err(_) => {
            c.fail(format!("{path}.migration"), SemanticError::UnknownPolicy(t.migration.clone()));
            None
        }
    };
    let transfer_cost = match &t.transfer_cost {
        None => Some(Money::ZERO),
        Some(n) => c.ok(format!("{path}.transfer_cost"), money(n)),
    };
    let resume_from = match &t.resume_from {
        None => Some(Progress::ZERO),
        Some(n) => c.ok(format!("{path}.resume_from"), Progress::parse(&n.text())),
    };

    let p = &t.profile;
    let ppath = format!("{path}.profile");
    let mut hours = BTreeMap::new();
    for (accel, h) in &p.hours {
        let field = format!("{ppath}.hours.{accel}");
        if let Some(d) = c.ok(field.clone(), SimDuration::parse_hours(&h.text())) {
            if let Some(cl) = cluster {
                if cl.accel(&AccelId::new(accel.clone())).is_none() {
                    c.fail(field, ModelError::UnknownHardware(AccelId::new(accel.clone())));
                    continue;
                }
            }
            hours.insert(AccelId::new(accel.clone()), d);
        }
    }
    let interval = c.ok(format!("{ppath}.checkpoint_interval"), Progress::parse(&p.checkpoint_interval.text()));
    let surcharge = c.ok(format!("{ppath}.restart_surcharge"), money(&p.restart_surcharge));
    let load_delay = c.ok(format!("{ppath}.load_delay"), SimDuration::parse(&p.load_delay));
    let profile = match (interval, surcharge, load_delay) {
        (Some(i), Some(s), Some(l)) if hours.len() == p.hours.len() => {
            c.ok(ppath.clone(), WorkloadProfile::new(hours, i, s, l))
        }
        _ => None,
    };

    let mut entries = Vec::new();
    for (j, e) in t.launch_table.iter().enumerate() {
        let epath = format!("{path}.launch_table[{j}]");
        let accel = AccelId::new(e.accel.clone());
        if let Some(cl) = cluster {
            if cl.accel(&accel).is_none() {
                c.fail(format!("{epath}.accel"), ModelError::UnknownHardware(accel.clone()));
            }
        }
        if let Some(pr) = &profile {
            if cluster.is_some_and(|cl| cl.accel(&accel).is_some()) && !pr.is_compatible(&accel) {
                c.fail(format!("{epath}.accel"), ModelError::IncompatibleHardware(accel.clone()));
            }
        }
        if entries.iter().any(|(a, _)| a == &accel) {
            c.fail(format!("{epath}.accel"), ModelError::DuplicateEntry(accel.clone()));
        }
        if let Some(bid) = c.ok(format!("{epath}.max_bid"), rate(&e.max_bid)) {
            entries.push((accel, bid));
        }
    }
    let table = LaunchTable::new(entries);
    if t.launch_table.is_empty() {
        c.fail(format!("{path}.launch_table"), ModelError::EmptyLaunchTable);
    }
    if let (Some(rf), Some(pr)) = (resume_from, &profile) {
        if !pr.is_checkpoint_boundary(rf) {
            c.fail(
                format!("{path}.resume_from"),
                SemanticError::Invalid(format!(
                    "{} is not a checkpoint boundary",
                    rf.to_decimal_string()
                )),
            );
        }
        if rf.is_complete() {
            c.fail(format!("{path}.resume_from"), ModelError::CompletedWorkload);
        }
    }
    let (cluster, profile) = (cluster?, profile?);
    // Per-entry checks above already reported; this only guards the result.
    validate_launch_table(&table, cluster, &profile).ok()?;
    let arrival = SimTime::ZERO + arrival?;
    Some(TenantSpec {
        id: TenantId::new(t.id.clone()),
        arrival,
        payload: t.payload.clone(),
        launch_table: table,
        migration: MigrationPolicy {
            mode: mode?,
            load_delay: profile.load_delay,
            transfer_cost: transfer_cost?,
        },
        profile,
        strategy: t.strategy.clone(),
        timeout: timeout?,
        resume_from: resume_from?,
        cancel_at: cancel_at?.map(|d| SimTime::ZERO + d),
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parses the document syntax only.
pub fn parse_scenario_file(text: &str) -> Result<ScenarioFile, ScenarioErrors> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ScenarioErrors(vec![ScenarioError::Syntax {
            line,
            column,
            message: e.message().to_string(),
        }])
    })
}

/// Parses and validates against the built-in strategies.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioErrors> {
    parse_scenario_with(text, &StrategyRegistry::default())
}

pub fn parse_scenario_with(text: &str, registry: &StrategyRegistry) -> Result<Scenario, ScenarioErrors> {
    parse_scenario_file(text)?.resolve(registry)
}

impl Scenario {
    /// Canonical file form; parsing it yields an equal scenario.
    pub fn to_file(&self) -> ScenarioFile {
        let dec = |s: String| Number::Text(trim_decimal(s));
        ScenarioFile {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: self.name.clone(),
            description: self.description.clone(),
            cluster: ClusterSection {
                id: self.cluster.id.clone(),
                function: self.cluster.function.clone(),
                accelerators: self
                    .cluster
                    .types()
                    .iter()
                    .map(|t| AcceleratorSection {
                        id: t.id.to_string(),
                        name: (t.name != t.id.as_str()).then(|| t.name.clone()),
                        base_rate: dec(t.base_rate.to_decimal_string()),
                        count: i64::from(t.instance_count),
                    })
                    .collect(),
            },
            engine: EngineSection::from(&self.engine),
            tenants: self
                .tenants
                .iter()
                .map(|t| TenantSection {
                    id: t.id.to_string(),
                    arrival: (t.arrival - SimTime::ZERO).to_unit_string(),
                    payload: t.payload.clone(),
                    strategy: t.strategy.clone(),
                    migration: t.migration.mode.id().into(),
                    transfer_cost: (t.migration.transfer_cost != Money::ZERO)
                        .then(|| dec(t.migration.transfer_cost.to_decimal_string())),
                    timeout: t.timeout.to_unit_string(),
                    resume_from: (t.resume_from != Progress::ZERO)
                        .then(|| dec(t.resume_from.to_decimal_string())),
                    cancel_at: t.cancel_at.map(|c| (c - SimTime::ZERO).to_unit_string()),
                    launch_table: t
                        .launch_table
                        .entries
                        .iter()
                        .map(|e| LaunchSection {
                            accel: e.accel.to_string(),
                            max_bid: dec(e.max_bid.to_decimal_string()),
                        })
                        .collect(),
                    profile: ProfileSection {
                        checkpoint_interval: dec(t.profile.checkpoint_interval.to_decimal_string()),
                        restart_surcharge: dec(t.profile.restart_surcharge.to_decimal_string()),
                        load_delay: t.profile.load_delay.to_unit_string(),
                        hours: t
                            .profile
                            .exec_times()
                            .iter()
                            .map(|(a, d)| (a.to_string(), hours_text(*d)))
                            .collect(),
                    },
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("scenario files always serialize")
    }

    /// Hex SHA-256 of the canonical form.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn tenant(&self, id: &str) -> Option<&TenantSpec> {
        self.tenants.iter().find(|t| t.id.as_str() == id)
    }
}

/// Hours as an exact decimal: milliseconds / 3.6e6 has at most 7 digits.
fn hours_text(d: SimDuration) -> Number {
    let ms = d.millis();
    let whole = ms / crate::units::MS_PER_HOUR;
    let frac = ms % crate::units::MS_PER_HOUR;
    // Whole milliseconds are whole ten-millionths of an hour only when divisible.
    let scaled = u128::from(frac) * 10_000_000;
    let text = if scaled % u128::from(crate::units::MS_PER_HOUR) == 0 {
        format!("{whole}.{:07}", scaled / u128::from(crate::units::MS_PER_HOUR))
    } else {
        // Shortest f64 text re-parses to the same millisecond.
        return Number::Text(format!("{}", d.as_hours_f64()));
    };
    Number::Text(trim_decimal(text))
}

pub const BUNDLED: [(&str, &str); 4] = [
    ("static-first-come", include_str!("../scenarios/static-first-come.scenario")),
    ("static-b-first", include_str!("../scenarios/static-b-first.scenario")),
    ("naive-migration", include_str!("../scenarios/naive-migration.scenario")),
    ("laissez", include_str!("../scenarios/laissez.scenario")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub fn bundled_text(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Loads a bundled scenario by name.
pub fn bundled(name: &str) -> Option<Scenario> {
    bundled_text(name).map(|t| parse_scenario(t).expect("bundled scenarios are valid"))
}
