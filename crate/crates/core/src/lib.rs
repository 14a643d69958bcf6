//! Deterministic simulator of a market-allocated heterogeneous accelerator
//! cluster: tenants bid for hardware classes through launch tables, an
//! exchange clears each class at a uniform second-price rate, and tenant
//! agents rebid or migrate as prices move. Billing is exact to the
//! micro-dollar and every run is reproducible from its trace.

pub mod agents;
pub mod engine;
pub mod exchange;
pub mod model;
pub mod report;
pub mod scenario;
pub mod scheduler;
pub mod trace;
pub mod units;

pub use engine::{run, run_with, BillingLedger, EngineError, RunOutput, RunStatus};
pub use scenario::{bundled, parse_scenario, Scenario};
pub use units::{Money, Progress, Rate, SimDuration, SimTime};
