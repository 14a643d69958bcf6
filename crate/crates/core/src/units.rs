//! Exact integer units: money in micro-dollars, rates in micro-dollars per
//! hour, simulated time in milliseconds and workload progress in parts per
//! billion.
//!
//! Nothing in here touches binary floating point on the money path. Decimal
//! text is parsed digit by digit and every conversion that has to round says
//! which way it rounds.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MICROS_PER_DOLLAR: u64 = 1_000_000;
pub const MS_PER_SECOND: u64 = 1_000;
pub const MS_PER_MINUTE: u64 = 60_000;
pub const MS_PER_HOUR: u64 = 3_600_000;
/// Progress resolution: 1.0 of a workload is one billion parts.
pub const PROGRESS_SCALE: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecimalError {
    #[error("empty number")]
    Empty,
    #[error("negative value `{0}` not allowed")]
    Negative(String),
    #[error("malformed decimal `{0}`")]
    Malformed(String),
    #[error("`{0}` has more precision than {1} fractional digits")]
    TooPrecise(String, u32),
    #[error("`{0}` is out of range")]
    Overflow(String),
    #[error("unknown duration unit in `{0}` (expected ms, s, m or h)")]
    UnknownUnit(String),
}

/// A non-negative decimal number as `mantissa / 10^scale`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Decimal {
    mantissa: u128,
    scale: u32,
}

impl Decimal {
    fn parse(text: &str) -> Result<Self, DecimalError> {
        let s = text.trim();
        if s.is_empty() {
            return Err(DecimalError::Empty);
        }
        if s.starts_with('-') {
            return Err(DecimalError::Negative(s.to_string()));
        }
        let s = s.strip_prefix('+').unwrap_or(s);
        let s = s.strip_prefix('$').unwrap_or(s);
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(DecimalError::Malformed(text.to_string()));
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit())
            || !frac_part.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(DecimalError::Malformed(text.to_string()));
        }
        if int_part.len() + frac_part.len() > 30 {
            return Err(DecimalError::Overflow(text.to_string()));
        }
        let mut mantissa: u128 = 0;
        for b in int_part.bytes().chain(frac_part.bytes()) {
            mantissa = mantissa * 10 + u128::from(b - b'0');
        }
        Ok(Decimal {
            mantissa,
            scale: frac_part.len() as u32,
        })
    }

    /// `self * factor`, requiring the result to be an integer.
    fn scale_exact(self, factor: u128, digits: u32, text: &str) -> Result<u64, DecimalError> {
        let num = self.mantissa * factor;
        let den = 10u128.pow(self.scale);
        if !num.is_multiple_of(den) {
            return Err(DecimalError::TooPrecise(text.to_string(), digits));
        }
        u64::try_from(num / den).map_err(|_| DecimalError::Overflow(text.to_string()))
    }

    /// `self * factor`, rounded half-up to an integer.
    fn scale_round(self, factor: u128, text: &str) -> Result<u64, DecimalError> {
        let den = 10u128.pow(self.scale);
        let num = self.mantissa * factor;
        let q = (num + den / 2) / den;
        u64::try_from(q).map_err(|_| DecimalError::Overflow(text.to_string()))
    }
}

fn format_fixed(value: u64, unit: u64, digits: usize) -> String {
    format!("{}.{:0width$}", value / unit, value % unit, width = digits)
}

/// `a * b / c` rounded half-up, in 128-bit intermediate precision.
pub(crate) fn mul_div_round(a: u64, b: u64, c: u64) -> u64 {
    let num = u128::from(a) * u128::from(b);
    let c = u128::from(c);
    ((num + c / 2) / c) as u64
}

/// An amount of money in whole micro-dollars.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Money(u64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_micros(micros: u64) -> Self {
        Money(micros)
    }

    pub const fn micros(self) -> u64 {
        self.0
    }

    /// Parses a dollar amount such as `"0.0253"` exactly.
    pub fn parse_dollars(text: &str) -> Result<Self, DecimalError> {
        let d = Decimal::parse(text)?;
        d.scale_exact(u128::from(MICROS_PER_DOLLAR), 6, text)
            .map(Money)
    }

    /// Dollars with six fractional digits, e.g. `0.241200`.
    pub fn to_decimal_string(self) -> String {
        format_fixed(self.0, MICROS_PER_DOLLAR, 6)
    }

    /// Rounds half-up to whole cents.
    pub fn round_to_cents(self) -> Money {
        Money(mul_div_round(self.0, 1, 10_000) * 10_000)
    }

    pub fn checked_sub(self, other: Money) -> Option<Money> {
        self.0.checked_sub(other.0).map(Money)
    }

    pub fn as_dollars_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_DOLLAR as f64
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}", self.to_decimal_string())
    }
}

/// A price in micro-dollars per hour.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Rate(u64);

impl Rate {
    pub const ZERO: Rate = Rate(0);
    /// One tenth of a cent per hour.
    pub const DEFAULT_TICK: Rate = Rate(1_000);

    pub const fn from_micros_per_hour(micros: u64) -> Self {
        Rate(micros)
    }

    pub const fn micros_per_hour(self) -> u64 {
        self.0
    }

    /// Parses a dollars-per-hour figure such as `"0.6065"` exactly.
    pub fn parse_dollars_per_hour(text: &str) -> Result<Self, DecimalError> {
        let d = Decimal::parse(text)?;
        d.scale_exact(u128::from(MICROS_PER_DOLLAR), 6, text)
            .map(Rate)
    }

    pub fn to_decimal_string(self) -> String {
        format_fixed(self.0, MICROS_PER_DOLLAR, 6)
    }

    /// Money accrued over `duration`, rounded half-up to the micro-dollar.
    pub fn cost_over(self, duration: SimDuration) -> Money {
        Money(mul_div_round(self.0, duration.millis(), MS_PER_HOUR))
    }

    /// Largest multiple of `tick` not above `self`.
    pub fn floor_to_tick(self, tick: Rate) -> Rate {
        if tick.0 == 0 {
            return self;
        }
        Rate(self.0 - self.0 % tick.0)
    }

    pub fn saturating_add(self, other: Rate) -> Rate {
        Rate(self.0.saturating_add(other.0))
    }

    pub fn abs_diff(self, other: Rate) -> Rate {
        Rate(self.0.abs_diff(other.0))
    }

    pub fn as_dollars_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_DOLLAR as f64
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}/hr", self.to_decimal_string())
    }
}

/// A length of simulated time in milliseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimDuration(u64);

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_millis(ms: u64) -> Self {
        SimDuration(ms)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimDuration(s * MS_PER_SECOND)
    }

    pub const fn from_mins(m: u64) -> Self {
        SimDuration(m * MS_PER_MINUTE)
    }

    pub const fn millis(self) -> u64 {
        self.0
    }

    /// Decimal hours (`"0.35"`) to milliseconds, rounded half-up.
    pub fn parse_hours(text: &str) -> Result<Self, DecimalError> {
        let d = Decimal::parse(text)?;
        d.scale_round(u128::from(MS_PER_HOUR), text).map(SimDuration)
    }

    /// Parses `"<decimal><unit>"` with unit one of `ms`, `s`, `m`, `h`.
    pub fn parse(text: &str) -> Result<Self, DecimalError> {
        let s = text.trim();
        let split = s
            .find(|c: char| c.is_ascii_alphabetic())
            .ok_or_else(|| DecimalError::UnknownUnit(text.to_string()))?;
        let (num, unit) = s.split_at(split);
        let factor = match unit {
            "ms" => 1,
            "s" => MS_PER_SECOND,
            "m" | "min" => MS_PER_MINUTE,
            "h" => MS_PER_HOUR,
            _ => return Err(DecimalError::UnknownUnit(text.to_string())),
        };
        let d = Decimal::parse(num)?;
        d.scale_round(u128::from(factor), text).map(SimDuration)
    }

    /// Canonical text form accepted by [`SimDuration::parse`].
    pub fn to_unit_string(self) -> String {
        let ms = self.0;
        if ms != 0 && ms.is_multiple_of(MS_PER_HOUR) {
            format!("{}h", ms / MS_PER_HOUR)
        } else if ms != 0 && ms.is_multiple_of(MS_PER_MINUTE) {
            format!("{}m", ms / MS_PER_MINUTE)
        } else if ms.is_multiple_of(MS_PER_SECOND) {
            format!("{}s", ms / MS_PER_SECOND)
        } else {
            format!("{ms}ms")
        }
    }

    pub fn as_hours_f64(self) -> f64 {
        self.0 as f64 / MS_PER_HOUR as f64
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_unit_string())
    }
}

/// Milliseconds since the start of a scenario.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms)
    }

    pub const fn millis(self) -> u64 {
        self.0
    }

    /// Elapsed time since `earlier`, or `None` if `earlier` is in the future.
    pub fn since(self, earlier: SimTime) -> Option<SimDuration> {
        self.0.checked_sub(earlier.0).map(SimDuration)
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimDuration;
    /// Panics if `rhs` is later than `self`.
    fn sub(self, rhs: SimTime) -> SimDuration {
        SimDuration(
            self.0
                .checked_sub(rhs.0)
                .expect("simulated time subtraction went negative"),
        )
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ms = self.0;
        write!(
            f,
            "{:02}:{:02}:{:02}.{:03}",
            ms / MS_PER_HOUR,
            (ms % MS_PER_HOUR) / MS_PER_MINUTE,
            (ms % MS_PER_MINUTE) / MS_PER_SECOND,
            ms % MS_PER_SECOND
        )
    }
}

/// Fraction of a workload in `[0, 1]`, stored in parts per billion.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Progress(u64);

impl Progress {
    pub const ZERO: Progress = Progress(0);
    pub const ONE: Progress = Progress(PROGRESS_SCALE);

    /// Clamps to `[0, 1]`.
    pub const fn from_ppb(ppb: u64) -> Self {
        if ppb > PROGRESS_SCALE {
            Progress(PROGRESS_SCALE)
        } else {
            Progress(ppb)
        }
    }

    pub const fn ppb(self) -> u64 {
        self.0
    }

    /// Parses a decimal fraction, rounding half-up to the nearest ppb.
    pub fn parse(text: &str) -> Result<Self, DecimalError> {
        let d = Decimal::parse(text)?;
        let ppb = d.scale_round(u128::from(PROGRESS_SCALE), text)?;
        if ppb > PROGRESS_SCALE {
            return Err(DecimalError::Overflow(text.to_string()));
        }
        Ok(Progress(ppb))
    }

    /// Goes through the shortest round-trip decimal form of `value`, so
    /// `0.25_f64` becomes exactly a quarter.
    pub fn from_fraction(value: f64) -> Result<Self, DecimalError> {
        if !value.is_finite() {
            return Err(DecimalError::Malformed(value.to_string()));
        }
        Progress::parse(&value.to_string())
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / PROGRESS_SCALE as f64
    }

    pub fn remaining(self) -> Progress {
        Progress(PROGRESS_SCALE - self.0)
    }

    pub fn saturating_sub(self, other: Progress) -> Progress {
        Progress(self.0.saturating_sub(other.0))
    }

    pub fn is_complete(self) -> bool {
        self.0 >= PROGRESS_SCALE
    }

    /// Nine fractional digits, e.g. `0.250000000`.
    pub fn to_decimal_string(self) -> String {
        format_fixed(self.0, PROGRESS_SCALE, 9)
    }
}

impl fmt::Display for Progress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.as_f64())
    }
}
