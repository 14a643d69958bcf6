//! The cluster-local exchange table.
//!
//! Each accelerator type has one [`ExchangeEntry`] holding the open bids for
//! it. Whenever a bid is posted, changed or removed the entry is re-cleared:
//! the `capacity` highest bids (one per instance of the type) are entitled and
//! every entitled tenant pays the clearing rate, which is the larger of the
//! base rate and the best bid that missed out. With a single instance this is
//! a plain second-price auction.
//!
//! Ties are broken in favour of a currently entitled tenant, then the earlier
//! submission, then the lexicographically smaller tenant id.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AccelId, FunctionalCluster, TenantId};
use crate::units::{Rate, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExchangeError {
    #[error("bid {rate} on `{accel}` is below the base rate {base}")]
    BidBelowBase { accel: AccelId, rate: Rate, base: Rate },
    #[error("`{tenant}` already has an open bid on `{accel}`")]
    DuplicateBid { tenant: TenantId, accel: AccelId },
    #[error("`{tenant}` has no open bid on `{accel}`")]
    NoSuchBid { tenant: TenantId, accel: AccelId },
    #[error("unknown accelerator type `{0}`")]
    UnknownType(AccelId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BidStatus {
    Open,
    Entitled,
    Withdrawn,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bid {
    pub tenant: TenantId,
    pub accel: AccelId,
    pub rate: Rate,
    pub submitted: SimTime,
    pub status: BidStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriceCause {
    BidPosted,
    BidUpdated,
    BidWithdrawn,
    BidExpired,
    Periodic,
}

impl fmt::Display for PriceCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriceCause::BidPosted => "bid-posted",
            PriceCause::BidUpdated => "bid-updated",
            PriceCause::BidWithdrawn => "bid-withdrawn",
            PriceCause::BidExpired => "bid-expired",
            PriceCause::Periodic => "periodic",
        })
    }
}

/// A change in clearing rate or entitlement on one accelerator type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceEvent {
    pub time: SimTime,
    pub accel: AccelId,
    pub old_rate: Rate,
    pub new_rate: Rate,
    pub old_entitled: Vec<TenantId>,
    pub new_entitled: Vec<TenantId>,
    pub cause: PriceCause,
}

/// Market state of one accelerator type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeEntry {
    pub accel: AccelId,
    pub base_rate: Rate,
    /// Number of simultaneous entitlements (instances of the type).
    pub capacity: u32,
    bids: Vec<Bid>,
    entitled: Vec<TenantId>,
    clearing: Rate,
}

/// Ranks bids best-first under the tie-break rule.
pub(crate) fn rank_bids<'a>(bids: &'a [Bid], incumbents: &[TenantId]) -> Vec<&'a Bid> {
    let mut ranked: Vec<&Bid> = bids.iter().collect();
    ranked.sort_by(|a, b| {
        b.rate
            .cmp(&a.rate)
            .then_with(|| {
                let ia = incumbents.contains(&a.tenant);
                let ib = incumbents.contains(&b.tenant);
                ib.cmp(&ia)
            })
            .then_with(|| a.submitted.cmp(&b.submitted))
            .then_with(|| a.tenant.cmp(&b.tenant))
    });
    ranked
}

impl ExchangeEntry {
    pub fn new(accel: AccelId, base_rate: Rate, capacity: u32) -> Self {
        ExchangeEntry {
            accel,
            base_rate,
            capacity: capacity.max(1),
            bids: Vec::new(),
            entitled: Vec::new(),
            clearing: base_rate,
        }
    }

    /// Open and entitled bids, in submission order.
    pub fn bids(&self) -> &[Bid] {
        &self.bids
    }

    pub fn bid_of(&self, tenant: &TenantId) -> Option<&Bid> {
        self.bids.iter().find(|b| &b.tenant == tenant)
    }

    /// Entitled tenants, best bid first.
    pub fn entitled(&self) -> &[TenantId] {
        &self.entitled
    }

    /// The single winner of a one-unit market.
    pub fn entitled_tenant(&self) -> Option<&TenantId> {
        self.entitled.first()
    }

    pub fn is_entitled(&self, tenant: &TenantId) -> bool {
        self.entitled.contains(tenant)
    }

    pub fn clearing_rate(&self) -> Rate {
        self.clearing
    }

    /// True when some other tenant holds an open bid here.
    pub fn is_contested_for(&self, tenant: &TenantId) -> bool {
        self.bids.iter().any(|b| &b.tenant != tenant)
    }

    /// Minimum rate a new bidder needs to win an entitlement.
    pub fn price_quote(&self, tick: Rate) -> Rate {
        quote_among(self.bids.iter(), self.base_rate, self.capacity, tick)
    }

    /// [`Self::price_quote`] as seen by `tenant`, ignoring its own bid.
    pub fn quote_for(&self, tenant: &TenantId, tick: Rate) -> Rate {
        quote_among(
            self.bids.iter().filter(|b| &b.tenant != tenant),
            self.base_rate,
            self.capacity,
            tick,
        )
    }

    fn recompute(&mut self, time: SimTime, cause: PriceCause) -> Option<PriceEvent> {
        let (entitled, clearing) = {
            let ranked = rank_bids(&self.bids, &self.entitled);
            let k = self.capacity as usize;
            let entitled: Vec<TenantId> =
                ranked.iter().take(k).map(|b| b.tenant.clone()).collect();
            let clearing = ranked
                .get(k)
                .map_or(self.base_rate, |b| b.rate.max(self.base_rate));
            (entitled, clearing)
        };
        for bid in &mut self.bids {
            bid.status = if entitled.contains(&bid.tenant) {
                BidStatus::Entitled
            } else {
                BidStatus::Open
            };
        }
        if entitled == self.entitled && clearing == self.clearing {
            return None;
        }
        let event = PriceEvent {
            time,
            accel: self.accel.clone(),
            old_rate: self.clearing,
            new_rate: clearing,
            old_entitled: std::mem::replace(&mut self.entitled, entitled),
            new_entitled: self.entitled.clone(),
            cause,
        };
        self.clearing = clearing;
        Some(event)
    }
}

fn quote_among<'a>(
    bids: impl Iterator<Item = &'a Bid>,
    base: Rate,
    capacity: u32,
    tick: Rate,
) -> Rate {
    let mut rates: Vec<Rate> = bids.map(|b| b.rate).collect();
    if rates.len() < capacity as usize {
        return base;
    }
    rates.sort_by(|a, b| b.cmp(a));
    rates[capacity as usize - 1].saturating_add(tick).max(base)
}

/// Re-clears an entry. Returns the resulting winners and clearing rate,
/// plus an event if either changed.
pub fn recompute_entitlement(
    entry: &mut ExchangeEntry,
    time: SimTime,
    cause: PriceCause,
) -> (Vec<TenantId>, Rate, Option<PriceEvent>) {
    let event = entry.recompute(time, cause);
    (entry.entitled.clone(), entry.clearing, event)
}

/// The exchange table for a functional cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeTable {
    entries: Vec<ExchangeEntry>,
    pub tick: Rate,
}

impl ExchangeTable {
    pub fn new(cluster: &FunctionalCluster, tick: Rate) -> Self {
        ExchangeTable {
            entries: cluster
                .types()
                .iter()
                .map(|t| ExchangeEntry::new(t.id.clone(), t.base_rate, t.instance_count))
                .collect(),
            tick,
        }
    }

    pub fn from_entries(entries: Vec<ExchangeEntry>, tick: Rate) -> Self {
        ExchangeTable { entries, tick }
    }

    pub fn entries(&self) -> &[ExchangeEntry] {
        &self.entries
    }

    pub fn entry(&self, accel: &AccelId) -> Option<&ExchangeEntry> {
        self.entries.iter().find(|e| &e.accel == accel)
    }

    fn entry_mut(&mut self, accel: &AccelId) -> Result<&mut ExchangeEntry, ExchangeError> {
        self.entries
            .iter_mut()
            .find(|e| &e.accel == accel)
            .ok_or_else(|| ExchangeError::UnknownType(accel.clone()))
    }

    pub fn is_entitled(&self, tenant: &TenantId, accel: &AccelId) -> bool {
        self.entry(accel).is_some_and(|e| e.is_entitled(tenant))
    }

    pub fn clearing_rate(&self, accel: &AccelId) -> Option<Rate> {
        self.entry(accel).map(ExchangeEntry::clearing_rate)
    }

    pub fn bid_of(&self, tenant: &TenantId, accel: &AccelId) -> Option<&Bid> {
        self.entry(accel).and_then(|e| e.bid_of(tenant))
    }

    pub fn price_quote(&self, accel: &AccelId) -> Option<Rate> {
        self.entry(accel).map(|e| e.price_quote(self.tick))
    }

    pub fn quote_for(&self, tenant: &TenantId, accel: &AccelId) -> Option<Rate> {
        self.entry(accel).map(|e| e.quote_for(tenant, self.tick))
    }

    /// Types on which `tenant` holds an open or entitled bid.
    pub fn bids_by(&self, tenant: &TenantId) -> Vec<&Bid> {
        self.entries.iter().filter_map(|e| e.bid_of(tenant)).collect()
    }

    pub fn post_bid(
        &mut self,
        tenant: &TenantId,
        accel: &AccelId,
        rate: Rate,
        now: SimTime,
    ) -> Result<Vec<PriceEvent>, ExchangeError> {
        let entry = self.entry_mut(accel)?;
        if rate < entry.base_rate {
            return Err(ExchangeError::BidBelowBase {
                accel: accel.clone(),
                rate,
                base: entry.base_rate,
            });
        }
        if entry.bid_of(tenant).is_some() {
            return Err(ExchangeError::DuplicateBid {
                tenant: tenant.clone(),
                accel: accel.clone(),
            });
        }
        entry.bids.push(Bid {
            tenant: tenant.clone(),
            accel: accel.clone(),
            rate,
            submitted: now,
            status: BidStatus::Open,
        });
        Ok(entry.recompute(now, PriceCause::BidPosted).into_iter().collect())
    }

    /// Replaces the rate of an existing bid, keeping its submission time.
    pub fn update_bid(
        &mut self,
        tenant: &TenantId,
        accel: &AccelId,
        rate: Rate,
        now: SimTime,
    ) -> Result<Vec<PriceEvent>, ExchangeError> {
        let entry = self.entry_mut(accel)?;
        let base = entry.base_rate;
        let bid = entry
            .bids
            .iter_mut()
            .find(|b| &b.tenant == tenant)
            .ok_or_else(|| ExchangeError::NoSuchBid {
                tenant: tenant.clone(),
                accel: accel.clone(),
            })?;
        if rate < base {
            return Err(ExchangeError::BidBelowBase {
                accel: accel.clone(),
                rate,
                base,
            });
        }
        if bid.rate == rate {
            return Ok(Vec::new());
        }
        bid.rate = rate;
        Ok(entry.recompute(now, PriceCause::BidUpdated).into_iter().collect())
    }

    pub fn withdraw_bid(
        &mut self,
        tenant: &TenantId,
        accel: &AccelId,
        now: SimTime,
    ) -> Result<(Bid, Vec<PriceEvent>), ExchangeError> {
        let entry = self.entry_mut(accel)?;
        let pos = entry
            .bids
            .iter()
            .position(|b| &b.tenant == tenant)
            .ok_or_else(|| ExchangeError::NoSuchBid {
                tenant: tenant.clone(),
                accel: accel.clone(),
            })?;
        let mut bid = entry.bids.remove(pos);
        bid.status = BidStatus::Withdrawn;
        let events = entry.recompute(now, PriceCause::BidWithdrawn).into_iter().collect();
        Ok((bid, events))
    }

    /// Expires every bid `tenant` holds, returning the expired bids and the
    /// resulting price events.
    pub fn expire_tenant_bids(
        &mut self,
        tenant: &TenantId,
        now: SimTime,
    ) -> (Vec<Bid>, Vec<PriceEvent>) {
        self.expire_where(tenant, now, |_| true)
    }

    /// Expires `tenant`'s bids on the listed types only.
    pub fn expire_bids_on(
        &mut self,
        tenant: &TenantId,
        accels: &[AccelId],
        now: SimTime,
    ) -> (Vec<Bid>, Vec<PriceEvent>) {
        self.expire_where(tenant, now, |a| accels.contains(a))
    }

    fn expire_where(
        &mut self,
        tenant: &TenantId,
        now: SimTime,
        pick: impl Fn(&AccelId) -> bool,
    ) -> (Vec<Bid>, Vec<PriceEvent>) {
        let mut expired = Vec::new();
        let mut events = Vec::new();
        for entry in self.entries.iter_mut().filter(|e| pick(&e.accel)) {
            let Some(pos) = entry.bids.iter().position(|b| &b.tenant == tenant) else {
                continue;
            };
            let mut bid = entry.bids.remove(pos);
            bid.status = BidStatus::Expired;
            expired.push(bid);
            events.extend(entry.recompute(now, PriceCause::BidExpired));
        }
        (expired, events)
    }

    /// Periodic re-clear of every entry.
    pub fn sweep(&mut self, now: SimTime) -> Vec<PriceEvent> {
        self.entries
            .iter_mut()
            .filter_map(|e| e.recompute(now, PriceCause::Periodic))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{cluster, rate};

    fn t(s: &str) -> TenantId {
        s.into()
    }
    fn a10() -> AccelId {
        "A10".into()
    }
    fn at(ms: u64) -> SimTime {
        SimTime::from_millis(ms)
    }
    fn table() -> ExchangeTable {
        ExchangeTable::new(&cluster(), Rate::DEFAULT_TICK)
    }

    #[test]
    fn second_price_sequence() {
        let mut x = table();
        let ev = x.post_bid(&t("A"), &a10(), rate("0.687"), at(0)).unwrap();
        assert_eq!(ev.len(), 1);
        let e = x.entry(&a10()).unwrap();
        assert_eq!(e.entitled_tenant(), Some(&t("A")));
        assert_eq!(e.clearing_rate(), rate("0.606"));

        let ev = x.post_bid(&t("B"), &a10(), rate("0.762"), at(1)).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].old_rate, rate("0.606"));
        assert_eq!(ev[0].new_rate, rate("0.687"));
        assert_eq!(ev[0].new_entitled, vec![t("B")]);

        assert_eq!(
            x.post_bid(&t("C"), &a10(), rate("0.500"), at(2)),
            Err(ExchangeError::BidBelowBase {
                accel: a10(),
                rate: rate("0.5"),
                base: rate("0.606")
            })
        );
        assert!(matches!(
            x.post_bid(&t("A"), &a10(), rate("0.9"), at(3)),
            Err(ExchangeError::DuplicateBid { .. })
        ));
        assert!(matches!(
            x.post_bid(&t("A"), &"TPU".into(), rate("0.9"), at(3)),
            Err(ExchangeError::UnknownType(_))
        ));
    }

    #[test]
    fn lowering_winner_transfers_entitlement() {
        let mut x = table();
        x.post_bid(&t("A"), &a10(), rate("0.687"), at(0)).unwrap();
        x.post_bid(&t("B"), &a10(), rate("0.762"), at(0)).unwrap();
        let ev = x.update_bid(&t("B"), &a10(), rate("0.652"), at(5)).unwrap();
        assert_eq!(ev.len(), 1);
        let e = x.entry(&a10()).unwrap();
        assert_eq!(e.entitled_tenant(), Some(&t("A")));
        assert_eq!(e.clearing_rate(), rate("0.652"));
        assert!(x.update_bid(&t("B"), &a10(), rate("0.652"), at(6)).unwrap().is_empty());
        assert!(matches!(
            x.update_bid(&t("Z"), &a10(), rate("0.7"), at(6)),
            Err(ExchangeError::NoSuchBid { .. })
        ));
        assert!(matches!(
            x.update_bid(&t("A"), &a10(), rate("0.1"), at(6)),
            Err(ExchangeError::BidBelowBase { .. })
        ));
    }

    #[test]
    fn sole_bidder_raising_changes_nothing() {
        let mut x = table();
        x.post_bid(&t("A"), &a10(), rate("0.687"), at(0)).unwrap();
        let ev = x.update_bid(&t("A"), &a10(), rate("0.900"), at(1)).unwrap();
        assert!(ev.is_empty());
        assert_eq!(x.clearing_rate(&a10()), Some(rate("0.606")));
        assert!(x.is_entitled(&t("A"), &a10()));
    }

    #[test]
    fn recompute_examples() {
        let mut e = ExchangeEntry::new(a10(), rate("0.606"), 1);
        assert_eq!(
            recompute_entitlement(&mut e, at(0), PriceCause::Periodic),
            (vec![], rate("0.606"), None)
        );
        let mut x = table();
        x.post_bid(&t("A"), &a10(), rate("0.687"), at(0)).unwrap();
        let mut e = x.entry(&a10()).unwrap().clone();
        let (w, r, ev) = recompute_entitlement(&mut e, at(1), PriceCause::Periodic);
        assert_eq!((w, r, ev), (vec![t("A")], rate("0.606"), None));
        x.post_bid(&t("B"), &a10(), rate("0.762"), at(0)).unwrap();
        let mut e = x.entry(&a10()).unwrap().clone();
        let (w, r, _) = recompute_entitlement(&mut e, at(1), PriceCause::Periodic);
        assert_eq!((w, r), (vec![t("B")], rate("0.687")));
    }

    #[test]
    fn quotes() {
        let mut x = table();
        assert_eq!(x.price_quote(&a10()), Some(rate("0.606")));
        x.post_bid(&t("A"), &a10(), rate("0.687"), at(0)).unwrap();
        assert_eq!(x.price_quote(&a10()), Some(rate("0.688")));
        assert_eq!(x.quote_for(&t("A"), &a10()), Some(rate("0.606")));
        x.post_bid(&t("B"), &a10(), rate("0.762"), at(0)).unwrap();
        assert_eq!(x.price_quote(&a10()), Some(rate("0.763")));
        assert_eq!(x.quote_for(&t("B"), &a10()), Some(rate("0.688")));
    }

    #[test]
    fn expiring_bids() {
        let mut x = table();
        x.post_bid(&t("A"), &a10(), rate("0.687"), at(0)).unwrap();
        x.post_bid(&t("B"), &a10(), rate("0.652"), at(0)).unwrap();
        assert_eq!(x.clearing_rate(&a10()), Some(rate("0.652")));
        let (gone, ev) = x.expire_tenant_bids(&t("B"), at(10));
        assert_eq!(gone.len(), 1);
        assert_eq!(gone[0].status, BidStatus::Expired);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].cause, PriceCause::BidExpired);
        assert_eq!(x.clearing_rate(&a10()), Some(rate("0.606")));

        let before = x.clone();
        let (gone, ev) = x.expire_tenant_bids(&t("nobody"), at(11));
        assert!(gone.is_empty() && ev.is_empty());
        assert_eq!(x, before);
    }

    #[test]
    fn expiring_winner_promotes_runner_up() {
        // Brute force over three-bidder rate orderings.
        let grid = ["0.606", "0.650", "0.700"];
        for ra in grid {
            for rb in grid {
                for rc in grid {
                    let mut x = table();
                    for (name, r) in [("A", ra), ("B", rb), ("C", rc)] {
                        x.post_bid(&t(name), &a10(), rate(r), at(0)).unwrap();
                    }
                    let winner = x.entry(&a10()).unwrap().entitled_tenant().cloned().unwrap();
                    x.expire_tenant_bids(&winner, at(1));
                    let mut rest: Vec<(Rate, TenantId)> = [("A", ra), ("B", rb), ("C", rc)]
                        .into_iter()
                        .filter(|(n, _)| t(n) != winner)
                        .map(|(n, r)| (rate(r), t(n)))
                        .collect();
                    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                    let e = x.entry(&a10()).unwrap();
                    assert_eq!(e.entitled_tenant(), Some(&rest[0].1));
                    assert_eq!(e.clearing_rate(), rest[1].0.max(rate("0.606")));
                }
            }
        }
    }

    #[test]
    fn incumbent_keeps_ties() {
        let mut x = table();
        x.post_bid(&t("B"), &a10(), rate("0.700"), at(5)).unwrap();
        x.post_bid(&t("A"), &a10(), rate("0.700"), at(9)).unwrap();
        assert!(x.is_entitled(&t("B"), &a10()));
        // A was submitted later, but once entitled it keeps a tie.
        x.update_bid(&t("B"), &a10(), rate("0.650"), at(10)).unwrap();
        assert!(x.is_entitled(&t("A"), &a10()));
        x.update_bid(&t("B"), &a10(), rate("0.700"), at(11)).unwrap();
        assert!(x.is_entitled(&t("A"), &a10()));
        assert_eq!(x.clearing_rate(&a10()), Some(rate("0.700")));
    }

    #[test]
    fn multi_unit_clears_at_best_loser() {
        let l4: AccelId = "L4".into();
        let mut x = table();
        x.post_bid(&t("A"), &l4, rate("0.50"), at(0)).unwrap();
        x.post_bid(&t("B"), &l4, rate("0.55"), at(0)).unwrap();
        let e = x.entry(&l4).unwrap();
        assert_eq!(e.entitled(), &[t("B"), t("A")]);
        assert_eq!(e.clearing_rate(), rate("0.469"));
        assert_eq!(e.price_quote(x.tick), rate("0.501"));
        x.post_bid(&t("C"), &l4, rate("0.52"), at(0)).unwrap();
        let e = x.entry(&l4).unwrap();
        assert_eq!(e.entitled(), &[t("B"), t("C")]);
        assert_eq!(e.clearing_rate(), rate("0.50"));
    }

    #[test]
    fn withdraw_marks_bid() {
        let mut x = table();
        x.post_bid(&t("A"), &a10(), rate("0.7"), at(0)).unwrap();
        let (bid, ev) = x.withdraw_bid(&t("A"), &a10(), at(1)).unwrap();
        assert_eq!(bid.status, BidStatus::Withdrawn);
        assert_eq!(ev[0].cause, PriceCause::BidWithdrawn);
        assert!(x.entry(&a10()).unwrap().entitled().is_empty());
        assert!(x.sweep(at(2)).is_empty());
    }
}
