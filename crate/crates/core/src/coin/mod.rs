//! Compute-unit coin ledger.
//!
//! Amounts are exact fixed-point values (10^-12 coin units) so that balances,
//! replays and conservation checks compare exactly. One MB is 10^6 bytes.

use crate::dht::PeerId;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

const UNITS_PER_COIN: i128 = 1_000_000_000_000;
const BYTES_PER_MB: i128 = 1_000_000;

/// A coin amount in 10^-12 units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coin(pub i128);

impl Coin {
    pub const ZERO: Coin = Coin(0);

    pub fn from_coins(c: i64) -> Self {
        Coin(c as i128 * UNITS_PER_COIN)
    }

    /// Nearest representable amount.
    pub fn from_f64(c: f64) -> Self {
        Coin((c * UNITS_PER_COIN as f64).round() as i128)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / UNITS_PER_COIN as f64
    }

    pub fn units(self) -> i128 {
        self.0
    }
}

impl std::ops::Add for Coin {
    type Output = Coin;
    fn add(self, o: Coin) -> Coin {
        Coin(self.0 + o.0)
    }
}

impl std::ops::Sub for Coin {
    type Output = Coin;
    fn sub(self, o: Coin) -> Coin {
        Coin(self.0 - o.0)
    }
}

impl std::iter::Sum for Coin {
    fn sum<I: Iterator<Item = Coin>>(iter: I) -> Coin {
        Coin(iter.map(|c| c.0).sum())
    }
}

impl fmt::Display for Coin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let whole = abs / UNITS_PER_COIN as u128;
        let frac = abs % UNITS_PER_COIN as u128;
        write!(f, "{sign}{whole}.{frac:012}")
    }
}

/// Compute units for a machine taking `machine_ms` per step where the reference
/// takes `reference_ms`, training `samples` per step. Times are compared in seconds.
pub fn vcu(reference_ms: f64, machine_ms: f64, samples: f64) -> f64 {
    let x = (reference_ms - machine_ms) / 1000.0;
    samples / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Contribution,
    Validation,
    Annotation,
    TrainingStep,
    Seeding,
    Penalty,
    Spend,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::Contribution => "contribution",
            RewardKind::Validation => "validation",
            RewardKind::Annotation => "annotation",
            RewardKind::TrainingStep => "training_step",
            RewardKind::Seeding => "seeding",
            RewardKind::Penalty => "penalty",
            RewardKind::Spend => "spend",
        }
    }
}

/// What an event's amount was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "unit", content = "quantity", rename_all = "snake_case")]
pub enum Basis {
    Bytes(u64),
    Items(u64),
    Vcu(f64),
    Coins(Coin),
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Basis::Bytes(b) => write!(f, "bytes,{b}"),
            Basis::Items(n) => write!(f, "items,{n}"),
            Basis::Vcu(v) => write!(f, "vcu,{v}"),
            Basis::Coins(c) => write!(f, "coins,{c}"),
        }
    }
}

/// Reward rates in coin per unit of basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rates {
    pub contribution_per_mb: f64,
    pub validation_per_item: f64,
    pub annotation_per_item: f64,
    pub training_per_vcu: f64,
    pub seeding_per_mb: f64,
    pub diversity_bonus: bool,
}

impl Default for Rates {
    fn default() -> Self {
        Rates {
            contribution_per_mb: 1.0,
            validation_per_item: 0.1,
            annotation_per_item: 0.2,
            training_per_vcu: 1.0,
            seeding_per_mb: 0.5,
            diversity_bonus: true,
        }
    }
}

/// Contribution multiplier for a contributor active in `datasets` distinct datasets.
pub fn diversity_multiplier(datasets: usize) -> f64 {
    (1.0 + 0.05 * (datasets.max(1) - 1) as f64).min(1.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardEvent {
    pub seq: u64,
    pub kind: RewardKind,
    pub peer: PeerId,
    pub amount: Coin,
    pub basis: Basis,
    pub time: u64,
    pub key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("insufficient balance: have {have}, need {need}")]
    Insufficient { have: Coin, need: Coin },
    #[error("basis does not fit reward kind {0:?}")]
    BadBasis(RewardKind),
    #[error("negative amount")]
    Negative,
}

/// Result of a ledger mutation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Posted {
    /// New balance after the event.
    Balance(Coin),
    /// An event with this idempotency key was already posted.
    Duplicate,
}

/// Append-only account book. Balances are derived from the event log.
#[derive(Clone, Debug, Default)]
pub struct Ledger {
    rates: Rates,
    balances: BTreeMap<PeerId, Coin>,
    events: Vec<RewardEvent>,
    keys: BTreeSet<String>,
    contributed_to: BTreeMap<PeerId, BTreeSet<PeerId>>,
    shortfalls: Vec<(PeerId, Coin)>,
}

impl Ledger {
    pub fn new(rates: Rates) -> Self {
        Ledger { rates, ..Default::default() }
    }

    pub fn rates(&self) -> &Rates {
        &self.rates
    }

    pub fn balance(&self, peer: &PeerId) -> Coin {
        self.balances.get(peer).copied().unwrap_or_default()
    }

    pub fn balances(&self) -> &BTreeMap<PeerId, Coin> {
        &self.balances
    }

    pub fn events(&self) -> &[RewardEvent] {
        &self.events
    }

    /// Penalty amounts that could not be taken because the balance hit zero.
    pub fn shortfalls(&self) -> &[(PeerId, Coin)] {
        &self.shortfalls
    }

    fn per_byte(rate_per_mb: f64, bytes: u64) -> Coin {
        let per_mb = Coin::from_f64(rate_per_mb).0;
        Coin(per_mb * bytes as i128 / BYTES_PER_MB)
    }

    /// Amount for a reward event, before any diversity bonus.
    pub fn rate_amount(&self, kind: RewardKind, basis: Basis) -> Result<Coin, LedgerError> {
        let r = &self.rates;
        match (kind, basis) {
            (RewardKind::Contribution, Basis::Bytes(b)) => Ok(Self::per_byte(r.contribution_per_mb, b)),
            (RewardKind::Seeding, Basis::Bytes(b)) => Ok(Self::per_byte(r.seeding_per_mb, b)),
            (RewardKind::Validation, Basis::Items(n)) => {
                Ok(Coin(Coin::from_f64(r.validation_per_item).0 * n as i128))
            }
            (RewardKind::Annotation, Basis::Items(n)) => {
                Ok(Coin(Coin::from_f64(r.annotation_per_item).0 * n as i128))
            }
            (RewardKind::TrainingStep, Basis::Vcu(v)) => Ok(Coin::from_f64(r.training_per_vcu * v)),
            _ => Err(LedgerError::BadBasis(kind)),
        }
    }

    fn seen(&mut self, key: &Option<String>) -> bool {
        match key {
            Some(k) => !self.keys.insert(k.clone()),
            None => false,
        }
    }

    fn post(&mut self, kind: RewardKind, peer: PeerId, amount: Coin, basis: Basis, time: u64, key: Option<String>) -> Coin {
        let seq = self.events.len() as u64;
        self.events.push(RewardEvent { seq, kind, peer, amount, basis, time, key });
        let bal = self.balances.entry(peer).or_default();
        *bal = *bal + amount;
        *bal
    }

    /// Credits a reward. `dataset` feeds the diversity bonus for contributions.
    pub fn award(
        &mut self,
        kind: RewardKind,
        peer: PeerId,
        basis: Basis,
        dataset: Option<PeerId>,
        time: u64,
        key: Option<String>,
    ) -> Result<Posted, LedgerError> {
        let mut amount = self.rate_amount(kind, basis)?;
        if self.seen(&key) {
            return Ok(Posted::Duplicate);
        }
        if kind == RewardKind::Contribution && self.rates.diversity_bonus {
            let sets = self.contributed_to.entry(peer).or_default();
            if let Some(ds) = dataset {
                sets.insert(ds);
            }
            let m = diversity_multiplier(sets.len());
            // Multiplier steps are multiples of 1/20, so this stays exact.
            let twentieths = (m * 20.0).round() as i128;
            amount = Coin(amount.0 * twentieths / 20);
        }
        Ok(Posted::Balance(self.post(kind, peer, amount, basis, time, key)))
    }

    /// Deducts up to the current balance; the rest is recorded as a shortfall.
    pub fn penalize(&mut self, peer: PeerId, amount: Coin, time: u64, key: Option<String>) -> Result<Posted, LedgerError> {
        if amount.0 < 0 {
            return Err(LedgerError::Negative);
        }
        if self.seen(&key) {
            return Ok(Posted::Duplicate);
        }
        let have = self.balance(&peer);
        let taken = amount.min(have);
        if taken < amount {
            self.shortfalls.push((peer, amount - taken));
        }
        Ok(Posted::Balance(self.post(
            RewardKind::Penalty,
            peer,
            Coin(-taken.0),
            Basis::Coins(amount),
            time,
            key,
        )))
    }

    pub fn spend(&mut self, peer: PeerId, amount: Coin, time: u64, key: Option<String>) -> Result<Posted, LedgerError> {
        if amount.0 < 0 {
            return Err(LedgerError::Negative);
        }
        let have = self.balance(&peer);
        if have < amount {
            return Err(LedgerError::Insufficient { have, need: amount });
        }
        if self.seen(&key) {
            return Ok(Posted::Duplicate);
        }
        Ok(Posted::Balance(self.post(RewardKind::Spend, peer, Coin(-amount.0), Basis::Coins(amount), time, key)))
    }

    /// Balances recomputed from an event log alone.
    pub fn replay(events: &[RewardEvent]) -> BTreeMap<PeerId, Coin> {
        let mut out: BTreeMap<PeerId, Coin> = BTreeMap::new();
        for e in events {
            let b = out.entry(e.peer).or_default();
            *b = *b + e.amount;
        }
        out
    }

    /// Replay matches the live balances and nothing is negative.
    pub fn audit(&self) -> Result<(), String> {
        let replayed = Self::replay(&self.events);
        if replayed != self.balances {
            return Err("replayed balances differ from live balances".into());
        }
        if let Some((p, b)) = self.balances.iter().find(|(_, b)| b.0 < 0) {
            return Err(format!("negative balance {b} for {p}"));
        }
        Ok(())
    }

    pub fn total(&self, kind: RewardKind) -> Coin {
        self.events.iter().filter(|e| e.kind == kind).map(|e| e.amount).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seq,time,kind,peer,amount,unit,quantity,key\n");
        for e in &self.events {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.seq,
                e.time,
                e.kind.as_str(),
                e.peer.to_hex(),
                e.amount,
                e.basis,
                e.key.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peer(n: u64) -> PeerId {
        PeerId::from_low_u64(n)
    }

    #[test]
    fn vcu_examples() {
        assert_eq!(vcu(1234.0, 1234.0, 1.0), 0.5);
        assert!(vcu(10.0, 1e9, 1000.0) < 1e-12);
        // t_b - t_m = ln 3 seconds.
        let v = vcu(1000.0 * 3f64.ln(), 0.0, 4.0);
        assert!((v - 3.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn contribution_rate() {
        let mut l = Ledger::new(Rates { diversity_bonus: false, ..Rates::default() });
        let got = l
            .award(RewardKind::Contribution, peer(1), Basis::Bytes(10_000_000), None, 0, None)
            .unwrap();
        assert_eq!(got, Posted::Balance(Coin::from_coins(10)));
    }

    #[test]
    fn penalty_floors_at_zero() {
        let mut l = Ledger::new(Rates::default());
        l.award(RewardKind::Validation, peer(1), Basis::Items(10), None, 0, None).unwrap();
        assert_eq!(l.balance(&peer(1)), Coin::from_coins(1));
        let got = l.penalize(peer(1), Coin::from_coins(5), 1, None).unwrap();
        assert_eq!(got, Posted::Balance(Coin::ZERO));
        assert_eq!(l.shortfalls(), &[(peer(1), Coin::from_coins(4))]);
        l.audit().unwrap();
    }

    #[test]
    fn spend_gating() {
        let mut l = Ledger::new(Rates::default());
        l.award(RewardKind::TrainingStep, peer(2), Basis::Vcu(2.0), None, 0, None).unwrap();
        assert!(matches!(
            l.spend(peer(2), Coin::from_coins(3), 1, None),
            Err(LedgerError::Insufficient { .. })
        ));
        assert_eq!(l.spend(peer(2), Coin::from_coins(2), 1, None), Ok(Posted::Balance(Coin::ZERO)));
    }

    #[test]
    fn keys_are_idempotent() {
        let mut l = Ledger::new(Rates::default());
        let k = Some("seed:a".to_string());
        l.award(RewardKind::Seeding, peer(3), Basis::Bytes(2_000_000), None, 0, k.clone()).unwrap();
        assert_eq!(
            l.award(RewardKind::Seeding, peer(3), Basis::Bytes(2_000_000), None, 0, k),
            Ok(Posted::Duplicate)
        );
        assert_eq!(l.balance(&peer(3)), Coin::from_coins(1));
        assert_eq!(l.events().len(), 1);
    }

    #[test]
    fn seeding_conservation_is_exact() {
        let mut l = Ledger::new(Rates { seeding_per_mb: 0.37, ..Rates::default() });
        let chunks = [65_536u64, 65_536, 12_345, 1, 999_999];
        for (i, b) in chunks.iter().enumerate() {
            l.award(RewardKind::Seeding, peer(i as u64 % 2), Basis::Bytes(*b), None, 0, None).unwrap();
        }
        let total_bytes: u64 = chunks.iter().sum();
        // 0.37 coin/MB = 370_000 units per byte.
        assert_eq!(l.total(RewardKind::Seeding), Coin(370_000 * total_bytes as i128));
    }

    #[test]
    fn diversity_bonus_is_capped_and_monotone() {
        assert_eq!(diversity_multiplier(1), 1.0);
        assert_eq!(diversity_multiplier(3), 1.1);
        assert_eq!(diversity_multiplier(50), 1.5);
        let earned = |d: u64| {
            let mut l = Ledger::new(Rates::default());
            let bytes = 12_000_000 / d;
            for i in 0..d {
                l.award(RewardKind::Contribution, peer(1), Basis::Bytes(bytes), Some(peer(100 + i)), 0, None)
                    .unwrap();
            }
            l.balance(&peer(1))
        };
        for d in 2..=12 {
            assert!(earned(d) >= earned(d - 1), "d={d}");
        }
    }

    #[test]
    fn replay_and_csv() {
        let mut l = Ledger::new(Rates::default());
        l.award(RewardKind::Annotation, peer(1), Basis::Items(3), None, 5, Some("x".into())).unwrap();
        l.penalize(peer(1), Coin::from_f64(0.1), 6, None).unwrap();
        assert_eq!(Ledger::replay(l.events()), *l.balances());
        let csv = l.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().contains("annotation"));
        assert!(csv.contains("0.600000000000"));
    }

    #[test]
    fn bad_basis_rejected() {
        let mut l = Ledger::new(Rates::default());
        assert_eq!(
            l.award(RewardKind::Seeding, peer(1), Basis::Items(1), None, 0, None),
            Err(LedgerError::BadBasis(RewardKind::Seeding))
        );
    }
}
