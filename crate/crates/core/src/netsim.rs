//! Two-party session runtime: an in-process duplex channel, a phase-tagged
//! communication meter and the cost model protocols are charged against.
//!
//! Payloads that the functional simulation needs (masks, OT messages, helper
//! bits) travel through [`Session::deliver`] and are not metered. The meter is
//! charged by closed-form cost formulas through [`Session::charge`], so the
//! reported volume is independent of how the simulator serializes payloads.

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::Party;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Offline,
    Online,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Offline => "offline",
            Phase::Online => "online",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub bits: u64,
    pub rounds: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounters {
    pub offline: Counter,
    pub online: Counter,
}

impl PhaseCounters {
    pub fn get(&self, phase: Phase) -> &Counter {
        match phase {
            Phase::Offline => &self.offline,
            Phase::Online => &self.online,
        }
    }

    fn get_mut(&mut self, phase: Phase) -> &mut Counter {
        match phase {
            Phase::Offline => &mut self.offline,
            Phase::Online => &mut self.online,
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.offline.bits + self.online.bits
    }
}

/// Bit and round counters keyed by (layer label, protocol tag).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommMeter {
    enabled: bool,
    entries: BTreeMap<(String, String), PhaseCounters>,
}

impl CommMeter {
    pub fn new() -> Self {
        Self {
            enabled: true,
            entries: BTreeMap::new(),
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            entries: BTreeMap::new(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn add_bits(&mut self, layer: &str, tag: &str, phase: Phase, bits: u64) {
        if !self.enabled {
            return;
        }
        let c = self
            .entries
            .entry((layer.to_string(), tag.to_string()))
            .or_default();
        c.get_mut(phase).bits += bits;
    }

    pub fn add_rounds(&mut self, layer: &str, tag: &str, phase: Phase, rounds: u64) {
        if !self.enabled {
            return;
        }
        let c = self
            .entries
            .entry((layer.to_string(), tag.to_string()))
            .or_default();
        c.get_mut(phase).rounds += rounds;
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, &PhaseCounters)> {
        self.entries
            .iter()
            .map(|((l, t), c)| (l.as_str(), t.as_str(), c))
    }

    pub fn phase_bits(&self, phase: Phase) -> u64 {
        self.entries.values().map(|c| c.get(phase).bits).sum()
    }

    pub fn phase_rounds(&self, phase: Phase) -> u64 {
        self.entries.values().map(|c| c.get(phase).rounds).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.phase_bits(Phase::Offline) + self.phase_bits(Phase::Online)
    }

    pub fn total_rounds(&self) -> u64 {
        self.phase_rounds(Phase::Offline) + self.phase_rounds(Phase::Online)
    }

    pub fn tag_bits(&self, tag: &str) -> u64 {
        self.entries
            .iter()
            .filter(|((_, t), _)| t == tag)
            .map(|(_, c)| c.total_bits())
            .sum()
    }

    pub fn tag_phase_bits(&self, tag: &str, phase: Phase) -> u64 {
        self.entries
            .iter()
            .filter(|((_, t), _)| t == tag)
            .map(|(_, c)| c.get(phase).bits)
            .sum()
    }

    pub fn layer_bits(&self, layer: &str) -> u64 {
        self.entries
            .iter()
            .filter(|((l, _), _)| l == layer)
            .map(|(_, c)| c.total_bits())
            .sum()
    }

    pub fn merge(&mut self, other: &CommMeter) {
        for ((l, t), c) in &other.entries {
            let e = self.entries.entry((l.clone(), t.clone())).or_default();
            e.offline.bits += c.offline.bits;
            e.offline.rounds += c.offline.rounds;
            e.online.bits += c.online.bits;
            e.online.rounds += c.online.rounds;
        }
    }
}

/// Parameters of the closed-form communication model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// Security parameter in bits.
    pub lambda: u64,
    /// ReLU costs `relu_unit_coeff · λ · l` bits per element.
    pub relu_unit_coeff: u64,
    /// Messages carried per correlated OT.
    pub ot_payload_factor: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            lambda: 128,
            relu_unit_coeff: 1,
            ot_payload_factor: 1,
        }
    }
}

impl CostModel {
    pub fn with_lambda(lambda: u64) -> Result<Self> {
        let m = Self {
            lambda,
            ..Self::default()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 1 {
            return Err(Error::InvalidConfig("lambda must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub name: &'static str,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Round-trip time in seconds.
    pub rtt: f64,
}

impl NetworkProfile {
    pub fn new(name: &'static str, bandwidth: f64, rtt: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && rtt > 0.0) {
            return Err(Error::InvalidConfig(
                "bandwidth and rtt must be strictly positive".into(),
            ));
        }
        Ok(Self { name, bandwidth, rtt })
    }

    pub fn lan() -> Self {
        Self {
            name: "lan",
            bandwidth: 377e6,
            rtt: 0.3e-3,
        }
    }

    pub fn wan() -> Self {
        Self {
            name: "wan",
            bandwidth: 40e6,
            rtt: 80e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyEstimate {
    pub offline_s: f64,
    pub online_s: f64,
    pub total_s: f64,
}

/// Linear latency model: `bits / 8 / bandwidth + rounds · rtt`, per phase.
pub fn estimate_latency(meter: &CommMeter, profile: &NetworkProfile) -> LatencyEstimate {
    let phase = |p| {
        meter.phase_bits(p) as f64 / 8.0 / profile.bandwidth
            + meter.phase_rounds(p) as f64 * profile.rtt
    };
    let offline_s = phase(Phase::Offline);
    let online_s = phase(Phase::Online);
    LatencyEstimate {
        offline_s,
        online_s,
        total_s: offline_s + online_s,
    }
}

#[derive(Debug, Default)]
struct Channel {
    to_server: VecDeque<Vec<u8>>,
    to_client: VecDeque<Vec<u8>>,
    last_sender: [Option<Party>; 2],
}

impl Channel {
    fn queue(&mut self, to: Party) -> &mut VecDeque<Vec<u8>> {
        match to {
            Party::Server => &mut self.to_server,
            Party::Client => &mut self.to_client,
        }
    }
}

/// One two-party execution context. Owned by a single inference; distinct
/// sessions share nothing and may run on different threads.
#[derive(Debug)]
pub struct Session {
    pub cost: CostModel,
    meter: CommMeter,
    channel: Channel,
    scope: String,
    open: bool,
    wire_bytes: u64,
    server_rng: ChaCha20Rng,
    client_rng: ChaCha20Rng,
    helper_rng: ChaCha20Rng,
}

impl Session {
    pub fn new(cost: CostModel, seed: u64) -> Self {
        Self {
            cost,
            meter: CommMeter::new(),
            channel: Channel::default(),
            scope: String::new(),
            open: true,
            wire_bytes: 0,
            server_rng: ChaCha20Rng::seed_from_u64(seed.wrapping_mul(3).wrapping_add(1)),
            client_rng: ChaCha20Rng::seed_from_u64(seed.wrapping_mul(3).wrapping_add(2)),
            helper_rng: ChaCha20Rng::seed_from_u64(seed.wrapping_mul(3).wrapping_add(3)),
        }
    }

    /// A session whose meter records nothing.
    pub fn unmetered(cost: CostModel, seed: u64) -> Self {
        let mut s = Self::new(cost, seed);
        s.meter = CommMeter::disabled();
        s
    }

    pub fn meter(&self) -> &CommMeter {
        &self.meter
    }

    pub fn take_meter(&mut self) -> CommMeter {
        let fresh = if self.meter.is_enabled() {
            CommMeter::new()
        } else {
            CommMeter::disabled()
        };
        std::mem::replace(&mut self.meter, fresh)
    }

    pub fn close(&mut self) {
        self.open = false;
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Layer label attached to every subsequent charge.
    pub fn set_scope(&mut self, scope: &str) {
        self.scope = scope.to_string();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn rng(&mut self, party: Party) -> &mut ChaCha20Rng {
        match party {
            Party::Server => &mut self.server_rng,
            Party::Client => &mut self.client_rng,
        }
    }

    /// Randomness for ideal helper functionalities (comparison bits and the like).
    pub fn helper_rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.helper_rng
    }

    /// Bytes moved through [`Session::deliver`]; a diagnostic, never charged.
    pub fn wire_bytes(&self) -> u64 {
        self.wire_bytes
    }

    /// Send `payload` from `from` to its peer and charge `8·len` bits.
    pub fn exchange(&mut self, from: Party, payload: &[u8], tag: &str, phase: Phase) -> Result<Vec<u8>> {
        if !self.open {
            return Err(Error::SessionClosed);
        }
        let slot = match phase {
            Phase::Offline => 0,
            Phase::Online => 1,
        };
        if self.channel.last_sender[slot] != Some(from) {
            self.channel.last_sender[slot] = Some(from);
            let scope = self.scope.clone();
            self.meter.add_rounds(&scope, tag, phase, 1);
        }
        let scope = self.scope.clone();
        self.meter
            .add_bits(&scope, tag, phase, 8 * payload.len() as u64);
        self.transfer(from, payload.to_vec())
    }

    /// Unmetered delivery for payloads whose cost is charged by formula.
    pub fn deliver(&mut self, from: Party, payload: Vec<u8>) -> Result<Vec<u8>> {
        if !self.open {
            return Err(Error::SessionClosed);
        }
        self.wire_bytes += payload.len() as u64;
        self.transfer(from, payload)
    }

    fn transfer(&mut self, from: Party, payload: Vec<u8>) -> Result<Vec<u8>> {
        let to = from.peer();
        self.channel.queue(to).push_back(payload);
        self.channel
            .queue(to)
            .pop_front()
            .ok_or_else(|| Error::Invariant("channel queue empty after send".into()))
    }

    pub fn charge(&mut self, tag: &str, phase: Phase, bits: i64) -> Result<()> {
        if bits < 0 {
            return Err(Error::NegativeCharge(bits));
        }
        if !self.open {
            return Err(Error::SessionClosed);
        }
        let scope = self.scope.clone();
        self.meter.add_bits(&scope, tag, phase, bits as u64);
        Ok(())
    }

    pub fn charge_rounds(&mut self, tag: &str, phase: Phase, rounds: u64) {
        let scope = self.scope.clone();
        self.meter.add_rounds(&scope, tag, phase, rounds);
    }
}
