use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubstrateClass {
    LocalDB,
    SharedDB,
    Queue,
    ObjectStore,
}

impl SubstrateClass {
    pub const ALL: [SubstrateClass; 4] = [
        SubstrateClass::LocalDB,
        SubstrateClass::SharedDB,
        SubstrateClass::Queue,
        SubstrateClass::ObjectStore,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SubstrateClass::LocalDB => "LocalDB",
            SubstrateClass::SharedDB => "SharedDB",
            SubstrateClass::Queue => "Queue",
            SubstrateClass::ObjectStore => "ObjectStore",
        }
    }
}

impl fmt::Display for SubstrateClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubstrateClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SubstrateClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown substrate class '{s}'")))
    }
}

/// Byte and operation tallies for one substrate class.
///
/// `bytes_*` count payload bodies only. Frame headers, queue envelopes and
/// barrier registrations land in the `envelope_*` fields. `peer_bytes_read`
/// is the subset of `bytes_read` served from another worker's store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounters {
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub op_count: u64,
    pub envelope_bytes_written: u64,
    pub envelope_bytes_read: u64,
    pub peer_bytes_read: u64,
}

impl ClassCounters {
    pub fn saturating_sub(&self, earlier: &ClassCounters) -> ClassCounters {
        ClassCounters {
            bytes_written: self.bytes_written.saturating_sub(earlier.bytes_written),
            bytes_read: self.bytes_read.saturating_sub(earlier.bytes_read),
            op_count: self.op_count.saturating_sub(earlier.op_count),
            envelope_bytes_written: self
                .envelope_bytes_written
                .saturating_sub(earlier.envelope_bytes_written),
            envelope_bytes_read: self
                .envelope_bytes_read
                .saturating_sub(earlier.envelope_bytes_read),
            peer_bytes_read: self.peer_bytes_read.saturating_sub(earlier.peer_bytes_read),
        }
    }

    pub fn accumulate(&mut self, other: &ClassCounters) {
        self.bytes_written += other.bytes_written;
        self.bytes_read += other.bytes_read;
        self.op_count += other.op_count;
        self.envelope_bytes_written += other.envelope_bytes_written;
        self.envelope_bytes_read += other.envelope_bytes_read;
        self.peer_bytes_read += other.peer_bytes_read;
    }

    pub fn is_zero(&self) -> bool {
        *self == ClassCounters::default()
    }
}

/// Per-class tallies. Serializes as `{"LocalDB": {...}, "SharedDB": {...}, ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrafficCounters {
    pub classes: BTreeMap<SubstrateClass, ClassCounters>,
}

impl Default for TrafficCounters {
    fn default() -> Self {
        TrafficCounters {
            classes: SubstrateClass::ALL
                .into_iter()
                .map(|c| (c, ClassCounters::default()))
                .collect(),
        }
    }
}

impl TrafficCounters {
    pub fn class(&self, class: SubstrateClass) -> ClassCounters {
        self.classes.get(&class).copied().unwrap_or_default()
    }

    pub fn class_mut(&mut self, class: SubstrateClass) -> &mut ClassCounters {
        self.classes.entry(class).or_default()
    }

    pub fn delta_since(&self, earlier: &TrafficCounters) -> TrafficCounters {
        TrafficCounters {
            classes: SubstrateClass::ALL
                .into_iter()
                .map(|c| (c, self.class(c).saturating_sub(&earlier.class(c))))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &TrafficCounters) {
        for (class, counters) in &other.classes {
            self.class_mut(*class).accumulate(counters);
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        self.classes
            .values()
            .map(|c| c.bytes_written + c.bytes_read)
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("counters serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpEvent {
    pub seq: u64,
    pub class: SubstrateClass,
    pub op: String,
    pub key: String,
    pub payload_bytes: u64,
    pub envelope_bytes: u64,
}

/// Ring buffer of recent operations. Disabled unless a capacity is set.
#[derive(Debug, Default)]
pub(crate) struct EventLog {
    capacity: usize,
    next_seq: u64,
    events: VecDeque<OpEvent>,
}

impl EventLog {
    pub(crate) fn record(
        &mut self,
        class: SubstrateClass,
        op: &str,
        key: &str,
        payload_bytes: u64,
        envelope_bytes: u64,
    ) {
        let seq = self.next_seq;
        self.next_seq += 1;
        if self.capacity == 0 {
            return;
        }
        if self.events.len() == self.capacity {
            self.events.pop_front();
        }
        self.events.push_back(OpEvent {
            seq,
            class,
            op: op.to_string(),
            key: key.to_string(),
            payload_bytes,
            envelope_bytes,
        });
    }
}

#[derive(Debug, Default)]
pub(crate) struct Ledger {
    pub(crate) traffic: TrafficCounters,
    pub(crate) log: EventLog,
}

/// Shared accounting and change notification for every store in a world.
#[derive(Debug, Default)]
pub struct Hub {
    ledger: Mutex<Ledger>,
    version: Mutex<u64>,
    changed: Condvar,
}

impl Hub {
    pub fn with_log_capacity(capacity: usize) -> Hub {
        let hub = Hub::default();
        hub.ledger.lock().unwrap().log.capacity = capacity;
        hub
    }

    pub(crate) fn ledger(&self) -> MutexGuard<'_, Ledger> {
        self.ledger.lock().expect("ledger poisoned")
    }

    pub fn snapshot(&self) -> TrafficCounters {
        self.ledger().traffic.clone()
    }

    pub fn events(&self) -> Vec<OpEvent> {
        self.ledger().log.events.iter().cloned().collect()
    }

    /// Current events as JSON lines.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.events() {
            out.push_str(&serde_json::to_string(&e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn version(&self) -> u64 {
        *self.version.lock().expect("version poisoned")
    }

    pub(crate) fn bump(&self) {
        let mut v = self.version.lock().expect("version poisoned");
        *v += 1;
        self.changed.notify_all();
    }

    /// Blocks until some store changes after `seen`, or the timeout elapses.
    /// Returns the version observed on wake-up.
    pub fn wait_for_change(&self, seen: u64, timeout: Duration) -> u64 {
        let guard = self.version.lock().expect("version poisoned");
        let (guard, _) = self
            .changed
            .wait_timeout_while(guard, timeout, |v| *v == seen)
            .expect("version poisoned");
        *guard
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_names_roundtrip() {
        for c in SubstrateClass::ALL {
            assert_eq!(c.as_str().parse::<SubstrateClass>().unwrap(), c);
        }
        assert!("redis".parse::<SubstrateClass>().is_err());
    }

    #[test]
    fn json_dump_keys_by_class() {
        let mut t = TrafficCounters::default();
        t.class_mut(SubstrateClass::SharedDB).bytes_written = 800;
        let v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(v["SharedDB"]["bytes_written"], 800);
        assert_eq!(v["LocalDB"]["op_count"], 0);
    }

    #[test]
    fn bounded_log_keeps_latest() {
        let mut log = EventLog {
            capacity: 2,
            ..Default::default()
        };
        for i in 0..5 {
            log.record(SubstrateClass::Queue, "push", &format!("k{i}"), 0, 64);
        }
        let keys: Vec<_> = log.events.iter().map(|e| e.key.clone()).collect();
        assert_eq!(keys, vec!["k3", "k4"]);
        assert_eq!(log.events.back().unwrap().seq, 4);
    }
}
