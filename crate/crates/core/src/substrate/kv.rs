use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use super::codec::Frame;
use super::counters::{Hub, SubstrateClass};
use super::{Stamped, WorkerId, ENVELOPE_BYTES};
use crate::error::{Error, Result};
use crate::sgd::mean_of;

#[derive(Debug, Clone)]
struct Entry {
    frame: Frame,
    ready_at: f64,
}

#[derive(Debug, Default)]
struct KvInner {
    entries: HashMap<String, Entry>,
    /// (barrier name, round) → worker → simulated arrival time.
    barriers: HashMap<(String, u64), BTreeMap<WorkerId, f64>>,
}

/// Arrivals registered at a barrier, keyed by worker.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BarrierStatus {
    pub arrivals: BTreeMap<WorkerId, f64>,
}

impl BarrierStatus {
    pub fn count(&self) -> usize {
        self.arrivals.len()
    }

    pub fn latest_arrival(&self) -> Option<f64> {
        self.arrivals.values().copied().reduce(f64::max)
    }

    pub fn missing(&self, workers: usize) -> Vec<WorkerId> {
        (0..workers)
            .filter(|w| !self.arrivals.contains_key(w))
            .collect()
    }
}

/// Key-value store with server-side averaging and set-based barriers.
///
/// Every operation is atomic under the store lock and its counter update
/// happens inside the same critical section.
#[derive(Debug)]
pub struct KvStore {
    class: SubstrateClass,
    name: String,
    hub: Arc<Hub>,
    inner: Mutex<KvInner>,
}

impl KvStore {
    pub fn new(class: SubstrateClass, name: impl Into<String>, hub: Arc<Hub>) -> Self {
        KvStore {
            class,
            name: name.into(),
            hub,
            inner: Mutex::new(KvInner::default()),
        }
    }

    pub fn class(&self) -> SubstrateClass {
        self.class
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, KvInner> {
        self.inner.lock().expect("kv store poisoned")
    }

    /// Stores `frame` under `key`; a second put to the same key replaces the first.
    pub fn put(&self, key: &str, frame: Frame, at: f64) -> Result<()> {
        if key.is_empty() {
            return Err(Error::contract("kv key must be non-empty"));
        }
        {
            let mut inner = self.lock();
            let mut ledger = self.hub.ledger();
            let c = ledger.traffic.class_mut(self.class);
            c.op_count += 1;
            c.bytes_written += frame.payload_len();
            c.envelope_bytes_written += frame.framing_len();
            ledger
                .log
                .record(self.class, "kv_put", key, frame.payload_len(), frame.framing_len());
            inner.entries.insert(
                key.to_string(),
                Entry {
                    frame,
                    ready_at: at,
                },
            );
        }
        self.hub.bump();
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<Stamped<Frame>> {
        self.read(key, false)
    }

    /// Same as [`KvStore::get`], also tallied as a cross-worker read.
    pub fn get_as_peer(&self, key: &str) -> Result<Stamped<Frame>> {
        self.read(key, true)
    }

    fn read(&self, key: &str, peer: bool) -> Result<Stamped<Frame>> {
        let inner = self.lock();
        let mut ledger = self.hub.ledger();
        let entry = inner.entries.get(key).cloned();
        let c = ledger.traffic.class_mut(self.class);
        c.op_count += 1;
        match entry {
            Some(e) => {
                c.bytes_read += e.frame.payload_len();
                c.envelope_bytes_read += e.frame.framing_len();
                if peer {
                    c.peer_bytes_read += e.frame.payload_len();
                }
                let op = if peer { "kv_get_peer" } else { "kv_get" };
                ledger
                    .log
                    .record(self.class, op, key, e.frame.payload_len(), e.frame.framing_len());
                Ok(Stamped {
                    value: e.frame,
                    ready_at: e.ready_at,
                })
            }
            None => {
                ledger.log.record(self.class, "kv_get_miss", key, 0, 0);
                Err(Error::KeyNotFound(format!("{}/{}", self.name, key)))
            }
        }
    }

    /// Elementwise mean of the input payloads, computed inside the store and
    /// written to `output`. Charged as one operation writing one payload and
    /// reading nothing across the client boundary. Inputs are summed in the
    /// order given. Returns the simulated time at which the output is ready
    /// and the payload bytes written.
    pub fn server_average(&self, inputs: &[String], output: &str, at: f64) -> Result<(f64, u64)> {
        if output.is_empty() {
            return Err(Error::contract("kv key must be non-empty"));
        }
        if inputs.is_empty() {
            return Err(Error::contract("server_average needs at least one input"));
        }
        let ready_at;
        let payload;
        {
            let mut inner = self.lock();
            let mut decoded = Vec::with_capacity(inputs.len());
            let mut latest = at;
            for key in inputs {
                let e = inner
                    .entries
                    .get(key)
                    .ok_or_else(|| Error::KeyNotFound(format!("{}/{}", self.name, key)))?;
                latest = latest.max(e.ready_at);
                decoded.push(e.frame.decode());
            }
            if decoded.iter().any(|d| d.len() != decoded[0].len()) {
                return Err(Error::contract("server_average inputs differ in length"));
            }
            let mean = mean_of(decoded.iter().map(|v| v.as_slice()))?;
            let frame = Frame::encode(&mean);
            payload = frame.payload_len();
            ready_at = latest;
            let mut ledger = self.hub.ledger();
            let c = ledger.traffic.class_mut(self.class);
            c.op_count += 1;
            c.bytes_written += payload;
            c.envelope_bytes_written += frame.framing_len();
            ledger
                .log
                .record(self.class, "kv_server_average", output, payload, frame.framing_len());
            inner.entries.insert(
                output.to_string(),
                Entry {
                    frame,
                    ready_at,
                },
            );
        }
        self.hub.bump();
        Ok((ready_at, payload))
    }

    /// Atomic set-add of `worker` to the barrier `(barrier, round)`; returns the
    /// number of distinct workers registered. Re-adding a worker keeps its
    /// first arrival time.
    pub fn barrier_add(&self, barrier: &str, round: u64, worker: WorkerId, at: f64) -> usize {
        let count = {
            let mut inner = self.lock();
            let set = inner
                .barriers
                .entry((barrier.to_string(), round))
                .or_default();
            set.entry(worker).or_insert(at);
            let count = set.len();
            let mut ledger = self.hub.ledger();
            let c = ledger.traffic.class_mut(self.class);
            c.op_count += 1;
            c.envelope_bytes_written += ENVELOPE_BYTES;
            let label = format!("{barrier}/{round}/{worker}");
            ledger
                .log
                .record(self.class, "barrier_add", &label, 0, ENVELOPE_BYTES);
            count
        };
        self.hub.bump();
        count
    }

    /// One poll of a barrier. Counted as an operation without bytes.
    pub fn barrier_status(&self, barrier: &str, round: u64) -> BarrierStatus {
        let inner = self.lock();
        let arrivals = inner
            .barriers
            .get(&(barrier.to_string(), round))
            .cloned()
            .unwrap_or_default();
        let mut ledger = self.hub.ledger();
        ledger.traffic.class_mut(self.class).op_count += 1;
        ledger
            .log
            .record(self.class, "barrier_poll", &format!("{barrier}/{round}"), 0, 0);
        BarrierStatus { arrivals }
    }

    /// Uncounted existence probe for assertions and tests.
    pub fn contains(&self, key: &str) -> bool {
        self.lock().entries.contains_key(key)
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
