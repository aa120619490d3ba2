//! Instrumented in-process communication backends.
//!
//! A [`World`] bundles every store one experiment uses: a shared key-value
//! database, one local database per worker, a synchronization registry, one
//! inbound queue per worker plus a supervisor queue, and an object bucket.
//! All of them report into a single [`Hub`], so [`World::traffic_snapshot`]
//! gives a consistent view of the bytes moved per [`SubstrateClass`].
//!
//! Worker durable state lives in a separate [`CheckpointStore`] whose
//! traffic is tallied on its own and never mixed into the class counters.

mod codec;
mod counters;
mod kv;
mod latency;
mod object;
mod queue;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use codec::{Frame, HEADER_LEN};
pub use counters::{ClassCounters, Hub, OpEvent, SubstrateClass, TrafficCounters};
pub use kv::{BarrierStatus, KvStore};
pub use latency::{charge_latency, ClassLatency, LatencyModel, SimClock};
pub use object::ObjectStore;
pub use queue::{MessageKind, MessageQueue, QueueMessage, SUPERVISOR_ID};

use crate::error::{Error, Result};

pub type WorkerId = usize;

/// Fixed cost of a queue message or barrier registration, before the key.
pub const ENVELOPE_BYTES: u64 = 64;

/// A value together with the simulated time it became available.
#[derive(Debug, Clone, PartialEq)]
pub struct Stamped<T> {
    pub value: T,
    pub ready_at: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointCounters {
    pub bytes_saved: u64,
    pub bytes_loaded: u64,
    pub saves: u64,
    pub loads: u64,
}

/// Durable per-worker state between invocations.
#[derive(Debug, Default)]
pub struct CheckpointStore {
    blobs: Mutex<HashMap<String, Vec<u8>>>,
    counters: Mutex<CheckpointCounters>,
}

impl CheckpointStore {
    pub fn save(&self, key: &str, bytes: Vec<u8>) {
        let mut blobs = self.blobs.lock().expect("checkpoint poisoned");
        let mut c = self.counters.lock().expect("checkpoint poisoned");
        c.saves += 1;
        c.bytes_saved += bytes.len() as u64;
        blobs.insert(key.to_string(), bytes);
    }

    pub fn load(&self, key: &str) -> Result<Vec<u8>> {
        let blobs = self.blobs.lock().expect("checkpoint poisoned");
        let bytes = blobs
            .get(key)
            .cloned()
            .ok_or_else(|| Error::KeyNotFound(format!("checkpoint/{key}")))?;
        let mut c = self.counters.lock().expect("checkpoint poisoned");
        c.loads += 1;
        c.bytes_loaded += bytes.len() as u64;
        Ok(bytes)
    }

    pub fn counters(&self) -> CheckpointCounters {
        *self.counters.lock().expect("checkpoint poisoned")
    }
}

#[derive(Debug)]
pub struct World {
    hub: Arc<Hub>,
    workers: usize,
    pub shared_db: KvStore,
    pub local_dbs: Vec<KvStore>,
    /// Barrier registry for the SPIRT synchronization queue.
    pub sync: KvStore,
    pub worker_queues: Vec<MessageQueue>,
    pub supervisor_queue: MessageQueue,
    pub bucket: ObjectStore,
    pub checkpoint: CheckpointStore,
    aborted: AtomicBool,
}

impl World {
    pub fn new(workers: usize) -> Self {
        World::with_log_capacity(workers, 0)
    }

    /// `log_capacity` bounds the per-operation event log (0 disables it).
    pub fn with_log_capacity(workers: usize, log_capacity: usize) -> Self {
        let hub = Arc::new(Hub::with_log_capacity(log_capacity));
        World {
            shared_db: KvStore::new(SubstrateClass::SharedDB, "shared", hub.clone()),
            local_dbs: (0..workers)
                .map(|w| KvStore::new(SubstrateClass::LocalDB, format!("local{w}"), hub.clone()))
                .collect(),
            sync: KvStore::new(SubstrateClass::Queue, "sync", hub.clone()),
            worker_queues: (0..workers)
                .map(|w| MessageQueue::new(format!("inbox{w}"), hub.clone()))
                .collect(),
            supervisor_queue: MessageQueue::new("supervisor", hub.clone()),
            bucket: ObjectStore::new("bucket", hub.clone()),
            checkpoint: CheckpointStore::default(),
            aborted: AtomicBool::new(false),
            hub,
            workers,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    pub fn traffic_snapshot(&self) -> TrafficCounters {
        self.hub.snapshot()
    }

    pub fn abort(&self) {
        self.aborted.store(true, Ordering::SeqCst);
        self.hub.bump();
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted.load(Ordering::SeqCst)
    }

    pub(crate) fn clear_abort(&self) {
        self.aborted.store(false, Ordering::SeqCst);
    }
}

/// Free-function form of [`World::traffic_snapshot`].
pub fn traffic_snapshot(world: &World) -> TrafficCounters {
    world.traffic_snapshot()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_world_is_silent() {
        let world = World::new(4);
        let t = world.traffic_snapshot();
        assert!(t.classes.values().all(|c| c.is_zero()));
        assert_eq!(t.classes.len(), 4);
    }

    #[test]
    fn shared_put_only_touches_shared_class() {
        let world = World::new(2);
        world.shared_db.put("g", Frame::zeroed(800).unwrap(), 0.0).unwrap();
        let t = world.traffic_snapshot();
        assert_eq!(t.class(SubstrateClass::SharedDB).bytes_written, 800);
        for c in [SubstrateClass::LocalDB, SubstrateClass::Queue, SubstrateClass::ObjectStore] {
            assert!(t.class(c).is_zero());
        }
    }

    #[test]
    fn local_stores_share_one_class_tally() {
        let world = World::new(3);
        for (w, db) in world.local_dbs.iter().enumerate() {
            db.put("x", Frame::encode(&vec![0.0; w + 1]), 0.0).unwrap();
        }
        world.local_dbs[0].get_as_peer("x").unwrap();
        let c = world.traffic_snapshot().class(SubstrateClass::LocalDB);
        assert_eq!(c.bytes_written, 8 * (1 + 2 + 3));
        assert_eq!(c.peer_bytes_read, 8);
        assert_eq!(c.bytes_read, 8);
    }

    #[test]
    fn event_log_emits_json_lines() {
        let world = World::with_log_capacity(1, 8);
        world.shared_db.put("a", Frame::encode(&[1.0]), 0.0).unwrap();
        world.shared_db.get("a").unwrap();
        let text = world.hub().events_jsonl();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: OpEvent = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first.op, "kv_put");
        assert_eq!(first.payload_bytes, 8);
    }

    #[test]
    fn checkpoint_is_outside_class_counters() {
        let world = World::new(1);
        world.checkpoint.save("w0", vec![1, 2, 3]);
        assert_eq!(world.checkpoint.load("w0").unwrap(), vec![1, 2, 3]);
        assert!(world.checkpoint.load("w1").is_err());
        assert_eq!(world.checkpoint.counters().bytes_saved, 3);
        assert!(world.traffic_snapshot().classes.values().all(|c| c.is_zero()));
    }
}
