//! A worker's handle onto the substrate for one invocation: performs each
//! operation, charges it to the worker's simulated clock, and keeps a
//! worker-attributed copy of the traffic tallies.
//!
//! Polls that come back empty are not tallied here, so round records do not
//! depend on how actors were scheduled. The substrate's own counters still
//! see every poll.

use super::simulated_barrier_wait;
use crate::error::Result;
use crate::substrate::{
    charge_latency, BarrierStatus, Frame, KvStore, LatencyModel, MessageQueue, ObjectStore,
    QueueMessage, SimClock, Stamped, SubstrateClass, TrafficCounters, WorkerId, ENVELOPE_BYTES,
    HEADER_LEN,
};

#[derive(Debug, Clone)]
pub(crate) struct Link {
    pub clock: SimClock,
    pub started_at: f64,
    latency: LatencyModel,
    pub tally: TrafficCounters,
    pub compute_s: f64,
    pub transfer_s: f64,
    pub sync_wait_s: f64,
}

impl Link {
    pub fn new(start: f64, latency: LatencyModel) -> Self {
        Link {
            clock: SimClock::at(start),
            started_at: start,
            latency,
            tally: TrafficCounters::default(),
            compute_s: 0.0,
            transfer_s: 0.0,
            sync_wait_s: 0.0,
        }
    }

    pub fn elapsed(&self) -> f64 {
        self.clock.now - self.started_at
    }

    pub fn now(&self) -> f64 {
        self.clock.now
    }

    pub fn compute(&mut self, seconds: f64) {
        self.compute_s += seconds;
        self.clock.advance(seconds);
    }

    fn charge(&mut self, class: SubstrateClass, bytes: u64) {
        self.transfer_s += charge_latency(&mut self.clock, &self.latency, class, bytes);
    }

    fn charge_fixed(&mut self, class: SubstrateClass) {
        let fixed = self.latency.class(class).fixed_latency;
        self.transfer_s += fixed;
        self.clock.advance(fixed);
    }

    /// Idles until `t`; the skipped time counts as synchronization wait.
    pub fn await_ready(&mut self, t: f64) {
        self.sync_wait_s += self.clock.wait_until(t);
    }

    pub fn tick(&self, class: SubstrateClass) -> f64 {
        self.latency.class(class).fixed_latency
    }

    pub fn kv_put(&mut self, store: &KvStore, key: &str, values: &[f64]) -> Result<()> {
        let frame = Frame::encode(values);
        let (payload, framing) = (frame.payload_len(), frame.framing_len());
        self.charge(store.class(), payload + framing);
        store.put(key, frame, self.clock.now)?;
        let c = self.tally.class_mut(store.class());
        c.op_count += 1;
        c.bytes_written += payload;
        c.envelope_bytes_written += framing;
        Ok(())
    }

    pub fn kv_get(&mut self, store: &KvStore, key: &str) -> Result<Vec<f64>> {
        self.kv_read(store, key, false)
    }

    pub fn kv_get_peer(&mut self, store: &KvStore, key: &str) -> Result<Vec<f64>> {
        self.kv_read(store, key, true)
    }

    fn kv_read(&mut self, store: &KvStore, key: &str, peer: bool) -> Result<Vec<f64>> {
        let got = if peer {
            store.get_as_peer(key)
        } else {
            store.get(key)
        };
        let class = store.class();
        self.tally.class_mut(class).op_count += 1;
        let got = got?;
        let (payload, framing) = (got.value.payload_len(), got.value.framing_len());
        let c = self.tally.class_mut(class);
        c.bytes_read += payload;
        c.envelope_bytes_read += framing;
        if peer {
            c.peer_bytes_read += payload;
        }
        self.await_ready(got.ready_at);
        self.charge(class, payload + framing);
        Ok(got.value.decode())
    }

    /// In-store averaging: only the request crosses the client boundary.
    pub fn kv_server_average(&mut self, store: &KvStore, inputs: &[String], out: &str) -> Result<()> {
        self.charge_fixed(store.class());
        let (ready, payload) = store.server_average(inputs, out, self.clock.now)?;
        let c = self.tally.class_mut(store.class());
        c.op_count += 1;
        c.bytes_written += payload;
        c.envelope_bytes_written += HEADER_LEN as u64;
        self.await_ready(ready);
        Ok(())
    }

    pub fn barrier_add(&mut self, store: &KvStore, barrier: &str, round: u64, worker: WorkerId) -> usize {
        self.charge(store.class(), ENVELOPE_BYTES);
        let n = store.barrier_add(barrier, round, worker, self.clock.now);
        let c = self.tally.class_mut(store.class());
        c.op_count += 1;
        c.envelope_bytes_written += ENVELOPE_BYTES;
        n
    }

    /// One poll. When at least `needed` members are present, charges the
    /// simulated wait from `since` and returns the status.
    pub fn barrier_poll(
        &mut self,
        store: &KvStore,
        barrier: &str,
        round: u64,
        needed: usize,
        since: f64,
        only_self: bool,
    ) -> Option<BarrierStatus> {
        let status = store.barrier_status(barrier, round);
        if status.count() < needed {
            return None;
        }
        self.tally.class_mut(store.class()).op_count += 1;
        if !only_self {
            let last = status.latest_arrival().unwrap_or(since);
            let wait = simulated_barrier_wait(since, last, self.tick(store.class()));
            self.await_ready(since + wait);
        }
        Some(status)
    }

    pub fn push(&mut self, queue: &MessageQueue, msg: QueueMessage) {
        let bytes = msg.wire_bytes();
        self.charge(SubstrateClass::Queue, bytes);
        queue.push(msg, self.clock.now);
        let c = self.tally.class_mut(SubstrateClass::Queue);
        c.op_count += 1;
        c.envelope_bytes_written += bytes;
    }

    /// Non-blocking poll. Nothing is tallied or charged until the message is
    /// consumed through [`Link::receive`].
    pub fn try_poll(&self, queue: &MessageQueue) -> Option<Stamped<QueueMessage>> {
        queue.try_poll()
    }

    /// Accounts for having received `messages`: wait for the latest one, then
    /// one queue charge per message. Independent of arrival order.
    pub fn receive<'m>(&mut self, messages: impl IntoIterator<Item = (&'m QueueMessage, f64)>) {
        let mut latest = f64::NEG_INFINITY;
        let mut bytes = Vec::new();
        for (m, t) in messages {
            latest = latest.max(t);
            bytes.push(m.wire_bytes());
        }
        if bytes.is_empty() {
            return;
        }
        self.await_ready(latest);
        bytes.sort_unstable();
        for b in bytes {
            self.charge(SubstrateClass::Queue, b);
            let c = self.tally.class_mut(SubstrateClass::Queue);
            c.op_count += 1;
            c.envelope_bytes_read += b;
        }
    }

    pub fn object_put(&mut self, bucket: &ObjectStore, key: &str, values: &[f64]) -> Result<()> {
        let frame = Frame::encode(values);
        let (payload, framing) = (frame.payload_len(), frame.framing_len());
        self.charge(SubstrateClass::ObjectStore, payload + framing);
        bucket.put(key, frame, self.clock.now)?;
        let c = self.tally.class_mut(SubstrateClass::ObjectStore);
        c.op_count += 1;
        c.bytes_written += payload;
        c.envelope_bytes_written += framing;
        Ok(())
    }

    pub fn object_get(&mut self, bucket: &ObjectStore, key: &str) -> Result<Vec<f64>> {
        let got = bucket.get(key);
        self.tally.class_mut(SubstrateClass::ObjectStore).op_count += 1;
        let got = got?;
        let (payload, framing) = (got.value.payload_len(), got.value.framing_len());
        let c = self.tally.class_mut(SubstrateClass::ObjectStore);
        c.bytes_read += payload;
        c.envelope_bytes_read += framing;
        self.await_ready(got.ready_at);
        self.charge(SubstrateClass::ObjectStore, payload + framing);
        Ok(got.value.decode())
    }

    /// Listing is free in simulated time until it succeeds; callers charge
    /// the successful list via [`Link::charge_list`].
    pub fn object_list(&mut self, bucket: &ObjectStore, prefix: &str) -> Vec<String> {
        bucket.list(prefix)
    }

    pub fn charge_list(&mut self) {
        self.tally.class_mut(SubstrateClass::ObjectStore).op_count += 1;
        self.charge_fixed(SubstrateClass::ObjectStore);
    }
}
