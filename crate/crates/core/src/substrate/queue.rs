use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::counters::{Hub, SubstrateClass};
use super::{Stamped, WorkerId, ENVELOPE_BYTES};
use crate::error::{Error, Result};

/// Sender id used by the MLLess supervisor.
pub const SUPERVISOR_ID: WorkerId = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    GradReady,
    UpdateKey,
    Proceed,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueMessage {
    pub sender: WorkerId,
    pub round: u64,
    pub kind: MessageKind,
    pub payload_key: Option<String>,
}

impl QueueMessage {
    /// Only `UpdateKey` carries a key; every other kind must not.
    pub fn new(
        sender: WorkerId,
        round: u64,
        kind: MessageKind,
        payload_key: Option<String>,
    ) -> Result<Self> {
        match (kind, &payload_key) {
            (MessageKind::UpdateKey, Some(k)) if !k.is_empty() => {}
            (MessageKind::UpdateKey, _) => {
                return Err(Error::contract("UpdateKey message needs a payload key"))
            }
            (_, Some(_)) => {
                return Err(Error::contract(format!("{kind:?} message must not carry a key")))
            }
            _ => {}
        }
        Ok(QueueMessage {
            sender,
            round,
            kind,
            payload_key,
        })
    }

    pub fn update_key(sender: WorkerId, round: u64, key: impl Into<String>) -> Self {
        QueueMessage::new(sender, round, MessageKind::UpdateKey, Some(key.into()))
            .expect("non-empty key")
    }

    pub fn signal(sender: WorkerId, round: u64, kind: MessageKind) -> Self {
        debug_assert!(kind != MessageKind::UpdateKey);
        QueueMessage {
            sender,
            round,
            kind,
            payload_key: None,
        }
    }

    /// Envelope cost charged to the Queue class.
    pub fn wire_bytes(&self) -> u64 {
        ENVELOPE_BYTES + self.payload_key.as_ref().map_or(0, |k| k.len() as u64)
    }
}

/// FIFO message queue. Messages carry the simulated time they were sent.
#[derive(Debug)]
pub struct MessageQueue {
    name: String,
    hub: Arc<Hub>,
    inner: Mutex<VecDeque<Stamped<QueueMessage>>>,
    arrived: Condvar,
}

impl MessageQueue {
    pub fn new(name: impl Into<String>, hub: Arc<Hub>) -> Self {
        MessageQueue {
            name: name.into(),
            hub,
            inner: Mutex::new(VecDeque::new()),
            arrived: Condvar::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn push(&self, msg: QueueMessage, at: f64) {
        {
            let mut q = self.inner.lock().expect("queue poisoned");
            let mut ledger = self.hub.ledger();
            let c = ledger.traffic.class_mut(SubstrateClass::Queue);
            c.op_count += 1;
            c.envelope_bytes_written += msg.wire_bytes();
            ledger
                .log
                .record(SubstrateClass::Queue, "queue_push", &self.name, 0, msg.wire_bytes());
            q.push_back(Stamped {
                value: msg,
                ready_at: at,
            });
            self.arrived.notify_all();
        }
        self.hub.bump();
    }

    fn take(&self, q: &mut VecDeque<Stamped<QueueMessage>>) -> Option<Stamped<QueueMessage>> {
        let msg = q.pop_front();
        let mut ledger = self.hub.ledger();
        let c = ledger.traffic.class_mut(SubstrateClass::Queue);
        c.op_count += 1;
        if let Some(m) = &msg {
            c.envelope_bytes_read += m.value.wire_bytes();
            ledger.log.record(
                SubstrateClass::Queue,
                "queue_poll",
                &self.name,
                0,
                m.value.wire_bytes(),
            );
        }
        msg
    }

    /// Non-blocking poll.
    pub fn try_poll(&self) -> Option<Stamped<QueueMessage>> {
        let mut q = self.inner.lock().expect("queue poisoned");
        self.take(&mut q)
    }

    /// Waits up to `max_wait` for a message; `None` on timeout.
    pub fn poll(&self, max_wait: Duration) -> Option<Stamped<QueueMessage>> {
        let deadline = Instant::now() + max_wait;
        let mut q = self.inner.lock().expect("queue poisoned");
        while q.is_empty() {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            q = self
                .arrived
                .wait_timeout(q, deadline - now)
                .expect("queue poisoned")
                .0;
        }
        self.take(&mut q)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("queue poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn queue() -> (Arc<Hub>, MessageQueue) {
        let hub = Arc::new(Hub::default());
        (hub.clone(), MessageQueue::new("q", hub))
    }

    #[test]
    fn push_then_poll() {
        let (hub, q) = queue();
        let msg = QueueMessage::update_key(2, 5, "mlless/5/2");
        q.push(msg.clone(), 1.5);
        let got = q.poll(Duration::from_millis(10)).unwrap();
        assert_eq!(got.value, msg);
        assert_eq!(got.ready_at, 1.5);
        let c = hub.snapshot().class(SubstrateClass::Queue);
        assert_eq!(c.envelope_bytes_written, 64 + 10);
        assert_eq!(c.envelope_bytes_read, 64 + 10);
        assert_eq!(c.bytes_written, 0);
    }

    #[test]
    fn empty_poll_times_out() {
        let (_, q) = queue();
        let start = Instant::now();
        assert!(q.poll(Duration::from_millis(20)).is_none());
        assert!(start.elapsed() >= Duration::from_millis(20));
        assert!(q.try_poll().is_none());
    }

    #[test]
    fn per_sender_order_preserved() {
        let (_, q) = queue();
        let q = Arc::new(q);
        let handles: Vec<_> = (0..2)
            .map(|s| {
                let q = q.clone();
                std::thread::spawn(move || {
                    for r in 0..50 {
                        q.push(QueueMessage::signal(s, r, MessageKind::Done), 0.0);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let mut next = [0u64; 2];
        while let Some(m) = q.try_poll() {
            assert_eq!(m.value.round, next[m.value.sender]);
            next[m.value.sender] += 1;
        }
        assert_eq!(next, [50, 50]);
    }

    #[test]
    fn kind_key_contract() {
        assert!(QueueMessage::new(0, 0, MessageKind::UpdateKey, None).is_err());
        assert!(QueueMessage::new(0, 0, MessageKind::Proceed, Some("k".into())).is_err());
        assert!(QueueMessage::new(0, 0, MessageKind::Done, None).is_ok());
    }
}
