use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use super::codec::Frame;
use super::counters::{Hub, SubstrateClass};
use super::Stamped;
use crate::error::{Error, Result};

/// S3-style bucket: flat keys, prefix listing in lexicographic order.
#[derive(Debug)]
pub struct ObjectStore {
    name: String,
    hub: Arc<Hub>,
    objects: Mutex<BTreeMap<String, Stamped<Frame>>>,
}

impl ObjectStore {
    pub fn new(name: impl Into<String>, hub: Arc<Hub>) -> Self {
        ObjectStore {
            name: name.into(),
            hub,
            objects: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn put(&self, key: &str, frame: Frame, at: f64) -> Result<()> {
        if key.is_empty() {
            return Err(Error::contract("object key must be non-empty"));
        }
        {
            let mut objects = self.objects.lock().expect("bucket poisoned");
            let mut ledger = self.hub.ledger();
            let c = ledger.traffic.class_mut(SubstrateClass::ObjectStore);
            c.op_count += 1;
            c.bytes_written += frame.payload_len();
            c.envelope_bytes_written += frame.framing_len();
            ledger.log.record(
                SubstrateClass::ObjectStore,
                "object_put",
                key,
                frame.payload_len(),
                frame.framing_len(),
            );
            objects.insert(
                key.to_string(),
                Stamped {
                    value: frame,
                    ready_at: at,
                },
            );
        }
        self.hub.bump();
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<Stamped<Frame>> {
        let objects = self.objects.lock().expect("bucket poisoned");
        let mut ledger = self.hub.ledger();
        let c = ledger.traffic.class_mut(SubstrateClass::ObjectStore);
        c.op_count += 1;
        match objects.get(key) {
            Some(obj) => {
                c.bytes_read += obj.value.payload_len();
                c.envelope_bytes_read += obj.value.framing_len();
                ledger.log.record(
                    SubstrateClass::ObjectStore,
                    "object_get",
                    key,
                    obj.value.payload_len(),
                    obj.value.framing_len(),
                );
                Ok(obj.clone())
            }
            None => Err(Error::KeyNotFound(format!("{}/{}", self.name, key))),
        }
    }

    /// Keys starting with `prefix`, sorted. One operation, no payload bytes.
    pub fn list(&self, prefix: &str) -> Vec<String> {
        let objects = self.objects.lock().expect("bucket poisoned");
        let mut ledger = self.hub.ledger();
        ledger
            .traffic
            .class_mut(SubstrateClass::ObjectStore)
            .op_count += 1;
        ledger
            .log
            .record(SubstrateClass::ObjectStore, "object_list", prefix, 0, 0);
        objects
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_list_and_counters() {
        let hub = Arc::new(Hub::default());
        let bucket = ObjectStore::new("grads", hub.clone());
        for w in 0..4 {
            bucket
                .put(&format!("r3/w{w}"), Frame::encode(&[w as f64; 5]), 0.0)
                .unwrap();
        }
        bucket.put("r4/w0", Frame::encode(&[0.0]), 0.0).unwrap();
        assert_eq!(bucket.list("r3/").len(), 4);
        assert_eq!(bucket.get("r3/w2").unwrap().value.decode(), vec![2.0; 5]);
        let c = hub.snapshot().class(SubstrateClass::ObjectStore);
        assert_eq!(c.bytes_written, 4 * 40 + 8);
        assert_eq!(c.bytes_read, 40);
        assert!(matches!(bucket.get("r9/w0"), Err(Error::KeyNotFound(_))));
    }
}
