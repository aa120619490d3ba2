use serde::{Deserialize, Serialize};

use super::SubstrateClass;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassLatency {
    /// Seconds charged per operation.
    pub fixed_latency: f64,
    /// Bytes per second.
    #[serde(with = "crate::float_serde")]
    pub bandwidth: f64,
}

impl ClassLatency {
    pub fn new(fixed_latency: f64, bandwidth: f64) -> Self {
        ClassLatency {
            fixed_latency,
            bandwidth,
        }
    }

    pub fn cost(&self, bytes: u64) -> f64 {
        self.fixed_latency + bytes as f64 / self.bandwidth
    }
}

/// Per-class cost of an operation in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub local_db: ClassLatency,
    pub shared_db: ClassLatency,
    pub queue: ClassLatency,
    pub object_store: ClassLatency,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            local_db: ClassLatency::new(0.0005, 2.0e9),
            shared_db: ClassLatency::new(0.002, 1.25e8),
            queue: ClassLatency::new(0.001, 1.0e8),
            object_store: ClassLatency::new(0.02, 8.0e7),
        }
    }
}

impl LatencyModel {
    /// Zero fixed latency and effectively unbounded bandwidth.
    pub fn zero() -> Self {
        let free = ClassLatency::new(0.0, f64::INFINITY);
        LatencyModel {
            local_db: free,
            shared_db: free,
            queue: free,
            object_store: free,
        }
    }

    pub fn uniform(fixed_latency: f64, bandwidth: f64) -> Self {
        let l = ClassLatency::new(fixed_latency, bandwidth);
        LatencyModel {
            local_db: l,
            shared_db: l,
            queue: l,
            object_store: l,
        }
    }

    pub fn class(&self, class: SubstrateClass) -> ClassLatency {
        match class {
            SubstrateClass::LocalDB => self.local_db,
            SubstrateClass::SharedDB => self.shared_db,
            SubstrateClass::Queue => self.queue,
            SubstrateClass::ObjectStore => self.object_store,
        }
    }

    pub fn class_mut(&mut self, class: SubstrateClass) -> &mut ClassLatency {
        match class {
            SubstrateClass::LocalDB => &mut self.local_db,
            SubstrateClass::SharedDB => &mut self.shared_db,
            SubstrateClass::Queue => &mut self.queue,
            SubstrateClass::ObjectStore => &mut self.object_store,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for class in SubstrateClass::ALL {
            let l = self.class(class);
            if !(l.fixed_latency >= 0.0) || !l.fixed_latency.is_finite() {
                return Err(Error::config(format!("{class}: fixed_latency must be >= 0")));
            }
            if !(l.bandwidth > 0.0) {
                return Err(Error::config(format!("{class}: bandwidth must be > 0")));
            }
        }
        Ok(())
    }
}

/// A worker's logical clock in simulated seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub now: f64,
}

impl SimClock {
    pub fn at(now: f64) -> Self {
        SimClock { now }
    }

    pub fn advance(&mut self, seconds: f64) {
        self.now += seconds;
    }

    /// Moves forward to `t` if `t` lies in the future; returns the time skipped.
    pub fn wait_until(&mut self, t: f64) -> f64 {
        if t > self.now {
            let waited = t - self.now;
            self.now = t;
            waited
        } else {
            0.0
        }
    }
}

/// Charges one operation of `bytes` on `class` to `clock`; returns the seconds charged.
pub fn charge_latency(
    clock: &mut SimClock,
    model: &LatencyModel,
    class: SubstrateClass,
    bytes: u64,
) -> f64 {
    let elapsed = model.class(class).cost(bytes);
    clock.advance(elapsed);
    elapsed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_plus_bandwidth() {
        let mut clock = SimClock::default();
        let m = LatencyModel::uniform(0.01, 1e6);
        assert_eq!(charge_latency(&mut clock, &m, SubstrateClass::SharedDB, 0), 0.01);
        let m = LatencyModel::uniform(0.0, 1e6);
        assert_eq!(charge_latency(&mut clock, &m, SubstrateClass::Queue, 500_000), 0.5);
        assert!((clock.now - 0.51).abs() < 1e-15);
    }

    #[test]
    fn zero_model_charges_nothing() {
        let mut clock = SimClock::default();
        charge_latency(&mut clock, &LatencyModel::zero(), SubstrateClass::LocalDB, 1 << 20);
        assert_eq!(clock.now, 0.0);
    }

    #[test]
    fn validation() {
        assert!(LatencyModel::default().validate().is_ok());
        assert!(LatencyModel::uniform(-1.0, 1.0).validate().is_err());
        assert!(LatencyModel::uniform(0.0, 0.0).validate().is_err());
    }

    #[test]
    fn wait_until_only_moves_forward() {
        let mut c = SimClock::at(2.0);
        assert_eq!(c.wait_until(1.0), 0.0);
        assert_eq!(c.wait_until(3.5), 1.5);
        assert_eq!(c.now, 3.5);
    }
}
