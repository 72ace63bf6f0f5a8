//! In-process message bus with deterministic delivery.
//!
//! Each registered endpoint owns an inbox. Senders may run on any thread;
//! every send validates and audits the envelope, then counts it in the
//! meter. Receiving always pops the queued message with the smallest
//! ordering key, so delivery order is a pure function of the keys rather
//! than of thread scheduling — the single-threaded and multi-threaded
//! drivers see identical sequences. Messages between a sender/receiver pair
//! keep their send order (their keys grow monotonically through the
//! protocol's phases).

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::transport::{Endpoint, Envelope, MessageMeter};

#[derive(Default)]
struct BusState {
    inboxes: BTreeMap<Endpoint, VecDeque<Envelope>>,
    meter: MessageMeter,
}

/// Shared in-process carrier; cheap to share by reference across threads.
#[derive(Default)]
pub struct InProcessBus {
    state: Mutex<BusState>,
    arrived: Condvar,
}

impl InProcessBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Create an inbox. Sending to an unregistered endpoint is an error, so
    /// every actor registers before the protocol starts.
    pub fn register(&self, endpoint: Endpoint) {
        let mut state = self.state.lock().expect("bus lock poisoned");
        state.inboxes.entry(endpoint).or_default();
    }

    pub fn is_registered(&self, endpoint: Endpoint) -> bool {
        let state = self.state.lock().expect("bus lock poisoned");
        state.inboxes.contains_key(&endpoint)
    }

    /// Validate, audit, meter, and enqueue. Audit rejections are counted
    /// and returned as errors without delivering anything.
    pub fn send(&self, envelope: Envelope) -> Result<()> {
        let mut state = self.state.lock().expect("bus lock poisoned");
        if let Err(violation) = envelope.validate() {
            if matches!(violation, Error::PayloadViolation { .. }) {
                state.meter.record_violation();
            }
            return Err(violation);
        }
        let Some(inbox) = state.inboxes.get_mut(&envelope.receiver) else {
            return Err(Error::UnknownEndpoint(format!(
                "{}/{}",
                envelope.receiver.0, envelope.receiver.1
            )));
        };
        inbox.push_back(envelope.clone());
        state.meter.record(&envelope);
        self.arrived.notify_all();
        Ok(())
    }

    /// Pop the smallest-keyed waiting message, or `None` when the inbox is
    /// empty. Errors on unregistered endpoints.
    pub fn try_recv(&self, endpoint: Endpoint) -> Result<Option<Envelope>> {
        let mut state = self.state.lock().expect("bus lock poisoned");
        Self::pop_min(&mut state, endpoint)
    }

    /// Non-blocking receive for lockstep drivers, where a message must
    /// already be waiting; an empty inbox means the protocol got out of step.
    pub fn recv(&self, endpoint: Endpoint) -> Result<Envelope> {
        self.try_recv(endpoint)?.ok_or_else(|| {
            Error::Protocol(format!(
                "no message waiting for {}/{}",
                endpoint.0, endpoint.1
            ))
        })
    }

    /// Blocking receive for threaded drivers. Times out with a protocol
    /// error instead of hanging when a peer stalls.
    pub fn recv_timeout(&self, endpoint: Endpoint, timeout: Duration) -> Result<Envelope> {
        let deadline = Instant::now() + timeout;
        let mut state = self.state.lock().expect("bus lock poisoned");
        loop {
            if let Some(env) = Self::pop_min(&mut state, endpoint)? {
                return Ok(env);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Protocol(format!(
                    "timed out after {timeout:?} waiting for a message to {}/{}",
                    endpoint.0, endpoint.1
                )));
            }
            let (next, _) = self
                .arrived
                .wait_timeout(state, deadline - now)
                .expect("bus lock poisoned");
            state = next;
        }
    }

    /// Snapshot of the message accounting.
    pub fn meter(&self) -> MessageMeter {
        let state = self.state.lock().expect("bus lock poisoned");
        state.meter.clone()
    }

    fn pop_min(state: &mut BusState, endpoint: Endpoint) -> Result<Option<Envelope>> {
        let inbox = state.inboxes.get_mut(&endpoint).ok_or_else(|| {
            Error::UnknownEndpoint(format!("{}/{}", endpoint.0, endpoint.1))
        })?;
        if inbox.is_empty() {
            return Ok(None);
        }
        let mut best = 0;
        for i in 1..inbox.len() {
            if inbox[i].ordering_key() < inbox[best].ordering_key() {
                best = i;
            }
        }
        Ok(inbox.remove(best))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::topology::{NetId, WorkerId};
    use crate::transport::{MsgType, Phase, CONTEXTS_TENSOR};

    fn ep(net: u32, worker: u32) -> Endpoint {
        (NetId(net), WorkerId(worker))
    }

    fn context_env(worker: u32, batch: u64) -> Envelope {
        Envelope::new(
            MsgType::ContextBatch,
            0,
            batch,
            Phase::Contexts,
            ep(1, worker),
            ep(2, 1),
            vec![(CONTEXTS_TENSOR.into(), Tensor::filled(&[2, 3], worker as f64))],
        )
        .unwrap()
    }

    #[test]
    fn sending_to_an_unregistered_endpoint_fails() {
        let bus = InProcessBus::new();
        bus.register(ep(1, 1));
        let err = bus.send(context_env(1, 0)).unwrap_err();
        assert!(matches!(err, Error::UnknownEndpoint(_)));
        assert!(bus.try_recv(ep(9, 9)).is_err());
    }

    #[test]
    fn delivery_follows_worker_id_within_a_phase() {
        let bus = InProcessBus::new();
        bus.register(ep(2, 1));
        // Sent out of order; received in worker-id order.
        bus.send(context_env(2, 0)).unwrap();
        bus.send(context_env(1, 0)).unwrap();
        assert_eq!(bus.recv(ep(2, 1)).unwrap().sender, ep(1, 1));
        assert_eq!(bus.recv(ep(2, 1)).unwrap().sender, ep(1, 2));
        assert!(bus.recv(ep(2, 1)).is_err(), "inbox should be empty now");
    }

    #[test]
    fn earlier_batches_deliver_before_later_ones() {
        let bus = InProcessBus::new();
        bus.register(ep(2, 1));
        bus.send(context_env(1, 5)).unwrap();
        bus.send(context_env(1, 4)).unwrap();
        assert_eq!(bus.recv(ep(2, 1)).unwrap().batch, 4);
        assert_eq!(bus.recv(ep(2, 1)).unwrap().batch, 5);
    }

    #[test]
    fn meter_counts_successful_sends_and_audit_violations() {
        let bus = InProcessBus::new();
        bus.register(ep(2, 1));
        bus.send(context_env(1, 0)).unwrap();
        bus.send(context_env(2, 0)).unwrap();
        let mut bad = context_env(3, 0);
        bad.payload = vec![("raw_window".into(), Tensor::zeros(&[2, 3]))];
        assert!(bus.send(bad).is_err());
        let meter = bus.meter();
        assert_eq!(meter.count(0, 0, Phase::Contexts), 2);
        assert_eq!(meter.violations(), 1);
    }

    #[test]
    fn blocking_receive_sees_a_message_sent_from_another_thread() {
        let bus = std::sync::Arc::new(InProcessBus::new());
        bus.register(ep(2, 1));
        let sender = std::sync::Arc::clone(&bus);
        let handle = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            sender.send(context_env(1, 0)).unwrap();
        });
        let env = bus.recv_timeout(ep(2, 1), Duration::from_secs(5)).unwrap();
        assert_eq!(env.sender, ep(1, 1));
        handle.join().unwrap();
    }

    #[test]
    fn blocking_receive_times_out_with_a_protocol_error() {
        let bus = InProcessBus::new();
        bus.register(ep(2, 1));
        let err = bus
            .recv_timeout(ep(2, 1), Duration::from_millis(30))
            .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
