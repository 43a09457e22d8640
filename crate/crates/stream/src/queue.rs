//! Outbound connection queue with two lanes: reliable FIFO items that are
//! never dropped, and latest-wins slots where a newer item replaces an unsent one.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::protocol::PacketType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    Reliable,
    /// Depth-1 slot with the given index.
    Latest(usize),
}

pub const LATEST_SLOTS: usize = 2;

/// Dynamic frames and sensor poses are latest-wins; everything else is reliable.
pub fn lane_for(kind: PacketType) -> Lane {
    match kind {
        PacketType::DynFrame => Lane::Latest(0),
        PacketType::Pose => Lane::Latest(1),
        _ => Lane::Reliable,
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum QueueError {
    #[error("queue closed")]
    Closed,
    #[error("reliable queue exceeded {0} items; connection stalled")]
    Stalled(usize),
}

#[derive(Debug)]
struct State<T> {
    reliable: VecDeque<(u64, T)>,
    latest: [Option<(u64, T)>; LATEST_SLOTS],
    seq: u64,
    closed: bool,
    stalled: bool,
    dropped: u64,
}

#[derive(Debug)]
pub struct OutboundQueue<T> {
    cap: usize,
    state: Mutex<State<T>>,
    ready: Condvar,
}

impl<T> OutboundQueue<T> {
    /// `cap` bounds the reliable lane.
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            state: Mutex::new(State {
                reliable: VecDeque::new(),
                latest: [None, None],
                seq: 0,
                closed: false,
                stalled: false,
                dropped: 0,
            }),
            ready: Condvar::new(),
        }
    }

    /// Enqueues an item. Returns the unsent item it replaced, if any. Overflowing
    /// the reliable lane closes the queue.
    pub fn push(&self, lane: Lane, item: T) -> Result<Option<T>, QueueError> {
        let mut s = self.state.lock().expect("queue lock");
        if s.stalled {
            return Err(QueueError::Stalled(self.cap));
        }
        if s.closed {
            return Err(QueueError::Closed);
        }
        let seq = s.seq;
        s.seq += 1;
        let replaced = match lane {
            Lane::Reliable => {
                if s.reliable.len() >= self.cap {
                    s.stalled = true;
                    s.closed = true;
                    self.ready.notify_all();
                    return Err(QueueError::Stalled(self.cap));
                }
                s.reliable.push_back((seq, item));
                None
            }
            Lane::Latest(slot) => {
                let old = s.latest[slot].replace((seq, item)).map(|(_, v)| v);
                if old.is_some() {
                    s.dropped += 1;
                }
                old
            }
        };
        self.ready.notify_one();
        Ok(replaced)
    }

    fn take_next(s: &mut State<T>) -> Option<T> {
        let mut best: Option<(u64, Option<usize>)> = s.reliable.front().map(|(q, _)| (*q, None));
        for (i, slot) in s.latest.iter().enumerate() {
            if let Some((q, _)) = slot {
                if best.is_none_or(|(b, _)| *q < b) {
                    best = Some((*q, Some(i)));
                }
            }
        }
        match best? {
            (_, None) => s.reliable.pop_front().map(|(_, v)| v),
            (_, Some(i)) => s.latest[i].take().map(|(_, v)| v),
        }
    }

    /// Oldest pending item across lanes, without waiting.
    pub fn try_pop(&self) -> Option<T> {
        Self::take_next(&mut self.state.lock().expect("queue lock"))
    }

    /// Waits for the next item. `None` once the queue is closed and drained,
    /// or when the timeout elapses.
    pub fn pop(&self, timeout: Option<Duration>) -> Option<T> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut s = self.state.lock().expect("queue lock");
        loop {
            if s.stalled {
                return None;
            }
            if let Some(v) = Self::take_next(&mut s) {
                return Some(v);
            }
            if s.closed {
                return None;
            }
            s = match deadline {
                None => self.ready.wait(s).expect("queue lock"),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return None;
                    }
                    self.ready.wait_timeout(s, d - now).expect("queue lock").0
                }
            };
        }
    }

    /// Stops accepting items; pending items can still be popped.
    pub fn close(&self) {
        self.state.lock().expect("queue lock").closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().expect("queue lock").closed
    }

    pub fn is_stalled(&self) -> bool {
        self.state.lock().expect("queue lock").stalled
    }

    pub fn len(&self) -> usize {
        let s = self.state.lock().expect("queue lock");
        s.reliable.len() + s.latest.iter().filter(|x| x.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Items replaced in latest-wins slots.
    pub fn dropped(&self) -> u64 {
        self.state.lock().expect("queue lock").dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn latest_wins_burst() {
        let q = OutboundQueue::new(16);
        for i in 0..10 {
            q.push(Lane::Latest(0), i).unwrap();
        }
        assert_eq!(q.try_pop(), Some(9));
        assert_eq!(q.try_pop(), None);
        assert_eq!(q.dropped(), 9);
    }

    #[test]
    fn reliable_burst_in_order() {
        let q = OutboundQueue::new(16);
        for i in 0..10 {
            q.push(Lane::Reliable, i).unwrap();
        }
        let got: Vec<_> = std::iter::from_fn(|| q.try_pop()).collect();
        assert_eq!(got, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn overflow_stalls_and_closes() {
        let q = OutboundQueue::new(3);
        for i in 0..3 {
            q.push(Lane::Reliable, i).unwrap();
        }
        assert_eq!(q.push(Lane::Reliable, 3), Err(QueueError::Stalled(3)));
        assert!(q.is_stalled());
        assert_eq!(q.pop(None), None);
        assert_eq!(q.push(Lane::Latest(0), 4), Err(QueueError::Stalled(3)));
    }

    #[test]
    fn blocked_consumer_gets_items_after_unblocking() {
        let q = Arc::new(OutboundQueue::new(64));
        let consumer = {
            let q = q.clone();
            std::thread::spawn(move || std::iter::from_fn(|| q.pop(None)).collect::<Vec<_>>())
        };
        for i in 0..10 {
            q.push(Lane::Reliable, i).unwrap();
        }
        q.close();
        assert_eq!(consumer.join().unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(q.push(Lane::Reliable, 0), Err(QueueError::Closed));
    }

    #[test]
    fn pop_times_out() {
        let q: OutboundQueue<u8> = OutboundQueue::new(1);
        assert_eq!(q.pop(Some(Duration::from_millis(5))), None);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Push(u8),
        Pop,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![(0u8..4).prop_map(Op::Push), Just(Op::Pop)]
    }

    proptest! {
        // Model: a sequence-ordered list where pushing to a latest slot removes that slot's older entry.
        #[test]
        fn matches_model(ops in proptest::collection::vec(op(), 0..200)) {
            let q = OutboundQueue::new(1000);
            let mut model: Vec<(Lane, u32)> = Vec::new();
            let mut n = 0u32;
            for o in ops {
                match o {
                    Op::Push(k) => {
                        let lane = match k { 0 => Lane::Latest(0), 1 => Lane::Latest(1), _ => Lane::Reliable };
                        if lane != Lane::Reliable {
                            model.retain(|(l, _)| *l != lane);
                        }
                        model.push((lane, n));
                        q.push(lane, n).unwrap();
                        n += 1;
                    }
                    Op::Pop => {
                        let expected = if model.is_empty() { None } else { Some(model.remove(0).1) };
                        prop_assert_eq!(q.try_pop(), expected);
                    }
                }
            }
            let rest: Vec<u32> = std::iter::from_fn(|| q.try_pop()).collect();
            let reliable_rest: Vec<u32> = model.iter().map(|(_, v)| *v).collect();
            prop_assert_eq!(rest, reliable_rest);
        }
    }
}
