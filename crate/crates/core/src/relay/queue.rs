use std::collections::VecDeque;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

/// What to do with a new frame when the ring is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OverflowPolicy {
    /// Refuse the frame; the caller stops reading from its producer until space frees.
    #[default]
    Block,
    /// Evict the oldest buffered frame.
    DropOldest,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Enqueued {
    Stored,
    StoredWithDrop(Bytes),
    /// The frame is handed back untouched.
    WouldBlock(Bytes),
}

/// Bounded FIFO ring of frames, limited by both frame count and byte total.
#[derive(Debug)]
pub struct RelayQueue {
    ring: VecDeque<Bytes>,
    bytes: u64,
    max_frames: usize,
    max_bytes: u64,
    policy: OverflowPolicy,
    dropped: u64,
}

impl RelayQueue {
    pub fn new(max_frames: usize, max_bytes: u64, policy: OverflowPolicy) -> Self {
        assert!(max_frames >= 1 && max_bytes >= 1, "relay capacity must be at least 1");
        RelayQueue {
            ring: VecDeque::with_capacity(max_frames.min(4096)),
            bytes: 0,
            max_frames,
            max_bytes,
            policy,
            dropped: 0,
        }
    }

    fn fits(&self, len: u64) -> bool {
        if self.ring.len() >= self.max_frames {
            return false;
        }
        // An oversized frame is admitted only into an empty ring.
        self.ring.is_empty() || self.bytes + len <= self.max_bytes
    }

    pub fn enqueue(&mut self, frame: Bytes) -> Enqueued {
        let len = frame.len() as u64;
        if self.fits(len) {
            self.push(frame);
            return Enqueued::Stored;
        }
        match self.policy {
            OverflowPolicy::Block => Enqueued::WouldBlock(frame),
            OverflowPolicy::DropOldest => {
                let mut evicted = None;
                while !self.fits(len) {
                    let old = self.pop().expect("a full ring is non-empty");
                    self.dropped += 1;
                    // Several small frames may have to go for one large one;
                    // report the first eviction, count them all.
                    evicted.get_or_insert(old);
                }
                self.push(frame);
                Enqueued::StoredWithDrop(evicted.expect("something was evicted"))
            }
        }
    }

    fn push(&mut self, frame: Bytes) {
        self.bytes += frame.len() as u64;
        self.ring.push_back(frame);
    }

    pub fn pop(&mut self) -> Option<Bytes> {
        let f = self.ring.pop_front()?;
        self.bytes -= f.len() as u64;
        Some(f)
    }

    pub fn front(&self) -> Option<&Bytes> {
        self.ring.front()
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn policy(&self) -> OverflowPolicy {
        self.policy
    }

    pub fn capacity(&self) -> usize {
        self.max_frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(n: u8) -> Bytes {
        Bytes::from(vec![n])
    }

    #[test]
    fn drop_oldest_keeps_newest() {
        let mut q = RelayQueue::new(2, 1 << 20, OverflowPolicy::DropOldest);
        assert_eq!(q.enqueue(f(1)), Enqueued::Stored);
        assert_eq!(q.enqueue(f(2)), Enqueued::Stored);
        assert_eq!(q.enqueue(f(3)), Enqueued::StoredWithDrop(f(1)));
        assert_eq!(q.dropped(), 1);
        assert_eq!(q.pop(), Some(f(2)));
        assert_eq!(q.pop(), Some(f(3)));
        assert_eq!(q.pop(), None);
    }

    #[test]
    fn block_refuses_when_full() {
        let mut q = RelayQueue::new(2, 1 << 20, OverflowPolicy::Block);
        q.enqueue(f(1));
        q.enqueue(f(2));
        assert_eq!(q.enqueue(f(3)), Enqueued::WouldBlock(f(3)));
        assert_eq!(q.len(), 2);
        assert_eq!(q.pop(), Some(f(1)));
        assert_eq!(q.pop(), Some(f(2)));
    }

    #[test]
    fn byte_bound_applies() {
        let mut q = RelayQueue::new(100, 10, OverflowPolicy::Block);
        assert_eq!(q.enqueue(Bytes::from(vec![0; 6])), Enqueued::Stored);
        assert!(matches!(q.enqueue(Bytes::from(vec![0; 6])), Enqueued::WouldBlock(_)));
        q.pop();
        // oversized frame still fits an empty ring
        assert_eq!(q.enqueue(Bytes::from(vec![0; 64])), Enqueued::Stored);
        assert_eq!(q.bytes(), 64);
    }

    #[test]
    fn large_frame_may_evict_several() {
        let mut q = RelayQueue::new(10, 10, OverflowPolicy::DropOldest);
        for i in 0..5 {
            q.enqueue(Bytes::from(vec![i; 2]));
        }
        assert!(matches!(q.enqueue(Bytes::from(vec![9; 6])), Enqueued::StoredWithDrop(_)));
        assert_eq!(q.dropped(), 3);
        assert!(q.bytes() <= 10);
    }

    proptest! {
        #[test]
        fn bounded_and_fifo_under_random_schedules(
            ops in prop::collection::vec(any::<bool>(), 0..400),
            drop_oldest in any::<bool>(),
        ) {
            let policy = if drop_oldest { OverflowPolicy::DropOldest } else { OverflowPolicy::Block };
            let mut q = RelayQueue::new(8, u64::MAX, policy);
            let mut next = 0u32;
            let mut last_out: Option<u32> = None;
            let (mut stored, mut out) = (0u64, 0u64);
            for enqueue in ops {
                if enqueue {
                    match q.enqueue(Bytes::from(next.to_le_bytes().to_vec())) {
                        Enqueued::WouldBlock(_) => {}
                        _ => stored += 1,
                    }
                    next += 1;
                } else if let Some(b) = q.pop() {
                    let id = u32::from_le_bytes(b[..].try_into().unwrap());
                    prop_assert!(last_out.is_none_or(|l| id > l));
                    last_out = Some(id);
                    out += 1;
                }
                prop_assert!(q.len() <= 8);
                prop_assert_eq!(stored, out + q.len() as u64 + q.dropped());
            }
        }
    }
}
