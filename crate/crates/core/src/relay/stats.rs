use serde::{Deserialize, Serialize};

/// Point-in-time relay counters, taken under the relay lock.
///
/// At quiescence `frames_in == frames_out + queue_depth + dropped_count`.
/// `frames_out` counts frames handed to a consumer connection; frames that
/// were handed over but never written because the consumer died are also
/// counted in `delivery_failures`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayStats {
    pub frames_in: u64,
    pub frames_out: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub dropped_count: u64,
    pub delivery_failures: u64,
    pub connected_producers: u64,
    pub connected_consumers: u64,
    pub queue_depth: u64,
    pub queue_bytes: u64,
    /// Frames sitting in consumer outbound windows.
    pub in_flight: u64,
}

impl RelayStats {
    pub fn conserved(&self) -> bool {
        self.frames_in == self.frames_out + self.queue_depth + self.dropped_count
    }
}
