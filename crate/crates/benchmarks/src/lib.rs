//! Shared generators for the criterion benches.

use shv_core::wire::{encode_payload, Packet};

/// `n` one-second-spaced records starting at `start_ts`.
pub fn rows(n: usize, start_ts: u64) -> Vec<(u64, i64)> {
    (0..n)
        .map(|i| (start_ts + i as u64 * 1_000_000_000, i as i64 * 7 - 3))
        .collect()
}

pub fn publish(topic: &str, records: usize) -> Packet {
    Packet::Publish { topic: topic.into(), payload: encode_payload(&rows(records, 1)) }
}
