use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::wire::config::{AreaDetectorParams, DataSourceKind, DataSourceSpec, ScalarParams};
use crate::wire::container::Element;
use crate::wire::{Array, DType};

/// One detector readout as delivered by an event source.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    /// Position in this source's stream; strictly increasing.
    pub sequence_number: u64,
    /// Identifier unique across all workers of a run.
    pub id: u64,
    /// Per-event seed from which synthetic values are drawn.
    pub seed: u64,
    /// Values carried by the event itself (replayed fields, keyed by container path).
    pub raw: BTreeMap<String, Array>,
}

/// Extracted data for one event, keyed by data-source name.
pub type EventRecord = BTreeMap<String, Array>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("data source {source_name:?} failed on event {sequence}: {message}")]
pub struct ExtractError {
    pub source_name: String,
    pub sequence: u64,
    pub message: String,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn rng_for(event: &Event, source: &str, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(event.seed ^ name_hash(source) ^ splitmix64(seed)))
}

/// The stand-in for detector calibration: `gain * raw + offset`.
pub fn calibrate(raw: f64, gain: f64, offset: f64) -> f64 {
    gain * raw + offset
}

fn fill<T: Element>(n: usize, mut value: impl FnMut() -> f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * T::DTYPE.size());
    for _ in 0..n {
        T::from_f64(value()).write_le(&mut out);
    }
    out
}

fn typed(dtype: DType, n: usize, value: impl FnMut() -> f64) -> Vec<u8> {
    match dtype {
        DType::U8 => fill::<u8>(n, value),
        DType::I8 => fill::<i8>(n, value),
        DType::U16 => fill::<u16>(n, value),
        DType::I16 => fill::<i16>(n, value),
        DType::U32 => fill::<u32>(n, value),
        DType::I32 => fill::<i32>(n, value),
        DType::U64 => fill::<u64>(n, value),
        DType::I64 => fill::<i64>(n, value),
        DType::F32 => fill::<f32>(n, value),
        DType::F64 => fill::<f64>(n, value),
    }
}

fn area_detector(event: &Event, name: &str, p: &AreaDetectorParams) -> Result<Array, String> {
    let mut rng = rng_for(event, name, p.seed);
    if p.failure_rate > 0.0 && rng.random::<f64>() < p.failure_rate {
        return Err("detector readout failed".into());
    }
    let n: u64 = p.shape.iter().product();
    let (gain, offset) = if p.calibration { (p.gain, p.offset) } else { (1.0, 0.0) };
    let data = typed(p.dtype, n as usize, || calibrate(rng.random_range(0..1000u32) as f64, gain, offset));
    Array::new(p.dtype, p.shape.clone(), data).map_err(|e| e.to_string())
}

fn scalar(event: &Event, name: &str, p: &ScalarParams) -> Result<Array, String> {
    let mut rng = rng_for(event, name, p.seed);
    if p.failure_rate > 0.0 && rng.random::<f64>() < p.failure_rate {
        return Err("scalar readout failed".into());
    }
    let v: f64 = rng.random_range(0.0..1000.0);
    Array::new(p.dtype, Vec::new(), typed(p.dtype, 1, || v)).map_err(|e| e.to_string())
}

/// Pulls exactly the configured data sources out of an event; everything
/// else the event carries is discarded.
pub fn extract(event: &Event, specs: &[DataSourceSpec]) -> Result<EventRecord, ExtractError> {
    let mut rec = EventRecord::new();
    for spec in specs {
        let value = match &spec.kind {
            DataSourceKind::SyntheticTimestamp(p) => Ok(Array::scalar(event.sequence_number.wrapping_mul(p.period_ns))),
            DataSourceKind::SyntheticAreaDetector(p) => area_detector(event, &spec.name, p),
            DataSourceKind::SyntheticScalar(p) => scalar(event, &spec.name, p),
            DataSourceKind::SyntheticEventId(_) => Ok(Array::scalar(event.id)),
            DataSourceKind::SystemTimestamp(_) => Ok(Array::scalar(
                SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_nanos() as u64,
            )),
            DataSourceKind::FileReplay(p) => event
                .raw
                .get(&p.field)
                .cloned()
                .ok_or_else(|| format!("event has no field {}", p.field)),
        };
        let value = value.map_err(|message| ExtractError {
            source_name: spec.name.clone(),
            sequence: event.sequence_number,
            message,
        })?;
        rec.insert(spec.name.clone(), value);
    }
    Ok(rec)
}
