//! Real-time ingestion window: new items are encoded on arrival, buffered,
//! and written to the store as one batch.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::store::quantize;
use super::{EmbeddingStore, RepError};
use crate::encoders::{EncoderHead, ItemFeatures};

#[derive(Debug, Default)]
struct Pending {
    order: Vec<(u64, Vec<f32>)>,
    index: HashMap<u64, usize>,
    opened: Option<Instant>,
    duplicates: u64,
}

#[derive(Debug)]
pub struct WindowBuffer {
    pub max_count: usize,
    pub max_age: Duration,
    pending: Mutex<Pending>,
}

/// Result of one submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubmitAck {
    /// Entries still buffered after this submission.
    pub pending: usize,
    /// Store version after the submission (bumped if it triggered a flush).
    pub version: u64,
    /// Entries written if this submission filled the window.
    pub flushed: Option<usize>,
}

impl Default for WindowBuffer {
    fn default() -> Self {
        Self::new(64, Duration::from_millis(100))
    }
}

impl WindowBuffer {
    pub fn new(max_count: usize, max_age: Duration) -> Self {
        Self {
            max_count: max_count.max(1),
            max_age,
            pending: Mutex::new(Pending::default()),
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.lock().order.len()
    }

    /// Same-window resubmissions of a key seen so far; the last write wins.
    pub fn duplicates(&self) -> u64 {
        self.pending.lock().duplicates
    }

    /// Buffers an already-encoded vector, flushing when the window is full.
    pub fn submit_vector(&self, store: &EmbeddingStore, key: u64, values: Vec<f32>) -> Result<SubmitAck, RepError> {
        if values.len() != store.dim() {
            return Err(RepError::DimMismatch {
                key,
                expected: store.dim(),
                got: values.len(),
            });
        }
        let mut p = self.pending.lock();
        match p.index.get(&key) {
            Some(&i) => {
                p.order[i].1 = values;
                p.duplicates += 1;
            }
            None => {
                let i = p.order.len();
                p.order.push((key, values));
                p.index.insert(key, i);
            }
        }
        p.opened.get_or_insert_with(Instant::now);
        if p.order.len() >= self.max_count {
            let n = Self::drain_into(&mut p, store)?;
            return Ok(SubmitAck {
                pending: 0,
                version: store.version(),
                flushed: Some(n),
            });
        }
        Ok(SubmitAck {
            pending: p.order.len(),
            version: store.version(),
            flushed: None,
        })
    }

    fn drain_into(p: &mut Pending, store: &EmbeddingStore) -> Result<usize, RepError> {
        let batch = std::mem::take(&mut p.order);
        p.index.clear();
        p.opened = None;
        let n = batch.len();
        store.apply_batch(batch)?;
        Ok(n)
    }

    /// Writes everything buffered as one batch; returns how many entries.
    pub fn flush(&self, store: &EmbeddingStore) -> Result<usize, RepError> {
        let mut p = self.pending.lock();
        Self::drain_into(&mut p, store)
    }

    /// Flushes only if the oldest buffered entry is older than `max_age`.
    pub fn flush_if_stale(&self, store: &EmbeddingStore) -> Result<usize, RepError> {
        let mut p = self.pending.lock();
        match p.opened {
            Some(t) if t.elapsed() >= self.max_age => Self::drain_into(&mut p, store),
            _ => Ok(0),
        }
    }
}

/// Encodes a new item immediately and buffers its embedding.
pub fn rim_submit(
    window: &WindowBuffer,
    store: &EmbeddingStore,
    item: &ItemFeatures,
    head: &EncoderHead,
) -> Result<SubmitAck, RepError> {
    let bundle = head.encode_item(item)?;
    window.submit_vector(store, item.key, quantize(bundle.h_mm.data()))
}

pub fn rim_flush(window: &WindowBuffer, store: &EmbeddingStore) -> Result<usize, RepError> {
    window.flush(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::numerics::Tensor;
    use crate::repcenter::store::widen;

    fn head() -> EncoderHead {
        EncoderHead::new(&EncoderConfig {
            d_img: 2,
            d_txt: 2,
            d_align: 2,
            d_mm: 3,
            hidden: vec![4],
            ..EncoderConfig::default()
        })
    }

    fn item(key: u64) -> ItemFeatures {
        ItemFeatures {
            key,
            image: Tensor::vector(vec![key as f64, 1.0]).unwrap(),
            text: Tensor::vector(vec![-1.0, key as f64 * 0.5]).unwrap(),
        }
    }

    #[test]
    fn invisible_until_flushed() {
        let h = head();
        let store = EmbeddingStore::new(3);
        let w = WindowBuffer::new(64, Duration::from_secs(60));
        rim_submit(&w, &store, &item(7), &h).unwrap();
        assert!(!store.lookup(&[7], false).unwrap().1[0].hit);
        assert_eq!(rim_flush(&w, &store).unwrap(), 1);
        let (version, got) = store.lookup(&[7], true).unwrap();
        assert_eq!(version, 1);
        assert_eq!(
            got[0].vector,
            widen(&quantize(h.encode_item(&item(7)).unwrap().h_mm.data()))
        );
    }

    #[test]
    fn auto_flush_at_max_count() {
        let h = head();
        let store = EmbeddingStore::new(3);
        let w = WindowBuffer::new(2, Duration::from_secs(60));
        assert_eq!(rim_submit(&w, &store, &item(1), &h).unwrap().flushed, None);
        let second = rim_submit(&w, &store, &item(2), &h).unwrap();
        assert_eq!(second.flushed, Some(2));
        assert_eq!(store.len(), 2);
        let third = rim_submit(&w, &store, &item(3), &h).unwrap();
        assert_eq!((third.flushed, third.pending), (None, 1));
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn duplicate_key_last_write_wins() {
        let store = EmbeddingStore::new(1);
        let w = WindowBuffer::new(10, Duration::from_secs(60));
        w.submit_vector(&store, 5, vec![1.0]).unwrap();
        w.submit_vector(&store, 5, vec![2.0]).unwrap();
        assert_eq!(w.duplicates(), 1);
        assert_eq!(w.flush(&store).unwrap(), 1);
        assert_eq!(store.lookup(&[5], true).unwrap().1[0].vector.data(), &[2.0]);
    }

    #[test]
    fn stale_window_flushes() {
        let store = EmbeddingStore::new(1);
        let w = WindowBuffer::new(10, Duration::from_millis(0));
        w.submit_vector(&store, 5, vec![1.0]).unwrap();
        assert_eq!(w.flush_if_stale(&store).unwrap(), 1);
        assert_eq!(w.flush_if_stale(&store).unwrap(), 0);
    }
}
