//! Versioned snapshot store of `f32` multi-modal embeddings.
//!
//! Readers clone an `Arc` to the current snapshot and never block writers for
//! longer than a pointer swap; a flush builds a new snapshot and swaps it in,
//! so a lookup sees each key entirely old or entirely new.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;

use super::RepError;
use crate::ciubm::{CiubmError, MmEntry, MmLookup};
use crate::encoders::{EncoderHead, ItemFeatures};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"MIMT";
const FILE_VERSION: u32 = 1;

/// One stored vector and the store version that wrote it.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredVector {
    pub values: Arc<[f32]>,
    pub version: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub version: u64,
    pub entries: HashMap<u64, StoredVector>,
}

#[derive(Debug)]
pub struct EmbeddingStore {
    dim: usize,
    current: RwLock<Arc<Snapshot>>,
}

/// Rounds to `f32`, the precision vectors are stored and served at.
pub fn quantize(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn widen(v: &[f32]) -> Tensor {
    Tensor::from_parts(vec![v.len()], v.iter().map(|&x| f64::from(x)).collect())
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            current: RwLock::new(Arc::new(Snapshot::default())),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().clone()
    }

    pub fn version(&self) -> u64 {
        self.current.read().version
    }

    pub fn len(&self) -> usize {
        self.current.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes a batch atomically and returns the new store version. Empty
    /// batches leave the version unchanged.
    pub fn apply_batch(&self, batch: Vec<(u64, Vec<f32>)>) -> Result<u64, RepError> {
        if let Some((key, v)) = batch.iter().find(|(_, v)| v.len() != self.dim) {
            return Err(RepError::DimMismatch {
                key: *key,
                expected: self.dim,
                got: v.len(),
            });
        }
        let mut guard = self.current.write();
        if batch.is_empty() {
            return Ok(guard.version);
        }
        let version = guard.version + 1;
        let mut entries = guard.entries.clone();
        for (key, v) in batch {
            entries.insert(
                key,
                StoredVector {
                    values: v.into(),
                    version,
                },
            );
        }
        *guard = Arc::new(Snapshot { version, entries });
        Ok(version)
    }

    /// Key-ordered lookup against one snapshot. Misses are the zero vector with
    /// `hit = false`, or an error naming the key when `strict`.
    pub fn lookup(&self, keys: &[u64], strict: bool) -> Result<(u64, Vec<MmEntry>), RepError> {
        let snap = self.snapshot();
        let out = keys
            .iter()
            .map(|k| match snap.entries.get(k) {
                Some(v) => Ok(MmEntry {
                    vector: widen(&v.values),
                    hit: true,
                }),
                None if strict => Err(RepError::MissingKey(*k)),
                None => Ok(MmEntry {
                    vector: Tensor::zeros(vec![self.dim]),
                    hit: false,
                }),
            })
            .collect::<Result<_, _>>()?;
        Ok((snap.version, out))
    }

    /// Sorted `(key, vector)` records of the current snapshot.
    pub fn records(&self) -> Vec<(u64, Arc<[f32]>)> {
        let snap = self.snapshot();
        let mut out: Vec<(u64, Arc<[f32]>)> = snap.entries.iter().map(|(k, v)| (*k, v.values.clone())).collect();
        out.sort_unstable_by_key(|(k, _)| *k);
        out
    }

    /// `"MIMT"`, u32 version, u16 dim, u64 count, then sorted `(u64 key, dim × f32)`.
    pub fn write_to<W: Write>(&self, out: W) -> Result<(), RepError> {
        let dim = u16::try_from(self.dim).map_err(|_| RepError::StoreFile(format!("dim {} exceeds u16", self.dim)))?;
        let records = self.records();
        let mut w = BufWriter::new(out);
        let io = |e: std::io::Error| RepError::Io(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FILE_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&dim.to_le_bytes()).map_err(io)?;
        w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io)?;
        for (key, values) in records {
            w.write_all(&key.to_le_bytes()).map_err(io)?;
            for v in values.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self, RepError> {
        let mut r = BufReader::new(input);
        let bad = |what: &str| RepError::StoreFile(what.to_string());
        let mut take = |n: usize| -> Result<Vec<u8>, RepError> {
            let mut buf = vec![0; n];
            r.read_exact(&mut buf).map_err(|_| bad("truncated store file"))?;
            Ok(buf)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != FILE_VERSION {
            return Err(RepError::StoreFile(format!("unsupported version {version}")));
        }
        let dim = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let mut batch = Vec::with_capacity(count.min(1 << 20) as usize);
        let mut last = None;
        for _ in 0..count {
            let key = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            if last.is_some_and(|l| l >= key) {
                return Err(bad("records not strictly sorted by key"));
            }
            last = Some(key);
            let raw = take(4 * dim)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            batch.push((key, values));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| RepError::Io(e.to_string()))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after records"));
        }
        let store = Self::new(dim);
        store.apply_batch(batch)?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), RepError> {
        let f = File::create(path).map_err(|e| RepError::Io(format!("{}: {e}", path.display())))?;
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self, RepError> {
        let f = File::open(path).map_err(|e| RepError::Io(format!("{}: {e}", path.display())))?;
        Self::read_from(f)
    }
}

/// Encodes every item with the finished head and stores its `h_mm` as `f32`.
pub fn precompute_table(items: &[ItemFeatures], head: &EncoderHead) -> Result<EmbeddingStore, RepError> {
    let store = EmbeddingStore::new(head.d_mm());
    let batch = items
        .iter()
        .map(|it| Ok((it.key, quantize(head.encode_item(it)?.h_mm.data()))))
        .collect::<Result<Vec<_>, RepError>>()?;
    store.apply_batch(batch)?;
    Ok(store)
}

impl MmLookup for EmbeddingStore {
    fn d_mm(&self) -> usize {
        self.dim
    }

    fn lookup(&self, keys: &[u64]) -> Result<Vec<MmEntry>, CiubmError> {
        EmbeddingStore::lookup(self, keys, false)
            .map(|(_, v)| v)
            .map_err(|e| CiubmError::Lookup(e.to_string()))
    }
}

/// Encodes on demand instead of reading a table, with the same `f32`
/// rounding the store applies at write time.
pub struct DirectEncodeLookup<'a> {
    pub head: &'a EncoderHead,
    pub items: &'a HashMap<u64, ItemFeatures>,
}

impl MmLookup for DirectEncodeLookup<'_> {
    fn d_mm(&self) -> usize {
        self.head.d_mm()
    }

    fn lookup(&self, keys: &[u64]) -> Result<Vec<MmEntry>, CiubmError> {
        keys.iter()
            .map(|k| match self.items.get(k) {
                Some(f) => {
                    let b = self
                        .head
                        .encode_item(f)
                        .map_err(|e| CiubmError::Lookup(e.to_string()))?;
                    Ok(MmEntry {
                        vector: widen(&quantize(b.h_mm.data())),
                        hit: true,
                    })
                }
                None => Ok(MmEntry {
                    vector: Tensor::zeros(vec![self.head.d_mm()]),
                    hit: false,
                }),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    fn items(n: u64) -> Vec<ItemFeatures> {
        (0..n)
            .map(|k| ItemFeatures {
                key: k,
                image: Tensor::vector(vec![k as f64 * 0.1, 1.0, -0.5]).unwrap(),
                text: Tensor::vector(vec![0.3, (k as f64).sin(), 2.0]).unwrap(),
            })
            .collect()
    }

    fn head() -> EncoderHead {
        EncoderHead::new(&EncoderConfig {
            d_img: 3,
            d_txt: 3,
            d_align: 2,
            d_mm: 4,
            hidden: vec![5],
            ..EncoderConfig::default()
        })
    }

    #[test]
    fn precompute_matches_live_encode() {
        let h = head();
        let its = items(3);
        let store = precompute_table(&its, &h).unwrap();
        assert_eq!(store.len(), 3);
        let (_, got) = store.lookup(&[0, 1, 2], true).unwrap();
        for (it, e) in its.iter().zip(got) {
            assert_eq!(e.vector, widen(&quantize(h.encode_item(it).unwrap().h_mm.data())));
        }
    }

    #[test]
    fn empty_store_file_is_valid() {
        let store = precompute_table(&[], &head()).unwrap();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 2 + 8);
        let back = EmbeddingStore::read_from(buf.as_slice()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let store = precompute_table(&items(1000), &head()).unwrap();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = EmbeddingStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(store.records(), back.records());
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_files_rejected() {
        let store = precompute_table(&items(2), &head()).unwrap();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        assert!(EmbeddingStore::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(EmbeddingStore::read_from(bad.as_slice()).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(EmbeddingStore::read_from(extra.as_slice()).is_err());
    }

    #[test]
    fn lookup_misses() {
        let store = precompute_table(&items(2), &head()).unwrap();
        let (_, got) = store.lookup(&[1, 99], false).unwrap();
        assert!(got[0].hit);
        assert!(!got[1].hit);
        assert_eq!(got[1].vector, Tensor::zeros(vec![4]));
        assert_eq!(store.lookup(&[99], true).unwrap_err(), RepError::MissingKey(99));
        assert!(store.lookup(&[], true).unwrap().1.is_empty());
    }

    #[test]
    fn versions_increase_per_batch() {
        let store = EmbeddingStore::new(2);
        assert_eq!(store.apply_batch(vec![(1, vec![1.0, 2.0])]).unwrap(), 1);
        assert_eq!(store.apply_batch(vec![]).unwrap(), 1);
        assert_eq!(store.apply_batch(vec![(1, vec![3.0, 4.0])]).unwrap(), 2);
        assert!(store.apply_batch(vec![(2, vec![1.0])]).is_err());
        assert_eq!(store.snapshot().entries[&1].version, 2);
    }
}
