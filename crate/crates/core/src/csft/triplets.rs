use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CsftError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InterestTriplet {
    pub query_key: u64,
    pub pos_item_key: u64,
    pub hard_neg_key: u64,
}

/// Purchase row that could not become a triplet because a key was unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TripletBuild {
    pub triplets: Vec<InterestTriplet>,
    /// Purchases whose category has no other item.
    pub skipped: usize,
    pub rejected: Vec<RejectedRow>,
}

/// One triplet per `(query, item)` purchase, with a hard negative drawn
/// uniformly from the item's category excluding the item itself.
pub fn build_triplets(purchases: &[(u64, u64)], categories: &HashMap<u64, usize>, seed: u64) -> TripletBuild {
    let mut members: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (&key, &cat) in categories {
        members.entry(cat).or_default().push(key);
    }
    members.values_mut().for_each(|m| m.sort_unstable());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TripletBuild::default();
    for (row, &(query_key, item)) in purchases.iter().enumerate() {
        let Some(&cat) = categories.get(&item) else {
            out.rejected.push(RejectedRow {
                row,
                reason: format!("unknown item key {item}"),
            });
            continue;
        };
        let pool = &members[&cat];
        if pool.len() < 2 {
            out.skipped += 1;
            continue;
        }
        let pos = pool.binary_search(&item).expect("item listed in its category");
        let mut pick = rng.random_range(0..pool.len() - 1);
        if pick >= pos {
            pick += 1;
        }
        out.triplets.push(InterestTriplet {
            query_key,
            pos_item_key: item,
            hard_neg_key: pool[pick],
        });
    }
    out
}

/// Tab-separated `query  pos  neg`, one triplet per line.
pub fn write_triplets<W: Write>(mut out: W, triplets: &[InterestTriplet]) -> Result<(), CsftError> {
    let mut buf = String::new();
    for t in triplets {
        let _ = writeln!(buf, "{}\t{}\t{}", t.query_key, t.pos_item_key, t.hard_neg_key);
    }
    out.write_all(buf.as_bytes()).map_err(|e| CsftError::Io(e.to_string()))
}

pub fn read_triplets<R: BufRead>(input: R) -> Result<Vec<InterestTriplet>, CsftError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CsftError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<u64>().map_err(|_| CsftError::Parse {
                line: idx + 1,
                reason: format!("bad key {s:?}"),
            })
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(CsftError::Parse {
                line: idx + 1,
                reason: format!("expected 3 fields, got {}", f.len()),
            });
        }
        out.push(InterestTriplet {
            query_key: parse(f[0])?,
            pos_item_key: parse(f[1])?,
            hard_neg_key: parse(f[2])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_choice_is_taken() {
        let cats = HashMap::from([(1, 0), (2, 0), (3, 1)]);
        let b = build_triplets(&[(100, 1)], &cats, 0);
        assert_eq!(
            b.triplets,
            vec![InterestTriplet {
                query_key: 100,
                pos_item_key: 1,
                hard_neg_key: 2
            }]
        );
    }

    #[test]
    fn singleton_category_is_skipped() {
        let cats = HashMap::from([(1, 0), (3, 1)]);
        let b = build_triplets(&[(100, 1)], &cats, 0);
        assert!(b.triplets.is_empty());
        assert_eq!(b.skipped, 1);
    }

    #[test]
    fn unknown_item_is_rejected_with_reason() {
        let cats = HashMap::from([(1, 0), (2, 0)]);
        let b = build_triplets(&[(100, 1), (101, 9)], &cats, 0);
        assert_eq!(b.triplets.len(), 1);
        assert_eq!(b.rejected.len(), 1);
        assert_eq!(b.rejected[0].row, 1);
        assert!(b.rejected[0].reason.contains('9'));
    }

    #[test]
    fn hard_negative_is_uniform() {
        let cats = HashMap::from([(1, 0), (2, 0), (3, 0)]);
        let purchases: Vec<(u64, u64)> = (0..1000).map(|q| (q, 1)).collect();
        let b = build_triplets(&purchases, &cats, 42);
        let twos = b.triplets.iter().filter(|t| t.hard_neg_key == 2).count() as f64;
        assert!(b.triplets.iter().all(|t| t.hard_neg_key != 1));
        assert!((twos / 1000.0 - 0.5).abs() <= 0.05, "{twos}");
    }

    #[test]
    fn file_round_trip() {
        let t = vec![
            InterestTriplet {
                query_key: 2 << 40,
                pos_item_key: 5,
                hard_neg_key: 6,
            };
            3
        ];
        let mut buf = Vec::new();
        write_triplets(&mut buf, &t).unwrap();
        assert_eq!(read_triplets(buf.as_slice()).unwrap(), t);
        assert!(matches!(
            read_triplets("1\t2\n".as_bytes()),
            Err(CsftError::Parse { line: 1, .. })
        ));
    }
}
