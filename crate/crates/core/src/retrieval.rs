//! Coarse stage: descriptor database, Euclidean affinity and Top-K
//! candidate selection with a temporal exclusion window.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::ops::RangeBounds;
use std::path::Path;

use crate::descriptor::GlobalDescriptor;
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

/// Candidate count used for the fine stage.
pub const DEFAULT_K: usize = 25;
/// Number of immediately preceding scans barred from matching.
pub const DEFAULT_EXCLUSION: u64 = 50;

/// Global descriptors keyed by scan id, iterated in ascending id order.
#[derive(Clone, Debug, Default)]
pub struct DescriptorDb {
    entries: BTreeMap<u64, GlobalDescriptor>,
}

const DESC_PREFIX: &str = "desc/";

impl DescriptorDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, d: GlobalDescriptor) -> Result<()> {
        if self.entries.contains_key(&d.scan_id) {
            return Err(Error::Conflict {
                kind: "descriptor",
                id: d.scan_id,
            });
        }
        self.entries.insert(d.scan_id, d);
        Ok(())
    }

    pub fn get(&self, scan_id: u64) -> Result<&GlobalDescriptor> {
        self.entries.get(&scan_id).ok_or(Error::NotFound {
            kind: "descriptor",
            id: scan_id,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &GlobalDescriptor> {
        self.entries.values()
    }

    pub fn range(&self, ids: impl RangeBounds<u64>) -> impl Iterator<Item = &GlobalDescriptor> {
        self.entries.range(ids).map(|(_, d)| d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let records: Vec<_> = self
            .entries
            .values()
            .map(|d| {
                (
                    format!("{DESC_PREFIX}{}", d.scan_id),
                    Tensor::from_parts(vec![d.len()], d.v.clone()),
                )
            })
            .collect();
        write_checkpoint(path, &records)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut db = Self::new();
        for (key, t) in read_checkpoint(path)? {
            let scan_id = key
                .strip_prefix(DESC_PREFIX)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, format!("unexpected record {key:?}")))?;
            db.insert(GlobalDescriptor {
                scan_id,
                v: t.into_vec(),
            })?;
        }
        Ok(db)
    }
}

/// `||v_p - v_q||_2`.
pub fn affinity(p: &GlobalDescriptor, q: &GlobalDescriptor) -> Result<f64> {
    affinity_slices(&p.v, &q.v)
}

pub fn affinity_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("affinity", &[p.len()], &[q.len()]));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub scan_id: u64,
    pub affinity: f64,
}

/// Top-K result for one query, ascending by affinity.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub query_id: u64,
    pub k: usize,
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|c| c.scan_id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `true` unless `id` lies in `(query_id - exclusion, query_id]`.
pub fn is_eligible(id: u64, query_id: u64, exclusion: u64) -> bool {
    !(id <= query_id && query_id - id < exclusion)
}

/// Orders by affinity, then by smaller scan id.
#[derive(PartialEq)]
struct Ranked(f64, u64);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Bounded max-heap selection over `entries`.
pub fn top_k_among<'a>(
    entries: impl IntoIterator<Item = &'a GlobalDescriptor>,
    query: &GlobalDescriptor,
    query_id: u64,
    k: usize,
    exclusion: u64,
) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::Contract("top_k needs K >= 1".into()));
    }
    let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
    for d in entries {
        if !is_eligible(d.scan_id, query_id, exclusion) {
            continue;
        }
        let r = Ranked(affinity(query, d)?, d.scan_id);
        if heap.len() < k {
            heap.push(r);
        } else if heap.peek().is_some_and(|worst| r < *worst) {
            heap.pop();
            heap.push(r);
        }
    }
    let entries = heap
        .into_sorted_vec()
        .into_iter()
        .map(|Ranked(affinity, scan_id)| Candidate { scan_id, affinity })
        .collect();
    Ok(CandidateSet {
        query_id,
        k,
        entries,
    })
}

/// The `k` eligible descriptors closest to `query`; ties go to the smaller id.
pub fn top_k(
    db: &DescriptorDb,
    query: &GlobalDescriptor,
    query_id: u64,
    k: usize,
    exclusion: u64,
) -> Result<CandidateSet> {
    top_k_among(db.iter(), query, query_id, k, exclusion)
}

/// Full scan and stable sort; reference for [`top_k`].
pub fn brute_force_knn(
    db: &DescriptorDb,
    query: &GlobalDescriptor,
    query_id: u64,
    k: usize,
    exclusion: u64,
) -> Result<CandidateSet> {
    let mut all = Vec::new();
    for d in db.iter() {
        if is_eligible(d.scan_id, query_id, exclusion) {
            all.push(Candidate {
                scan_id: d.scan_id,
                affinity: affinity(query, d)?,
            });
        }
    }
    all.sort_by(|a, b| a.affinity.total_cmp(&b.affinity));
    all.truncate(k);
    Ok(CandidateSet {
        query_id,
        k,
        entries: all,
    })
}

/// Text lines `query_id rank scan_id affinity`, ranks from 1. Affinities
/// are written in shortest round-trip form.
pub fn format_candidates(sets: &[CandidateSet]) -> String {
    let mut out = String::new();
    for set in sets {
        for (rank, c) in set.entries.iter().enumerate() {
            writeln!(
                out,
                "{} {} {} {}",
                set.query_id,
                rank + 1,
                c.scan_id,
                c.affinity
            )
            .expect("write to string");
        }
    }
    out
}

/// Inverse of [`format_candidates`]; `#` starts a comment. Queries keep
/// their first-appearance order and `k` is the number of entries read.
pub fn parse_candidates(text: &str) -> std::result::Result<Vec<CandidateSet>, String> {
    let mut sets: Vec<CandidateSet> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| format!("line {}: {what}", i + 1);
        let f: Vec<&str> = line.split_whitespace().collect();
        let [q, rank, id, aff] = f[..] else {
            return Err(bad("expected `query rank scan affinity`"));
        };
        let q: u64 = q.parse().map_err(|_| bad("bad query id"))?;
        let rank: usize = rank.parse().map_err(|_| bad("bad rank"))?;
        let scan_id: u64 = id.parse().map_err(|_| bad("bad scan id"))?;
        let affinity: f64 = aff.parse().map_err(|_| bad("bad affinity"))?;
        if sets.last().is_none_or(|s| s.query_id != q) {
            if sets.iter().any(|s| s.query_id == q) {
                return Err(bad("query lines are not contiguous"));
            }
            sets.push(CandidateSet {
                query_id: q,
                k: 0,
                entries: Vec::new(),
            });
        }
        let set = sets.last_mut().expect("pushed above");
        if rank != set.entries.len() + 1 {
            return Err(bad("ranks must count up from 1"));
        }
        set.entries.push(Candidate { scan_id, affinity });
        set.k = set.entries.len();
    }
    Ok(sets)
}

pub fn write_candidates(path: impl AsRef<Path>, sets: &[CandidateSet]) -> Result<()> {
    std::fs::write(path, format_candidates(sets))?;
    Ok(())
}

pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidateSet>> {
    let path = path.as_ref();
    parse_candidates(&std::fs::read_to_string(path)?).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_text_round_trip() {
        let sets = vec![
            CandidateSet {
                query_id: 9,
                k: 2,
                entries: vec![
                    Candidate {
                        scan_id: 3,
                        affinity: 0.1 + 0.2,
                    },
                    Candidate {
                        scan_id: 1,
                        affinity: 1.0 / 3.0,
                    },
                ],
            },
            CandidateSet {
                query_id: 4,
                k: 1,
                entries: vec![Candidate {
                    scan_id: 0,
                    affinity: 0.0,
                }],
            },
        ];
        let text = format!("# header\n{}", format_candidates(&sets));
        assert_eq!(parse_candidates(&text).unwrap(), sets);
        assert!(parse_candidates("1 2 3 0.5").is_err());
        assert!(parse_candidates("1 1 3").is_err());
        assert!(parse_candidates("1 1 3 0.5\n2 1 3 0.5\n1 2 4 0.6").is_err());
    }

    fn desc(id: u64, v: &[f64]) -> GlobalDescriptor {
        GlobalDescriptor {
            scan_id: id,
            v: v.to_vec(),
        }
    }

    #[test]
    fn affinity_examples() {
        let a = desc(0, &[1.0, 0.0]);
        let b = desc(1, &[0.0, 1.0]);
        assert_eq!(affinity(&a, &a).unwrap(), 0.0);
        assert_eq!(affinity(&a, &b).unwrap(), 2f64.sqrt());
        assert_eq!(affinity(&a, &b).unwrap(), affinity(&b, &a).unwrap());
        assert!(affinity(&a, &desc(2, &[1.0])).is_err());
    }

    #[test]
    fn picks_smallest_distances() {
        let mut db = DescriptorDb::new();
        db.insert(desc(1, &[0.1])).unwrap();
        db.insert(desc(2, &[0.3])).unwrap();
        db.insert(desc(3, &[0.2])).unwrap();
        let q = desc(99, &[0.0]);
        let c = top_k(&db, &q, 99, 2, 0).unwrap();
        assert_eq!(c.ids(), vec![1, 3]);
        assert!((c.entries[0].affinity - 0.1).abs() < 1e-15);
        assert!((c.entries[1].affinity - 0.2).abs() < 1e-15);
    }

    #[test]
    fn exclusion_window() {
        assert!(is_eligible(50, 100, 50));
        assert!(!is_eligible(51, 100, 50));
        assert!(!is_eligible(99, 100, 50));
        assert!(!is_eligible(100, 100, 50));
        assert!(is_eligible(100, 100, 0));
        assert!(is_eligible(101, 100, 50));

        let mut db = DescriptorDb::new();
        for id in 0..100 {
            db.insert(desc(id, &[id as f64])).unwrap();
        }
        let c = top_k(&db, &desc(100, &[100.0]), 100, 5, 50).unwrap();
        assert_eq!(c.ids(), vec![50, 49, 48, 47, 46]);
    }

    #[test]
    fn k_beyond_eligible_and_empty() {
        let mut db = DescriptorDb::new();
        let q = desc(10, &[0.0]);
        assert!(top_k(&db, &q, 10, 3, 0).unwrap().is_empty());
        assert!(brute_force_knn(&db, &q, 10, 3, 0).unwrap().is_empty());
        db.insert(desc(1, &[2.0])).unwrap();
        db.insert(desc(2, &[1.0])).unwrap();
        assert_eq!(top_k(&db, &q, 10, 25, 0).unwrap().ids(), vec![2, 1]);
        assert!(top_k(&db, &q, 10, 0, 0).is_err());
    }

    #[test]
    fn ties_prefer_smaller_id() {
        let mut db = DescriptorDb::new();
        for id in [5, 3, 9, 1] {
            db.insert(desc(id, &[1.0, 1.0])).unwrap();
        }
        let q = desc(100, &[0.0, 0.0]);
        assert_eq!(top_k(&db, &q, 100, 2, 0).unwrap().ids(), vec![1, 3]);
        assert_eq!(
            brute_force_knn(&db, &q, 100, 2, 0).unwrap().ids(),
            vec![1, 3]
        );
    }

    #[test]
    fn duplicate_insert_conflicts() {
        let mut db = DescriptorDb::new();
        db.insert(desc(1, &[0.0])).unwrap();
        assert!(matches!(
            db.insert(desc(1, &[1.0])),
            Err(Error::Conflict { .. })
        ));
        assert!(matches!(db.get(2), Err(Error::NotFound { .. })));
    }

    #[test]
    fn db_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db_v.bin");
        let mut db = DescriptorDb::new();
        db.insert(desc(4, &[0.6, 0.8])).unwrap();
        db.insert(desc(2, &[1.0, -0.0])).unwrap();
        db.save(&path).unwrap();
        let back = DescriptorDb::open(&path).unwrap();
        assert_eq!(
            back.iter().cloned().collect::<Vec<_>>(),
            db.iter().cloned().collect::<Vec<_>>()
        );
    }
}
