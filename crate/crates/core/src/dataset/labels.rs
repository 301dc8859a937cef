use std::collections::BTreeSet;

use super::Pose;
use crate::retrieval::is_eligible;

/// True matches per query: earlier scans outside the exclusion window
/// closer than `d_true` meters.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopLabels {
    pub matches: Vec<BTreeSet<u64>>,
    pub d_true: f64,
    pub exclusion: u64,
}

impl LoopLabels {
    pub fn has_loop(&self, query: u64) -> bool {
        self.matches
            .get(query as usize)
            .is_some_and(|m| !m.is_empty())
    }

    pub fn loop_queries(&self) -> Vec<u64> {
        (0..self.matches.len() as u64)
            .filter(|&q| self.has_loop(q))
            .collect()
    }

    pub fn is_match(&self, query: u64, candidate: u64) -> bool {
        self.matches
            .get(query as usize)
            .is_some_and(|m| m.contains(&candidate))
    }
}

/// Scan index doubles as scan id. Distances use the 3-D translation.
pub fn ground_truth_loops(poses: &[Pose], d_true: f64, exclusion: u64) -> LoopLabels {
    let matches = (0..poses.len())
        .map(|q| {
            (0..q)
                .filter(|&p| is_eligible(p as u64, q as u64, exclusion))
                .filter(|&p| poses[p].distance(&poses[q]) < d_true)
                .map(|p| p as u64)
                .collect()
        })
        .collect();
    LoopLabels {
        matches,
        d_true,
        exclusion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, at: impl Fn(usize) -> f64) -> Vec<Pose> {
        (0..n)
            .map(|i| Pose::from_yaw(at(i), 0.0, 0.0, 0.0))
            .collect()
    }

    #[test]
    fn distance_and_window() {
        // scan 100 sits 5 m from scan 0; scan 30 sits 5 m from scan 0 too
        let poses = line(101, |i| match i {
            0 => 0.0,
            30 | 100 => 5.0,
            _ => 1000.0 + 20.0 * i as f64,
        });
        let l = ground_truth_loops(&poses, 10.0, 50);
        assert!(l.is_match(100, 0));
        assert!(l.is_match(100, 30));
        // 5 m apart but only 30 scans back
        assert!(!l.is_match(30, 0));
        assert!(!l.has_loop(30));
    }

    #[test]
    fn threshold_is_strict() {
        let poses = line(60, |i| {
            if i == 59 {
                12.0
            } else {
                100.0 * i as f64 + 200.0
            }
        });
        let mut poses = poses;
        poses[0] = Pose::identity();
        let l = ground_truth_loops(&poses, 10.0, 50);
        assert!(!l.has_loop(59));
    }

    #[test]
    fn reproducible() {
        let poses = line(120, |i| (i as f64 * 0.3).sin() * 20.0);
        assert_eq!(
            ground_truth_loops(&poses, 10.0, 50),
            ground_truth_loops(&poses, 10.0, 50)
        );
    }
}
