//! Wall-clock accounting per pipeline stage and the total-cost projection
//! for a coarse-to-fine run versus exhaustive pairwise verification.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Voxelization,
    FeatureExtraction,
    DescriptorGeneration,
    CandidateSelection,
    OverlapEstimation,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Voxelization,
        Stage::FeatureExtraction,
        Stage::DescriptorGeneration,
        Stage::CandidateSelection,
        Stage::OverlapEstimation,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Stage::Voxelization => "voxelization",
            Stage::FeatureExtraction => "bev_feature_extraction",
            Stage::DescriptorGeneration => "descriptor_generation",
            Stage::CandidateSelection => "candidate_selection",
            Stage::OverlapEstimation => "overlap_estimation",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::Voxelization => "Voxelization",
            Stage::FeatureExtraction => "BEV Feature Extraction",
            Stage::DescriptorGeneration => "Attention-guided Descriptor Generation",
            Stage::CandidateSelection => "Affinity-based Candidate Selection",
            Stage::OverlapEstimation => "Pairwise Overlap Estimation",
        }
    }

    fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).unwrap()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Profiler {
    samples: [Vec<f64>; 5],
}

impl Profiler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, stage: Stage, elapsed: Duration) {
        self.record_ms(stage, elapsed.as_secs_f64() * 1e3);
    }

    pub fn record_ms(&mut self, stage: Stage, ms: f64) {
        self.samples[stage.index()].push(ms);
    }

    pub fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(stage, start.elapsed());
        out
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.samples[stage.index()].len()
    }

    pub fn total_ms(&self, stage: Stage) -> f64 {
        self.samples[stage.index()].iter().sum()
    }

    pub fn clear(&mut self) {
        self.samples.iter_mut().for_each(Vec::clear);
    }

    pub fn report(&self) -> TimingReport {
        let stages = Stage::ALL
            .iter()
            .map(|&stage| {
                let s = &self.samples[stage.index()];
                let n = s.len();
                let mean = if n == 0 {
                    0.0
                } else {
                    s.iter().sum::<f64>() / n as f64
                };
                let var = if n < 2 {
                    0.0
                } else {
                    s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                };
                StageStats {
                    stage,
                    count: n,
                    mean_ms: mean,
                    std_ms: var.sqrt(),
                    total_ms: s.iter().sum(),
                }
            })
            .collect();
        TimingReport { stages }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageStats {
    pub stage: Stage,
    pub count: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub stages: Vec<StageStats>,
}

impl TimingReport {
    pub fn mean_ms(&self, stage: Stage) -> f64 {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .map_or(0.0, |s| s.mean_ms)
    }

    /// Mean per-scan cost of voxelization, encoding and description.
    pub fn per_scan_ms(&self) -> f64 {
        self.mean_ms(Stage::Voxelization)
            + self.mean_ms(Stage::FeatureExtraction)
            + self.mean_ms(Stage::DescriptorGeneration)
    }

    pub fn projected_ms(&self, n_scans: u64, n_queries: u64, k: u64) -> f64 {
        projected_cost_ms(
            n_scans,
            n_queries,
            self.per_scan_ms(),
            self.mean_ms(Stage::CandidateSelection),
            k,
            self.mean_ms(Stage::OverlapEstimation),
        )
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            writeln!(
                out,
                "{:<40} {:>10.4} ms ± {:>8.4} (n = {})",
                s.stage.label(),
                s.mean_ms,
                s.std_ms,
                s.count
            )
            .expect("write to string");
        }
        out
    }
}

/// `n_scans * per_scan + n_queries * (t_select + k * t_overlap)`, in ms.
pub fn projected_cost_ms(
    n_scans: u64,
    n_queries: u64,
    per_scan_ms: f64,
    select_ms: f64,
    k: u64,
    overlap_ms: f64,
) -> f64 {
    n_scans as f64 * per_scan_ms + n_queries as f64 * (select_ms + k as f64 * overlap_ms)
}

/// `n_scans * per_scan + n_pairs * t_overlap`, in ms.
pub fn exhaustive_cost_ms(n_scans: u64, per_scan_ms: f64, n_pairs: u64, overlap_ms: f64) -> f64 {
    n_scans as f64 * per_scan_ms + n_pairs as f64 * overlap_ms
}

pub fn ms_to_hours(ms: f64) -> f64 {
    ms / 3.6e6
}
