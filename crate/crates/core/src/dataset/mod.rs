//! Data ingestion, synthetic worlds, loop ground truth, recall metrics and
//! the per-stage profiler.

mod kitti;
mod labels;
mod pose;
mod profile;
mod recall;
mod synth;

pub use kitti::{
    load_poses, load_scan, load_sequence, parse_poses, scan_path, write_poses, write_scan,
    write_sequence,
};
pub use labels::{ground_truth_loops, LoopLabels};
pub use pose::Pose;
pub use profile::{
    exhaustive_cost_ms, ms_to_hours, projected_cost_ms, Profiler, Stage, StageStats, TimingReport,
};
pub use recall::{
    eligible_count, one_percent_n, random_baseline_recall, recall_at_n, recall_curve, EvalReport,
    RankedQuery,
};
pub use synth::{synth_world, SynthConfig, SynthWorld};
