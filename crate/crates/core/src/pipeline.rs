//! The assembled model and the index / retrieve / verify / evaluate flow.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::Config;
use crate::dataset::{
    eligible_count, ground_truth_loops, one_percent_n, random_baseline_recall, recall_at_n,
    recall_curve, EvalReport, LoopLabels, Pose, Profiler, RankedQuery, Stage,
};
use crate::descriptor::{generate_descriptor, DescriptorParams, GlobalDescriptor};
use crate::encoder::{encode, EncoderParams, FeatureDb, FeatureVolume};
use crate::error::{Error, Result};
use crate::overlap::{estimate_overlap, verify, MatchDecision, OverlapCounter, OverlapParams};
use crate::retrieval::{top_k_among, CandidateSet, DescriptorDb};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tensor};
use crate::voxel::{voxelize, PointCloud};

/// Length of the reported coarse Recall@N curve.
pub const CURVE_LEN: usize = 25;

/// Encoder, descriptor head and overlap head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub descriptor: DescriptorParams,
    pub overlap: OverlapParams,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: &Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let encoder = EncoderParams::new(&mut store, config.encoder);
        let descriptor = DescriptorParams::new(&mut store, config.descriptor);
        let overlap = OverlapParams::new(&mut store, config.overlap);
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            descriptor,
            overlap,
        })
    }

    pub fn load(config: &Config, checkpoint: impl AsRef<Path>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.store.load_values(&read_checkpoint(checkpoint)?)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.store.named_values())
    }

    /// Voxelized `C_B x H_B x W_B` occupancy.
    pub fn bev(&self, cloud: &PointCloud) -> Tensor {
        voxelize(cloud, &self.config.grid).to_channels()
    }

    pub fn features(&self, bev: &Tensor, scan_id: u64) -> Result<FeatureVolume> {
        encode(bev, &self.encoder, &self.store, scan_id)
    }

    pub fn describe(&self, fv: &FeatureVolume) -> Result<GlobalDescriptor> {
        generate_descriptor(fv, &self.descriptor, &self.store)
    }
}

/// Both databases for one sequence.
#[derive(Clone, Debug, Default)]
pub struct Index {
    pub features: FeatureDb,
    pub descriptors: DescriptorDb,
}

impl Index {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.features.save(dir.join("db_f.bin"))?;
        self.descriptors.save(dir.join("db_v.bin"))
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            features: FeatureDb::open(dir.join("db_f.bin"))?,
            descriptors: DescriptorDb::open(dir.join("db_v.bin"))?,
        })
    }
}

/// Voxelizes, encodes and describes every scan; scan `i` gets id `i`.
///
/// With a profiler the scans run one after another so stage timings are
/// not distorted by contention.
pub fn index_scans(
    model: &Model,
    clouds: &[PointCloud],
    profiler: Option<&mut Profiler>,
) -> Result<Index> {
    let one =
        |(i, cloud): (usize, &PointCloud)| -> Result<(FeatureVolume, GlobalDescriptor, [f64; 3])> {
            let t0 = Instant::now();
            let bev = model.bev(cloud);
            let t1 = Instant::now();
            let fv = model.features(&bev, i as u64)?;
            let t2 = Instant::now();
            let d = model.describe(&fv)?;
            let t3 = Instant::now();
            let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
            Ok((fv, d, [ms(t0, t1), ms(t1, t2), ms(t2, t3)]))
        };
    let results: Vec<_> = match profiler {
        Some(_) => clouds.iter().enumerate().map(one).collect::<Result<_>>()?,
        None => clouds
            .par_iter()
            .enumerate()
            .map(one)
            .collect::<Result<_>>()?,
    };
    let mut index = Index::default();
    let mut timings = Vec::with_capacity(results.len());
    for (fv, d, t) in results {
        index.features.store(fv)?;
        index.descriptors.insert(d)?;
        timings.push(t);
    }
    if let Some(p) = profiler {
        for t in timings {
            p.record_ms(Stage::Voxelization, t[0]);
            p.record_ms(Stage::FeatureExtraction, t[1]);
            p.record_ms(Stage::DescriptorGeneration, t[2]);
        }
    }
    Ok(index)
}

/// Coarse Top-`k` for `query_id` against the scans indexed before it.
pub fn retrieve(index: &Index, query_id: u64, k: usize, exclusion: u64) -> Result<CandidateSet> {
    let q = index.descriptors.get(query_id)?;
    top_k_among(
        index.descriptors.range(..query_id),
        q,
        query_id,
        k,
        exclusion,
    )
}

/// Overlap scores for the candidates of one query.
pub fn verify_query(
    model: &Model,
    index: &Index,
    candidates: &CandidateSet,
    counter: &OverlapCounter,
) -> Result<MatchDecision> {
    let q = index.features.load(candidates.query_id)?;
    verify(
        q,
        candidates,
        &index.features,
        &model.overlap,
        &model.store,
        counter,
    )
}

/// Serial variant of [`verify_query`] that times each estimation.
fn verify_timed(
    model: &Model,
    index: &Index,
    candidates: &CandidateSet,
    counter: &OverlapCounter,
    timings: &mut Vec<f64>,
) -> Result<MatchDecision> {
    let q = index.features.load(candidates.query_id)?;
    let mut decision = MatchDecision {
        query_id: candidates.query_id,
        scores: Vec::new(),
        degenerate: Vec::new(),
    };
    for c in &candidates.entries {
        let p = index.features.load(c.scan_id)?;
        let start = Instant::now();
        counter.increment();
        let res = estimate_overlap(q, p, &model.overlap, &model.store);
        timings.push(start.elapsed().as_secs_f64() * 1e3);
        match res {
            Ok(o) => decision.scores.push((c.scan_id, o.tau)),
            Err(Error::DegeneratePair { .. }) => decision.degenerate.push(c.scan_id),
            Err(e) => return Err(e),
        }
    }
    Ok(decision)
}

/// Fine-stage ordering: scored candidates by overlap, then degenerate ones
/// in coarse order.
pub fn fine_ranking(decision: &MatchDecision, candidates: &CandidateSet) -> Vec<u64> {
    let mut ids = decision.ranked_ids();
    ids.extend(
        candidates
            .ids()
            .into_iter()
            .filter(|id| decision.degenerate.contains(id)),
    );
    ids
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub exclusion: u64,
    pub d_true: f64,
    /// Run queries without a true loop too; they do not enter recall.
    pub all_queries: bool,
}

impl EvalOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            k: cfg.k,
            exclusion: cfg.exclusion,
            d_true: cfg.d_true,
            all_queries: false,
        }
    }
}

/// Per-query outputs of a coarse-to-fine run.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub labels: LoopLabels,
    pub coarse: Vec<RankedQuery>,
    pub fine: Vec<RankedQuery>,
    pub decisions: Vec<MatchDecision>,
    pub overlap_calls: u64,
}

impl Evaluation {
    pub fn report(&self, sequence: &str, seed: u64, k: usize) -> EvalReport {
        EvalReport {
            sequence: sequence.to_string(),
            seed,
            k,
            loop_queries: self.labels.loop_queries().len(),
            queries: self.coarse.len(),
            coarse_recall_at_1: recall_at_n(&self.coarse, &self.labels, Some(1)),
            coarse_recall_at_1pct: recall_at_n(&self.coarse, &self.labels, None),
            recall_at_1: recall_at_n(&self.fine, &self.labels, Some(1)),
            recall_at_1pct: recall_at_n(&self.fine, &self.labels, None),
            coarse_curve: recall_curve(&self.coarse, &self.labels, CURVE_LEN),
            random_recall_at_1: random_baseline_recall(&self.labels),
            overlap_calls: self.overlap_calls,
            timings: None,
        }
    }
}

struct QueryOutcome {
    coarse: RankedQuery,
    fine: RankedQuery,
    decision: MatchDecision,
    select_ms: f64,
    overlap_ms: Vec<f64>,
}

/// Runs retrieval and verification for every query that has at least one
/// eligible scan (or every loop query, unless `all_queries`).
///
/// The coarse list holds `max(K, 25, N_1%)` entries so the Recall@N curve
/// and Recall@1% are defined; the fine list re-ranks its first K entries
/// and keeps the coarse remainder.
pub fn evaluate(
    model: &Model,
    index: &Index,
    poses: &[Pose],
    opts: &EvalOptions,
    profiler: Option<&mut Profiler>,
) -> Result<Evaluation> {
    if opts.k == 0 {
        return Err(Error::Contract("evaluate needs K >= 1".into()));
    }
    let labels = ground_truth_loops(poses, opts.d_true, opts.exclusion);
    let queries: Vec<u64> = (0..poses.len() as u64)
        .filter(|&q| eligible_count(q, opts.exclusion) > 0)
        .filter(|&q| opts.all_queries || labels.has_loop(q))
        .collect();
    let counter = OverlapCounter::new();
    let timed = profiler.is_some();
    let run = |q: u64| -> Result<QueryOutcome> {
        let eligible = eligible_count(q, opts.exclusion);
        let depth = opts.k.max(CURVE_LEN).max(one_percent_n(eligible));
        let start = Instant::now();
        let deep = retrieve(index, q, depth, opts.exclusion)?;
        let select_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut top = deep.clone();
        top.k = opts.k;
        top.entries.truncate(opts.k);
        let mut overlap_ms = Vec::new();
        let decision = if timed {
            verify_timed(model, index, &top, &counter, &mut overlap_ms)?
        } else {
            verify_query(model, index, &top, &counter)?
        };
        let coarse_ids = deep.ids();
        let mut fine_ids = fine_ranking(&decision, &top);
        fine_ids.extend_from_slice(&coarse_ids[top.len()..]);
        Ok(QueryOutcome {
            coarse: RankedQuery {
                query_id: q,
                ranked: coarse_ids,
                eligible,
            },
            fine: RankedQuery {
                query_id: q,
                ranked: fine_ids,
                eligible,
            },
            decision,
            select_ms,
            overlap_ms,
        })
    };
    let outcomes: Vec<QueryOutcome> = if timed {
        queries.iter().map(|&q| run(q)).collect::<Result<_>>()?
    } else {
        queries.par_iter().map(|&q| run(q)).collect::<Result<_>>()?
    };
    let mut eval = Evaluation {
        labels,
        coarse: Vec::with_capacity(outcomes.len()),
        fine: Vec::with_capacity(outcomes.len()),
        decisions: Vec::with_capacity(outcomes.len()),
        overlap_calls: counter.get(),
    };
    let mut profiler = profiler;
    for o in outcomes {
        if let Some(p) = profiler.as_deref_mut() {
            p.record_ms(Stage::CandidateSelection, o.select_ms);
            for &ms in &o.overlap_ms {
                p.record_ms(Stage::OverlapEstimation, ms);
            }
        }
        eval.coarse.push(o.coarse);
        eval.fine.push(o.fine);
        eval.decisions.push(o.decision);
    }
    Ok(eval)
}

/// Coarse-only Top-1 decisions for every query with an eligible scan.
pub fn coarse_matches(
    index: &Index,
    n_scans: usize,
    exclusion: u64,
) -> Result<Vec<(u64, Option<u64>)>> {
    (0..n_scans as u64)
        .filter(|&q| eligible_count(q, exclusion) > 0)
        .map(|q| {
            Ok((
                q,
                retrieve(index, q, 1, exclusion)?
                    .entries
                    .first()
                    .map(|c| c.scan_id),
            ))
        })
        .collect()
}
