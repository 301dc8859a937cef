//! Fine stage: cross-attention fusion of a feature pair, per-cell overlap
//! classification, the overlap score and final-match selection.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::dataset::Pose;
use crate::descriptor::{fuse, AttentionParams, ConvHeadParams, MlpParams};
use crate::encoder::{active_sites, restrict, FeatureDb, FeatureVolume};
use crate::error::{Error, Result};
use crate::retrieval::CandidateSet;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::voxel::{voxelize, GridConfig, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverlapConfig {
    pub channels: usize,
    /// Width of the first classification conv.
    pub hidden: usize,
}

impl OverlapConfig {
    pub fn for_channels(channels: usize) -> Self {
        Self {
            channels,
            hidden: (channels / 2).max(1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OverlapParams {
    pub config: OverlapConfig,
    pub attention: AttentionParams,
    pub fusion: MlpParams,
    pub head: ConvHeadParams,
}

/// Values of one recorded pair pass.
#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    pub r_p: Var,
    pub r_q: Var,
    pub gamma_p: Var,
    pub gamma_q: Var,
}

impl OverlapParams {
    pub fn new(store: &mut ParamStore, config: OverlapConfig) -> Self {
        let c = config.channels;
        Self {
            config,
            attention: AttentionParams::new(store, "ovl.att", c),
            fusion: MlpParams::new(store, "ovl.fusion", &[2 * c, c, c, c]),
            head: ConvHeadParams::new(store, "ovl.head", c, config.hidden),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let a = &self.attention;
        let mut ids = vec![a.w_q, a.w_k, a.w_v];
        ids.extend(self.fusion.param_ids());
        ids.extend(self.head.param_ids());
        ids
    }

    /// `r = f + MLP(cat(f, att(f, g, g)))` for one direction, restricted to
    /// the active sites of `f`; inputs are `C x H x W`.
    fn fuse_one(&self, tape: &mut Tape, store: &ParamStore, f: Var, g: Var) -> Result<Var> {
        let shape = tape.shape(f).to_vec();
        let (c, l) = (shape[0], shape[1] * shape[2]);
        let sites = active_sites(tape.value(f));
        let fl = tape.reshape(f, &[c, l])?;
        let gl = tape.reshape(g, &[c, l])?;
        let a = self.attention.attend(tape, store, fl, gl)?;
        let r = fuse(tape, store, &self.fusion, fl, a)?;
        let r = tape.reshape(r, &shape)?;
        restrict(tape, r, &sites)
    }

    pub fn cross_fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_p: Var,
        f_q: Var,
    ) -> Result<(Var, Var)> {
        let (sp, sq) = (tape.shape(f_p), tape.shape(f_q));
        if sp != sq || sp.len() != 3 || sp[0] != self.config.channels {
            return Err(Error::dim("cross_fuse", sp, sq));
        }
        let r_p = self.fuse_one(tape, store, f_p, f_q)?;
        let r_q = self.fuse_one(tape, store, f_q, f_p)?;
        Ok((r_p, r_q))
    }

    pub fn pair(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_p: Var,
        f_q: Var,
    ) -> Result<PairVars> {
        let (r_p, r_q) = self.cross_fuse(tape, store, f_p, f_q)?;
        let gamma_p = self.head.forward(tape, store, r_p)?;
        let gamma_q = self.head.forward(tape, store, r_q)?;
        Ok(PairVars {
            r_p,
            r_q,
            gamma_p,
            gamma_q,
        })
    }
}

pub fn cross_fuse(
    f_p: &FeatureVolume,
    f_q: &FeatureVolume,
    p: &OverlapParams,
    store: &ParamStore,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::inference();
    let a = tape.constant(f_p.f.clone());
    let b = tape.constant(f_q.f.clone());
    let (r_p, r_q) = p.cross_fuse(&mut tape, store, a, b)?;
    Ok((tape.value(r_p).clone(), tape.value(r_q).clone()))
}

/// Per-cell overlap probability `H x W` for a fused `C x H x W` feature.
pub fn classify(r: &Tensor, p: &OverlapParams, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let x = tape.constant(r.clone());
    let g = p.head.forward(&mut tape, store, x)?;
    Ok(tape.value(g).clone())
}

/// Cells of a `C x H x W` tensor whose channel column is not all zero.
pub fn nonzero_mask(r: &Tensor) -> Vec<bool> {
    active_sites(r)
}

/// `1/2 (sum_P gamma / N_P + sum_Q gamma / N_Q)` with the sums restricted to
/// the masked cells.
pub fn overlap_score(
    gamma_p: &Tensor,
    gamma_q: &Tensor,
    mask_p: &[bool],
    mask_q: &[bool],
) -> Result<f64> {
    let side = |g: &Tensor, m: &[bool], name: &'static str| -> Result<f64> {
        if g.len() != m.len() {
            return Err(Error::dim("overlap_score", g.shape(), &[m.len()]));
        }
        let n = m.iter().filter(|&&b| b).count();
        if n == 0 {
            return Err(Error::DegeneratePair { side: name });
        }
        let s: f64 = g
            .data()
            .iter()
            .zip(m)
            .filter(|(_, &b)| b)
            .map(|(v, _)| v)
            .sum();
        Ok(s / n as f64)
    };
    Ok(0.5 * (side(gamma_p, mask_p, "P")? + side(gamma_q, mask_q, "Q")?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapResult {
    pub gamma_p: Tensor,
    pub gamma_q: Tensor,
    pub mask_p: Vec<bool>,
    pub mask_q: Vec<bool>,
    pub n_p: usize,
    pub n_q: usize,
    pub tau: f64,
}

/// One pairwise overlap estimation.
pub fn estimate_overlap(
    f_p: &FeatureVolume,
    f_q: &FeatureVolume,
    p: &OverlapParams,
    store: &ParamStore,
) -> Result<OverlapResult> {
    let mut tape = Tape::inference();
    let a = tape.constant(f_p.f.clone());
    let b = tape.constant(f_q.f.clone());
    let vars = p.pair(&mut tape, store, a, b)?;
    let mask_p = nonzero_mask(tape.value(vars.r_p));
    let mask_q = nonzero_mask(tape.value(vars.r_q));
    let gamma_p = tape.value(vars.gamma_p).clone();
    let gamma_q = tape.value(vars.gamma_q).clone();
    let tau = overlap_score(&gamma_p, &gamma_q, &mask_p, &mask_q)?;
    Ok(OverlapResult {
        n_p: mask_p.iter().filter(|&&b| b).count(),
        n_q: mask_q.iter().filter(|&&b| b).count(),
        gamma_p,
        gamma_q,
        mask_p,
        mask_q,
        tau,
    })
}

/// Outcome of the fine stage for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchDecision {
    pub query_id: u64,
    /// `(candidate id, tau)` in candidate order.
    pub scores: Vec<(u64, f64)>,
    /// Candidates whose pair had an empty non-zero mask.
    pub degenerate: Vec<u64>,
}

impl MatchDecision {
    /// Highest tau; ties go to the smaller id. `None` when nothing scored.
    pub fn best(&self) -> Option<(u64, f64)> {
        self.ranked().first().copied()
    }

    /// Candidates by descending tau, ties by ascending id.
    pub fn ranked(&self) -> Vec<(u64, f64)> {
        let mut r = self.scores.clone();
        r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        r
    }

    pub fn ranked_ids(&self) -> Vec<u64> {
        self.ranked().into_iter().map(|(id, _)| id).collect()
    }
}

/// Counts pairwise overlap estimations across threads.
#[derive(Debug, Default)]
pub struct OverlapCounter(AtomicU64);

impl OverlapCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn increment(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// Scores every candidate against `query` and keeps the best. Runs one
/// overlap estimation per candidate, concurrently.
pub fn verify(
    query: &FeatureVolume,
    candidates: &CandidateSet,
    db: &FeatureDb,
    p: &OverlapParams,
    store: &ParamStore,
    counter: &OverlapCounter,
) -> Result<MatchDecision> {
    let outcomes: Vec<(u64, Result<f64>)> = candidates
        .entries
        .par_iter()
        .map(|c| {
            let res = db.load(c.scan_id).and_then(|fv| {
                counter.increment();
                estimate_overlap(query, fv, p, store).map(|o| o.tau)
            });
            (c.scan_id, res)
        })
        .collect();
    let mut decision = MatchDecision {
        query_id: query.scan_id,
        scores: Vec::with_capacity(outcomes.len()),
        degenerate: Vec::new(),
    };
    for (id, res) in outcomes {
        match res {
            Ok(tau) => decision.scores.push((id, tau)),
            Err(Error::DegeneratePair { .. }) => decision.degenerate.push(id),
            Err(e) => return Err(e),
        }
    }
    Ok(decision)
}

/// Text lines `query_id candidate_id tau`.
pub fn format_overlap_dump(decisions: &[MatchDecision]) -> String {
    let mut out = String::new();
    for d in decisions {
        for (id, tau) in &d.scores {
            writeln!(out, "{} {} {}", d.query_id, id, tau).expect("write to string");
        }
    }
    out
}

pub fn write_overlap_dump(path: impl AsRef<Path>, decisions: &[MatchDecision]) -> Result<()> {
    std::fs::write(path, format_overlap_dump(decisions))?;
    Ok(())
}

/// Ground-truth co-visible cells of a scan pair at feature resolution.
///
/// Each cloud is brought into the other's sensor frame; a pooled cell is
/// labeled 1 on side P when P's own footprint and Q's transformed
/// footprint are both occupied there, and symmetrically for Q. Returns
/// `(mask_p, mask_q)` as `H_f x W_f` tensors of 0/1.
pub fn gt_overlap(
    cloud_p: &PointCloud,
    cloud_q: &PointCloud,
    pose_p: &Pose,
    pose_q: &Pose,
    cfg: &GridConfig,
    feature_stride: usize,
) -> Result<(Tensor, Tensor)> {
    let q_in_p = pose_p.inverse()?.compose(pose_q);
    let p_in_q = pose_q.inverse()?.compose(pose_p);
    let moved = |c: &PointCloud, t: &Pose| {
        PointCloud::new(c.points.iter().map(|x| t.transform(x)).collect())
    };
    let foot = |c: &PointCloud| voxelize(c, cfg).pooled_footprint(feature_stride);
    let both = |a: Vec<bool>, b: Vec<bool>| -> Vec<f64> {
        a.iter()
            .zip(&b)
            .map(|(&x, &y)| if x && y { 1.0 } else { 0.0 })
            .collect()
    };
    let shape = vec![
        cfg.h_cells.div_ceil(feature_stride),
        cfg.w_cells.div_ceil(feature_stride),
    ];
    let mask_p = both(foot(cloud_p), foot(&moved(cloud_q, &q_in_p)));
    let mask_q = both(foot(cloud_q), foot(&moved(cloud_p, &p_in_q)));
    Ok((
        Tensor::from_parts(shape.clone(), mask_p),
        Tensor::from_parts(shape, mask_q),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Candidate;

    fn params(seed: u64, c: usize) -> (ParamStore, OverlapParams) {
        let mut store = ParamStore::new(seed);
        let p = OverlapParams::new(&mut store, OverlapConfig::for_channels(c));
        (store, p)
    }

    fn feature(id: u64, c: usize, salt: f64) -> FeatureVolume {
        FeatureVolume {
            scan_id: id,
            f: Tensor::from_fn([c, 3, 3], |i| ((i as f64 + salt) * 0.61).sin().max(0.0)),
        }
    }

    #[test]
    fn zero_mlp_leaves_features() {
        let (mut store, p) = params(1, 4);
        p.fusion.zero(&mut store);
        let (a, b) = (feature(0, 4, 0.0), feature(1, 4, 5.0));
        let (rp, rq) = cross_fuse(&a, &b, &p, &store).unwrap();
        assert_eq!(rp, a.f);
        assert_eq!(rq, b.f);
    }

    #[test]
    fn swapping_swaps_outputs() {
        let (store, p) = params(2, 4);
        let (a, b) = (feature(0, 4, 0.0), feature(1, 4, 5.0));
        let (rp, rq) = cross_fuse(&a, &b, &p, &store).unwrap();
        let (sq, sp) = cross_fuse(&b, &a, &p, &store).unwrap();
        assert_eq!(rp, sp);
        assert_eq!(rq, sq);
        let (x, y) = cross_fuse(&a, &a, &p, &store).unwrap();
        assert_eq!(x, y);
        assert!(cross_fuse(&a, &feature(2, 3, 0.0), &p, &store).is_err());
    }

    #[test]
    fn classify_zero_is_half() {
        let (mut store, p) = params(3, 2);
        for id in p.head.param_ids() {
            let s = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(s)).unwrap();
        }
        let g = classify(&Tensor::zeros([2, 4, 5]), &p, &store).unwrap();
        assert_eq!(g.shape(), &[4, 5]);
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classify_hand_case() {
        // 1 channel, hidden 1. conv_a = center tap 1, bias -1; conv_b = sum
        // of all taps, bias 0. Input: r = 3 at the center of a 3x3 grid.
        let mut store = ParamStore::new(0);
        let p = OverlapParams::new(
            &mut store,
            OverlapConfig {
                channels: 1,
                hidden: 1,
            },
        );
        let mut center = vec![0.0; 9];
        center[4] = 1.0;
        store
            .set_value(p.head.conv_a.0, Tensor::new([1, 1, 3, 3], center).unwrap())
            .unwrap();
        store
            .set_value(p.head.conv_a.1, Tensor::new([1], vec![-1.0]).unwrap())
            .unwrap();
        store
            .set_value(p.head.conv_b.0, Tensor::full([1, 1, 3, 3], 1.0))
            .unwrap();
        store
            .set_value(p.head.conv_b.1, Tensor::zeros([1]))
            .unwrap();
        let mut r = vec![0.0; 9];
        r[4] = 3.0;
        let g = classify(&Tensor::new([1, 3, 3], r).unwrap(), &p, &store).unwrap();
        // hidden = relu(r - 1) = 2 at center, 0 elsewhere; every output
        // cell's 3x3 window covers the center, so logit 2 everywhere.
        let want = 1.0 / (1.0 + (-2.0f64).exp());
        assert!(g.data().iter().all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn score_examples() {
        let ones = Tensor::full([2, 2], 1.0);
        let zeros = Tensor::zeros([2, 2]);
        let all = vec![true; 4];
        assert_eq!(overlap_score(&ones, &ones, &all, &all).unwrap(), 1.0);
        assert_eq!(overlap_score(&zeros, &zeros, &all, &all).unwrap(), 0.0);
        let half = Tensor::new([2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(overlap_score(&half, &ones, &all, &all).unwrap(), 0.75);
        // cells outside the mask do not count
        let mask = vec![true, true, false, false];
        assert_eq!(overlap_score(&half, &ones, &mask, &all).unwrap(), 1.0);
        assert!(matches!(
            overlap_score(&ones, &ones, &[false; 4], &all),
            Err(Error::DegeneratePair { side: "P" })
        ));
    }

    #[test]
    fn verify_picks_argmax_and_counts() {
        let (store, p) = params(4, 4);
        let mut db = FeatureDb::new();
        for id in 0..6 {
            db.store(feature(id, 4, id as f64 * 1.7)).unwrap();
        }
        let q = feature(100, 4, 0.3);
        let cands = CandidateSet {
            query_id: 100,
            k: 4,
            entries: [3, 0, 5, 1]
                .iter()
                .map(|&id| Candidate {
                    scan_id: id,
                    affinity: 0.0,
                })
                .collect(),
        };
        let counter = OverlapCounter::new();
        let d = verify(&q, &cands, &db, &p, &store, &counter).unwrap();
        assert_eq!(counter.get(), 4);
        let best = d.best().unwrap();
        for &(_, tau) in &d.scores {
            assert!(tau <= best.1);
            assert!((0.0..=1.0).contains(&tau));
        }
        let empty = CandidateSet {
            query_id: 1,
            k: 4,
            entries: vec![],
        };
        assert_eq!(
            verify(&q, &empty, &db, &p, &store, &counter)
                .unwrap()
                .best(),
            None
        );
    }

    #[test]
    fn decision_tie_prefers_smaller_id() {
        let d = MatchDecision {
            query_id: 0,
            scores: vec![(9, 0.4), (4, 0.9), (2, 0.9)],
            degenerate: vec![],
        };
        assert_eq!(d.best(), Some((2, 0.9)));
        assert_eq!(d.ranked_ids(), vec![2, 4, 9]);
    }

    #[test]
    fn gt_overlap_identical_and_disjoint() {
        let cfg = GridConfig::desk();
        let cloud = PointCloud::new(vec![
            [1.0, 1.0, 0.0],
            [-20.0, 30.0, 1.0],
            [40.0, -45.0, -1.0],
        ]);
        let pose = Pose::from_yaw(10.0, 5.0, 0.0, 0.4);
        let (mp, mq) = gt_overlap(&cloud, &cloud, &pose, &pose, &cfg, 8).unwrap();
        let occ: Vec<f64> = voxelize(&cloud, &cfg)
            .pooled_footprint(8)
            .into_iter()
            .map(|b| b as u8 as f64)
            .collect();
        assert_eq!(mp.data(), occ.as_slice());
        assert_eq!(mq.data(), occ.as_slice());

        let far = Pose::from_yaw(210.0, 5.0, 0.0, 0.4);
        let (mp, mq) = gt_overlap(&cloud, &cloud, &pose, &far, &cfg, 8).unwrap();
        assert_eq!(mp.sum(), 0.0);
        assert_eq!(mq.sum(), 0.0);
    }

    #[test]
    fn gt_overlap_degenerate_pose() {
        let cfg = GridConfig::desk();
        let mut bad = Pose::identity();
        bad.rotation *= 0.0;
        let c = PointCloud::new(vec![[0.0; 3]]);
        assert!(matches!(
            gt_overlap(&c, &c, &bad, &Pose::identity(), &cfg, 8),
            Err(Error::Pose(_))
        ));
    }
}
