//! Lazy triplet training of the descriptor head and, in the end-to-end
//! mode, of the encoder followed by the overlap head.

use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::dataset::Pose;
use crate::descriptor::GlobalDescriptor;
use crate::encoder::FEATURE_STRIDE;
use crate::error::{Error, Result};
use crate::overlap::{gt_overlap, nonzero_mask};
use crate::pipeline::Model;
use crate::retrieval::affinity_slices;
use crate::tensor::{write_checkpoint, ParamGrads, Tape, Tensor, Var};
use crate::voxel::PointCloud;

/// Descriptor neighbours per scan from which overlap partners are drawn.
const HARD_POOL: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Descriptor head only; encoder and overlap head stay frozen.
    A,
    /// Encoder and descriptor head on the triplet loss, then the overlap
    /// head on per-cell overlap labels.
    B,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(TrainMode::A),
            "B" | "b" => Ok(TrainMode::B),
            _ => Err(Error::Config(format!(
                "unknown training mode {s:?} (expected A or B)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub sigma_pos: f64,
    pub sigma_neg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub learning_rate: f64,
    pub overlap_learning_rate: f64,
    /// Triplet epochs.
    pub epochs: usize,
    /// Overlap-head epochs (mode B only).
    pub overlap_epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Partner scans drawn per query for the overlap head.
    pub overlap_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::from_config(&Config::desk(), TrainMode::B)
    }
}

impl TrainConfig {
    pub fn from_config(cfg: &Config, mode: TrainMode) -> Self {
        Self {
            margin: cfg.margin,
            sigma_pos: cfg.sigma_pos,
            sigma_neg: cfg.sigma_neg,
            n_pos: cfg.n_pos,
            n_neg: cfg.n_neg,
            learning_rate: cfg.learning_rate,
            overlap_learning_rate: cfg.overlap_learning_rate,
            epochs: cfg.epochs,
            overlap_epochs: cfg.overlap_epochs,
            seed: cfg.seed,
            mode,
            overlap_pairs: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.sigma_pos < self.sigma_neg) {
            return Err(Error::Config(format!(
                "sigma_pos {} must be below sigma_neg {}",
                self.sigma_pos, self.sigma_neg
            )));
        }
        if self.n_pos == 0 || self.n_neg == 0 {
            return Err(Error::Config("n_pos and n_neg must be positive".into()));
        }
        for lr in [self.learning_rate, self.overlap_learning_rate] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("bad learning rate {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    pub query: u64,
    pub positives: Vec<u64>,
    pub negatives: Vec<u64>,
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// One batch per query that has enough positives (`< sigma_pos` m) and
/// negatives (`> sigma_neg` m), in a seeded random query order.
pub fn mine_triplets(positions: &[[f64; 3]], cfg: &TrainConfig, seed: u64) -> Vec<TripletBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    for q in order {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (i, p) in positions.iter().enumerate() {
            if i == q {
                continue;
            }
            let d = dist(&positions[q], p);
            if d < cfg.sigma_pos {
                pos.push(i as u64);
            } else if d > cfg.sigma_neg {
                neg.push(i as u64);
            }
        }
        if pos.len() < cfg.n_pos || neg.len() < cfg.n_neg {
            continue;
        }
        let pick = |set: &[u64], n: usize, rng: &mut ChaCha8Rng| -> Vec<u64> {
            index::sample(rng, set.len(), n)
                .into_iter()
                .map(|i| set[i])
                .collect()
        };
        out.push(TripletBatch {
            query: q as u64,
            positives: pick(&pos, cfg.n_pos, &mut rng),
            negatives: pick(&neg, cfg.n_neg, &mut rng),
        });
    }
    if out.is_empty() {
        log::warn!(
            "no query has {} positives and {} negatives; nothing to train on",
            cfg.n_pos,
            cfg.n_neg
        );
    }
    out
}

/// Index `(i, j)` of the largest `m + d_pos[i] - d_neg[j]`, first in
/// row-major order on ties, and that value.
fn attaining_pair(d_pos: &[f64], d_neg: &[f64], margin: f64) -> ((usize, usize), f64) {
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for (i, dp) in d_pos.iter().enumerate() {
        for (j, dn) in d_neg.iter().enumerate() {
            let v = margin + dp - dn;
            if v > best.1 {
                best = ((i, j), v);
            }
        }
    }
    best
}

/// `max_{i,j} [m + d(q, p_i) - d(q, n_j)]_+` as a scalar tensor.
pub fn lazy_triplet_loss(
    query: &GlobalDescriptor,
    positives: &[GlobalDescriptor],
    negatives: &[GlobalDescriptor],
    margin: f64,
) -> Result<Tensor> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Contract(
            "lazy triplet loss needs positives and negatives".into(),
        ));
    }
    let d = |set: &[GlobalDescriptor]| -> Result<Vec<f64>> {
        set.iter()
            .map(|p| affinity_slices(&query.v, &p.v))
            .collect()
    };
    let (_, v) = attaining_pair(&d(positives)?, &d(negatives)?, margin);
    Ok(Tensor::scalar(v.max(0.0)))
}

/// Differentiable form of [`lazy_triplet_loss`] on recorded descriptors.
pub fn lazy_triplet_loss_var(
    tape: &mut Tape,
    query: Var,
    positives: &[Var],
    negatives: &[Var],
    margin: f64,
) -> Result<Var> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Contract(
            "lazy triplet loss needs positives and negatives".into(),
        ));
    }
    let mut dist = |x: Var| -> Result<Var> {
        let diff = tape.sub(query, x)?;
        Ok(tape.norm(diff))
    };
    let dp: Vec<Var> = positives.iter().map(|&p| dist(p)).collect::<Result<_>>()?;
    let dn: Vec<Var> = negatives.iter().map(|&n| dist(n)).collect::<Result<_>>()?;
    let mut hinges = Vec::with_capacity(dp.len() * dn.len());
    for &p in &dp {
        for &n in &dn {
            let h = tape.sub(p, n)?;
            hinges.push(tape.add_scalar(h, margin));
        }
    }
    let all = tape.concat(&hinges)?;
    let worst = tape.max_all(all);
    Ok(tape.relu(worst))
}

/// Gradients of `m + |q - p| - |q - n|` with respect to `q`, `p`, `n`.
fn hinge_gradients(q: &[f64], p: &[f64], n: &[f64]) -> [Vec<f64>; 3] {
    let unit = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            d.iter().map(|v| v / norm).collect()
        } else {
            vec![0.0; d.len()]
        }
    };
    let up = unit(q, p);
    let un = unit(q, n);
    let gq = up.iter().zip(&un).map(|(a, b)| a - b).collect();
    let gp = up.iter().map(|v| -v).collect();
    [gq, gp, un]
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: &'static str,
    pub loss: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub batches: usize,
}

impl EpochLog {
    /// `epoch loss lr seed`.
    pub fn line(&self) -> String {
        format!(
            "{} {:.9} {} {}",
            self.epoch, self.loss, self.learning_rate, self.seed
        )
    }
}

enum Source<'a> {
    /// Encoder trains: descriptors come from BEV grids.
    Bev(&'a [Tensor]),
    /// Encoder frozen: descriptors come from cached features.
    Features(&'a [Tensor]),
}

fn describe(model: &Model, src: &Source, id: usize, record: bool) -> Result<(Tape, Var)> {
    let mut tape = if record {
        Tape::new()
    } else {
        Tape::inference()
    };
    let v = match src {
        Source::Bev(b) => {
            let x = tape.constant(b[id].clone());
            let f = model.encoder.forward(&mut tape, &model.store, x)?;
            model.descriptor.forward(&mut tape, &model.store, f)?
        }
        Source::Features(f) => {
            let x = tape.constant(f[id].clone());
            model.descriptor.forward(&mut tape, &model.store, x)?
        }
    };
    Ok((tape, v))
}

/// Loss of one batch and, when the hinge is active, one SGD step through
/// the attaining triple only.
fn triplet_step(
    model: &mut Model,
    src: &Source,
    batch: &TripletBatch,
    cfg: &TrainConfig,
) -> Result<f64> {
    let ids: Vec<usize> = std::iter::once(batch.query)
        .chain(batch.positives.iter().copied())
        .chain(batch.negatives.iter().copied())
        .map(|i| i as usize)
        .collect();
    let descs: Vec<Vec<f64>> = {
        let m = &*model;
        ids.par_iter()
            .map(|&id| describe(m, src, id, false).map(|(t, v)| t.value(v).to_vec()))
            .collect::<Result<_>>()?
    };
    let np = batch.positives.len();
    let q = &descs[0];
    let d = |x: &Vec<f64>| affinity_slices(q, x);
    let dp: Vec<f64> = descs[1..=np].iter().map(d).collect::<Result<_>>()?;
    let dn: Vec<f64> = descs[1 + np..].iter().map(d).collect::<Result<_>>()?;
    let ((i, j), value) = attaining_pair(&dp, &dn, cfg.margin);
    let loss = value.max(0.0);
    if value <= 0.0 || cfg.learning_rate == 0.0 {
        return Ok(loss);
    }
    let (pi, nj) = (1 + i, 1 + np + j);
    let seeds = hinge_gradients(q, &descs[pi], &descs[nj]);
    let grads: Vec<ParamGrads> = {
        let m = &*model;
        [ids[0], ids[pi], ids[nj]]
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(&id, g)| {
                let (tape, v) = describe(m, src, id, true)?;
                tape.backward_seeded(v, &Tensor::from_parts(vec![g.len()], g.clone()))
            })
            .collect::<Result<_>>()?
    };
    model.store.zero_grad();
    for g in &grads {
        g.apply_to(&mut model.store);
    }
    model.store.sgd_step(cfg.learning_rate);
    Ok(loss)
}

/// Overlap pair with its per-cell labels at feature resolution.
struct OverlapPair {
    a: usize,
    b: usize,
    gt_a: Tensor,
    gt_b: Tensor,
}

/// Closest scans in descriptor space, the pool the fine stage later sees.
fn descriptor_neighbors(descs: &[Vec<f64>], k: usize) -> Result<Vec<Vec<usize>>> {
    descs
        .par_iter()
        .enumerate()
        .map(|(a, da)| {
            let mut scored: Vec<(f64, usize)> = descs
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != a)
                .map(|(b, db)| affinity_slices(da, db).map(|d| (d, b)))
                .collect::<Result<_>>()?;
            scored.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            Ok(scored.into_iter().take(k).map(|(_, b)| b).collect())
        })
        .collect()
}

/// Partners for the overlap head: one positive, then alternating between
/// descriptor-space neighbours and any scan whose grid window can overlap
/// the query's.
fn overlap_pairs(
    clouds: &[PointCloud],
    poses: &[Pose],
    neighbors: &[Vec<usize>],
    model: &Model,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<OverlapPair>> {
    let g = &model.config.grid;
    let reach = ((g.x_range.1 - g.x_range.0).powi(2) + (g.y_range.1 - g.y_range.0).powi(2)).sqrt();
    let positions: Vec<[f64; 3]> = poses.iter().map(Pose::position).collect();
    let mut pairs = Vec::new();
    for a in 0..poses.len() {
        let near: Vec<usize> = (0..poses.len())
            .filter(|&b| b != a && dist(&positions[a], &positions[b]) < cfg.sigma_pos)
            .collect();
        let within: Vec<usize> = (0..poses.len())
            .filter(|&b| b != a && dist(&positions[a], &positions[b]) < reach)
            .collect();
        let mut partners = Vec::new();
        if !near.is_empty() {
            partners.push(near[rng.random_range(0..near.len())]);
        }
        let hard = &neighbors[a];
        while partners.len() < cfg.overlap_pairs && !(within.is_empty() && hard.is_empty()) {
            let pool = if (partners.len() % 2 == 1 && !hard.is_empty()) || within.is_empty() {
                hard
            } else {
                &within
            };
            partners.push(pool[rng.random_range(0..pool.len())]);
        }
        for b in partners {
            let (gt_a, gt_b) = gt_overlap(
                &clouds[a],
                &clouds[b],
                &poses[a],
                &poses[b],
                g,
                FEATURE_STRIDE,
            )?;
            pairs.push(OverlapPair { a, b, gt_a, gt_b });
        }
    }
    Ok(pairs)
}

/// BCE on both sides of one pair, restricted to cells with features.
/// `None` when either side has no such cell.
fn overlap_pair_grads(
    model: &Model,
    feats: &[Tensor],
    pair: &OverlapPair,
) -> Result<Option<(f64, ParamGrads)>> {
    let mut tape = Tape::new();
    let fa = tape.constant(feats[pair.a].clone());
    let fb = tape.constant(feats[pair.b].clone());
    let vars = model.overlap.pair(&mut tape, &model.store, fa, fb)?;
    let mask_a = nonzero_mask(tape.value(vars.r_p));
    let mask_b = nonzero_mask(tape.value(vars.r_q));
    let la = match tape.bce(vars.gamma_p, pair.gt_a.data(), &mask_a) {
        Ok(l) => l,
        Err(Error::DegeneratePair { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let lb = match tape.bce(vars.gamma_q, pair.gt_b.data(), &mask_b) {
        Ok(l) => l,
        Err(Error::DegeneratePair { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let sum = tape.add(la, lb)?;
    let loss = tape.scale(sum, 0.5);
    let value = tape.value(loss).item()?;
    let grads = tape.backward_seeded(loss, &Tensor::scalar(1.0))?;
    Ok(Some((value, grads)))
}

/// Non-finite activations mid-epoch mean the parameters blew up.
fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Divergence {
            epoch,
            loss: f64::NAN,
        },
        e => e,
    }
}

fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss })
    }
}

fn save_epoch(model: &Model, out_dir: Option<&Path>, epoch: usize) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_checkpoint(
            dir.join(format!("epoch_{epoch:03}.bin")),
            &model.store.named_values(),
        )?;
        write_checkpoint(dir.join("model.bin"), &model.store.named_values())?;
    }
    Ok(())
}

/// Trains `model` in place on a sequence with known poses. Scan ids are
/// indices into `clouds`. Writes `epoch_NNN.bin` and `model.bin` into
/// `out_dir` after every epoch and hands each log line to `on_epoch`.
pub fn train(
    model: &mut Model,
    clouds: &[PointCloud],
    poses: &[Pose],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if clouds.len() != poses.len() {
        return Err(Error::dim("train", &[clouds.len()], &[poses.len()]));
    }
    let bevs: Vec<Tensor> = clouds.par_iter().map(|c| model.bev(c)).collect();
    let positions: Vec<[f64; 3]> = poses.iter().map(Pose::position).collect();
    let encode_all = |m: &Model| -> Result<Vec<Tensor>> {
        bevs.par_iter()
            .enumerate()
            .map(|(i, b)| m.features(b, i as u64).map(|f| f.f))
            .collect()
    };

    model.store.set_trainable("", true);
    model.store.set_trainable("ovl.", false);
    let cached;
    let src = match cfg.mode {
        TrainMode::A => {
            model.store.set_trainable("enc.", false);
            cached = encode_all(model)?;
            Source::Features(&cached)
        }
        TrainMode::B => Source::Bev(&bevs),
    };

    let mut log = Vec::new();
    let mut emit = |entry: EpochLog, log: &mut Vec<EpochLog>| {
        on_epoch(&entry);
        log.push(entry);
    };
    for epoch in 0..cfg.epochs {
        let batches = mine_triplets(&positions, cfg, cfg.seed.wrapping_add(epoch as u64));
        let mut total = 0.0;
        for b in &batches {
            let l = triplet_step(model, &src, b, cfg).map_err(diverged(epoch))?;
            check_finite(epoch, l)?;
            total += l;
        }
        let loss = if batches.is_empty() {
            0.0
        } else {
            total / batches.len() as f64
        };
        check_finite(epoch, loss)?;
        save_epoch(model, out_dir, epoch)?;
        emit(
            EpochLog {
                epoch,
                phase: "triplet",
                loss,
                learning_rate: cfg.learning_rate,
                seed: cfg.seed,
                batches: batches.len(),
            },
            &mut log,
        );
    }

    if cfg.mode == TrainMode::B && cfg.overlap_epochs > 0 {
        model.store.set_trainable("", false);
        model.store.set_trainable("ovl.", true);
        let feats = encode_all(model)?;
        let descs: Vec<Vec<f64>> = (0..feats.len())
            .into_par_iter()
            .map(|i| {
                describe(model, &Source::Features(&feats), i, false)
                    .map(|(t, v)| t.value(v).to_vec())
            })
            .collect::<Result<_>>()?;
        let neighbors = descriptor_neighbors(&descs, HARD_POOL)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6f76_6c70);
        for e in 0..cfg.overlap_epochs {
            let epoch = cfg.epochs + e;
            let mut pairs = overlap_pairs(clouds, poses, &neighbors, model, cfg, &mut rng)?;
            pairs.shuffle(&mut rng);
            let (mut total, mut used) = (0.0, 0usize);
            for chunk in pairs.chunks(cfg.overlap_pairs.max(1)) {
                let outs: Vec<Option<(f64, ParamGrads)>> = {
                    let m = &*model;
                    chunk
                        .par_iter()
                        .map(|p| overlap_pair_grads(m, &feats, p))
                        .collect::<Result<_>>()
                        .map_err(diverged(epoch))?
                };
                model.store.zero_grad();
                let mut n = 0;
                for (l, g) in outs.into_iter().flatten() {
                    check_finite(epoch, l)?;
                    g.apply_to(&mut model.store);
                    total += l;
                    n += 1;
                }
                if n > 0 {
                    model.store.sgd_step(cfg.overlap_learning_rate / n as f64);
                    used += n;
                }
            }
            let loss = if used == 0 { 0.0 } else { total / used as f64 };
            check_finite(epoch, loss)?;
            save_epoch(model, out_dir, epoch)?;
            emit(
                EpochLog {
                    epoch,
                    phase: "overlap",
                    loss,
                    learning_rate: cfg.overlap_learning_rate,
                    seed: cfg.seed,
                    batches: used,
                },
                &mut log,
            );
        }
    }
    model.store.set_trainable("", true);
    Ok(log)
}
