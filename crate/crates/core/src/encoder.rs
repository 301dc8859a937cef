//! Residual convolutional BEV encoder and the feature database.
//!
//! Architecture: a 3x3 stem, then three stages of (3x3 stride-2
//! downsampling conv, residual block). A residual block computes
//! `relu(x + conv(relu(conv(x))))`. The output is 8x smaller than the
//! input in both spatial directions.
//!
//! The network is a dense realization of a sparse convolution network:
//! every conv output is restricted to the active sites of its resolution.
//! Input sites are the occupied BEV cells; after a stride-2 layer a cell is
//! active when any cell of its 2x2 parent block was. Inactive cells stay
//! exactly zero, so the non-zero cells of the feature volume are the
//! occupied footprint pooled by [`FEATURE_STRIDE`].

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamId, ParamStore, Tape, Tensor, Var};

/// Spatial reduction between BEV grid and feature volume.
pub const FEATURE_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output widths of the stem and the three stages; the last is `C_f`.
    pub widths: [usize; 4],
}

impl EncoderConfig {
    /// `C_B -> 64 -> 128 -> 256 -> 512`.
    pub fn full() -> Self {
        Self {
            in_channels: 32,
            widths: [64, 128, 256, 512],
        }
    }

    /// Desk-scale encoder with `C_f = 32`.
    pub fn desk() -> Self {
        Self {
            in_channels: 8,
            widths: [16, 32, 32, 32],
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.widths[3]
    }

    pub fn output_shape(&self, h: usize, w: usize) -> [usize; 3] {
        let down = |n: usize| (0..3).fold(n, |n, _| (n + 1) / 2);
        [self.feature_channels(), down(h), down(w)]
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ParamId,
    res_a: ParamId,
    res_b: ParamId,
}

/// Handles to the encoder's filters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    stem: ParamId,
    stages: Vec<Stage>,
}

fn conv_param(store: &mut ParamStore, name: String, c_out: usize, c_in: usize) -> ParamId {
    store.add_he_uniform(name, &[c_out, c_in, 3, 3], c_in * 9)
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, config: EncoderConfig) -> Self {
        let w = config.widths;
        let stem = conv_param(store, "enc.stem".into(), w[0], config.in_channels);
        let stages = (0..3)
            .map(|s| Stage {
                down: conv_param(store, format!("enc.stage{s}.down"), w[s + 1], w[s]),
                res_a: conv_param(store, format!("enc.stage{s}.res_a"), w[s + 1], w[s + 1]),
                res_b: conv_param(store, format!("enc.stage{s}.res_b"), w[s + 1], w[s + 1]),
            })
            .collect();
        Self {
            config,
            stem,
            stages,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.stem)
            .chain(self.stages.iter().flat_map(|s| [s.down, s.res_a, s.res_b]))
            .collect()
    }

    /// Records the encoder on `tape`; `bev` is `C_B x H_B x W_B`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bev: Var) -> Result<Var> {
        let shape = tape.shape(bev).to_vec();
        if shape.len() != 3 || shape[0] != self.config.in_channels {
            return Err(Error::dim(
                "encode",
                &shape,
                &[self.config.in_channels, 0, 0],
            ));
        }
        let (mut h, mut w) = (shape[1], shape[2]);
        let mut sites = active_sites(tape.value(bev));
        let stem = tape.param(store, self.stem);
        let x = tape.conv2d(bev, stem, None, 1, 1)?;
        let x = restrict(tape, x, &sites)?;
        let mut x = tape.relu(x);
        for stage in &self.stages {
            (sites, h, w) = pool_sites(&sites, h, w);
            let down = tape.param(store, stage.down);
            let d = tape.conv2d(x, down, None, 2, 1)?;
            let d = restrict(tape, d, &sites)?;
            let d = tape.relu(d);
            let a = tape.param(store, stage.res_a);
            let b = tape.param(store, stage.res_b);
            let r = tape.conv2d(d, a, None, 1, 1)?;
            let r = restrict(tape, r, &sites)?;
            let r = tape.relu(r);
            let r = tape.conv2d(r, b, None, 1, 1)?;
            let r = restrict(tape, r, &sites)?;
            let sum = tape.add(d, r)?;
            x = tape.relu(sum);
        }
        Ok(x)
    }
}

/// Cells of a `C x H x W` tensor whose channel column is not all zero,
/// row-major over `H x W`.
pub fn active_sites(x: &Tensor) -> Vec<bool> {
    let shape = x.shape();
    let (c, l) = (shape[0], shape[1..].iter().product::<usize>());
    let d = x.data();
    (0..l)
        .map(|i| (0..c).any(|ch| d[ch * l + i] != 0.0))
        .collect()
}

/// Active sites one stride-2 level down: OR over each 2x2 block.
fn pool_sites(sites: &[bool], h: usize, w: usize) -> (Vec<bool>, usize, usize) {
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![false; h2 * w2];
    for r in 0..h {
        for c in 0..w {
            if sites[r * w + c] {
                out[(r / 2) * w2 + c / 2] = true;
            }
        }
    }
    (out, h2, w2)
}

/// Zeroes every cell of a `C x H x W` variable outside `sites`.
pub fn restrict(tape: &mut Tape, x: Var, sites: &[bool]) -> Result<Var> {
    if sites.iter().all(|&s| s) {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let l = sites.len();
    if shape.iter().skip(1).product::<usize>() != l {
        return Err(Error::dim("restrict", &shape, &[0, l]));
    }
    let flat = tape.reshape(x, &[shape[0], l])?;
    let m = tape.constant(Tensor::from_parts(
        vec![l],
        sites.iter().map(|&s| s as u8 as f64).collect(),
    ));
    let y = tape.mul_row_broadcast(flat, m)?;
    tape.reshape(y, &shape)
}

/// Encoded BEV feature `f`, `C_f x H_f x W_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub scan_id: u64,
    pub f: Tensor,
}

impl FeatureVolume {
    pub fn channels(&self) -> usize {
        self.f.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.f.shape()[1] * self.f.shape()[2]
    }
}

/// Runs the encoder in inference mode.
pub fn encode(
    bev: &Tensor,
    params: &EncoderParams,
    store: &ParamStore,
    scan_id: u64,
) -> Result<FeatureVolume> {
    let mut tape = Tape::inference();
    let x = tape.constant(bev.clone());
    let f = params.forward(&mut tape, store, x)?;
    Ok(FeatureVolume {
        scan_id,
        f: tape.value(f).clone(),
    })
}

/// Feature volumes keyed by scan id, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct FeatureDb {
    entries: IndexMap<u64, FeatureVolume>,
    path: Option<PathBuf>,
}

const FEAT_PREFIX: &str = "feat/";

impl FeatureDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// An empty database that [`flush`](Self::flush)es to `path`.
    pub fn with_path(path: impl Into<PathBuf>) -> Self {
        Self {
            entries: IndexMap::new(),
            path: Some(path.into()),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut db = Self::with_path(path);
        for (key, f) in read_checkpoint(path)? {
            let scan_id = key
                .strip_prefix(FEAT_PREFIX)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, format!("unexpected record {key:?}")))?;
            db.store(FeatureVolume { scan_id, f })?;
        }
        Ok(db)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn store(&mut self, fv: FeatureVolume) -> Result<()> {
        if self.entries.contains_key(&fv.scan_id) {
            return Err(Error::Conflict {
                kind: "feature",
                id: fv.scan_id,
            });
        }
        self.entries.insert(fv.scan_id, fv);
        Ok(())
    }

    pub fn load(&self, scan_id: u64) -> Result<&FeatureVolume> {
        self.entries.get(&scan_id).ok_or(Error::NotFound {
            kind: "feature",
            id: scan_id,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureVolume> {
        self.entries.values()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let records: Vec<_> = self
            .entries
            .values()
            .map(|fv| (format!("{FEAT_PREFIX}{}", fv.scan_id), fv.f.clone()))
            .collect();
        write_checkpoint(path, &records)
    }

    /// Writes to the backing file, if one was given.
    pub fn flush(&self) -> Result<()> {
        match &self.path {
            Some(p) => self.save(p),
            None => Err(Error::Config("feature database has no backing file".into())),
        }
    }
}

pub fn store_feature(db: &mut FeatureDb, fv: FeatureVolume) -> Result<()> {
    db.store(fv)
}

pub fn load_feature(db: &FeatureDb, scan_id: u64) -> Result<&FeatureVolume> {
    db.load(scan_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bev_gives_zero_features() {
        let mut store = ParamStore::new(1);
        let enc = EncoderParams::new(&mut store, EncoderConfig::desk());
        let fv = encode(&Tensor::zeros([8, 64, 64]), &enc, &store, 0).unwrap();
        assert_eq!(fv.f.shape(), &[32, 8, 8]);
        assert!(fv.f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_scale_shape_arithmetic() {
        assert_eq!(EncoderConfig::full().output_shape(256, 256), [512, 32, 32]);
        assert_eq!(EncoderConfig::desk().output_shape(64, 64), [32, 8, 8]);
    }

    #[test]
    fn wrong_input_channels() {
        let mut store = ParamStore::new(1);
        let enc = EncoderParams::new(&mut store, EncoderConfig::desk());
        assert!(matches!(
            encode(&Tensor::zeros([4, 64, 64]), &enc, &store, 0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn deterministic() {
        let mut store = ParamStore::new(5);
        let enc = EncoderParams::new(&mut store, EncoderConfig::desk());
        let bev = Tensor::from_fn([8, 64, 64], |i| ((i * 2654435761) % 7 == 0) as u8 as f64);
        let a = encode(&bev, &enc, &store, 1).unwrap();
        let b = encode(&bev, &enc, &store, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.f.all_finite());
    }

    #[test]
    fn db_store_load_conflict() {
        let mut db = FeatureDb::new();
        let fv = FeatureVolume {
            scan_id: 7,
            f: Tensor::from_fn([2, 2, 2], |i| i as f64 / 3.0),
        };
        store_feature(&mut db, fv.clone()).unwrap();
        assert_eq!(load_feature(&db, 7).unwrap(), &fv);
        assert!(matches!(
            load_feature(&db, 8),
            Err(Error::NotFound { id: 8, .. })
        ));
        assert!(matches!(
            store_feature(&mut db, fv),
            Err(Error::Conflict { id: 7, .. })
        ));
    }

    #[test]
    fn db_file_round_trip_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db_f.bin");
        let mut db = FeatureDb::with_path(&path);
        for id in [9, 2, 5] {
            db.store(FeatureVolume {
                scan_id: id,
                f: Tensor::from_fn([1, 2, 3], |i| (i as f64 + id as f64).sin()),
            })
            .unwrap();
        }
        db.flush().unwrap();
        let back = FeatureDb::open(&path).unwrap();
        let ids: Vec<u64> = back.iter().map(|f| f.scan_id).collect();
        assert_eq!(ids, vec![9, 2, 5]);
        for fv in db.iter() {
            assert_eq!(back.load(fv.scan_id).unwrap(), fv);
        }
    }
}
