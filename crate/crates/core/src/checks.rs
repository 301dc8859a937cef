//! Finite-difference suites over every trainable path, shared by the
//! `gradcheck` command and the test targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::descriptor::{AttentionKind, DescriptorConfig, DescriptorParams};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::overlap::{nonzero_mask, OverlapConfig, OverlapParams};
use crate::tensor::{finite_diff_check, Activation, GradCheckReport, ParamStore, Tensor};
use crate::trainer::lazy_triplet_loss_var;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// Replaces zero-initialised parameters (biases) with random values so no
/// ReLU sits exactly on its kink.
fn jitter_zeros(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.value(id).data().iter().all(|&v| v == 0.0))
        .collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let small = random(rng, &shape).data().iter().map(|v| 0.1 * v).collect();
        store.set_value(id, Tensor::from_parts(shape, small))?;
    }
    Ok(())
}

/// `C x H x W` features with roughly a third of the cells empty, the way
/// sparse BEV features look.
fn sparse_features(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> Tensor {
    let mut f: Vec<f64> = random(rng, &[c, h, w])
        .data()
        .iter()
        .map(|v| scale * v)
        .collect();
    for cell in 0..h * w {
        if rng.random_bool(0.3) {
            for ch in 0..c {
                f[ch * h * w + cell] = 0.0;
            }
        }
    }
    f[0] = 0.5;
    Tensor::from_parts(vec![c, h, w], f)
}

/// Small chains over the primitive ops.
pub fn tensor_ops(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    let a = store.add("a", random(&mut rng, &[3, 4]));
    let b = store.add("b", random(&mut rng, &[4, 5]));
    let bias = store.add("bias", random(&mut rng, &[3]));
    let gate = store.add("gate", random(&mut rng, &[5]));
    let x = store.add("x", random(&mut rng, &[2, 5, 5]));
    let k = store.add("k", random(&mut rng, &[3, 2, 3, 3]));
    let kb = store.add("kb", random(&mut rng, &[3]));
    finite_diff_check(&mut store, &[], EPSILON, TOLERANCE, |t, s| {
        let (a, b, bias, gate) = (
            t.param(s, a),
            t.param(s, b),
            t.param(s, bias),
            t.param(s, gate),
        );
        let m = t.matmul(a, b)?;
        let m = t.add_col_bias(m, bias)?;
        let m = t.mul_row_broadcast(m, gate)?;
        let sr = t.softmax_rows(m)?;
        let sc = t.softmax_cols(m)?;
        let nr = t.normalize_rows(m)?;
        let th = t.activation(m, Activation::Relu);
        let sg = t.sigmoid(m);
        let mt = t.transpose(m)?;
        let mm = t.matmul(mt, sr)?;
        let parts = t.concat(&[sr, sc, nr, th, sg])?;
        let p = t.mul(parts, parts)?;
        let (x, k, kb) = (t.param(s, x), t.param(s, k), t.param(s, kb));
        let y = t.conv2d(x, k, Some(kb), 2, 1)?;
        let y = t.sigmoid(y);
        let rs = t.sum_rows(mm)?;
        let n = t.norm(rs);
        let total = [t.sum(p), t.sum(y), n];
        let total = t.concat(&total)?;
        Ok(t.sum(total))
    })
}

/// Tiny encoder with a squared-norm loss.
pub fn encoder(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    let enc = EncoderParams::new(
        &mut store,
        EncoderConfig {
            in_channels: 2,
            widths: [3, 3, 4, 4],
        },
    );
    jitter_zeros(&mut store, &mut rng)?;
    let mut bev = vec![0.0; 2 * 16 * 16];
    for v in bev.iter_mut() {
        if rng.random_bool(0.4) {
            *v = 1.0;
        }
    }
    let bev = Tensor::from_parts(vec![2, 16, 16], bev);
    let probe = random(&mut rng, &[4 * 2 * 2]);
    finite_diff_check(&mut store, &[], EPSILON, TOLERANCE, |t, s| {
        let x = t.constant(bev.clone());
        let f = enc.forward(t, s, x)?;
        let f = t.reshape(f, &[4 * 2 * 2])?;
        let p = t.constant(probe.clone());
        let y = t.mul(f, p)?;
        let y2 = t.mul(y, y)?;
        Ok(t.sum(y2))
    })
}

/// Descriptor head on `8 x 4 x 4` features followed by the lazy triplet
/// loss with a margin wide enough to keep the hinge active.
pub fn descriptor_triplet(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    let head = DescriptorParams::new(
        &mut store,
        DescriptorConfig {
            channels: 8,
            clusters: 4,
            dim: 16,
            attention: AttentionKind::SelfAttention,
        },
    );
    jitter_zeros(&mut store, &mut rng)?;
    let feats: Vec<Tensor> = (0..5)
        .map(|_| sparse_features(&mut rng, 8, 4, 4, 1.0))
        .collect();
    finite_diff_check(&mut store, &[], EPSILON, TOLERANCE, |t, s| {
        let mut v = Vec::new();
        for f in &feats {
            let x = t.constant(f.clone());
            v.push(head.forward(t, s, x)?);
        }
        lazy_triplet_loss_var(t, v[0], &v[1..3], &v[3..5], 2.5)
    })
}

/// Cross-attention fusion, classification head and masked BCE on
/// `4 x 4 x 4` features.
pub fn overlap_bce(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    let head = OverlapParams::new(
        &mut store,
        OverlapConfig {
            channels: 4,
            hidden: 2,
        },
    );
    jitter_zeros(&mut store, &mut rng)?;
    let fp = sparse_features(&mut rng, 4, 4, 4, 3.0);
    let fq = sparse_features(&mut rng, 4, 4, 4, 3.0);
    let target_p: Vec<f64> = (0..16).map(|_| rng.random_range(0..2) as f64).collect();
    let target_q: Vec<f64> = (0..16).map(|_| rng.random_range(0..2) as f64).collect();
    finite_diff_check(&mut store, &[], EPSILON, TOLERANCE, |t, s| {
        let a = t.constant(fp.clone());
        let b = t.constant(fq.clone());
        let vars = head.pair(t, s, a, b)?;
        let mp = nonzero_mask(t.value(vars.r_p));
        let mq = nonzero_mask(t.value(vars.r_q));
        let lp = t.bce(vars.gamma_p, &target_p, &mp)?;
        let lq = t.bce(vars.gamma_q, &target_q, &mq)?;
        let sum = t.add(lp, lq)?;
        Ok(t.scale(sum, 0.5))
    })
}

/// Every suite, in a fixed order.
pub fn all_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let suites: [(&'static str, fn(u64) -> Result<GradCheckReport>); 4] = [
        ("tensor_ops", tensor_ops),
        ("encoder", encoder),
        ("descriptor_triplet", descriptor_triplet),
        ("overlap_bce", overlap_bce),
    ];
    suites
        .iter()
        .map(|&(name, f)| f(seed).map(|report| SuiteResult { name, report }))
        .collect()
}
