//! Attention-guided global descriptor: channel self-attention over the
//! flattened feature volume, residual context fusion, NetVLAD aggregation
//! and a linear reduction to a unit-length vector.

use crate::encoder::FeatureVolume;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// `softmax(Q K^T / sqrt(C_f)) V` over channels.
    SelfAttention,
    /// Ablation: a sigmoid gate from two 3x3 convs scales every position.
    ConvGate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DescriptorConfig {
    pub channels: usize,
    pub clusters: usize,
    pub dim: usize,
    pub attention: AttentionKind,
}

impl DescriptorConfig {
    pub fn full() -> Self {
        Self {
            channels: 512,
            clusters: 32,
            dim: 1024,
            attention: AttentionKind::SelfAttention,
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: 32,
            clusters: 8,
            dim: 64,
            attention: AttentionKind::SelfAttention,
        }
    }
}

/// Query/key/value projections, each `C x C`, no bias.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let mut m =
            |n: &str| store.add_uniform(format!("{prefix}.{n}"), &[channels, channels], channels);
        Self {
            w_q: m("w_q"),
            w_k: m("w_k"),
            w_v: m("w_v"),
        }
    }

    /// `softmax((W_q q)(W_k kv)^T / sqrt(C)) (W_v kv)` for `C x L` inputs.
    /// The score matrix is `C x C` and the softmax runs along its rows.
    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        key_value: Var,
    ) -> Result<Var> {
        let c = tape.shape(query)[0];
        let w_q = tape.param(store, self.w_q);
        let w_k = tape.param(store, self.w_k);
        let w_v = tape.param(store, self.w_v);
        let q = tape.matmul(w_q, query)?;
        let k = tape.matmul(w_k, key_value)?;
        let v = tape.matmul(w_v, key_value)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
        let weights = tape.softmax_rows(scores)?;
        tape.matmul(weights, v)
    }
}

/// Per-position fully connected network, ReLU between layers.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl MlpParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let w = store.add_uniform(format!("{prefix}.{i}.w"), &[d[1], d[0]], d[0]);
                let b = store.add_zeros(format!("{prefix}.{i}.b"), &[d[1]]);
                (w, b)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let layers: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|&(w, b)| (tape.param(store, w), tape.param(store, b)))
            .collect();
        tape.mlp(x, &layers)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Sets every weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            let shape = store.value(id).shape().to_vec();
            store
                .set_value(id, Tensor::zeros(shape))
                .expect("same shape");
        }
    }
}

/// `x + MLP(cat(x, context))` with the concatenation along channels.
pub fn fuse(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &MlpParams,
    x: Var,
    context: Var,
) -> Result<Var> {
    if tape.shape(x) != tape.shape(context) {
        return Err(Error::dim(
            "fuse_context",
            tape.shape(x),
            tape.shape(context),
        ));
    }
    let cat = tape.concat(&[x, context])?;
    let delta = mlp.forward(tape, store, cat)?;
    tape.add(x, delta)
}

/// Two 3x3 convolutions with a ReLU between, `C -> hidden -> 1`.
#[derive(Clone, Debug)]
pub struct ConvHeadParams {
    pub conv_a: (ParamId, ParamId),
    pub conv_b: (ParamId, ParamId),
}

impl ConvHeadParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, hidden: usize) -> Self {
        Self {
            conv_a: (
                store.add_uniform(
                    format!("{prefix}.conv_a.w"),
                    &[hidden, channels, 3, 3],
                    channels * 9,
                ),
                store.add_zeros(format!("{prefix}.conv_a.b"), &[hidden]),
            ),
            conv_b: (
                store.add_uniform(format!("{prefix}.conv_b.w"), &[1, hidden, 3, 3], hidden * 9),
                store.add_zeros(format!("{prefix}.conv_b.b"), &[1]),
            ),
        }
    }

    /// `sigmoid(conv(relu(conv(x))))` on `C x H x W`, returning `H x W`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (h, w) = match tape.shape(x) {
            &[_, h, w] => (h, w),
            s => return Err(Error::dim("conv head", s, &[0, 0, 0])),
        };
        let wa = tape.param(store, self.conv_a.0);
        let ba = tape.param(store, self.conv_a.1);
        let wb = tape.param(store, self.conv_b.0);
        let bb = tape.param(store, self.conv_b.1);
        let y = tape.conv2d(x, wa, Some(ba), 1, 1)?;
        let y = tape.relu(y);
        let y = tape.conv2d(y, wb, Some(bb), 1, 1)?;
        let y = tape.sigmoid(y);
        tape.reshape(y, &[h, w])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.conv_a.0, self.conv_a.1, self.conv_b.0, self.conv_b.1]
    }
}

/// Cluster centers and the soft-assignment layer.
#[derive(Clone, Debug)]
pub struct NetVladParams {
    /// `K x C`.
    pub assign_w: ParamId,
    /// `K`.
    pub assign_b: ParamId,
    /// `K x C`.
    pub centers: ParamId,
}

impl NetVladParams {
    pub fn new(store: &mut ParamStore, prefix: &str, clusters: usize, channels: usize) -> Self {
        Self {
            assign_w: store.add_uniform(
                format!("{prefix}.assign_w"),
                &[clusters, channels],
                channels,
            ),
            assign_b: store.add_zeros(format!("{prefix}.assign_b"), &[clusters]),
            centers: store.add_uniform(
                format!("{prefix}.centers"),
                &[clusters, channels],
                channels,
            ),
        }
    }

    /// Soft assignment `K x L`: softmax over clusters of `w_k . x_i + b_k`.
    pub fn assignments(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.assign_w);
        let b = tape.param(store, self.assign_b);
        let logits = tape.linear(w, b, x)?;
        tape.softmax_cols(logits)
    }

    /// `V(k, j) = sum_i a_k(x_i) (x_i(j) - c_k(j))` as a `K x C` tensor,
    /// before any normalization.
    pub fn residuals(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.assignments(tape, store, x)?;
        let xt = tape.transpose(x)?;
        let weighted = tape.matmul(a, xt)?;
        let mass = tape.sum_rows(a)?;
        let c = tape.param(store, self.centers);
        let shift = tape.mul_col_broadcast(c, mass)?;
        tape.sub(weighted, shift)
    }

    /// Intra-normalized, flattened VLAD vector of length `K * C`.
    pub fn aggregate(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let v = self.residuals(tape, store, x)?;
        let v = tape.normalize_rows(v)?;
        let n = tape.value(v).len();
        tape.reshape(v, &[n])
    }
}

/// Unit-length global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor {
    pub scan_id: u64,
    pub v: Vec<f64>,
}

impl GlobalDescriptor {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug)]
enum Context {
    Attention(AttentionParams),
    Gate(ConvHeadParams),
}

#[derive(Clone, Debug)]
pub struct DescriptorParams {
    pub config: DescriptorConfig,
    context: Context,
    pub fusion: MlpParams,
    pub vlad: NetVladParams,
    /// `D_v x (K * C)`, no bias.
    pub w_fc: ParamId,
}

impl DescriptorParams {
    pub fn new(store: &mut ParamStore, config: DescriptorConfig) -> Self {
        let c = config.channels;
        let context = match config.attention {
            AttentionKind::SelfAttention => {
                Context::Attention(AttentionParams::new(store, "desc.att", c))
            }
            AttentionKind::ConvGate => {
                Context::Gate(ConvHeadParams::new(store, "desc.gate", c, (c / 2).max(1)))
            }
        };
        let fusion = MlpParams::new(store, "desc.fusion", &[2 * c, c, c, c]);
        let vlad = NetVladParams::new(store, "desc.vlad", config.clusters, c);
        let kc = config.clusters * c;
        let w_fc = store.add_uniform("desc.w_fc", &[config.dim, kc], kc);
        Self {
            config,
            context,
            fusion,
            vlad,
            w_fc,
        }
    }

    pub fn attention(&self) -> Option<&AttentionParams> {
        match &self.context {
            Context::Attention(a) => Some(a),
            Context::Gate(_) => None,
        }
    }

    /// Contextual information `A` for a `C x L` feature.
    pub fn context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f: Var,
        spatial: (usize, usize),
    ) -> Result<Var> {
        match &self.context {
            Context::Attention(att) => att.attend(tape, store, f, f),
            Context::Gate(gate) => {
                let c = tape.shape(f)[0];
                let vol = tape.reshape(f, &[c, spatial.0, spatial.1])?;
                let g = gate.forward(tape, store, vol)?;
                let g = tape.reshape(g, &[spatial.0 * spatial.1])?;
                tape.mul_row_broadcast(f, g)
            }
        }
    }

    /// `v = normalize(W_fc * vlad)`.
    pub fn reduce(&self, tape: &mut Tape, store: &ParamStore, vlad: Var) -> Result<Var> {
        let n = tape.value(vlad).len();
        if n != self.config.clusters * self.config.channels {
            return Err(Error::dim(
                "reduce",
                &[n],
                &[self.config.clusters * self.config.channels],
            ));
        }
        let w = tape.param(store, self.w_fc);
        let col = tape.reshape(vlad, &[n, 1])?;
        let z = tape.matmul(w, col)?;
        if tape.value(z).norm() == 0.0 {
            return Err(Error::DegenerateDescriptor);
        }
        let row = tape.reshape(z, &[1, self.config.dim])?;
        let unit = tape.normalize_rows(row)?;
        tape.reshape(unit, &[self.config.dim])
    }

    /// Full head on a `C x H x W` feature; returns the `D_v` descriptor.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, feature: Var) -> Result<Var> {
        let (c, h, w) = match tape.shape(feature) {
            &[c, h, w] => (c, h, w),
            s => {
                return Err(Error::dim(
                    "generate_descriptor",
                    s,
                    &[self.config.channels, 0, 0],
                ))
            }
        };
        if c != self.config.channels {
            return Err(Error::dim(
                "generate_descriptor",
                tape.shape(feature),
                &[self.config.channels, h, w],
            ));
        }
        let f = tape.reshape(feature, &[c, h * w])?;
        let a = self.context(tape, store, f, (h, w))?;
        let fused = fuse(tape, store, &self.fusion, f, a)?;
        let vlad = self.vlad.aggregate(tape, store, fused)?;
        self.reduce(tape, store, vlad)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = match &self.context {
            Context::Attention(a) => vec![a.w_q, a.w_k, a.w_v],
            Context::Gate(g) => g.param_ids(),
        };
        ids.extend(self.fusion.param_ids());
        ids.extend([
            self.vlad.assign_w,
            self.vlad.assign_b,
            self.vlad.centers,
            self.w_fc,
        ]);
        ids
    }
}

fn run<T>(f: impl FnOnce(&mut Tape) -> Result<T>) -> Result<T> {
    f(&mut Tape::inference())
}

/// Channel self-attention `A` for a `C x L` feature.
pub fn self_attention(f: &Tensor, att: &AttentionParams, store: &ParamStore) -> Result<Tensor> {
    run(|t| {
        let x = t.constant(f.clone());
        let a = att.attend(t, store, x, x)?;
        Ok(t.value(a).clone())
    })
}

/// `f' = f + MLP(cat(f, A))`.
pub fn fuse_context(f: &Tensor, a: &Tensor, mlp: &MlpParams, store: &ParamStore) -> Result<Tensor> {
    run(|t| {
        let x = t.constant(f.clone());
        let c = t.constant(a.clone());
        let y = fuse(t, store, mlp, x, c)?;
        Ok(t.value(y).clone())
    })
}

/// Unnormalized `K x C` VLAD residual sums.
pub fn netvlad_residuals(f: &Tensor, p: &NetVladParams, store: &ParamStore) -> Result<Tensor> {
    run(|t| {
        let x = t.constant(f.clone());
        let v = p.residuals(t, store, x)?;
        Ok(t.value(v).clone())
    })
}

/// Intra-normalized, flattened VLAD vector.
pub fn netvlad(f: &Tensor, p: &NetVladParams, store: &ParamStore) -> Result<Tensor> {
    run(|t| {
        let x = t.constant(f.clone());
        let v = p.aggregate(t, store, x)?;
        Ok(t.value(v).clone())
    })
}

pub fn reduce(
    vlad: &Tensor,
    params: &DescriptorParams,
    store: &ParamStore,
    scan_id: u64,
) -> Result<GlobalDescriptor> {
    run(|t| {
        let x = t.constant(vlad.clone());
        let v = params.reduce(t, store, x)?;
        Ok(GlobalDescriptor {
            scan_id,
            v: t.value(v).to_vec(),
        })
    })
}

pub fn generate_descriptor(
    fv: &FeatureVolume,
    params: &DescriptorParams,
    store: &ParamStore,
) -> Result<GlobalDescriptor> {
    run(|t| {
        let x = t.constant(fv.f.clone());
        let v = params.forward(t, store, x)?;
        Ok(GlobalDescriptor {
            scan_id: fv.scan_id,
            v: t.value(v).to_vec(),
        })
    })
}
