//! Forward and backward pass of the matching network over one graph pair.
//!
//! Per round, node `i` of graph `g` with other graph `o` computes
//!
//! ```text
//! m_i  = sum over symmetrized edges (j -> i) of msg([h_i, h_j])
//! a_ij = softmax_j(h_i . h_j),  j in o
//! mu_i = sum_j a_ij (h_i - h_j) = h_i - sum_j a_ij h_j
//! h_i' = upd([h_i, m_i, mu_i])
//! ```
//!
//! and the graph embedding is `readout(sum_i sigmoid(gate(h_i)) * transform(h_i))`.

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array1, Array2, Axis};

use super::nn::{sigmoid, softmax_rows, MlpCache};
use super::{Embedding, GmnParams};
use crate::cg_model::{normalize, CallGraph, FeatureStats, NUM_FEATURES};
use crate::error::{Error, Result};

/// A graph prepared for the network: normalized features and the
/// symmetrized directed edge list over dense node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub features: Array2<f64>,
    /// `(src, dst)` pairs; messages flow from `src` into `dst`.
    pub edges: Vec<(usize, usize)>,
}

impl GraphInput {
    pub fn new(g: &CallGraph, stats: &FeatureStats) -> Result<Self> {
        if g.is_empty() {
            return Err(Error::invalid("cannot embed an empty graph"));
        }
        let ids: Vec<_> = g.node_ids().collect();
        let mut features = Array2::zeros((ids.len(), NUM_FEATURES));
        for (row, n) in g.nodes().enumerate() {
            let z = normalize(&n.features, stats);
            for (c, v) in z.into_iter().enumerate() {
                features[[row, c]] = v;
            }
        }
        let pos = |id| ids.binary_search(&id).expect("edge endpoints exist");
        let mut sym = BTreeSet::new();
        for (a, b) in g.edges() {
            let (i, j) = (pos(a), pos(b));
            sym.insert((i, j));
            sym.insert((j, i));
        }
        Ok(GraphInput {
            features,
            edges: sym.into_iter().collect(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.features.nrows()
    }
}

struct SideRound {
    h_in: Array2<f64>,
    msg_cache: MlpCache,
    attention: Array2<f64>,
    upd_cache: MlpCache,
}

struct SideReadout {
    h: Array2<f64>,
    gate: Array2<f64>,
    transform: Array2<f64>,
    pooled: Array1<f64>,
    embedding: Array1<f64>,
}

pub(crate) struct PairCache {
    enc: [MlpCache; 2],
    rounds: Vec<[SideRound; 2]>,
    readout: [SideReadout; 2],
}

impl PairCache {
    pub(crate) fn embeddings(&self) -> (Embedding, Embedding) {
        (
            Embedding(self.readout[0].embedding.to_vec()),
            Embedding(self.readout[1].embedding.to_vec()),
        )
    }
}

fn check(x: &Array2<f64>, layer: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer() })
    }
}

fn propagate(
    p: &GmnParams,
    h: &Array2<f64>,
    other: &Array2<f64>,
    edges: &[(usize, usize)],
) -> (Array2<f64>, SideRound) {
    let hd = h.ncols();
    let mut msg_in = Array2::zeros((edges.len(), 2 * hd));
    for (row, &(src, dst)) in edges.iter().enumerate() {
        msg_in.slice_mut(s![row, ..hd]).assign(&h.row(dst));
        msg_in.slice_mut(s![row, hd..]).assign(&h.row(src));
    }
    let (msg_out, msg_cache) = p.message.forward(msg_in);
    let mut agg = Array2::zeros((h.nrows(), msg_out.ncols()));
    for (row, &(_, dst)) in edges.iter().enumerate() {
        let mut target = agg.row_mut(dst);
        target += &msg_out.row(row);
    }

    let attention = softmax_rows(&h.dot(&other.t()));
    let mu = h - &attention.dot(other);

    let upd_in =
        concatenate(Axis(1), &[h.view(), agg.view(), mu.view()]).expect("row counts agree");
    let (h_out, upd_cache) = p.update.forward(upd_in);
    (
        h_out,
        SideRound {
            h_in: h.clone(),
            msg_cache,
            attention,
            upd_cache,
        },
    )
}

fn readout(p: &GmnParams, h: Array2<f64>) -> SideReadout {
    let gate = p.gate.forward(&h).mapv(sigmoid);
    let transform = p.transform.forward(&h);
    let pooled = (&gate * &transform).sum_axis(Axis(0));
    let embedding = pooled.dot(&p.readout.w) + &p.readout.b;
    SideReadout {
        h,
        gate,
        transform,
        pooled,
        embedding,
    }
}

pub(crate) fn forward(p: &GmnParams, a: &GraphInput, b: &GraphInput) -> Result<PairCache> {
    let (mut ha, enc_a) = p.encoder.forward(a.features.clone());
    let (mut hb, enc_b) = p.encoder.forward(b.features.clone());
    check(&ha, || "encoder".into())?;
    check(&hb, || "encoder".into())?;

    let mut rounds = Vec::with_capacity(p.config.propagation_rounds);
    for t in 0..p.config.propagation_rounds {
        let (na, ra) = propagate(p, &ha, &hb, &a.edges);
        let (nb, rb) = propagate(p, &hb, &ha, &b.edges);
        check(&na, || format!("propagation round {}", t + 1))?;
        check(&nb, || format!("propagation round {}", t + 1))?;
        rounds.push([ra, rb]);
        ha = na;
        hb = nb;
    }

    let ra = readout(p, ha);
    let rb = readout(p, hb);
    for r in [&ra, &rb] {
        if !r.embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                layer: "readout".into(),
            });
        }
    }
    Ok(PairCache {
        enc: [enc_a, enc_b],
        rounds,
        readout: [ra, rb],
    })
}

fn readout_backward(
    p: &GmnParams,
    r: &SideReadout,
    de: &Array1<f64>,
    grad: &mut GmnParams,
) -> Array2<f64> {
    let de2 = de.view().insert_axis(Axis(0));
    let pooled2 = r.pooled.view().insert_axis(Axis(0));
    grad.readout.w += &pooled2.t().dot(&de2);
    grad.readout.b += de;
    let dpooled = p.readout.w.dot(de);

    let dgate_out = &r.transform * &dpooled;
    let dtransform = &r.gate * &dpooled;
    let dgate_pre = dgate_out * &r.gate.mapv(|g| g * (1.0 - g));

    let mut dh = p.gate.backward(&r.h, &dgate_pre, &mut grad.gate);
    dh += &p.transform.backward(&r.h, &dtransform, &mut grad.transform);
    dh
}

/// Backward through one side's round; returns the gradient contribution to
/// the other side's input states.
fn round_backward(
    p: &GmnParams,
    side: &SideRound,
    other_h: &Array2<f64>,
    edges: &[(usize, usize)],
    dh_out: Array2<f64>,
    dh_in: &mut Array2<f64>,
    grad: &mut GmnParams,
) -> Array2<f64> {
    let hd = side.h_in.ncols();
    let md = p.config.message_dim;
    let dupd = p.update.backward(&side.upd_cache, dh_out, &mut grad.update);
    *dh_in += &dupd.slice(s![.., ..hd]);
    let dagg = dupd.slice(s![.., hd..hd + md]);
    let dmu = dupd.slice(s![.., hd + md..]).to_owned();

    let mut dmsg = Array2::zeros((edges.len(), md));
    for (row, &(_, dst)) in edges.iter().enumerate() {
        dmsg.row_mut(row).assign(&dagg.row(dst));
    }
    let dmsg_in = p.message.backward(&side.msg_cache, dmsg, &mut grad.message);
    for (row, &(src, dst)) in edges.iter().enumerate() {
        let mut d = dh_in.row_mut(dst);
        d += &dmsg_in.slice(s![row, ..hd]);
        let mut d = dh_in.row_mut(src);
        d += &dmsg_in.slice(s![row, hd..]);
    }

    // mu = h - A o,  A = softmax(h o^T)
    let att = &side.attention;
    *dh_in += &dmu;
    let datt = -dmu.dot(&other_h.t());
    let mut dother = -att.t().dot(&dmu);
    let row_dot = (&datt * att).sum_axis(Axis(1)).insert_axis(Axis(1));
    let dscore = att * &(&datt - &row_dot);
    *dh_in += &dscore.dot(other_h);
    dother += &dscore.t().dot(&side.h_in);
    dother
}

pub(crate) fn backward(
    p: &GmnParams,
    cache: &PairCache,
    a: &GraphInput,
    b: &GraphInput,
    de: [&Array1<f64>; 2],
    grad: &mut GmnParams,
) {
    let mut dh = [
        readout_backward(p, &cache.readout[0], de[0], grad),
        readout_backward(p, &cache.readout[1], de[1], grad),
    ];
    let edges = [&a.edges, &b.edges];
    for round in cache.rounds.iter().rev() {
        let mut dh_in = [
            Array2::zeros(round[0].h_in.raw_dim()),
            Array2::zeros(round[1].h_in.raw_dim()),
        ];
        let [dha, dhb] = dh;
        let (da_in, db_in) = dh_in.split_at_mut(1);
        let to_b = round_backward(
            p,
            &round[0],
            &round[1].h_in,
            edges[0],
            dha,
            &mut da_in[0],
            grad,
        );
        let to_a = round_backward(
            p,
            &round[1],
            &round[0].h_in,
            edges[1],
            dhb,
            &mut db_in[0],
            grad,
        );
        dh_in[0] += &to_a;
        dh_in[1] += &to_b;
        dh = dh_in;
    }
    let [dha, dhb] = dh;
    p.encoder.backward(&cache.enc[0], dha, &mut grad.encoder);
    p.encoder.backward(&cache.enc[1], dhb, &mut grad.encoder);
}

/// Loss, similarity and parameter gradient for one labeled pair.
#[derive(Debug, Clone)]
pub struct PairGradient {
    pub loss: f64,
    pub similarity: f64,
    pub grad: GmnParams,
}

pub(crate) fn pair_gradient(
    p: &GmnParams,
    a: &GraphInput,
    b: &GraphInput,
    label: f64,
) -> Result<PairGradient> {
    let cache = forward(p, a, b)?;
    let ea = &cache.readout[0].embedding;
    let eb = &cache.readout[1].embedding;
    let (na, nb) = (ea.dot(ea).sqrt(), eb.dot(eb).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric {
            layer: "cosine (zero embedding)".into(),
        });
    }
    let raw = ea.dot(eb) / (na * nb);
    let similarity = raw.clamp(-1.0, 1.0);
    let (loss, dsim) = p
        .config
        .loss_form
        .loss_and_grad(similarity, label, p.config.margin);
    let mut grad = p.zeros_like();
    if dsim != 0.0 {
        // d cos / d ea = eb / (|a||b|) - cos * ea / |a|^2
        let dea = (eb / (na * nb) - ea * (raw / (na * na))) * dsim;
        let deb = (ea / (na * nb) - eb * (raw / (nb * nb))) * dsim;
        backward(p, &cache, a, b, [&dea, &deb], &mut grad);
    }
    Ok(PairGradient {
        loss,
        similarity,
        grad,
    })
}

pub(crate) fn pair_loss_only(
    p: &GmnParams,
    a: &GraphInput,
    b: &GraphInput,
    label: f64,
) -> Result<f64> {
    let (ea, eb) = forward(p, a, b)?.embeddings();
    let s = super::cosine_similarity(&ea, &eb)?;
    Ok(p.config
        .loss_form
        .loss_and_grad(s, label, p.config.margin)
        .0)
}
