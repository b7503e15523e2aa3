use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{pair_gradient, pair_loss_only, GraphInput};
use super::{GmnConfig, GmnParams};
use crate::cg_model::FeatureStats;
use crate::error::{Error, Result};
use crate::stub_extract::StubGraph;

/// A labeled pair, as indices into the dataset it was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    /// `+1` for same packer, `-1` otherwise.
    pub label: i8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean pair loss of every epoch, in order.
    pub epoch_losses: Vec<f64>,
    /// Fine-tuning only: mean loss over fixed similar pairs of the new
    /// packer, measured before the first epoch and after every epoch.
    pub probe_losses: Vec<f64>,
}

fn group_by_label(labels: &[&str]) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry((*l).to_string()).or_default().push(i);
    }
    groups
}

fn labels_of(dataset: &[StubGraph]) -> Result<Vec<&str>> {
    dataset
        .iter()
        .map(|g| {
            g.packer_label().ok_or_else(|| {
                Error::invalid(format!("graph `{}` has no packer label", g.sample_id()))
            })
        })
        .collect()
}

fn positive_count(count: usize, balance: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&balance) {
        return Err(Error::invalid("pair balance must lie in [0, 1]"));
    }
    Ok((count as f64 * balance).round() as usize)
}

fn draw_distinct<R: Rng>(members: &[usize], rng: &mut R) -> (usize, usize) {
    let i = rng.random_range(0..members.len());
    let mut j = rng.random_range(0..members.len() - 1);
    if j >= i {
        j += 1;
    }
    (members[i], members[j])
}

/// Draws `count` labeled pairs; `balance` is the fraction of similar pairs.
///
/// Similar pairs pick a packer uniformly among those with at least two
/// graphs, dissimilar pairs pick two distinct packers uniformly.
pub fn sample_pairs(
    dataset: &[StubGraph],
    count: usize,
    balance: f64,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let labels = labels_of(dataset)?;
    let groups = group_by_label(&labels);
    let n_pos = positive_count(count, balance)?;
    let n_neg = count - n_pos;
    let rich: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    let all: Vec<&Vec<usize>> = groups.values().collect();
    if n_pos > 0 && rich.is_empty() {
        return Err(Error::invalid(
            "similar pairs need a packer with at least two graphs",
        ));
    }
    if n_neg > 0 && all.len() < 2 {
        return Err(Error::invalid("dissimilar pairs need at least two packers"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..n_pos {
        let group = rich[rng.random_range(0..rich.len())];
        let (a, b) = draw_distinct(group, &mut rng);
        pairs.push(PairSample { a, b, label: 1 });
    }
    for _ in 0..n_neg {
        let idx: Vec<usize> = (0..all.len()).collect();
        let (ga, gb) = draw_distinct(&idx, &mut rng);
        let a = all[ga][rng.random_range(0..all[ga].len())];
        let b = all[gb][rng.random_range(0..all[gb].len())];
        pairs.push(PairSample { a, b, label: -1 });
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Like [`sample_pairs`], but every pair contains at least one graph of
/// `anchor`: similar pairs are two `anchor` graphs, dissimilar pairs match an
/// `anchor` graph against a graph of another packer.
pub fn sample_anchored_pairs(
    dataset: &[StubGraph],
    anchor: &str,
    count: usize,
    balance: f64,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let labels = labels_of(dataset)?;
    let anchors: Vec<usize> = (0..dataset.len())
        .filter(|&i| labels[i] == anchor)
        .collect();
    let others: Vec<usize> = (0..dataset.len())
        .filter(|&i| labels[i] != anchor)
        .collect();
    let n_pos = positive_count(count, balance)?;
    let n_neg = count - n_pos;
    if anchors.is_empty() || (n_pos > 0 && anchors.len() < 2) {
        return Err(Error::invalid(format!(
            "packer `{anchor}` needs at least two graphs for similar pairs"
        )));
    }
    if n_neg > 0 && others.is_empty() {
        return Err(Error::invalid("dissimilar pairs need at least two packers"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..n_pos {
        let (a, b) = draw_distinct(&anchors, &mut rng);
        pairs.push(PairSample { a, b, label: 1 });
    }
    for _ in 0..n_neg {
        let a = anchors[rng.random_range(0..anchors.len())];
        let b = others[rng.random_range(0..others.len())];
        pairs.push(PairSample { a, b, label: -1 });
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

struct Adam {
    m: GmnParams,
    v: GmnParams,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &GmnParams) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut GmnParams, grad: &GmnParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

fn prepare(dataset: &[StubGraph], stats: &FeatureStats) -> Result<Vec<GraphInput>> {
    dataset
        .iter()
        .map(|g| GraphInput::new(&g.graph, stats))
        .collect()
}

/// Runs `epochs` epochs of mini-batch Adam. Per-pair gradients are computed
/// in parallel and summed in pair order, so results do not depend on the
/// thread count.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    params: &mut GmnParams,
    inputs: &[GraphInput],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    mut draw: impl FnMut(u64) -> Result<Vec<PairSample>>,
    mut after_epoch: impl FnMut(&GmnParams) -> Result<()>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(params);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let pairs = draw(rng.random())?;
        let mut total = 0.0;
        for (batch_idx, batch) in pairs.chunks(batch_size).enumerate() {
            let results: Vec<_> = batch
                .par_iter()
                .map(|p| pair_gradient(params, &inputs[p.a], &inputs[p.b], f64::from(p.label)))
                .collect::<Result<_>>()?;
            let mut grad = params.zeros_like();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
                grad.add_scaled(&r.grad, 1.0 / batch.len() as f64);
            }
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            total += batch_loss;
            adam.update(params, &grad, lr);
            if !params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                    loss: f64::NAN,
                });
            }
        }
        let mean = total / pairs.len().max(1) as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.5}");
        losses.push(mean);
        after_epoch(params)?;
    }
    Ok(losses)
}

fn packer_count(dataset: &[StubGraph]) -> Result<usize> {
    Ok(group_by_label(&labels_of(dataset)?).len())
}

/// Trains a fresh network on pairs drawn from `dataset`.
pub fn train(
    dataset: &[StubGraph],
    config: &GmnConfig,
    stats: &FeatureStats,
) -> Result<(GmnParams, TrainLog)> {
    config.validate()?;
    if packer_count(dataset)? < 2 {
        return Err(Error::invalid(
            "training needs graphs of at least two packers",
        ));
    }
    let inputs = prepare(dataset, stats)?;
    let mut params = GmnParams::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_7a11);
    let epoch_losses = run_epochs(
        &mut params,
        &inputs,
        config.epochs,
        config.learning_rate,
        config.batch_pairs,
        |seed| {
            sample_pairs(
                dataset,
                config.pairs_per_epoch,
                config.positive_fraction,
                seed,
            )
        },
        |_| Ok(()),
        &mut rng,
    )?;
    Ok((
        params,
        TrainLog {
            epoch_losses,
            probe_losses: Vec::new(),
        },
    ))
}

/// Continues training from `params` on pairs drawn from
/// `new_graphs ∪ old_sample`. Half of each epoch's pairs are anchored on the
/// new packer, the rest are drawn over all packers. Epoch count, learning
/// rate, batch size and seed come from `config`; architecture, margin and
/// loss form stay those of `params`.
pub fn fine_tune(
    params: &GmnParams,
    new_graphs: &[StubGraph],
    old_sample: &[StubGraph],
    config: &GmnConfig,
    stats: &FeatureStats,
) -> Result<(GmnParams, TrainLog)> {
    config.validate()?;
    if old_sample.is_empty() {
        return Err(Error::invalid(
            "fine-tuning needs a sample of existing graphs",
        ));
    }
    let new_labels = labels_of(new_graphs)?;
    let anchor = match new_labels.first() {
        None => return Err(Error::invalid("fine-tuning needs new graphs")),
        Some(l) if new_labels.iter().any(|x| x != l) => {
            return Err(Error::invalid("new graphs must share one packer label"))
        }
        Some(l) => l.to_string(),
    };

    let mut dataset: Vec<StubGraph> = new_graphs.to_vec();
    dataset.extend(old_sample.iter().cloned());
    let inputs = prepare(&dataset, stats)?;

    let mut tuned = params.clone();

    // similar pairs of the new packer, all of them up to a cap
    let n_new = new_graphs.len();
    let probe: Vec<(usize, usize)> = (0..n_new)
        .flat_map(|i| (i + 1..n_new).map(move |j| (i, j)))
        .take(64)
        .collect();
    let probe_loss = |p: &GmnParams| -> Result<f64> {
        if probe.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = probe
            .par_iter()
            .map(|&(a, b)| pair_loss_only(p, &inputs[a], &inputs[b], 1.0))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        Ok(total / probe.len() as f64)
    };
    let mut probe_losses = vec![probe_loss(&tuned)?];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xf1e7_7000);
    let half = config.pairs_per_epoch / 2;
    let epoch_losses = run_epochs(
        &mut tuned,
        &inputs,
        config.fine_tune_epochs,
        config.learning_rate,
        config.batch_pairs,
        |seed| {
            let mut pairs = sample_anchored_pairs(
                &dataset,
                &anchor,
                config.pairs_per_epoch - half,
                config.positive_fraction,
                seed,
            )?;
            if half > 0 && packer_count(old_sample)? >= 2 {
                pairs.extend(sample_pairs(
                    &dataset,
                    half,
                    config.positive_fraction,
                    seed.wrapping_add(1),
                )?);
                pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)));
            }
            Ok(pairs)
        },
        |p| {
            probe_losses.push(probe_loss(p)?);
            Ok(())
        },
        &mut rng,
    )?;
    Ok((
        tuned,
        TrainLog {
            epoch_losses,
            probe_losses,
        },
    ))
}
