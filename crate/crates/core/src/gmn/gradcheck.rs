use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{pair_gradient, pair_loss_only, GraphInput};
use super::GmnParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Fraction of parameters probed.
    pub fraction: f64,
    /// Denominator floor of the relative error, so that gradients at the
    /// level of floating-point noise are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            fraction: 0.01,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_relative_error: f64,
    /// `(flat index, analytic, finite difference)` for every probed parameter.
    pub probes: Vec<(usize, f64, f64)>,
    /// True when the full analytic gradient is identically zero.
    pub analytic_is_zero: bool,
}

fn get_flat(p: &GmnParams, mut idx: usize) -> f64 {
    for t in p.tensors() {
        if idx < t.len() {
            return t[idx];
        }
        idx -= t.len();
    }
    unreachable!("index within parameter count")
}

fn set_flat(p: &mut GmnParams, mut idx: usize, value: f64) {
    for t in p.tensors_mut() {
        if idx < t.len() {
            t[idx] = value;
            return;
        }
        idx -= t.len();
    }
    unreachable!("index within parameter count")
}

/// Compares the analytic gradient of the pair loss with central finite
/// differences on a random subset of parameters. The loss uses the margin
/// and loss form of `params.config`.
pub fn gradient_check(
    params: &GmnParams,
    a: &GraphInput,
    b: &GraphInput,
    label: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&opts.epsilon) {
        return Err(Error::invalid("epsilon must lie in [1e-6, 1e-3]"));
    }
    let analytic = pair_gradient(params, a, b, label)?;
    let n = params.num_parameters();
    let k = ((n as f64 * opts.fraction).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut indices = sample(&mut rng, n, k).into_vec();
    indices.sort_unstable();

    let probes: Vec<(usize, f64, f64)> = indices
        .par_iter()
        .map(|&i| {
            let mut p = params.clone();
            let x = get_flat(params, i);
            set_flat(&mut p, i, x + opts.epsilon);
            let up = pair_loss_only(&p, a, b, label)?;
            set_flat(&mut p, i, x - opts.epsilon);
            let down = pair_loss_only(&p, a, b, label)?;
            let fd = (up - down) / (2.0 * opts.epsilon);
            Ok((i, get_flat(&analytic.grad, i), fd))
        })
        .collect::<Result<_>>()?;

    let max_relative_error = probes
        .iter()
        .map(|&(_, an, fd)| (an - fd).abs() / an.abs().max(fd.abs()).max(opts.floor))
        .fold(0.0, f64::max);
    let analytic_is_zero = analytic
        .grad
        .tensors()
        .iter()
        .all(|t| t.iter().all(|&v| v == 0.0));
    Ok(GradCheckReport {
        loss: analytic.loss,
        max_relative_error,
        probes,
        analytic_is_zero,
    })
}
