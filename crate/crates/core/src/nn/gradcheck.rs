//! Central finite-difference verification of back-propagation, run in
//! double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::layers::Mode;
use super::loss::loss_softmax_xent;
use super::network::Network;
use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Entries probed per parameter block; smaller blocks are checked in full.
    pub samples_per_block: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            samples_per_block: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub checked: usize,
    /// Probes discarded because the perturbation flipped a ReLU mask or a
    /// max-pool winner.
    pub skipped_kinks: usize,
    /// Largest analytic or numeric magnitude seen on biases that feed
    /// batch normalization, whose true derivative is zero.
    pub shadowed_max_abs: f64,
}

fn loss_at(net: &mut Network<f64>, batch: &Tensor<f64>, labels: &[usize]) -> Result<(f64, u64)> {
    let logits = net.forward(batch, Mode::Train)?;
    let (loss, _) = loss_softmax_xent(&logits, labels)?;
    Ok((loss, net.branch_signature()))
}

/// Checks `net` (any precision) on `batch` in double precision.
pub fn grad_check<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut net64 = net.cast::<f64>();
    grad_check_with(&mut net64, &batch.cast(), labels, opts, |_| {})
}

/// As [`grad_check`], with `tamper` applied to the analytic gradients
/// before comparison.
pub fn grad_check_with(
    net: &mut Network<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    opts: &GradCheckOptions,
    tamper: impl FnOnce(&mut Network<f64>),
) -> Result<GradCheckReport> {
    let logits = net.forward(batch, Mode::Train)?;
    let (_, dlogits) = loss_softmax_xent(&logits, labels)?;
    let base_sig = net.branch_signature();
    net.backward(&dlogits)?;
    tamper(net);
    let analytic: Vec<(Vec<f64>, bool, String)> = net
        .params()
        .iter()
        .map(|p| (p.grad.data().to_vec(), p.shadowed, p.name.clone()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for (pi, (grads, shadowed, name)) in analytic.iter().enumerate() {
        let len = grads.len();
        let indices: Vec<usize> = if len <= opts.samples_per_block {
            (0..len).collect()
        } else {
            (0..opts.samples_per_block).map(|_| rng.random_range(0..len)).collect()
        };
        for idx in indices {
            let orig = net.params()[pi].value.data()[idx];
            net.params_mut()[pi].value.data_mut()[idx] = orig + opts.eps;
            let (lp, sp) = loss_at(net, batch, labels)?;
            net.params_mut()[pi].value.data_mut()[idx] = orig - opts.eps;
            let (lm, sm) = loss_at(net, batch, labels)?;
            net.params_mut()[pi].value.data_mut()[idx] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.eps);
            let a = grads[idx];
            if *shadowed {
                report.shadowed_max_abs = report.shadowed_max_abs.max(a.abs()).max(numeric.abs());
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(format!("{name}[{idx}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
    Ok(report)
}
