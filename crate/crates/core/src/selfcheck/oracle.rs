//! Closed-form and reference-implementation checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::datagen::{build_correspondences, Homography};
use crate::error::Result;
use crate::losses::{ap_kappa_loss, cosim_loss, exact_ap, exact_ap_from_distances, peakiness_loss, soft_ap_descriptors, warp_heatmap};
use crate::tensor::Tensor;

use super::{CheckKind, CheckOutcome};

/// Tolerance for the closed-form loss values.
pub const LIMIT_TOLERANCE: f64 = 1e-6;
pub const AP_MEAN_TOLERANCE: f64 = 0.05;
pub const AP_MAX_TOLERANCE: f64 = 0.15;

/// A ranking instance: `n` database points at distances `2r/(n−1)`,
/// `r = 0..n`, with `positives` labels placed uniformly at random.
pub fn rank_instance(rng: &mut impl Rng, n: usize, positives: usize) -> (Vec<f64>, Vec<bool>) {
    let mut labels: Vec<bool> = (0..n).map(|i| i < positives).collect();
    labels.shuffle(rng);
    let distances = (0..n).map(|r| 2.0 * r as f64 / (n - 1) as f64).collect();
    (distances, labels)
}

/// Unit-norm query and database realizing `distances` exactly: the query is
/// the first axis, entry `k` is rotated from it towards axis `k + 1` by the
/// angle whose chord is `distances[k]`.
pub fn descriptors_at_distances(distances: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = distances.len() + 1;
    let mut query = vec![0.0; dim];
    query[0] = 1.0;
    let database = distances
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let theta = 2.0 * (d / 2.0).clamp(0.0, 1.0).asin();
            let mut v = vec![0.0; dim];
            v[0] = theta.cos();
            v[k + 1] = theta.sin();
            v
        })
        .collect();
    (query, database)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApOracleStats {
    pub instances: usize,
    pub mean_error: f64,
    pub max_error: f64,
}

/// `|soft_ap − exact_ap|` over seeded ranking instances with 20 database
/// points and 2–5 positives, through unit-norm descriptors.
pub fn ap_oracle_stats(instances: usize, bins: usize, seed: u64) -> Result<ApOracleStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut worst) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let positives = rng.random_range(2..=5);
        let (distances, labels) = rank_instance(&mut rng, 20, positives);
        let (query, database) = descriptors_at_distances(&distances);
        let soft = soft_ap_descriptors(&query, &database, &labels, bins)?;
        let exact = exact_ap_from_distances(&distances, &labels)?;
        let err = (soft - exact).abs();
        sum += err;
        worst = worst.max(err);
    }
    Ok(ApOracleStats {
        instances,
        mean_error: sum / instances.max(1) as f64,
        max_error: worst,
    })
}

fn outcome(name: &str, value: f64, tolerance: f64, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        kind: CheckKind::Oracle,
        trials: 1,
        rejected: 0,
        value,
        tolerance,
        passed: value <= tolerance,
        detail,
    }
}

fn failed(name: &str, e: crate::error::Error) -> CheckOutcome {
    CheckOutcome {
        passed: false,
        ..outcome(name, f64::INFINITY, 0.0, format!("error: {e}"))
    }
}

fn exact_ap_examples() -> Result<f64> {
    let cases: [(&[bool], f64); 3] = [
        (&[true, false, false], 1.0),
        (&[false, true], 0.5),
        (&[true, false, true], (1.0 + 2.0 / 3.0) / 2.0),
    ];
    let mut worst: f64 = 0.0;
    for (ranked, expected) in cases {
        worst = worst.max((exact_ap(ranked)? - expected).abs());
    }
    Ok(worst)
}

/// Largest deviation of the four closed-form loss values.
pub fn loss_limit_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut tape = Tape::<f64>::new();
    let n = 16;
    let ramp: Vec<f64> = (0..n * n).map(|i| 0.05 + ((i * 7) % 23) as f64 / 23.0).collect();
    let s = tape.leaf(Tensor::from_f64([n, n], &ramp)?, true);
    let field = build_correspondences(&Homography::identity(), (n, n), (n, n));
    let (warped, mask) = warp_heatmap(&mut tape, s, &field)?;
    let cosim = cosim_loss(&mut tape, s, warped, &mask, n, 1)?;

    let constant = tape.leaf(Tensor::full([n, n], 0.37), true);
    let peaky_constant = peakiness_loss(&mut tape, constant, n, 1)?;

    let mut spike = vec![0.0; n * n];
    spike[5 * n + 9] = 1.0;
    let spike = tape.leaf(Tensor::from_f64([n, n], &spike)?, true);
    let peaky_spike = peakiness_loss(&mut tape, spike, n, 1)?;

    let mut gate: f64 = 0.0;
    for ap in [0.0, 0.3, 0.5, 0.9, 1.0] {
        gate = gate.max((ap_kappa_loss(ap, 0.0, 0.5)? - 0.5).abs());
    }
    Ok(vec![
        ("cosim_identical", tape.value(cosim).item().abs()),
        ("peakiness_constant", (tape.value(peaky_constant).item() - 1.0).abs()),
        ("peakiness_single_spike", (tape.value(peaky_spike).item() - 1.0 / 256.0).abs()),
        ("ap_kappa_zero_reliability", gate),
    ])
}

pub fn oracle_checks(ap_instances: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    match exact_ap_examples() {
        Ok(e) => out.push(outcome("exact_ap_examples", e, 0.0, "[1,0,0], [0,1], [1,0,1]".into())),
        Err(e) => out.push(failed("exact_ap_examples", e)),
    }
    match ap_oracle_stats(ap_instances, 25, seed) {
        Ok(s) => {
            out.push(outcome(
                "soft_ap_mean_error",
                s.mean_error,
                AP_MEAN_TOLERANCE,
                format!("{} ranking instances", s.instances),
            ));
            out.push(outcome(
                "soft_ap_max_error",
                s.max_error,
                AP_MAX_TOLERANCE,
                format!("{} ranking instances", s.instances),
            ));
        }
        Err(e) => out.push(failed("soft_ap_oracle", e)),
    }
    match loss_limit_errors() {
        Ok(list) => {
            for (name, e) in list {
                out.push(outcome(name, e, LIMIT_TOLERANCE, String::new()));
            }
        }
        Err(e) => out.push(failed("loss_limits", e)),
    }
    out
}
