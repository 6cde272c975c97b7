//! Finite-difference gradient checks in f64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datagen::{build_correspondences, derive_seed, Homography};
use crate::error::Result;
use crate::losses::{
    cosim_loss, pairwise_distances, peakiness_loss, repeatability_loss, soft_ap_tape, total_loss, warp_heatmap,
    AblationMode, ApLabel, LossConfig,
};
use crate::model::{Network, NetworkConfig, OutputVars};
use crate::tensor::Tensor;

use super::{CheckKind, CheckOutcome};

/// Tolerance on the relative error for single operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Tolerance on the relative error for losses and the network.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

/// Difference quotients that disagree by more than this, relative to the
/// larger of the derivative and the gradient's root-mean-square, mean a kink
/// lies within the stencil and the coordinate is skipped.
const KINK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Accepted instances per check.
    pub trials: usize,
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per input tensor (all if fewer).
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            step: 1e-3,
            coordinates: 24,
            seed: 7,
        }
    }
}

type Inputs = Vec<Tensor<f64>>;
type Builder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Evaluates `Σ weights ⊙ build(inputs)`.
fn evaluate(build: &Builder<'_>, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

enum Trial {
    Accepted(f64),
    Kink,
}

fn run_trial(build: &Builder<'_>, inputs: &Inputs, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Trial> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let n_out = tape.value(out).len();
    let weights = Tensor::new(shape.clone(), (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = tape.constant(weights.clone());
    let projected = tape.mul(out, w)?;
    let scalar = tape.sum(projected);
    tape.backward(scalar)?;

    let h = cfg.step;
    let mut worst: f64 = 0.0;
    for (i, (var, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic_full = tape.grad(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let scale = (norm(&analytic_full) / (analytic_full.len().max(1) as f64).sqrt()).max(1e-12);
        let coords: Vec<usize> = if input.len() <= cfg.coordinates {
            (0..input.len()).collect()
        } else {
            let mut c = sample(rng, input.len(), cfg.coordinates).into_vec();
            c.sort_unstable();
            c
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let at = |offset: f64| -> Result<f64> {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[c] += offset;
                evaluate(build, &shifted, &weights)
            };
            let (f0, fp1, fm1, fp2, fm2) = (at(0.0)?, at(h)?, at(-h)?, at(h / 2.0)?, at(-h / 2.0)?);
            let (wide, narrow) = ((fp1 - fm1) / (2.0 * h), (fp2 - fm2) / h);
            let central = (4.0 * narrow - wide) / 3.0;
            let right = 2.0 * (fp2 - f0) / (h / 2.0) - (fp1 - f0) / h;
            let left = 2.0 * (f0 - fm2) / (h / 2.0) - (f0 - fm1) / h;
            // Each comparison misses kinks at one offset (0 and h/3); together
            // they catch any kink in the stencil.
            let limit = KINK_TOLERANCE * central.abs().max(scale);
            if (right - left).abs() > limit || (wide - narrow).abs() > limit {
                continue;
            }
            analytic.push(analytic_full[c]);
            numeric.push(central);
        }
        if 2 * analytic.len() < coords.len() {
            return Ok(Trial::Kink);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(Trial::Accepted(worst))
}

/// Runs `cfg.trials` accepted instances of one check. Instances where more
/// than half the sampled coordinates have a kink inside the stencil are
/// redrawn, up to ten times the trial count.
pub fn check_gradient(
    name: &str,
    kind: CheckKind,
    tolerance: f64,
    cfg: &GradCheckConfig,
    mut generate: impl FnMut(&mut ChaCha8Rng) -> Inputs,
    build: &Builder<'_>,
) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)))]));
    let mut accepted = 0;
    let mut rejected = 0;
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    while accepted < cfg.trials && rejected < 10 * cfg.trials {
        let inputs = generate(&mut rng);
        match run_trial(build, &inputs, cfg, &mut rng) {
            Ok(Trial::Accepted(e)) => {
                accepted += 1;
                worst = worst.max(e);
            }
            Ok(Trial::Kink) => rejected += 1,
            Err(e) => {
                detail = format!("error: {e}");
                break;
            }
        }
    }
    if detail.is_empty() && accepted < cfg.trials {
        detail = format!("only {accepted} instances with enough kink-free coordinates");
    }
    CheckOutcome {
        name: name.to_string(),
        kind,
        trials: accepted,
        rejected,
        value: worst,
        tolerance,
        passed: detail.is_empty() && worst <= tolerance,
        detail,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

fn small_homography(rng: &mut ChaCha8Rng, size: f64) -> Homography {
    let t = rng.random_range(-0.15..0.15f64);
    let (c, s) = (t.cos(), t.sin());
    let m = size / 2.0;
    let tx = rng.random_range(-1.5..1.5);
    let ty = rng.random_range(-1.5..1.5);
    Homography::new([
        [c, -s, m - c * m + s * m + tx],
        [s, c, m - s * m - c * m + ty],
        [rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), 1.0],
    ])
    .expect("well-conditioned")
}

/// One check per differentiable operation.
pub fn primitive_checks(cfg: &GradCheckConfig) -> Vec<CheckOutcome> {
    let p = PRIMITIVE_TOLERANCE;
    let k = CheckKind::Primitive;
    let one = |shape: &'static [usize], lo: f64, hi: f64| move |r: &mut ChaCha8Rng| vec![random(r, shape, lo, hi)];
    let two = |shape: &'static [usize]| move |r: &mut ChaCha8Rng| vec![random(r, shape, -1.0, 1.0), random(r, shape, -1.0, 1.0)];
    vec![
        check_gradient(
            "conv2d",
            k,
            p,
            cfg,
            |r| vec![random(r, &[7, 8, 3], -1.0, 1.0), random(r, &[4, 3, 3, 3], -0.5, 0.5), random(r, &[4], -0.5, 0.5)],
            &|t, v| t.conv2d(v[0], v[1], v[2], 2),
        ),
        check_gradient(
            "conv2d_2x2",
            k,
            p,
            cfg,
            |r| vec![random(r, &[6, 5, 2], -1.0, 1.0), random(r, &[3, 2, 2, 2], -0.5, 0.5), random(r, &[3], -0.5, 0.5)],
            &|t, v| t.conv2d(v[0], v[1], v[2], 3),
        ),
        check_gradient("relu", k, p, cfg, one(&[5, 6, 3], -1.0, 1.0), &|t, v| Ok(t.relu(v[0]))),
        check_gradient("square", k, p, cfg, one(&[5, 6, 3], -1.0, 1.0), &|t, v| Ok(t.square(v[0]))),
        check_gradient("softmax_channels", k, p, cfg, one(&[4, 5, 3], -2.0, 2.0), &|t, v| Ok(t.softmax_channels(v[0]))),
        check_gradient("l2_normalize_channels", k, p, cfg, one(&[4, 5, 6], -1.0, 1.0), &|t, v| {
            Ok(t.l2_normalize_channels(v[0]))
        }),
        check_gradient("downsample_bilinear", k, p, cfg, one(&[9, 11, 2], -1.0, 1.0), &|t, v| {
            t.downsample_bilinear(v[0], 5, 6)
        }),
        check_gradient("add", k, p, cfg, two(&[4, 5]), &|t, v| t.add(v[0], v[1])),
        check_gradient("sub", k, p, cfg, two(&[4, 5]), &|t, v| t.sub(v[0], v[1])),
        check_gradient("mul", k, p, cfg, two(&[4, 5]), &|t, v| t.mul(v[0], v[1])),
        check_gradient("affine", k, p, cfg, one(&[4, 5], -1.0, 1.0), &|t, v| Ok(t.affine(v[0], -0.7, 0.3))),
        check_gradient("sum", k, p, cfg, one(&[4, 5, 2], -1.0, 1.0), &|t, v| Ok(t.sum(v[0]))),
        check_gradient("mean", k, p, cfg, one(&[4, 5, 2], -1.0, 1.0), &|t, v| Ok(t.mean(v[0]))),
        check_gradient("max_over_window", k, p, cfg, one(&[10, 11], 0.0, 1.0), &|t, v| t.max_over_window(v[0], 4, 2)),
        check_gradient("avg_over_window", k, p, cfg, one(&[10, 11], 0.0, 1.0), &|t, v| t.avg_over_window(v[0], 4, 1)),
        check_gradient("select_channel", k, p, cfg, one(&[4, 5, 3], -1.0, 1.0), &|t, v| t.select_channel(v[0], 1)),
        check_gradient("gather_rows", k, p, cfg, one(&[4, 5, 3], -1.0, 1.0), &|t, v| t.gather_rows(v[0], &[0, 7, 7, 19])),
        check_gradient("reshape", k, p, cfg, one(&[4, 5, 3], -1.0, 1.0), &|t, v| t.reshape(v[0], &[20, 3])),
        check_gradient(
            "pairwise_distances",
            k,
            p,
            cfg,
            |r| vec![random(r, &[4, 6], -1.0, 1.0), random(r, &[7, 6], -1.0, 1.0)],
            &|t, v| {
                let q = t.l2_normalize_channels(v[0]);
                let d = t.l2_normalize_channels(v[1]);
                pairwise_distances(t, q, d)
            },
        ),
        check_gradient(
            "warp_heatmap",
            k,
            p,
            cfg,
            |r| vec![random(r, &[12, 12], 0.0, 1.0)],
            &|t, v| {
                let h = Homography::new([[0.97, -0.12, 1.1], [0.11, 0.98, -0.4], [4e-4, -2e-4, 1.0]]).expect("valid");
                let field = build_correspondences(&h, (12, 12), (12, 12));
                Ok(warp_heatmap(t, v[0], &field)?.0)
            },
        ),
    ]
}

fn labels_for(rng: &mut ChaCha8Rng, queries: usize, entries: usize) -> Vec<ApLabel> {
    let mut labels = Vec::with_capacity(queries * entries);
    for _ in 0..queries {
        let positive = rng.random_range(0..entries);
        for e in 0..entries {
            labels.push(if e == positive || rng.random_bool(0.2) {
                ApLabel::Positive
            } else if rng.random_bool(0.1) {
                ApLabel::Ignored
            } else {
                ApLabel::Negative
            });
        }
    }
    labels
}

fn small_loss_config() -> LossConfig {
    LossConfig {
        patch_size: 8,
        query_step: 4,
        ..LossConfig::default()
    }
}

/// Every loss term, and the whole objective through a reduced network.
pub fn composite_checks(cfg: &GradCheckConfig) -> Vec<CheckOutcome> {
    let c = COMPOSITE_TOLERANCE;
    let k = CheckKind::Composite;
    let mut label_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = labels_for(&mut label_rng, 3, 12);
    let mut geometry_rng = ChaCha8Rng::seed_from_u64(cfg.seed + 1);
    let field = build_correspondences(&small_homography(&mut geometry_rng, 16.0), (16, 16), (16, 16));
    let loss_cfg = small_loss_config();

    let heatmaps = |r: &mut ChaCha8Rng| vec![random(r, &[16, 16], 0.02, 1.0), random(r, &[16, 16], 0.02, 1.0)];
    let mut out = vec![
        check_gradient(
            "soft_ap",
            k,
            c,
            cfg,
            |r| vec![random(r, &[3, 12], 0.0, 2.0)],
            &|t, v| soft_ap_tape(t, v[0], &labels, loss_cfg.ap_bins),
        ),
        check_gradient(
            "soft_ap_descriptors",
            k,
            c,
            cfg,
            |r| vec![random(r, &[3, 8], -1.0, 1.0), random(r, &[12, 8], -1.0, 1.0)],
            &|t, v| {
                let q = t.l2_normalize_channels(v[0]);
                let d = t.l2_normalize_channels(v[1]);
                let dist = pairwise_distances(t, q, d)?;
                soft_ap_tape(t, dist, &labels, loss_cfg.ap_bins)
            },
        ),
        check_gradient("cosim_loss", k, c, cfg, heatmaps, &|t, v| {
            let valid = vec![true; 256];
            cosim_loss(t, v[0], v[1], &valid, loss_cfg.patch_size, 1)
        }),
        check_gradient("peakiness_loss", k, c, cfg, |r| vec![random(r, &[16, 16], 0.0, 1.0)], &|t, v| {
            peakiness_loss(t, v[0], loss_cfg.patch_size, 1)
        }),
        check_gradient("repeatability_loss", k, c, cfg, heatmaps, &|t, v| {
            Ok(repeatability_loss(t, v[0], v[1], &field, &loss_cfg)?.total)
        }),
    ];

    // Reliability-gated AP loss on dense maps: descriptors are normalized
    // inside the graph so every perturbation stays on the unit sphere.
    let dense = |r: &mut ChaCha8Rng| {
        vec![
            random(r, &[16, 16, 8], -1.0, 1.0),
            random(r, &[16, 16, 8], -1.0, 1.0),
            random(r, &[16, 16], 0.05, 0.95),
            random(r, &[16, 16], 0.05, 0.95),
            random(r, &[16, 16], 0.05, 0.95),
            random(r, &[16, 16], 0.05, 0.95),
        ]
    };
    for (name, mode) in [("ap_kappa_loss", AblationMode::ReliabilityOnly), ("total_loss", AblationMode::Full)] {
        out.push(check_gradient(name, k, c, cfg, dense, &|t, v| {
            let o1 = OutputVars {
                descriptors: t.l2_normalize_channels(v[0]),
                repeatability: v[2],
                reliability: v[4],
            };
            let o2 = OutputVars {
                descriptors: t.l2_normalize_channels(v[1]),
                repeatability: v[3],
                reliability: v[5],
            };
            Ok(total_loss(t, &o1, &o2, &field, &loss_cfg, mode)?.total)
        }));
    }

    // Whole pipeline: reduced network on two 16×16 images.
    let net_cfg = NetworkConfig {
        backbone_widths: vec![4, 4],
        backbone_dilations: vec![1, 2],
        tail_widths: vec![4, crate::model::DESCRIPTOR_DIM],
        tail_dilations: vec![2, 4],
        width_multiplier: 1.0,
        ..NetworkConfig::toy()
    };
    let reference = Network::<f64>::new(net_cfg).expect("valid config");
    let n_params = reference.params().len();
    let images = |r: &mut ChaCha8Rng| vec![random(r, &[16, 16, 3], 0.0, 1.0), random(r, &[16, 16, 3], 0.0, 1.0)];
    let params: Vec<Tensor<f64>> = reference.params().to_vec();
    out.push(check_gradient(
        "network_total_loss",
        k,
        c,
        cfg,
        |r| {
            let mut inputs: Vec<Tensor<f64>> = params
                .iter()
                .map(|p| {
                    let mut q = p.clone();
                    for v in q.data_mut() {
                        *v += r.random_range(-0.05..0.05);
                    }
                    q
                })
                .collect();
            inputs.extend(images(r));
            inputs
        },
        &|t, v| {
            let (p, img) = v.split_at(n_params);
            let o1 = reference.forward(t, p, img[0])?;
            let o2 = reference.forward(t, p, img[1])?;
            Ok(total_loss(t, &o1, &o2, &field, &loss_cfg, AblationMode::Full)?.total)
        },
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        use crate::autodiff::CustomOp;
        /// Claims d(x²)/dx = x.
        struct HalfSquare;
        impl CustomOp<f64> for HalfSquare {
            fn name(&self) -> &'static str {
                "half_square"
            }
            fn backward(
                &self,
                inputs: &[&Tensor<f64>],
                _output: &Tensor<f64>,
                grad: &Tensor<f64>,
                _needs: &[bool],
            ) -> Result<Vec<Option<Tensor<f64>>>> {
                let data = inputs[0].data().iter().zip(grad.data()).map(|(x, g)| x * g).collect();
                Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
            }
        }
        let cfg = GradCheckConfig {
            trials: 3,
            ..GradCheckConfig::default()
        };
        let outcome = check_gradient(
            "broken",
            CheckKind::Primitive,
            PRIMITIVE_TOLERANCE,
            &cfg,
            |r| vec![random(r, &[3, 4], -1.0, 1.0)],
            &|t, v| {
                let value = t.value(v[0]).map(|x| x * x);
                Ok(t.custom(&[v[0]], value, Box::new(HalfSquare)))
            },
        );
        assert!(!outcome.passed);
        assert!(outcome.value > 0.4);
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
