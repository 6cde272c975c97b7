use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datagen::CorrespondenceField;
use crate::error::{Error, Result};
use crate::model::OutputVars;
use crate::tensor::Scalar;

use super::{pairwise_distances, repeatability_loss, sample_training_batch, soft_ap_tape, LossConfig, RepeatabilityTerms, TrainingBatch};

/// Which parts of the objective are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Repeatability losses plus the reliability-gated AP loss.
    #[default]
    Full,
    /// No repeatability losses; keypoints come from the reliability map.
    ReliabilityOnly,
    /// Reliability fixed to 1, so each query's loss is `1 − AP`.
    RepeatabilityOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Full, AblationMode::ReliabilityOnly, AblationMode::RepeatabilityOnly];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::ReliabilityOnly => "reliability_only",
            AblationMode::RepeatabilityOnly => "repeatability_only",
        }
    }

    pub fn uses_repeatability(self) -> bool {
        self != AblationMode::ReliabilityOnly
    }

    pub fn uses_reliability(self) -> bool {
        self != AblationMode::RepeatabilityOnly
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation mode '{s}'")))
    }
}

/// Tape handles for every term of the objective.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    /// Absent in [`AblationMode::ReliabilityOnly`].
    pub repeatability: Option<RepeatabilityTerms>,
    /// Soft AP per query, `[nq]`.
    pub ap: Var,
    /// Reliability read at each query, `[nq]`; absent when fixed to 1.
    pub reliability: Option<Var>,
    /// Gated AP loss per query, `[nq]`.
    pub query_losses: Var,
    /// Mean of `query_losses`.
    pub ap_kappa: Var,
    pub total: Var,
    pub batch: TrainingBatch,
}

/// Scalar values of a [`LossBreakdown`]; inactive terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub cosim: f64,
    pub peaky1: f64,
    pub peaky2: f64,
    pub ap_kappa: f64,
    pub total: f64,
}

impl LossValues {
    pub fn all_finite(&self) -> bool {
        [self.cosim, self.peaky1, self.peaky2, self.ap_kappa, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &LossValues) {
        self.cosim += other.cosim;
        self.peaky1 += other.peaky1;
        self.peaky2 += other.peaky2;
        self.ap_kappa += other.ap_kappa;
        self.total += other.total;
    }

    pub fn scaled(&self, factor: f64) -> LossValues {
        LossValues {
            cosim: self.cosim * factor,
            peaky1: self.peaky1 * factor,
            peaky2: self.peaky2 * factor,
            ap_kappa: self.ap_kappa * factor,
            total: self.total * factor,
        }
    }
}

impl LossBreakdown {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).item().as_f64();
        let (cosim, peaky1, peaky2) = match &self.repeatability {
            Some(r) => (v(r.cosim), v(r.peaky1), v(r.peaky2)),
            None => (0.0, 0.0, 0.0),
        };
        LossValues {
            cosim,
            peaky1,
            peaky2,
            ap_kappa: v(self.ap_kappa),
            total: v(self.total),
        }
    }

    /// Per-query `(ap, reliability, loss)`.
    pub fn per_query<T: Scalar>(&self, tape: &Tape<T>) -> Vec<(f64, f64, f64)> {
        let ap = tape.value(self.ap).data();
        let loss = tape.value(self.query_losses).data();
        (0..ap.len())
            .map(|i| {
                let r = self.reliability.map_or(1.0, |r| tape.value(r).data()[i].as_f64());
                (ap[i].as_f64(), r, loss[i].as_f64())
            })
            .collect()
    }
}

/// Repeatability loss (unless disabled) plus the mean over valid queries of
/// `1 − (AP·R + κ·(1 − R))`, with `R` read from image 1's reliability map
/// at the query pixel.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out1: &OutputVars,
    out2: &OutputVars,
    field: &CorrespondenceField,
    cfg: &LossConfig,
    mode: AblationMode,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let repeatability = if mode.uses_repeatability() {
        Some(repeatability_loss(tape, out1.repeatability, out2.repeatability, field, cfg)?)
    } else {
        None
    };

    let batch = sample_training_batch(field, cfg)?;
    let q_idx = batch.query_indices();
    let queries = tape.gather_rows(out1.descriptors, &q_idx)?;
    let database = tape.gather_rows(out2.descriptors, &batch.database_indices())?;
    let distances = pairwise_distances(tape, queries, database)?;
    let ap = soft_ap_tape(tape, distances, &batch.labels, cfg.ap_bins)?;

    let (reliability, query_losses) = if mode.uses_reliability() {
        let r = tape.gather_rows(out1.reliability, &q_idx)?;
        let r = tape.reshape(r, &[q_idx.len()])?;
        let excess = tape.affine(ap, 1.0, -cfg.kappa);
        let gated = tape.mul(r, excess)?;
        (Some(r), tape.affine(gated, -1.0, 1.0 - cfg.kappa))
    } else {
        (None, tape.affine(ap, -1.0, 1.0))
    };
    let ap_kappa = tape.mean(query_losses);
    let total = match &repeatability {
        Some(terms) => tape.add(terms.total, ap_kappa)?,
        None => ap_kappa,
    };
    Ok(LossBreakdown {
        repeatability,
        ap,
        reliability,
        query_losses,
        ap_kappa,
        total,
        batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_correspondences, Homography};
    use crate::losses::{cosim_loss, warp_heatmap, ApLabel};
    use crate::model::{Network, NetworkConfig};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, size: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
        Tensor::new([size, size, 3], data).unwrap()
    }

    fn setup(mode: AblationMode, cfg: &LossConfig) -> (Tape<f64>, LossBreakdown) {
        let net = Network::<f64>::new(NetworkConfig::toy()).unwrap();
        let mut tape = Tape::new();
        let params = net.register(&mut tape, true);
        let i1 = tape.constant(image(1, 32));
        let i2 = tape.constant(image(2, 32));
        let o1 = net.forward(&mut tape, &params, i1).unwrap();
        let o2 = net.forward(&mut tape, &params, i2).unwrap();
        let h = Homography::translation(1.5, -0.5);
        let field = build_correspondences(&h, (32, 32), (32, 32));
        let b = total_loss(&mut tape, &o1, &o2, &field, cfg, mode).unwrap();
        (tape, b)
    }

    #[test]
    fn total_is_sum_of_terms() {
        let cfg = LossConfig::default();
        let (tape, b) = setup(AblationMode::Full, &cfg);
        let v = b.values(&tape);
        let sum = v.cosim + cfg.peaky_weight * (v.peaky1 + v.peaky2) + v.ap_kappa;
        assert!((v.total - sum).abs() <= 1e-7);
        let per_query = b.per_query(&tape);
        let mean = per_query.iter().map(|q| q.2).sum::<f64>() / per_query.len() as f64;
        assert!((mean - v.ap_kappa).abs() <= 1e-12);
        for (ap, r, loss) in per_query {
            assert!((loss - (1.0 - (ap * r + cfg.kappa * (1.0 - r)))).abs() <= 1e-12);
        }
    }

    #[test]
    fn degenerate_config_reduces_to_cosim_plus_one_minus_ap() {
        let cfg = LossConfig {
            peaky_weight: 0.0,
            kappa: 0.0,
            ..LossConfig::default()
        };
        let (tape, b) = setup(AblationMode::RepeatabilityOnly, &cfg);
        let v = b.values(&tape);
        let aps = tape.value(b.ap).data().to_vec();
        let mean_ap = aps.iter().sum::<f64>() / aps.len() as f64;
        assert!((v.total - (v.cosim + 1.0 - mean_ap)).abs() <= 1e-12);
        for (ap, r, loss) in b.per_query(&tape) {
            assert_eq!(r, 1.0);
            assert_eq!(loss, 1.0 - ap);
        }
    }

    #[test]
    fn reliability_only_skips_repeatability() {
        let (tape, b) = setup(AblationMode::ReliabilityOnly, &LossConfig::default());
        assert!(b.repeatability.is_none());
        assert_eq!(b.values(&tape).total, b.values(&tape).ap_kappa);
    }

    #[test]
    fn gate_gradient_is_kappa_minus_ap() {
        let mut tape = Tape::<f64>::new();
        let r = tape.leaf(Tensor::from_f64([3, 1], &[0.2, 0.5, 0.9]).unwrap(), true);
        let d = tape.leaf(Tensor::from_f64([3, 2], &[0.1, 1.5, 0.9, 0.3, 1.7, 0.2]).unwrap(), true);
        let labels = [ApLabel::Positive, ApLabel::Negative].repeat(3);
        let ap = soft_ap_tape(&mut tape, d, &labels, 25).unwrap();
        let aps = tape.value(ap).data().to_vec();
        let rr = tape.reshape(r, &[3]).unwrap();
        let kappa = 0.5;
        let ex = tape.affine(ap, 1.0, -kappa);
        let g = tape.mul(rr, ex).unwrap();
        let l = tape.affine(g, -1.0, 1.0 - kappa);
        let s = tape.sum(l);
        tape.backward(s).unwrap();
        let gr = tape.grad(r).unwrap().data();
        for i in 0..3 {
            assert!((gr[i] - (kappa - aps[i])).abs() < 1e-12);
            assert_eq!(gr[i] < 0.0, aps[i] > kappa);
        }
    }

    #[test]
    fn cosim_of_identical_maps_is_zero() {
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(Tensor::from_f64([16, 16], &(0..256).map(|i| (i % 13) as f64 * 0.07 + 0.01).collect::<Vec<_>>()).unwrap(), true);
        let field = build_correspondences(&Homography::identity(), (16, 16), (16, 16));
        let (w, m) = warp_heatmap(&mut tape, s, &field).unwrap();
        let c = cosim_loss(&mut tape, s, w, &m, 16, 1).unwrap();
        assert!(tape.value(c).item().abs() <= 1e-6);
    }

    #[test]
    fn modes_parse() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!("both".parse::<AblationMode>().is_err());
    }
}
