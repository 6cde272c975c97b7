use std::fmt::Write as _;
use std::path::Path;

use cpu_time::ThreadTime;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, synthesize_pair, PairConfig, SceneKind, SceneMix, TrainingPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pair, AggregateMetrics, EvalConfig, EvalResult, PairGeometry};
use crate::extractor::{extract_keypoints, ExtractConfig};
use crate::io::write_atomic;
use crate::losses::AblationMode;
use crate::model::Network;

use super::{train, TrainConfig, TrainOutcome};

/// Row order of the report: reliability only, repeatability only, both.
pub const ABLATION_ROWS: [AblationMode; 3] =
    [AblationMode::ReliabilityOnly, AblationMode::RepeatabilityOnly, AblationMode::Full];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyAblationConfig {
    /// Shared by all three variants; `ablation` is overridden per row.
    pub train: TrainConfig,
    /// Number of held-out pairs.
    pub eval_pairs: usize,
    /// Seeds the held-out pair stream, disjoint from training by construction.
    pub eval_seed: u64,
    pub eval_data: PairConfig,
    /// `mode` is overridden per row.
    pub extract: ExtractConfig,
    pub eval: EvalConfig,
}

impl Default for ToyAblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::toy(),
            eval_pairs: 20,
            eval_seed: 0x5eed_e7a1,
            eval_data: PairConfig {
                scene_size: 160,
                crop_size: 128,
                scene_mix: SceneMix::only(SceneKind::CheckerboardTriangle),
                ..PairConfig::default()
            },
            // The toy gates are not calibrated to the 0.7 scale; keypoints are
            // ranked by score only.
            extract: ExtractConfig {
                top_k: 200,
                repeatability_threshold: 0.0,
                reliability_threshold: 0.0,
                ..ExtractConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl ToyAblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_pairs == 0 {
            return Err(Error::InvalidArgument("eval_pairs must be >= 1".into()));
        }
        self.train.validate()?;
        self.eval_data.validate()?;
        self.extract.validate()?;
        self.eval.validate()
    }

    /// The held-out pairs. Training seeds go through `derive_seed(train.seed, ..)`,
    /// these through a separate base seed and a distinct tag.
    pub fn held_out_pairs(&self) -> Result<Vec<TrainingPair>> {
        (0..self.eval_pairs as u64)
            .map(|i| synthesize_pair(&self.eval_data, derive_seed(self.eval_seed, &[u64::MAX, i])))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub reliability: bool,
    pub repeatability: bool,
    pub m_score: f64,
    pub mma_at_3: f64,
    pub repeatability_score: f64,
    /// Aggregates over the held-out pairs at every MMA threshold.
    pub metrics: AggregateMetrics,
    /// Mean total loss over the last 100 iterations (or fewer).
    pub final_loss: f64,
    /// CPU time spent training this variant.
    pub train_cpu_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: ToyAblationConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, mode: AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Plain-text table with check marks for the active maps.
    pub fn to_table(&self) -> String {
        let mark = |b: bool| if b { "x" } else { " " };
        let mut out = String::from("reliability  repeatability  M-score  MMA@3\n");
        for r in &self.rows {
            writeln!(
                out,
                "{:^11}  {:^13}  {:>7.3}  {:>5.3}",
                mark(r.reliability),
                mark(r.repeatability),
                r.m_score,
                r.mma_at_3
            )
            .unwrap();
        }
        out
    }
}

pub struct ToyAblationOutcome {
    pub report: AblationReport,
    /// Trained variants in report row order.
    pub runs: Vec<(AblationMode, TrainOutcome)>,
}

impl ToyAblationOutcome {
    pub fn network(&self, mode: AblationMode) -> Option<&Network<f32>> {
        self.runs.iter().find(|(m, _)| *m == mode).map(|(_, r)| r.network())
    }
}

/// Extracts with `extract` (mode set to `mode`) and evaluates every pair.
pub fn evaluate_on_pairs(
    network: &Network<f32>,
    pairs: &[TrainingPair],
    mode: AblationMode,
    extract: &ExtractConfig,
    eval: &EvalConfig,
) -> Result<Vec<EvalResult>> {
    let extract = ExtractConfig {
        mode,
        ..extract.clone()
    };
    pairs
        .iter()
        .map(|p| {
            let a = extract_keypoints(&p.image1, network, &extract)?;
            let b = extract_keypoints(&p.image2, network, &extract)?;
            let size = |t: &crate::tensor::Tensor<f32>| (t.shape()[1], t.shape()[0]);
            let geometry = PairGeometry::new(p.homography, size(&p.image1), size(&p.image2));
            evaluate_pair(&a, &b, &geometry, eval)
        })
        .collect()
}

/// Trains the three variants on the same pair stream and evaluates each on
/// the same held-out pairs.
pub fn run_toy_ablation(config: &ToyAblationConfig) -> Result<ToyAblationOutcome> {
    config.validate()?;
    let mut eval = config.eval.clone();
    if !eval.thresholds.contains(&3.0) {
        eval.thresholds.push(3.0);
    }
    let pairs = config.held_out_pairs()?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for mode in ABLATION_ROWS {
        log::info!("toy ablation: training {mode}");
        let train_cfg = TrainConfig {
            ablation: mode,
            ..config.train.clone()
        };
        let clock = ThreadTime::now();
        let outcome = train(&train_cfg)?;
        let train_cpu_seconds = clock.elapsed().as_secs_f64();
        let results = evaluate_on_pairs(outcome.network(), &pairs, mode, &config.extract, &eval)?;
        let metrics = AggregateMetrics::from_results(&eval.thresholds, &results);
        let tail = &outcome.curve[outcome.curve.len().saturating_sub(100)..];
        let final_loss = tail.iter().map(|r| r.values.total).sum::<f64>() / tail.len().max(1) as f64;
        let mma_at_3 = metrics.mma.iter().find(|(t, _)| *t == 3.0).map(|m| m.1).unwrap_or(0.0);
        log::info!(
            "toy ablation: {mode}: MMA@3 {mma_at_3:.3}, M-score {:.3}, repeatability {:.3}",
            metrics.matching_score,
            metrics.repeatability
        );
        rows.push(AblationRow {
            mode,
            reliability: mode.uses_reliability(),
            repeatability: mode.uses_repeatability(),
            m_score: metrics.matching_score,
            mma_at_3,
            repeatability_score: metrics.repeatability,
            metrics,
            final_loss,
            train_cpu_seconds,
        });
        runs.push((mode, outcome));
    }
    Ok(ToyAblationOutcome {
        report: AblationReport {
            config: config.clone(),
            rows,
        },
        runs,
    })
}
