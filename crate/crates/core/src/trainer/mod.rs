//! Training loop, checkpoints and the toy ablation harness.

mod ablation;
mod checkpoint;

pub use ablation::{evaluate_on_pairs, run_toy_ablation, ABLATION_ROWS, AblationReport, AblationRow, ToyAblationConfig, ToyAblationOutcome};
pub use checkpoint::{Checkpoint, RunningStats};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datagen::{derive_seed, synthesize_pair, PairConfig, SceneKind, SceneMix};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{total_loss, AblationMode, LossConfig, LossValues};
use crate::model::{Network, NetworkConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Independently synthesized pairs per optimizer step.
    pub batch_size: usize,
    pub iterations: usize,
    /// Seeds the pair stream; network initialization uses `network.seed`.
    pub seed: u64,
    pub data: PairConfig,
    /// Checkpoint cadence in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub ablation: AblationMode,
    /// Keep `(AP, R, loss)` for every query of every pair.
    pub log_queries: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::base(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 8,
            iterations: 2000,
            seed: 0,
            data: PairConfig::default(),
            checkpoint_every: 0,
            ablation: AblationMode::Full,
            log_queries: false,
        }
    }
}

impl TrainConfig {
    /// Desk-scale setup: reduced network, 96×96 crops, checkerboard/triangle
    /// scenes.
    pub fn toy() -> Self {
        Self {
            network: NetworkConfig::toy(),
            batch_size: TOY_BATCH_SIZE,
            data: PairConfig {
                scene_size: 128,
                crop_size: 96,
                scene_mix: SceneMix::only(SceneKind::CheckerboardTriangle),
                ..PairConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        self.loss.validate()?;
        self.data.validate()?;
        self.network.layers()?;
        Ok(())
    }

    /// FNV-1a of the canonical JSON of every field that shapes the
    /// trajectory; run length, cadence and logging are left out so a run
    /// can be resumed with a larger budget.
    pub fn trajectory_hash(&self) -> u64 {
        let canonical = TrainConfig {
            iterations: 1,
            checkpoint_every: 0,
            log_queries: false,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        json.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
    }
}

/// Pairs per step in [`TrainConfig::toy`].
pub const TOY_BATCH_SIZE: usize = 2;

/// Losses of one iteration, averaged over the pairs that were used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    /// 1-based iteration number.
    pub iteration: u64,
    pub values: LossValues,
    pub pairs_used: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryRecord {
    pub iteration: u64,
    pub pair: usize,
    pub query: usize,
    pub ap: f64,
    pub reliability: f64,
    pub loss: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("iteration,cosim,peaky1,peaky2,ap_kappa,total\n");
    for r in rows {
        let v = &r.values;
        writeln!(out, "{},{},{},{},{},{}", r.iteration, v.cosim, v.peaky1, v.peaky2, v.ap_kappa, v.total).unwrap();
    }
    out
}

pub fn query_log_csv(records: &[QueryRecord]) -> String {
    let mut out = String::from("iteration,pair,query,ap,reliability,loss\n");
    for q in records {
        writeln!(out, "{},{},{},{},{},{}", q.iteration, q.pair, q.query, q.ap, q.reliability, q.loss).unwrap();
    }
    out
}

pub struct Trainer {
    config: TrainConfig,
    network: Network<f32>,
    optimizer: AdamState<f32>,
    iteration: u64,
    stats: RunningStats,
    curve: Vec<CurveRow>,
    queries: Vec<QueryRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::new(config.network.clone())?;
        let optimizer = AdamState::new(config.adam.clone(), network.params());
        Ok(Self {
            config,
            network,
            optimizer,
            iteration: 0,
            stats: RunningStats::default(),
            curve: Vec::new(),
            queries: Vec::new(),
        })
    }

    /// Continues from `checkpoint`; the config must match the one it was
    /// written with, except for run length, cadence and logging.
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        if checkpoint.config_hash != config.trajectory_hash() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was written with config hash {:016x}, current config hashes to {:016x}",
                checkpoint.config_hash,
                config.trajectory_hash()
            )));
        }
        if checkpoint.network.config() != &config.network {
            return Err(Error::InvalidArgument("checkpoint network differs from config".into()));
        }
        Ok(Self {
            config,
            network: checkpoint.network,
            optimizer: checkpoint.optimizer,
            iteration: checkpoint.iteration,
            stats: checkpoint.stats,
            curve: Vec::new(),
            queries: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn stats(&self) -> &RunningStats {
        &self.stats
    }

    /// Rows produced by this trainer (not those before a resume).
    pub fn curve(&self) -> &[CurveRow] {
        &self.curve
    }

    pub fn query_log(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            optimizer: self.optimizer.clone(),
            iteration: self.iteration,
            stats: self.stats,
            config_hash: self.config.trajectory_hash(),
        }
    }

    /// One optimizer step on a fresh batch. The batch depends only on the
    /// seed and the iteration number.
    pub fn step(&mut self) -> Result<CurveRow> {
        let cfg = &self.config;
        let number = self.iteration + 1;
        let params = self.network.params();
        let mut grads: Vec<Tensor<f32>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let mut sum = LossValues::default();
        let mut used = 0;
        let mut skipped = 0;
        for k in 0..cfg.batch_size {
            let seed = derive_seed(cfg.seed, &[self.iteration, k as u64]);
            let pair = match synthesize_pair(&cfg.data, seed) {
                Ok(p) => p,
                Err(Error::UnusablePair(why)) => {
                    log::warn!("iteration {number}, pair {k}: skipped ({why})");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut tape = Tape::new();
            let vars = self.network.register(&mut tape, true);
            let i1 = tape.constant(pair.image1);
            let i2 = tape.constant(pair.image2);
            let o1 = self.network.forward(&mut tape, &vars, i1)?;
            let o2 = self.network.forward(&mut tape, &vars, i2)?;
            let breakdown = match total_loss(&mut tape, &o1, &o2, &pair.field, &cfg.loss, cfg.ablation) {
                Ok(b) => b,
                Err(Error::UnusablePair(why)) => {
                    log::warn!("iteration {number}, pair {k}: skipped ({why})");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let values = breakdown.values(&tape);
            if !values.all_finite() {
                log::error!("iteration {number}, pair {k}: non-finite loss {values:?}");
                return Err(Error::Diverged { iteration: number });
            }
            if cfg.log_queries {
                for (q, (ap, reliability, loss)) in breakdown.per_query(&tape).into_iter().enumerate() {
                    self.queries.push(QueryRecord {
                        iteration: number,
                        pair: k,
                        query: q,
                        ap,
                        reliability,
                        loss,
                    });
                }
            }
            tape.backward(breakdown.total)?;
            for (acc, &v) in grads.iter_mut().zip(&vars) {
                let g = tape.grad(v).ok_or(Error::MissingGradient { index: v.index() })?;
                acc.add_assign(g);
            }
            sum.add_assign(&values);
            used += 1;
        }

        let values = if used == 0 {
            log::warn!("iteration {number}: every pair was unusable, no update");
            LossValues::default()
        } else {
            let scale = 1.0 / used as f64;
            for g in &mut grads {
                g.scale_assign(scale as f32);
                if !g.all_finite() {
                    return Err(Error::Diverged { iteration: number });
                }
            }
            let refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(Some).collect();
            self.optimizer.step(self.network.params_mut(), &refs)?;
            sum.scaled(scale)
        };
        self.iteration = number;
        self.stats.record(&values, skipped as u64);
        let row = CurveRow {
            iteration: number,
            values,
            pairs_used: used,
        };
        self.curve.push(row);
        Ok(row)
    }

    /// Steps until `config.iterations`, calling `on_checkpoint` at the
    /// configured cadence and once at the end.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        let total = self.config.iterations as u64;
        while self.iteration < total {
            let row = self.step()?;
            if row.iteration % 50 == 0 || row.iteration == total {
                log::info!(
                    "iteration {}/{}: total {:.4} (cosim {:.4}, peaky {:.4}/{:.4}, ap {:.4})",
                    row.iteration,
                    total,
                    row.values.total,
                    row.values.cosim,
                    row.values.peaky1,
                    row.values.peaky2,
                    row.values.ap_kappa
                );
            }
            let every = self.config.checkpoint_every as u64;
            if every > 0 && row.iteration % every == 0 && row.iteration < total {
                on_checkpoint(self)?;
            }
        }
        on_checkpoint(self)
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurveRow>,
    pub queries: Vec<QueryRecord>,
}

impl TrainOutcome {
    pub fn network(&self) -> &Network<f32> {
        &self.checkpoint.network
    }

    pub fn save_curve(&self, path: &Path) -> Result<()> {
        write_atomic(path, curve_csv(&self.curve).as_bytes())
    }
}

/// Trains from scratch for `config.iterations` steps.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run(|_| Ok(()))?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        curve: trainer.curve,
        queries: trainer.queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::toy();
        c.batch_size = 1;
        c.iterations = 3;
        c.data.scene_size = 48;
        c.data.crop_size = 32;
        c
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"batch_size": 2, "learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        let c: TrainConfig = serde_json::from_str(r#"{"batch_size": 2}"#).unwrap();
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.adam.learning_rate, 1e-3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny();
        c.batch_size = 0;
        assert!(Trainer::new(c).is_err());
        let mut c = tiny();
        c.iterations = 0;
        assert!(Trainer::new(c).is_err());
    }

    #[test]
    fn hash_ignores_run_length_only() {
        let a = tiny();
        let mut b = a.clone();
        b.iterations = 50;
        b.checkpoint_every = 7;
        assert_eq!(a.trajectory_hash(), b.trajectory_hash());
        b.seed = 1;
        assert_ne!(a.trajectory_hash(), b.trajectory_hash());
    }

    #[test]
    fn same_config_same_curve_and_resume_is_exact() {
        let cfg = tiny();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert!(a.curve.iter().all(|r| r.values.all_finite() && r.pairs_used == 1));

        let mut short = cfg.clone();
        short.iterations = 2;
        let first = train(&short).unwrap();
        let restored = Checkpoint::from_bytes(&first.checkpoint.to_bytes()).unwrap();
        let mut resumed = Trainer::resume(cfg, restored).unwrap();
        resumed.run(|_| Ok(())).unwrap();
        assert_eq!(resumed.checkpoint().to_bytes(), a.checkpoint.to_bytes());
        assert_eq!(resumed.curve(), &a.curve[2..]);
    }

    #[test]
    fn resume_rejects_other_config() {
        let cfg = tiny();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.step().unwrap();
        let mut other = cfg;
        other.loss.kappa = 0.3;
        assert!(Trainer::resume(other, t.checkpoint()).is_err());
    }

    #[test]
    fn repeatability_only_logs_one_minus_ap() {
        let mut cfg = tiny();
        cfg.iterations = 1;
        cfg.ablation = AblationMode::RepeatabilityOnly;
        cfg.log_queries = true;
        let out = train(&cfg).unwrap();
        assert!(!out.queries.is_empty());
        for q in &out.queries {
            assert_eq!(q.reliability, 1.0);
            assert!((q.loss - (1.0 - q.ap)).abs() <= 1e-6);
        }
        assert!(query_log_csv(&out.queries).starts_with("iteration,pair,query,ap,reliability,loss\n"));
    }

    #[test]
    fn curve_csv_layout() {
        let rows = [CurveRow {
            iteration: 1,
            values: LossValues {
                cosim: 0.5,
                peaky1: 0.25,
                peaky2: 0.125,
                ap_kappa: 0.75,
                total: 1.4375,
            },
            pairs_used: 2,
        }];
        assert_eq!(curve_csv(&rows), "iteration,cosim,peaky1,peaky2,ap_kappa,total\n1,0.5,0.25,0.125,0.75,1.4375\n");
    }
}
