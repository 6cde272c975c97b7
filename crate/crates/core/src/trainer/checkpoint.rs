use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::losses::LossValues;
use crate::model::Network;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"R2CK";
const CHECKPOINT_VERSION: u32 = 1;
const EMA_DECAY: f64 = 0.99;

/// Loss totals since the start of the run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub iterations: u64,
    pub skipped_pairs: u64,
    pub sum: LossValues,
    /// Exponential moving average of the total loss.
    pub ema_total: f64,
}

impl RunningStats {
    pub(crate) fn record(&mut self, values: &LossValues, skipped: u64) {
        self.ema_total = if self.iterations == 0 {
            values.total
        } else {
            EMA_DECAY * self.ema_total + (1.0 - EMA_DECAY) * values.total
        };
        self.iterations += 1;
        self.skipped_pairs += skipped;
        self.sum.add_assign(values);
    }

    pub fn mean(&self) -> LossValues {
        if self.iterations == 0 {
            LossValues::default()
        } else {
            self.sum.scaled(1.0 / self.iterations as f64)
        }
    }
}

/// Model plus everything needed to continue training bit-exactly.
///
/// On disk: the model file, followed by `R2CK`, version, iteration, config
/// hash, running statistics, Adam hyperparameters and step, then both moment
/// tensors per parameter, all little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub optimizer: AdamState<f32>,
    pub iteration: u64,
    pub stats: RunningStats,
    pub config_hash: u64,
}

fn write_values(w: &mut ByteWriter, v: &LossValues) {
    for x in [v.cosim, v.peaky1, v.peaky2, v.ap_kappa, v.total] {
        w.f64(x);
    }
}

fn read_values(r: &mut ByteReader<'_>) -> Result<LossValues> {
    Ok(LossValues {
        cosim: r.f64()?,
        peaky1: r.f64()?,
        peaky2: r.f64()?,
        ap_kappa: r.f64()?,
        total: r.f64()?,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        self.network.write_to(&mut w);
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.iteration);
        w.u64(self.config_hash);
        w.u64(self.stats.iterations);
        w.u64(self.stats.skipped_pairs);
        write_values(&mut w, &self.stats.sum);
        w.f64(self.stats.ema_total);
        let c = &self.optimizer.config;
        for x in [c.learning_rate, c.beta1, c.beta2, c.epsilon, c.weight_decay] {
            w.f64(x);
        }
        w.u64(self.optimizer.step);
        w.len_u32(self.optimizer.first_moment.len());
        for (m, v) in self.optimizer.first_moment.iter().zip(&self.optimizer.second_moment) {
            w.len_u32(m.len());
            for t in [m, v] {
                for &x in t.data() {
                    w.f32(x);
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let network = Network::<f32>::read_from(&mut r)?;
        r.expect_magic(CHECKPOINT_MAGIC, "checkpoint")?;
        r.expect_version(CHECKPOINT_VERSION, "checkpoint")?;
        let iteration = r.u64()?;
        let config_hash = r.u64()?;
        let stats = RunningStats {
            iterations: r.u64()?,
            skipped_pairs: r.u64()?,
            sum: read_values(&mut r)?,
            ema_total: r.f64()?,
        };
        let config = AdamConfig {
            learning_rate: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
            weight_decay: r.f64()?,
        };
        let step = r.u64()?;
        let count = r.len_u32()?;
        if count != network.params().len() {
            return Err(Error::Format(format!(
                "optimizer holds {count} moment pairs for {} parameters",
                network.params().len()
            )));
        }
        let mut first_moment = Vec::with_capacity(count);
        let mut second_moment = Vec::with_capacity(count);
        for p in network.params() {
            let n = r.len_u32()?;
            if n != p.len() {
                return Err(Error::Format(format!("moment length {n} for a parameter of {}", p.len())));
            }
            first_moment.push(Tensor::new(p.shape().to_vec(), r.f32_vec(n)?)?);
            second_moment.push(Tensor::new(p.shape().to_vec(), r.f32_vec(n)?)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.remaining())));
        }
        Ok(Self {
            network,
            optimizer: AdamState {
                config,
                step,
                first_moment,
                second_moment,
            },
            iteration,
            stats,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
