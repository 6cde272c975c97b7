use crate::datagen::CorrespondenceField;
use crate::error::{Error, Result};

use super::{ApLabel, LossConfig};

/// One image-1 grid pixel with a valid ground-truth target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub x: usize,
    pub y: usize,
    /// Sub-pixel target in image 2.
    pub target: (f64, f64),
}

/// Queries, database pixels and their relevance labels for one image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub queries: Vec<Query>,
    /// Grid positions dropped because their target is invalid.
    pub skipped: usize,
    /// Image-2 pixels `(x, y)`: rounded query targets, then the image-2 grid.
    pub database: Vec<(usize, usize)>,
    /// Row-major `queries × database`.
    pub labels: Vec<ApLabel>,
    width1: usize,
    width2: usize,
}

impl TrainingBatch {
    pub fn query_indices(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.y * self.width1 + q.x).collect()
    }

    pub fn database_indices(&self) -> Vec<usize> {
        self.database.iter().map(|&(x, y)| y * self.width2 + x).collect()
    }

    pub fn label(&self, query: usize, entry: usize) -> ApLabel {
        self.labels[query * self.database.len() + entry]
    }
}

fn grid(len: usize, step: usize) -> impl Iterator<Item = usize> {
    (step / 2..len).step_by(step)
}

/// Queries on the `query_step` grid of image 1 (valid targets only); the
/// database holds every query's rounded target plus the image-2 grid.
/// Per query, entries within `positive_radius` of its target are positive,
/// entries beyond `negative_radius` negative, the rest ignored.
pub fn sample_training_batch(field: &CorrespondenceField, cfg: &LossConfig) -> Result<TrainingBatch> {
    cfg.validate()?;
    let (w1, h1) = (field.width(), field.height());
    let (w2, h2) = field.target_size();
    let step = cfg.query_step;
    let mut queries = Vec::new();
    let mut skipped = 0;
    for y in grid(h1, step) {
        for x in grid(w1, step) {
            match field.target(x, y) {
                Some(target) => queries.push(Query { x, y, target }),
                None => skipped += 1,
            }
        }
    }
    if queries.is_empty() {
        return Err(Error::UnusablePair(format!("none of {skipped} grid queries has a valid target")));
    }
    let round = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    let mut database: Vec<(usize, usize)> = queries
        .iter()
        .map(|q| (round(q.target.0, w2), round(q.target.1, h2)))
        .collect();
    for y in grid(h2, step) {
        for x in grid(w2, step) {
            database.push((x, y));
        }
    }
    let mut labels = Vec::with_capacity(queries.len() * database.len());
    for q in &queries {
        for &(x, y) in &database {
            let d = ((x as f64 - q.target.0).powi(2) + (y as f64 - q.target.1).powi(2)).sqrt();
            labels.push(if d <= cfg.positive_radius {
                ApLabel::Positive
            } else if d > cfg.negative_radius {
                ApLabel::Negative
            } else {
                ApLabel::Ignored
            });
        }
    }
    Ok(TrainingBatch {
        queries,
        skipped,
        database,
        labels,
        width1: w1,
        width2: w2,
    })
}
