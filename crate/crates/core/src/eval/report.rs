use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::Homography;
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};

use super::{EvalConfig, EvalResult};

/// One line of a pair list: two images and the homography file mapping the
/// first onto the second.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub homography: PathBuf,
}

/// Parses `imageA imageB homographyFile` lines. Blank lines and lines
/// starting with `#` are skipped; relative paths resolve against `base`.
pub fn parse_pair_list(text: &str, base: &Path) -> Result<Vec<PairEntry>> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [a, b, h] = fields[..] else {
            return Err(Error::Format(format!(
                "pair list line {}: expected 3 fields, found {}",
                n + 1,
                fields.len()
            )));
        };
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        entries.push(PairEntry {
            image_a: resolve(a),
            image_b: resolve(b),
            homography: resolve(h),
        });
    }
    Ok(entries)
}

/// Reads a file of 9 whitespace-separated numbers, row-major.
pub fn load_homography(path: &Path) -> Result<Homography> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::Format(format!("{}: not UTF-8", path.display())))?;
    Homography::parse(text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub image_a: String,
    pub image_b: String,
    pub homography: String,
    pub result: EvalResult,
}

/// Means over pairs. Pairs with an undefined metric are left out of that
/// metric's mean and counted as skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub pairs: usize,
    pub repeatability: f64,
    pub repeatability_skipped: usize,
    pub mma: Vec<(f64, f64)>,
    pub matching_score: f64,
    pub matching_score_skipped: usize,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

impl AggregateMetrics {
    pub fn from_results<'a>(thresholds: &[f64], results: impl IntoIterator<Item = &'a EvalResult>) -> Self {
        let results: Vec<&EvalResult> = results.into_iter().collect();
        let rep: Vec<f64> = results.iter().filter_map(|r| r.repeatability.map(|x| x.value)).collect();
        let ms: Vec<f64> = results.iter().filter_map(|r| r.matching_score.value).collect();
        let mma = thresholds
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, mean(&results.iter().map(|r| r.mma.ratios[i].value).collect::<Vec<_>>())))
            .collect();
        AggregateMetrics {
            pairs: results.len(),
            repeatability: mean(&rep),
            repeatability_skipped: results.len() - rep.len(),
            mma,
            matching_score: mean(&ms),
            matching_score_skipped: results.len() - ms.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub pairs: Vec<PairReport>,
    pub mean: AggregateMetrics,
}

impl EvalReport {
    pub fn new(config: EvalConfig, pairs: Vec<PairReport>) -> Self {
        let mean = AggregateMetrics::from_results(&config.thresholds, pairs.iter().map(|p| &p.result));
        Self { config, pairs, mean }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_list_parses_and_resolves() {
        let text = "# comment\n\na.ppm b.ppm H_1_2\n/abs/c.ppm d.ppm h.txt\n";
        let e = parse_pair_list(text, Path::new("/data")).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].image_a, Path::new("/data/a.ppm"));
        assert_eq!(e[0].homography, Path::new("/data/H_1_2"));
        assert_eq!(e[1].image_a, Path::new("/abs/c.ppm"));
        assert!(parse_pair_list("a b\n", Path::new(".")).is_err());
    }

    #[test]
    fn homography_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.txt");
        std::fs::write(&path, "1 0 2.5\n0 1 -3\n0 0 1\n").unwrap();
        let h = load_homography(&path).unwrap();
        assert_eq!(h.apply(0.0, 0.0), Some((2.5, -3.0)));
        std::fs::write(&path, "1 0 2.5\n0 1\n").unwrap();
        assert!(load_homography(&path).is_err());
    }
}
