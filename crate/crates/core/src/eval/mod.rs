//! Descriptor matching and the repeatability, MMA and matching-score metrics.

mod report;

pub use report::{load_homography, parse_pair_list, AggregateMetrics, EvalReport, PairEntry, PairReport};

use serde::{Deserialize, Serialize};

use crate::datagen::Homography;
use crate::error::{Error, Result};
use crate::extractor::{Keypoint, KeypointSet};

/// Descriptors further than this from unit norm are rejected by matching.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// Matches between two keypoint sets; every index appears at most once.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    /// True when produced by mutual nearest-neighbour filtering.
    pub mutual: bool,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// The same matches with the roles of the two sets swapped, sorted by `a`.
    pub fn transposed(&self) -> MatchSet {
        let mut matches: Vec<Match> = self
            .matches
            .iter()
            .map(|m| Match {
                a: m.b,
                b: m.a,
                distance: m.distance,
            })
            .collect();
        matches.sort_by_key(|m| m.a);
        MatchSet {
            matches,
            mutual: self.mutual,
        }
    }

    /// One `idxA idxB distance` line per match.
    pub fn to_text(&self) -> String {
        self.matches
            .iter()
            .map(|m| format!("{} {} {:.6}\n", m.a, m.b, m.distance))
            .collect()
    }
}

/// A ratio together with the counts it was computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: usize,
    pub denominator: usize,
    /// `numerator / denominator`, or 0 when the denominator is 0.
    pub value: f64,
}

impl Ratio {
    pub fn new(numerator: usize, denominator: usize) -> Self {
        let value = if denominator == 0 {
            0.0
        } else {
            numerator as f64 / denominator as f64
        };
        Ratio {
            numerator,
            denominator,
            value,
        }
    }
}

fn check_unit(set: &[Keypoint], which: &str) -> Result<()> {
    for k in set {
        let norm = k.descriptor.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            log::debug!("set {which}: descriptor norm {norm}");
            return Err(Error::NotUnitNorm {
                norm,
                tolerance: UNIT_NORM_TOLERANCE,
            });
        }
    }
    Ok(())
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Index and distance of the nearest entry of `set` to `query`; ties go to the
/// lowest index.
fn nearest(query: &[f32], set: &[Keypoint]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, k) in set.iter().enumerate() {
        let d = distance(query, &k.descriptor);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Pairs `(a, b)` where each is the other's Euclidean nearest neighbour,
/// sorted by `a`.
pub fn mutual_nn_match(a: &KeypointSet, b: &KeypointSet) -> Result<MatchSet> {
    let (ka, kb) = (&a.keypoints, &b.keypoints);
    if ka.is_empty() || kb.is_empty() {
        return Ok(MatchSet {
            matches: Vec::new(),
            mutual: true,
        });
    }
    check_unit(ka, "A")?;
    check_unit(kb, "B")?;
    if let Some(k) = ka.iter().chain(kb).find(|k| k.descriptor.len() != ka[0].descriptor.len()) {
        return Err(Error::shape(
            "mutual_nn_match",
            format!("descriptor lengths {} and {}", ka[0].descriptor.len(), k.descriptor.len()),
        ));
    }
    let back: Vec<usize> = kb.iter().map(|k| nearest(&k.descriptor, ka).0).collect();
    let matches = ka
        .iter()
        .enumerate()
        .filter_map(|(i, k)| {
            let (j, d) = nearest(&k.descriptor, kb);
            (back[j] == i).then_some(Match { a: i, b: j, distance: d })
        })
        .collect();
    Ok(MatchSet { matches, mutual: true })
}

fn inside(p: (f64, f64), size: (usize, usize)) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= size.0 as f64 - 1.0 && p.1 <= size.1 as f64 - 1.0
}

fn dist2d(p: (f64, f64), q: (f64, f64)) -> f64 {
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

fn position(k: &Keypoint) -> (f64, f64) {
    (f64::from(k.x), f64::from(k.y))
}

/// Known geometry of an image pair: `homography` maps image-A pixels to
/// image-B pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGeometry {
    pub homography: Homography,
    /// `(width, height)` of image A.
    pub size_a: (usize, usize),
    /// `(width, height)` of image B.
    pub size_b: (usize, usize),
}

impl PairGeometry {
    pub fn new(homography: Homography, size_a: (usize, usize), size_b: (usize, usize)) -> Self {
        Self {
            homography,
            size_a,
            size_b,
        }
    }

    /// Same-size images related by the identity.
    pub fn identity(width: usize, height: usize) -> Self {
        Self::new(Homography::identity(), (width, height), (width, height))
    }
}

/// One-to-one geometric correspondences over `min(|A in shared region|, |B|)`.
///
/// A-keypoints are projected into B and only those landing inside image B
/// take part. Candidate pairs within `tol_px` are assigned greedily,
/// nearest first (ties by A then B index). Descriptors are ignored.
pub fn repeatability_score(a: &KeypointSet, b: &KeypointSet, geometry: &PairGeometry, tol_px: f64) -> Result<Ratio> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::InvalidArgument("repeatability of two empty keypoint sets is undefined".into()));
    }
    if !(tol_px >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol_px} must be >= 0")));
    }
    let projected: Vec<(f64, f64)> = a
        .keypoints
        .iter()
        .filter_map(|k| geometry.homography.apply(f64::from(k.x), f64::from(k.y)))
        .filter(|&p| inside(p, geometry.size_b))
        .collect();
    let mut candidates = Vec::new();
    for (i, &p) in projected.iter().enumerate() {
        for (j, k) in b.keypoints.iter().enumerate() {
            let d = dist2d(p, position(k));
            if d <= tol_px {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; projected.len()];
    let mut used_b = vec![false; b.len()];
    let mut count = 0;
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            count += 1;
        }
    }
    Ok(Ratio::new(count, projected.len().min(b.len())))
}

/// MMA at each threshold, with the counts behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmaCurve {
    pub thresholds: Vec<f64>,
    pub ratios: Vec<Ratio>,
}

impl MmaCurve {
    /// Ratio at the exact threshold `t`, if it was evaluated.
    pub fn at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|&x| x == t).map(|i| self.ratios[i].value)
    }
}

/// Reprojection error `‖H(a) − b‖` of each match; `None` where `H` is
/// undefined at `a`.
pub fn reprojection_errors(matches: &MatchSet, a: &KeypointSet, b: &KeypointSet, h: &Homography) -> Result<Vec<Option<f64>>> {
    matches
        .matches
        .iter()
        .map(|m| {
            let (ka, kb) = match (a.keypoints.get(m.a), b.keypoints.get(m.b)) {
                (Some(ka), Some(kb)) => (ka, kb),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "match ({}, {}) out of range for sets of {} and {}",
                        m.a,
                        m.b,
                        a.len(),
                        b.len()
                    )))
                }
            };
            Ok(h.apply(f64::from(ka.x), f64::from(ka.y)).map(|p| dist2d(p, position(kb))))
        })
        .collect()
}

/// Fraction of matches with reprojection error at most each threshold.
/// Matches where `H` is undefined are dropped; no matches gives 0.
pub fn mma(matches: &MatchSet, a: &KeypointSet, b: &KeypointSet, h: &Homography, thresholds: &[f64]) -> Result<MmaCurve> {
    let errors: Vec<f64> = reprojection_errors(matches, a, b, h)?.into_iter().flatten().collect();
    let ratios = thresholds
        .iter()
        .map(|&t| Ratio::new(errors.iter().filter(|&&e| e <= t).count(), errors.len()))
        .collect();
    Ok(MmaCurve {
        thresholds: thresholds.to_vec(),
        ratios,
    })
}

/// Matching score in both directions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingScore {
    /// Correct matches over A-features whose projection lies in image B.
    pub forward: Ratio,
    /// Correct matches over B-features whose back-projection lies in image A.
    pub backward: Ratio,
    /// Mean of both directions; `None` (skipped) when either shared region
    /// is empty.
    pub value: Option<f64>,
}

fn directional_score(
    matches: &[(usize, usize)],
    from: &KeypointSet,
    to: &KeypointSet,
    h: &Homography,
    to_size: (usize, usize),
    tol_px: f64,
) -> Ratio {
    let projected: Vec<Option<(f64, f64)>> = from
        .keypoints
        .iter()
        .map(|k| h.apply(f64::from(k.x), f64::from(k.y)).filter(|&p| inside(p, to_size)))
        .collect();
    let shared = projected.iter().flatten().count();
    let correct = matches
        .iter()
        .filter(|&&(i, j)| projected[i].is_some_and(|p| dist2d(p, position(&to.keypoints[j])) <= tol_px))
        .count();
    Ratio::new(correct, shared)
}

/// Mutual-NN matching followed by counting geometrically correct matches in
/// each direction; the backward direction uses the exact inverse homography.
pub fn matching_score(a: &KeypointSet, b: &KeypointSet, geometry: &PairGeometry, tol_px: f64) -> Result<MatchingScore> {
    let matches = mutual_nn_match(a, b)?;
    matching_score_with(&matches, a, b, geometry, tol_px)
}

/// [`matching_score`] on precomputed mutual matches.
pub fn matching_score_with(
    matches: &MatchSet,
    a: &KeypointSet,
    b: &KeypointSet,
    geometry: &PairGeometry,
    tol_px: f64,
) -> Result<MatchingScore> {
    if !(tol_px >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol_px} must be >= 0")));
    }
    if let Some(m) = matches.matches.iter().find(|m| m.a >= a.len() || m.b >= b.len()) {
        return Err(Error::InvalidArgument(format!("match ({}, {}) out of range", m.a, m.b)));
    }
    let inverse = geometry.homography.inverse()?;
    let ab: Vec<(usize, usize)> = matches.matches.iter().map(|m| (m.a, m.b)).collect();
    let ba: Vec<(usize, usize)> = ab.iter().map(|&(i, j)| (j, i)).collect();
    let forward = directional_score(&ab, a, b, &geometry.homography, geometry.size_b, tol_px);
    let backward = directional_score(&ba, b, a, &inverse, geometry.size_a, tol_px);
    let value = (forward.denominator > 0 && backward.denominator > 0).then_some(0.5 * (forward.value + backward.value));
    Ok(MatchingScore { forward, backward, value })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// MMA thresholds in pixels.
    pub thresholds: Vec<f64>,
    /// Tolerance for repeatability correspondences.
    pub repeatability_tolerance: f64,
    /// Tolerance for a match to count as correct in the matching score.
    pub matching_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: (1..=10).map(f64::from).collect(),
            repeatability_tolerance: 3.0,
            matching_tolerance: 3.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidArgument("at least one MMA threshold is required".into()));
        }
        for &t in self.thresholds.iter().chain([&self.repeatability_tolerance, &self.matching_tolerance]) {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::InvalidArgument(format!("pixel threshold {t} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// All metrics for one image pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub matches: usize,
    /// `None` when both sets are empty.
    pub repeatability: Option<Ratio>,
    pub mma: MmaCurve,
    pub matching_score: MatchingScore,
}

pub fn evaluate_pair(a: &KeypointSet, b: &KeypointSet, geometry: &PairGeometry, cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.validate()?;
    let matches = mutual_nn_match(a, b)?;
    let repeatability = if a.is_empty() && b.is_empty() {
        None
    } else {
        Some(repeatability_score(a, b, geometry, cfg.repeatability_tolerance)?)
    };
    Ok(EvalResult {
        keypoints_a: a.len(),
        keypoints_b: b.len(),
        matches: matches.len(),
        repeatability,
        mma: mma(&matches, a, b, &geometry.homography, &cfg.thresholds)?,
        matching_score: matching_score_with(&matches, a, b, geometry, cfg.matching_tolerance)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dir: usize) -> Vec<f32> {
        let mut d = vec![0.0; 4];
        d[dir] = 1.0;
        d
    }

    fn kp(x: f32, y: f32, descriptor: Vec<f32>) -> Keypoint {
        Keypoint {
            x,
            y,
            scale: 1.0,
            score: 1.0,
            descriptor,
        }
    }

    fn set(points: &[(f32, f32)]) -> KeypointSet {
        KeypointSet {
            keypoints: points.iter().enumerate().map(|(i, &(x, y))| kp(x, y, unit(i % 4))).collect(),
            width: 100,
            height: 100,
        }
    }

    /// Unit vector at angle `t` in the plane of the first two axes.
    fn planar(t: f64) -> Vec<f32> {
        let mut d = vec![0.0; 4];
        d[0] = t.cos() as f32;
        d[1] = t.sin() as f32;
        d
    }

    #[test]
    fn identical_sets_match_identically() {
        let a = set(&[(1.0, 1.0), (5.0, 5.0), (9.0, 2.0), (3.0, 7.0)]);
        let m = mutual_nn_match(&a, &a).unwrap();
        assert_eq!(m.matches.iter().map(|m| (m.a, m.b)).collect::<Vec<_>>(), [(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn non_mutual_pair_is_excluded() {
        // a0 at 0, a1 at 0.5 rad; b0 at 0.3 rad. a0's nearest is b0, but b0's
        // nearest is a1.
        let mk = |angles: &[f64]| KeypointSet {
            keypoints: angles.iter().map(|&t| kp(0.0, 0.0, planar(t))).collect(),
            width: 10,
            height: 10,
        };
        let a = mk(&[0.0, 0.5]);
        let b = mk(&[0.3]);
        let brute: Vec<(usize, usize)> = (0..2)
            .flat_map(|i| (0..1).map(move |j| (i, j)))
            .filter(|&(i, j)| {
                let d = |p: usize, q: usize| distance(&a.keypoints[p].descriptor, &b.keypoints[q].descriptor);
                (0..1).all(|q| d(i, j) <= d(i, q)) && (0..2).all(|p| d(i, j) <= d(p, j))
            })
            .collect();
        assert_eq!(brute, [(1, 0)]);
        let m = mutual_nn_match(&a, &b).unwrap();
        assert_eq!(m.matches.iter().map(|m| (m.a, m.b)).collect::<Vec<_>>(), brute);
        assert_eq!(mutual_nn_match(&b, &a).unwrap(), m.transposed());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let a = KeypointSet {
            keypoints: vec![kp(0.0, 0.0, unit(0))],
            width: 1,
            height: 1,
        };
        let b = KeypointSet {
            keypoints: vec![kp(0.0, 0.0, unit(1)), kp(0.0, 0.0, unit(2))],
            width: 1,
            height: 1,
        };
        let m = mutual_nn_match(&a, &b).unwrap();
        assert_eq!((m.matches[0].a, m.matches[0].b), (0, 0));
    }

    #[test]
    fn empty_side_gives_no_matches() {
        let a = set(&[(1.0, 1.0)]);
        assert!(mutual_nn_match(&a, &KeypointSet::default()).unwrap().is_empty());
    }

    #[test]
    fn non_unit_descriptors_rejected() {
        let mut a = set(&[(1.0, 1.0)]);
        a.keypoints[0].descriptor = vec![0.5, 0.0, 0.0, 0.0];
        assert!(matches!(mutual_nn_match(&a, &a), Err(Error::NotUnitNorm { .. })));
    }

    #[test]
    fn repeatability_two_of_three() {
        let a = set(&[(10.0, 10.0), (30.0, 30.0), (60.0, 60.0)]);
        // b0, b1 both near a0 (only one may pair with it), b2 near a1, b3 far.
        let b = set(&[(11.0, 10.0), (10.0, 12.0), (31.0, 31.0), (90.0, 5.0)]);
        let r = repeatability_score(&a, &b, &PairGeometry::identity(100, 100), 3.0).unwrap();
        assert_eq!((r.numerator, r.denominator), (2, 3));
        assert_eq!(r.value, 2.0 / 3.0);
    }

    #[test]
    fn repeatability_edge_cases() {
        let g = PairGeometry::identity(100, 100);
        let a = set(&[(10.0, 10.0), (50.0, 50.0)]);
        assert_eq!(repeatability_score(&a, &a, &g, 3.0).unwrap().value, 1.0);
        let far = set(&[(80.0, 10.0), (10.0, 80.0)]);
        assert_eq!(repeatability_score(&a, &far, &g, 3.0).unwrap().value, 0.0);
        assert_eq!(repeatability_score(&a, &KeypointSet::default(), &g, 3.0).unwrap().value, 0.0);
        assert!(repeatability_score(&KeypointSet::default(), &KeypointSet::default(), &g, 3.0).is_err());
    }

    #[test]
    fn repeatability_counts_only_shared_region() {
        // Shift by 50: a1 lands outside the 100-wide image B.
        let g = PairGeometry::new(Homography::translation(50.0, 0.0), (100, 100), (100, 100));
        let a = set(&[(10.0, 10.0), (70.0, 10.0)]);
        let b = set(&[(60.0, 10.0), (20.0, 20.0), (30.0, 30.0)]);
        let r = repeatability_score(&a, &b, &g, 3.0).unwrap();
        assert_eq!((r.numerator, r.denominator), (1, 1));
    }

    #[test]
    fn mma_three_of_four() {
        let a = set(&[(10.0, 10.0), (20.0, 20.0), (30.0, 30.0), (40.0, 40.0)]);
        let b = set(&[(10.5, 10.0), (20.0, 21.5), (32.5, 30.0), (40.0, 49.0)]);
        let m = MatchSet {
            matches: (0..4).map(|i| Match { a: i, b: i, distance: 0.0 }).collect(),
            mutual: true,
        };
        let curve = mma(&m, &a, &b, &Homography::identity(), &[0.4, 1.0, 2.0, 3.0, 10.0]).unwrap();
        let values: Vec<f64> = curve.ratios.iter().map(|r| r.value).collect();
        assert_eq!(values, [0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(curve.at(3.0), Some(0.75));
        let empty = mma(&MatchSet::default(), &a, &b, &Homography::identity(), &[3.0]).unwrap();
        assert_eq!(empty.ratios[0].value, 0.0);
    }

    /// 10 features per image at identical positions; descriptors pair up
    /// a_i with b_i for i < 6, but only 4 of those pairs are geometrically
    /// correct.
    #[test]
    fn matching_score_four_of_ten() {
        let positions: Vec<(f32, f32)> = (0..10).map(|i| (5.0 + 9.0 * i as f32, 50.0)).collect();
        let mk = |descriptor_of: &dyn Fn(usize) -> Vec<f32>, swap: bool| KeypointSet {
            keypoints: (0..10)
                .map(|i| {
                    // Swap positions 4 <-> 5 in B so those matches are wrong.
                    let p = if swap && (i == 4 || i == 5) { positions[9 - i] } else { positions[i] };
                    kp(p.0, p.1, descriptor_of(i))
                })
                .collect(),
            width: 100,
            height: 100,
        };
        let dim = 16;
        let desc = |i: usize| {
            let mut d = vec![0.0; dim];
            d[i] = 1.0;
            d
        };
        // A keypoints 6..9 use axes 12..15, unused by B.
        let a = mk(&|i| if i < 6 { desc(i) } else { desc(i + 6) }, false);
        let b = mk(&desc, true);
        let score = matching_score(&a, &b, &PairGeometry::identity(100, 100), 3.0).unwrap();
        assert_eq!((score.forward.numerator, score.forward.denominator), (4, 10));
        assert_eq!((score.backward.numerator, score.backward.denominator), (4, 10));
        assert_eq!(score.value, Some(0.4));
    }

    #[test]
    fn matching_score_skips_empty_shared_region() {
        let g = PairGeometry::new(Homography::translation(500.0, 0.0), (100, 100), (100, 100));
        let a = set(&[(10.0, 10.0)]);
        let s = matching_score(&a, &a, &g, 3.0).unwrap();
        assert_eq!(s.value, None);
        assert_eq!(s.forward.denominator, 0);
    }

    #[test]
    fn perfect_pipeline_scores_one() {
        let a = set(&[(10.0, 10.0), (50.0, 50.0), (80.0, 20.0)]);
        let r = evaluate_pair(&a, &a, &PairGeometry::identity(100, 100), &EvalConfig::default()).unwrap();
        assert_eq!(r.repeatability.unwrap().value, 1.0);
        assert_eq!(r.matching_score.value, Some(1.0));
        assert!(r.mma.ratios.iter().all(|x| x.value == 1.0));
    }
}
