use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Guard on the cumulative bin mass in the precision ratio.
const MASS_EPS: f64 = 1e-8;
/// Maximum deviation of a descriptor norm from 1.
const NORM_TOLERANCE: f64 = 1e-3;
/// Squared distances below this are treated as zero (no gradient).
const MIN_SQUARED_DISTANCE: f64 = 1e-12;

/// Relevance of one database entry to one query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApLabel {
    Positive,
    Negative,
    /// Excluded from this query's ranking.
    Ignored,
}

/// Mean over positive ranks `k` of (positives among the first `k`) / `k`.
pub fn exact_ap(ranked: &[bool]) -> Result<f64> {
    let (mut hits, mut sum) = (0usize, 0.0);
    for (i, &pos) in ranked.iter().enumerate() {
        if pos {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoPositives);
    }
    Ok(sum / hits as f64)
}

/// Ranks by ascending distance, ties by ascending index, then [`exact_ap`].
pub fn exact_ap_from_distances(distances: &[f64], positives: &[bool]) -> Result<f64> {
    if distances.len() != positives.len() {
        return Err(Error::shape("exact_ap", format!("{} distances, {} labels", distances.len(), positives.len())));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let ranked: Vec<bool> = order.iter().map(|&i| positives[i]).collect();
    exact_ap(&ranked)
}

/// Triangular soft assignment of `d` to bins centered at `m·Δ`.
fn bin_weights(d: f64, bins: usize, delta: f64) -> impl Iterator<Item = (usize, f64, f64)> {
    let base = (d / delta).floor().clamp(0.0, (bins - 1) as f64) as usize;
    let lo = base.saturating_sub(1);
    let hi = (base + 1).min(bins - 1);
    (lo..=hi).filter_map(move |m| {
        let offset = d - m as f64 * delta;
        let w = 1.0 - offset.abs() / delta;
        // Weight and its derivative with respect to `d`.
        (w > 0.0).then(|| (m, w, -offset.signum() / delta))
    })
}

/// Quantized AP and, optionally, its gradient with respect to every
/// distance (zero for ignored entries).
fn soft_ap_core(distances: &[f64], labels: &[ApLabel], bins: usize, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    let delta = 2.0 / (bins - 1) as f64;
    let mut mass = vec![0.0; bins];
    let mut pos_mass = vec![0.0; bins];
    let mut positives = 0usize;
    for (&d, &label) in distances.iter().zip(labels) {
        if label == ApLabel::Ignored {
            continue;
        }
        let is_pos = label == ApLabel::Positive;
        positives += is_pos as usize;
        for (m, w, _) in bin_weights(d, bins, delta) {
            mass[m] += w;
            if is_pos {
                pos_mass[m] += w;
            }
        }
    }
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let p = positives as f64;
    let (mut cum, mut cum_pos) = (vec![0.0; bins], vec![0.0; bins]);
    let (mut c, mut cp) = (0.0, 0.0);
    for m in 0..bins {
        c += mass[m];
        cp += pos_mass[m];
        cum[m] = c;
        cum_pos[m] = cp;
    }
    let guarded = |m: usize| cum[m].max(MASS_EPS);
    let ap: f64 = (0..bins).map(|m| cum_pos[m] / guarded(m) * pos_mass[m]).sum::<f64>() / p;
    if !want_grad {
        return Ok((ap, Vec::new()));
    }

    // ∂AP/∂h⁺_j = (r_j + Σ_{m≥j} h⁺_m / H_m) / P and
    // ∂AP/∂h_j = −Σ_{m≥j} h⁺_m·H⁺_m / H_m² / P, with r_j = H⁺_j / H_j.
    let mut d_pos = vec![0.0; bins];
    let mut d_all = vec![0.0; bins];
    let (mut suffix_pos, mut suffix_all) = (0.0, 0.0);
    for m in (0..bins).rev() {
        suffix_pos += pos_mass[m] / guarded(m);
        if cum[m] > MASS_EPS {
            suffix_all += pos_mass[m] * cum_pos[m] / (cum[m] * cum[m]);
        }
        d_pos[m] = (cum_pos[m] / guarded(m) + suffix_pos) / p;
        d_all[m] = -suffix_all / p;
    }
    let grads = distances
        .iter()
        .zip(labels)
        .map(|(&d, &label)| match label {
            ApLabel::Ignored => 0.0,
            _ => bin_weights(d, bins, delta)
                .map(|(m, _, dw)| {
                    let up = d_all[m] + if label == ApLabel::Positive { d_pos[m] } else { 0.0 };
                    up * dw
                })
                .sum(),
        })
        .collect();
    Ok((ap, grads))
}

/// Differentiable AP approximation from distances in `[0, 2]`, using
/// `bins` triangular bins.
pub fn soft_ap(distances: &[f64], positives: &[bool], bins: usize) -> Result<f64> {
    if distances.len() != positives.len() {
        return Err(Error::shape("soft_ap", format!("{} distances, {} labels", distances.len(), positives.len())));
    }
    let labels: Vec<ApLabel> = positives
        .iter()
        .map(|&p| if p { ApLabel::Positive } else { ApLabel::Negative })
        .collect();
    Ok(soft_ap_core(distances, &labels, bins, false)?.0)
}

fn check_unit_norm(v: &[f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::NotUnitNorm {
            norm,
            tolerance: NORM_TOLERANCE,
        });
    }
    Ok(())
}

/// [`soft_ap`] on unit-norm descriptors; rejects non-unit inputs.
pub fn soft_ap_descriptors(query: &[f64], database: &[Vec<f64>], positives: &[bool], bins: usize) -> Result<f64> {
    check_unit_norm(query)?;
    let mut distances = Vec::with_capacity(database.len());
    for d in database {
        if d.len() != query.len() {
            return Err(Error::shape("soft_ap", format!("descriptor dims {} vs {}", d.len(), query.len())));
        }
        check_unit_norm(d)?;
        distances.push(query.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
    }
    soft_ap(&distances, positives, bins)
}

/// `1 − (ap·R + κ·(1 − R))`.
pub fn ap_kappa_loss(ap: f64, reliability: f64, kappa: f64) -> Result<f64> {
    for (name, v) in [("ap", ap), ("reliability", reliability), ("kappa", kappa)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(1.0 - (ap * reliability + kappa * (1.0 - reliability)))
}

fn rows_of<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::shape(op, format!("expected an N×D matrix, got {s:?}"))),
    }
}

struct PairwiseDistance {
    /// `∂D/∂(q·d)` scale per entry: `1 / D`, or 0 at the singularity.
    inv: Vec<f64>,
}

impl<T: Scalar> CustomOp<T> for PairwiseDistance {
    fn name(&self) -> &'static str {
        "pairwise_distance"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, db) = (inputs[0], inputs[1]);
        let (nq, dim) = rows_of("pairwise_distance", q)?;
        let nd = db.shape()[0];
        // W_ij = g_ij / D_ij; dQ = diag(W·1)·Q − W·Db; dDb = diag(Wᵀ·1)·Db − Wᵀ·Q.
        let w: Vec<T> = grad.data().iter().zip(&self.inv).map(|(&g, &s)| g * T::lit(s)).collect();
        let mut out = vec![None, None];
        if needs[0] {
            let mut dq = vec![T::zero(); nq * dim];
            gemm(MatRef::new(&w, nq, nd), MatRef::new(db.data(), nd, dim), &mut dq, false);
            for i in 0..nq {
                let row_sum = w[i * nd..(i + 1) * nd].iter().fold(T::zero(), |a, &b| a + b);
                for k in 0..dim {
                    dq[i * dim + k] = row_sum * q.data()[i * dim + k] - dq[i * dim + k];
                }
            }
            out[0] = Some(Tensor::new([nq, dim], dq)?);
        }
        if needs[1] {
            let mut dd = vec![T::zero(); nd * dim];
            gemm(MatRef::transposed(&w, nd, nq), MatRef::new(q.data(), nq, dim), &mut dd, false);
            for j in 0..nd {
                let col_sum = (0..nq).fold(T::zero(), |a, i| a + w[i * nd + j]);
                for k in 0..dim {
                    dd[j * dim + k] = col_sum * db.data()[j * dim + k] - dd[j * dim + k];
                }
            }
            out[1] = Some(Tensor::new([nd, dim], dd)?);
        }
        Ok(out)
    }
}

/// Euclidean distances `[nq, nd]` between unit-norm rows of `query` and
/// `database`.
pub fn pairwise_distances<T: Scalar>(tape: &mut Tape<T>, query: Var, database: Var) -> Result<Var> {
    let (q, db) = (tape.value(query), tape.value(database));
    let (nq, dim) = rows_of("pairwise_distance", q)?;
    let (nd, dim2) = rows_of("pairwise_distance", db)?;
    if dim != dim2 {
        return Err(Error::shape("pairwise_distance", format!("descriptor dims {dim} vs {dim2}")));
    }
    let sq_norms = |t: &Tensor<T>, n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|i| {
                let s: f64 = t.data()[i * dim..(i + 1) * dim].iter().map(|v| v.as_f64() * v.as_f64()).sum();
                check_unit_norm_sq(s)?;
                Ok(s)
            })
            .collect()
    };
    let qn = sq_norms(q, nq)?;
    let dn = sq_norms(db, nd)?;
    let mut dots = vec![T::zero(); nq * nd];
    gemm(MatRef::new(q.data(), nq, dim), MatRef::transposed(db.data(), dim, nd), &mut dots, false);
    let mut dist = Vec::with_capacity(nq * nd);
    let mut inv = Vec::with_capacity(nq * nd);
    for i in 0..nq {
        for j in 0..nd {
            let sq = qn[i] + dn[j] - 2.0 * dots[i * nd + j].as_f64();
            if sq > MIN_SQUARED_DISTANCE {
                let d = sq.sqrt();
                dist.push(T::lit(d));
                inv.push(1.0 / d);
            } else {
                dist.push(T::lit(sq.max(0.0).sqrt()));
                inv.push(0.0);
            }
        }
    }
    let value = Tensor::new([nq, nd], dist)?;
    Ok(tape.custom(&[query, database], value, Box::new(PairwiseDistance { inv })))
}

fn check_unit_norm_sq(sq: f64) -> Result<()> {
    let norm = sq.sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::NotUnitNorm {
            norm,
            tolerance: NORM_TOLERANCE,
        });
    }
    Ok(())
}

struct SoftApRows {
    /// `∂AP_i/∂D_ij`, row-major.
    jacobian: Vec<f64>,
    cols: usize,
}

impl<T: Scalar> CustomOp<T> for SoftApRows {
    fn name(&self) -> &'static str {
        "soft_ap"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let data = self
            .jacobian
            .iter()
            .enumerate()
            .map(|(k, &j)| T::lit(j * grad.data()[k / self.cols].as_f64()))
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }
}

/// Row-wise soft AP of a distance matrix `[nq, nd]` under `labels`
/// (row-major, one per entry). Output `[nq]`.
pub fn soft_ap_tape<T: Scalar>(tape: &mut Tape<T>, distances: Var, labels: &[ApLabel], bins: usize) -> Result<Var> {
    let dist = tape.value(distances);
    let (nq, nd) = rows_of("soft_ap", dist)?;
    if labels.len() != nq * nd {
        return Err(Error::shape("soft_ap", format!("{} labels for a {nq}×{nd} matrix", labels.len())));
    }
    let d64: Vec<f64> = dist.data().iter().map(|v| v.as_f64()).collect();
    let mut aps = Vec::with_capacity(nq);
    let mut jacobian = Vec::with_capacity(nq * nd);
    for i in 0..nq {
        let (ap, g) = soft_ap_core(&d64[i * nd..(i + 1) * nd], &labels[i * nd..(i + 1) * nd], bins, true)?;
        aps.push(T::lit(ap));
        jacobian.extend(g);
    }
    let value = Tensor::new([nq], aps)?;
    Ok(tape.custom(&[distances], value, Box::new(SoftApRows { jacobian, cols: nd })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_ap_hand_values() {
        assert_eq!(exact_ap(&[true, false, false]).unwrap(), 1.0);
        assert_eq!(exact_ap(&[false, true]).unwrap(), 0.5);
        assert!((exact_ap(&[true, false, true]).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(matches!(exact_ap(&[false, false]), Err(Error::NoPositives)));
    }

    #[test]
    fn exact_ap_breaks_ties_by_index() {
        // Equal distances: the lower index ranks first.
        assert_eq!(exact_ap_from_distances(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(exact_ap_from_distances(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn soft_ap_extremes() {
        let d = [0.0, 0.0, 2.0, 2.0, 2.0];
        let l = [true, true, false, false, false];
        assert!(soft_ap(&d, &l, 25).unwrap() >= 0.999);
        assert_eq!(exact_ap_from_distances(&d, &l).unwrap(), 1.0);
        for x in [0.0, 0.37, 1.0, 1.99, 2.0] {
            assert!((soft_ap(&[x], &[true], 25).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_ap_rejects_non_unit_descriptors() {
        let q = vec![1.0, 0.0];
        let db = vec![vec![0.0, 1.01]];
        assert!(matches!(soft_ap_descriptors(&q, &db, &[true], 25), Err(Error::NotUnitNorm { .. })));
        let db = vec![vec![0.0, 1.0]];
        let v = soft_ap_descriptors(&q, &db, &[true], 25).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_ap_tracks_exact_ap_on_ranked_instances() {
        // Distances evenly spaced over [0, 2], labels shuffled.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (mut sum, mut worst) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            let n = 20;
            let positives = rng.random_range(2..=5);
            let mut labels: Vec<bool> = (0..n).map(|i| i < positives).collect();
            labels.shuffle(&mut rng);
            let d: Vec<f64> = (0..n).map(|r| 2.0 * r as f64 / (n - 1) as f64).collect();
            let err = (soft_ap(&d, &labels, 25).unwrap() - exact_ap_from_distances(&d, &labels).unwrap()).abs();
            sum += err;
            worst = worst.max(err);
        }
        assert!(sum / 200.0 <= 0.05 && worst <= 0.15, "{} {}", sum / 200.0, worst);
    }

    #[test]
    fn gate_values() {
        assert_eq!(ap_kappa_loss(0.9, 0.0, 0.5).unwrap(), 0.5);
        assert!((ap_kappa_loss(0.3, 1.0, 0.5).unwrap() - 0.7).abs() < 1e-15);
        for r in [0.0, 0.25, 1.0] {
            assert!((ap_kappa_loss(0.5, r, 0.5).unwrap() - 0.5).abs() < 1e-15);
        }
        assert!(ap_kappa_loss(1.2, 0.5, 0.5).is_err());
    }

    #[test]
    fn soft_ap_gradient_matches_differences() {
        let d = [0.13, 0.41, 0.77, 0.95, 1.33, 1.61];
        let labels = [
            ApLabel::Negative,
            ApLabel::Positive,
            ApLabel::Ignored,
            ApLabel::Positive,
            ApLabel::Negative,
            ApLabel::Negative,
        ];
        let (_, g) = soft_ap_core(&d, &labels, 9, true).unwrap();
        let h = 1e-6;
        for k in 0..d.len() {
            let mut plus = d;
            plus[k] += h;
            let mut minus = d;
            minus[k] -= h;
            let num = (soft_ap_core(&plus, &labels, 9, false).unwrap().0 - soft_ap_core(&minus, &labels, 9, false).unwrap().0)
                / (2.0 * h);
            assert!((num - g[k]).abs() < 1e-6, "{k}: {num} vs {}", g[k]);
        }
        assert_eq!(g[2], 0.0);
    }
}
