use crate::autodiff::{CustomOp, Tape, Var};
use crate::datagen::CorrespondenceField;
use crate::error::{Error, Result};
use crate::kernels::{bilinear_taps, scatter_window_coefficients, window_count};
use crate::tensor::{Scalar, Tensor};

use super::LossConfig;

fn map_dims<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        ref s => Err(Error::shape(op, format!("expected an H×W map, got {s:?}"))),
    }
}

/// Sums of `values` over every `size × size` window at `stride`, computed
/// directly (rows then columns) so all-zero windows sum to exactly zero.
fn window_sums(values: &[f64], h: usize, w: usize, size: usize, stride: usize) -> Vec<f64> {
    let (oh, ow) = (window_count(h, size, stride), window_count(w, size, stride));
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &values[y * w..(y + 1) * w];
        for ox in 0..ow {
            rows[y * ow + ox] = line[ox * stride..ox * stride + size].iter().sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (oy * stride..oy * stride + size).map(|y| rows[y * ow + ox]).sum();
        }
    }
    out
}

/// Cached per-patch factors of the masked cosine.
struct PatchCosine {
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
    mask: Vec<bool>,
    /// `1 / (‖a‖·‖b‖)` per patch, 0 for skipped or degenerate patches.
    inv_norms: Vec<f64>,
    /// `cos / ‖a‖²` and `cos / ‖b‖²`.
    cos_over_aa: Vec<f64>,
    cos_over_bb: Vec<f64>,
    /// `1 / |P|` over patches with at least one valid pixel.
    inv_count: f64,
}

impl<T: Scalar> CustomOp<T> for PatchCosine {
    fn name(&self) -> &'static str {
        "patch_cosine_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.item().as_f64() * -self.inv_count;
        let (oh, ow) = (window_count(self.h, self.size, self.stride), window_count(self.w, self.size, self.stride));
        let scatter = |coef: &[f64]| scatter_window_coefficients(self.h, self.w, self.size, self.stride, oh, ow, coef);
        let cross = scatter(&self.inv_norms);
        let masked = |t: &Tensor<T>, i: usize| if self.mask[i] { t.data()[i].as_f64() } else { 0.0 };
        let mut grads = vec![None, None];
        for (k, own) in [(0usize, &self.cos_over_aa), (1, &self.cos_over_bb)] {
            if !needs[k] {
                continue;
            }
            let self_term = scatter(own);
            let (mine, other) = (inputs[k], inputs[1 - k]);
            let data = (0..self.h * self.w)
                .map(|i| T::lit(g * (masked(other, i) * cross[i] - masked(mine, i) * self_term[i])))
                .collect();
            grads[k] = Some(Tensor::new([self.h, self.w], data)?);
        }
        Ok(grads)
    }
}

/// `1 − mean cos(a_p, b_p)` over all `size × size` patches `p` at `stride`,
/// with both patches multiplied by the validity mask. Patches without any
/// valid pixel are skipped; a patch with a zero-norm side has cosine 0.
pub fn cosim_loss<T: Scalar>(
    tape: &mut Tape<T>,
    s: Var,
    s_warped: Var,
    valid: &[bool],
    size: usize,
    stride: usize,
) -> Result<Var> {
    let (h, w) = map_dims("cosim_loss", tape.value(s))?;
    if tape.value(s_warped).shape() != [h, w] || valid.len() != h * w {
        return Err(Error::shape(
            "cosim_loss",
            format!(
                "heatmaps {:?} / {:?}, mask of {}",
                tape.value(s).shape(),
                tape.value(s_warped).shape(),
                valid.len()
            ),
        ));
    }
    if size == 0 || stride == 0 || size > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} (stride {stride}) does not fit a {h}×{w} map"
        )));
    }
    let a: Vec<f64> = tape.value(s).data().iter().zip(valid).map(|(v, &m)| if m { v.as_f64() } else { 0.0 }).collect();
    let b: Vec<f64> = tape
        .value(s_warped)
        .data()
        .iter()
        .zip(valid)
        .map(|(v, &m)| if m { v.as_f64() } else { 0.0 })
        .collect();
    let mask_f: Vec<f64> = valid.iter().map(|&m| m as u8 as f64).collect();
    let sq = |x: &[f64]| x.iter().map(|v| v * v).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let aa = window_sums(&sq(&a), h, w, size, stride);
    let bb = window_sums(&sq(&b), h, w, size, stride);
    let ab = window_sums(&prod, h, w, size, stride);
    let counts = window_sums(&mask_f, h, w, size, stride);

    let n = aa.len();
    let (mut inv_norms, mut cos_over_aa, mut cos_over_bb) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut used, mut cos_sum) = (0usize, 0.0);
    for p in 0..n {
        if counts[p] == 0.0 {
            continue;
        }
        used += 1;
        if aa[p] == 0.0 || bb[p] == 0.0 {
            continue;
        }
        let inv = 1.0 / (aa[p].sqrt() * bb[p].sqrt());
        let cos = ab[p] * inv;
        cos_sum += cos;
        inv_norms[p] = inv;
        cos_over_aa[p] = cos / aa[p];
        cos_over_bb[p] = cos / bb[p];
    }
    if used == 0 {
        return Err(Error::UnusablePair("no patch contains a valid pixel".into()));
    }
    let inv_count = 1.0 / used as f64;
    let value = Tensor::scalar(T::lit(1.0 - cos_sum * inv_count));
    let op = PatchCosine {
        h,
        w,
        size,
        stride,
        mask: valid.to_vec(),
        inv_norms,
        cos_over_aa,
        cos_over_bb,
        inv_count,
    };
    Ok(tape.custom(&[s, s_warped], value, Box::new(op)))
}

/// `1 − mean(max − mean)` over all `size × size` patches at `stride`.
pub fn peakiness_loss<T: Scalar>(tape: &mut Tape<T>, s: Var, size: usize, stride: usize) -> Result<Var> {
    map_dims("peakiness_loss", tape.value(s))?;
    let max = tape.max_over_window(s, size, stride)?;
    let avg = tape.avg_over_window(s, size, stride)?;
    let gap = tape.sub(max, avg)?;
    let mean_gap = tape.mean(gap);
    Ok(tape.affine(mean_gap, -1.0, 1.0))
}

struct GridSample {
    source_len: usize,
    source_shape: [usize; 2],
    /// `(output index, taps)` for every sampled pixel.
    taps: Vec<(usize, [(usize, f64); 4])>,
}

impl<T: Scalar> CustomOp<T> for GridSample {
    fn name(&self) -> &'static str {
        "grid_sample"
    }

    fn backward(&self, _in: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = vec![T::zero(); self.source_len];
        for (p, taps) in &self.taps {
            let gp = grad.data()[*p];
            for &(i, w) in taps {
                g[i] += T::lit(w) * gp;
            }
        }
        Ok(vec![Some(Tensor::new(self.source_shape.to_vec(), g)?)])
    }
}

/// Samples the image-2 heatmap at every image-1 pixel's target. Returns the
/// warped map and its validity mask (invalid pixels hold 0).
pub fn warp_heatmap<T: Scalar>(tape: &mut Tape<T>, s2: Var, field: &CorrespondenceField) -> Result<(Var, Vec<bool>)> {
    let (h2, w2) = map_dims("warp_heatmap", tape.value(s2))?;
    if field.target_size() != (w2, h2) {
        return Err(Error::shape(
            "warp_heatmap",
            format!("field targets {:?} but heatmap is {w2}×{h2}", field.target_size()),
        ));
    }
    let (w1, h1) = (field.width(), field.height());
    let src = tape.value(s2).data();
    let mut out = vec![T::zero(); w1 * h1];
    let mut taps_all = Vec::new();
    let mut mask = vec![false; w1 * h1];
    for (p, (t, &v)) in field.targets().iter().zip(field.valid()).enumerate() {
        if !v {
            continue;
        }
        let Some(taps) = bilinear_taps(t[0], t[1], w2, h2) else { continue };
        out[p] = taps.iter().fold(T::zero(), |acc, &(i, w)| acc + T::lit(w) * src[i]);
        mask[p] = true;
        taps_all.push((p, taps));
    }
    let op = GridSample {
        source_len: w2 * h2,
        source_shape: [h2, w2],
        taps: taps_all,
    };
    let var = tape.custom(&[s2], Tensor::new([h1, w1], out)?, Box::new(op));
    Ok((var, mask))
}

/// The three repeatability terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct RepeatabilityTerms {
    pub cosim: Var,
    pub peaky1: Var,
    pub peaky2: Var,
    pub total: Var,
}

/// `cosim(S, S′ warped by U) + λ·(peaky(S) + peaky(S′))`.
pub fn repeatability_loss<T: Scalar>(
    tape: &mut Tape<T>,
    s1: Var,
    s2: Var,
    field: &CorrespondenceField,
    cfg: &LossConfig,
) -> Result<RepeatabilityTerms> {
    cfg.validate()?;
    let (warped, mask) = warp_heatmap(tape, s2, field)?;
    let cosim = cosim_loss(tape, s1, warped, &mask, cfg.patch_size, cfg.patch_stride)?;
    let peaky1 = peakiness_loss(tape, s1, cfg.patch_size, cfg.patch_stride)?;
    let peaky2 = peakiness_loss(tape, s2, cfg.patch_size, cfg.patch_stride)?;
    let both = tape.add(peaky1, peaky2)?;
    let weighted = tape.affine(both, cfg.peaky_weight, 0.0);
    let total = tape.add(cosim, weighted)?;
    Ok(RepeatabilityTerms {
        cosim,
        peaky1,
        peaky2,
        total,
    })
}
