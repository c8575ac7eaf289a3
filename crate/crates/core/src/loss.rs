//! Disparity and edge losses, deep supervision, and evaluation metrics.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{BceGrad, Graph, Op, Var};
use crate::ops::sampling::{PoolPlan, ResizePlan};
use crate::stereo::spatial_gradients_of;
use crate::tensor::{Scalar, Tensor};

/// Default weight of the edge-aware smoothness term.
pub const DEFAULT_LAMBDA_DS: f64 = 0.1;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

fn count_valid<T: Scalar>(mask: &Tensor<T>) -> usize {
    mask.data().iter().filter(|&&v| v > T::of(0.5)).count()
}

fn binary_mask<T: Scalar>(mask: &Tensor<T>) -> Tensor<T> {
    mask.map(|v| if v > T::of(0.5) { T::one() } else { T::zero() })
}

/// Mean absolute error over valid pixels.
pub fn regression_loss<T: Scalar>(
    g: &mut Graph<T>,
    d: Var,
    gt: &Tensor<T>,
    valid: &Tensor<T>,
) -> Result<Var> {
    if g.shape(d) != gt.shape() || gt.shape() != valid.shape() {
        return Err(Error::shape(
            "regression_loss",
            format!("{:?}, gt {:?}, mask {:?}", g.shape(d), gt.shape(), valid.shape()),
        ));
    }
    let n = count_valid(valid);
    if n == 0 {
        return Err(Error::Empty("regression_loss"));
    }
    let gt = g.constant(gt.clone());
    let mask = g.constant(binary_mask(valid));
    let diff = g.sub(d, gt)?;
    let err = g.abs(diff)?;
    let masked = g.mul(err, mask)?;
    let total = g.sum(masked)?;
    g.scale(total, 1.0 / n as f64)
}

/// Disparity smoothness weighted by `exp(-|grad E|)`. The edge map is a
/// constant: no gradient flows into it.
pub fn edge_aware_smoothness<T: Scalar>(
    g: &mut Graph<T>,
    d: Var,
    edge_map: &Tensor<T>,
) -> Result<Var> {
    if g.shape(d) != edge_map.shape() {
        return Err(Error::shape(
            "edge_aware_smoothness",
            format!("{:?} vs edge map {:?}", g.shape(d), edge_map.shape()),
        ));
    }
    let n = edge_map.len();
    let (ex, ey) = spatial_gradients_of(edge_map)?;
    let wx = g.constant(ex.map(|v| (-v.abs()).exp()));
    let wy = g.constant(ey.map(|v| (-v.abs()).exp()));
    let (dx, dy) = g.spatial_gradients(d)?;
    let ax = g.abs(dx)?;
    let ay = g.abs(dy)?;
    let tx = g.mul(ax, wx)?;
    let ty = g.mul(ay, wy)?;
    let sx = g.sum(tx)?;
    let sy = g.sum(ty)?;
    let total = g.add(sx, sy)?;
    g.scale(total, 1.0 / n as f64)
}

/// Class-balanced binary cross-entropy. Positives are weighted by the
/// fraction of negatives over the whole batch and vice versa.
pub fn class_balanced_bce<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    label: &Tensor<T>,
    ignore: Option<&Tensor<T>>,
) -> Result<Var> {
    let p = g.value(pred);
    if p.shape() != label.shape() || ignore.is_some_and(|m| m.shape() != label.shape()) {
        return Err(Error::shape(
            "class_balanced_bce",
            format!("prediction {:?}, label {:?}", p.shape(), label.shape()),
        ));
    }
    let keep = |i: usize| ignore.is_none_or(|m| m.data()[i] <= T::of(0.5));
    let n = (0..label.len()).filter(|&i| keep(i)).count();
    if n == 0 {
        return Err(Error::Empty("class_balanced_bce"));
    }
    let positives: T = (0..label.len())
        .filter(|&i| keep(i))
        .map(|i| label.data()[i])
        .sum();
    let nf = T::of(n as f64);
    let beta = (nf - positives) / nf;
    let one = T::one();
    let (lo, hi) = (T::of(BCE_CLAMP), T::of(1.0 - BCE_CLAMP));

    let mut loss = T::zero();
    let mut dpred = Vec::with_capacity(label.len());
    for (i, (&pv, &y)) in p.data().iter().zip(label.data()).enumerate() {
        if !keep(i) {
            dpred.push(T::zero());
            continue;
        }
        let pc = pv.max(lo).min(hi);
        loss = loss + beta * y * pc.ln() + (one - beta) * (one - y) * (one - pc).ln();
        let inside = pv > lo && pv < hi;
        dpred.push(if inside {
            -(beta * y / pc - (one - beta) * (one - y) / (one - pc)) / nf
        } else {
            T::zero()
        });
    }
    let value = Tensor::scalar(-loss / nf);
    let dpred = Tensor::new(label.shape(), dpred)?;
    g.push(Op::Bce(BceGrad { dpred }), vec![pred], value)
}

/// Per-scale ground truth for deep supervision.
#[derive(Clone, Debug)]
pub struct GroundTruthLevel<T> {
    pub disparity: Tensor<T>,
    pub valid: Tensor<T>,
}

/// Builds `levels` ground-truth scales from full resolution: each octave
/// averages 2x2 blocks, halves the disparity values, and keeps a pixel
/// valid only if all four contributing pixels were valid.
pub fn ground_truth_pyramid<T: Scalar>(
    gt: &Tensor<T>,
    valid: &Tensor<T>,
    levels: usize,
) -> Result<Vec<GroundTruthLevel<T>>> {
    if gt.shape() != valid.shape() {
        return Err(Error::shape(
            "ground_truth_pyramid",
            format!("{:?} vs {:?}", gt.shape(), valid.shape()),
        ));
    }
    let mut out = vec![GroundTruthLevel {
        disparity: gt.clone(),
        valid: binary_mask(valid),
    }];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        let [_, _, h, w] = prev.disparity.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "ground_truth_pyramid",
                format!("{h}x{w} cannot be halved"),
            ));
        }
        let plan = PoolPlan::fixed(h, w, 2, 2)?;
        let disparity = plan.forward(&prev.disparity)?.map(|v| v * T::of(0.5));
        // a block is valid iff its mean validity is exactly one
        let valid = plan
            .forward(&prev.valid)?
            .map(|v| if v >= T::of(1.0 - 1e-6) { T::one() } else { T::zero() });
        out.push(GroundTruthLevel { disparity, valid });
    }
    Ok(out)
}

/// Which loss terms enter each supervised scale.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a, T> {
    /// `C_s = L_r + lambda_ds * L_ds`.
    WithSmoothness {
        edge_map: &'a Tensor<T>,
        lambda_ds: f64,
    },
    /// `C_s = L_r`.
    RegressionOnly,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown<T> {
    /// Regression term per supervised map, in the order the maps were given.
    pub regression: Vec<T>,
    /// Smoothness term per map; `None` when smoothness is not part of the
    /// objective.
    pub smoothness: Option<Vec<T>>,
    /// Weight actually applied to the smoothness terms (zero when absent).
    pub smoothness_weight: T,
    /// `C_s` per map.
    pub per_scale: Vec<T>,
    /// `C = sum_s C_s`, accumulated left to right.
    pub total: T,
    /// Graph node of `total`.
    pub total_var: Var,
}

impl<T: Scalar> LossBreakdown<T> {
    /// Left-to-right sum of the per-scale terms, in the same order and
    /// precision the graph used.
    pub fn sum_of_parts(&self) -> T {
        let mut it = self.per_scale.iter().copied();
        let first = it.next().unwrap_or_else(T::zero);
        it.fold(first, |acc, v| acc + v)
    }
}

/// Deep supervision over a coarse-to-fine list of disparity maps. The last
/// map must be at the ground truth's resolution and each earlier map at half
/// the resolution of its successor.
pub fn deep_supervision<T: Scalar>(
    g: &mut Graph<T>,
    maps: &[Var],
    gt_full: &Tensor<T>,
    valid_full: &Tensor<T>,
    mode: Supervision<'_, T>,
) -> Result<LossBreakdown<T>> {
    if maps.is_empty() {
        return Err(Error::Empty("deep_supervision"));
    }
    let levels = ground_truth_pyramid(gt_full, valid_full, maps.len())?;
    let scales = maps.len();
    let mut regression = Vec::with_capacity(scales);
    let mut smoothness = Vec::with_capacity(scales);
    let mut per_scale_vars = Vec::with_capacity(scales);
    for (k, &map) in maps.iter().enumerate() {
        let level = &levels[scales - 1 - k];
        if g.shape(map) != level.disparity.shape() {
            return Err(Error::shape(
                "deep_supervision",
                format!(
                    "map {k} has shape {:?}, its ground truth {:?}",
                    g.shape(map),
                    level.disparity.shape()
                ),
            ));
        }
        let lr = regression_loss(g, map, &level.disparity, &level.valid)?;
        regression.push(g.value(lr).item());
        let cs = match mode {
            Supervision::WithSmoothness { edge_map, lambda_ds } => {
                let [_, _, h, w] = level.disparity.dims4()?;
                let [_, _, eh, ew] = edge_map.dims4()?;
                let edge = ResizePlan::new(eh, ew, h, w)?.forward(edge_map)?;
                let lds = edge_aware_smoothness(g, map, &edge)?;
                smoothness.push(g.value(lds).item());
                let weighted = g.scale(lds, lambda_ds)?;
                g.add(lr, weighted)?
            }
            Supervision::RegressionOnly => lr,
        };
        per_scale_vars.push(cs);
    }
    let mut total_var = per_scale_vars[0];
    for &cs in &per_scale_vars[1..] {
        total_var = g.add(total_var, cs)?;
    }
    let (smoothness, smoothness_weight) = match mode {
        Supervision::WithSmoothness { lambda_ds, .. } => (Some(smoothness), T::of(lambda_ds)),
        Supervision::RegressionOnly => (None, T::zero()),
    };
    Ok(LossBreakdown {
        regression,
        smoothness,
        smoothness_weight,
        per_scale: per_scale_vars.iter().map(|&v| g.value(v).item()).collect(),
        total: g.value(total_var).item(),
        total_var,
    })
}

/// End-point error and t-pixel error rates.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean absolute disparity error over valid pixels, in pixels.
    pub epe: f64,
    /// `(t, fraction of valid pixels with error > t)`, ascending in `t`.
    pub bad: Vec<(f64, f64)>,
    pub valid_count: usize,
}

pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

impl EvalReport {
    pub fn bad_rate(&self, t: f64) -> Option<f64> {
        self.bad.iter().find(|(th, _)| *th == t).map(|&(_, r)| r)
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epe = {:.3}", self.epe)?;
        for (t, r) in &self.bad {
            writeln!(f, "bad_{t} = {:.1}%", 100.0 * r)?;
        }
        writeln!(f, "valid_count = {}", self.valid_count)
    }
}

/// Running totals for [`EvalReport`] across several images.
#[derive(Clone, Debug)]
pub struct EvalAccumulator {
    thresholds: Vec<f64>,
    abs_error: f64,
    over: Vec<usize>,
    count: usize,
}

impl EvalAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        let mut thresholds = thresholds.to_vec();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        EvalAccumulator {
            over: vec![0; thresholds.len()],
            thresholds,
            abs_error: 0.0,
            count: 0,
        }
    }

    pub fn add<T: Scalar>(&mut self, pred: &Tensor<T>, gt: &Tensor<T>, valid: &Tensor<T>) -> Result<()> {
        if pred.shape() != gt.shape() || gt.shape() != valid.shape() {
            return Err(Error::shape(
                "evaluate",
                format!("{:?}, gt {:?}, mask {:?}", pred.shape(), gt.shape(), valid.shape()),
            ));
        }
        for ((&p, &t), &m) in pred.data().iter().zip(gt.data()).zip(valid.data()) {
            if m <= T::of(0.5) {
                continue;
            }
            let e = (p.to_f64().unwrap_or(f64::NAN) - t.to_f64().unwrap_or(f64::NAN)).abs();
            self.abs_error += e;
            self.count += 1;
            for (th, over) in self.thresholds.iter().zip(&mut self.over) {
                if e > *th {
                    *over += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalReport> {
        if self.count == 0 {
            return Err(Error::Empty("evaluate"));
        }
        let n = self.count as f64;
        Ok(EvalReport {
            epe: self.abs_error / n,
            bad: self
                .thresholds
                .iter()
                .zip(&self.over)
                .map(|(&t, &o)| (t, o as f64 / n))
                .collect(),
            valid_count: self.count,
        })
    }
}

pub fn evaluate<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    valid: &Tensor<T>,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::new(thresholds);
    acc.add(pred, gt, valid)?;
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn regression_examples() {
        let mut g = Graph::<f64>::new();
        let d = g.variable(t(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]));
        let gt = t(&[1, 1, 1, 3], &[2.0, 2.0, 5.0]);
        let all = Tensor::ones(&[1, 1, 1, 3]);
        let l = regression_loss(&mut g, d, &gt, &all).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        let two = t(&[1, 1, 1, 3], &[1.0, 1.0, 0.0]);
        let l = regression_loss(&mut g, d, &gt, &two).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-12);
        let same = regression_loss(&mut g, d, &t(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]), &all).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let none = Tensor::zeros(&[1, 1, 1, 3]);
        assert!(matches!(regression_loss(&mut g, d, &gt, &none), Err(Error::Empty(_))));
    }

    #[test]
    fn smoothness_examples() {
        let mut g = Graph::<f64>::new();
        let d = g.variable(t(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let flat = Tensor::zeros(&[1, 1, 2, 2]);
        let l = edge_aware_smoothness(&mut g, d, &flat).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-12);
        let ln2 = std::f64::consts::LN_2;
        let edges = t(&[1, 1, 2, 2], &[0.0, ln2, 0.0, ln2]);
        let l = edge_aware_smoothness(&mut g, d, &edges).unwrap();
        assert!((g.value(l).item() - 0.25).abs() < 1e-12);
        let c = g.variable(Tensor::full(&[1, 1, 3, 3], 2.5));
        let e = Tensor::from_fn(&[1, 1, 3, 3], |i| (i as f64).sin());
        let l = edge_aware_smoothness(&mut g, c, &e).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::<f64>::new();
        let labels = t(&[1, 1, 1, 4], &[1.0, 0.0, 1.0, 0.0]);
        let p = g.variable(labels.clone());
        let l = class_balanced_bce(&mut g, p, &labels, None).unwrap();
        assert!(g.value(l).item() <= 1e-5);

        let half = g.variable(Tensor::full(&[1, 1, 1, 4], 0.5));
        let l = class_balanced_bce(&mut g, half, &labels, None).unwrap();
        assert!((g.value(l).item() - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.value(l).item() - 0.3466).abs() < 1e-4);

        // beta = 3/4 weights the single positive
        let labels = t(&[1, 1, 1, 4], &[1.0, 0.0, 0.0, 0.0]);
        let pred = t(&[1, 1, 1, 4], &[0.3, 0.5, 0.5, 0.5]);
        let pv = g.variable(pred);
        let l = class_balanced_bce(&mut g, pv, &labels, None).unwrap();
        let expected = -(0.75 * 0.3f64.ln() + 3.0 * 0.25 * 0.5f64.ln()) / 4.0;
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        let ignore_all = Tensor::ones(&[1, 1, 1, 4]);
        assert!(class_balanced_bce(&mut g, pv, &labels, Some(&ignore_all)).is_err());
    }

    #[test]
    fn ground_truth_pyramid_halves_and_erodes() {
        let gt = t(&[1, 1, 2, 4], &[4.0, 4.0, 2.0, 6.0, 4.0, 4.0, 2.0, 6.0]);
        let valid = t(&[1, 1, 2, 4], &[1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let levels = ground_truth_pyramid(&gt, &valid, 2).unwrap();
        assert_eq!(levels[1].disparity.data(), &[2.0, 2.0]);
        assert_eq!(levels[1].valid.data(), &[1.0, 0.0]);
        assert!(ground_truth_pyramid(&gt, &valid, 3).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let gt = t(&[1, 1, 1, 2], &[0.0, 0.0]);
        let pred = t(&[1, 1, 1, 2], &[1.0, -4.0]);
        let all = Tensor::ones(&[1, 1, 1, 2]);
        let r = evaluate(&pred, &gt, &all, &[3.0]).unwrap();
        assert_eq!(r.epe, 2.5);
        assert_eq!(r.bad_rate(3.0), Some(0.5));
        let r = evaluate(&gt, &gt, &all, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.epe, 0.0);
        assert_eq!(r.bad_rate(3.0), Some(0.0));
        assert!(r.to_text().contains("bad_3 = 0.0%"));
        assert!(evaluate(&gt, &gt, &Tensor::zeros(&[1, 1, 1, 2]), &[3.0]).is_err());
    }
}
