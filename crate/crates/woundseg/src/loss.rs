//! Training objectives over full-resolution logits.
//!
//! Cross-entropy is the primary objective; the Focal+Dice combination
//! exists to reproduce one decoder-ablation configuration. Both take
//! `[N,K,H,W]` logits and an `[N,H,W]` integer mask and produce a
//! scalar tape node, so either can drive `backward`.

use crate::tensor::{ClassMask, Tape, Tensor, TensorId};
use crate::{Error, Result, Scalar};

/// Which objective trains the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    FocalDice,
}

/// Objective selection plus the Focal/Dice constants it may use.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    /// Reserved config surface; per-class weighting is out of scope
    /// and any value here is rejected at validation.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::CrossEntropy,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
            class_weights: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::argument("loss_config", "focal_gamma must be finite and >= 0"));
        }
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::argument("loss_config", "dice_smooth must be finite and > 0"));
        }
        if self.class_weights.is_some() {
            return Err(Error::argument("loss_config", "class_weights is not supported"));
        }
        Ok(())
    }

    /// Evaluates the configured objective.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        logits: TensorId,
        labels: &ClassMask,
    ) -> Result<TensorId> {
        self.validate()?;
        match self.kind {
            LossKind::CrossEntropy => cross_entropy(tape, logits, labels),
            LossKind::FocalDice => focal_dice(tape, logits, labels, self.focal_gamma, self.dice_smooth),
        }
    }
}

/// Mean over all pixels of the negative log softmax probability at the
/// labeled class.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: TensorId,
    labels: &ClassMask,
) -> Result<TensorId> {
    tape.cross_entropy(logits, labels)
}

/// One-hot constant `[N,K,H,W]` for an `[N,H,W]` mask.
fn one_hot_constant<T: Scalar>(
    tape: &mut Tape<T>,
    labels: &ClassMask,
    k: usize,
) -> Result<TensorId> {
    let ls = labels.shape();
    if ls.len() != 3 {
        return Err(Error::shape("one_hot", format!("mask rank {} != 3", ls.len())));
    }
    let (n, h, w) = (ls[0], ls[1], ls[2]);
    let sp = h * w;
    let mut data = vec![T::zero(); n * k * sp];
    for (pix, &label) in labels.data().iter().enumerate() {
        let label = label as usize;
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let (bi, off) = (pix / sp, pix % sp);
        data[(bi * k + label) * sp + off] = T::one();
    }
    let t = Tensor::new(&[n, k, h, w], data)?;
    Ok(tape.constant(&t))
}

/// Mean over all pixels of `-(1 - p_t)^gamma * ln(p_t)` where `p_t` is
/// the softmax probability at the labeled class. `gamma = 0` is exactly
/// cross-entropy.
pub fn focal_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: TensorId,
    labels: &ClassMask,
    gamma: f64,
) -> Result<TensorId> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("focal_loss", format!("logits {:?}", shape)));
    }
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let y = one_hot_constant(tape, labels, k)?;
    if tape.shape(y) != shape.as_slice() {
        return Err(Error::shape("focal_loss", "labels inconsistent with logits"));
    }
    let p = tape.softmax(logits, 1)?;
    let picked = tape.mul(p, y)?;
    let p_t = tape.sum_axis(picked, 1)?;
    let log_p = tape.ln(p_t)?;
    let neg_p = tape.scale(p_t, -1.0)?;
    let one_minus = tape.add_scalar(neg_p, 1.0)?;
    let damp = tape.pow_scalar(one_minus, gamma)?;
    let weighted = tape.mul(damp, log_p)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, -1.0 / (n * h * w) as f64)
}

/// Soft multi-class Dice loss: `1 - mean_k (2*sum(p*y) + s) / (sum(p)
/// + sum(y) + s)` with per-class sums taken over every pixel in the
/// batch.
pub fn soft_dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: TensorId,
    labels: &ClassMask,
    smooth: f64,
) -> Result<TensorId> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("soft_dice_loss", format!("logits {:?}", shape)));
    }
    let k = shape[1];
    let y = one_hot_constant(tape, labels, k)?;
    if tape.shape(y) != shape.as_slice() {
        return Err(Error::shape("soft_dice_loss", "labels inconsistent with logits"));
    }
    let p = tape.softmax(logits, 1)?;
    let inter = tape.mul(p, y)?;
    let inter = tape.sum_per_channel(inter)?;
    let p_sum = tape.sum_per_channel(p)?;
    let y_sum = tape.sum_per_channel(y)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, smooth)?;
    let den = tape.add(p_sum, y_sum)?;
    let den = tape.add_scalar(den, smooth)?;
    let ratio = tape.div(num, den)?;
    let mean = tape.sum_all(ratio)?;
    let mean = tape.scale(mean, 1.0 / k as f64)?;
    let neg = tape.scale(mean, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Equal-weight sum of the focal and soft Dice losses.
pub fn focal_dice<T: Scalar>(
    tape: &mut Tape<T>,
    logits: TensorId,
    labels: &ClassMask,
    gamma: f64,
    smooth: f64,
) -> Result<TensorId> {
    let f = focal_loss(tape, logits, labels, gamma)?;
    let d = soft_dice_loss(tape, logits, labels, smooth)?;
    tape.add(f, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{randn, GradCheck};

    fn mask(shape: &[usize; 3], data: &[u8]) -> ClassMask {
        ClassMask::new(shape, data.to_vec()).unwrap()
    }

    fn random_mask(shape: &[usize; 3], k: usize, seed: u64) -> ClassMask {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        ClassMask::new(shape, (0..n).map(|_| rng.gen_range(0..k as u8)).collect()).unwrap()
    }

    fn eval<F>(build: F) -> f64
    where
        F: FnOnce(&mut Tape<f64>) -> TensorId,
    {
        let mut tape = Tape::new();
        let id = build(&mut tape);
        tape.scalar_value(id)
    }

    /// Plain-loop softmax probabilities for one pixel.
    fn pixel_softmax(logits: &Tensor<f64>, bi: usize, pix: usize, k: usize, sp: usize) -> Vec<f64> {
        let at = |c: usize| logits.data()[(bi * k + c) * sp + pix];
        let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (at(c) - m).exp()).sum();
        (0..k).map(|c| (at(c) - m).exp() / z).collect()
    }

    #[test]
    fn uniform_logits_cost_log_k() {
        let got = eval(|tape| {
            let mut logits = Tensor::zeros(&[2, 4, 3, 3]);
            let id = tape.leaf(&mut logits);
            cross_entropy(tape, id, &mask(&[2, 3, 3], &[0; 18])).unwrap()
        });
        assert!((got - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_true_class_costs_nothing() {
        let got = eval(|tape| {
            let mut logits = Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 50.0 } else { 0.0 });
            let id = tape.leaf(&mut logits);
            cross_entropy(tape, id, &mask(&[1, 2, 2], &[0; 4])).unwrap()
        });
        assert!(got.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_per_pixel_loop() {
        let logits = randn(&[2, 3, 4, 4], 1);
        let labels = random_mask(&[2, 4, 4], 3, 2);
        let got = eval(|tape| {
            let mut l = logits.clone();
            let id = tape.leaf(&mut l);
            cross_entropy(tape, id, &labels).unwrap()
        });
        let (k, sp) = (3, 16);
        let mut want = 0.0;
        for bi in 0..2 {
            for pix in 0..sp {
                let p = pixel_softmax(&logits, bi, pix, k, sp);
                want -= p[labels.data()[bi * sp + pix] as usize].ln();
            }
        }
        want /= 32.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn zero_gamma_focal_is_cross_entropy() {
        let logits = randn(&[2, 3, 2, 2], 3);
        let labels = random_mask(&[2, 2, 2], 3, 4);
        let ce = eval(|tape| {
            let mut l = logits.clone();
            let id = tape.leaf(&mut l);
            cross_entropy(tape, id, &labels).unwrap()
        });
        let focal = eval(|tape| {
            let mut l = logits.clone();
            let id = tape.leaf(&mut l);
            focal_loss(tape, id, &labels, 0.0).unwrap()
        });
        assert!((ce - focal).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_zeroes_both_terms() {
        let labels = random_mask(&[1, 4, 4], 3, 5);
        let logits = Tensor::from_fn(&[1, 3, 4, 4], |i| {
            let (c, pix) = (i / 16, i % 16);
            if labels.data()[pix] as usize == c {
                50.0
            } else {
                -50.0
            }
        });
        let total = eval(|tape| {
            let mut l = logits.clone();
            let id = tape.leaf(&mut l);
            focal_dice(tape, id, &labels, 2.0, 1.0).unwrap()
        });
        assert!(total.abs() < 1e-6, "{total}");
    }

    #[test]
    fn focal_dice_matches_direct_summation() {
        let (gamma, smooth) = (2.0, 1.0);
        let logits = randn(&[2, 3, 2, 4], 6);
        let labels = random_mask(&[2, 2, 4], 3, 7);
        let got = eval(|tape| {
            let mut l = logits.clone();
            let id = tape.leaf(&mut l);
            focal_dice(tape, id, &labels, gamma, smooth).unwrap()
        });

        let (k, sp, n_pix) = (3, 8, 16);
        let mut focal = 0.0;
        let (mut inter, mut p_sum, mut y_sum) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
        for bi in 0..2 {
            for pix in 0..sp {
                let p = pixel_softmax(&logits, bi, pix, k, sp);
                let t = labels.data()[bi * sp + pix] as usize;
                focal -= (1.0 - p[t]).powf(gamma) * p[t].ln();
                for c in 0..k {
                    p_sum[c] += p[c];
                }
                inter[t] += p[t];
                y_sum[t] += 1.0;
            }
        }
        focal /= n_pix as f64;
        let dice_mean: f64 = (0..k)
            .map(|c| (2.0 * inter[c] + smooth) / (p_sum[c] + y_sum[c] + smooth))
            .sum::<f64>()
            / k as f64;
        let want = focal + (1.0 - dice_mean);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn losses_are_nonnegative() {
        for seed in 0..5 {
            let logits = randn(&[1, 4, 4, 4], 100 + seed);
            let labels = random_mask(&[1, 4, 4], 4, 200 + seed);
            for cfg in [
                LossConfig::default(),
                LossConfig { kind: LossKind::FocalDice, ..LossConfig::default() },
            ] {
                let v = eval(|tape| {
                    let mut l = logits.clone();
                    let id = tape.leaf(&mut l);
                    cfg.loss(tape, id, &labels).unwrap()
                });
                assert!(v >= 0.0, "{cfg:?} gave {v}");
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_per_pixel() {
        let mut tape = Tape::new();
        let mut logits = randn(&[2, 3, 2, 2], 8).requiring_grad();
        let id = tape.leaf(&mut logits);
        let labels = random_mask(&[2, 2, 2], 3, 9);
        let loss = cross_entropy(&mut tape, id, &labels).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(id).unwrap();
        let sp = 4;
        for bi in 0..2 {
            for pix in 0..sp {
                let s: f64 = (0..3).map(|c| g[(bi * 3 + c) * sp + pix]).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let labels = random_mask(&[1, 2, 2], 3, 10);
        for (name, kind) in
            [("cross_entropy", LossKind::CrossEntropy), ("focal_dice", LossKind::FocalDice)]
        {
            let cfg = LossConfig { kind, ..LossConfig::default() };
            let labels = labels.clone();
            let report = GradCheck::default()
                .check_op(name, &[randn(&[1, 3, 2, 2], 11)], move |tape, ids| {
                    cfg.loss(tape, ids[0], &labels)
                })
                .unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn out_of_range_label_rejected_by_both_losses() {
        let labels = mask(&[1, 1, 2], &[0, 5]);
        for kind in [LossKind::CrossEntropy, LossKind::FocalDice] {
            let cfg = LossConfig { kind, ..LossConfig::default() };
            let mut tape = Tape::new();
            let mut logits = randn(&[1, 3, 1, 2], 12);
            let id = tape.leaf(&mut logits);
            assert!(matches!(
                cfg.loss(&mut tape, id, &labels),
                Err(Error::LabelOutOfRange { label: 5, classes: 3 })
            ));
        }
    }

    #[test]
    fn config_validation_rejects_bad_constants() {
        let ok = LossConfig::default();
        assert!(ok.validate().is_ok());
        assert!(LossConfig { focal_gamma: -1.0, ..ok.clone() }.validate().is_err());
        assert!(LossConfig { dice_smooth: 0.0, ..ok.clone() }.validate().is_err());
        assert!(LossConfig { class_weights: Some(vec![1.0]), ..ok }.validate().is_err());
    }
}
