//! Segmentation objective and evaluation metrics.
//!
//! Training loss = pixel cross-entropy over all classes + soft Dice averaged
//! over the foreground classes, unit-weighted. Evaluation uses hard Dice on
//! the argmax segmentation; `mDSC` is the mean over foreground classes.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smoothing constant in the soft-Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Build the Dice+CE loss node for `[c,h,w]` logits against `h*w` labels.
pub fn segmentation_loss(tape: &mut Tape, logits: Var, labels: &[u8], num_classes: usize) -> Result<Var> {
    let ce = tape.ce_channels(logits, labels)?;
    let dice = soft_dice_loss(tape, logits, labels, num_classes)?;
    tape.add(ce, dice)
}

/// `1 - mean over foreground classes of soft Dice`.
fn soft_dice_loss(tape: &mut Tape, logits: Var, labels: &[u8], num_classes: usize) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let probs = tape.softmax_channels(logits)?;
    let mut acc: Option<Var> = None;
    for class in 1..num_classes {
        let mask_data: Vec<f64> = labels.iter().map(|&l| if l as usize == class { 1.0 } else { 0.0 }).collect();
        let mask_sum: f64 = mask_data.iter().sum();
        let mask = tape.constant(Tensor::from_vec(&[1, h, w], mask_data)?)?;
        let p = tape.slice_channels(probs, class, class + 1)?;
        let overlap = tape.mul(p, mask)?;
        let inter = tape.sum_all(overlap)?;
        let psum = tape.sum_all(p)?;
        let num = tape.scale(inter, 2.0)?;
        let num = tape.add_scalar(num, DICE_EPS)?;
        let den = tape.add_scalar(psum, mask_sum + DICE_EPS)?;
        let dice = tape.div(num, den)?;
        acc = Some(match acc {
            None => dice,
            Some(a) => tape.add(a, dice)?,
        });
    }
    let total = acc.expect("at least one foreground class");
    let mean = tape.scale(total, 1.0 / (num_classes - 1) as f64)?;
    let neg = tape.scale(mean, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Argmax over the channel axis; ties resolve to the lowest class index.
pub fn argmax_channels(logits: &Tensor) -> Vec<u8> {
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let hw = h * w;
    let mut out = vec![0u8; hw];
    for (p, slot) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut bestv = logits.data()[p];
        for ch in 1..c {
            let v = logits.data()[ch * hw + p];
            if v > bestv {
                bestv = v;
                best = ch;
            }
        }
        *slot = best as u8;
    }
    out
}

/// Hard Dice for one class. Both-empty counts as a perfect 1.0.
pub fn hard_dice(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let mut inter = 0usize;
    let mut np = 0usize;
    let mut nt = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        let ip = p == class;
        let it = t == class;
        inter += (ip && it) as usize;
        np += ip as usize;
        nt += it as usize;
    }
    if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    }
}

/// Per-foreground-class hard Dice (classes `1..num_classes`).
pub fn per_class_dsc(pred: &[u8], truth: &[u8], num_classes: usize) -> Vec<f64> {
    (1..num_classes).map(|c| hard_dice(pred, truth, c as u8)).collect()
}

/// Mean foreground Dice.
pub fn mdsc(pred: &[u8], truth: &[u8], num_classes: usize) -> f64 {
    let per = per_class_dsc(pred, truth, num_classes);
    per.iter().sum::<f64>() / per.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_logits_give_near_zero_loss() {
        // 3 classes on a 2x2 image; make the true class logit huge.
        let labels = [0u8, 1, 2, 1];
        let mut data = vec![0.0; 3 * 4];
        for (p, &l) in labels.iter().enumerate() {
            data[l as usize * 4 + p] = 50.0;
        }
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::from_vec(&[3, 2, 2], data).unwrap()).unwrap();
        let loss = segmentation_loss(&mut t, logits, &labels, 3).unwrap();
        assert!(t.value(loss).item() < 1e-4, "loss = {}", t.value(loss).item());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::gradcheck::finite_diff_check;
        use rand::Rng;
        let mut rng = crate::rng::stream(5, "test.loss");
        let labels: Vec<u8> = (0..16).map(|_| rng.gen_range(0..4u8)).collect();
        let logits = Tensor::from_vec(&[4, 4, 4], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let report = finite_diff_check(&[logits], |t, vars| segmentation_loss(t, vars[0], &labels, 4)).unwrap();
        assert!(report.max_rel < 1e-6, "max_rel = {} at {}", report.max_rel, report.worst);
    }

    #[test]
    fn hard_dice_hand_example() {
        // pred marks {0,1}, truth marks {1,2} for class 1: inter 1, sizes 2+2.
        let pred = [1u8, 1, 0, 0];
        let truth = [0u8, 1, 1, 0];
        assert_abs_diff_eq!(hard_dice(&pred, &truth, 1), 0.5);
        // Class 3 absent from both: perfect by convention.
        assert_abs_diff_eq!(hard_dice(&pred, &truth, 3), 1.0);
    }

    #[test]
    fn argmax_prefers_lowest_on_tie() {
        let t = Tensor::from_vec(&[2, 1, 2], vec![1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }

    #[test]
    fn mdsc_is_mean_of_foreground() {
        let pred = [0u8, 1, 2, 3];
        let truth = [0u8, 1, 2, 3];
        assert_abs_diff_eq!(mdsc(&pred, &truth, 4), 1.0);
    }
}
