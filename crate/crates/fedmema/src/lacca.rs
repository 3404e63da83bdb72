//! Anchor-based cross-attention calibration of skip features.
//!
//! A feature map `F` of shape `[C,h,w]` is flattened to `T = h*w` tokens and
//! attended against the anchor matrix `A` (`[K,C]`): per head, weights are
//! `softmax(F_h A_h^T / sqrt(C_h))` and the calibration output is the
//! weighted anchor mix. Heads are raw channel splits — no learned
//! projections, so the only trainable path runs through `F` itself; anchors
//! are constants on the tape and receive no gradient.
//!
//! The caller residual-adds the output to the original feature.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of attention heads pinned by the protocol.
pub const DEFAULT_HEADS: usize = 8;

/// Result of calibrating one feature map against one anchor matrix.
pub struct Calibration {
    /// `[C,h,w]` anchor mix aligned with the input feature layout.
    pub output: Var,
    /// Head-averaged attention weights, `[T,K]`, detached from the tape.
    pub attention: Tensor,
}

/// Validate that `channels` splits evenly into `heads`.
pub fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "channel count {channels} is not divisible into {heads} attention heads"
        )));
    }
    Ok(())
}

/// Cross-attend `feat` (`[C,h,w]`) against `anchors` (`[K,C]`).
pub fn calibrate(tape: &mut Tape, feat: Var, anchors: &Tensor, heads: usize) -> Result<Calibration> {
    let fshape = tape.value(feat).shape().to_vec();
    if fshape.len() != 3 {
        return Err(Error::shape("calibrate", format!("feature rank {}", fshape.len())));
    }
    let (c, h, w) = (fshape[0], fshape[1], fshape[2]);
    if anchors.rank() != 2 || anchors.shape()[1] != c {
        return Err(Error::shape(
            "calibrate",
            format!("anchors {:?} against {c} channels", anchors.shape()),
        ));
    }
    check_heads(c, heads)?;
    let k = anchors.shape()[0];
    let t = h * w;
    let ch = c / heads;
    let scale = 1.0 / (ch as f64).sqrt();

    let flat = tape.reshape(feat, &[c, t])?;
    let tokens = tape.transpose2(flat)?; // [T, C]

    let mut outs = Vec::with_capacity(heads);
    let mut attn_sum = vec![0.0; t * k];
    for head in 0..heads {
        let (c0, c1) = (head * ch, (head + 1) * ch);
        let tok_h = tape.slice_cols(tokens, c0, c1)?; // [T, ch]
        // Anchor head slices as plain constants (and their transpose).
        let mut ah = Vec::with_capacity(k * ch);
        for r in 0..k {
            ah.extend_from_slice(&anchors.data()[r * c + c0..r * c + c1]);
        }
        let mut ah_t = vec![0.0; ch * k];
        for r in 0..k {
            for j in 0..ch {
                ah_t[j * k + r] = ah[r * ch + j];
            }
        }
        let anch = tape.constant(Tensor::from_vec(&[k, ch], ah)?)?;
        let anch_t = tape.constant(Tensor::from_vec(&[ch, k], ah_t)?)?;

        let scores = tape.matmul(tok_h, anch_t)?; // [T, K]
        let scaled = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scaled)?;
        for (acc, v) in attn_sum.iter_mut().zip(tape.value(weights).data()) {
            *acc += v;
        }
        outs.push(tape.matmul(weights, anch)?); // [T, ch]
    }
    let mixed = tape.concat_cols(&outs)?; // [T, C]
    let back = tape.transpose2(mixed)?; // [C, T]
    let output = tape.reshape(back, &[c, h, w])?;

    for v in attn_sum.iter_mut() {
        *v /= heads as f64;
    }
    Ok(Calibration {
        output,
        attention: Tensor::from_vec(&[t, k], attn_sum)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_feat(tape: &mut Tape, c: usize, h: usize, w: usize, seed: u64) -> Var {
        let mut rng = crate::rng::stream(seed, "test.lacca");
        let t = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        tape.leaf(t).unwrap()
    }

    fn random_anchors(k: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, "test.lacca.anchors");
        Tensor::from_vec(&[k, c], (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut tape = Tape::new();
        let f = random_feat(&mut tape, 8, 4, 4, 1);
        let a = random_anchors(5, 8, 2);
        let cal = calibrate(&mut tape, f, &a, 4).unwrap();
        let attn = &cal.attention;
        for r in 0..attn.shape()[0] {
            let s: f64 = (0..attn.shape()[1]).map(|c| attn.at2(r, c)).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_anchor_output_is_that_anchor_everywhere() {
        let mut tape = Tape::new();
        let f = random_feat(&mut tape, 8, 2, 2, 3);
        let a = random_anchors(1, 8, 4);
        let cal = calibrate(&mut tape, f, &a, 8).unwrap();
        let out = tape.value(cal.output);
        for ch in 0..8 {
            for p in 0..4 {
                assert_eq!(out.data()[ch * 4 + p], a.data()[ch], "channel {ch} pixel {p}");
            }
        }
    }

    #[test]
    fn anchor_row_permutation_leaves_output_unchanged() {
        let a = random_anchors(4, 8, 5);
        // Permute rows 0..4 -> [2,0,3,1].
        let perm = [2usize, 0, 3, 1];
        let mut pd = vec![0.0; 32];
        for (to, &from) in perm.iter().enumerate() {
            pd[to * 8..(to + 1) * 8].copy_from_slice(&a.data()[from * 8..(from + 1) * 8]);
        }
        let ap = Tensor::from_vec(&[4, 8], pd).unwrap();

        let mut t1 = Tape::new();
        let f1 = random_feat(&mut t1, 8, 3, 3, 6);
        let c1 = calibrate(&mut t1, f1, &a, 2).unwrap();
        let mut t2 = Tape::new();
        let f2 = random_feat(&mut t2, 8, 3, 3, 6);
        let c2 = calibrate(&mut t2, f2, &ap, 2).unwrap();
        for (x, y) in t1.value(c1.output).data().iter().zip(t2.value(c2.output).data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_reaches_features_but_not_anchors() {
        let mut tape = Tape::new();
        let f = random_feat(&mut tape, 8, 2, 2, 7);
        let a = random_anchors(3, 8, 8);
        let cal = calibrate(&mut tape, f, &a, 4).unwrap();
        let s = tape.sum_all(cal.output).unwrap();
        let g = tape.backward(s).unwrap();
        let gf = g.get(f).expect("features must receive gradient");
        assert!(gf.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn calibration_gradient_matches_finite_differences() {
        use crate::gradcheck::finite_diff_check;
        let a = random_anchors(3, 8, 9);
        let mut rng = crate::rng::stream(10, "test.lacca");
        let feat = Tensor::from_vec(&[8, 2, 2], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let report = finite_diff_check(&[feat], |t, vars| {
            let cal = calibrate(t, vars[0], &a, 4)?;
            // Square so the gradient depends on the output.
            let sq = t.mul(cal.output, cal.output)?;
            t.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel < 1e-6, "max_rel = {} at {}", report.max_rel, report.worst);
    }

    #[test]
    fn head_misalignment_is_a_config_error() {
        let mut tape = Tape::new();
        let f = random_feat(&mut tape, 6, 2, 2, 11);
        let a = random_anchors(2, 6, 12);
        assert!(calibrate(&mut tape, f, &a, 4).is_err());
    }
}
