//! Finite-difference verification of tape gradients.
//!
//! Central differences with a fixed step, compared coordinate-by-coordinate
//! against the analytic gradients from [`Tape::backward`]. The relative error
//! uses `max(|analytic|, |numeric|, FLOOR)` as denominator so near-zero
//! gradients don't divide by dust.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every coordinate of every leaf.
    pub max_rel: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
    /// Total number of coordinates compared.
    pub coords: usize,
}

/// Compare analytic gradients of `f` (a scalar-valued graph over `leaves`)
/// against central finite differences.
///
/// `f` is invoked with a fresh tape and leaf [`Var`]s in the order of
/// `leaves`; it must rebuild the same graph every time.
pub fn finite_diff_check<F>(leaves: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // One analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed
            .iter()
            .map(|x| t.leaf(x.clone()))
            .collect::<Result<_>>()?;
        let r = f(&mut t, &vs)?;
        Ok(t.value(r).item())
    };

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = String::from("(no coordinates)");
    let mut coords = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        for j in 0..leaf.numel() {
            let orig = leaf.data()[j];
            work[li].data_mut()[j] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[li].data_mut()[j] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[li].data_mut()[j] = orig;

            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[li].as_ref().map_or(0.0, |g| g.data()[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            coords += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("leaf {li} coord {j}: analytic {a:.9e}, numeric {numeric:.9e}");
            }
        }
    }
    Ok(GradCheckReport { max_rel, worst, coords })
}
