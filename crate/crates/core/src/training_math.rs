//! Supervision targets and the logistic-MSE loss for the propagated map.
//!
//! Each target contributes a Gaussian bump centred on its cell; the bumps are
//! summed and clamped to `[0, 1]`. The loss rewards confident peaks where the
//! target is exactly 1 and penalises mass elsewhere in proportion to
//! `1 - T`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::numerics::Grid;
use crate::Result;

/// Prediction clamp applied before taking logs.
pub const PRED_EPS: f64 = 1e-7;
/// Upper bound on the per-target standard deviation, in cells.
pub const SIGMA_MAX: f64 = 1.0;
pub const SIGMA_MIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSupervision {
    /// Summed and clamped target map, `H×W×1`.
    pub target: Grid,
    /// Centre cell `(x, y)` of each target after rounding.
    pub centers: Vec<(usize, usize)>,
    pub sigmas: Vec<f64>,
}

/// Size-adaptive standard deviation: `min(w, h) / 6`, kept in
/// `[SIGMA_MIN, SIGMA_MAX]`.
pub fn adaptive_sigma(w: f64, h: f64) -> f64 {
    (w.min(h) / 6.0).clamp(SIGMA_MIN, SIGMA_MAX)
}

/// Builds the Gaussian supervision map for targets centred at `centers`
/// (cell coordinates, `(x, y)`) with box sizes `sizes` (`(w, h)` in cells).
///
/// Centres are snapped to the cell that contains them, so the map is exactly
/// 1 at every target's centre cell.
pub fn gaussian_target(
    centers: &[(f64, f64)],
    sizes: &[(f64, f64)],
    height: usize,
    width: usize,
) -> Result<GaussianSupervision> {
    if centers.len() != sizes.len() {
        return Err(shape_err!(
            "{} centres but {} sizes",
            centers.len(),
            sizes.len()
        ));
    }
    let snap = |v: f64, n: usize| -> usize {
        if v <= 0.0 {
            0
        } else {
            (libm::floor(v) as usize).min(n.saturating_sub(1))
        }
    };
    let mut acc = vec![0.0f64; height * width];
    let mut cells = Vec::with_capacity(centers.len());
    let mut sigmas = Vec::with_capacity(centers.len());
    for (&(cx, cy), &(w, h)) in centers.iter().zip(sizes) {
        let (ix, iy) = (snap(cx, width), snap(cy, height));
        let sigma = adaptive_sigma(w, h);
        let denom = 2.0 * sigma * sigma;
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 - ix as f64;
                let dy = y as f64 - iy as f64;
                acc[y * width + x] += libm::exp(-(dx * dx + dy * dy) / denom);
            }
        }
        cells.push((ix, iy));
        sigmas.push(sigma);
    }
    let data = acc.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(GaussianSupervision {
        target: Grid::from_vec(height, width, 1, data)?,
        centers: cells,
        sigmas,
    })
}

fn check_shapes(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(shape_err!(
            "prediction has {} cells, target has {}",
            pred.len(),
            target.len()
        ));
    }
    Ok(())
}

/// Logistic-MSE loss over flat cell buffers, normalised by the target count
/// `n`. Frames without targets contribute zero.
pub fn logistic_mse_loss(pred: &[f64], target: &[f64], n: usize) -> Result<f64> {
    check_shapes(pred, target)?;
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0f64;
    for (&p, &t) in pred.iter().zip(target) {
        let m = p.clamp(PRED_EPS, 1.0 - PRED_EPS);
        sum += if t == 1.0 {
            (1.0 - m) * libm::log(m)
        } else {
            (1.0 - t) * m * libm::log(1.0 - m)
        };
    }
    Ok(-sum / n as f64)
}

/// Analytic `∂L/∂pred` per cell. Cells whose prediction lies outside the
/// clamp range get zero gradient.
pub fn loss_gradient(pred: &[f64], target: &[f64], n: usize) -> Result<Vec<f64>> {
    check_shapes(pred, target)?;
    if n == 0 {
        return Ok(vec![0.0; pred.len()]);
    }
    let scale = -1.0 / n as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&m, &t)| {
            if !(PRED_EPS..=1.0 - PRED_EPS).contains(&m) {
                return 0.0;
            }
            let d = if t == 1.0 {
                -libm::log(m) + (1.0 - m) / m
            } else {
                (1.0 - t) * (libm::log(1.0 - m) - m / (1.0 - m))
            };
            scale * d
        })
        .collect())
}

fn widen(g: &Grid) -> Vec<f64> {
    g.data().iter().map(|&v| f64::from(v)).collect()
}

/// [`logistic_mse_loss`] over `H×W×1` grids.
pub fn logistic_mse_loss_grid(m_p: &Grid, target: &Grid, n: usize) -> Result<f64> {
    if !m_p.same_spatial(target) || m_p.channels() != target.channels() {
        return Err(shape_err!("loss grids differ in shape"));
    }
    logistic_mse_loss(&widen(m_p), &widen(target), n)
}

/// Outcome of comparing the analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub cells_checked: usize,
}

/// Central-difference check of [`loss_gradient`] at `pred`.
pub fn finite_difference_check(pred: &[f64], target: &[f64], n: usize, step: f64) -> Result<GradCheck> {
    let analytic = loss_gradient(pred, target, n)?;
    let mut probe = pred.to_vec();
    let mut worst = 0.0f64;
    for i in 0..pred.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = logistic_mse_loss(&probe, target, n)?;
        probe[i] = orig - step;
        let down = logistic_mse_loss(&probe, target, n)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(GradCheck {
        max_rel_err: worst,
        cells_checked: pred.len(),
    })
}
