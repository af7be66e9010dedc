//! Weighted geometric median (Fermat-Weber point) by Weiszfeld iteration.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Distance below which an iterate is treated as sitting on a data point.
const ANCHOR_EPS: f64 = 1e-12;
/// Size of the escape step taken from a non-optimal data point.
const ESCAPE_STEP: f64 = 1e-10;

/// `sum_i w_i ||x_i - y||`.
pub fn weighted_distance_sum(points: &[DVector<f64>], weights: &[f64], y: &DVector<f64>) -> f64 {
    points
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - y).norm())
        .sum()
}

/// Minimizer of `sum_i w_i ||x_i - y||`.
///
/// Starts from `init` (or the weighted mean) and never returns a point
/// with a larger objective than the start. When an iterate lands on data
/// points, their subgradient condition is checked: the point is returned
/// if optimal, otherwise the iterate is pushed off along the descent
/// direction.
pub fn weighted_geometric_median(
    points: &[DVector<f64>],
    weights: &[f64],
    init: Option<&DVector<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    if points.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Domain("weights must be finite and non-negative".into()));
    }
    let active: Vec<usize> = (0..points.len()).filter(|&i| weights[i] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::Domain(
            "geometric median needs at least one positive weight".into(),
        ));
    }
    let pts: Vec<&DVector<f64>> = active.iter().map(|&i| &points[i]).collect();
    let ws: Vec<f64> = active.iter().map(|&i| weights[i]).collect();
    let dim = pts[0].len();
    if pts.len() == 1 {
        return Ok(pts[0].clone());
    }

    let wsum: f64 = ws.iter().sum();
    let start = match init {
        Some(s) => s.clone(),
        None => {
            let mut m = DVector::zeros(dim);
            for (x, w) in pts.iter().zip(&ws) {
                m += *x * *w;
            }
            m / wsum
        }
    };
    let obj = |y: &DVector<f64>| -> f64 {
        pts.iter().zip(&ws).map(|(x, w)| w * (*x - y).norm()).sum()
    };

    let mut y = start.clone();
    for _ in 0..max_iter {
        let mut num = DVector::zeros(dim);
        let mut den = 0.0;
        let mut anchor_w = 0.0;
        let mut pull = DVector::zeros(dim);
        for (x, w) in pts.iter().zip(&ws) {
            let diff = *x - &y;
            let d = diff.norm();
            if d < ANCHOR_EPS {
                anchor_w += w;
            } else {
                num += *x * (w / d);
                den += w / d;
                pull += diff * (w / d);
            }
        }
        let next = if anchor_w > 0.0 {
            let r = pull.norm();
            if r <= anchor_w {
                break;
            }
            &y + pull * (ESCAPE_STEP / r)
        } else {
            num / den
        };
        let step = (&next - &y).norm();
        y = next;
        if step < tol {
            break;
        }
    }

    // Weiszfeld approaches an optimal data point only slowly; snap to the
    // nearest one if its subgradient condition holds.
    if let Some(k) = (0..pts.len()).min_by(|&a, &b| {
        (pts[a] - &y)
            .norm()
            .partial_cmp(&(pts[b] - &y).norm())
            .unwrap_or(std::cmp::Ordering::Equal)
    }) {
        let xk = pts[k];
        let mut anchor_w = 0.0;
        let mut pull = DVector::zeros(dim);
        for (x, w) in pts.iter().zip(&ws) {
            let diff = *x - xk;
            let d = diff.norm();
            if d < ANCHOR_EPS {
                anchor_w += w;
            } else {
                pull += diff * (w / d);
            }
        }
        if pull.norm() <= anchor_w && obj(xk) <= obj(&y) {
            y = xk.clone();
        }
    }

    if obj(&y) <= obj(&start) {
        Ok(y)
    } else {
        Ok(start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn corners() -> Vec<DVector<f64>> {
        vec![v(0.0, 0.0), v(1.0, 0.0), v(0.0, 1.0), v(1.0, 1.0)]
    }

    #[test]
    fn identical_points() {
        let p = vec![v(0.3, -2.0); 5];
        let m = weighted_geometric_median(&p, &[1.0; 5], None, 1e-12, 1000).unwrap();
        assert!((m - v(0.3, -2.0)).norm() < 1e-12);
    }

    #[test]
    fn square_corners_equal_weights() {
        let m = weighted_geometric_median(&corners(), &[1.0; 4], None, 1e-12, 10_000).unwrap();
        assert!((m - v(0.5, 0.5)).norm() < 1e-9);
    }

    #[test]
    fn zero_weights_rejected() {
        assert!(weighted_geometric_median(&corners(), &[0.0; 4], None, 1e-9, 10).is_err());
        assert!(weighted_geometric_median(&corners(), &[1.0; 3], None, 1e-9, 10).is_err());
    }

    #[test]
    fn dominant_point_is_optimal_anchor() {
        // weight 3 at the origin exceeds the combined pull of the others
        let m = weighted_geometric_median(&corners(), &[3.0, 1.0, 1.0, 1.0], None, 1e-12, 10_000)
            .unwrap();
        assert!(m.norm() < 1e-9, "{m}");
    }

    #[test]
    fn escapes_non_optimal_anchor() {
        let m = weighted_geometric_median(
            &corners(),
            &[1.0; 4],
            Some(&v(0.0, 0.0)),
            1e-12,
            100_000,
        )
        .unwrap();
        assert!((&m - v(0.5, 0.5)).norm() < 1e-6, "{m}");
    }
}
