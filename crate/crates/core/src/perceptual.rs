//! Patch losses: a fixed gradient-filter perceptual metric and the fine-stage
//! loss built on it.
//!
//! Every filter is point-antisymmetric, `k(-o) = -k(o)`, and is applied as
//! `Σ_o k(o) (D[p+o] - D[p-o])` over half of its taps. A constant image
//! therefore has an exactly zero response.

use crate::error::{Error, Result};
use crate::geom::FrameBuffer;

#[derive(Clone, Debug, PartialEq)]
pub struct Filter {
    /// Half of the taps as `(dx, dy, k)`.
    pub taps: Vec<(i32, i32, f64)>,
    pub radius: u32,
    pub weight: f64,
}

impl Filter {
    fn normalized(taps: Vec<(i32, i32, f64)>, radius: u32, weight: f64) -> Self {
        // Unit response to a unit step across the filter axis.
        let s: f64 = taps.iter().map(|t| t.2).sum();
        Filter {
            taps: taps.into_iter().map(|(x, y, k)| (x, y, k / s)).collect(),
            radius,
            weight,
        }
    }

    fn transposed(&self) -> Self {
        Filter {
            taps: self.taps.iter().map(|&(x, y, k)| (y, x, k)).collect(),
            ..self.clone()
        }
    }

    fn sobel_x(weight: f64) -> Self {
        Filter::normalized(vec![(1, -1, 1.0), (1, 0, 2.0), (1, 1, 1.0)], 1, weight)
    }

    fn gaussian_x(sigma: f64, weight: f64) -> Self {
        let r = (3.0 * sigma).ceil() as i32;
        let mut taps = Vec::new();
        for x in 1..=r {
            for y in -r..=r {
                let (xf, yf) = (x as f64, y as f64);
                taps.push((x, y, xf * (-(xf * xf + yf * yf) / (2.0 * sigma * sigma)).exp()));
            }
        }
        Filter::normalized(taps, r as u32, weight)
    }
}

/// Sum over filters, channels and valid positions of `weight * response²`
/// of the difference image.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualMetric {
    pub filters: Vec<Filter>,
}

impl Default for PerceptualMetric {
    /// Sobel pair plus Gaussian-derivative pairs at sigma 1 and 2.
    fn default() -> Self {
        let mut filters = Vec::new();
        for f in [Filter::sobel_x(1.0), Filter::gaussian_x(1.0, 1.0), Filter::gaussian_x(2.0, 1.0)] {
            filters.push(f.transposed());
            filters.push(f);
        }
        PerceptualMetric { filters }
    }
}

fn check_same(a: &FrameBuffer, b: &FrameBuffer) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.rgb.len() != b.rgb.len() {
        return Err(Error::Dimension {
            context: "patch comparison".into(),
            expected: a.pixels(),
            actual: b.pixels(),
        });
    }
    Ok(())
}

impl PerceptualMetric {
    /// Metric value and, if requested, its gradient w.r.t. `pred`.
    fn eval(&self, pred: &FrameBuffer, target: &FrameBuffer, mut grad: Option<&mut [[f64; 3]]>) -> f64 {
        let (w, h) = (pred.width as i64, pred.height as i64);
        let at = |x: i64, y: i64| (y * w + x) as usize;
        let diff: Vec<[f64; 3]> = pred
            .rgb
            .iter()
            .zip(&target.rgb)
            .map(|(p, t)| std::array::from_fn(|k| p[k] - t[k]))
            .collect();
        let mut total = 0.0;
        for f in &self.filters {
            let r = f.radius as i64;
            for y in r..h - r {
                for x in r..w - r {
                    let mut resp = [0.0; 3];
                    for &(dx, dy, k) in &f.taps {
                        let (a, b) = (diff[at(x + dx as i64, y + dy as i64)], diff[at(x - dx as i64, y - dy as i64)]);
                        for c in 0..3 {
                            resp[c] += k * (a[c] - b[c]);
                        }
                    }
                    total += f.weight * resp.iter().map(|v| v * v).sum::<f64>();
                    if let Some(g) = grad.as_deref_mut() {
                        for &(dx, dy, k) in &f.taps {
                            let (i, j) = (at(x + dx as i64, y + dy as i64), at(x - dx as i64, y - dy as i64));
                            for c in 0..3 {
                                let v = 2.0 * f.weight * resp[c] * k;
                                g[i][c] += v;
                                g[j][c] -= v;
                            }
                        }
                    }
                }
            }
        }
        total
    }

    pub fn distance(&self, pred: &FrameBuffer, target: &FrameBuffer) -> Result<f64> {
        check_same(pred, target)?;
        Ok(self.eval(pred, target, None))
    }

    /// Value and gradient w.r.t. `pred`.
    pub fn distance_grad(&self, pred: &FrameBuffer, target: &FrameBuffer) -> Result<(f64, Vec<[f64; 3]>)> {
        check_same(pred, target)?;
        let mut g = vec![[0.0; 3]; pred.rgb.len()];
        let v = self.eval(pred, target, Some(&mut g));
        Ok((v, g))
    }
}

/// `Σ ||C - Ĉ||²` over rays.
pub fn coarse_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension {
            context: "ray colors".into(),
            expected: target.len(),
            actual: pred.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|k| (p[k] - t[k]).powi(2)).sum::<f64>())
        .sum())
}

/// Patch sum of squared errors plus `lambda` times the perceptual metric.
pub fn fine_loss(pred: &FrameBuffer, target: &FrameBuffer, lambda: f64, metric: &PerceptualMetric) -> Result<f64> {
    check_same(pred, target)?;
    let mse = coarse_loss(&pred.rgb, &target.rgb)?;
    if lambda == 0.0 {
        return Ok(mse);
    }
    Ok(mse + lambda * metric.distance(pred, target)?)
}

/// [`fine_loss`] and its gradient w.r.t. `pred`.
pub fn fine_loss_grad(
    pred: &FrameBuffer,
    target: &FrameBuffer,
    lambda: f64,
    metric: &PerceptualMetric,
) -> Result<(f64, Vec<[f64; 3]>)> {
    check_same(pred, target)?;
    let mse = coarse_loss(&pred.rgb, &target.rgb)?;
    let (perc, mut g) = if lambda == 0.0 {
        (0.0, vec![[0.0; 3]; pred.rgb.len()])
    } else {
        metric.distance_grad(pred, target)?
    };
    for ((gi, p), t) in g.iter_mut().zip(&pred.rgb).zip(&target.rgb) {
        for k in 0..3 {
            gi[k] = lambda * gi[k] + 2.0 * (p[k] - t[k]);
        }
    }
    Ok((mse + lambda * perc, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(size: u32, seed: u64) -> FrameBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fb = FrameBuffer::new(size, size, [0.0; 3]);
        for px in fb.rgb.iter_mut() {
            *px = std::array::from_fn(|_| rng.random());
        }
        fb
    }

    #[test]
    fn coarse_loss_by_hand() {
        assert_eq!(coarse_loss(&[[0.5; 3]], &[[0.5; 3]]).unwrap(), 0.0);
        let l = coarse_loss(&[[0.6, 0.2, 0.2]], &[[0.5, 0.2, 0.2]]).unwrap();
        assert!((l - 0.01).abs() < 1e-15);
        assert!(coarse_loss(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn coarse_loss_ignores_ray_order() {
        let a = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.4], [0.5, 0.5, 0.0]];
        let b = [[0.3, 0.2, 0.1], [0.0, 0.1, 0.4], [0.2, 0.7, 0.1]];
        let pa = [a[2], a[0], a[1]];
        let pb = [b[2], b[0], b[1]];
        let (l1, l2) = (coarse_loss(&a, &b).unwrap(), coarse_loss(&pa, &pb).unwrap());
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn filters_have_no_dc_response() {
        let m = PerceptualMetric::default();
        let mut p = random_patch(32, 1);
        // Dyadic values keep the constant offset exact.
        for px in p.rgb.iter_mut() {
            *px = px.map(|v| (v * 256.0).round() / 256.0);
        }
        let mut q = p.clone();
        for px in q.rgb.iter_mut() {
            *px = px.map(|v| v + 0.25);
        }
        assert_eq!(m.distance(&p, &q).unwrap(), 0.0);
        let mse = coarse_loss(&p.rgb, &q.rgb).unwrap();
        assert_eq!(fine_loss(&p, &q, 0.5, &m).unwrap(), mse);
    }

    #[test]
    fn unit_step_gives_unit_response() {
        // One filter, one channel: a vertical edge of height 1.
        let m = PerceptualMetric {
            filters: vec![Filter::sobel_x(1.0)],
        };
        let mut p = FrameBuffer::new(4, 3, [0.0; 3]);
        for y in 0..3 {
            for x in 2..4 {
                p.set(x, y, [1.0, 0.0, 0.0]);
            }
        }
        let q = FrameBuffer::new(4, 3, [0.0; 3]);
        // Valid positions x = 1, 2 on row 1; both straddle the edge.
        assert!((m.distance(&p, &q).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_is_plain_sum_of_squares() {
        let m = PerceptualMetric::default();
        let (p, q) = (random_patch(16, 2), random_patch(16, 3));
        assert_eq!(fine_loss(&p, &q, 0.0, &m).unwrap(), coarse_loss(&p.rgb, &q.rgb).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = PerceptualMetric::default();
        let (p, q) = (random_patch(14, 4), random_patch(14, 5));
        let (_, g) = fine_loss_grad(&p, &q, 0.3, &m).unwrap();
        let h = 1e-6;
        for &(i, c) in &[(0usize, 0usize), (15, 1), (97, 2), (195, 0), (100, 1)] {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.rgb[i][c] += h;
            b.rgb[i][c] -= h;
            let fd = (fine_loss(&a, &q, 0.3, &m).unwrap() - fine_loss(&b, &q, 0.3, &m).unwrap()) / (2.0 * h);
            assert!((fd - g[i][c]).abs() <= 1e-6 * fd.abs().max(1.0), "{i},{c}: {fd} vs {}", g[i][c]);
        }
    }

    proptest! {
        #[test]
        fn metric_is_a_symmetric_nonnegative_distance(s1 in any::<u64>(), s2 in any::<u64>()) {
            let m = PerceptualMetric::default();
            let (p, q) = (random_patch(15, s1), random_patch(15, s2));
            let d = m.distance(&p, &q).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!((d - m.distance(&q, &p).unwrap()).abs() <= 1e-12 * d.max(1.0));
            prop_assert_eq!(m.distance(&p, &p).unwrap(), 0.0);
            prop_assert!(fine_loss(&p, &q, 0.1, &m).unwrap() >= coarse_loss(&p.rgb, &q.rgb).unwrap());
        }
    }
}
