//! Image-quality metrics and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize_to_unit_cube, Aabb, FrameBuffer, Vec3};
use crate::nets::HeadField;
use crate::scene::{Region, SyntheticScene};

/// Reported in place of infinity for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Mean squared error over all pixels and channels.
pub fn mse(a: &FrameBuffer, b: &FrameBuffer) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension {
            context: "image comparison".into(),
            expected: a.pixels(),
            actual: b.pixels(),
        });
    }
    let sum: f64 = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.pixels()).max(1) as f64)
}

/// `10 log10(1 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &FrameBuffer, b: &FrameBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// MSE restricted to pixels where `mask` is set; `None` if the mask is empty.
pub fn masked_mse(a: &FrameBuffer, b: &FrameBuffer, mask: &[bool]) -> Result<Option<f64>> {
    mse(a, b)?;
    if mask.len() != a.pixels() {
        return Err(Error::Dimension {
            context: "pixel mask".into(),
            expected: a.pixels(),
            actual: mask.len(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((x, y), &m) in a.rgb.iter().zip(&b.rgb).zip(mask) {
        if m {
            sum += (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub mean_psnr: f64,
}

impl EvalReport {
    pub fn from_scores(frames: Vec<FrameScore>) -> Self {
        let mean_psnr = if frames.is_empty() {
            0.0
        } else {
            frames.iter().map(|f| f.psnr).sum::<f64>() / frames.len() as f64
        };
        EvalReport { frames, mean_psnr }
    }
}

/// Pixel bounding box `[x0, y0, x1, y1]` (exclusive upper corner) of the
/// pixels whose alpha exceeds `threshold`.
pub fn alpha_bbox(alpha: &[f64], width: u32, threshold: f64) -> Option<[f64; 4]> {
    let mut b = [u32::MAX, u32::MAX, 0, 0];
    let mut any = false;
    for (i, &a) in alpha.iter().enumerate() {
        if a > threshold {
            let (x, y) = (i as u32 % width, i as u32 / width);
            b = [b[0].min(x), b[1].min(y), b[2].max(x + 1), b[3].max(y + 1)];
            any = true;
        }
    }
    any.then(|| b.map(f64::from))
}

/// Mean absolute difference of the four box coordinates, in pixels.
pub fn bbox_error(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0
}

/// Attention statistics over surface points inside and outside the mouth
/// and eye regions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLocalization {
    /// Mean `‖v_a‖` on mouth points.
    pub audio_inside: f64,
    pub audio_outside: f64,
    /// Mean `sigmoid(v_e)` on eye points.
    pub eye_inside: f64,
    pub eye_outside: f64,
}

impl AttentionLocalization {
    pub fn audio_ratio(&self) -> f64 {
        self.audio_inside / self.audio_outside
    }

    pub fn eye_ratio(&self) -> f64 {
        self.eye_inside / self.eye_outside
    }
}

/// `None` when the field has no attention branches.
pub fn attention_localization(field: &HeadField, scene: &SyntheticScene, aabb: &Aabb, n: usize, seed: u64) -> Option<AttentionLocalization> {
    let unit = |pts: Vec<Vec3>| -> Vec<[f64; 3]> {
        pts.iter().map(|p| normalize_to_unit_cube(p, aabb).coords.into()).collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let norms = |pts: &[[f64; 3]]| -> Option<f64> {
        let (va, _) = field.attention_at(pts)?;
        Some(mean(&va.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect::<Vec<_>>()))
    };
    let gates = |pts: &[[f64; 3]]| -> Option<f64> { Some(mean(&field.attention_at(pts)?.1)) };
    let (m_in, m_out) = scene.surface_samples(Region::Mouth, n, seed);
    let (e_in, e_out) = scene.surface_samples(Region::Eyes, n, seed ^ 1);
    Some(AttentionLocalization {
        audio_inside: norms(&unit(m_in))?,
        audio_outside: norms(&unit(m_out))?,
        eye_inside: gates(&unit(e_in))?,
        eye_outside: gates(&unit(e_out))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_hit_the_cap() {
        let a = FrameBuffer::new(4, 4, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
    }

    #[test]
    fn black_versus_white_is_zero_db() {
        let a = FrameBuffer::new(4, 3, [0.0; 3]);
        let b = FrameBuffer::new(4, 3, [1.0; 3]);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn known_mse() {
        let a = FrameBuffer::new(2, 2, [0.5; 3]);
        let b = FrameBuffer::new(2, 2, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let a = FrameBuffer::new(2, 2, [0.5; 3]);
        let b = FrameBuffer::new(2, 3, [0.5; 3]);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn masked_mse_ignores_unmasked_pixels() {
        let a = FrameBuffer::new(2, 1, [0.0; 3]);
        let mut b = a.clone();
        b.rgb[1] = [1.0; 3];
        assert_eq!(masked_mse(&a, &b, &[true, false]).unwrap(), Some(0.0));
        assert_eq!(masked_mse(&a, &b, &[false, true]).unwrap(), Some(1.0));
        assert_eq!(masked_mse(&a, &b, &[false, false]).unwrap(), None);
    }

    #[test]
    fn alpha_box_covers_opaque_pixels() {
        let mut alpha = vec![0.0; 5 * 4];
        alpha[5 + 1] = 0.9;
        alpha[2 * 5 + 3] = 0.6;
        alpha[3 * 5 + 4] = 0.4;
        assert_eq!(alpha_bbox(&alpha, 5, 0.5), Some([1.0, 1.0, 4.0, 3.0]));
        assert_eq!(alpha_bbox(&alpha, 5, 0.95), None);
        assert_eq!(bbox_error(&[0.0, 0.0, 4.0, 4.0], &[1.0, 0.0, 4.0, 2.0]), 0.75);
    }
}
