//! Training-time augmentation: random horizontal/vertical flips and a bounded
//! random rotation. Never applied at evaluation or prediction time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_max_degrees: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            hflip: true,
            vflip: true,
            rotation_max_degrees: 36.0,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig {
            hflip: false,
            vflip: false,
            rotation_max_degrees: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.rotation_max_degrees == 0.0
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_degrees: f64,
}

impl AugmentParams {
    pub fn sample(config: &AugmentationConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hflip = config.hflip && rng.gen_bool(0.5);
        let vflip = config.vflip && rng.gen_bool(0.5);
        let max = config.rotation_max_degrees.abs();
        let angle_degrees = if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
        AugmentParams {
            hflip,
            vflip,
            angle_degrees,
        }
    }
}

pub fn augment(image: &Tensor3, config: &AugmentationConfig, seed: u64) -> Tensor3 {
    if config.is_identity() {
        return image.clone();
    }
    apply(image, &AugmentParams::sample(config, seed))
}

pub fn apply(image: &Tensor3, params: &AugmentParams) -> Tensor3 {
    let mut out = image.clone();
    if params.hflip {
        out = hflip(&out);
    }
    if params.vflip {
        out = vflip(&out);
    }
    if params.angle_degrees != 0.0 {
        out = rotate(&out, params.angle_degrees);
    }
    out
}

pub fn hflip(t: &Tensor3) -> Tensor3 {
    let mut out = t.clone();
    for c in 0..t.channels {
        for y in 0..t.height {
            for x in 0..t.width {
                *out.at_mut(c, y, x) = t.at(c, y, t.width - 1 - x);
            }
        }
    }
    out
}

pub fn vflip(t: &Tensor3) -> Tensor3 {
    let mut out = t.clone();
    for c in 0..t.channels {
        for y in 0..t.height {
            for x in 0..t.width {
                *out.at_mut(c, y, x) = t.at(c, t.height - 1 - y, x);
            }
        }
    }
    out
}

/// Counter-clockwise rotation about the image centre with bilinear sampling.
/// Samples falling outside the source are clamped to the nearest edge.
pub fn rotate(t: &Tensor3, degrees: f64) -> Tensor3 {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (t.width as f64 - 1.0) / 2.0;
    let cy = (t.height as f64 - 1.0) / 2.0;
    let max_x = (t.width - 1) as f64;
    let max_y = (t.height - 1) as f64;
    let mut out = Tensor3::zeros(t.channels, t.height, t.width);
    for y in 0..t.height {
        for x in 0..t.width {
            // Inverse mapping: rotate the destination point back by -angle.
            // Image y grows downward, so counter-clockwise on screen flips sin.
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = (cx + cos * dx - sin * dy).clamp(0.0, max_x);
            let sy = (cy + sin * dx + cos * dy).clamp(0.0, max_y);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(t.width - 1), (y0 + 1).min(t.height - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..t.channels {
                let top = t.at(c, y0, x0) * (1.0 - fx) + t.at(c, y0, x1) * fx;
                let bottom = t.at(c, y1, x0) * (1.0 - fx) + t.at(c, y1, x1) * fx;
                *out.at_mut(c, y, x) = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(size: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(3, size, size);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    *t.at_mut(c, y, x) = (c * 100 + y * size + x) as f64;
                }
            }
        }
        t
    }

    /// A single bright bar from the centre towards +x, used to recover the
    /// applied rotation.
    fn bar_image(size: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(1, size, size);
        let c = size / 2;
        for x in c..size - 4 {
            for dy in 0..2 {
                *t.at_mut(0, c - 1 + dy, x) = 1.0;
            }
        }
        t
    }

    /// Angle of the intensity-weighted centroid relative to the image centre.
    fn bar_angle(t: &Tensor3) -> f64 {
        let c = (t.width as f64 - 1.0) / 2.0;
        let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
        for y in 0..t.height {
            for x in 0..t.width {
                let v = t.at(0, y, x);
                sx += v * (x as f64 - c);
                sy += v * (y as f64 - c);
                m += v;
            }
        }
        (sy / m).atan2(sx / m).to_degrees()
    }

    #[test]
    fn disabled_is_identity() {
        let img = gradient_image(16);
        assert_eq!(augment(&img, &AugmentationConfig::disabled(), 42), img);
    }

    #[test]
    fn flips_are_involutions() {
        let img = gradient_image(9);
        let forced = AugmentParams {
            hflip: true,
            ..Default::default()
        };
        assert_eq!(apply(&apply(&img, &forced), &forced), img);
        assert_ne!(apply(&img, &forced), img);
        assert_eq!(vflip(&vflip(&img)), img);
    }

    #[test]
    fn shape_is_preserved() {
        let img = gradient_image(12);
        let cfg = AugmentationConfig::default();
        for seed in 0..20 {
            assert_eq!(augment(&img, &cfg, seed).shape(), img.shape());
        }
    }

    #[test]
    fn rotation_recovers_requested_angle() {
        let img = bar_image(64);
        let base = bar_angle(&img);
        for angle in [-30.0, -10.0, 5.0, 20.0, 35.0] {
            let rotated = rotate(&img, angle);
            // Screen-space counter-clockwise is negative in image coordinates.
            let measured = base - bar_angle(&rotated);
            assert!((measured - angle).abs() < 1.5, "asked {angle}, measured {measured}");
        }
    }

    #[test]
    fn sampled_rotation_is_bounded() {
        let img = bar_image(64);
        let cfg = AugmentationConfig {
            hflip: false,
            vflip: false,
            rotation_max_degrees: 36.0,
        };
        for seed in 0..200 {
            let p = AugmentParams::sample(&cfg, seed);
            assert!(p.angle_degrees.abs() <= 36.0);
            if seed < 10 {
                let measured = bar_angle(&img) - bar_angle(&augment(&img, &cfg, seed));
                assert!(measured.abs() <= 36.0 + 1.5, "seed {seed}: {measured}");
            }
        }
    }
}
