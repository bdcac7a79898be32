use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Random image transforms applied in order: rotation, flips, scale-with-crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub rotate: bool,
    /// Rotation angle is uniform in `±rotation_degrees`.
    pub rotation_degrees: f64,
    pub flip: bool,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub scale: bool,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotate: true,
            rotation_degrees: 30.0,
            flip: true,
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            scale: true,
            scale_min: 0.8,
            scale_max: 1.2,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            rotate: false,
            flip: false,
            scale: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.rotate || self.flip || self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotate && !(self.rotation_degrees > 0.0 && self.rotation_degrees.is_finite()) {
            return Err(Error::Config(format!(
                "rotation range must be positive, got {}",
                self.rotation_degrees
            )));
        }
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if self.flip
            && (!prob_ok(self.flip_h_prob)
                || !prob_ok(self.flip_v_prob)
                || self.flip_h_prob + self.flip_v_prob == 0.0)
        {
            return Err(Error::Config(format!(
                "flip probabilities must be in [0, 1] and not both zero, got {} / {}",
                self.flip_h_prob, self.flip_v_prob
            )));
        }
        if self.scale && !(self.scale_min > 0.0 && self.scale_min < self.scale_max) {
            return Err(Error::Config(format!(
                "scale range must satisfy 0 < min < max, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

fn image_dims(img: &Array) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::Usage(format!(
            "augmentation needs a C×H×W image, got shape {other:?}"
        ))),
    }
}

/// Nearest-neighbour resample: `out(y, x) = img(src(y, x))`, zero outside.
fn resample(img: &Array, src: impl Fn(f64, f64) -> (f64, f64)) -> Result<Array> {
    let (c, h, w) = image_dims(img)?;
    let data = img.data();
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f64, x as f64);
            let (sy, sx) = (sy.round(), sx.round());
            if sy < 0.0 || sx < 0.0 || sy >= h as f64 || sx >= w as f64 {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for ch in 0..c {
                out[(ch * h + y) * w + x] = data[(ch * h + sy) * w + sx];
            }
        }
    }
    Array::new(img.shape().to_vec(), out)
}

fn center(img: &Array) -> Result<(f64, f64)> {
    let (_, h, w) = image_dims(img)?;
    Ok(((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0))
}

/// Rotates counter-clockwise by `degrees` about the image center.
pub fn rotate(img: &Array, degrees: f64) -> Result<Array> {
    let (cy, cx) = center(img)?;
    let (sin, cos) = degrees.to_radians().sin_cos();
    resample(img, |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    })
}

pub fn flip_horizontal(img: &Array) -> Result<Array> {
    let (_, _, w) = image_dims(img)?;
    resample(img, |y, x| (y, w as f64 - 1.0 - x))
}

pub fn flip_vertical(img: &Array) -> Result<Array> {
    let (_, h, _) = image_dims(img)?;
    resample(img, |y, x| (h as f64 - 1.0 - y, x))
}

/// Scales by `factor` about the center and crops (or zero-pads) back to the input size.
pub fn scale_crop(img: &Array, factor: f64) -> Result<Array> {
    if !(factor > 0.0) {
        return Err(Error::Usage(format!(
            "scale factor must be positive, got {factor}"
        )));
    }
    let (cy, cx) = center(img)?;
    resample(img, |y, x| (cy + (y - cy) / factor, cx + (x - cx) / factor))
}

/// Applies `policy` to one `C×H×W` image. Disabled transforms draw no randomness.
pub fn augment<R: Rng + ?Sized>(img: &Array, policy: &AugmentPolicy, rng: &mut R) -> Result<Array> {
    image_dims(img)?;
    let mut out = img.clone();
    if policy.rotate {
        let r = policy.rotation_degrees;
        out = rotate(&out, rng.random_range(-r..=r))?;
    }
    if policy.flip {
        if rng.random::<f64>() < policy.flip_h_prob {
            out = flip_horizontal(&out)?;
        }
        if rng.random::<f64>() < policy.flip_v_prob {
            out = flip_vertical(&out)?;
        }
    }
    if policy.scale {
        out = scale_crop(&out, rng.random_range(policy.scale_min..=policy.scale_max))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    fn pattern() -> Array {
        Array::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    #[test]
    fn disabled_policy_is_identity() {
        let img = pattern();
        let mut rng = stream_rng(0, 0);
        let out = augment(&img, &AugmentPolicy::disabled(), &mut rng).unwrap();
        assert!(out.bit_eq(&img));
    }

    #[test]
    fn half_turn_reverses_indices() {
        let out = rotate(&pattern(), 180.0).unwrap();
        assert_eq!(out.data(), &[0.4, 0.3, 0.2, 0.1]);
    }

    #[test]
    fn flips_are_involutions() {
        let img = Array::new(vec![2, 3, 2], (0..12).map(|v| v as f64 / 12.0).collect()).unwrap();
        let h = flip_horizontal(&img).unwrap();
        assert!(!h.bit_eq(&img));
        assert!(flip_horizontal(&h).unwrap().bit_eq(&img));
        let v = flip_vertical(&img).unwrap();
        assert!(flip_vertical(&v).unwrap().bit_eq(&img));
    }

    #[test]
    fn vectors_are_rejected() {
        let mut rng = stream_rng(0, 0);
        assert!(matches!(
            augment(&Array::vector(vec![0.0; 4]), &AugmentPolicy::default(), &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn degenerate_ranges_are_config_errors() {
        let p = AugmentPolicy {
            scale_min: 1.2,
            scale_max: 1.2,
            ..AugmentPolicy::default()
        };
        assert!(p.validate().is_err());
        assert!(AugmentPolicy::default().validate().is_ok());
        assert!(AugmentPolicy {
            scale_min: 1.2,
            ..AugmentPolicy::disabled()
        }
        .validate()
        .is_ok());
    }

    proptest! {
        #[test]
        fn shape_and_range_preserved(
            seed in 0u64..1000,
            h in 1usize..9,
            w in 1usize..9,
            vals in proptest::collection::vec(0.0f64..=1.0, 2 * 81),
        ) {
            let img = Array::new(vec![2, h, w], vals[..2 * h * w].to_vec()).unwrap();
            let mut rng = stream_rng(seed, 0);
            let out = augment(&img, &AugmentPolicy::default(), &mut rng).unwrap();
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
