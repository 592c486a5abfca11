//! Simulated vehicle-dynamics disturbances on front-view images.
//!
//! Pitch is a pure vertical translation and roll an in-plane rotation
//! about the image center. Revealed borders replicate the nearest edge
//! pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{Image, Interpolate, Sampling};

/// Row shift for a pitch of `degrees` at focal length `fy`.
pub fn pitch_shift_rows(fy: f64, degrees: f64) -> i64 {
    (fy * degrees.to_radians().tan()).round() as i64
}

/// Shift content vertically by `round(fy * tan(theta))` rows. Positive
/// angles (nose down) move content up.
pub fn apply_pitch<P: Copy>(image: &Image<P>, fy: f64, degrees: f64) -> Result<Image<P>> {
    if !(degrees.abs() < 45.0) {
        return Err(Error::AngleOutOfRange {
            degrees,
            bound: "< 45",
        });
    }
    let dv = pitch_shift_rows(fy, degrees);
    let h = image.height() as i64;
    let mut out = Vec::with_capacity(image.width() * image.height());
    for y in 0..h {
        let src = (y + dv).clamp(0, h - 1) as usize;
        out.extend_from_slice(image.row(src));
    }
    Image::from_vec(image.width(), image.height(), out)
}

/// Rotate content by `degrees` (counter-clockwise as displayed) about the
/// image center.
pub fn apply_roll<P: Interpolate>(image: &Image<P>, degrees: f64, sampling: Sampling) -> Result<Image<P>> {
    if !(degrees.abs() <= 90.0) {
        return Err(Error::AngleOutOfRange {
            degrees,
            bound: "<= 90",
        });
    }
    if degrees == 0.0 {
        return Ok(image.clone());
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (image.width() as f64 - 1.0) / 2.0;
    let cy = (image.height() as f64 - 1.0) / 2.0;
    Ok(Image::from_fn(image.width(), image.height(), |x, y| {
        // inverse map; y grows downward so a displayed CCW turn is a
        // clockwise turn in pixel coordinates
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = c * dx - s * dy + cx;
        let sy = s * dx + c * dy + cy;
        image.sample(sx, sy, sampling)
    }))
}

/// One row of a perturbation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Perturbation {
    None,
    Pitch(f64),
    Roll(f64),
}

impl Perturbation {
    /// Perturbation on a photometric image with focal length `fy`.
    pub fn apply_photometric<P: Interpolate>(&self, image: &Image<P>, fy: f64) -> Result<Image<P>> {
        match *self {
            Perturbation::None => Ok(image.clone()),
            Perturbation::Pitch(d) => apply_pitch(image, fy, d),
            Perturbation::Roll(d) => apply_roll(image, d, Sampling::Bilinear),
        }
    }

    /// Same perturbation on a label image (nearest-neighbour sampling).
    pub fn apply_labels(&self, image: &Image<u8>, fy: f64) -> Result<Image<u8>> {
        match *self {
            Perturbation::None => Ok(image.clone()),
            Perturbation::Pitch(d) => apply_pitch(image, fy, d),
            Perturbation::Roll(d) => apply_roll(image, d, Sampling::Nearest),
        }
    }

    pub fn negated(&self) -> Perturbation {
        match *self {
            Perturbation::None => Perturbation::None,
            Perturbation::Pitch(d) => Perturbation::Pitch(-d),
            Perturbation::Roll(d) => Perturbation::Roll(-d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image<u8> {
        Image::from_fn(6, 10, |x, y| (y * 10 + x) as u8)
    }

    #[test]
    fn shift_examples() {
        assert_eq!(pitch_shift_rows(200.0, 1.5), 5);
        assert_eq!(pitch_shift_rows(2262.0, 1.5), 59);
        assert_eq!(pitch_shift_rows(2262.0, -1.5), -59);
        assert_eq!(pitch_shift_rows(500.0, 0.0), 0);
    }

    #[test]
    fn pitch_zero_is_identity() {
        let img = ramp();
        assert_eq!(apply_pitch(&img, 200.0, 0.0).unwrap(), img);
    }

    #[test]
    fn pitch_moves_content_up_and_replicates() {
        let img = ramp();
        // fy tan(theta) = 2 rows
        let deg = (2.0f64 / 100.0).atan().to_degrees();
        let out = apply_pitch(&img, 100.0, deg).unwrap();
        assert_eq!(out.row(0), img.row(2));
        assert_eq!(out.row(9), img.row(9));
        assert_eq!(out.row(8), img.row(9));
        assert!(apply_pitch(&img, 100.0, 45.0).is_err());
    }

    #[test]
    fn roll_zero_identity_and_range() {
        let img = ramp();
        assert_eq!(apply_roll(&img, 0.0, Sampling::Nearest).unwrap(), img);
        assert!(apply_roll(&img, 91.0, Sampling::Nearest).is_err());
        assert!(apply_roll(&img, -90.0, Sampling::Nearest).is_ok());
    }

    #[test]
    fn roll_90_rotates_square() {
        let img = Image::from_fn(3, 3, |x, y| (y * 3 + x) as u8);
        let out = apply_roll(&img, 90.0, Sampling::Nearest).unwrap();
        // counter-clockwise as displayed: top row becomes left column reversed
        assert_eq!(out.get(0, 0), img.get(2, 0));
        assert_eq!(out.get(0, 2), img.get(0, 0));
        assert_eq!(out.get(1, 1), img.get(1, 1));
    }
}
