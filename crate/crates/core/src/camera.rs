//! Pinhole camera geometry.
//!
//! Camera frame is x right, y down, z forward; `cam_to_vehicle` maps it
//! into the vehicle frame (x forward, y left, z up). Pixel coordinates put
//! pixel centers on integers, so the image spans `[-0.5, width - 0.5)`.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::imageio::{Image, Interpolate, Sampling};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) || !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Horizontal field of view in radians.
    pub fn hfov(&self) -> f64 {
        2.0 * (self.width as f64 / (2.0 * self.fx)).atan()
    }

    /// Intrinsics of the same camera resampled to `width` x `height`.
    pub fn scaled_to(&self, width: usize, height: usize) -> Intrinsics {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && u < self.width as f64 - 0.5 && v >= -0.5 && v < self.height as f64 - 0.5
    }
}

/// Rotation taking a level camera frame into the vehicle frame.
pub fn level_rotation() -> Matrix3<f64> {
    // columns: images of camera x (right), y (down), z (forward)
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub intrinsics: Intrinsics,
    pub baseline_m: f64,
    pub cam_to_vehicle: Matrix4<f64>,
}

impl CameraRig {
    pub fn new(intrinsics: Intrinsics, baseline_m: f64, cam_to_vehicle: Matrix4<f64>) -> Result<Self> {
        let rig = Self {
            intrinsics,
            baseline_m,
            cam_to_vehicle,
        };
        rig.validate()?;
        Ok(rig)
    }

    /// Forward-looking level camera at vehicle position `position`.
    pub fn level(intrinsics: Intrinsics, baseline_m: f64, position: [f64; 3]) -> Result<Self> {
        Self::with_pose(intrinsics, baseline_m, level_rotation(), position)
    }

    /// Camera pitched nose-down by `pitch_deg` about the vehicle y axis.
    pub fn pitched(intrinsics: Intrinsics, baseline_m: f64, position: [f64; 3], pitch_deg: f64) -> Result<Self> {
        let pitch = Rotation3::from_axis_angle(&Vector3::y_axis(), pitch_deg.to_radians());
        Self::with_pose(intrinsics, baseline_m, pitch.matrix() * level_rotation(), position)
    }

    fn with_pose(intrinsics: Intrinsics, baseline_m: f64, r: Matrix3<f64>, t: [f64; 3]) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::from(t));
        Self::new(intrinsics, baseline_m, m)
    }

    /// Default desk rig: 2048 x 1024 image, 2262 px focal length, 0.22 m
    /// baseline, level camera 1.5 m above the ground and 1 m ahead of the
    /// vehicle origin.
    pub fn desk_default() -> Self {
        let k = Intrinsics::centered(2262.0, 2048, 1024).expect("valid intrinsics");
        Self::level(k, 0.22, [1.0, 0.0, 1.5]).expect("valid rig")
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !(self.baseline_m > 0.0) {
            return Err(Error::InvalidCamera(format!("baseline {} must be positive", self.baseline_m)));
        }
        let m = &self.cam_to_vehicle;
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite pose".into()));
        }
        if (m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(Error::InvalidCamera("pose bottom row must be (0, 0, 0, 1)".into()));
        }
        let r = self.rotation();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCamera("rotation is not orthonormal with det +1".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn rotation(&self) -> Matrix3<f64> {
        self.cam_to_vehicle.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera center in the vehicle frame.
    #[inline]
    pub fn origin(&self) -> Vector3<f64> {
        self.cam_to_vehicle.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Same physical camera observed at another image resolution.
    pub fn scaled_to(&self, width: usize, height: usize) -> CameraRig {
        CameraRig {
            intrinsics: self.intrinsics.scaled_to(width, height),
            ..self.clone()
        }
    }

    /// Copy with replaced intrinsics.
    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> CameraRig {
        CameraRig {
            intrinsics,
            ..self.clone()
        }
    }

    pub fn disparity_to_depth(&self, disparity: f64) -> Result<f64> {
        if !(disparity > 0.0) {
            return Err(Error::InvalidDisparity(disparity));
        }
        Ok(self.intrinsics.fx * self.baseline_m / disparity)
    }

    pub fn depth_to_disparity(&self, depth: f64) -> f64 {
        self.intrinsics.fx * self.baseline_m / depth
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    #[inline]
    pub fn camera_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
    }

    /// Vehicle-frame point seen at pixel `(u, v)` with camera depth `depth`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth(depth));
        }
        Ok(self.rotation() * (self.camera_ray(u, v) * depth) + self.origin())
    }

    /// Pixel coordinates and camera depth of a vehicle-frame point; `None`
    /// when the point is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.rotation().transpose() * (p - self.origin());
        if !(c.z > 0.0) {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }

    /// Where the ray through `(u, v)` meets the z = 0 ground plane.
    pub fn ray_ground_intersection(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        GroundCaster::new(self).intersect(u, v)
    }

    /// Cells whose centers, placed on the ground, project inside the image
    /// in front of the camera.
    pub fn fov_mask(&self, spec: &GridSpec) -> Vec<bool> {
        let mut mask = vec![false; spec.len()];
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let (x, y) = spec.cell_center_unchecked(row, col);
                mask[spec.index(row, col)] = self
                    .project(&Vector3::new(x, y, 0.0))
                    .is_some_and(|(u, v, _)| self.intrinsics.contains(u, v));
            }
        }
        mask
    }

    pub fn to_calibration(&self) -> Calibration {
        let k = &self.intrinsics;
        let mut pose = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                pose[r * 4 + c] = self.cam_to_vehicle[(r, c)];
            }
        }
        Calibration {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            baseline_m: self.baseline_m,
            cam_to_vehicle: pose,
        }
    }

    pub fn from_calibration(c: &Calibration) -> Result<Self> {
        let k = Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?;
        Self::new(k, c.baseline_m, Matrix4::from_row_slice(&c.cam_to_vehicle))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: Calibration = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        Self::from_calibration(&c)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec_pretty(&self.to_calibration()).map_err(|e| Error::json(path, e))?;
        crate::imageio::write_bytes(path, &bytes)
    }
}

/// Calibration file contents; `cam_to_vehicle` is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub baseline_m: f64,
    pub cam_to_vehicle: [f64; 16],
}

/// Precomputed pose for casting many pixel rays onto the ground plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GroundCaster {
    r: Matrix3<f64>,
    o: Vector3<f64>,
    k: Intrinsics,
}

impl GroundCaster {
    pub(crate) fn new(rig: &CameraRig) -> Self {
        Self {
            r: rig.rotation(),
            o: rig.origin(),
            k: rig.intrinsics,
        }
    }

    #[inline]
    pub(crate) fn direction(&self, u: f64, v: f64) -> Vector3<f64> {
        self.r * Vector3::new((u - self.k.cx) / self.k.fx, (v - self.k.cy) / self.k.fy, 1.0)
    }

    #[inline]
    pub(crate) fn intersect(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        let w = self.direction(u, v);
        if !(w.z < 0.0 && self.o.z > 0.0) {
            return None;
        }
        let t = -self.o.z / w.z;
        Some((self.o.x + t * w.x, self.o.y + t * w.y))
    }
}

/// Geometry of an [`align_to_reference`] resampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    /// Width of the centered horizontal crop in source pixels.
    pub crop_width: f64,
    /// Left edge of the crop in source pixel units.
    pub crop_left: f64,
    /// Source-to-output scale factor.
    pub scale: f64,
    /// Vertical translation in output pixels (positive moves content down).
    pub shift_rows: i64,
    pub intrinsics: Intrinsics,
}

/// Crop, translate and rescale so the source camera matches the
/// reference horizontal FOV, principal-point row and resolution.
pub fn alignment(src: &Intrinsics, reference: &Intrinsics) -> Result<Alignment> {
    let (src_fov, ref_fov) = (src.hfov(), reference.hfov());
    if src_fov + 1e-12 < ref_fov {
        return Err(Error::FovTooNarrow {
            src: src_fov,
            reference: ref_fov,
        });
    }
    let half_tan = reference.width as f64 / (2.0 * reference.fx);
    let crop_width = (2.0 * src.fx * half_tan).min(src.width as f64);
    let crop_left = (src.width as f64 - crop_width) / 2.0;
    let scale = reference.width as f64 / crop_width;
    let cy_scaled = (src.cy + 0.5) * scale - 0.5;
    let shift_rows = (reference.cy - cy_scaled).round() as i64;
    let intrinsics = Intrinsics {
        fx: src.fx * scale,
        fy: src.fy * scale,
        cx: (src.cx - crop_left + 0.5) * scale - 0.5,
        cy: cy_scaled + shift_rows as f64,
        width: reference.width,
        height: reference.height,
    };
    Ok(Alignment {
        crop_width,
        crop_left,
        scale,
        shift_rows,
        intrinsics,
    })
}

/// Resample `image` from the `src` camera so it matches `reference`.
/// Use [`Sampling::Nearest`] for label images.
pub fn align_to_reference<P: Interpolate>(
    image: &Image<P>,
    src: &Intrinsics,
    reference: &Intrinsics,
    sampling: Sampling,
) -> Result<(Image<P>, Intrinsics)> {
    if image.width() != src.width || image.height() != src.height {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs calibration {}x{}",
            image.width(),
            image.height(),
            src.width,
            src.height
        )));
    }
    let a = alignment(src, reference)?;
    let out = Image::from_fn(reference.width, reference.height, |x, y| {
        let yy = y as f64 - a.shift_rows as f64;
        let su = a.crop_left + (x as f64 + 0.5) / a.scale - 0.5;
        let sv = (yy + 0.5) / a.scale - 0.5;
        image.sample(su, sv, sampling)
    });
    Ok((out, a.intrinsics))
}
