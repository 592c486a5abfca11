//! Monocular baseline: every ground-labeled pixel is assumed to lie on
//! the z = 0 plane of the vehicle frame.

use crate::camera::{CameraRig, GroundCaster};
use crate::error::{Error, Result};
use crate::grid::{GridMap, GridSpec};
use crate::gt::{ClassMapping, LabelRole, VoteGrid};
use crate::imageio::LabelImage;

pub fn flatplane_map(labels: &LabelImage, rig: &CameraRig, spec: &GridSpec, mapping: &ClassMapping) -> Result<GridMap> {
    let k = &rig.intrinsics;
    if labels.width() != k.width || labels.height() != k.height {
        return Err(Error::DimensionMismatch(format!(
            "labels {}x{} vs calibration {}x{}",
            labels.width(),
            labels.height(),
            k.width,
            k.height
        )));
    }
    let caster = GroundCaster::new(rig);
    let mut votes = VoteGrid::new(*spec);
    for v in 0..k.height {
        for (u, &label) in labels.row(v).iter().enumerate() {
            let LabelRole::Ground(class) = mapping.role(label) else {
                continue;
            };
            if let Some((x, y)) = caster.intersect(u as f64, v as f64) {
                votes.add(x, y, class);
            }
        }
    }
    votes.finish(rig.fov_mask(spec))
}
