//! Weak ground truth: labeled disparity to a top-view grid by per-cell
//! majority vote.
//!
//! Fed with predicted instead of annotated labels, the same pipeline is
//! the binocular "with disparity" baseline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::grid::{GridMap, GridSpec, SemanticClass};
use crate::imageio::{DisparityImage, LabelImage};

/// What a front-view label id contributes to the top-view grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelRole {
    Ground(SemanticClass),
    /// Any non-ground surface; tallies as non-free space.
    NonGround,
    Ignore,
}

/// Total map from front-view label ids to grid roles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMapping {
    table: [LabelRole; 256],
}

#[derive(Serialize, Deserialize)]
struct MappingFile {
    ground: BTreeMap<String, u8>,
    #[serde(default)]
    ignore: Vec<u8>,
}

impl ClassMapping {
    /// Unlisted ids map to non-ground. Every ground class must receive at
    /// least one label id.
    pub fn new(ground: &[(u8, SemanticClass)], ignore: &[u8]) -> Result<Self> {
        let mut table = [LabelRole::NonGround; 256];
        for &(id, class) in ground {
            if !class.is_ground() {
                return Err(Error::Malformed {
                    format: "class mapping",
                    reason: format!("label {id} mapped to non-ground class 0 under \"ground\""),
                });
            }
            table[id as usize] = LabelRole::Ground(class);
        }
        for &id in ignore {
            table[id as usize] = LabelRole::Ignore;
        }
        let mapping = Self { table };
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn validate(&self) -> Result<()> {
        for class in [SemanticClass::Road, SemanticClass::Sidewalk, SemanticClass::Terrain] {
            if !self.table.contains(&LabelRole::Ground(class)) {
                return Err(Error::EmptyMapping(class.id()));
            }
        }
        Ok(())
    }

    /// Label ids emitted by the synthetic renderer.
    pub fn synthetic() -> Self {
        use crate::synth::labels;
        Self::new(
            &[
                (labels::ROAD, SemanticClass::Road),
                (labels::SIDEWALK, SemanticClass::Sidewalk),
                (labels::TERRAIN, SemanticClass::Terrain),
            ],
            &[],
        )
        .expect("synthetic mapping covers all ground classes")
    }

    #[inline]
    pub fn role(&self, label: u8) -> LabelRole {
        self.table[label as usize]
    }

    pub fn from_json_bytes(bytes: &[u8]) -> std::result::Result<Self, MappingParseError> {
        let file: MappingFile = serde_json::from_slice(bytes).map_err(MappingParseError::Json)?;
        let mut ground = Vec::with_capacity(file.ground.len());
        for (key, class) in &file.ground {
            let id: u8 = key
                .parse()
                .map_err(|_| MappingParseError::Invalid(Error::Malformed {
                    format: "class mapping",
                    reason: format!("label id {key:?} is not in 0..=255"),
                }))?;
            let class = SemanticClass::try_from(*class).map_err(MappingParseError::Invalid)?;
            ground.push((id, class));
        }
        Self::new(&ground, &file.ignore).map_err(MappingParseError::Invalid)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_bytes(&bytes).map_err(|e| match e {
            MappingParseError::Json(source) => Error::json(path, source),
            MappingParseError::Invalid(err) => err,
        })
    }

    pub fn to_json(&self) -> String {
        let mut ground = BTreeMap::new();
        let mut ignore = Vec::new();
        for (id, role) in self.table.iter().enumerate() {
            match role {
                LabelRole::Ground(c) => {
                    ground.insert(id.to_string(), c.id());
                }
                LabelRole::Ignore => ignore.push(id as u8),
                LabelRole::NonGround => {}
            }
        }
        serde_json::to_string_pretty(&MappingFile { ground, ignore }).expect("mapping serializes")
    }
}

#[derive(Debug)]
pub enum MappingParseError {
    Json(serde_json::Error),
    Invalid(Error),
}

/// Point tallies for one cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CellVote {
    pub counts: [u32; SemanticClass::COUNT],
}

impl CellVote {
    #[inline]
    pub fn add(&mut self, class: SemanticClass) {
        self.counts[class.index()] += 1;
    }

    /// Largest tally; ties go to the lower class id, so an empty cell and
    /// any tie involving non-free space resolve to non-free.
    #[inline]
    pub fn winner(&self) -> SemanticClass {
        let mut best = 0;
        for k in 1..SemanticClass::COUNT {
            if self.counts[k] > self.counts[best] {
                best = k;
            }
        }
        SemanticClass::ALL[best]
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

/// Per-cell vote accumulator.
#[derive(Clone, Debug)]
pub struct VoteGrid {
    spec: GridSpec,
    votes: Vec<CellVote>,
}

impl VoteGrid {
    pub fn new(spec: GridSpec) -> Self {
        Self {
            spec,
            votes: vec![CellVote::default(); spec.len()],
        }
    }

    /// Tally `class` at vehicle point `(x, y)`; returns whether it landed
    /// inside the grid.
    #[inline]
    pub fn add(&mut self, x: f64, y: f64, class: SemanticClass) -> bool {
        match self.spec.world_to_cell(x, y) {
            Some((r, c)) => {
                self.votes[self.spec.index(r, c)].add(class);
                true
            }
            None => false,
        }
    }

    pub fn votes(&self) -> &[CellVote] {
        &self.votes
    }

    pub fn finish(self, eval_mask: Vec<bool>) -> Result<GridMap> {
        let classes = self.votes.iter().map(CellVote::winner).collect();
        GridMap::from_parts(self.spec, classes, eval_mask)
    }
}

/// Majority-vote grid from vehicle-frame `(x, y, class)` points.
pub fn grid_from_pointlist(points: &[(f64, f64, SemanticClass)], spec: &GridSpec, mask: Vec<bool>) -> Result<GridMap> {
    let mut votes = VoteGrid::new(*spec);
    for &(x, y, class) in points {
        votes.add(x, y, class);
    }
    votes.finish(mask)
}

/// Back-project every valid, non-ignored pixel and vote it into the grid.
///
/// Non-positive disparity marks invalid pixels. With `ceiling_m` set,
/// points higher than the ceiling are dropped.
pub fn project_labeled_cloud(
    disparity: &DisparityImage,
    labels: &LabelImage,
    rig: &CameraRig,
    spec: &GridSpec,
    mapping: &ClassMapping,
    ceiling_m: Option<f64>,
) -> Result<GridMap> {
    let k = &rig.intrinsics;
    if !disparity.same_size(labels) || disparity.width() != k.width || disparity.height() != k.height {
        return Err(Error::DimensionMismatch(format!(
            "disparity {}x{}, labels {}x{}, calibration {}x{}",
            disparity.width(),
            disparity.height(),
            labels.width(),
            labels.height(),
            k.width,
            k.height
        )));
    }
    mapping.validate()?;
    let r = rig.rotation();
    let o = rig.origin();
    let focal_baseline = k.fx * rig.baseline_m;
    let mut votes = VoteGrid::new(*spec);
    for v in 0..k.height {
        let drow = disparity.row(v);
        let lrow = labels.row(v);
        let cy = (v as f64 - k.cy) / k.fy;
        for u in 0..k.width {
            let d = drow[u] as f64;
            if !(d > 0.0) {
                continue;
            }
            let class = match mapping.role(lrow[u]) {
                LabelRole::Ignore => continue,
                LabelRole::Ground(c) => c,
                LabelRole::NonGround => SemanticClass::NonFree,
            };
            let z = focal_baseline / d;
            let cam = nalgebra::Vector3::new((u as f64 - k.cx) / k.fx * z, cy * z, z);
            let p = r * cam + o;
            if ceiling_m.is_some_and(|c| p.z > c) {
                continue;
            }
            votes.add(p.x, p.y, class);
        }
    }
    votes.finish(rig.fov_mask(spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::imageio::Image;
    use SemanticClass::*;

    fn rig() -> CameraRig {
        CameraRig::level(Intrinsics::centered(200.0, 400, 400).unwrap(), 0.5, [0.0, 0.0, 1.5]).unwrap()
    }

    #[test]
    fn tie_break_prefers_lower_id() {
        let mut v = CellVote::default();
        for c in [Road, Road, Terrain, Terrain] {
            v.add(c);
        }
        assert_eq!(v.winner(), Road);
        v.add(NonFree);
        v.add(NonFree);
        assert_eq!(v.winner(), NonFree);
        assert_eq!(CellVote::default().winner(), NonFree);
    }

    #[test]
    fn pointlist_examples() {
        let spec = GridSpec::default();
        let empty = grid_from_pointlist(&[], &spec, vec![true; spec.len()]).unwrap();
        assert_eq!(empty.class_count(NonFree), spec.len());
        let pts = [(20.25, -3.1, Road), (20.3, -3.2, Road), (20.4, -3.0, Road), (20.2, -3.1, Sidewalk)];
        let g = grid_from_pointlist(&pts, &spec, vec![true; spec.len()]).unwrap();
        assert_eq!(g.get(33, 38), Road);
        assert_eq!(g.class_count(Road), 1);
    }

    #[test]
    fn all_invalid_disparity_is_nonfree() {
        let rig = rig();
        let spec = GridSpec::default();
        let disp = Image::new(400, 400, 0.0f32);
        let labels = Image::new(400, 400, crate::synth::labels::ROAD);
        let g = project_labeled_cloud(&disp, &labels, &rig, &spec, &ClassMapping::synthetic(), None).unwrap();
        assert_eq!(g.class_count(NonFree), spec.len());
        assert_eq!(g.eval_mask(), rig.fov_mask(&spec).as_slice());
    }

    #[test]
    fn single_pixel_lands_in_expected_cell() {
        // hand projection: vehicle point (20.25, -3.1, 0) seen from a level
        // camera 1.5 m up at the origin: Z = 20.25, u = cx + f*3.1/20.25,
        // v = cy + f*1.5/20.25. Choose f so both are representable: use the
        // exact pixel and solve disparity from Z.
        let rig = rig();
        let k = rig.intrinsics;
        let z = 20.25;
        let u = k.cx + k.fx * 3.1 / z;
        let v = k.cy + k.fy * 1.5 / z;
        // snap to the containing pixel and recompute the depth that keeps y
        let (ui, vi) = (u.round() as usize, v.round() as usize);
        let z_pix = k.fy * 1.5 / (vi as f64 - k.cy);
        let x_pix = z_pix;
        let y_pix = -(ui as f64 - k.cx) * z_pix / k.fx;
        assert_eq!(GridSpec::default().world_to_cell(x_pix, y_pix), Some((33, 38)), "pixel choice");
        let mut disp = Image::new(400, 400, 0.0f32);
        disp.set(ui, vi, (k.fx * rig.baseline_m / z_pix) as f32);
        let labels = Image::new(400, 400, crate::synth::labels::ROAD);
        let spec = GridSpec::default();
        let g = project_labeled_cloud(&disp, &labels, &rig, &spec, &ClassMapping::synthetic(), None).unwrap();
        assert_eq!(g.get(33, 38), Road);
        assert_eq!(g.class_count(Road), 1);
        assert_eq!(g.class_count(NonFree), spec.len() - 1);
    }

    #[test]
    fn ceiling_drops_high_points() {
        let rig = rig();
        let k = rig.intrinsics;
        let spec = GridSpec::default();
        // pixel above the horizon at depth 10 m: point height 1.5 + 1 = 2.5 m
        let mut disp = Image::new(400, 400, 0.0f32);
        disp.set(200, (k.cy - 20.0) as usize, (k.fx * 0.5 / 10.0) as f32);
        let labels = Image::new(400, 400, 26u8);
        let m = ClassMapping::synthetic();
        let low = project_labeled_cloud(&disp, &labels, &rig, &spec, &m, None).unwrap();
        let (r, c) = spec.world_to_cell(10.0, 0.0).unwrap();
        assert_eq!(low.get(r, c), NonFree);
        // ground label to make the effect visible
        let road = Image::new(400, 400, crate::synth::labels::ROAD);
        let with = project_labeled_cloud(&disp, &road, &rig, &spec, &m, None).unwrap();
        assert_eq!(with.get(r, c), Road);
        let capped = project_labeled_cloud(&disp, &road, &rig, &spec, &m, Some(2.0)).unwrap();
        assert_eq!(capped.get(r, c), NonFree);
    }

    #[test]
    fn dimension_mismatch() {
        let rig = rig();
        let disp = Image::new(10, 10, 1.0f32);
        let labels = Image::new(10, 10, 0u8);
        assert!(matches!(
            project_labeled_cloud(&disp, &labels, &rig, &GridSpec::default(), &ClassMapping::synthetic(), None),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn mapping_json() {
        let m = ClassMapping::from_json_bytes(br#"{"ground": {"7": 1, "8": 2, "22": 3}, "ignore": [0, 255]}"#).unwrap();
        assert_eq!(m.role(7), LabelRole::Ground(Road));
        assert_eq!(m.role(0), LabelRole::Ignore);
        assert_eq!(m.role(26), LabelRole::NonGround);
        assert_eq!(ClassMapping::from_json_bytes(m.to_json().as_bytes()).unwrap(), m);
        assert!(matches!(
            ClassMapping::from_json_bytes(br#"{"ground": {"7": 1, "8": 2}}"#),
            Err(MappingParseError::Invalid(Error::EmptyMapping(3)))
        ));
        assert!(ClassMapping::from_json_bytes(br#"{"ground": {"7": 1, "8": 2, "22": 9}}"#).is_err());
        assert!(ClassMapping::from_json_bytes(br#"{"ground": {"300": 1}}"#).is_err());
    }
}
