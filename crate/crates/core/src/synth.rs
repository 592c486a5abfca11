//! Procedural driving scenes with analytic top-view truth.
//!
//! A scene is a road band around a (possibly curved) centerline flanked by
//! sidewalks, terrain and unlabeled ground, optionally sloping beyond a
//! start distance, plus box obstacles. [`render`] ray-casts it into the
//! front-view RGB, label and disparity images a stereo rig would deliver;
//! [`true_grid`] classifies grid cells directly from the layout.

use std::fs;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Calibration, CameraRig};
use crate::error::{Error, Result};
use crate::grid::{write_grid, GridMap, GridSpec, SemanticClass};
use crate::imageio::{self, DisparityImage, Image, LabelImage, RgbImage};
use crate::par::Execution;

/// Front-view label ids produced by the renderer (Cityscapes numbering).
pub mod labels {
    pub const GROUND: u8 = 6;
    pub const ROAD: u8 = 7;
    pub const SIDEWALK: u8 = 8;
    pub const TERRAIN: u8 = 22;
    pub const SKY: u8 = 23;
    pub const CAR: u8 = 26;
}

/// Axis-aligned box standing on the ground.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center_x: f64,
    pub center_y: f64,
    pub size_x: f64,
    pub size_y: f64,
    pub height: f64,
}

impl Obstacle {
    fn footprint(&self) -> (f64, f64, f64, f64) {
        (
            self.center_x - self.size_x / 2.0,
            self.center_x + self.size_x / 2.0,
            self.center_y - self.size_y / 2.0,
            self.center_y + self.size_y / 2.0,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub road_half_width_m: f64,
    /// Lateral position of the road centerline at x = 0 (positive = left).
    #[serde(default)]
    pub road_offset_m: f64,
    /// Signed centerline curvature in 1/m.
    #[serde(default)]
    pub road_curvature: f64,
    /// Sidewalk widths `[left, right]`.
    pub sidewalk_width_m: [f64; 2],
    /// Terrain widths beyond the sidewalks `[left, right]`.
    pub terrain_width_m: [f64; 2],
    /// Rise over run beyond `slope_start_m`; negative is downhill.
    #[serde(default)]
    pub slope_grade: f64,
    #[serde(default = "default_slope_start")]
    pub slope_start_m: f64,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub texture_seed: u64,
}

fn default_slope_start() -> f64 {
    12.0
}

impl SceneSpec {
    /// Flat straight road with symmetric sidewalks and terrain.
    pub fn straight(road_half_width_m: f64, sidewalk: f64, terrain: f64) -> Self {
        Self {
            road_half_width_m,
            road_offset_m: 0.0,
            road_curvature: 0.0,
            sidewalk_width_m: [sidewalk, sidewalk],
            terrain_width_m: [terrain, terrain],
            slope_grade: 0.0,
            slope_start_m: default_slope_start(),
            obstacles: Vec::new(),
            texture_seed: 0,
        }
    }

    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        let widths = [
            self.road_half_width_m,
            self.sidewalk_width_m[0],
            self.sidewalk_width_m[1],
            self.terrain_width_m[0],
            self.terrain_width_m[1],
        ];
        if widths.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidScene("widths must be finite and >= 0".into()));
        }
        if !(self.road_curvature.abs() <= 0.02) {
            return Err(Error::InvalidScene(format!("curvature {} exceeds 0.02", self.road_curvature)));
        }
        if !(self.slope_grade.abs() <= 0.15) {
            return Err(Error::InvalidScene(format!("slope grade {} exceeds 0.15", self.slope_grade)));
        }
        if !self.road_offset_m.is_finite() || !self.slope_start_m.is_finite() {
            return Err(Error::InvalidScene("non-finite layout parameter".into()));
        }
        let (x0, x1, y0, y1) = spec.footprint();
        for (k, ob) in self.obstacles.iter().enumerate() {
            if !(ob.size_x > 0.0 && ob.size_y > 0.0 && ob.height > 0.0) {
                return Err(Error::InvalidScene(format!("obstacle {k} has nonpositive size")));
            }
            let (a, b, c, d) = ob.footprint();
            if a < x0 || b > x1 || c < y0 || d > y1 {
                return Err(Error::InvalidScene(format!("obstacle {k} footprint leaves the grid")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn centerline_y(&self, x: f64) -> f64 {
        self.road_offset_m + 0.5 * self.road_curvature * x * x
    }

    /// Ground height at longitudinal position `x`.
    #[inline]
    pub fn ground_height(&self, x: f64) -> f64 {
        self.slope_grade * (x - self.slope_start_m).max(0.0)
    }

    pub fn is_sloped(&self) -> bool {
        self.slope_grade != 0.0
    }

    /// Surface label and top-view class of the ground at `(x, y)`.
    #[inline]
    pub fn surface(&self, x: f64, y: f64) -> (u8, SemanticClass) {
        let d = y - self.centerline_y(x);
        let a = d.abs();
        let side = if d >= 0.0 { 0 } else { 1 };
        let hw = self.road_half_width_m;
        let sw = hw + self.sidewalk_width_m[side];
        let tw = sw + self.terrain_width_m[side];
        if a <= hw {
            (labels::ROAD, SemanticClass::Road)
        } else if a <= sw {
            (labels::SIDEWALK, SemanticClass::Sidewalk)
        } else if a <= tw {
            (labels::TERRAIN, SemanticClass::Terrain)
        } else {
            (labels::GROUND, SemanticClass::NonFree)
        }
    }
}

/// Does the open segment `p -> q` pass through the rectangle?
fn segment_hits_rect(p: (f64, f64), q: (f64, f64), rect: (f64, f64, f64, f64)) -> bool {
    let (x0, x1, y0, y1) = rect;
    let d = (q.0 - p.0, q.1 - p.1);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (start, delta, lo, hi) in [(p.0, d.0, x0, x1), (p.1, d.1, y0, y1)] {
        if delta.abs() < 1e-15 {
            if start < lo || start > hi {
                return false;
            }
        } else {
            let (mut a, mut b) = ((lo - start) / delta, (hi - start) / delta);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

fn rects_overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 < b.1 && b.0 < a.1 && a.2 < b.3 && b.2 < a.3
}

/// Analytic top-view truth: layout class at each cell center, non-free on
/// obstacle footprints and in their top-view shadows as seen from the
/// camera's ground position.
pub fn true_grid(scene: &SceneSpec, rig: &CameraRig, spec: &GridSpec) -> GridMap {
    let o = rig.origin();
    let cam = (o.x, o.y);
    let half = spec.cell_size_m / 2.0;
    let mut map = GridMap::new(*spec);
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let (x, y) = spec.cell_center_unchecked(row, col);
            let cell = (x - half, x + half, y - half, y + half);
            let blocked = scene.obstacles.iter().any(|ob| {
                let fp = ob.footprint();
                rects_overlap(cell, fp) || segment_hits_rect(cam, (x, y), fp)
            });
            let class = if blocked {
                SemanticClass::NonFree
            } else {
                scene.surface(x, y).1
            };
            map.set(row, col, class);
        }
    }
    map.set_mask(rig.fov_mask(spec)).expect("mask matches spec");
    map
}

/// Renderer output at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub rgb: RgbImage,
    pub labels: LabelImage,
    pub disparity: DisparityImage,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Ground,
    Box { obstacle: usize, face_u: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    /// Camera-frame depth of the hit (rays have unit camera z).
    depth: f64,
    point: Vector3<f64>,
    surface: Surface,
}

struct Tracer<'a> {
    scene: &'a SceneSpec,
    r: Matrix3<f64>,
    o: Vector3<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    boxes: Vec<([f64; 3], [f64; 3])>,
}

impl<'a> Tracer<'a> {
    fn new(scene: &'a SceneSpec, rig: &CameraRig) -> Self {
        let k = rig.intrinsics;
        let boxes = scene
            .obstacles
            .iter()
            .map(|ob| {
                let (x0, x1, y0, y1) = ob.footprint();
                let base = scene.ground_height(ob.center_x);
                ([x0, y0, base - 0.5], [x1, y1, base + ob.height])
            })
            .collect();
        Self {
            scene,
            r: rig.rotation(),
            o: rig.origin(),
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            boxes,
        }
    }

    fn ground_hit(&self, w: &Vector3<f64>) -> Option<f64> {
        let o = &self.o;
        let s = self.scene;
        let mut best: Option<f64> = None;
        let mut consider = |t: f64| {
            if t > 1e-9 && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        };
        if w.z < 0.0 {
            let t = -o.z / w.z;
            if s.slope_grade == 0.0 || o.x + t * w.x <= s.slope_start_m {
                consider(t);
            }
        }
        if s.slope_grade != 0.0 {
            let denom = w.z - s.slope_grade * w.x;
            if denom.abs() > 1e-15 {
                let t = (s.slope_grade * (o.x - s.slope_start_m) - o.z) / denom;
                if o.x + t * w.x >= s.slope_start_m {
                    consider(t);
                }
            }
        }
        best
    }

    fn box_hit(&self, w: &Vector3<f64>) -> Option<(f64, usize, f64)> {
        let o = &self.o;
        let mut best: Option<(f64, usize, f64)> = None;
        for (k, (lo, hi)) in self.boxes.iter().enumerate() {
            let mut t0 = 0.0f64;
            let mut t1 = f64::INFINITY;
            let mut axis = 0;
            let mut hit = true;
            for a in 0..3 {
                if w[a].abs() < 1e-15 {
                    if o[a] < lo[a] || o[a] > hi[a] {
                        hit = false;
                        break;
                    }
                    continue;
                }
                let inv = 1.0 / w[a];
                let (mut ta, mut tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    axis = a;
                }
                t1 = t1.min(tb);
                if t0 > t1 {
                    hit = false;
                    break;
                }
            }
            if hit && t0 > 1e-9 && best.is_none_or(|b| t0 < b.0) {
                let p = o + w * t0;
                // texture coordinate along the face that was entered
                let face_u = if axis == 0 { p.y } else { p.x };
                best = Some((t0, k, face_u));
            }
        }
        best
    }

    #[inline]
    fn trace(&self, u: f64, v: f64) -> Option<Hit> {
        let w = self.r * Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let ground = self.ground_hit(&w);
        let boxed = self.box_hit(&w);
        let (depth, surface) = match (ground, boxed) {
            (None, None) => return None,
            (Some(g), None) => (g, Surface::Ground),
            (Some(g), Some((b, _, _))) if g <= b => (g, Surface::Ground),
            (_, Some((b, k, fu))) => (b, Surface::Box { obstacle: k, face_u: fu }),
        };
        Some(Hit {
            depth,
            point: self.o + w * depth,
            surface,
        })
    }

    fn label(&self, hit: &Hit) -> u8 {
        match hit.surface {
            Surface::Ground => self.scene.surface(hit.point.x, hit.point.y).0,
            Surface::Box { .. } => labels::CAR,
        }
    }

    fn color(&self, hit: Option<&Hit>, v_norm: f64) -> [u8; 3] {
        let seed = self.scene.texture_seed;
        let Some(hit) = hit else {
            // sky: lighter toward the horizon
            let t = v_norm.clamp(0.0, 1.0);
            return shade([70, 130, 180], 0.85 + 0.3 * t);
        };
        let label = self.label(hit);
        let (base, a, b) = match hit.surface {
            Surface::Ground => (palette(label), hit.point.x, hit.point.y),
            Surface::Box { obstacle, face_u } => {
                let tint = (obstacle as u64).wrapping_mul(0x9e37_79b9);
                (palette(label), face_u + (tint % 7) as f64, hit.point.z)
            }
        };
        let salt = label as u64;
        let coarse = value_noise(seed ^ salt.wrapping_mul(0x51_7cc1_b727_220a), a / 0.8, b / 0.8);
        let fine = value_noise(seed.rotate_left(17) ^ salt, a / 0.15, b / 0.15);
        shade(base, 0.6 + 0.55 * coarse + 0.25 * fine)
    }
}

fn palette(label: u8) -> [u8; 3] {
    match label {
        labels::ROAD => [128, 64, 128],
        labels::SIDEWALK => [244, 35, 232],
        labels::TERRAIN => [152, 251, 152],
        labels::GROUND => [81, 0, 81],
        labels::CAR => [0, 0, 142],
        _ => [70, 130, 180],
    }
}

fn shade(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * f).round().clamp(0.0, 255.0) as u8)
}

#[inline]
fn hash2(seed: u64, x: i64, y: i64) -> f64 {
    // splitmix64 finaliser over the packed lattice coordinates
    let mut z = seed
        .wrapping_add((x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth lattice value noise in `[0, 1)`.
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (xi, yi) = (xf as i64, yf as i64);
    let (tx, ty) = (x - xf, y - yf);
    let sx = tx * tx * (3.0 - 2.0 * tx);
    let sy = ty * ty * (3.0 - 2.0 * ty);
    let a = hash2(seed, xi, yi);
    let b = hash2(seed, xi + 1, yi);
    let c = hash2(seed, xi, yi + 1);
    let d = hash2(seed, xi + 1, yi + 1);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

fn rig_at(rig: &CameraRig, width: usize, height: usize) -> CameraRig {
    if rig.intrinsics.width == width && rig.intrinsics.height == height {
        rig.clone()
    } else {
        rig.scaled_to(width, height)
    }
}

/// Ray-cast `scene` at `width` x `height`. The rig's intrinsics are
/// rescaled when its calibration resolution differs.
pub fn render(scene: &SceneSpec, rig: &CameraRig, width: usize, height: usize) -> Rendered {
    let rig = rig_at(rig, width, height);
    let tracer = Tracer::new(scene, &rig);
    let fb = rig.intrinsics.fx * rig.baseline_m;
    let mut rgb = Image::new(width, height, [0u8; 3]);
    let mut lab = Image::new(width, height, labels::SKY);
    let mut disp = Image::new(width, height, 0.0f32);
    for v in 0..height {
        let v_norm = v as f64 / height as f64;
        for u in 0..width {
            let hit = tracer.trace(u as f64, v as f64);
            rgb.set(u, v, tracer.color(hit.as_ref(), v_norm));
            if let Some(h) = hit {
                lab.set(u, v, tracer.label(&h));
                disp.set(u, v, (fb / h.depth) as f32);
            }
        }
    }
    Rendered {
        rgb,
        labels: lab,
        disparity: disp,
    }
}

/// Labels and disparity only; same values as [`render`].
pub fn render_geometry(scene: &SceneSpec, rig: &CameraRig, width: usize, height: usize) -> (LabelImage, DisparityImage) {
    let rig = rig_at(rig, width, height);
    let tracer = Tracer::new(scene, &rig);
    let fb = rig.intrinsics.fx * rig.baseline_m;
    let mut lab = Image::new(width, height, labels::SKY);
    let mut disp = Image::new(width, height, 0.0f32);
    for v in 0..height {
        for u in 0..width {
            if let Some(h) = tracer.trace(u as f64, v as f64) {
                lab.set(u, v, tracer.label(&h));
                disp.set(u, v, (fb / h.depth) as f32);
            }
        }
    }
    (lab, disp)
}

/// Labels only, for the flat-plane baseline.
pub fn render_labels(scene: &SceneSpec, rig: &CameraRig, width: usize, height: usize) -> LabelImage {
    let rig = rig_at(rig, width, height);
    let tracer = Tracer::new(scene, &rig);
    Image::from_fn(width, height, |u, v| {
        tracer
            .trace(u as f64, v as f64)
            .map_or(labels::SKY, |h| tracer.label(&h))
    })
}

/// Anti-aliased network input: render at `supersample` times the size and
/// box-filter down.
pub fn render_input(scene: &SceneSpec, rig: &CameraRig, width: usize, height: usize, supersample: usize) -> RgbImage {
    let ss = supersample.max(1);
    let (w, h) = (width * ss, height * ss);
    let rig = rig_at(rig, w, h);
    let tracer = Tracer::new(scene, &rig);
    let big = Image::from_fn(w, h, |u, v| {
        let hit = tracer.trace(u as f64, v as f64);
        tracer.color(hit.as_ref(), v as f64 / h as f64)
    });
    big.downsample(ss).expect("supersampled size divides evenly")
}

/// Parameter ranges for random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneRanges {
    pub road_half_width_m: [f64; 2],
    pub road_offset_m: [f64; 2],
    pub road_curvature: [f64; 2],
    pub sidewalk_width_m: [f64; 2],
    pub terrain_width_m: [f64; 2],
    /// Magnitude range of the grade for sloped scenes.
    pub slope_grade: [f64; 2],
    pub slope_start_m: [f64; 2],
    /// Fraction of sloped scenes that go downhill.
    pub downhill_fraction: f64,
    pub max_obstacles: usize,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            road_half_width_m: [2.5, 6.0],
            road_offset_m: [-3.0, 3.0],
            road_curvature: [-0.012, 0.012],
            sidewalk_width_m: [1.0, 4.0],
            terrain_width_m: [2.0, 8.0],
            slope_grade: [0.06, 0.15],
            slope_start_m: [8.0, 16.0],
            downhill_fraction: 0.5,
            max_obstacles: 3,
        }
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Draw one scene. Downhill slopes start early enough that the whole
/// descending stretch stays visible from the camera.
pub fn sample_scene(rng: &mut impl Rng, ranges: &SceneRanges, sloped: bool, rig: &CameraRig, spec: &GridSpec) -> SceneSpec {
    let mut scene = SceneSpec {
        road_half_width_m: uniform(rng, ranges.road_half_width_m),
        road_offset_m: uniform(rng, ranges.road_offset_m),
        road_curvature: uniform(rng, ranges.road_curvature),
        sidewalk_width_m: [uniform(rng, ranges.sidewalk_width_m), uniform(rng, ranges.sidewalk_width_m)],
        terrain_width_m: [uniform(rng, ranges.terrain_width_m), uniform(rng, ranges.terrain_width_m)],
        slope_grade: 0.0,
        slope_start_m: default_slope_start(),
        obstacles: Vec::new(),
        texture_seed: rng.random(),
    };
    let o = rig.origin();
    if sloped {
        let magnitude = uniform(rng, ranges.slope_grade);
        let mut start = uniform(rng, ranges.slope_start_m);
        if rng.random_bool(ranges.downhill_fraction.clamp(0.0, 1.0)) {
            scene.slope_grade = -magnitude;
            start = start.min(o.x + 0.8 * o.z / magnitude);
        } else {
            scene.slope_grade = magnitude;
        }
        scene.slope_start_m = start;
    }
    let (x0, x1, y0, y1) = spec.footprint();
    let n_obstacles = rng.random_range(0..=ranges.max_obstacles);
    for _ in 0..n_obstacles {
        let size_x = rng.random_range(3.5..4.8);
        let size_y = rng.random_range(1.7..2.1);
        // taller than the camera so top-view shadows are exact
        let height = o.z + rng.random_range(0.15..0.9);
        let cx = rng.random_range((x0 + 6.0).max(x0 + size_x / 2.0)..(x1 - size_x / 2.0));
        let reach = scene.road_half_width_m + 0.5 * scene.sidewalk_width_m[0].min(scene.sidewalk_width_m[1]);
        let cy = (scene.centerline_y(cx) + rng.random_range(-reach..reach))
            .clamp(y0 + size_y / 2.0 + 1e-6, y1 - size_y / 2.0 - 1e-6);
        scene.obstacles.push(Obstacle {
            center_x: cx,
            center_y: cy,
            size_x,
            size_y,
            height,
        });
    }
    scene
}

/// Everything needed to generate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Resolution of the label and disparity images.
    pub render_width: usize,
    pub render_height: usize,
    /// Resolution of the RGB network input.
    pub input_width: usize,
    pub input_height: usize,
    pub supersample: usize,
    pub slope_fraction: f64,
    pub ranges: SceneRanges,
    /// Defaults to [`CameraRig::desk_default`].
    pub rig: Option<Calibration>,
    pub grid: GridSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            render_width: 2048,
            render_height: 1024,
            input_width: 128,
            input_height: 64,
            supersample: 4,
            slope_fraction: 0.5,
            ranges: SceneRanges::default(),
            rig: None,
            grid: GridSpec::default(),
        }
    }
}

impl DatasetConfig {
    pub fn rig(&self) -> Result<CameraRig> {
        let rig = match &self.rig {
            Some(c) => CameraRig::from_calibration(c)?,
            None => CameraRig::desk_default(),
        };
        Ok(rig_at(&rig, self.render_width, self.render_height))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }
}

/// Which scene indices are sloped: exactly `round(n * fraction)` of them,
/// chosen by a seeded shuffle.
pub fn sloped_indices(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let k = ((n as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    flags.shuffle(&mut rng);
    flags
}

/// Scenes for indices `0..n`; each index draws from its own RNG stream.
pub fn sample_scenes(n: usize, config: &DatasetConfig, seed: u64) -> Result<Vec<SceneSpec>> {
    let rig = config.rig()?;
    let sloped = sloped_indices(n, config.slope_fraction, seed);
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample_scene(&mut rng, &config.ranges, sloped[i], &rig, &config.grid)
        })
        .collect())
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub rgb: String,
    pub labels: String,
    pub disparity: String,
    pub true_grid: String,
    pub rig: String,
    pub slope_grade: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
        }
        Ok(Self {
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Render `n` scenes into `out_dir` and write `manifest.jsonl`.
///
/// Output bytes depend only on `(n, config, seed)`; scenes may render
/// concurrently under `exec` but files and manifest order follow the
/// scene index.
pub fn generate_dataset(n: usize, config: &DatasetConfig, seed: u64, out_dir: impl AsRef<Path>, exec: Execution) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Empty("dataset size must be >= 1"));
    }
    let out = out_dir.as_ref();
    for sub in ["", "rgb", "labels", "disparity", "truth", "scenes"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let rig = config.rig()?;
    rig.write_json(out.join("rig.json"))?;
    let scenes = sample_scenes(n, config, seed)?;
    let records = exec.try_map(n, |i| -> Result<ManifestRecord> {
        let scene = &scenes[i];
        let id = format!("scene_{i:05}");
        let (labels, disparity) = render_geometry(scene, &rig, config.render_width, config.render_height);
        let rgb = render_input(scene, &rig, config.input_width, config.input_height, config.supersample);
        let truth = true_grid(scene, &rig, &config.grid);
        let rec = ManifestRecord {
            rgb: format!("rgb/{id}.ppm"),
            labels: format!("labels/{id}.pgm"),
            disparity: format!("disparity/{id}.pfm"),
            true_grid: format!("truth/{id}.json"),
            rig: "rig.json".into(),
            slope_grade: scene.slope_grade,
            scene: Some(format!("scenes/{id}.json")),
            id,
        };
        imageio::write_ppm(&rgb, out.join(&rec.rgb))?;
        imageio::write_pgm(&labels, out.join(&rec.labels))?;
        imageio::write_pfm(&disparity, out.join(&rec.disparity))?;
        write_grid(&truth, out.join(&rec.true_grid))?;
        let scene_path = out.join(rec.scene.as_deref().unwrap_or_default());
        let json = serde_json::to_vec_pretty(scene).map_err(|e| Error::json(&scene_path, e))?;
        imageio::write_bytes(&scene_path, &json)?;
        Ok(rec)
    })?;
    let manifest = Manifest {
        base: out.to_path_buf(),
        records,
    };
    let path = out.join("manifest.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.to_jsonl().as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;

    fn small_rig() -> CameraRig {
        CameraRig::level(Intrinsics::centered(200.0, 400, 200).unwrap(), 0.5, [0.0, 0.0, 1.5]).unwrap()
    }

    #[test]
    fn straight_road_band() {
        let spec = GridSpec::default();
        let scene = SceneSpec::straight(3.25, 2.0, 5.0);
        let g = true_grid(&scene, &small_rig(), &spec);
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let (_, y) = spec.cell_center(row, col).unwrap();
                assert_eq!(g.get(row, col) == SemanticClass::Road, y.abs() <= 3.25, "cell ({row},{col})");
            }
        }
    }

    #[test]
    fn all_terrain_scene() {
        let spec = GridSpec::default();
        let scene = SceneSpec {
            road_half_width_m: 0.0,
            sidewalk_width_m: [0.0, 0.0],
            terrain_width_m: [100.0, 100.0],
            ..SceneSpec::straight(0.0, 0.0, 0.0)
        };
        let g = true_grid(&scene, &small_rig(), &spec);
        for (c, m) in g.classes().iter().zip(g.eval_mask()) {
            if *m {
                assert_eq!(*c, SemanticClass::Terrain);
            }
        }
    }

    #[test]
    fn segment_rect_cases() {
        let r = (1.0, 2.0, -0.5, 0.5);
        assert!(segment_hits_rect((0.0, 0.0), (3.0, 0.0), r));
        assert!(!segment_hits_rect((0.0, 0.0), (0.9, 0.0), r));
        assert!(!segment_hits_rect((0.0, 1.0), (3.0, 1.0), r));
        assert!(segment_hits_rect((0.0, 0.0), (3.0, 0.9), r));
    }

    #[test]
    fn flat_horizon_is_sky() {
        let rig = small_rig();
        let r = render(&SceneSpec::straight(3.0, 2.0, 4.0), &rig, 400, 200);
        let cy = rig.intrinsics.cy as usize;
        for v in 0..=cy {
            assert!(r.labels.row(v).iter().all(|&l| l == labels::SKY), "row {v}");
            assert!(r.disparity.row(v).iter().all(|&d| d == 0.0));
        }
        assert!(r.labels.row(cy + 1).iter().all(|&l| l != labels::SKY));
    }

    #[test]
    fn ground_disparity_closed_form() {
        let rig = small_rig();
        let k = rig.intrinsics;
        let (_, disp) = render_geometry(&SceneSpec::straight(3.0, 2.0, 4.0), &rig, 400, 200);
        for v in [110usize, 130, 199] {
            let expected = k.fx * rig.baseline_m * (v as f64 - k.cy) / (k.fy * 1.5);
            let got = disp.get(k.cx as usize, v) as f64;
            assert!((got - expected).abs() < 1e-4 * expected, "v={v}: {got} vs {expected}");
        }
    }

    #[test]
    fn geometry_matches_full_render() {
        let rig = small_rig();
        let mut scene = SceneSpec::straight(3.0, 2.0, 4.0);
        scene.slope_grade = 0.08;
        scene.obstacles.push(Obstacle {
            center_x: 15.0,
            center_y: 1.0,
            size_x: 4.0,
            size_y: 2.0,
            height: 1.8,
        });
        let full = render(&scene, &rig, 200, 100);
        let (l, d) = render_geometry(&scene, &rig, 200, 100);
        assert_eq!(full.labels, l);
        assert_eq!(full.disparity, d);
        assert_eq!(render_labels(&scene, &rig, 200, 100), l);
        assert!(l.pixels().contains(&labels::CAR));
    }

    #[test]
    fn box_casts_widening_shadow() {
        let spec = GridSpec::default();
        let rig = small_rig();
        let mut scene = SceneSpec::straight(6.0, 2.0, 6.0);
        scene.obstacles.push(Obstacle {
            center_x: 15.0,
            center_y: 0.0,
            size_x: 2.0,
            size_y: 2.0,
            height: 2.0,
        });
        let g = true_grid(&scene, &rig, &spec);
        let (r, c) = spec.world_to_cell(15.0, 0.0).unwrap();
        assert_eq!(g.get(r, c), SemanticClass::NonFree);
        let width_at = |x: f64| {
            let (row, _) = spec.world_to_cell(x, 0.0).unwrap();
            (0..spec.cols).filter(|&c| g.get(row, c) == SemanticClass::NonFree).count()
        };
        assert!(width_at(30.0) > width_at(20.0));
        // in front of the box the road is free
        let (r, c) = spec.world_to_cell(12.0, 0.0).unwrap();
        assert_eq!(g.get(r, c), SemanticClass::Road);
    }

    #[test]
    fn scene_validation() {
        let spec = GridSpec::default();
        let mut s = SceneSpec::straight(3.0, 1.0, 1.0);
        assert!(s.validate(&spec).is_ok());
        s.road_curvature = 0.03;
        assert!(s.validate(&spec).is_err());
        s.road_curvature = 0.0;
        s.slope_grade = -0.2;
        assert!(s.validate(&spec).is_err());
        s.slope_grade = 0.0;
        s.sidewalk_width_m[0] = -1.0;
        assert!(s.validate(&spec).is_err());
        s.sidewalk_width_m[0] = 1.0;
        s.obstacles.push(Obstacle {
            center_x: 36.5,
            center_y: 0.0,
            size_x: 2.0,
            size_y: 2.0,
            height: 2.0,
        });
        assert!(s.validate(&spec).is_err());
    }

    #[test]
    fn stratified_slopes() {
        let flags = sloped_indices(4, 0.5, 9);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 2);
        let cfg = DatasetConfig::default();
        let scenes = sample_scenes(4, &cfg, 9).unwrap();
        assert_eq!(scenes.iter().filter(|s| s.is_sloped()).count(), 2);
        for s in &scenes {
            s.validate(&cfg.grid).unwrap();
        }
    }

    #[test]
    fn noise_is_bounded_and_deterministic() {
        for i in 0..1000 {
            let x = i as f64 * 0.37 - 100.0;
            let n = value_noise(3, x, -x * 0.5);
            assert!((0.0..1.0).contains(&n));
            assert_eq!(n, value_noise(3, x, -x * 0.5));
        }
    }
}
