//! Confusion-matrix metrics and perturbation sweeps.
//!
//! Per-sample class means are taken over classes present in that sample's
//! evaluable truth, then averaged arithmetically over samples.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::flatplane::flatplane_map;
use crate::grid::{GridMap, GridSpec, SemanticClass};
use crate::gt::ClassMapping;
use crate::imageio::{LabelImage, RgbImage};
use crate::par::Execution;
use crate::perturb::Perturbation;

const K: usize = SemanticClass::COUNT;

/// Rows are ground truth, columns prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: ConfusionMatrix) -> ConfusionMatrix {
        for t in 0..K {
            for p in 0..K {
                self.counts[t][p] += rhs.counts[t][p];
            }
        }
        self
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..K).map(|k| self.counts[k][k]).sum()
    }

    fn truth_count(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn pred_count(&self, c: usize) -> u64 {
        (0..K).map(|t| self.counts[t][c]).sum()
    }

    /// Recall of each class with nonzero truth count.
    pub fn class_recall(&self) -> [Option<f64>; K] {
        std::array::from_fn(|c| {
            let n = self.truth_count(c);
            (n > 0).then(|| self.counts[c][c] as f64 / n as f64)
        })
    }

    /// IoU of each class with nonzero truth count.
    pub fn class_iou(&self) -> [Option<f64>; K] {
        std::array::from_fn(|c| {
            let n = self.truth_count(c);
            (n > 0).then(|| {
                let tp = self.counts[c][c];
                let union = n + self.pred_count(c) - tp;
                tp as f64 / union as f64
            })
        })
    }

    pub fn mean_accuracy(&self) -> Result<f64> {
        mean_present(&self.class_recall())
    }

    pub fn mean_iou(&self) -> Result<f64> {
        mean_present(&self.class_iou())
    }
}

fn mean_present(v: &[Option<f64>; K]) -> Result<f64> {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::UndefinedMetric("confusion matrix is empty"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Tally cells evaluable in both maps.
pub fn confusion(pred: &GridMap, truth: &GridMap) -> Result<ConfusionMatrix> {
    confusion_masked(pred, truth, None)
}

/// As [`confusion`], additionally restricted to `mask` when given.
pub fn confusion_masked(pred: &GridMap, truth: &GridMap, mask: Option<&[bool]>) -> Result<ConfusionMatrix> {
    if pred.spec() != truth.spec() {
        return Err(Error::SpecMismatch);
    }
    if mask.is_some_and(|m| m.len() != truth.spec().len()) {
        return Err(Error::DimensionMismatch("mask length".into()));
    }
    let mut cm = ConfusionMatrix::default();
    let (pm, tm) = (pred.eval_mask(), truth.eval_mask());
    for (k, (p, t)) in pred.classes().iter().zip(truth.classes()).enumerate() {
        if pm[k] && tm[k] && mask.is_none_or(|m| m[k]) {
            cm.counts[t.index()][p.index()] += 1;
        }
    }
    Ok(cm)
}

pub fn mean_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.mean_accuracy()
}

pub fn mean_iou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.mean_iou()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetMetrics {
    pub mean_accuracy: f64,
    pub mean_iou: f64,
    pub evaluated: usize,
    /// Indices of samples without evaluable cells.
    pub skipped: Vec<usize>,
}

/// Per-sample metrics averaged over samples.
pub fn evaluate_set(pairs: &[(GridMap, GridMap)]) -> Result<SetMetrics> {
    let refs: Vec<(&GridMap, &GridMap)> = pairs.iter().map(|(p, t)| (p, t)).collect();
    evaluate_refs(&refs)
}

pub fn evaluate_refs(pairs: &[(&GridMap, &GridMap)]) -> Result<SetMetrics> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut acc = 0.0;
    let mut iou = 0.0;
    let mut evaluated = 0;
    let mut skipped = Vec::new();
    for (i, (pred, truth)) in pairs.iter().enumerate() {
        let cm = confusion(pred, truth)?;
        if cm.total() == 0 {
            skipped.push(i);
            continue;
        }
        acc += cm.mean_accuracy()?;
        iou += cm.mean_iou()?;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::UndefinedMetric("no sample has evaluable cells"));
    }
    Ok(SetMetrics {
        mean_accuracy: acc / evaluated as f64,
        mean_iou: iou / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// Front-view inputs of one test sample. `rig` is calibrated for the
/// label image; the RGB image may have a different (same aspect)
/// resolution.
#[derive(Clone, Debug)]
pub struct FrontView {
    pub rgb: RgbImage,
    pub labels: LabelImage,
    pub rig: CameraRig,
}

impl FrontView {
    pub fn rgb_rig(&self) -> CameraRig {
        self.rig.scaled_to(self.rgb.width(), self.rgb.height())
    }

    pub fn perturbed(&self, p: Perturbation) -> Result<FrontView> {
        if p == Perturbation::None {
            return Ok(self.clone());
        }
        let rgb_fy = self.rgb_rig().intrinsics.fy;
        Ok(FrontView {
            rgb: p.apply_photometric(&self.rgb, rgb_fy)?,
            labels: p.apply_labels(&self.labels, self.rig.intrinsics.fy)?,
            rig: self.rig.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct EvalSample {
    pub view: FrontView,
    pub truth: GridMap,
}

/// Anything that turns a front view into a top-view grid.
pub trait GridMapper: Sync {
    fn map_view(&self, view: &FrontView) -> Result<GridMap>;
}

/// Flat-plane baseline over the sample's label image.
#[derive(Clone, Debug)]
pub struct FlatplaneMapper {
    pub spec: GridSpec,
    pub mapping: ClassMapping,
}

impl GridMapper for FlatplaneMapper {
    fn map_view(&self, view: &FrontView) -> Result<GridMap> {
        flatplane_map(&view.labels, &view.rig, &self.spec, &self.mapping)
    }
}

/// A sweep row: one named setting, possibly averaging several variants
/// (both signs of a `±` setting).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSetting {
    pub name: String,
    pub variants: Vec<Perturbation>,
}

impl SweepSetting {
    pub fn none() -> Self {
        Self {
            name: "none".into(),
            variants: vec![Perturbation::None],
        }
    }

    pub fn symmetric(name: impl Into<String>, p: Perturbation) -> Self {
        Self {
            name: name.into(),
            variants: vec![p, p.negated()],
        }
    }
}

/// none, ±1.5 degree pitch, ±5 degree roll.
pub fn default_settings() -> Vec<SweepSetting> {
    vec![
        SweepSetting::none(),
        SweepSetting::symmetric("pitch_1.5", Perturbation::Pitch(1.5)),
        SweepSetting::symmetric("roll_5", Perturbation::Roll(5.0)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub perturbation: String,
    pub mean_accuracy: f64,
    pub mean_iou: f64,
    /// Drop relative to the unperturbed row (positive = worse).
    pub acc_downgrade: f64,
    pub iou_downgrade: f64,
}

/// Evaluate `mapper` on `samples` under every setting. Downgrades are
/// relative to the first setting, which should be [`SweepSetting::none`].
pub fn perturbation_sweep<M: GridMapper + ?Sized>(
    method: &str,
    mapper: &M,
    samples: &[EvalSample],
    settings: &[SweepSetting],
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if samples.is_empty() {
        return Err(Error::Empty("sweep samples"));
    }
    let mut rows: Vec<SweepRow> = Vec::with_capacity(settings.len());
    for setting in settings {
        let mut acc = 0.0;
        let mut iou = 0.0;
        for &variant in &setting.variants {
            let preds = exec.try_map(samples.len(), |i| {
                let view = samples[i].view.perturbed(variant)?;
                mapper.map_view(&view)
            })?;
            let pairs: Vec<(&GridMap, &GridMap)> = preds.iter().zip(samples.iter().map(|s| &s.truth)).collect();
            let m = evaluate_refs(&pairs)?;
            acc += m.mean_accuracy;
            iou += m.mean_iou;
        }
        let n = setting.variants.len().max(1) as f64;
        let (acc, iou) = (acc / n, iou / n);
        let (base_acc, base_iou) = rows.first().map_or((acc, iou), |r| (r.mean_accuracy, r.mean_iou));
        rows.push(SweepRow {
            method: method.to_string(),
            perturbation: setting.name.clone(),
            mean_accuracy: acc,
            mean_iou: iou,
            acc_downgrade: base_acc - acc,
            iou_downgrade: base_iou - iou,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_sweep_csv<R: io::Read>(r: R) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_sweep_file(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_sweep_csv(rows, f)
}
