//! In-memory datasets for training and evaluating mappers on synthetic
//! scenes, without writing full-resolution renders to disk.

use gridsight_core::camera::CameraRig;
use gridsight_core::metrics::{EvalSample, FrontView};
use gridsight_core::par::Execution;
use gridsight_core::synth::{render_input, render_labels, sample_scenes, true_grid, DatasetConfig, SceneSpec};
use gridsight_core::Result;
use gridsight_nn::ved::TrainSample;

/// Network inputs and analytic target grids for `n` scenes.
pub fn train_samples(n: usize, config: &DatasetConfig, seed: u64, exec: Execution) -> Result<Vec<TrainSample>> {
    let rig = config.rig()?;
    let scenes = sample_scenes(n, config, seed)?;
    Ok(exec.map(n, |i| TrainSample {
        image: render_input(&scenes[i], &rig, config.input_width, config.input_height, config.supersample),
        truth: true_grid(&scenes[i], &rig, &config.grid),
    }))
}

/// A test scene together with whether it contains a slope.
#[derive(Clone, Debug)]
pub struct TestScene {
    pub sample: EvalSample,
    pub sloped: bool,
    pub scene: SceneSpec,
}

/// Front views (network input plus full-resolution labels) and analytic
/// truth for `n` scenes.
pub fn test_scenes(n: usize, config: &DatasetConfig, seed: u64, exec: Execution) -> Result<Vec<TestScene>> {
    let rig: CameraRig = config.rig()?;
    let scenes = sample_scenes(n, config, seed)?;
    Ok(exec.map(n, |i| {
        let s = &scenes[i];
        TestScene {
            sample: EvalSample {
                view: FrontView {
                    rgb: render_input(s, &rig, config.input_width, config.input_height, config.supersample),
                    labels: render_labels(s, &rig, config.render_width, config.render_height),
                    rig: rig.clone(),
                },
                truth: true_grid(s, &rig, &config.grid),
            },
            sloped: s.is_sloped(),
            scene: s.clone(),
        }
    }))
}
