//! Seed-pinned training runs shared by the training and acceptance targets.

use std::time::{Duration, Instant};

use dacn_core::data::{self, degrade_area_tensor, DatasetSplit, SynthParams};
use dacn_core::loss;
use dacn_core::model::{self, DacnConfig};
use dacn_core::trainer::{self, TrainConfig, TrainState};
use dacn_core::{Graph, Tensor};

pub const OVERFIT_STEPS: usize = 500;
pub const OVERFIT_HR: usize = 32;
pub const OVERFIT_MIN_REDUCTION: f64 = 0.90;
pub const OVERFIT_TIME_LIMIT: Duration = Duration::from_secs(300);

pub fn overfit_model() -> DacnConfig {
    DacnConfig {
        seed: 0,
        ..DacnConfig::micro()
    }
}

/// One 32×32×4 HR patch.
pub fn overfit_patch(seed: u64) -> Tensor {
    let cube = data::synth_cube(&SynthParams {
        height: OVERFIT_HR,
        width: OVERFIT_HR,
        bands: 4,
        rank: 3,
        noise: 0.01,
        seed,
    })
    .unwrap();
    cube.to_tensor().reshape(&[1, OVERFIT_HR, OVERFIT_HR, 4]).unwrap()
}

/// Training-mode reconstruction MSE of `hr` from its degraded input.
pub fn train_mode_mse(params: &model::DacnParams<Tensor>, cfg: &DacnConfig, hr: &Tensor) -> f64 {
    let lr = degrade_area_tensor(hr, cfg.scale).unwrap();
    let mut g = Graph::new();
    let (_, out) = model::forward_registered(&mut g, params, cfg, &lr, true).unwrap();
    let y = g.input(hr.clone());
    let m = loss::mse(&mut g, y, out.output).unwrap();
    g.value(m).item()
}

pub struct OverfitRun {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub per_step_mse: Vec<f64>,
    pub params: model::DacnParams<Tensor>,
    pub elapsed: Duration,
}

impl OverfitRun {
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_mse / self.initial_mse
    }
}

pub fn overfit_one_patch(seed: u64, steps: usize) -> OverfitRun {
    let start = Instant::now();
    let cfg = overfit_model();
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let hr = overfit_patch(seed);
    let mut params = model::init_params(&cfg, seed).unwrap();
    let mut state = TrainState::new();
    let initial_mse = train_mode_mse(&params, &cfg, &hr);
    let mut per_step_mse = Vec::with_capacity(steps);
    for _ in 0..steps {
        per_step_mse.push(trainer::train_step(&mut params, &mut state, &cfg, &tc, &hr).unwrap().mse);
    }
    OverfitRun {
        initial_mse,
        final_mse: train_mode_mse(&params, &cfg, &hr),
        per_step_mse,
        params,
        elapsed: start.elapsed(),
    }
}

/// Seeded synthetic benchmark used for the ablation comparison.
pub fn ablation_split() -> DatasetSplit {
    let cube = data::synth_cube(&SynthParams {
        height: 96,
        width: 96,
        bands: 24,
        rank: 3,
        noise: 0.01,
        seed: 7,
    })
    .unwrap();
    let patches = data::extract_patches(&cube, 24, 24).unwrap();
    DatasetSplit::new(patches, 24, 2, 7).unwrap()
}

pub fn ablation_model(use_mhsa: bool, use_channel_attention: bool) -> DacnConfig {
    DacnConfig {
        seed: 7,
        use_mhsa,
        use_channel_attention,
        ..DacnConfig::with_filters(8, 4, [8, 8, 8], 2)
    }
}

pub fn ablation_train_config() -> TrainConfig {
    TrainConfig {
        max_steps: Some(200),
        max_epochs: 1000,
        patience: 1000,
        seed: 7,
        ..TrainConfig::default()
    }
}

pub struct AblationResult {
    pub full: f64,
    pub no_mhsa: f64,
    pub no_ca: f64,
    pub shapes_ok: bool,
}

/// Final validation total loss of the full model and both ablations.
pub fn ablation_benchmark() -> AblationResult {
    let split = ablation_split();
    let tc = ablation_train_config();
    let mut finals = Vec::new();
    let mut shapes_ok = true;
    for (mhsa, ca) in [(true, true), (false, true), (true, false)] {
        let cfg = ablation_model(mhsa, ca);
        let out = trainer::train(&cfg, &split, &tc).unwrap();
        finals.push(out.history.last().unwrap().val_loss);
        let lr = Tensor::full(&[1, 12, 12, 8], 0.5);
        let y = model::predict(&out.params, &cfg, &lr).unwrap();
        shapes_ok &= y.shape() == [1, 24, 24, 8] && y.is_finite();
    }
    AblationResult {
        full: finals[0],
        no_mhsa: finals[1],
        no_ca: finals[2],
        shapes_ok,
    }
}
