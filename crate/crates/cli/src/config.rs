//! TOML run configuration. Every section and key is optional; unknown keys
//! are rejected. See `configs/fourway.toml` for the full schema.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;
use trajcal::eval::{SweepAxis, DEFAULT_RRE_THRESHOLD};
use trajcal::pipeline::PipelineConfig;
use trajcal::simulator::{diagonal_poses, Layout, ScenarioConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: ScenarioSection,
    pub pipeline: PipelineConfig,
    pub sweep: SweepSection,
}

/// Scenario with the two sensors on the intersection diagonal.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub layout: Layout,
    pub n_vehicles: usize,
    pub duration: f64,
    pub frame_period: f64,
    pub range_p: f64,
    pub range_q: f64,
    /// Yaw of Q relative to P, degrees.
    pub rotation_deg: f64,
    /// Q-to-P clock offset, seconds.
    pub time_offset: f64,
    pub noise_sigma: f64,
    pub bbox_noise: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        ScenarioSection {
            layout: d.layout,
            n_vehicles: d.n_vehicles,
            duration: d.duration,
            frame_period: d.frame_period,
            range_p: d.range_p,
            range_q: d.range_q,
            rotation_deg: 0.0,
            time_offset: d.ground_truth().time_offset(),
            noise_sigma: d.noise_sigma,
            bbox_noise: d.bbox_noise,
            dropout_rate: d.dropout_rate,
            seed: d.seed,
        }
    }
}

impl ScenarioSection {
    pub fn to_config(&self) -> ScenarioConfig {
        let (pose_p, pose_q) = diagonal_poses(self.rotation_deg, self.time_offset);
        ScenarioConfig {
            layout: self.layout,
            n_vehicles: self.n_vehicles,
            duration: self.duration,
            frame_period: self.frame_period,
            range_p: self.range_p,
            range_q: self.range_q,
            pose_p,
            pose_q,
            noise_sigma: self.noise_sigma,
            bbox_noise: self.bbox_noise,
            dropout_rate: self.dropout_rate,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rre_threshold: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            axis: SweepAxis::Noise,
            values: vec![0.1, 0.2, 0.3],
            seeds: (0..5).collect(),
            rre_threshold: DEFAULT_RRE_THRESHOLD,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}
