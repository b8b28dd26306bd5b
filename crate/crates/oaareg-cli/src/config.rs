//! Run configuration: one flat, JSON-serializable struct covering matching,
//! estimation, scene synthesis and output options. Command-line flags
//! override the corresponding JSON keys one to one.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use oaareg::coarse::{KnnSpace, MatchConfig};
use oaareg::estimator::{ConsensusSpace, EstimatorConfig};
use oaareg::fine::SinkhornParams;
use oaareg::metrics::RecallCriterion;
use oaareg::synth::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorChoice {
    Fsr,
    Ransac,
    Wsvd,
}

impl std::fmt::Display for EstimatorChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorChoice::Fsr => write!(f, "fsr"),
            EstimatorChoice::Ransac => write!(f, "ransac"),
            EstimatorChoice::Wsvd => write!(f, "wsvd"),
        }
    }
}

/// Where superpoint overlap scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OverlapSource {
    /// Geometric ground-truth labels (synthetic scenes only).
    Oracle,
    /// Token attention forward pass with seeded random weights.
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // coarse matching
    pub theta_m: f64,
    pub theta_o: f64,
    pub knn: usize,
    pub knn_space: KnnSpace,

    // estimation
    pub estimator: EstimatorChoice,
    pub seed_radius: f64,
    pub seed_fraction: f64,
    pub consensus_k: usize,
    pub sigma_s: f64,
    pub tau_a: f64,
    pub ransac_iters: usize,
    pub squared_acceptance: bool,
    pub consensus_space: ConsensusSpace,
    pub spectral_cap: usize,
    pub power_iters: usize,

    // scene synthesis
    pub point_count: usize,
    pub overlap_fraction: f64,
    pub noise_sigma: f64,
    pub rotation_magnitude: f64,
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    pub outlier_fraction: f64,
    pub rng_seed: u64,

    // pipeline
    pub voxel_size: f64,
    pub overlap_source: OverlapSource,
    /// Channel width of the attention overlap path.
    pub attention_dim: usize,
    /// Counterpart radius for ground-truth overlap labels; derived from the
    /// voxel size and noise when absent.
    pub overlap_tau: Option<f64>,
    pub sinkhorn_iters: usize,
    pub sinkhorn_temperature: f64,
    pub dustbin_score: f64,
    /// Keep only this many top-confidence correspondences before estimation.
    pub max_correspondences: Option<usize>,
    pub rr_criterion: RecallCriterion,
    pub trials: usize,
    /// Record wall-clock estimator timing in benchmark output.
    pub timing: bool,

    // inputs and outputs
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Ground-truth transform for file inputs, row-major rotation then
    /// translation (12 numbers).
    pub gt_transform: Option<Vec<f64>>,
    pub report_json: Option<PathBuf>,
    pub aligned_ply: Option<PathBuf>,
    /// Write the (possibly synthetic) input clouds for inspection.
    pub dump_source_ply: Option<PathBuf>,
    pub dump_target_ply: Option<PathBuf>,
    pub csv: Option<PathBuf>,

    // benchmark sweep axes; empty means "use the single configured value"
    pub sweep_descriptor_noise: Vec<f64>,
    pub sweep_overlap_fraction: Vec<f64>,
    pub sweep_estimator: Vec<EstimatorChoice>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let match_cfg = MatchConfig::default();
        let est = EstimatorConfig::default();
        let scene = SceneSpec::default();
        let sinkhorn = SinkhornParams::default();
        Self {
            theta_m: match_cfg.theta_m,
            theta_o: match_cfg.theta_o,
            knn: match_cfg.knn,
            knn_space: match_cfg.knn_space,

            estimator: EstimatorChoice::Fsr,
            seed_radius: est.seed_radius,
            seed_fraction: est.seed_fraction,
            consensus_k: est.consensus_k,
            sigma_s: est.sigma_s,
            tau_a: est.tau_a,
            ransac_iters: est.ransac_iters,
            squared_acceptance: est.squared_acceptance,
            consensus_space: est.consensus_space,
            spectral_cap: est.spectral_cap,
            power_iters: est.power_iters,

            point_count: scene.point_count,
            overlap_fraction: scene.overlap_fraction,
            noise_sigma: scene.noise_sigma,
            rotation_magnitude: scene.rotation_magnitude,
            descriptor_dim: scene.descriptor_dim,
            descriptor_noise: scene.descriptor_noise,
            outlier_fraction: scene.outlier_fraction,
            rng_seed: scene.rng_seed,

            voxel_size: 0.1,
            overlap_source: OverlapSource::Oracle,
            attention_dim: 64,
            overlap_tau: None,
            sinkhorn_iters: sinkhorn.iterations,
            sinkhorn_temperature: sinkhorn.temperature,
            dustbin_score: sinkhorn.dustbin_score,
            max_correspondences: None,
            rr_criterion: RecallCriterion::Rmse,
            trials: 1,
            timing: true,

            source: None,
            target: None,
            gt_transform: None,
            report_json: None,
            aligned_ply: None,
            dump_source_ply: None,
            dump_target_ply: None,
            csv: None,

            sweep_descriptor_noise: Vec::new(),
            sweep_overlap_fraction: Vec::new(),
            sweep_estimator: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            theta_m: self.theta_m,
            theta_o: self.theta_o,
            knn: self.knn,
            knn_space: self.knn_space,
        }
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            seed_radius: self.seed_radius,
            seed_fraction: self.seed_fraction,
            consensus_k: self.consensus_k,
            sigma_s: self.sigma_s,
            tau_a: self.tau_a,
            ransac_iters: self.ransac_iters,
            rng_seed: self.rng_seed,
            spectral_cap: self.spectral_cap,
            power_iters: self.power_iters,
            squared_acceptance: self.squared_acceptance,
            consensus_space: self.consensus_space,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            point_count: self.point_count,
            overlap_fraction: self.overlap_fraction,
            noise_sigma: self.noise_sigma,
            rotation_magnitude: self.rotation_magnitude,
            descriptor_dim: self.descriptor_dim,
            descriptor_noise: self.descriptor_noise,
            outlier_fraction: self.outlier_fraction,
            rng_seed: self.rng_seed,
        }
    }

    pub fn sinkhorn_params(&self) -> SinkhornParams {
        SinkhornParams {
            iterations: self.sinkhorn_iters,
            temperature: self.sinkhorn_temperature,
            dustbin_score: self.dustbin_score,
        }
    }

    /// Counterpart radius used for ground-truth overlap labels.
    pub fn effective_overlap_tau(&self) -> f64 {
        self.overlap_tau
            .unwrap_or(self.voxel_size + 3.0 * self.noise_sigma)
    }

    /// Validates every embedded sub-config up front.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.match_config()
            .validate()
            .map_err(|e| anyhow::anyhow!("match config: {e}"))?;
        self.estimator_config()
            .validate()
            .map_err(|e| anyhow::anyhow!("estimator config: {e}"))?;
        if self.source.is_none() {
            self.scene_spec()
                .validate()
                .map_err(|e| anyhow::anyhow!("scene spec: {e}"))?;
        }
        if !(self.voxel_size > 0.0) {
            anyhow::bail!("voxel_size must be positive, got {}", self.voxel_size);
        }
        if self.sinkhorn_iters == 0 {
            anyhow::bail!("sinkhorn_iters must be at least 1");
        }
        if self.attention_dim == 0 {
            anyhow::bail!("attention_dim must be positive");
        }
        if self.trials == 0 {
            anyhow::bail!("trials must be at least 1");
        }
        if let Some(t) = &self.gt_transform {
            if t.len() != 12 {
                anyhow::bail!("gt_transform needs 12 numbers, got {}", t.len());
            }
        }
        if self.source.is_some() != self.target.is_some() {
            anyhow::bail!("source and target files must be given together");
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("parsing {}: {e}", path.display()))?;
        Ok(cfg)
    }
}
