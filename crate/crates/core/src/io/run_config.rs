//! Run configuration: a JSON file that fully determines a run. The config
//! hash (with the output directory normalized away) is embedded in every
//! artifact a run produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, sha256_hex16};
use crate::model::ModelConfig;
use crate::tasks::{
    make_covariate_shift_suite, make_entangled_suite, make_label_shift_suite,
    task_shift_rotation, KShot, Regime, SuiteSpec,
};
use crate::train::Hyperparams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub regime: Regime,
    /// Label shift: total classes split across upstream + downstream.
    pub total_classes: usize,
    pub n_upstream: usize,
    pub noise_sigma: f64,
    /// Suite generation seed (prototypes, transforms, task data).
    pub seed: u64,
    /// Label shift only: downstream reuses the 8-label window starting
    /// here, entangling it with the covering upstream task.
    pub entangled_window: Option<usize>,
    /// Task shift only: which task of the rotation is the downstream.
    pub rotation_index: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            regime: Regime::LabelShift,
            total_classes: 32,
            n_upstream: 3,
            noise_sigma: 0.5,
            seed: 7,
            entangled_window: None,
            rotation_index: 0,
        }
    }
}

impl SuiteConfig {
    pub fn build(&self, input_dim: usize) -> Result<SuiteSpec> {
        match self.regime {
            Regime::LabelShift => match self.entangled_window {
                Some(window) => make_entangled_suite(
                    self.n_upstream,
                    window,
                    input_dim,
                    self.noise_sigma,
                    self.seed,
                ),
                None => make_label_shift_suite(
                    self.total_classes,
                    self.n_upstream,
                    input_dim,
                    self.noise_sigma,
                    self.seed,
                ),
            },
            Regime::CovariateShift => {
                make_covariate_shift_suite(self.n_upstream, input_dim, self.noise_sigma, self.seed)
            }
            Regime::TaskShift => {
                let mut rotation = task_shift_rotation(
                    self.n_upstream + 1,
                    input_dim,
                    self.noise_sigma,
                    self.seed,
                )?;
                if self.rotation_index >= rotation.len() {
                    return Err(Error::Config(format!(
                        "rotation_index {} out of range for {} tasks",
                        self.rotation_index,
                        rotation.len()
                    )));
                }
                Ok(rotation.remove(self.rotation_index))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    ScalingN,
    SplitSize,
    Rank,
    Entangled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub kind: AblationKind,
    /// scaling_n: upstream counts to evaluate (n = 1 enumerates singles).
    pub n_grid: Vec<usize>,
    /// split_size: number of upstream tasks one fixed label pool splits into.
    pub split_grid: Vec<usize>,
    /// split_size: the upstream label pool (downstream keeps 8 labels).
    pub upstream_pool: usize,
    /// rank: adapter ranks to train upstream sets at.
    pub rank_grid: Vec<usize>,
    /// entangled: downstream window starts (8-label windows).
    pub entangled_windows: Vec<usize>,
    /// K used for ablation cells.
    pub k: KShot,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            kind: AblationKind::ScalingN,
            n_grid: vec![1, 2, 3, 4, 5],
            split_grid: vec![1, 3, 5],
            upstream_pool: 30,
            rank_grid: vec![2, 4, 8],
            entangled_windows: vec![24, 8, 4],
            k: KShot::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CkaConfig {
    /// Mean-center feature columns before the CKA formula.
    pub centering: bool,
    /// Adaptation seed whose learned weights feed the weight map.
    pub weights_seed: u64,
    /// K for the learned-composition run that produces the weight map.
    pub k: KShot,
}

impl Default for CkaConfig {
    fn default() -> Self {
        CkaConfig {
            centering: true,
            weights_seed: 0,
            k: KShot::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub methods: Vec<String>,
    pub k_grid: Vec<KShot>,
    /// Adaptation seeds (the mean/std axis of reports).
    pub seeds: Vec<u64>,
    /// Seed for pretraining and upstream training, fixed across the grid.
    pub pipeline_seed: u64,
    pub rank: usize,
    pub alpha: f64,
    pub hyperparams: Hyperparams,
    pub ablation: AblationConfig,
    pub cka: CkaConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            suite: SuiteConfig::default(),
            model: ModelConfig::default(),
            methods: vec![
                "classifier_tuning".into(),
                "lora_scratch".into(),
                "uniform_composition".into(),
                "learned_composition".into(),
            ],
            k_grid: vec![KShot::Shot(1), KShot::Shot(5), KShot::All],
            seeds: vec![0, 1, 2],
            pipeline_seed: 7,
            rank: 4,
            alpha: 1.0,
            hyperparams: Hyperparams::default(),
            ablation: AblationConfig::default(),
            cka: CkaConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = read_file(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("run config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hyperparams.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("methods list is empty".into()));
        }
        for name in &self.methods {
            crate::train::lookup(name)?;
        }
        if self.k_grid.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("k_grid and seeds must be non-empty".into()));
        }
        if self.rank < 1 || self.rank > self.model.d_model {
            return Err(Error::Config(format!(
                "rank {} out of range for d_model {}",
                self.rank, self.model.d_model
            )));
        }
        Ok(())
    }

    /// Hash over the canonical JSON with the output directory cleared, so
    /// the same experiment written elsewhere produces identical artifacts.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        sha256_hex16(json.as_bytes())
    }

    pub fn build_suite(&self) -> Result<SuiteSpec> {
        self.suite.build(self.model.input_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_buildable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let suite = cfg.build_suite().unwrap();
        assert_eq!(suite.upstream.len(), 3);
    }

    #[test]
    fn hash_ignores_output_dir_but_not_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/somewhere/else");
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.rank = 8;
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"suite": {"regime": "covariate_shift", "n_upstream": 2},
                "methods": ["uniform_composition", "zero-shot"],
                "k_grid": [1, "all"]}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.suite.regime, Regime::CovariateShift);
        assert_eq!(cfg.suite.n_upstream, 2);
        assert_eq!(cfg.k_grid, vec![KShot::Shot(1), KShot::All]);
        assert_eq!(cfg.seeds, vec![0, 1, 2]); // default

        // unknown fields and unknown methods are rejected
        std::fs::write(&path, r#"{"methodz": []}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
        std::fs::write(&path, r#"{"methods": ["gradient_descent_of_doom"]}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn suite_config_builds_each_regime() {
        let mut sc = SuiteConfig::default();
        assert_eq!(sc.build(64).unwrap().regime, Regime::LabelShift);
        sc.entangled_window = Some(8);
        sc.n_upstream = 4;
        let entangled = sc.build(64).unwrap();
        assert_eq!(entangled.entangled_with, Some(1));

        let tc = SuiteConfig {
            regime: Regime::TaskShift,
            n_upstream: 5,
            rotation_index: 2,
            ..SuiteConfig::default()
        };
        let suite = tc.build(64).unwrap();
        assert_eq!(suite.downstream.id, "task-2");
        assert_eq!(suite.upstream.len(), 5);
    }
}
