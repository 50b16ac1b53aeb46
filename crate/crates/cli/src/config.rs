//! The run file: one TOML document naming the inputs, the model and the
//! sampler. Relative paths resolve against the directory of the run file.

use std::path::{Path, PathBuf};

use bnma::emulation::SyntheticEhrConfig;
use bnma::model::{PriorSettings, StageOneMode};
use bnma::{ModelKind, ModelSpec, SamplerConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for every stochastic step.
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub priors: PriorSettings,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default, rename = "km")]
    pub km_studies: Vec<KmStudy>,
    #[serde(default)]
    pub emulation: Vec<EmulationRun>,
    /// Cohorts written by `simulate-ehr`, concatenated in order.
    #[serde(default)]
    pub synthetic_ehr: Vec<SyntheticEhrConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub treatment_map: Option<PathBuf>,
    pub ad: Option<PathBuf>,
    pub ipd: Vec<PathBuf>,
    pub ehr: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// 1, 2 or 3.
    pub kind: u8,
    pub stage_one: StageOneMode,
    /// Fixed heterogeneity; estimated when absent.
    pub fixed_tau: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: 1,
            stage_one: StageOneMode::Pooled,
            fixed_tau: None,
        }
    }
}

/// Sampler settings except the seed, which is the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub chains: usize,
    pub burn_in: usize,
    pub iterations: usize,
    pub thin: usize,
    pub target_acceptance: f64,
    pub adaptation_window: usize,
    pub initial_scale: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            chains: d.chains,
            burn_in: d.burn_in,
            iterations: d.iterations,
            thin: d.thin,
            target_acceptance: d.target_acceptance,
            adaptation_window: d.adaptation_window,
            initial_scale: d.initial_scale,
        }
    }
}

/// Digitized curves of one study in one biomarker subgroup. Entries sharing a
/// study id are written to the same participant-level file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmStudy {
    pub study: String,
    pub biomarker: u8,
    pub arms: Vec<KmArm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmArm {
    /// Treatment label, resolved through the treatment map.
    pub treatment: String,
    pub curve: PathBuf,
    pub risk: PathBuf,
    #[serde(default)]
    pub total_events: Option<u32>,
}

/// One emulation protocol file; trials are named `<name>_<k>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulationRun {
    pub name: String,
    pub protocol: PathBuf,
}

impl RunConfig {
    /// Reads a run file and makes its paths absolute.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Read(path.to_path_buf(), e))?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base);
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        let d = &mut self.data;
        d.treatment_map.iter_mut().for_each(fix);
        d.ad.iter_mut().for_each(fix);
        d.ehr.iter_mut().for_each(fix);
        d.ipd.iter_mut().for_each(fix);
        for arm in self.km_studies.iter_mut().flat_map(|s| s.arms.iter_mut()) {
            fix(&mut arm.curve);
            fix(&mut arm.risk);
        }
        for run in &mut self.emulation {
            fix(&mut run.protocol);
        }
    }

    /// A commented starting point listing every setting at its default.
    pub fn defaults() -> Self {
        Self {
            seed: 1,
            out: default_out(),
            data: DataPaths {
                treatment_map: Some("treatment_map.txt".into()),
                ad: Some("ad.csv".into()),
                ipd: vec![],
                ehr: None,
            },
            model: ModelSection::default(),
            priors: PriorSettings::default(),
            sampler: SamplerSettings::default(),
            km_studies: vec![],
            emulation: vec![],
            synthetic_ehr: vec![],
        }
    }

    pub fn model_kind(&self) -> Result<ModelKind, CliError> {
        ModelKind::from_number(self.model.kind)
            .ok_or_else(|| CliError::Config(format!("model.kind must be 1, 2 or 3, got {}", self.model.kind)))
    }

    pub fn spec(&self) -> Result<ModelSpec, CliError> {
        let mut spec = ModelSpec::new(self.model_kind()?);
        spec.priors = self.priors;
        if let Some(t) = self.model.fixed_tau {
            spec = spec.with_fixed_tau(t);
        }
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn sampler(&self) -> Result<SamplerConfig, CliError> {
        let s = &self.sampler;
        let config = SamplerConfig {
            chains: s.chains,
            burn_in: s.burn_in,
            iterations: s.iterations,
            thin: s.thin,
            seed: self.seed,
            target_acceptance: s.target_acceptance,
            adaptation_window: s.adaptation_window,
            initial_scale: s.initial_scale,
        };
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }
}
