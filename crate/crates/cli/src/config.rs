//! Experiment configuration files.
//!
//! A config is a TOML document with `schema = 1` and the sections below.
//! Unknown keys are rejected. Every field is optional and falls back to the
//! default shown.
//!
//! ```toml
//! schema = 1
//!
//! [source]
//! rep_rate_hz = 1e9
//! distribution = "poissonian"   # "poissonian" | "thermal" | "table"
//! mu = 0.1                      # derived from [source.pump] when absent
//! table = []                    # P(0), P(1), ... for distribution = "table"
//! eta_signal = 1.0
//! eta_idler = 1.0
//! noise_signal = 0.0            # noise photons per pulse, before collection
//! noise_idler = 0.0
//! dark_signal_hz = 0.0
//! dark_idler_hz = 0.0
//! twin_survival = 1.0
//! pulse_width_s = 0.0
//!
//! [source.pump]                 # optional; mu = calib * (gamma * peak_power_w * eff_length_m)^2
//! gamma = 1.0
//! peak_power_w = 0.0
//! eff_length_m = 1.0
//! calib = 1.0
//!
//! [run]
//! n_pulses = 1000000
//! seed = 0
//! topology = "two-detector"     # or "three-detector"
//! block_size = 4194304
//! dead_time_slots = 0
//!
//! [analysis]
//! max_delay = 10                # coincidence window W in pulse slots
//! fit_max_power_w = inf
//! cc_fit_form = "quadratic-plus-constant"   # or "full"
//! weighting = "poisson"         # or "uniform"
//! dist_kind = "poissonian"      # pair statistics assumed by CAR overlays
//! powers_w = []                 # default sweep powers
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use hsps_core::estimation::{FitForm, Weighting};
use hsps_core::montecarlo::{RunConfig, Topology, DEFAULT_BLOCK_SIZE};
use hsps_core::stats::{DistKind, PairDistribution, PumpLaw, SourceModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default)]
    pub source: SourceSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    pub rep_rate_hz: f64,
    pub distribution: DistributionName,
    pub mu: Option<f64>,
    pub table: Vec<f64>,
    pub eta_signal: f64,
    pub eta_idler: f64,
    pub noise_signal: f64,
    pub noise_idler: f64,
    pub dark_signal_hz: f64,
    pub dark_idler_hz: f64,
    pub twin_survival: f64,
    pub pulse_width_s: f64,
    pub pump: Option<PumpSection>,
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection {
            rep_rate_hz: 1e9,
            distribution: DistributionName::Poissonian,
            mu: None,
            table: Vec::new(),
            eta_signal: 1.0,
            eta_idler: 1.0,
            noise_signal: 0.0,
            noise_idler: 0.0,
            dark_signal_hz: 0.0,
            dark_idler_hz: 0.0,
            twin_survival: 1.0,
            pulse_width_s: 0.0,
            pump: None,
        }
    }
}

const DEFAULT_MU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionName {
    Poissonian,
    Thermal,
    Table,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PumpSection {
    pub gamma: f64,
    pub peak_power_w: f64,
    pub eff_length_m: f64,
    pub calib: f64,
}

impl Default for PumpSection {
    fn default() -> Self {
        PumpSection {
            gamma: 1.0,
            peak_power_w: 0.0,
            eff_length_m: 1.0,
            calib: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub n_pulses: u64,
    pub seed: u64,
    pub topology: TopologyName,
    pub block_size: u64,
    pub dead_time_slots: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            n_pulses: 1_000_000,
            seed: 0,
            topology: TopologyName::TwoDetector,
            block_size: DEFAULT_BLOCK_SIZE,
            dead_time_slots: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyName {
    TwoDetector,
    ThreeDetector,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub max_delay: u64,
    pub fit_max_power_w: f64,
    pub cc_fit_form: FitFormName,
    pub weighting: WeightingName,
    pub dist_kind: DistKindName,
    pub powers_w: Vec<f64>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            max_delay: hsps_core::coincidence::DEFAULT_MAX_DELAY,
            fit_max_power_w: f64::INFINITY,
            cc_fit_form: FitFormName::QuadraticPlusConstant,
            weighting: WeightingName::Poisson,
            dist_kind: DistKindName::Poissonian,
            powers_w: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitFormName {
    Full,
    QuadraticPlusConstant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingName {
    Poisson,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistKindName {
    Poissonian,
    Thermal,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: SCHEMA_VERSION,
            source: SourceSection::default(),
            run: RunSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).context("invalid config")?;
        if config.schema != SCHEMA_VERSION {
            bail!(
                "unsupported config schema {} (expected {SCHEMA_VERSION})",
                config.schema
            );
        }
        config.run_config().context("invalid config")?;
        if config.analysis.max_delay == 0 {
            bail!("invalid config: analysis.max_delay must be at least 1");
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn source_model(&self) -> Result<SourceModel> {
        let s = &self.source;
        let pump = s.pump.map(|p| PumpLaw {
            gamma: p.gamma,
            peak_power: p.peak_power_w,
            eff_length: p.eff_length_m,
            calib: p.calib,
        });
        let mu = match (s.mu, pump) {
            (Some(mu), _) => mu,
            (None, Some(p)) => p.mu(),
            (None, None) => DEFAULT_MU,
        };
        let pair_dist = match s.distribution {
            DistributionName::Poissonian => PairDistribution::poissonian(mu)?,
            DistributionName::Thermal => PairDistribution::thermal(mu)?,
            DistributionName::Table => {
                if s.mu.is_some() {
                    bail!("source.mu cannot be combined with distribution = \"table\"");
                }
                PairDistribution::table(s.table.clone())?
            }
        };
        if s.distribution != DistributionName::Table && !s.table.is_empty() {
            bail!("source.table is only used with distribution = \"table\"");
        }
        let model = SourceModel {
            rep_rate: s.rep_rate_hz,
            pair_dist,
            eta_signal: s.eta_signal,
            eta_idler: s.eta_idler,
            noise_signal: s.noise_signal,
            noise_idler: s.noise_idler,
            dark_signal: s.dark_signal_hz,
            dark_idler: s.dark_idler_hz,
            twin_survival: s.twin_survival,
            pump,
            pulse_width: s.pulse_width_s,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn topology(&self) -> Topology {
        match self.run.topology {
            TopologyName::TwoDetector => Topology::TwoDetector,
            TopologyName::ThreeDetector => Topology::ThreeDetector,
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::new(
            self.source_model()?,
            self.run.n_pulses,
            self.run.seed,
            self.topology(),
        );
        rc.block_size = self.run.block_size;
        rc.dead_time = self.run.dead_time_slots;
        rc.validate()?;
        Ok(rc)
    }

    pub fn fit_form(&self) -> FitForm {
        match self.analysis.cc_fit_form {
            FitFormName::Full => FitForm::Full,
            FitFormName::QuadraticPlusConstant => FitForm::QuadraticPlusConstant,
        }
    }

    pub fn weighting(&self) -> Weighting {
        match self.analysis.weighting {
            WeightingName::Poisson => Weighting::Poisson,
            WeightingName::Uniform => Weighting::Uniform,
        }
    }

    pub fn dist_kind(&self) -> DistKind {
        match self.analysis.dist_kind {
            DistKindName::Poissonian => DistKind::Poissonian,
            DistKindName::Thermal => DistKind::ThermalLike,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml("schema = 1").unwrap();
        let rc = c.run_config().unwrap();
        assert_eq!(rc.model.mu(), DEFAULT_MU);
        assert_eq!(rc.n_pulses, 1_000_000);
        assert_eq!(rc.topology, Topology::TwoDetector);
        assert_eq!(c.analysis.max_delay, 10);
        assert_eq!(c.fit_form(), FitForm::QuadraticPlusConstant);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err =
            ExperimentConfig::from_toml("schema = 1\n[source]\netta_signal = 0.5\n").unwrap_err();
        assert!(format!("{err:#}").contains("etta_signal"));
        assert!(ExperimentConfig::from_toml("schema = 1\nextra = 2\n").is_err());
    }

    #[test]
    fn schema_required_and_checked() {
        assert!(ExperimentConfig::from_toml("").is_err());
        assert!(ExperimentConfig::from_toml("schema = 2").is_err());
    }

    #[test]
    fn out_of_domain_efficiency_names_field() {
        let err =
            ExperimentConfig::from_toml("schema = 1\n[source]\neta_signal = 1.5\n").unwrap_err();
        assert!(format!("{err:#}").contains("eta_signal"));
    }

    #[test]
    fn pump_law_sets_mu() {
        let text = "schema = 1\n[source]\ndistribution = \"thermal\"\n[source.pump]\ngamma = 2.0\npeak_power_w = 0.01\neff_length_m = 0.5\ncalib = 100.0\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        let m = c.source_model().unwrap();
        assert!((m.mu() - 100.0 * (2.0f64 * 0.01 * 0.5).powi(2)).abs() < 1e-15);
        assert!(matches!(m.pair_dist, PairDistribution::ThermalLike { .. }));
        let bad = text.replace("[source.pump]", "mu = 0.5\n[source.pump]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn table_distribution() {
        let c = ExperimentConfig::from_toml(
            "schema = 1\n[source]\ndistribution = \"table\"\ntable = [0.9, 0.1]\n",
        )
        .unwrap();
        assert!((c.source_model().unwrap().mu() - 0.1).abs() < 1e-15);
        assert!(ExperimentConfig::from_toml("schema = 1\n[source]\ntable = [0.9, 0.1]\n").is_err());
    }
}
