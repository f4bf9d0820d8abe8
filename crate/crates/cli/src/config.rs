//! Run configuration file. Every key is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use msseg_core::cascade::{CascadeConfig, PostprocessConfig, STAGE1_THRESHOLD};
use msseg_core::metrics::Connectivity;
use msseg_core::ops::Dims3;
use msseg_core::phantom::{DomainSpec, PhantomSpec};
use msseg_core::{Error, FreezeConfig, FreezeMode, Result, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; the training seed of every command.
    pub seed: u64,
    pub train: TrainSection,
    pub freeze: FreezeSection,
    pub post: PostSection,
    pub phantom: PhantomSection,
    pub grid: GridSection,
    pub data: DataSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub negative_resample_period: usize,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            validation_fraction: t.validation_fraction,
            negative_resample_period: t.negative_resample_period,
            rho: t.rho,
            epsilon: t.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeSection {
    /// `fc1_fc2_fc3`, `fc2_fc3`, `fc3`, or `auto` to choose by lesion load.
    pub mode: String,
    pub retrain_head: bool,
    pub frozen_bn_batch_stats: bool,
}

impl Default for FreezeSection {
    fn default() -> Self {
        Self { mode: "auto".into(), retrain_head: true, frozen_bn_batch_stats: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostSection {
    pub t_bin: f32,
    pub l_min: usize,
    pub connectivity: u32,
    pub stage1_threshold: f32,
}

impl Default for PostSection {
    fn default() -> Self {
        let p = PostprocessConfig::default();
        Self { t_bin: p.t_bin, l_min: p.l_min, connectivity: 26, stage1_threshold: STAGE1_THRESHOLD }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    /// `reference` or `shifted`.
    pub domain: String,
    pub cases: usize,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub brain_radii: [f64; 3],
    pub white_matter: f64,
    pub ventricle: f64,
    pub lesion_count: [usize; 2],
    pub lesion_radius: [f64; 2],
    pub lesion_volume_ml: [f64; 2],
}

impl Default for PhantomSection {
    fn default() -> Self {
        let p = PhantomSpec::default();
        Self {
            domain: "reference".into(),
            cases: 10,
            dims: p.dims.as_array(),
            spacing: p.spacing,
            brain_radii: p.brain_radii,
            white_matter: p.white_matter,
            ventricle: p.ventricle,
            lesion_count: [p.lesion_count.0, p.lesion_count.1],
            lesion_radius: [p.lesion_radius.0, p.lesion_radius.1],
            lesion_volume_ml: [p.lesion_volume_ml.0, p.lesion_volume_ml.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub modes: Vec<String>,
    pub sizes: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            modes: FreezeMode::ADAPTATION.iter().map(|m| m.name().to_string()).collect(),
            sizes: vec![1, 2, 5, 10],
        }
    }
}

/// Default paths; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub model: Option<PathBuf>,
    pub cases: Option<PathBuf>,
    pub train_cases: Option<PathBuf>,
    pub test_cases: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Freeze choice of the `adapt` command.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FreezeChoice {
    Auto,
    Fixed(FreezeMode),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("config: {}", e.message().replace('\n', " "))))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.cascade_config()?.post.validate()?;
        self.freeze_choice()?;
        self.grid_modes()?;
        self.domain()?;
        self.phantom_spec().validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            validation_fraction: t.validation_fraction,
            negative_resample_period: t.negative_resample_period,
            rho: t.rho,
            epsilon: t.epsilon,
            seed: self.seed,
        }
    }

    pub fn cascade_config(&self) -> Result<CascadeConfig> {
        let p = &self.post;
        Ok(CascadeConfig {
            train: self.train_config(),
            post: PostprocessConfig {
                t_bin: p.t_bin,
                l_min: p.l_min,
                connectivity: Connectivity::from_value(p.connectivity)?,
            },
            stage1_threshold: p.stage1_threshold,
        })
    }

    pub fn freeze_choice(&self) -> Result<FreezeChoice> {
        parse_freeze(&self.freeze.mode)
    }

    pub fn freeze_config(&self, mode: FreezeMode) -> FreezeConfig {
        FreezeConfig {
            mode,
            retrain_head: self.freeze.retrain_head,
            frozen_bn_batch_stats: self.freeze.frozen_bn_batch_stats,
        }
    }

    pub fn grid_modes(&self) -> Result<Vec<FreezeMode>> {
        self.grid
            .modes
            .iter()
            .map(|m| match parse_freeze(m)? {
                FreezeChoice::Fixed(f) => Ok(f),
                FreezeChoice::Auto => Err(Error::InvalidArgument("grid modes cannot be auto".into())),
            })
            .collect()
    }

    pub fn domain(&self) -> Result<DomainSpec> {
        match self.phantom.domain.as_str() {
            "reference" => Ok(DomainSpec::reference()),
            "shifted" => Ok(DomainSpec::shifted()),
            d => Err(Error::InvalidArgument(format!("unknown phantom domain {d:?}; use reference or shifted"))),
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let p = &self.phantom;
        PhantomSpec {
            dims: Dims3::new(p.dims[0], p.dims[1], p.dims[2]),
            spacing: p.spacing,
            brain_radii: p.brain_radii,
            white_matter: p.white_matter,
            ventricle: p.ventricle,
            lesion_count: (p.lesion_count[0], p.lesion_count[1]),
            lesion_radius: (p.lesion_radius[0], p.lesion_radius[1]),
            lesion_volume_ml: (p.lesion_volume_ml[0], p.lesion_volume_ml[1]),
            seed: self.seed,
        }
    }
}

pub fn parse_freeze(s: &str) -> Result<FreezeChoice> {
    if s == "auto" {
        return Ok(FreezeChoice::Auto);
    }
    match s.parse::<FreezeMode>()? {
        FreezeMode::None => Err(Error::InvalidArgument(
            "freeze mode none retrains everything; use train-source instead".into(),
        )),
        m => Ok(FreezeChoice::Fixed(m)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_settings() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!((c.post.t_bin, c.post.l_min), (0.5, 10));
        let t = c.train_config();
        assert_eq!((t.batch_size, t.max_epochs, t.patience, t.negative_resample_period), (128, 400, 50, 10));
        assert_eq!(t.validation_fraction, 0.25);
        assert_eq!(c.freeze_choice().unwrap(), FreezeChoice::Auto);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.train.max_epochs = 3;
        c.train.patience = 2;
        c.data.model = Some("m.msc".into());
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_invalid_keys() {
        let e = RunConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("learning_rate"), "{e}");
        assert!(RunConfig::parse("colour = 1\n").is_err());
        assert!(RunConfig::parse("[freeze]\nmode = \"fc4\"\n").is_err());
        assert!(RunConfig::parse("[post]\nconnectivity = 5\n").is_err());
        assert!(RunConfig::parse("[train]\nbatch_size = 0\n").is_err());
        assert!(RunConfig::parse("[phantom]\ndomain = \"mars\"\n").is_err());
    }
}
