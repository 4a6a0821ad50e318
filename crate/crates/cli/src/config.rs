//! The run description read from a TOML file.
//!
//! Every section is optional and falls back to library defaults. Unknown keys
//! are rejected. Relative paths are resolved against the config file's
//! directory (or the working directory when no file is given).
//!
//! ```toml
//! cases = ["a", "b", "c"]
//! precision = "f32"
//!
//! [paths]
//! data_dir = "run/data"
//! checkpoint_dir = "run/checkpoints"
//! output_dir = "run/reports"
//!
//! [seeds]
//! master = 7
//!
//! [data.synthetic]
//! pages_per_category = 50
//!
//! [train]
//! max_epochs = 10
//!
//! [augment]
//! floor = 1000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use etdpc::augment::{NoiseParams, RenderSpec, DEFAULT_FLOOR};
use etdpc::corpus::{SplitSpec, SyntheticCorpusSpec};
use etdpc::evalrep::Case;
use etdpc::model::ModelConfig;
use etdpc::rng::{derive_seed, tag};
use etdpc::train::TrainConfig;
use etdpc::{Error, Result};

pub const SEED_ENV: &str = "ETDPC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Input manifest for `prepare`; ignored when a synthetic corpus is requested.
    pub manifest: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: None,
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// When set, every section's seed is derived from it.
    pub master: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub max_vocab: usize,
    pub synthetic: Option<SyntheticCorpusSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            max_vocab: 30_000,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    Identity,
    #[default]
    ShuffleDropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Minority categories are topped up to this many training pages.
    pub floor: i64,
    pub hook: HookKind,
    /// Word dropout rate of the shuffle-dropout paraphraser.
    pub hook_dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            floor: DEFAULT_FLOOR as i64,
            hook: HookKind::default(),
            hook_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub noise: NoiseParams,
    pub render: RenderSpec,
    pub split: SplitSpec,
    pub augment: AugmentConfig,
    /// Cases run by `end-to-end`.
    pub cases: Vec<Case>,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seeds: Seeds::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            noise: NoiseParams::default(),
            render: RenderSpec::default(),
            split: SplitSpec::default(),
            augment: AugmentConfig::default(),
            cases: Case::ALL.to_vec(),
            precision: Precision::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read `path` (or take defaults), resolve paths and apply `ETDPC_SEED`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                (cfg, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Self::default(), PathBuf::new()),
        };
        cfg.resolve_paths(&base);
        if let Some(seed) = env_seed()? {
            cfg.seeds.master = Some(seed);
        }
        cfg.apply_master_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = self.paths.manifest.as_mut() {
            join(m);
        }
        join(&mut self.paths.data_dir);
        join(&mut self.paths.checkpoint_dir);
        join(&mut self.paths.output_dir);
    }

    /// Overwrite section seeds with streams derived from the master seed.
    pub fn apply_master_seed(&mut self) {
        let Some(m) = self.seeds.master else { return };
        self.split.seed = derive_seed(m, &[tag("split")]);
        self.noise.seed = derive_seed(m, &[tag("noise")]);
        self.render.seed = derive_seed(m, &[tag("render")]);
        self.train.seed = derive_seed(m, &[tag("train")]);
        if let Some(s) = self.data.synthetic.as_mut() {
            s.seed = derive_seed(m, &[tag("synthetic")]);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.paths.manifest {
            if !m.is_file() {
                return Err(Error::Config(format!("manifest {} does not exist", m.display())));
            }
        }
        if self.cases.is_empty() {
            return Err(Error::Config("`cases` must list at least one of a, b, c".into()));
        }
        if self.augment.floor <= 0 {
            return Err(Error::Config(format!(
                "augment floor must be positive, got {}",
                self.augment.floor
            )));
        }
        if !(0.0..1.0).contains(&self.augment.hook_dropout) {
            return Err(Error::Config(format!(
                "hook_dropout {} outside [0, 1)",
                self.augment.hook_dropout
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.noise.validate()?;
        self.render.validate()?;
        self.split.validate()
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("colour = 1").is_err());
        assert!(RunConfig::parse("[train]\nlearning_rate = 0.1").is_err());
        let err = RunConfig::parse("[paths]\nmanifests = \"x\"").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse(
            "cases = [\"a\"]\nprecision = \"f64\"\n[train]\nmax_epochs = 3\n[data.synthetic]\npages_per_category = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.cases, vec![Case::A]);
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.data.synthetic.unwrap().pages_per_category, 5);
    }

    #[test]
    fn master_seed_reaches_every_section() {
        let mut a = RunConfig::parse("[seeds]\nmaster = 1\n[data.synthetic]\n").unwrap();
        let mut b = RunConfig::parse("[seeds]\nmaster = 2\n[data.synthetic]\n").unwrap();
        a.apply_master_seed();
        b.apply_master_seed();
        assert_ne!(a.split.seed, b.split.seed);
        assert_ne!(a.noise.seed, b.noise.seed);
        assert_ne!(a.render.seed, b.render.seed);
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.data.synthetic.unwrap().seed, b.data.synthetic.unwrap().seed);
        assert_ne!(a.split.seed, a.train.seed);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = RunConfig::parse("[paths]\ndata_dir = \"d\"\noutput_dir = \"/abs\"").unwrap();
        cfg.resolve_paths(Path::new("/runs/x"));
        assert_eq!(cfg.paths.data_dir, PathBuf::from("/runs/x/d"));
        assert_eq!(cfg.paths.output_dir, PathBuf::from("/abs"));
        assert_eq!(cfg.paths.checkpoint_dir, PathBuf::from("/runs/x/checkpoints"));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.augment.floor = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.paths.manifest = Some("/nonexistent/manifest.jsonl".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.cases.clear();
        assert!(cfg.validate().is_err());
    }
}
