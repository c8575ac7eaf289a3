//! Run configuration files.
//!
//! ```toml
//! seed = 0
//! out = "runs/toy"
//!
//! [model]
//! preset = "toy"
//! context_pyramid = "P-1_2_4_8"
//!
//! [training]
//! iterations = [200, 1000, 800]
//! batch_size = 2
//! lr = 1e-3
//!
//! [data]
//! count = 64
//! held_out = 16
//! [data.generator]
//! height = 32
//! width = 64
//! d_max = 8
//! layers = [1, 3]
//! texture = "value-noise"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use edgestereo::context::ContextPyramidConfig;
use edgestereo::data::GeneratorConfig;
use edgestereo::train::{AdamConfig, Phase, PhasePlan};
use edgestereo::{Dataset, ModelConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub data: DataSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_preset")]
    pub preset: String,
    pub backbone_widths: Option<[usize; 5]>,
    pub context_pyramid: Option<String>,
    pub scales: Option<usize>,
    pub max_disp: Option<usize>,
    pub edge_cues: Option<bool>,
}

fn default_preset() -> String {
    "toy".into()
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: default_preset(),
            backbone_widths: None,
            context_pyramid: None,
            scales: None,
            max_disp: None,
            edge_cues: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self) -> anyhow::Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset)?;
        if let Some(w) = self.backbone_widths {
            c.backbone.widths = w;
        }
        if let Some(p) = &self.context_pyramid {
            c.context_pyramid = p.parse::<ContextPyramidConfig>()?;
        }
        if let Some(s) = self.scales {
            c.pyramid.scales = s;
        }
        if let Some(d) = self.max_disp {
            c.max_disp = d;
        }
        if let Some(e) = self.edge_cues {
            c.edge_cues = e;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_iterations")]
    pub iterations: [usize; 3],
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Defaults to whether the model uses edge cues.
    pub smoothness: Option<bool>,
    /// A complete phase list; replaces the fields above.
    pub phases: Option<Vec<Phase>>,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_iterations() -> [usize; 3] {
    [200, 1000, 800]
}

fn default_batch() -> usize {
    2
}

fn default_lr() -> f64 {
    1e-3
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            iterations: default_iterations(),
            batch_size: default_batch(),
            lr: default_lr(),
            smoothness: None,
            phases: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainingSection {
    pub fn plan(&self, model: &ModelConfig) -> PhasePlan {
        match &self.phases {
            Some(phases) => PhasePlan {
                phases: phases.clone(),
                adam: self.adam,
            },
            None => {
                let smooth = self.smoothness.unwrap_or(model.edge_cues);
                let mut p = PhasePlan::three_phase(self.iterations, self.batch_size, self.lr, smooth);
                p.adam = self.adam;
                p
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory with a manifest; overrides the generator.
    pub manifest: Option<PathBuf>,
    #[serde(default = "GeneratorConfig::toy")]
    pub generator: GeneratorConfig,
    #[serde(default = "default_count")]
    pub count: usize,
    /// Generated samples kept aside for evaluation after training.
    #[serde(default)]
    pub held_out: usize,
}

fn default_count() -> usize {
    64
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            generator: GeneratorConfig::toy(),
            count: default_count(),
            held_out: 0,
        }
    }
}

impl DataSection {
    /// Training set and held-out set. Generated sets use `seed` and
    /// `seed + 1`.
    pub fn load(&self, seed: u64) -> anyhow::Result<(Dataset, Option<Dataset>)> {
        let train = match &self.manifest {
            Some(dir) => Dataset::load(dir)?,
            None => Dataset::synthetic(&self.generator, self.count, seed)?,
        };
        let held = (self.held_out > 0)
            .then(|| Dataset::synthetic(&self.generator, self.held_out, seed.wrapping_add(1)))
            .transpose()?;
        Ok((train, held))
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let c: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(c)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.build()?;
        if let Some(dir) = &self.data.manifest {
            if !dir.is_dir() {
                bail!("dataset directory {} does not exist", dir.display());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let src = include_str!("config.rs")
            .lines()
            .filter_map(|l| l.strip_prefix("//! "))
            .skip_while(|l| !l.starts_with("```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("```"))
            .collect::<Vec<_>>()
            .join("\n");
        let c: RunConfig = toml::from_str(&src).unwrap();
        c.validate().unwrap();
        assert_eq!(c.model.build().unwrap().context_pyramid.notation(), "P-1_2_4_8");
        assert_eq!(c.training.plan(&c.model.build().unwrap()).total_iterations(), 2000);
    }

    #[test]
    fn bad_pyramid_notation_is_rejected() {
        let c: RunConfig = toml::from_str("[model]\ncontext_pyramid = \"P-4_2\"").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c.model.build().unwrap(), ModelConfig::toy());
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}
