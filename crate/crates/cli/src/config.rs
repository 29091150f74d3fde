//! TOML run configuration.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected.
//!
//! | key              | default   | meaning                                         |
//! |------------------|-----------|-------------------------------------------------|
//! | `head`           | `alpaca`  | `generic`, `gemcl`, `pn` or `alpaca`            |
//! | `domain`         | `sine`    | `sine`, `synth-classify` or `synth-density`     |
//! | `tasks`          | 10        | tasks per meta-training episode                 |
//! | `shots`          | 10        | training examples per task                      |
//! | `test_per_task`  | 5         | test queries per task                           |
//! | `z_dim`          | 32        | latent / embedding / feature dimension          |
//! | `hidden`         | 64        | hidden units per layer                          |
//! | `layers`         | 3         | hidden layers per network                       |
//! | `num_classes`    | 10        | output classes of the generic classifier        |
//! | `noise_var`      | 0.1       | observation noise of the alpaca head            |
//! | `n_z`            | 5         | latent samples per episode during training      |
//! | `meta_batch`     | 8         | episodes per meta-update                        |
//! | `lr`             | 0.001     | Adam learning rate                              |
//! | `steps`          | 20000     | meta-updates                                    |
//! | `train_episodes` | 4294967296| size of the meta-training set                   |
//! | `eval_episodes`  | 512       | meta-test episodes per evaluation               |
//! | `seed`           | 0         | seeds data, initialization and sampling         |

use sbmcl_core::episode::Domain;
use sbmcl_core::harness::MetaConfig;
use sbmcl_core::models::{HeadKind, ModelConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub head: HeadKind,
    pub domain: Domain,
    pub tasks: usize,
    pub shots: usize,
    pub test_per_task: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub noise_var: f64,
    pub n_z: usize,
    pub meta_batch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_episodes: u64,
    pub eval_episodes: u64,
    pub seed: u64,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile::from_meta(&MetaConfig::new(HeadKind::Alpaca, Domain::Sine))
    }
}

impl RunConfigFile {
    pub fn from_meta(c: &MetaConfig) -> Self {
        RunConfigFile {
            head: c.model.head,
            domain: c.model.domain,
            tasks: c.num_tasks,
            shots: c.shots,
            test_per_task: c.test_per_task,
            z_dim: c.model.z_dim,
            hidden: c.model.hidden,
            layers: c.model.layers,
            num_classes: c.model.num_classes,
            noise_var: c.model.noise_var,
            n_z: c.n_z,
            meta_batch: c.meta_batch,
            lr: c.lr,
            steps: c.steps,
            train_episodes: c.train_episodes,
            eval_episodes: c.eval_episodes,
            seed: c.seed,
        }
    }

    pub fn to_meta(&self) -> MetaConfig {
        MetaConfig {
            model: ModelConfig {
                head: self.head,
                domain: self.domain,
                z_dim: self.z_dim,
                hidden: self.hidden,
                layers: self.layers,
                num_classes: self.num_classes,
                noise_var: self.noise_var,
            },
            num_tasks: self.tasks,
            shots: self.shots,
            test_per_task: self.test_per_task,
            n_z: self.n_z,
            meta_batch: self.meta_batch,
            lr: self.lr,
            steps: self.steps,
            train_episodes: self.train_episodes,
            eval_episodes: self.eval_episodes,
            seed: self.seed,
        }
    }

    /// Parses and validates a configuration document.
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfigFile = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.to_meta().validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Canonical TOML listing every key.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
