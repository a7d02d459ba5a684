use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sdcl_core::data::{self, GaussianConfig, SegConfig, TaskStream};
use sdcl_core::trainer_cl::CLConfig;
use sdcl_core::trainer_css::CssConfig;
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "SDCL_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cl: Option<CLConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub css: Option<CssConfig>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// IDX files (optionally gzipped) in `dir`, else `$SDCL_DATA_DIR`.
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        #[serde(default = "two")]
        classes_per_task: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        order_seed: Option<u64>,
    },
    Gaussian(GaussianConfig),
    Seg(SegConfig),
}

fn two() -> usize {
    2
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

impl DataConfig {
    pub fn task_stream(&self) -> Result<TaskStream> {
        match self {
            DataConfig::Mnist {
                dir,
                classes_per_task,
                order_seed,
            } => {
                let dir = match dir {
                    Some(d) => d.clone(),
                    None => match std::env::var_os(DATA_DIR_ENV) {
                        Some(d) => PathBuf::from(d),
                        None => bail!("mnist data needs data.dir or ${DATA_DIR_ENV}"),
                    },
                };
                let (ti, tl) = data::mnist_paths(&dir, true);
                let (ei, el) = data::mnist_paths(&dir, false);
                let train = data::load_mnist_idx(&ti, &tl)?;
                let test = data::load_mnist_idx(&ei, &el)?;
                Ok(data::split_class_incremental(&train, &test, *classes_per_task, *order_seed)?)
            }
            DataConfig::Gaussian(g) => Ok(data::synth_gaussian_tasks(g)?),
            DataConfig::Seg(_) => bail!("segmentation data cannot drive train-cl"),
        }
    }
}
