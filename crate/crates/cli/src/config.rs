use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ndp::data::{Task, TaskSpec};
use ndp::model::{ModelSpec, Variant};
use ndp::vi::TrainConfig;
use serde::{Deserialize, Serialize};

/// One config document covering data, model and training. Every field is
/// optional; missing fields take the defaults of the chosen task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub model: Option<Variant>,
    pub seed: Option<u64>,
    /// Directory holding `<task>-train.jsonl` / `<task>-test.jsonl`. When
    /// absent the dataset is generated in memory from the task settings.
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,

    pub train_count: Option<usize>,
    pub test_count: Option<usize>,

    pub encoder_hidden: Option<Vec<usize>>,
    pub r_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub latent_dim: Option<usize>,
    pub control_dim: Option<usize>,
    pub z_dim: Option<usize>,
    pub ode_hidden: Option<Vec<usize>>,
    pub decoder_hidden: Option<Vec<usize>>,
    pub obs_sigma: Option<f64>,
    pub y0_always_in_context: Option<bool>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub context_range: Option<[usize; 2]>,
    pub extra_target_range: Option<[usize; 2]>,
    pub learning_rate: Option<f64>,
    pub eval_context: Option<usize>,
    pub eval_seed: Option<u64>,
    pub keep_best: Option<bool>,
}

/// Fully resolved settings, echoed next to every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

macro_rules! overlay {
    ($dst:expr, $src:expr; $($field:ident),* $(,)?) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<(Self, String)> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok((cfg, text))
    }

    /// Fields set in `other` win.
    pub fn merge(&mut self, other: &RunConfig) {
        overlay!(self, other;
            task, model, seed, data_dir, output_dir, train_count, test_count,
            encoder_hidden, r_dim, hidden_dim, latent_dim, control_dim, z_dim,
            ode_hidden, decoder_hidden, obs_sigma, y0_always_in_context,
            epochs, batch_size, context_range, extra_target_range, learning_rate,
            eval_context, eval_seed, keep_best,
        );
    }

    pub fn resolve(&self, env_seed: Option<u64>) -> anyhow::Result<Resolved> {
        let task = self.task.unwrap_or(Task::Sine);
        let variant = self.model.unwrap_or(Variant::Ndp);
        let seed = self.seed.or(env_seed).unwrap_or(0);

        let mut task_spec = TaskSpec::new(task, seed);
        if let Some(n) = self.train_count {
            task_spec.train_count = n;
        }
        if let Some(n) = self.test_count {
            task_spec.test_count = n;
        }
        task_spec.validate()?;

        let mut model = ModelSpec::for_task(&task_spec, variant);
        macro_rules! set {
            ($dst:expr; $($field:ident),*) => {
                $( if let Some(v) = &self.$field { $dst.$field = v.clone(); } )*
            };
        }
        set!(model; encoder_hidden, r_dim, hidden_dim, latent_dim, control_dim, z_dim,
             ode_hidden, decoder_hidden, obs_sigma, y0_always_in_context);
        model.validate()?;

        let mut train = if task.is_1d() {
            TrainConfig::default()
        } else {
            TrainConfig::lotka_volterra()
        };
        train.seed = seed;
        set!(train; epochs, batch_size, context_range, extra_target_range, learning_rate,
             eval_context, eval_seed, keep_best);
        train.validate()?;

        let output_dir = self
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}-{seed}", task.name(), variant.name().to_lowercase())));
        Ok(Resolved {
            seed,
            data_dir: self.data_dir.clone(),
            output_dir,
            task: task_spec,
            model,
            train,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_sine_experiment() {
        let r = RunConfig::default().resolve(None).unwrap();
        assert_eq!(r.task.task, Task::Sine);
        assert_eq!(r.task.train_count, 490);
        assert_eq!(r.train.epochs, 30);
        assert_eq!(r.train.batch_size, 5);
        assert_eq!(r.train.context_range, [1, 10]);
        assert_eq!(r.model.latent_dim, 2);
        assert_eq!(r.model.variant, Variant::Ndp);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"epochz": 3}"#).is_err());
    }

    #[test]
    fn later_layers_win_and_env_seed_is_a_fallback() {
        let mut base: RunConfig = serde_json::from_str(r#"{"epochs": 3, "latent_dim": 4}"#).unwrap();
        base.merge(&RunConfig {
            epochs: Some(7),
            ..RunConfig::default()
        });
        let r = base.resolve(Some(9)).unwrap();
        assert_eq!((r.train.epochs, r.model.latent_dim, r.seed), (7, 4, 9));
        base.seed = Some(2);
        assert_eq!(base.resolve(Some(9)).unwrap().seed, 2);
    }

    #[test]
    fn lotka_volterra_uses_its_own_defaults() {
        let cfg = RunConfig {
            task: Some(Task::LotkaVolterra),
            ..RunConfig::default()
        };
        let r = cfg.resolve(None).unwrap();
        assert_eq!(r.model.obs_dim, 2);
        assert_eq!(r.train.context_range, [1, 100]);
        assert_eq!(r.train.eval_context, 90);
        assert_eq!(r.task.train_count, 40);
    }
}
