//! Experiment configuration and the end-to-end tower comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, Split, SyntheticSample, Task};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::fusion::{self, FusionMode};
use crate::mllm::{self, ModelConfig};
use crate::params::ParameterStore;
use crate::tokenizer::Tokenizer;
use crate::training::{self, LmPretrainConfig, MetricRow, Model, StageConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub train_samples: usize,
    pub eval_samples: usize,
}

/// Stand-ins for the pretrained components: random frozen encoders and a
/// language model warmed up to answer from symbolic scene context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainedConfig {
    pub encoder_seed: u64,
    pub lm: LmPretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Seeds fusion and connector init and data order.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrained: PretrainedConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl ExperimentConfig {
    pub fn toy() -> Self {
        ExperimentConfig {
            seed: 1,
            model: ModelConfig::toy(FusionMode::Ftz),
            data: DataConfig {
                seed: 2024,
                train_samples: 2000,
                eval_samples: 300,
            },
            pretrained: PretrainedConfig {
                encoder_seed: 7,
                lm: LmPretrainConfig::default(),
            },
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.stage != 1 || self.stage2.stage != 2 {
            return Err(Error::Config("stage1.stage must be 1 and stage2.stage must be 2".into()));
        }
        if self.data.train_samples == 0 || self.data.eval_samples == 0 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn stage(&self, stage: u8) -> Result<&StageConfig> {
        match stage {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            s => Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
        }
    }

    pub fn train_data(&self) -> Result<Vec<SyntheticSample>> {
        generate_dataset(self.data.seed, self.data.train_samples, Split::Train)
    }

    pub fn eval_data(&self) -> Result<Vec<SyntheticSample>> {
        generate_dataset(self.data.seed, self.data.eval_samples, Split::Eval)
    }
}

/// Frozen encoders plus the warmed-up language model. Depends only on
/// the pretrained settings and the training texts, never on the tower mode.
pub fn pretrained_base(cfg: &ExperimentConfig, train: &[SyntheticSample]) -> Result<ParameterStore> {
    let tok = Tokenizer::synthetic();
    let mut params = fusion::init_encoders(&cfg.model.tower, cfg.pretrained.encoder_seed)?;
    let mut lm = mllm::init_lm(&cfg.model.lm, cfg.pretrained.lm.seed)?;
    training::pretrain_lm(&mut lm, &cfg.model, &tok, train, &cfg.pretrained.lm)?;
    params.extend(lm)?;
    Ok(params)
}

/// Adds fresh fusion and connector weights for `mode` to a copy of `base`.
pub fn fresh_model(cfg: &ExperimentConfig, base: &ParameterStore, mode: FusionMode, seed: u64) -> Result<Model> {
    let model_cfg = cfg.model.with_mode(mode);
    model_cfg.validate()?;
    let mut params = base.clone();
    params.extend(fusion::init_params(&model_cfg.tower, seed)?)?;
    params.extend(mllm::init_connector(model_cfg.connector(), seed)?)?;
    Ok(Model {
        cfg: model_cfg,
        params,
        tok: Tokenizer::synthetic(),
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub stage1: Vec<MetricRow>,
    pub stage2: Vec<MetricRow>,
    pub report: EvalReport,
    pub model: Model,
}

/// Stage 1, stage 2 and evaluation of one tower mode.
pub fn run_mode(
    cfg: &ExperimentConfig,
    base: &ParameterStore,
    mode: FusionMode,
    seed: u64,
    train: &[SyntheticSample],
    eval_set: &[SyntheticSample],
    out: Option<&Path>,
) -> Result<RunOutcome> {
    let mut model = fresh_model(cfg, base, mode, seed)?;
    let dir = |s: &str| out.map(|o| o.join(format!("{mode}-seed{seed}")).join(s));
    let s1 = training::run_stage(&mut model, &cfg.stage1, seed, train, dir("stage1").as_deref())?;
    let s2 = training::run_stage(&mut model, &cfg.stage2, seed, train, dir("stage2").as_deref())?;
    let report = eval::evaluate(&model, eval_set, seed)?;
    Ok(RunOutcome {
        stage1: s1.rows,
        stage2: s2.rows,
        report,
        model,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
}

fn acc_cell(r: &EvalReport, t: Task) -> String {
    r.accuracy(t).map_or(String::new(), |a| format!("{a:.6}"))
}

impl Comparison {
    /// One row per (mode, seed).
    pub fn table_csv(&self) -> String {
        let mut s = String::from("mode,seed,caption_acc,count_acc,exist_acc\n");
        for r in &self.reports {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.mode,
                r.seed,
                acc_cell(r, Task::Caption),
                acc_cell(r, Task::Count),
                acc_cell(r, Task::Exist)
            );
        }
        s
    }

    /// Mean accuracy of `mode` on `task` across seeds.
    pub fn mean(&self, mode: FusionMode, task: Task) -> Option<f64> {
        let accs: Vec<f64> = self
            .reports
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(|r| r.accuracy(task))
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn means_csv(&self) -> String {
        let mut s = String::from("mode,caption_acc,count_acc,exist_acc\n");
        for mode in FusionMode::ALL {
            let cell = |t| self.mean(mode, t).map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(s, "{mode},{},{},{}", cell(Task::Caption), cell(Task::Count), cell(Task::Exist));
        }
        s
    }
}

pub const TABLE_FILE: &str = "comparison.csv";
pub const MEANS_FILE: &str = "comparison_means.csv";

/// Everything shared by the runs of a comparison.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<SyntheticSample>,
    pub eval: Vec<SyntheticSample>,
    pub base: ParameterStore,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let train = cfg.train_data()?;
    let eval = cfg.eval_data()?;
    let base = pretrained_base(cfg, &train)?;
    Ok(Prepared { train, eval, base })
}

/// Trains and evaluates every tower mode for every seed on the same data
/// and the same pretrained base. Only the tower differs between modes; the
/// connector and language model start byte-identical, which is checked.
pub fn compare_towers(cfg: &ExperimentConfig, seeds: &[u64], out: Option<&Path>) -> Result<Comparison> {
    let prepared = prepare(cfg)?;
    compare_towers_prepared(cfg, seeds, &prepared, out)
}

pub fn compare_towers_prepared(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    prepared: &Prepared,
    out: Option<&Path>,
) -> Result<Comparison> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Input("no seeds given".into()));
    }
    for mode in FusionMode::ALL {
        cfg.model.with_mode(mode).validate()?;
    }
    let mut reports = Vec::with_capacity(seeds.len() * FusionMode::ALL.len());
    for &seed in seeds {
        let mut init_hash: Option<(String, String)> = None;
        for mode in FusionMode::ALL {
            let m = fresh_model(cfg, &prepared.base, mode, seed)?;
            let h = (m.params.sha256(&["connector."]), m.params.sha256(&["lm."]));
            match &init_hash {
                None => init_hash = Some(h),
                Some(first) if *first != h => {
                    return Err(Error::Config(format!(
                        "connector or LM init differs across modes for seed {seed}"
                    )));
                }
                Some(_) => {}
            }
            let outcome = run_mode(cfg, &prepared.base, mode, seed, &prepared.train, &prepared.eval, out)?;
            reports.push(outcome.report);
        }
    }
    let cmp = Comparison { reports };
    if let Some(dir) = out {
        write_file(&dir.join(TABLE_FILE), &cmp.table_csv())?;
        write_file(&dir.join(MEANS_FILE), &cmp.means_csv())?;
    }
    Ok(cmp)
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Path of the reference configuration shipped with the crate.
pub fn reference_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join("reference.toml")
}
