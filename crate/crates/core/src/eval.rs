//! Greedy-decoding exact-match evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{SyntheticSample, Task};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, TowerInput};
use crate::mllm::{self, greedy_decode};
use crate::params::Binder;
use crate::tensor::Graph;
use crate::tokenizer::Tokenizer;
use crate::training::Model;
use crate::vit::Image;

/// Images encoded per tower pass during evaluation.
const ENCODE_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TaskScore {
    pub correct: usize,
    pub total: usize,
}

impl TaskScore {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: FusionMode,
    pub seed: u64,
    pub scores: BTreeMap<Task, TaskScore>,
}

impl EvalReport {
    pub fn accuracy(&self, task: Task) -> Option<f64> {
        self.scores.get(&task).and_then(TaskScore::accuracy)
    }

    pub fn total(&self) -> usize {
        self.scores.values().map(|s| s.total).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,seed,task,correct,total,accuracy\n");
        for task in Task::ALL {
            let sc = self.scores.get(&task).copied().unwrap_or_default();
            let acc = sc.accuracy().map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(s, "{},{},{},{},{},{}", self.mode, self.seed, task, sc.correct, sc.total, acc);
        }
        s
    }
}

/// Anything that produces answer token ids for samples.
pub trait Answerer {
    fn answer_all(&self, samples: &[SyntheticSample]) -> Result<Vec<Vec<usize>>>;
}

/// Answers come from greedy decoding with a per-task budget.
impl Answerer for Model {
    fn answer_all(&self, samples: &[SyntheticSample]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(ENCODE_CHUNK) {
            let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let visual = {
                let mut g = Graph::<f32>::new();
                let mut binder = Binder::frozen(&self.params);
                let input = TowerInput::from_images(&images, &self.cfg.tower)?;
                let v = mllm::visual_embeds_graph(&mut g, &mut binder, &self.cfg, &input)?;
                g.value(v).clone()
            };
            let nv = self.cfg.n_visual();
            for (i, s) in chunk.iter().enumerate() {
                let v = visual.slice_rows(i * nv, (i + 1) * nv);
                out.push(greedy_decode(&self.params, &self.cfg, &self.tok, &v, &s.prompt(&self.tok), s.task.max_new())?);
            }
        }
        Ok(out)
    }
}

/// Confirms the dataset's stored ids agree with `tok`.
pub fn check_dataset_vocabulary(samples: &[SyntheticSample], tok: &Tokenizer) -> Result<()> {
    for s in samples {
        if tok.encode(&s.question).ok().as_ref() != Some(&s.question_ids)
            || tok.encode(&s.answer).ok().as_ref() != Some(&s.answer_ids)
        {
            return Err(Error::Config(format!(
                "vocabulary mismatch: sample {} does not tokenize to its stored ids",
                s.index
            )));
        }
    }
    Ok(())
}

/// Exact match of the decoded answer against the gold answer ids, per task.
pub fn evaluate_with(
    answerer: &dyn Answerer,
    samples: &[SyntheticSample],
    tok: &Tokenizer,
    mode: FusionMode,
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    check_dataset_vocabulary(samples, tok)?;
    let answers = answerer.answer_all(samples)?;
    let mut scores: BTreeMap<Task, TaskScore> = BTreeMap::new();
    for (s, a) in samples.iter().zip(&answers) {
        let e = scores.entry(s.task).or_default();
        e.total += 1;
        e.correct += usize::from(*a == s.answer_ids);
    }
    Ok(EvalReport { mode, seed, scores })
}

pub fn evaluate(model: &Model, samples: &[SyntheticSample], seed: u64) -> Result<EvalReport> {
    model.cfg.check_vocabulary(&model.tok)?;
    evaluate_with(model, samples, &model.tok, model.cfg.tower.mode, seed)
}
