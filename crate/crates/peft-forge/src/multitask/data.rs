//! Universal dataset: the shuffled concatenation of every task's examples,
//! each tagged with its source task, with task prompts applied.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use super::tasks::{RawExample, Split, TaskData, SEP};
use crate::backbone::serialize_input;
use crate::error::{Error, Result};
use crate::multitask::scenes::SceneInstance;
use crate::rng::{derive_seed, Rng};
use serde::{Deserialize, Serialize};

/// One model-ready example. `input_tokens` are post-serialization (prompt
/// prefix applied when the dataset was built); `target_tokens` end with EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub task: String,
    pub scene: Vec<SceneInstance>,
    pub input_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
}

/// Merged multi-task example stream.
#[derive(Debug, Clone, PartialEq)]
pub struct UniversalDataset {
    pub examples: Vec<Example>,
    pub task_names: Vec<String>,
}

impl UniversalDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn task_index(&self, task: &str) -> Result<usize> {
        self.task_names
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| Error::Task(format!("unknown task {task}")))
    }

    pub fn by_task<'a>(&'a self, task: &'a str) -> impl Iterator<Item = &'a Example> + 'a {
        self.examples.iter().filter(move |e| e.task == task)
    }

    pub fn counts_by_task(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.examples {
            *out.entry(e.task.clone()).or_insert(0) += 1;
        }
        out
    }

    /// JSONL dump, one example per line. Features are not stored; they are
    /// recomputed from the symbolic scenes and the featurizer seed.
    pub fn dump_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        for example in &self.examples {
            serde_json::to_writer(&mut w, example)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<UniversalDataset> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut examples = Vec::new();
        let mut task_names: Vec<String> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let example: Example = serde_json::from_str(&line)
                .map_err(|e| Error::Io(format!("{} line {}: {e}", path.display(), i + 1)))?;
            if !task_names.contains(&example.task) {
                task_names.push(example.task.clone());
            }
            examples.push(example);
        }
        Ok(UniversalDataset { examples, task_names })
    }
}

/// Concatenate one split of every task, apply prompt serialization, and
/// shuffle uniformly (seeded). Task order in `task_names` follows the task
/// list, so task indices are stable across splits.
pub fn build_universal_dataset(
    tasks: &[TaskData],
    split: Split,
    use_prompt: bool,
    seed: u64,
) -> Result<UniversalDataset> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks".into()));
    }
    let mut examples = Vec::new();
    let mut task_names = Vec::new();
    for task in tasks {
        task_names.push(task.spec.name.clone());
        let raws: &[RawExample] = match split {
            Split::Train => &task.train,
            Split::Val => &task.val,
            Split::Test => &task.test,
        };
        for raw in raws {
            examples.push(Example {
                task: task.spec.name.clone(),
                scene: raw.scenes.clone(),
                input_tokens: serialize_input(&task.spec.prompt_prefix, SEP, &raw.input, use_prompt),
                target_tokens: raw.target.clone(),
            });
        }
    }
    let label = format!("universal_shuffle_{split:?}");
    let mut rng = Rng::new(derive_seed(seed, &label));
    rng.shuffle(&mut examples);
    Ok(UniversalDataset { examples, task_names })
}
