//! Task inventory, vocabulary, and synthetic example generators.
//!
//! Four scene tasks stand in for the usual multi-task V&L suite: `count`
//! (how many objects of a color), `exist` (is a shape on the board),
//! `pair` (is a shape on both of two boards), and `caption` (describe the
//! first object; no text input). A separate `mirror_a`/`mirror_b` suite
//! draws both tasks from one input distribution with opposite answers, to
//! measure what task prompts disambiguate.

use std::collections::{BTreeMap, HashSet};

use super::scenes::{Color, SceneInstance, Shape};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;

/// Closed symbolic token inventory.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<&'static str>,
    index: BTreeMap<&'static str, u32>,
}

impl Vocab {
    pub fn standard() -> Vocab {
        let tokens: Vec<&'static str> = vec![
            "<pad>", "<bos>", "<eos>", "<sep>",
            "[count]", "[exist]", "[pair]", "[caption]", "[mirror_a]", "[mirror_b]",
            "how", "many", "is", "there", "in", "both", "a",
            "red", "green", "blue", "yellow",
            "circle", "square", "triangle", "star",
            "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
            "yes", "no", "true", "false",
        ];
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Index(format!("token {token:?} not in vocabulary")))
    }

    pub fn word(&self, id: u32) -> &str {
        self.tokens.get(id as usize).copied().unwrap_or("<?>")
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn number_word(&self, n: usize) -> Result<u32> {
        const WORDS: [&str; 10] =
            ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
        WORDS
            .get(n)
            .map(|w| self.id(w))
            .transpose()?
            .ok_or_else(|| Error::Index(format!("no number word for {n}")))
    }
}

/// A named task: prompt prefix, answer space, generator knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub prompt_prefix: Vec<u32>,
    pub answer_space: String,
    pub n_boards: usize,
}

/// An example before prompt serialization: raw text in, answer (with EOS) out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub scenes: Vec<SceneInstance>,
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// One task's spec plus its three disjoint splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<RawExample>,
    pub val: Vec<RawExample>,
    pub test: Vec<RawExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-split example counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskSuite {
    /// count / exist / pair / caption.
    #[default]
    Standard,
    /// count / exist / caption: the pretraining suite, leaving `pair` unseen.
    Upstream,
    /// exist alone; a minimal grounding pretrain for confusion studies.
    ExistOnly,
    /// mirror_a / mirror_b: identical input distributions, opposite answers.
    ConfusionPair,
}

/// Task-set block of the experiment config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSetConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Per-task size overrides (for low-resource experiments).
    #[serde(default)]
    pub overrides: BTreeMap<String, SplitSizes>,
    #[serde(default)]
    pub suite: TaskSuite,
}

impl TaskSetConfig {
    pub fn sizes_for(&self, task: &str) -> SplitSizes {
        self.overrides.get(task).copied().unwrap_or(SplitSizes {
            train: self.train_size,
            val: self.val_size,
            test: self.test_size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config("task sizes must be positive".into()));
        }
        Ok(())
    }
}

struct Generated {
    scenes: Vec<SceneInstance>,
    input: Vec<u32>,
    answer: Vec<u32>,
}

fn gen_count(vocab: &Vocab, rng: &mut Rng) -> Result<Generated> {
    // Target count uniform over 0..=4 on an otherwise natural sparse board.
    let color = Color::all()[rng.below(4)];
    let target = rng.below(5);
    let n_distractors = rng.below(4);
    let mut cells: Vec<usize> = (0..super::scenes::BOARD_CELLS).collect();
    rng.shuffle(&mut cells);
    let mut scene = SceneInstance::empty();
    for (i, &cell) in cells.iter().take(target + n_distractors).enumerate() {
        let shape = Shape::all()[rng.below(4)];
        if i < target {
            scene.cells[cell] = Some((shape, color));
        } else {
            let others: Vec<Color> = Color::all().into_iter().filter(|&c| c != color).collect();
            scene.cells[cell] = Some((shape, others[rng.below(3)]));
        }
    }
    let input = vec![vocab.id("how")?, vocab.id("many")?, vocab.id(color.word())?];
    let answer = vec![vocab.number_word(scene.count_color(color))?];
    Ok(Generated { scenes: vec![scene], input, answer })
}

fn gen_exist(vocab: &Vocab, rng: &mut Rng) -> Result<Generated> {
    // Force a 50/50 answer prior by placing or clearing the queried shape.
    let n = rng.below(8) + 1;
    let mut scene = SceneInstance::random(rng, n);
    let shape = Shape::all()[rng.below(4)];
    if rng.flip() {
        scene.place_shape(rng, shape);
    } else {
        scene.remove_shape(shape);
    }
    let input = vec![
        vocab.id("is")?,
        vocab.id("there")?,
        vocab.id("a")?,
        vocab.id(shape.word())?,
    ];
    let answer = vec![vocab.id(if scene.has_shape(shape) { "yes" } else { "no" })?];
    Ok(Generated { scenes: vec![scene], input, answer })
}

fn gen_pair(vocab: &Vocab, rng: &mut Rng) -> Result<Generated> {
    let n_left = rng.below(6) + 1;
    let mut left = SceneInstance::random(rng, n_left);
    let n_right = rng.below(6) + 1;
    let mut right = SceneInstance::random(rng, n_right);
    let shape = Shape::all()[rng.below(4)];
    if rng.flip() {
        left.place_shape(rng, shape);
        right.place_shape(rng, shape);
    } else {
        // Guarantee a negative by clearing the shape from one side.
        if rng.flip() {
            left.remove_shape(shape);
        } else {
            right.remove_shape(shape);
        }
    }
    let in_both = left.has_shape(shape) && right.has_shape(shape);
    let input = vec![
        vocab.id("is")?,
        vocab.id("there")?,
        vocab.id("a")?,
        vocab.id(shape.word())?,
        vocab.id("in")?,
        vocab.id("both")?,
    ];
    let answer = vec![vocab.id(if in_both { "true" } else { "false" })?];
    Ok(Generated { scenes: vec![left, right], input, answer })
}

fn gen_caption(vocab: &Vocab, rng: &mut Rng) -> Result<Generated> {
    let n = rng.below(8) + 1;
    let scene = SceneInstance::random(rng, n);
    let (shape, color) = scene.first_object().expect("at least one object");
    let answer = vec![vocab.id("a")?, vocab.id(color.word())?, vocab.id(shape.word())?];
    Ok(Generated { scenes: vec![scene], input: Vec::new(), answer })
}

/// exist-style example with an optionally inverted answer.
fn gen_mirror(vocab: &Vocab, rng: &mut Rng, invert: bool) -> Result<Generated> {
    let mut g = gen_exist(vocab, rng)?;
    if invert {
        let yes = vocab.id("yes")?;
        let no = vocab.id("no")?;
        g.answer = vec![if g.answer[0] == yes { no } else { yes }];
    }
    Ok(g)
}

fn spec(vocab: &Vocab, name: &str, answer_space: &str, n_boards: usize) -> Result<TaskSpec> {
    Ok(TaskSpec {
        name: name.to_string(),
        prompt_prefix: vec![vocab.id(&format!("[{name}]"))?],
        answer_space: answer_space.to_string(),
        n_boards,
    })
}

fn fill_splits<F>(
    vocab: &Vocab,
    seed: u64,
    task: &str,
    sizes: SplitSizes,
    mut gen: F,
) -> Result<(Vec<RawExample>, Vec<RawExample>, Vec<RawExample>)>
where
    F: FnMut(&Vocab, &mut Rng) -> Result<Generated>,
{
    let mut rng = Rng::new(derive_seed(seed, &format!("task_{task}")));
    let mut seen: HashSet<String> = HashSet::new();
    let mut draw = |rng: &mut Rng, seen: &mut HashSet<String>| -> Result<RawExample> {
        // Resample on duplicates so the three splits stay disjoint.
        for _ in 0..1000 {
            let g = gen(vocab, rng)?;
            let fingerprint = serde_json::to_string(&(&g.scenes, &g.input)).expect("serializable");
            if seen.insert(fingerprint) {
                let mut target = g.answer;
                target.push(EOS);
                return Ok(RawExample { scenes: g.scenes, input: g.input, target });
            }
        }
        Err(Error::Config(format!(
            "task {task}: could not draw enough distinct examples; reduce sizes"
        )))
    };
    let mut split = |rng: &mut Rng, seen: &mut HashSet<String>, n: usize| -> Result<Vec<RawExample>> {
        (0..n).map(|_| draw(rng, seen)).collect()
    };
    let train = split(&mut rng, &mut seen, sizes.train)?;
    let val = split(&mut rng, &mut seen, sizes.val)?;
    let test = split(&mut rng, &mut seen, sizes.test)?;
    Ok((train, val, test))
}

/// Generate every task of the configured suite with disjoint splits.
pub fn generate_tasks(vocab: &Vocab, cfg: &TaskSetConfig, seed: u64) -> Result<Vec<TaskData>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut add = |name: &str,
                   answer_space: &str,
                   n_boards: usize,
                   gen: &mut dyn FnMut(&Vocab, &mut Rng) -> Result<Generated>|
     -> Result<()> {
        let sizes = cfg.sizes_for(name);
        let (train, val, test) = fill_splits(vocab, seed, name, sizes, gen)?;
        out.push(TaskData { spec: spec(vocab, name, answer_space, n_boards)?, train, val, test });
        Ok(())
    };
    match cfg.suite {
        TaskSuite::Standard => {
            add("count", "number words zero..nine", 1, &mut gen_count)?;
            add("exist", "yes/no", 1, &mut gen_exist)?;
            add("pair", "true/false", 2, &mut gen_pair)?;
            add("caption", "a <color> <shape>", 1, &mut gen_caption)?;
        }
        TaskSuite::Upstream => {
            add("count", "number words zero..nine", 1, &mut gen_count)?;
            add("exist", "yes/no", 1, &mut gen_exist)?;
            add("caption", "a <color> <shape>", 1, &mut gen_caption)?;
        }
        TaskSuite::ExistOnly => {
            add("exist", "yes/no", 1, &mut gen_exist)?;
        }
        TaskSuite::ConfusionPair => {
            add("mirror_a", "yes/no", 1, &mut |v, r| gen_mirror(v, r, false))?;
            add("mirror_b", "yes/no (inverted)", 1, &mut |v, r| gen_mirror(v, r, true))?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TaskSetConfig {
        TaskSetConfig {
            train_size: 30,
            val_size: 10,
            test_size: 10,
            overrides: BTreeMap::new(),
            suite: TaskSuite::Standard,
        }
    }

    #[test]
    fn count_on_empty_board_is_zero() {
        let vocab = Vocab::standard();
        let scene = SceneInstance::empty();
        assert_eq!(scene.count_color(Color::Red), 0);
        assert_eq!(vocab.word(vocab.number_word(0).unwrap()), "zero");
    }

    #[test]
    fn exist_answer_matches_board() {
        let vocab = Vocab::standard();
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let g = gen_exist(&vocab, &mut rng).unwrap();
            let shape_word = vocab.word(g.input[3]).to_string();
            let shape = Shape::all()
                .into_iter()
                .find(|s| s.word() == shape_word)
                .unwrap();
            let expect = if g.scenes[0].has_shape(shape) { "yes" } else { "no" };
            assert_eq!(vocab.word(g.answer[0]), expect);
        }
    }

    #[test]
    fn pair_answer_matches_boards() {
        let vocab = Vocab::standard();
        let mut rng = Rng::new(4);
        let mut trues = 0;
        for _ in 0..100 {
            let g = gen_pair(&vocab, &mut rng).unwrap();
            let shape_word = vocab.word(g.input[3]).to_string();
            let shape = Shape::all()
                .into_iter()
                .find(|s| s.word() == shape_word)
                .unwrap();
            let expect = g.scenes[0].has_shape(shape) && g.scenes[1].has_shape(shape);
            assert_eq!(vocab.word(g.answer[0]), if expect { "true" } else { "false" });
            trues += expect as usize;
        }
        // Construction balances the labels.
        assert!((30..=70).contains(&trues), "{trues}");
    }

    #[test]
    fn caption_is_reproducible_for_same_seed() {
        let vocab = Vocab::standard();
        let cfg = small_cfg();
        let a = generate_tasks(&vocab, &cfg, 11).unwrap();
        let b = generate_tasks(&vocab, &cfg, 11).unwrap();
        let cap_a = &a.iter().find(|t| t.spec.name == "caption").unwrap().train;
        let cap_b = &b.iter().find(|t| t.spec.name == "caption").unwrap().train;
        assert_eq!(cap_a, cap_b);
    }

    #[test]
    fn splits_are_disjoint() {
        let vocab = Vocab::standard();
        let tasks = generate_tasks(&vocab, &small_cfg(), 5).unwrap();
        for task in &tasks {
            let mut seen = HashSet::new();
            for ex in task.train.iter().chain(&task.val).chain(&task.test) {
                let key = serde_json::to_string(&(&ex.scenes, &ex.input)).unwrap();
                assert!(seen.insert(key), "duplicate in task {}", task.spec.name);
            }
        }
    }

    #[test]
    fn mirror_tasks_conflict_on_answers() {
        let vocab = Vocab::standard();
        let mut rng_a = Rng::new(9);
        let mut rng_b = Rng::new(9);
        let a = gen_mirror(&vocab, &mut rng_a, false).unwrap();
        let b = gen_mirror(&vocab, &mut rng_b, true).unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.scenes, b.scenes);
        assert_ne!(a.answer, b.answer);
    }

    #[test]
    fn overrides_shrink_one_task() {
        let vocab = Vocab::standard();
        let mut cfg = small_cfg();
        cfg.overrides.insert(
            "pair".into(),
            SplitSizes { train: 5, val: 10, test: 10 },
        );
        let tasks = generate_tasks(&vocab, &cfg, 5).unwrap();
        let pair = tasks.iter().find(|t| t.spec.name == "pair").unwrap();
        assert_eq!(pair.train.len(), 5);
        let count = tasks.iter().find(|t| t.spec.name == "count").unwrap();
        assert_eq!(count.train.len(), 30);
    }

    #[test]
    fn vocab_ids_are_stable_and_unique() {
        let vocab = Vocab::standard();
        assert_eq!(vocab.id("<pad>").unwrap(), PAD);
        assert_eq!(vocab.id("<bos>").unwrap(), BOS);
        assert_eq!(vocab.id("<eos>").unwrap(), EOS);
        assert_eq!(vocab.id("<sep>").unwrap(), SEP);
        let mut ids = HashSet::new();
        for i in 0..vocab.len() as u32 {
            assert!(ids.insert(vocab.id(vocab.word(i)).unwrap()));
        }
    }
}
