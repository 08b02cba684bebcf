//! Synthetic linguistic probing suite and the seed-replicated win harness.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{
    determiner_for, intransitive_verbs, mismatched_determiner, noun_count, nouns_in, random_clause,
    random_noun_phrase, transitive_verbs, Clause, ClauseStyle, Lexicon, Negation, NounCategory, NounPhrase, Token,
    COLOR_ADJECTIVES,
};
use crate::io::{atomic_write, read};
use crate::linalg::Matrix;
use crate::model::DualHeadModel;
use crate::seeds::rng_for;
use crate::stats::{mean, welch_t_test};

pub const TRAIN_PER_TASK: usize = 96;
pub const TEST_PER_TASK: usize = 96;
pub const PROBE_STEPS: usize = 2000;
pub const PROBE_LR: f64 = 0.1;
pub const DEFAULT_PROBE_SEEDS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subfield {
    Syntax,
    Semantics,
    Morphology,
    Reasoning,
    Discourse,
}

impl Subfield {
    pub const ALL: [Subfield; 5] = [
        Subfield::Syntax,
        Subfield::Semantics,
        Subfield::Morphology,
        Subfield::Reasoning,
        Subfield::Discourse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subfield::Syntax => "syntax",
            Subfield::Semantics => "semantics",
            Subfield::Morphology => "morphology",
            Subfield::Reasoning => "reasoning",
            Subfield::Discourse => "discourse",
        }
    }
}

impl fmt::Display for Subfield {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<Token>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub name: String,
    pub subfield: Subfield,
    pub phenomenon: String,
    pub n_classes: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl ProbeTask {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(format!("task {}: {m}", self.name)));
        if self.n_classes < 2 {
            return fail(format!("n_classes {} below 2", self.n_classes));
        }
        if self.train.len() < 64 || self.test.len() < 64 {
            return fail(format!("needs 64 train and 64 test examples, has {} and {}", self.train.len(), self.test.len()));
        }
        let all = self.train.iter().chain(&self.test);
        let mut counts = vec![0usize; self.n_classes];
        for ex in all {
            if ex.label >= self.n_classes {
                return fail(format!("label {} out of range", ex.label));
            }
            if ex.tokens.is_empty() {
                return fail("empty example".into());
            }
            counts[ex.label] += 1;
        }
        let total = (self.train.len() + self.test.len()) as f64;
        if let Some(c) = counts.iter().position(|&c| (c as f64) < 0.1 * total) {
            return fail(format!("class {c} has {} of {total} examples", counts[c]));
        }
        Ok(())
    }
}

type Sampler = fn(&mut rand_chacha::ChaCha8Rng, usize) -> Vec<&'static str>;

struct TaskDef {
    name: &'static str,
    subfield: Subfield,
    phenomenon: &'static str,
    sample: Sampler,
}

const TASKS: &[TaskDef] = &[
    TaskDef { name: "subject_verb_agreement", subfield: Subfield::Morphology, phenomenon: "agreement", sample: subject_verb_agreement },
    TaskDef { name: "determiner_noun_agreement", subfield: Subfield::Morphology, phenomenon: "agreement", sample: determiner_noun_agreement },
    TaskDef { name: "subject_number", subfield: Subfield::Morphology, phenomenon: "number", sample: subject_number },
    TaskDef { name: "bigram_shift", subfield: Subfield::Syntax, phenomenon: "word_order", sample: bigram_shift },
    TaskDef { name: "transitive_verb", subfield: Subfield::Syntax, phenomenon: "argument_structure", sample: transitive_verb },
    TaskDef { name: "prepositional_phrase", subfield: Subfield::Syntax, phenomenon: "constituency", sample: prepositional_phrase },
    TaskDef { name: "animate_subject", subfield: Subfield::Semantics, phenomenon: "animacy", sample: animate_subject },
    TaskDef { name: "color_word", subfield: Subfield::Semantics, phenomenon: "word_content", sample: color_word },
    TaskDef { name: "animal_or_person", subfield: Subfield::Semantics, phenomenon: "noun_category", sample: animal_or_person },
    TaskDef { name: "negation_parity", subfield: Subfield::Reasoning, phenomenon: "negation", sample: negation_parity },
    TaskDef { name: "contradiction", subfield: Subfield::Reasoning, phenomenon: "consistency", sample: contradiction },
    TaskDef { name: "pronoun_agreement", subfield: Subfield::Discourse, phenomenon: "coreference", sample: pronoun_agreement },
    TaskDef { name: "sentence_order", subfield: Subfield::Discourse, phenomenon: "coherence", sample: sentence_order },
];

/// The built-in binary tasks, balanced per split.
pub fn builtin_tasks(seed: u64) -> Vec<ProbeTask> {
    let lexicon = Lexicon::new();
    TASKS
        .iter()
        .map(|def| {
            let mut rng = rng_for(seed, &format!("probe-task-{}", def.name));
            let mut split = |n: usize| -> Vec<Example> {
                let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
                labels.shuffle(&mut rng);
                labels
                    .into_iter()
                    .map(|label| Example {
                        tokens: (def.sample)(&mut rng, label).iter().map(|w| lexicon.id(w)).collect(),
                        label,
                    })
                    .collect()
            };
            let train = split(TRAIN_PER_TASK);
            let test = split(TEST_PER_TASK);
            ProbeTask {
                name: def.name.to_string(),
                subfield: def.subfield,
                phenomenon: def.phenomenon.to_string(),
                n_classes: 2,
                train,
                test,
            }
        })
        .collect()
}

fn plain_style() -> ClauseStyle {
    ClauseStyle {
        negation_rate: 0.2,
        adjective_rate: 0.3,
        adverb_rate: 0.2,
        prepositional_rate: 0.2,
    }
}

fn any_subject<R: Rng>(rng: &mut R, style: &ClauseStyle) -> NounPhrase {
    let noun = rng.random_range(0..noun_count());
    random_noun_phrase(rng, noun, style, true)
}

fn any_clause<R: Rng>(rng: &mut R, style: &ClauseStyle) -> Clause {
    let subject = any_subject(rng, style);
    random_clause(rng, subject, style)
}

fn animate_phrase<R: Rng>(rng: &mut R, style: &ClauseStyle) -> NounPhrase {
    let noun = animate_noun(rng);
    random_noun_phrase(rng, noun, style, true)
}

fn animate_noun<R: Rng>(rng: &mut R) -> usize {
    let category = if rng.random_bool(0.5) { NounCategory::Animal } else { NounCategory::Person };
    *nouns_in(category).choose(rng).unwrap()
}

fn sentence(words: Vec<&'static str>) -> Vec<&'static str> {
    let mut w = words;
    w.push(".");
    w
}

fn subject_verb_agreement(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = plain_style();
    let clause = any_clause(rng, &style);
    sentence(clause.words(label == 1))
}

fn determiner_noun_agreement(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = plain_style();
    let mut clause = any_clause(rng, &style);
    let plural = clause.subject.plural;
    clause.subject.determiner = if label == 1 { mismatched_determiner(rng, plural) } else { determiner_for(rng, plural) };
    sentence(clause.words(false))
}

fn subject_number(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = plain_style();
    let mut subject = any_subject(rng, &style);
    subject.plural = label == 1;
    subject.determiner = determiner_for(rng, subject.plural);
    sentence(random_clause(rng, subject, &style).words(false))
}

fn bigram_shift(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = plain_style();
    let mut words = any_clause(rng, &style).words(false);
    if label == 1 {
        let candidates: Vec<usize> = (0..words.len() - 1).filter(|&i| words[i] != words[i + 1]).collect();
        let i = *candidates.choose(rng).unwrap();
        words.swap(i, i + 1);
    }
    sentence(words)
}

fn transitive_verb(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = plain_style();
    let subject = animate_phrase(rng, &style);
    let mut clause = random_clause(rng, subject, &style);
    let pool = if label == 1 { transitive_verbs() } else { intransitive_verbs() };
    clause.verb = *pool.choose(rng).unwrap();
    clause.object = (label == 1).then(|| any_subject(rng, &style));
    sentence(clause.words(false))
}

fn prepositional_phrase(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = ClauseStyle {
        prepositional_rate: if label == 1 { 1.0 } else { 0.0 },
        ..plain_style()
    };
    sentence(any_clause(rng, &style).words(false))
}

fn animate_subject(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = plain_style();
    let noun = if label == 1 { animate_noun(rng) } else { *nouns_in(NounCategory::Thing).choose(rng).unwrap() };
    let subject = random_noun_phrase(rng, noun, &style, false);
    sentence(random_clause(rng, subject, &style).words(false))
}

fn color_word(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = ClauseStyle {
        adjective_rate: 0.0,
        ..plain_style()
    };
    let mut clause = any_clause(rng, &style);
    let adjective = if label == 1 {
        *COLOR_ADJECTIVES.choose(rng).unwrap()
    } else {
        crate::grammar::random_adjective(rng, false)
    };
    clause.subject.adjectives = vec![adjective];
    sentence(clause.words(false))
}

fn animal_or_person(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = plain_style();
    let category = if label == 1 { NounCategory::Person } else { NounCategory::Animal };
    let noun = *nouns_in(category).choose(rng).unwrap();
    let subject = random_noun_phrase(rng, noun, &style, true);
    sentence(random_clause(rng, subject, &style).words(false))
}

fn with_negation<R: Rng>(rng: &mut R, clause: &mut Clause, negated: bool) {
    clause.negation = if !negated {
        Negation::None
    } else if rng.random_bool(0.7) {
        Negation::Auxiliary
    } else {
        Negation::Never
    };
}

fn negation_parity(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = plain_style();
    let first_negated = rng.random_bool(0.5);
    let second_negated = first_negated ^ (label == 1);
    let mut a = any_clause(rng, &style);
    let mut b = any_clause(rng, &style);
    with_negation(rng, &mut a, first_negated);
    with_negation(rng, &mut b, second_negated);
    let mut words = a.words(false);
    words.push("and");
    words.extend(b.words(false));
    sentence(words)
}

fn contradiction(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = ClauseStyle {
        adverb_rate: 0.0,
        prepositional_rate: 0.0,
        ..plain_style()
    };
    let mut first = any_clause(rng, &style);
    let negated = rng.random_bool(0.5);
    with_negation(rng, &mut first, negated);
    let mut second = first.clone();
    second.subject.determiner = "the";
    second.subject.adjectives.clear();
    with_negation(rng, &mut second, negated ^ (label == 1));
    let mut words = sentence(first.words(false));
    words.push(*["but", "and", "later"].choose(rng).unwrap());
    words.extend(sentence(second.words(false)));
    words
}

fn pronoun_agreement(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = plain_style();
    let subject = animate_phrase(rng, &style);
    let mut words = sentence(random_clause(rng, subject.clone(), &style).words(false));
    let mut follow = random_clause(rng, subject.clone(), &style);
    follow.pronoun_subject = true;
    let mut second = follow.words(false);
    if label == 1 {
        let other = NounPhrase { plural: !subject.plural, ..subject };
        second[0] = other.pronoun(false);
    }
    words.extend(sentence(second));
    words
}

fn sentence_order(rng: &mut rand_chacha::ChaCha8Rng, label: usize) -> Vec<&'static str> {
    let style = plain_style();
    let mut intro = animate_phrase(rng, &style);
    intro.determiner = if intro.plural { "some" } else { "a" };
    let first = random_clause(rng, intro.clone(), &style);
    let mut second = random_clause(rng, intro, &style);
    second.subject.determiner = "the";
    second.subject.adjectives.clear();
    let (a, b) = (sentence(first.words(false)), sentence(second.words(false)));
    if label == 1 {
        [b, a].concat()
    } else {
        [a, b].concat()
    }
}

/// Writes tasks as JSON lines, one example per line.
pub fn save_tasks(tasks: &[ProbeTask], path: &Path) -> Result<()> {
    let lexicon = Lexicon::new();
    let mut out = Vec::new();
    for task in tasks {
        for (split, examples) in [("train", &task.train), ("test", &task.test)] {
            for ex in examples {
                let line = TaskLine {
                    task: task.name.clone(),
                    subfield: task.subfield,
                    phenomenon: task.phenomenon.clone(),
                    n_classes: task.n_classes,
                    split: split.to_string(),
                    text: lexicon.decode(&ex.tokens),
                    tokens: ex.tokens.clone(),
                    label: ex.label,
                };
                serde_json::to_writer(&mut out, &line)?;
                out.push(b'\n');
            }
        }
    }
    atomic_write(path, &out)
}

pub fn load_tasks(path: &Path) -> Result<Vec<ProbeTask>> {
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format("tasks", e.valid_up_to() as u64, "invalid UTF-8"))?;
    let mut tasks: Vec<ProbeTask> = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        if line.trim().is_empty() {
            continue;
        }
        let l: TaskLine = serde_json::from_str(line).map_err(|e| Error::format("tasks", start, e.to_string()))?;
        let idx = match tasks.iter().position(|t| t.name == l.task) {
            Some(i) => i,
            None => {
                tasks.push(ProbeTask {
                    name: l.task.clone(),
                    subfield: l.subfield,
                    phenomenon: l.phenomenon.clone(),
                    n_classes: l.n_classes,
                    train: Vec::new(),
                    test: Vec::new(),
                });
                tasks.len() - 1
            }
        };
        let ex = Example {
            tokens: l.tokens,
            label: l.label,
        };
        match l.split.as_str() {
            "train" => tasks[idx].train.push(ex),
            "test" => tasks[idx].test.push(ex),
            other => return Err(Error::format("tasks", start, format!("unknown split {other:?}"))),
        }
    }
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

#[derive(Serialize, Deserialize)]
struct TaskLine {
    task: String,
    subfield: Subfield,
    phenomenon: String,
    n_classes: usize,
    split: String,
    text: String,
    tokens: Vec<Token>,
    label: usize,
}

/// Mean-pooled last-block features for both splits of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFeatures {
    pub train: Matrix,
    pub test: Matrix,
}

pub fn probe_features(model: &DualHeadModel, task: &ProbeTask) -> Result<ProbeFeatures> {
    let d = model.config().d_model;
    let pool = |examples: &[Example]| -> Result<Matrix> {
        let seqs: Vec<Vec<Token>> = examples.iter().map(|e| e.tokens.clone()).collect();
        let reps = model.representations(&seqs)?;
        let mut m = Matrix::zeros(examples.len(), d);
        for (i, (rep, seq)) in reps.iter().zip(&seqs).enumerate() {
            let row = m.row_mut(i);
            for t in 0..seq.len() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += rep[t * d + c] / seq.len() as f64;
                }
            }
        }
        Ok(m)
    };
    Ok(ProbeFeatures {
        train: pool(&task.train)?,
        test: pool(&task.test)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: String,
    pub subfield: Subfield,
    pub phenomenon: String,
    pub model: String,
    pub seed: u64,
    pub metric: f64,
}

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent. Returns test accuracy.
pub fn fit_probe(features: &ProbeFeatures, task: &ProbeTask, seed: u64) -> Result<f64> {
    let (x_train, x_test) = (&features.train, &features.test);
    if x_train.rows() != task.train.len() || x_test.rows() != task.test.len() || x_train.cols() != x_test.cols() {
        return Err(Error::contract("probe features do not match the task"));
    }
    if !x_train.is_finite() || !x_test.is_finite() {
        return Err(Error::contract(format!("non-finite probe features for task {}", task.name)));
    }
    let (n, d, k) = (x_train.rows(), x_train.cols(), task.n_classes);

    let means = x_train.column_means();
    let mut sds = vec![0.0; d];
    for i in 0..n {
        for (c, s) in sds.iter_mut().enumerate() {
            *s += (x_train.get(i, c) - means[c]).powi(2) / n as f64;
        }
    }
    let scale: Vec<f64> = sds.iter().map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let standardize = |x: &Matrix, rows: &[usize]| Matrix::from_fn(rows.len(), d, |i, c| (x.get(rows[i], c) - means[c]) * scale[c]);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "probe-order"));
    let x = standardize(x_train, &order);
    let y: Vec<usize> = order.iter().map(|&i| task.train[i].label).collect();

    let init = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
    let mut rng = rng_for(seed, "probe-init");
    let mut w = Matrix::from_fn(d, k, |_, _| init.sample(&mut rng));
    let mut b = vec![0.0; k];
    for _ in 0..PROBE_STEPS {
        let mut residual = x.matmul(&w)?;
        for i in 0..n {
            let row = residual.row_mut(i);
            for (v, bias) in row.iter_mut().zip(&b) {
                *v += bias;
            }
            softmax_in_place(row);
            row[y[i]] -= 1.0;
            for v in row.iter_mut() {
                *v /= n as f64;
            }
        }
        let grad_w = x.t_matmul(&residual)?;
        for (wv, g) in w.data_mut().iter_mut().zip(grad_w.data()) {
            *wv -= PROBE_LR * g;
        }
        for (c, bias) in b.iter_mut().enumerate() {
            *bias -= PROBE_LR * (0..n).map(|i| residual.get(i, c)).sum::<f64>();
        }
    }

    let test_rows: Vec<usize> = (0..x_test.rows()).collect();
    let logits = standardize(x_test, &test_rows).matmul(&w)?;
    let correct = task
        .test
        .iter()
        .enumerate()
        .filter(|(i, ex)| {
            let row = logits.row(*i);
            let pred = (0..k).fold(0, |best, c| if row[c] + b[c] > row[best] + b[best] { c } else { best });
            pred == ex.label
        })
        .count();
    Ok(correct as f64 / task.test.len() as f64)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Features plus one probe fit.
pub fn run_probe(model: &DualHeadModel, model_id: &str, task: &ProbeTask, seed: u64) -> Result<ProbeResult> {
    let features = probe_features(model, task)?;
    Ok(ProbeResult {
        task: task.name.clone(),
        subfield: task.subfield,
        phenomenon: task.phenomenon.clone(),
        model: model_id.to_string(),
        seed,
        metric: fit_probe(&features, task, seed)?,
    })
}

/// All tasks under `seeds` probe seeds, features computed once per task.
pub fn run_suite(model: &DualHeadModel, model_id: &str, tasks: &[ProbeTask], seeds: &[u64]) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::with_capacity(tasks.len() * seeds.len());
    for task in tasks {
        let features = probe_features(model, task)?;
        for &seed in seeds {
            out.push(ProbeResult {
                task: task.name.clone(),
                subfield: task.subfield,
                phenomenon: task.phenomenon.clone(),
                model: model_id.to_string(),
                seed,
                metric: fit_probe(&features, task, seed)?,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskComparison {
    pub task: String,
    pub subfield: Subfield,
    pub phenomenon: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub win_a: u8,
    pub win_b: u8,
}

/// Binary win matrix of model `a` against model `b`, one row per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub model_a: String,
    pub model_b: String,
    pub alpha: f64,
    pub tasks: Vec<TaskComparison>,
}

impl WinMatrix {
    pub fn swapped(&self) -> WinMatrix {
        WinMatrix {
            model_a: self.model_b.clone(),
            model_b: self.model_a.clone(),
            alpha: self.alpha,
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskComparison {
                    mean_a: t.mean_b,
                    mean_b: t.mean_a,
                    win_a: t.win_b,
                    win_b: t.win_a,
                    ..t.clone()
                })
                .collect(),
        }
    }
}

fn by_task(results: &[ProbeResult]) -> BTreeMap<&str, (&ProbeResult, Vec<f64>)> {
    let mut map: BTreeMap<&str, (&ProbeResult, Vec<f64>)> = BTreeMap::new();
    for r in results {
        map.entry(r.task.as_str()).or_insert_with(|| (r, Vec::new())).1.push(r.metric);
    }
    map
}

/// Per task, a model wins when its mean is higher and Welch's test rejects
/// at `alpha`.
pub fn compare_models(results_a: &[ProbeResult], results_b: &[ProbeResult], alpha: f64) -> Result<WinMatrix> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha {alpha} outside (0, 1)")));
    }
    let model_name = |rs: &[ProbeResult]| -> Result<String> {
        let first = rs.first().ok_or_else(|| Error::contract("no probe results"))?;
        if rs.iter().any(|r| r.model != first.model) {
            return Err(Error::contract("probe results mix several models"));
        }
        Ok(first.model.clone())
    };
    let (name_a, name_b) = (model_name(results_a)?, model_name(results_b)?);
    let (a, b) = (by_task(results_a), by_task(results_b));
    if a.keys().ne(b.keys()) {
        return Err(Error::contract("models were probed on different task sets"));
    }
    let mut tasks = Vec::with_capacity(a.len());
    for ((name, (meta, xs)), (_, ys)) in a.iter().zip(b.values()) {
        if xs.len() != ys.len() {
            return Err(Error::contract(format!("task {name}: {} seeds vs {}", xs.len(), ys.len())));
        }
        let test = welch_t_test(xs, &ys)?;
        let (ma, mb) = (mean(xs), mean(&ys));
        let significant = test.p_value < alpha;
        tasks.push(TaskComparison {
            task: name.to_string(),
            subfield: meta.subfield,
            phenomenon: meta.phenomenon.clone(),
            mean_a: ma,
            mean_b: mb,
            p_value: test.p_value,
            win_a: (significant && ma > mb) as u8,
            win_b: (significant && mb > ma) as u8,
        });
    }
    Ok(WinMatrix {
        model_a: name_a,
        model_b: name_b,
        alpha,
        tasks,
    })
}

/// One win matrix from a participant's held-out run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunWins {
    pub participant: String,
    pub heldout_run: usize,
    pub matrix: WinMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub participant: String,
    pub model: String,
    pub task: String,
    pub subfield: Subfield,
    pub phenomenon: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub participant: String,
    pub model: String,
    pub group: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinScores {
    pub tasks: Vec<TaskScore>,
    pub subfields: Vec<GroupScore>,
    pub phenomena: Vec<GroupScore>,
}

impl WinScores {
    /// Task scores of `model`, keyed by (participant, task).
    pub fn task_map(&self, model: &str) -> BTreeMap<(String, String), f64> {
        self.tasks
            .iter()
            .filter(|t| t.model == model)
            .map(|t| ((t.participant.clone(), t.task.clone()), t.score))
            .collect()
    }
}

/// Averages wins over held-out runs per participant, model and task, then
/// rolls task scores up by subfield and phenomenon.
pub fn aggregate_win_scores(runs: &[RunWins]) -> Result<WinScores> {
    let first = runs.first().ok_or_else(|| Error::contract("no win matrices to aggregate"))?;
    let axis: Vec<&str> = first.matrix.tasks.iter().map(|t| t.task.as_str()).collect();
    // (participant, model, task) -> (meta, wins)
    let mut acc: BTreeMap<(String, String, String), (Subfield, String, Vec<f64>)> = BTreeMap::new();
    for run in runs {
        if run.matrix.tasks.iter().map(|t| t.task.as_str()).ne(axis.iter().copied()) {
            return Err(Error::contract("win matrices do not share a task axis"));
        }
        for side in [run.matrix.clone(), run.matrix.swapped()] {
            for t in &side.tasks {
                acc.entry((run.participant.clone(), side.model_a.clone(), t.task.clone()))
                    .or_insert_with(|| (t.subfield, t.phenomenon.clone(), Vec::new()))
                    .2
                    .push(t.win_a as f64);
            }
        }
    }
    let tasks: Vec<TaskScore> = acc
        .into_iter()
        .map(|((participant, model, task), (subfield, phenomenon, wins))| TaskScore {
            participant,
            model,
            task,
            subfield,
            phenomenon,
            score: mean(&wins),
        })
        .collect();
    let roll = |key: &dyn Fn(&TaskScore) -> String| -> Vec<GroupScore> {
        let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
        for t in &tasks {
            groups.entry((t.participant.clone(), t.model.clone(), key(t))).or_default().push(t.score);
        }
        groups
            .into_iter()
            .map(|((participant, model, group), scores)| GroupScore {
                participant,
                model,
                group,
                score: mean(&scores),
            })
            .collect()
    };
    let subfields = roll(&|t| t.subfield.name().to_string());
    let phenomena = roll(&|t| t.phenomenon.clone());
    Ok(WinScores {
        tasks,
        subfields,
        phenomena,
    })
}

pub fn results_csv(results: &[ProbeResult]) -> String {
    let mut out = String::from("task,subfield,phenomenon,model,seed,metric\n");
    for r in results {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.task, r.subfield, r.phenomenon, r.model, r.seed, r.metric));
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ProbeResult>> {
    let mut lines = text.lines();
    let mut offset = 0u64;
    match lines.next() {
        Some("task,subfield,phenomenon,model,seed,metric") => {}
        _ => return Err(Error::format("probe results header", 0, "unexpected header")),
    }
    offset += "task,subfield,phenomenon,model,seed,metric\n".len() as u64;
    let mut out = Vec::new();
    for line in lines {
        let bad = |m: &str| Error::format("probe results", offset, format!("{m}: {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let subfield = Subfield::ALL.into_iter().find(|s| s.name() == f[1]).ok_or_else(|| bad("unknown subfield"))?;
        out.push(ProbeResult {
            task: f[0].to_string(),
            subfield,
            phenomenon: f[2].to_string(),
            model: f[3].to_string(),
            seed: f[4].parse().map_err(|_| bad("bad seed"))?,
            metric: f[5].parse().map_err(|_| bad("bad metric"))?,
        });
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
