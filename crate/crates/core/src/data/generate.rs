use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, Example, Label, TaskCollection, TaskData, TaskFamily, TaskKind, TaskSpec};
use crate::rng::{substream, SeededRng};

const MAX_ATTEMPTS: usize = 200_000;

/// Pattern/filler partition of the vocabulary shared by every task of a
/// collection.
struct SharedVocab {
    pattern: Vec<usize>,
    filler: Vec<usize>,
}

impl SharedVocab {
    fn new(seed: u64, vocab: usize) -> Self {
        let mut ids: Vec<usize> = (0..vocab).collect();
        ids.shuffle(&mut substream(seed, "pattern-vocab", &[vocab as u64]));
        let n_pattern = (vocab / 8).max(4);
        let filler = ids.split_off(n_pattern);
        SharedVocab {
            pattern: ids,
            filler,
        }
    }
}

/// Task-specific hidden rule.
enum Rule {
    Triggers(Vec<Vec<usize>>),
    Order { first: usize, second: usize },
    Values { values: Vec<i64>, thresholds: Vec<i64> },
    Parity { subset: Vec<bool> },
}

fn validate(specs: &[TaskSpec]) -> Result<usize, DataError> {
    let Some(first) = specs.first() else {
        return Err(DataError::Config("no task specs given".into()));
    };
    let vocab = first.vocab_size;
    for (i, s) in specs.iter().enumerate() {
        if s.vocab_size != vocab {
            return Err(DataError::Config(format!(
                "inconsistent vocab: task {} has vocab_size {} but task {} has {}",
                s.id, s.vocab_size, first.id, vocab
            )));
        }
        if s.id != i {
            return Err(DataError::Config(format!(
                "task ids must be 0..n in order; position {i} has id {}",
                s.id
            )));
        }
        if vocab < 16 {
            return Err(DataError::Config(format!("vocab_size {vocab} below minimum 16")));
        }
        if s.seq_len < 2 {
            return Err(DataError::Config(format!("task {}: seq_len must be at least 2", s.id)));
        }
        if s.train_size == 0 || s.val_size == 0 {
            return Err(DataError::Config(format!("task {}: train and val splits must be nonempty", s.id)));
        }
        match s.kind {
            TaskKind::Classification if s.n_classes < 2 => {
                return Err(DataError::Config(format!("task {}: n_classes must be at least 2", s.id)));
            }
            TaskKind::Regression if s.family != TaskFamily::NumericAggregation => {
                return Err(DataError::Config(format!(
                    "task {}: regression is only defined for numeric_aggregation",
                    s.id
                )));
            }
            _ => {}
        }
        let binary_only = matches!(s.family, TaskFamily::OrderSensitive | TaskFamily::ParityOfSubset);
        if binary_only && s.kind == TaskKind::Classification && s.n_classes != 2 {
            return Err(DataError::Config(format!(
                "task {}: {} is binary",
                s.id,
                s.family.name()
            )));
        }
    }
    Ok(vocab)
}

fn random_filler(rng: &mut SeededRng, filler: &[usize], len: usize) -> Vec<usize> {
    (0..len).map(|_| filler[rng.random_range(0..filler.len())]).collect()
}

fn value_sum(tokens: &[usize], values: &[i64]) -> i64 {
    tokens.iter().map(|&t| values[t]).sum()
}

fn build_rule(spec: &TaskSpec, vocab: &SharedVocab, seed: u64) -> Result<Rule, DataError> {
    let mut rng = substream(seed, "task-rule", &[spec.id as u64, spec.seed]);
    let mut pattern = vocab.pattern.clone();
    pattern.shuffle(&mut rng);
    Ok(match spec.family {
        TaskFamily::TokenPattern => {
            let sets = spec.n_classes - 1;
            let per = (pattern.len() / sets).min(2);
            if per == 0 {
                return Err(DataError::Config(format!(
                    "task {}: {} classes need more pattern tokens than the vocabulary provides",
                    spec.id, spec.n_classes
                )));
            }
            Rule::Triggers(pattern.chunks(per).take(sets).map(<[usize]>::to_vec).collect())
        }
        TaskFamily::OrderSensitive => Rule::Order {
            first: pattern[0],
            second: pattern[1],
        },
        TaskFamily::NumericAggregation => {
            let mut values = vec![0i64; spec.vocab_size];
            for &t in &vocab.filler {
                values[t] = if rng.random_bool(0.5) { 1 } else { -1 };
            }
            let thresholds = if spec.kind == TaskKind::Classification {
                let mut sums: Vec<i64> = (0..4000)
                    .map(|_| value_sum(&random_filler(&mut rng, &vocab.filler, spec.seq_len), &values))
                    .collect();
                sums.sort_unstable();
                (1..spec.n_classes)
                    .map(|i| sums[i * sums.len() / spec.n_classes])
                    .collect()
            } else {
                Vec::new()
            };
            Rule::Values { values, thresholds }
        }
        TaskFamily::ParityOfSubset => {
            let mut subset = vec![false; spec.vocab_size];
            let mut filler = vocab.filler.clone();
            filler.shuffle(&mut rng);
            for &t in &filler[..filler.len() / 2] {
                subset[t] = true;
            }
            Rule::Parity { subset }
        }
    })
}

/// Class label of a numeric-aggregation sum given ascending thresholds:
/// class `i` holds sums in `(thresholds[i-1], thresholds[i]]`.
fn bin(sum: i64, thresholds: &[i64]) -> usize {
    thresholds.iter().filter(|&&t| sum > t).count()
}

fn sample_example(
    spec: &TaskSpec,
    rule: &Rule,
    vocab: &SharedVocab,
    class: usize,
    rng: &mut SeededRng,
) -> Result<Example, DataError> {
    let len = spec.seq_len;
    match rule {
        Rule::Triggers(sets) => {
            let mut tokens = random_filler(rng, &vocab.filler, len);
            if class > 0 {
                let set = &sets[class - 1];
                let count = rng.random_range(1..=2usize.min(len));
                let mut positions: Vec<usize> = (0..len).collect();
                positions.shuffle(rng);
                for &p in &positions[..count] {
                    tokens[p] = set[rng.random_range(0..set.len())];
                }
            }
            Ok(Example {
                tokens,
                label: Label::Class(class),
            })
        }
        Rule::Order { first, second } => {
            let mut tokens = random_filler(rng, &vocab.filler, len);
            let i = rng.random_range(0..len);
            let mut j = rng.random_range(0..len - 1);
            if j >= i {
                j += 1;
            }
            let (lo, hi) = (i.min(j), i.max(j));
            let (a, b) = if class == 1 { (*first, *second) } else { (*second, *first) };
            tokens[lo] = a;
            tokens[hi] = b;
            Ok(Example {
                tokens,
                label: Label::Class(class),
            })
        }
        Rule::Values { values, thresholds } => {
            if spec.kind == TaskKind::Regression {
                let tokens = random_filler(rng, &vocab.filler, len);
                let target = value_sum(&tokens, values) as f64 / (len as f64).sqrt();
                return Ok(Example {
                    tokens,
                    label: Label::Value(target),
                });
            }
            for _ in 0..MAX_ATTEMPTS {
                let tokens = random_filler(rng, &vocab.filler, len);
                if bin(value_sum(&tokens, values), thresholds) == class {
                    return Ok(Example {
                        tokens,
                        label: Label::Class(class),
                    });
                }
            }
            Err(DataError::Config(format!(
                "task {}: class {class} is unreachable with these thresholds",
                spec.id
            )))
        }
        Rule::Parity { subset } => {
            let mut tokens = random_filler(rng, &vocab.filler, len);
            let parity = tokens.iter().filter(|&&t| subset[t]).count() % 2;
            if parity != class {
                // Swap one position across the subset boundary to flip parity.
                let p = rng.random_range(0..len);
                let want_in = !subset[tokens[p]];
                let pool: Vec<usize> = vocab
                    .filler
                    .iter()
                    .copied()
                    .filter(|&t| subset[t] == want_in)
                    .collect();
                tokens[p] = pool[rng.random_range(0..pool.len())];
            }
            Ok(Example {
                tokens,
                label: Label::Class(class),
            })
        }
    }
}

fn generate_split(
    spec: &TaskSpec,
    rule: &Rule,
    vocab: &SharedVocab,
    size: usize,
    seen: &mut HashSet<Vec<usize>>,
    rng: &mut SeededRng,
) -> Result<Vec<Example>, DataError> {
    let classes = match spec.kind {
        TaskKind::Classification => spec.n_classes,
        TaskKind::Regression => 1,
    };
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let class = i % classes;
        let mut attempts = 0;
        let ex = loop {
            let ex = sample_example(spec, rule, vocab, class, rng)?;
            if seen.insert(ex.tokens.clone()) {
                break ex;
            }
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(DataError::Config(format!(
                    "task {}: cannot draw {size} distinct sequences",
                    spec.id
                )));
            }
        };
        out.push(ex);
    }
    out.shuffle(rng);
    Ok(out)
}

/// Materializes train/val/test splits for every spec. Output is a pure
/// function of `(specs, seed)`; splits within a task never share a sequence
/// and classification splits are balanced to within one example per class.
pub fn generate_tasks(specs: &[TaskSpec], seed: u64) -> Result<TaskCollection, DataError> {
    let vocab_size = validate(specs)?;
    let vocab = SharedVocab::new(seed, vocab_size);
    let mut tasks = Vec::with_capacity(specs.len());
    for spec in specs {
        let rule = build_rule(spec, &vocab, seed)?;
        let mut rng = substream(seed, "task-examples", &[spec.id as u64, spec.seed]);
        let mut seen = HashSet::new();
        let train = generate_split(spec, &rule, &vocab, spec.train_size, &mut seen, &mut rng)?;
        let val = generate_split(spec, &rule, &vocab, spec.val_size, &mut seen, &mut rng)?;
        let test = generate_split(spec, &rule, &vocab, spec.test_size, &mut seen, &mut rng)?;
        tasks.push(TaskData {
            spec: spec.clone(),
            train,
            val,
            test,
        });
    }
    Ok(TaskCollection {
        seed,
        vocab_size,
        tasks,
    })
}
