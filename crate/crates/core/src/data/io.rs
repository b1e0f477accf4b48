use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Example, Label, Split, TaskCollection, TaskData, TaskKind, TaskSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    seed: u64,
    tasks: Vec<TaskSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task: usize,
    tokens: Vec<usize>,
    label: Label,
    split: Split,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the collection as JSON lines: one header line, then one line per
/// example in task, split, index order.
pub fn write_collection<W: Write>(c: &TaskCollection, mut w: W) -> std::io::Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        seed: c.seed,
        tasks: c.specs(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for task in &c.tasks {
        for split in [Split::Train, Split::Val, Split::Test] {
            for e in task.split(split) {
                let rec = Record {
                    task: task.spec.id,
                    tokens: e.tokens.clone(),
                    label: e.label,
                    split,
                };
                serde_json::to_writer(&mut w, &rec)?;
                writeln!(w)?;
            }
        }
    }
    w.flush()
}

pub fn save_collection(c: &TaskCollection, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    write_collection(c, BufWriter::new(file)).map_err(|e| io_err(path, e))
}

fn invalid(line: usize, message: impl Into<String>) -> DataError {
    DataError::Invalid {
        line,
        message: message.into(),
    }
}

fn check_record(rec: &Record, tasks: &[TaskData], line: usize) -> Result<(), DataError> {
    let Some(task) = tasks.get(rec.task) else {
        return Err(invalid(line, format!("unknown task id {}", rec.task)));
    };
    let spec = &task.spec;
    if rec.tokens.len() != spec.seq_len {
        return Err(invalid(
            line,
            format!("sequence length {} but task {} expects {}", rec.tokens.len(), spec.id, spec.seq_len),
        ));
    }
    if let Some(&t) = rec.tokens.iter().find(|&&t| t >= spec.vocab_size) {
        return Err(invalid(line, format!("token {t} outside vocabulary of size {}", spec.vocab_size)));
    }
    match (spec.kind, rec.label) {
        (TaskKind::Classification, Label::Class(c)) if c < spec.n_classes => Ok(()),
        (TaskKind::Classification, label) => Err(invalid(
            line,
            format!("label {label:?} invalid for {} classes", spec.n_classes),
        )),
        (TaskKind::Regression, label) if label.value().is_finite() => Ok(()),
        (TaskKind::Regression, _) => Err(invalid(line, "non-finite regression target")),
    }
}

/// Reads a collection written by [`save_collection`]. Every malformed line is
/// reported with its 1-based line number; a file whose split sizes differ
/// from the header (for example a truncated file) is rejected.
pub fn load_collection(path: &Path) -> Result<TaskCollection, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = match lines.next() {
        Some(l) => l.map_err(|e| io_err(path, e))?,
        None => {
            return Err(DataError::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    let header: Header = serde_json::from_str(&first).map_err(|e| DataError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(invalid(
            1,
            format!("unsupported format_version {}", header.format_version),
        ));
    }
    let vocab_size = header.tasks.first().map_or(0, |t| t.vocab_size);
    let mut tasks: Vec<TaskData> = Vec::with_capacity(header.tasks.len());
    for (i, spec) in header.tasks.into_iter().enumerate() {
        if spec.id != i {
            return Err(invalid(1, format!("task ids must be 0..n in order; got {}", spec.id)));
        }
        if spec.vocab_size != vocab_size {
            return Err(invalid(1, "inconsistent vocab_size across tasks"));
        }
        tasks.push(TaskData {
            spec,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        });
    }

    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        check_record(&rec, &tasks, lineno)?;
        let task = &mut tasks[rec.task];
        let dest = match rec.split {
            Split::Train => &mut task.train,
            Split::Val => &mut task.val,
            Split::Test => &mut task.test,
        };
        dest.push(Example {
            tokens: rec.tokens,
            label: rec.label,
        });
    }

    for task in &tasks {
        let s = &task.spec;
        for (split, want) in [(Split::Train, s.train_size), (Split::Val, s.val_size), (Split::Test, s.test_size)] {
            let got = task.split(split).len();
            if got == 0 && want > 0 {
                return Err(DataError::Empty { task: s.id, split });
            }
            if got != want {
                return Err(invalid(
                    0,
                    format!("task {} {split:?} split has {got} examples, header declares {want}", s.id),
                ));
            }
        }
    }
    Ok(TaskCollection {
        seed: header.seed,
        vocab_size,
        tasks,
    })
}
