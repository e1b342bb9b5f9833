//! Continual task streams: permuted features, split classes, and disjoint
//! shards of one label set. Plus CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

/// Train and test split of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    PermutedFeatures,
    SplitClasses,
    DataIncremental,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: Batch,
    pub test: Batch,
    /// Classes this task is evaluated on, ascending.
    pub class_subset: Vec<usize>,
    /// For permuted tasks, feature `j` of a task row is feature
    /// `permutation[j]` of the base row.
    pub permutation: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub scenario: Scenario,
    pub tasks: Vec<Task>,
    pub seed: u64,
    pub num_classes: usize,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }
}

fn permute_batch(b: &Batch, perm: &[usize]) -> Batch {
    let mut out = Batch::empty(b.dim());
    let mut row = vec![0.0; b.dim()];
    for i in 0..b.len() {
        let src = b.row(i);
        for (dst, &p) in row.iter_mut().zip(perm) {
            *dst = src[p];
        }
        out.push(&row, b.labels()[i]);
    }
    out
}

/// Task `t` applies its own seeded feature permutation; the first task keeps
/// the identity.
pub fn gen_permuted_tasks(base: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::InvalidArgument("need at least one task".into()));
    }
    let dim = base.train.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..base.num_classes).collect();
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut perm: Vec<usize> = (0..dim).collect();
        if t > 0 {
            perm.shuffle(&mut rng);
        }
        tasks.push(Task {
            train: permute_batch(&base.train, &perm),
            test: permute_batch(&base.test, &perm),
            class_subset: all.clone(),
            permutation: Some(perm),
        });
    }
    Ok(TaskStream {
        scenario: Scenario::PermutedFeatures,
        tasks,
        seed,
        num_classes: base.num_classes,
    })
}

/// Shuffles the classes and deals them into equal disjoint groups, one per task.
pub fn gen_split_tasks(base: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    if num_tasks == 0 || !base.num_classes.is_multiple_of(num_tasks) {
        return Err(Error::InvalidArgument(format!(
            "{} classes cannot be split evenly into {num_tasks} tasks",
            base.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..base.num_classes).collect();
    classes.shuffle(&mut rng);
    let per = base.num_classes / num_tasks;
    let filter = |b: &Batch, subset: &[usize]| {
        let idx: Vec<usize> = (0..b.len())
            .filter(|&i| subset.contains(&b.labels()[i]))
            .collect();
        b.select(&idx)
    };
    let tasks = classes
        .chunks(per)
        .map(|chunk| {
            let mut subset = chunk.to_vec();
            subset.sort_unstable();
            Task {
                train: filter(&base.train, &subset),
                test: filter(&base.test, &subset),
                class_subset: subset,
                permutation: None,
            }
        })
        .collect();
    Ok(TaskStream {
        scenario: Scenario::SplitClasses,
        tasks,
        seed,
        num_classes: base.num_classes,
    })
}

/// Disjoint shards of the training set with the full label set each; every
/// task is evaluated on the whole test split.
pub fn gen_data_incremental_tasks(
    base: &Dataset,
    num_tasks: usize,
    seed: u64,
) -> Result<TaskStream> {
    let n = base.train.len();
    if num_tasks == 0 || num_tasks > n {
        return Err(Error::InvalidArgument(format!(
            "cannot shard {n} training examples into {num_tasks} tasks"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let all: Vec<usize> = (0..base.num_classes).collect();
    let tasks = partition_sizes(n, num_tasks)
        .scan(0, |start, size| {
            let part = &idx[*start..*start + size];
            *start += size;
            Some(part.to_vec())
        })
        .map(|part| Task {
            train: base.train.select(&part),
            test: base.test.clone(),
            class_subset: all.clone(),
            permutation: None,
        })
        .collect();
    Ok(TaskStream {
        scenario: Scenario::DataIncremental,
        tasks,
        seed,
        num_classes: base.num_classes,
    })
}

/// Sizes of `parts` near-equal parts of `n`, larger parts first.
pub(crate) fn partition_sizes(n: usize, parts: usize) -> impl Iterator<Item = usize> {
    let (q, r) = (n / parts, n % parts);
    (0..parts).map(move |i| q + usize::from(i < r))
}

/// Gaussian class clusters with unit spread around seeded means of norm
/// `3·√dim / √classes`, split 80/20 per class and shuffled.
pub fn gen_synthetic_base(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 {
        return Err(Error::InvalidArgument(
            "synthetic data needs >= 2 classes and >= 2 features".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = 3.0 * (dim as f64).sqrt() / (classes as f64).sqrt();
    let n_train = n_per_class * 4 / 5;
    let mut train = Batch::empty(dim);
    let mut test = Batch::empty(dim);
    let mut row = vec![0.0; dim];
    for c in 0..classes {
        let mut mean: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        mean.iter_mut().for_each(|x| *x *= radius / norm);
        for k in 0..n_per_class {
            for (x, m) in row.iter_mut().zip(&mean) {
                *x = m + rng.sample::<f64, _>(StandardNormal);
            }
            if k < n_train {
                train.push(&row, c);
            } else {
                test.push(&row, c);
            }
        }
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let train = train.select(&order);
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut rng);
    let test = test.select(&order);
    Ok(Dataset {
        train,
        test,
        num_classes: classes,
    })
}

/// Which CSV column holds the label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Reads a numeric CSV into a stratified 80/20 split.
///
/// The header row is optional and detected by any non-numeric cell in the
/// first record. Within each class the first 80% of rows (file order) go to
/// training. Features are standardized with training-split statistics.
pub fn load_csv_dataset(path: &Path, label_column: &LabelColumn) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, 0, e))?;

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, i + 1, 0, e))?;
        records.push(rec);
    }
    let Some(first) = records.first() else {
        return Err(Error::Dataset {
            path: path.into(),
            message: "file is empty".into(),
        });
    };
    let has_header = first.iter().any(|cell| cell.parse::<f64>().is_err());
    let width = first.len();
    let label_idx = match label_column {
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => {
            return Err(Error::Dataset {
                path: path.into(),
                message: format!("label column {i} out of range for {width} columns"),
            })
        }
        LabelColumn::Name(name) => {
            let found = if has_header {
                first.iter().position(|c| c == name)
            } else {
                None
            };
            found.ok_or_else(|| Error::Dataset {
                path: path.into(),
                message: format!("unknown label column `{name}`"),
            })?
        }
    };
    if width < 2 {
        return Err(Error::Dataset {
            path: path.into(),
            message: "need at least one feature column besides the label".into(),
        });
    }

    let body = &records[usize::from(has_header)..];
    if body.is_empty() {
        return Err(Error::Dataset {
            path: path.into(),
            message: "no data rows".into(),
        });
    }
    let dim = width - 1;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(body.len());
    for (r, rec) in body.iter().enumerate() {
        let line = r + 1 + usize::from(has_header);
        if rec.len() != width {
            return Err(Error::Csv {
                path: path.into(),
                row: line,
                column: rec.len() + 1,
                message: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        let mut features = Vec::with_capacity(dim);
        let mut label = 0;
        for (c, cell) in rec.iter().enumerate() {
            if c == label_idx {
                label = cell.parse::<usize>().map_err(|_| Error::Csv {
                    path: path.into(),
                    row: line,
                    column: c + 1,
                    message: format!("label `{cell}` is not a non-negative integer"),
                })?;
            } else {
                let x = cell.parse::<f64>().map_err(|_| Error::Csv {
                    path: path.into(),
                    row: line,
                    column: c + 1,
                    message: format!("`{cell}` is not a number"),
                })?;
                if !x.is_finite() {
                    return Err(Error::Csv {
                        path: path.into(),
                        row: line,
                        column: c + 1,
                        message: "non-finite value".into(),
                    });
                }
                features.push(x);
            }
        }
        rows.push((features, label));
    }

    let num_classes = rows.iter().map(|(_, y)| y + 1).max().unwrap_or(0);
    let mut per_class = vec![0usize; num_classes];
    for (_, y) in &rows {
        per_class[*y] += 1;
    }
    let mut seen = vec![0usize; num_classes];
    let mut train = Batch::empty(dim);
    let mut test = Batch::empty(dim);
    for (x, y) in &rows {
        let cut = (per_class[*y] * 4 / 5).max(1);
        if seen[*y] < cut {
            train.push(x, *y);
        } else {
            test.push(x, *y);
        }
        seen[*y] += 1;
    }

    standardize(&mut train, &mut test);
    Ok(Dataset {
        train,
        test,
        num_classes,
    })
}

fn standardize(train: &mut Batch, test: &mut Batch) {
    let dim = train.dim();
    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for i in 0..train.len() {
        for (m, x) in mean.iter_mut().zip(train.row(i)) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; dim];
    for i in 0..train.len() {
        for ((v, x), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
        .collect();
    for b in [train, test] {
        for row in b.inputs_mut().chunks_exact_mut(dim) {
            for ((x, m), s) in row.iter_mut().zip(&mean).zip(&scale) {
                *x = (*x - m) * s;
            }
        }
    }
}

fn csv_error(path: &Path, row: usize, column: usize, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        let csv::ErrorKind::Io(io) = e.into_kind() else {
            unreachable!()
        };
        return Error::Dataset {
            path: path.into(),
            message: io.to_string(),
        };
    }
    Error::Csv {
        path: path.into(),
        row,
        column,
        message: e.to_string(),
    }
}
