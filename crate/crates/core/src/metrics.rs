//! Accuracy matrix, mean accuracy and backward transfer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `R[t][i]`: test accuracy on task `i` after training through step `t`
/// (both zero-based here). Only `i <= t` is filled during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    entries: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            entries: vec![None; tasks * tasks],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, step: usize, task: usize, accuracy: f64) -> Result<()> {
        if step >= self.tasks || task >= self.tasks {
            return Err(Error::InvalidArgument(format!(
                "entry ({step}, {task}) outside a {0}x{0} matrix",
                self.tasks
            )));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {accuracy} outside [0, 1]"
            )));
        }
        self.entries[step * self.tasks + task] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, step: usize, task: usize) -> Option<f64> {
        self.entries[step * self.tasks + task]
    }

    fn final_row(&self) -> Result<Vec<f64>> {
        let last = self
            .tasks
            .checked_sub(1)
            .ok_or(Error::Empty("accuracy matrix"))?;
        (0..self.tasks)
            .map(|i| {
                self.get(last, i)
                    .ok_or_else(|| Error::InvalidArgument(format!("final row is missing task {i}")))
            })
            .collect()
    }

    /// Mean of the final row.
    pub fn acc(&self) -> Result<f64> {
        let row = self.final_row()?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Mean over old tasks of (final accuracy − accuracy just after learning
    /// the task). `None` with a single task.
    pub fn bwt(&self) -> Result<Option<f64>> {
        if self.tasks < 2 {
            return Ok(None);
        }
        let row = self.final_row()?;
        let mut sum = 0.0;
        for (i, last) in row.iter().enumerate().take(self.tasks - 1) {
            let diag = self
                .get(i, i)
                .ok_or_else(|| Error::InvalidArgument(format!("diagonal entry {i} is missing")))?;
            sum += last - diag;
        }
        Ok(Some(sum / (self.tasks - 1) as f64))
    }

    /// Header `step,1,..,T`; one row per step with blank unused cells.
    /// Numbers use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for i in 1..=self.tasks {
            write!(out, ",{i}").unwrap();
        }
        out.push('\n');
        for t in 0..self.tasks {
            write!(out, "{}", t + 1).unwrap();
            for i in 0..self.tasks {
                out.push(',');
                if let Some(a) = self.get(t, i) {
                    write!(out, "{a}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(Error::Empty("accuracy CSV"))?;
        let tasks = header.split(',').count().saturating_sub(1);
        let mut m = AccuracyMatrix::new(tasks);
        for (t, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if t >= tasks || cells.len() != tasks + 1 {
                return Err(Error::Format(format!(
                    "accuracy CSV row {} is malformed",
                    t + 2
                )));
            }
            for (i, cell) in cells[1..].iter().enumerate() {
                if cell.is_empty() {
                    continue;
                }
                let a: f64 = cell.parse().map_err(|_| {
                    Error::Format(format!("accuracy CSV cell `{cell}` is not a number"))
                })?;
                m.set(t, i, a)?;
            }
        }
        Ok(m)
    }
}
