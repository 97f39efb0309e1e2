//! Per-group, worst-group and average metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::dataset::{Dataset, GroupId};
use crate::error::{Error, Result};
use crate::linmodel::ModelWeights;
use crate::theory::pairwise_sum;

/// Declared groups plus the subset the worst-group reduction runs over
/// (all groups when unset).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupUniverse {
    groups: Vec<GroupId>,
    restriction: Option<BTreeSet<GroupId>>,
}

impl GroupUniverse {
    pub fn new(groups: Vec<GroupId>) -> Self {
        Self {
            groups,
            restriction: None,
        }
    }

    /// The groups present in `data`.
    pub fn from_dataset(data: &Dataset) -> Self {
        Self::new(data.groups().collect())
    }

    pub fn with_restriction(mut self, restriction: impl IntoIterator<Item = GroupId>) -> Result<Self> {
        let set: BTreeSet<GroupId> = restriction.into_iter().collect();
        if let Some(g) = set.iter().find(|g| !self.groups.contains(g)) {
            return Err(Error::UnknownGroup(*g));
        }
        self.restriction = Some(set);
        Ok(self)
    }

    pub fn groups(&self) -> &[GroupId] {
        &self.groups
    }

    /// Groups the worst-group reduction considers.
    pub fn reduced(&self) -> Vec<GroupId> {
        match &self.restriction {
            Some(r) => self.groups.iter().copied().filter(|g| r.contains(g)).collect(),
            None => self.groups.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    /// Predict +1 when the score is `>= 0`.
    Sign,
    /// Predict +1 when the score is `>= t`.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStat {
    pub count: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub metric: Metric,
    /// Non-empty groups of the universe, in universe order.
    pub per_group: Vec<(GroupId, GroupStat)>,
    pub worst: (GroupId, f64),
    /// Mean over all rows.
    pub average: f64,
    pub rows: usize,
}

impl GroupReport {
    pub fn group(&self, g: GroupId) -> Option<GroupStat> {
        self.per_group.iter().find(|(h, _)| *h == g).map(|(_, s)| *s)
    }

    pub fn worst_value(&self) -> f64 {
        self.worst.1
    }

    /// CSV `group,count,value` followed by `worst` and `avg` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "group,count,value")?;
        for (g, s) in &self.per_group {
            writeln!(w, "{g},{},{}", s.count, s.value)?;
        }
        let worst_count = self.group(self.worst.0).map_or(0, |s| s.count);
        writeln!(w, "worst,{worst_count},{}", self.worst.1)?;
        writeln!(w, "avg,{},{}", self.rows, self.average)?;
        w.flush()?;
        Ok(())
    }
}

/// Order-independent mean: sorts before a pairwise sum.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    pairwise_sum(values) / values.len() as f64
}

fn build_report(per_row: &[f64], data: &Dataset, universe: &GroupUniverse, metric: Metric) -> Result<GroupReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("cannot evaluate on an empty dataset"));
    }
    if let Some(g) = data.groups().find(|g| !universe.groups().contains(g)) {
        return Err(Error::UnknownGroup(g));
    }
    let mut per_group = Vec::new();
    let mut by_group = BTreeMap::new();
    for &g in universe.groups() {
        let rows = data.group_rows(g);
        if rows.is_empty() {
            continue;
        }
        let mut vals: Vec<f64> = rows.iter().map(|&i| per_row[i]).collect();
        let stat = GroupStat {
            count: rows.len(),
            value: stable_mean(&mut vals),
        };
        per_group.push((g, stat));
        by_group.insert(g, stat.value);
    }
    let mut worst: Option<(GroupId, f64)> = None;
    for g in universe.reduced() {
        let v = *by_group.get(&g).ok_or(Error::EmptyGroup(g))?;
        let better = match (metric, worst) {
            (_, None) => true,
            (Metric::Accuracy, Some((_, w))) => v < w,
            (Metric::Mse, Some((_, w))) => v > w,
        };
        if better {
            worst = Some((g, v));
        }
    }
    let worst = worst.ok_or(Error::EmptyDataset("worst-group restriction is empty"))?;
    let mut all = per_row.to_vec();
    Ok(GroupReport {
        metric,
        per_group,
        worst,
        average: stable_mean(&mut all),
        rows: data.len(),
    })
}

/// Accuracy report from predicted labels.
pub fn evaluate_predictions(predictions: &[i8], data: &Dataset, universe: &GroupUniverse) -> Result<GroupReport> {
    if predictions.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            found: predictions.len(),
        });
    }
    let hits: Vec<f64> = predictions
        .iter()
        .zip(data.labels())
        .map(|(p, y)| if p == y { 1.0 } else { 0.0 })
        .collect();
    build_report(&hits, data, universe, Metric::Accuracy)
}

/// Binary accuracy with labels in {-1, +1}; ties go to +1.
pub fn evaluate_accuracy(
    weights: &ModelWeights,
    data: &Dataset,
    universe: &GroupUniverse,
    decision: Decision,
) -> Result<GroupReport> {
    check_dim(weights, data)?;
    let t = match decision {
        Decision::Sign => 0.0,
        Decision::Threshold(t) => t,
    };
    let preds: Vec<i8> = data
        .rows()
        .map(|x| if weights.score(x) >= t { 1 } else { -1 })
        .collect();
    evaluate_predictions(&preds, data, universe)
}

pub fn evaluate_mse(weights: &ModelWeights, data: &Dataset, universe: &GroupUniverse) -> Result<GroupReport> {
    check_dim(weights, data)?;
    let losses: Vec<f64> = data
        .rows()
        .zip(data.labels())
        .map(|(x, &y)| (weights.score(x) - y as f64).powi(2))
        .collect();
    build_report(&losses, data, universe, Metric::Mse)
}

fn check_dim(weights: &ModelWeights, data: &Dataset) -> Result<()> {
    if weights.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: weights.dim(),
        });
    }
    Ok(())
}
