//! In-memory dataset container shared by every module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Group identity: the (attribute, label) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId {
    pub a: i8,
    pub y: i8,
}

impl GroupId {
    pub const fn new(a: i8, y: i8) -> Self {
        Self { a, y }
    }

    /// The four groups of the binary synthetic family, in stratification order.
    pub const BINARY: [GroupId; 4] = [
        GroupId::new(1, 1),
        GroupId::new(-1, -1),
        GroupId::new(1, -1),
        GroupId::new(-1, 1),
    ];

    /// Groups where the attribute disagrees with the label.
    pub const MINORITY: [GroupId; 2] = [GroupId::new(1, -1), GroupId::new(-1, 1)];
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.a, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseGroupError(pub String);

impl fmt::Display for ParseGroupError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "expected `a|y` with integer a and y, got `{}`", self.0)
    }
}

impl std::error::Error for ParseGroupError {}

impl FromStr for GroupId {
    type Err = ParseGroupError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let err = || ParseGroupError(s.to_string());
        let (a, y) = s.trim().split_once('|').ok_or_else(err)?;
        Ok(GroupId {
            a: a.trim().parse().map_err(|_| err())?,
            y: y.trim().parse().map_err(|_| err())?,
        })
    }
}

/// Rows of `(x, y, a)` with row-major `f32` features. The group of a row is
/// always computed from its `(a, y)` and never stored separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    x: Vec<f32>,
    y: Vec<i8>,
    a: Vec<i8>,
    group_index: BTreeMap<GroupId, Vec<usize>>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f32>, y: Vec<i8>, a: Vec<i8>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be at least 1"));
        }
        if y.len() != a.len() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                found: a.len(),
            });
        }
        if x.len() != y.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: y.len() * dim,
                found: x.len(),
            });
        }
        let mut group_index: BTreeMap<GroupId, Vec<usize>> = BTreeMap::new();
        for (i, (&yi, &ai)) in y.iter().zip(&a).enumerate() {
            group_index.entry(GroupId::new(ai, yi)).or_default().push(i);
        }
        Ok(Self {
            dim,
            x,
            y,
            a,
            group_index,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.x.chunks_exact(self.dim)
    }

    pub fn features(&self) -> &[f32] {
        &self.x
    }

    pub fn labels(&self) -> &[i8] {
        &self.y
    }

    pub fn attributes(&self) -> &[i8] {
        &self.a
    }

    pub fn label(&self, i: usize) -> i8 {
        self.y[i]
    }

    pub fn attribute(&self, i: usize) -> i8 {
        self.a[i]
    }

    pub fn group(&self, i: usize) -> GroupId {
        GroupId::new(self.a[i], self.y[i])
    }

    pub fn group_index(&self) -> &BTreeMap<GroupId, Vec<usize>> {
        &self.group_index
    }

    pub fn group_rows(&self, g: GroupId) -> &[usize] {
        self.group_index.get(&g).map_or(&[], Vec::as_slice)
    }

    pub fn groups(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.group_index.keys().copied()
    }

    pub fn classes(&self) -> BTreeSet<i8> {
        self.y.iter().copied().collect()
    }

    /// Rows at `indices`, in that order (duplicates allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        let mut y = Vec::with_capacity(indices.len());
        let mut a = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
            a.push(self.a[i]);
        }
        Self::new(self.dim, x, y, a)
    }

    /// The leading `k` feature columns.
    pub fn leading_columns(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.dim {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.dim + 1,
            });
        }
        let x = self.rows().flat_map(|r| r[..k].iter().copied()).collect();
        Self::new(k, x, self.y.clone(), self.a.clone())
    }

    /// Same rows with replaced features.
    pub fn with_features(&self, x: Vec<f32>) -> Result<Self> {
        Self::new(self.dim, x, self.y.clone(), self.a.clone())
    }

    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut x = self.x.clone();
        x.extend_from_slice(&other.x);
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        let mut a = self.a.clone();
        a.extend_from_slice(&other.a);
        Self::new(self.dim, x, y, a)
    }

    /// Fails on the first NaN or infinite feature.
    pub fn check_finite(&self) -> Result<()> {
        if self.x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("dataset features"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_id_round_trips() {
        for g in GroupId::BINARY {
            assert_eq!(g.to_string().parse::<GroupId>().unwrap(), g);
        }
        assert_eq!("0|1".parse::<GroupId>().unwrap(), GroupId::new(0, 1));
        assert!("1,1".parse::<GroupId>().is_err());
        assert!("a|1".parse::<GroupId>().is_err());
    }

    #[test]
    fn group_index_partitions_rows() {
        let d = Dataset::new(
            1,
            vec![0.0; 5],
            vec![1, -1, 1, 1, -1],
            vec![1, 1, -1, 1, -1],
        )
        .unwrap();
        assert_eq!(d.group_rows(GroupId::new(1, 1)), &[0, 3]);
        assert_eq!(d.group_rows(GroupId::new(1, -1)), &[1]);
        assert_eq!(d.group_rows(GroupId::new(-1, 1)), &[2]);
        assert_eq!(d.group_rows(GroupId::new(-1, -1)), &[4]);
        let total: usize = d.group_index().values().map(Vec::len).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn shape_is_validated() {
        assert!(Dataset::new(2, vec![0.0; 3], vec![1, 1], vec![1, 1]).is_err());
        assert!(Dataset::new(2, vec![0.0; 4], vec![1, 1], vec![1]).is_err());
    }
}
