//! Gaussian family with a core and a spurious coordinate.
//!
//! A row with label `y` and attribute `a` has `x[0] ~ N(y, sigma1^2)`,
//! `x[1] ~ N(a, sigma2^2)` and `d - 2` tail coordinates
//! `~ N(0, sigma_xi^2 / (d - 2))`. Row `i` draws from the stream
//! `(seed, domain, i)`: one uniform for `y`, one for `a`, then `d` normals.

use rayon::prelude::*;

use crate::dataset::{Dataset, GroupId};
use crate::error::{Error, Result};
use crate::rng::{domain, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpuriousMode {
    Present,
    /// The attribute is always 0 and the spurious coordinate is centered.
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistSpec {
    /// P(a = y).
    pub mu: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Total standard deviation spread over the tail coordinates.
    pub sigma_xi: f64,
    pub d: usize,
    pub spurious_mode: SpuriousMode,
}

impl DistSpec {
    pub fn new(mu: f64, sigma1: f64, sigma2: f64, sigma_xi: f64, d: usize) -> Self {
        Self {
            mu,
            sigma1,
            sigma2,
            sigma_xi,
            d,
            spurious_mode: SpuriousMode::Present,
        }
    }

    pub fn without_spurious(self) -> Self {
        Self {
            spurious_mode: SpuriousMode::Absent,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::param("mu", format!("{} is not in [0, 1]", self.mu)));
        }
        for (name, v) in [
            ("sigma1", self.sigma1),
            ("sigma2", self.sigma2),
            ("sigma_xi", self.sigma_xi),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("{v} is not a finite nonnegative number")));
            }
        }
        if self.d < 3 {
            return Err(Error::param("d", format!("{} is below 3", self.d)));
        }
        Ok(())
    }

    /// Variance of a single tail coordinate.
    pub fn tail_variance(&self) -> f64 {
        self.sigma_xi * self.sigma_xi / (self.d - 2) as f64
    }

    /// Groups this family can produce, in stratification order.
    pub fn groups(&self) -> Vec<GroupId> {
        match self.spurious_mode {
            SpuriousMode::Present => GroupId::BINARY.to_vec(),
            SpuriousMode::Absent => vec![GroupId::new(0, 1), GroupId::new(0, -1)],
        }
    }

    fn attribute(&self, a: i8) -> i8 {
        match self.spurious_mode {
            SpuriousMode::Present => a,
            SpuriousMode::Absent => 0,
        }
    }
}

/// Fills `out` with the features of a row of group `(a, y)`.
fn fill_features(spec: &DistSpec, y: i8, a: i8, rng: &mut Stream, out: &mut [f32]) {
    let tail_sd = spec.tail_variance().sqrt();
    out[0] = (y as f64 + spec.sigma1 * rng.next_normal()) as f32;
    out[1] = (a as f64 + spec.sigma2 * rng.next_normal()) as f32;
    for v in &mut out[2..] {
        *v = (tail_sd * rng.next_normal()) as f32;
    }
}

/// Draws row `i` of `sample_dataset(spec, _, seed)` into `out` and returns
/// `(y, a)`. `spec` must already be validated.
pub fn draw_row(spec: &DistSpec, seed: u64, i: usize, out: &mut [f32]) -> (i8, i8) {
    let mut rng = Stream::new(seed, domain::DATA_ROW, i as u64);
    let y: i8 = if rng.next_f64() < 0.5 { 1 } else { -1 };
    let agree = rng.bernoulli(spec.mu);
    let a = spec.attribute(if agree { y } else { -y });
    fill_features(spec, y, a, &mut rng, out);
    (y, a)
}

fn generate<F>(spec: &DistSpec, n: usize, row: F) -> Result<Dataset>
where
    F: Fn(usize, &mut [f32]) -> (i8, i8) + Sync,
{
    let d = spec.d;
    let mut x = vec![0f32; n * d];
    let meta: Vec<(i8, i8)> = x
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, out)| row(i, out))
        .collect();
    let (y, a) = meta.into_iter().unzip();
    Dataset::new(d, x, y, a)
}

pub fn sample_dataset(spec: &DistSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset("sample_dataset with n = 0"));
    }
    generate(spec, n, |i, out| draw_row(spec, seed, i, out))
}

/// `m` rows with exactly `m / groups` rows per group, assigned round-robin.
/// `spec.mu` is ignored.
pub fn sample_balanced(spec: &DistSpec, m: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let groups = spec.groups();
    if m == 0 {
        return Err(Error::EmptyDataset("sample_balanced with m = 0"));
    }
    if !m.is_multiple_of(groups.len()) {
        return Err(Error::Divisibility {
            what: "m",
            value: m,
            divisor: groups.len(),
        });
    }
    generate(spec, m, |i, out| {
        let g = groups[i % groups.len()];
        let mut rng = Stream::new(seed, domain::BALANCED_ROW, i as u64);
        fill_features(spec, g.y, g.a, &mut rng, out);
        (g.y, g.a)
    })
}

pub fn sample_single_group(spec: &DistSpec, y: i8, a: i8, m: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if y != 1 && y != -1 {
        return Err(Error::param("y", format!("{y} is not +1 or -1")));
    }
    if !matches!(a, -1..=1) {
        return Err(Error::param("a", format!("{a} is not in {{-1, 0, 1}}")));
    }
    if m == 0 {
        return Err(Error::EmptyDataset("sample_single_group with m = 0"));
    }
    let a = spec.attribute(a);
    generate(spec, m, |i, out| {
        let mut rng = Stream::new(seed, domain::SINGLE_GROUP_ROW, i as u64);
        fill_features(spec, y, a, &mut rng, out);
        (y, a)
    })
}

/// `(1/n) * sum_i x_i y_i` in `f64`.
pub fn label_moment(data: &Dataset) -> Vec<f64> {
    let mut acc = vec![0f64; data.dim()];
    for (row, &y) in data.rows().zip(data.labels()) {
        for (s, &v) in acc.iter_mut().zip(row) {
            *s += v as f64 * y as f64;
        }
    }
    let n = data.len() as f64;
    acc.iter_mut().for_each(|s| *s /= n);
    acc
}
