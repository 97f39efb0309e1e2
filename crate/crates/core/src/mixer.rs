//! Probabilistic convex mixing of fine-tuning rows with balanced rows.
//!
//! Row `i` of the fine-tuning set reads the stream `(seed, MIX_ROW, i)`: one
//! uniform decides whether it is mixed (`u < alpha`), one integer picks the
//! partner. The draws do not depend on `s`, so sweeping `s` at a fixed seed
//! reuses the same partners.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{domain, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixConfig {
    pub alpha: f64,
    pub s: f64,
    pub seed: u64,
}

impl MixConfig {
    pub fn new(alpha: f64, s: f64, seed: u64) -> Self {
        Self { alpha, s, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param("alpha", format!("{} is not in [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::param("s", format!("{} is not in [0, 1]", self.s)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRow {
    pub mixed: bool,
    pub partner: Option<usize>,
    pub cross_class: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MixTrace {
    pub rows: Vec<TraceRow>,
}

impl MixTrace {
    pub fn mixed_count(&self) -> usize {
        self.rows.iter().filter(|r| r.mixed).count()
    }

    /// CSV with header `row,mixed,partner,cross_class`; unmixed rows leave
    /// `partner` empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "row,mixed,partner,cross_class")?;
        for (i, r) in self.rows.iter().enumerate() {
            let partner = r.partner.map(|p| p.to_string()).unwrap_or_default();
            writeln!(w, "{i},{},{partner},{}", r.mixed as u8, r.cross_class as u8)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Row indices of the balanced set, grouped by label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPools {
    pools: BTreeMap<i8, Vec<usize>>,
    total: usize,
}

impl ClassPools {
    /// Rows with label `y`; empty when the label is absent.
    pub fn pool(&self, y: i8) -> &[usize] {
        self.pools.get(&y).map_or(&[], Vec::as_slice)
    }

    pub fn labels(&self) -> impl Iterator<Item = i8> + '_ {
        self.pools.keys().copied()
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

pub fn build_class_pools(d_bal: &Dataset) -> Result<ClassPools> {
    if d_bal.is_empty() {
        return Err(Error::EmptyDataset("balanced set is empty"));
    }
    let mut pools: BTreeMap<i8, Vec<usize>> = BTreeMap::new();
    for (i, &y) in d_bal.labels().iter().enumerate() {
        pools.entry(y).or_default().push(i);
    }
    Ok(ClassPools {
        pools,
        total: d_bal.len(),
    })
}

/// The mixing decision for fine-tuning row `i` with label `y`.
pub fn draw_partner(seed: u64, alpha: f64, i: usize, y: i8, pools: &ClassPools) -> TraceRow {
    let mut rng = Stream::new(seed, domain::MIX_ROW, i as u64);
    if !rng.bernoulli(alpha) {
        return TraceRow {
            mixed: false,
            partner: None,
            cross_class: false,
        };
    }
    let pool = pools.pool(y);
    let (partner, cross_class) = if pool.is_empty() {
        (rng.below(pools.total), true)
    } else {
        (pool[rng.below(pool.len())], false)
    };
    TraceRow {
        mixed: true,
        partner: Some(partner),
        cross_class,
    }
}

/// Returns a copy of `d_ft` where each row is, with probability `alpha`,
/// replaced by `(1 - s) x + s x'` for a partner `x'` of the same label from
/// `d_bal` (any `d_bal` row when the label is absent there). Labels and
/// attributes are kept.
pub fn mix(d_ft: &Dataset, d_bal: &Dataset, cfg: &MixConfig) -> Result<(Dataset, MixTrace)> {
    cfg.validate()?;
    if d_ft.dim() != d_bal.dim() {
        return Err(Error::DimensionMismatch {
            expected: d_ft.dim(),
            found: d_bal.dim(),
        });
    }
    let pools = build_class_pools(d_bal)?;
    let d = d_ft.dim();
    let s = cfg.s;
    let mut x = d_ft.features().to_vec();
    let rows: Vec<TraceRow> = x
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, out)| {
            let t = draw_partner(cfg.seed, cfg.alpha, i, d_ft.label(i), &pools);
            if let Some(p) = t.partner {
                for (v, &xp) in out.iter_mut().zip(d_bal.row(p)) {
                    *v = ((1.0 - s) * *v as f64 + s * xp as f64) as f32;
                }
            }
            t
        })
        .collect();
    Ok((d_ft.with_features(x)?, MixTrace { rows }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{sample_balanced, sample_dataset, DistSpec};

    fn data() -> (Dataset, Dataset) {
        let spec = DistSpec::new(0.9, 0.5, 0.1, 2.0, 5);
        (
            sample_dataset(&spec, 200, 1).unwrap(),
            sample_balanced(&spec, 16, 2).unwrap(),
        )
    }

    #[test]
    fn pools_group_by_label() {
        let d = Dataset::new(1, vec![0.0; 3], vec![1, 1, -1], vec![1, 1, 1]).unwrap();
        let p = build_class_pools(&d).unwrap();
        assert_eq!(p.pool(1), &[0, 1]);
        assert_eq!(p.pool(-1), &[2]);
        let only = Dataset::new(1, vec![0.0; 2], vec![1, 1], vec![1, 1]).unwrap();
        assert!(build_class_pools(&only).unwrap().pool(-1).is_empty());
    }

    #[test]
    fn identity_configurations() {
        let (ft, bal) = data();
        let (out, trace) = mix(&ft, &bal, &MixConfig::new(0.0, 0.7, 3)).unwrap();
        assert_eq!(out, ft);
        assert!(trace.rows.iter().all(|r| !r.mixed && r.partner.is_none()));
        let (out, trace) = mix(&ft, &bal, &MixConfig::new(1.0, 0.0, 3)).unwrap();
        assert_eq!(out, ft);
        assert!(trace.rows.iter().all(|r| r.mixed && r.partner.is_some()));
    }

    #[test]
    fn cross_class_when_pool_empty() {
        let (ft, _) = data();
        let spec = DistSpec::new(0.5, 0.5, 0.0, 2.0, 5);
        let bal = crate::synthdata::sample_single_group(&spec, 1, 1, 7, 5).unwrap();
        let s = 0.4;
        let (out, trace) = mix(&ft, &bal, &MixConfig::new(1.0, s, 8)).unwrap();
        for (i, t) in trace.rows.iter().enumerate() {
            assert_eq!(t.cross_class, ft.label(i) == -1);
            let p = t.partner.unwrap();
            for j in 0..5 {
                let want = ((1.0 - s) * ft.row(i)[j] as f64 + s * bal.row(p)[j] as f64) as f32;
                assert_eq!(out.row(i)[j], want);
            }
        }
    }

    #[test]
    fn errors() {
        let (ft, bal) = data();
        let other = sample_balanced(&DistSpec::new(0.5, 1.0, 1.0, 1.0, 4), 4, 0).unwrap();
        assert!(matches!(
            mix(&ft, &other, &MixConfig::new(1.0, 0.5, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(mix(&ft, &bal, &MixConfig::new(1.1, 0.5, 0)).is_err());
        assert!(mix(&ft, &bal, &MixConfig::new(0.5, -0.5, 0)).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let (ft, bal) = data();
        let (_, trace) = mix(&ft, &bal, &MixConfig::new(0.5, 0.5, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        trace.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("row,mixed,partner,cross_class"));
        assert_eq!(lines.count(), 200);
    }
}
