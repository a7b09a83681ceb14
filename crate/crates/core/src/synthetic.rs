//! Seeded synthetic tables with known structure, used as oracle scenarios.
//!
//! The Gaussian family draws a balanced binary label `y` and, given `y`,
//! independent unit-variance features whose means are `±shift` (sign from
//! `y`). With shifts `a_j`, the Bayes accuracy using a set of columns is
//! `Φ(√Σ a_j²)`, which tests use as an analytic reference.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Cell, ColumnKind, ColumnRole, ColumnSpec, Table};
use crate::error::{Result, TabiiError};
use crate::rng::rng_for;

/// A generated table plus the column names meant to be withheld.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub table: Table,
    pub incremental: Vec<String>,
}

impl SyntheticDataset {
    pub fn incremental_refs(&self) -> Vec<&str> {
        self.incremental.iter().map(String::as_str).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub n: usize,
    pub original_shifts: Vec<f64>,
    pub incremental_shifts: Vec<f64>,
    /// Emit incremental columns as constant zeros instead of draws.
    pub constant_incremental: bool,
}

impl GaussianSpec {
    /// Four original and four incremental columns carrying label signal.
    pub fn informative(n: usize) -> Self {
        GaussianSpec {
            n,
            original_shifts: vec![0.4; 4],
            incremental_shifts: vec![0.25; 4],
            constant_incremental: false,
        }
    }

    /// Same originals, incremental columns constant.
    pub fn null(n: usize) -> Self {
        GaussianSpec {
            constant_incremental: true,
            ..GaussianSpec::informative(n)
        }
    }

    /// Six incremental columns of graded usefulness for tier studies.
    pub fn graded(n: usize) -> Self {
        GaussianSpec {
            n,
            original_shifts: vec![0.4; 3],
            incremental_shifts: vec![0.0, 0.05, 0.15, 0.25, 0.4, 0.5],
            constant_incremental: false,
        }
    }

    /// Bayes accuracy using the original columns, or all columns.
    pub fn bayes_accuracy(&self, with_incremental: bool) -> f64 {
        let mut s2: f64 = self.original_shifts.iter().map(|a| a * a).sum();
        if with_incremental && !self.constant_incremental {
            s2 += self.incremental_shifts.iter().map(|a| a * a).sum::<f64>();
        }
        normal_cdf(s2.sqrt())
    }

    pub fn generate(&self, seed: u64) -> Result<SyntheticDataset> {
        if self.n == 0 || self.original_shifts.is_empty() {
            return Err(TabiiError::InvalidArgument("need rows and at least one original column".into()));
        }
        let mut rng = rng_for(seed, "synthetic/gaussian");
        let d = self.original_shifts.len();
        let dt = self.incremental_shifts.len();
        let mut schema: Vec<ColumnSpec> = (0..d)
            .map(|j| ColumnSpec::new(format!("o{}", j + 1), ColumnKind::Numeric, ColumnRole::Original))
            .collect();
        let incremental: Vec<String> = (0..dt).map(|j| format!("i{}", j + 1)).collect();
        schema.extend(
            incremental
                .iter()
                .map(|n| ColumnSpec::new(n.clone(), ColumnKind::Numeric, ColumnRole::Original)),
        );
        schema.push(ColumnSpec::new("y", ColumnKind::Numeric, ColumnRole::Target));
        let rows = (0..self.n)
            .map(|_| {
                let y = rng.random_range(0..2usize);
                let sign = if y == 1 { 1.0 } else { -1.0 };
                let mut row: Vec<Cell> = self
                    .original_shifts
                    .iter()
                    .map(|a| Cell::Num(gauss(&mut rng) + sign * a))
                    .collect();
                for a in &self.incremental_shifts {
                    let v = gauss(&mut rng) + sign * a;
                    row.push(Cell::Num(if self.constant_incremental { 0.0 } else { v }));
                }
                row.push(Cell::Num(y as f64));
                row
            })
            .collect();
        Ok(SyntheticDataset {
            table: Table::new(schema, rows)?,
            incremental,
        })
    }
}

fn gauss(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

// Numerical Recipes erfc, relative error below 1.2e-7.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Two uniform features, label `x1 + x2 > 0`, points within `margin` of the
/// boundary rejected.
pub fn separable(n: usize, margin: f64, seed: u64) -> Result<Table> {
    let mut rng = rng_for(seed, "synthetic/separable");
    let schema = vec![
        ColumnSpec::new("x1", ColumnKind::Numeric, ColumnRole::Original),
        ColumnSpec::new("x2", ColumnKind::Numeric, ColumnRole::Original),
        ColumnSpec::new("y", ColumnKind::Numeric, ColumnRole::Target),
    ];
    let mut rows = Vec::with_capacity(n);
    while rows.len() < n {
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        if (a + b).abs() < margin {
            continue;
        }
        rows.push(vec![Cell::Num(a), Cell::Num(b), Cell::Num(f64::from(u8::from(a + b > 0.0)))]);
    }
    Table::new(schema, rows)
}

/// Weak original columns plus one incremental column equal to the label with
/// `noise` flip probability.
pub fn label_copy(n: usize, noise: f64, seed: u64) -> Result<SyntheticDataset> {
    let base = GaussianSpec {
        n,
        original_shifts: vec![0.3; 4],
        incremental_shifts: vec![],
        constant_incremental: false,
    }
    .generate(seed)?;
    let mut rng = rng_for(seed, "synthetic/label_copy");
    let mut schema = base.table.schema().to_vec();
    let target = schema.pop().expect("target column");
    schema.push(ColumnSpec::new("copy", ColumnKind::Numeric, ColumnRole::Original));
    schema.push(target);
    let rows = base
        .table
        .rows()
        .iter()
        .map(|r| {
            let Cell::Num(y) = r[r.len() - 1] else { unreachable!() };
            let flip = rng.random::<f64>() < noise;
            let copy = if flip { 1.0 - y } else { y };
            let mut out = r[..r.len() - 1].to_vec();
            out.push(Cell::Num(copy));
            out.push(Cell::Num(y));
            out
        })
        .collect();
    Ok(SyntheticDataset {
        table: Table::new(schema, rows)?,
        incremental: vec!["copy".into()],
    })
}

/// Gaussian features with a single-valued label.
pub fn constant_label(n: usize, seed: u64) -> Result<Table> {
    let mut rng = rng_for(seed, "synthetic/constant");
    let schema = vec![
        ColumnSpec::new("a", ColumnKind::Numeric, ColumnRole::Original),
        ColumnSpec::new("b", ColumnKind::Numeric, ColumnRole::Original),
        ColumnSpec::new("y", ColumnKind::Categorical, ColumnRole::Target),
    ];
    let rows = (0..n)
        .map(|_| vec![Cell::Num(gauss(&mut rng)), Cell::Num(gauss(&mut rng)), Cell::Cat("yes".into())])
        .collect();
    Table::new(schema, rows)
}

/// Named generators for the command line: `informative`, `null`, `graded`,
/// `separable`, `label-copy`, optionally suffixed with `:<rows>`.
pub fn by_name(spec: &str, seed: u64) -> Result<SyntheticDataset> {
    let (name, n) = match spec.split_once(':') {
        Some((a, b)) => (
            a,
            b.parse::<usize>()
                .map_err(|_| TabiiError::Config(format!("bad row count in `{spec}`")))?,
        ),
        None => (spec, 3000),
    };
    match name {
        "informative" => GaussianSpec::informative(n).generate(seed),
        "null" => GaussianSpec::null(n).generate(seed),
        "graded" => GaussianSpec::graded(n).generate(seed),
        "label-copy" => label_copy(n, 0.1, seed),
        "separable" => Ok(SyntheticDataset {
            table: separable(n, 0.05, seed)?,
            incremental: vec![],
        }),
        other => Err(TabiiError::Config(format!("unknown synthetic dataset `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.959_963_985) - 0.975).abs() < 1e-6);
        assert!((normal_cdf(-1.0) - 0.158_655_254).abs() < 1e-6);
    }

    #[test]
    fn informative_shape_and_determinism() {
        let spec = GaussianSpec::informative(200);
        let a = spec.generate(3).unwrap();
        assert_eq!(a.table.n_cols(), 9);
        assert_eq!(a.incremental, ["i1", "i2", "i3", "i4"]);
        assert_eq!(a.table, spec.generate(3).unwrap().table);
        assert!(spec.bayes_accuracy(true) > spec.bayes_accuracy(false));
    }

    #[test]
    fn null_columns_are_constant() {
        let d = GaussianSpec::null(50).generate(1).unwrap();
        let j = d.table.column_index("i2").unwrap();
        assert!(d.table.column(j).all(|c| *c == Cell::Num(0.0)));
    }

    #[test]
    fn label_copy_noise_rate() {
        let d = label_copy(2000, 0.1, 4).unwrap();
        let (c, y) = (d.table.column_index("copy").unwrap(), d.table.target_index());
        let flips = d.table.rows().iter().filter(|r| r[c] != r[y]).count();
        assert!((150..=250).contains(&flips), "{flips}");
    }

    #[test]
    fn separable_labels_match_rule() {
        let t = separable(100, 0.05, 2).unwrap();
        for r in t.rows() {
            let (Cell::Num(a), Cell::Num(b), Cell::Num(y)) = (&r[0], &r[1], &r[2]) else { panic!() };
            assert_eq!(*y == 1.0, a + b > 0.0);
        }
    }
}
