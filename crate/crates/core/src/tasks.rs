//! Synthetic datasets, CSV ingestion and deterministic batching.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backprop::Targets;
use crate::error::{LabError, Result};
use crate::linalg::{gaussian_matrix, orthonormal_columns, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Classification { classes: usize },
    Regression { outputs: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Targets,
    pub kind: DatasetKind,
    /// Non-fatal construction notes, e.g. overlapping cluster subspaces.
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Targets, kind: DatasetKind) -> Result<Self> {
        if x.rows() == 0 {
            return Err(LabError::Data("dataset has no rows".into()));
        }
        if y.len() != x.rows() {
            return Err(LabError::Data(format!(
                "{} targets for {} feature rows",
                y.len(),
                x.rows()
            )));
        }
        if !x.is_finite() {
            return Err(LabError::Data("features must be finite".into()));
        }
        match (&y, kind) {
            (Targets::Classes(c), DatasetKind::Classification { classes }) => {
                if let Some(bad) = c.iter().find(|v| **v >= classes) {
                    return Err(LabError::Data(format!("class {bad} outside [0, {classes})")));
                }
            }
            (Targets::Values(v), DatasetKind::Regression { outputs }) => {
                if v.cols() != outputs || !v.is_finite() {
                    return Err(LabError::Data("regression targets malformed".into()));
                }
            }
            _ => return Err(LabError::Data("targets do not match dataset kind".into())),
        }
        Ok(Self {
            x,
            y,
            kind,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    /// Output width the model head needs.
    pub fn output_width(&self) -> usize {
        match self.kind {
            DatasetKind::Classification { classes } => classes,
            DatasetKind::Regression { outputs } => outputs,
        }
    }

    /// Rows `idx` in order.
    pub fn select(&self, idx: &[usize]) -> (Matrix, Targets) {
        let mut x = Matrix::zeros(idx.len(), self.x.cols());
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
        }
        let y = match &self.y {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => {
                let mut out = Matrix::zeros(idx.len(), v.cols());
                for (r, &i) in idx.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(v.row(i));
                }
                Targets::Values(out)
            }
        };
        (x, y)
    }

    fn subset(&self, idx: &[usize]) -> Self {
        let (x, y) = self.select(idx);
        Self {
            x,
            y,
            kind: self.kind,
            warnings: self.warnings.clone(),
        }
    }

    /// Seeded split into (train, eval); `eval_fraction` of the rows, at
    /// least one, go to eval.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&eval_fraction) || self.len() < 2 {
            return Err(LabError::Data("cannot split dataset".into()));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut idx);
        let n_eval = ((self.len() as f64 * eval_fraction).round() as usize).clamp(1, self.len() - 1);
        let (eval, train) = idx.split_at(n_eval);
        let mut train = train.to_vec();
        let mut eval = eval.to_vec();
        train.sort_unstable();
        eval.sort_unstable();
        Ok((self.subset(&train), self.subset(&eval)))
    }
}

/// Each class lives in its own random linear subspace of the raw feature
/// space: `x = B_k (c·1/√q + z) + ε` with `B_k` a `d_raw × q` orthonormal
/// basis, `z ~ N(0, I_q)` and `ε ~ N(0, σ² I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceClusters {
    pub clusters: usize,
    pub d_raw: usize,
    pub n_per_cluster: usize,
    pub subspace_dim: usize,
    pub noise_std: f64,
    /// Norm of each cluster's center inside its subspace.
    #[serde(default = "default_center")]
    pub center: f64,
}

fn default_center() -> f64 {
    3.0
}

impl Default for SubspaceClusters {
    fn default() -> Self {
        Self {
            clusters: 4,
            d_raw: 32,
            n_per_cluster: 500,
            subspace_dim: 6,
            noise_std: 0.1,
            center: default_center(),
        }
    }
}

pub fn gen_subspace_clusters(rng: &mut Rng, spec: &SubspaceClusters) -> Result<Dataset> {
    let SubspaceClusters {
        clusters: k,
        d_raw,
        n_per_cluster,
        subspace_dim: q,
        noise_std,
        center,
    } = *spec;
    if k < 2 {
        return Err(LabError::Data("need at least two clusters".into()));
    }
    if q == 0 || q > d_raw {
        return Err(LabError::Data(format!(
            "subspace dimension {q} must lie in [1, {d_raw}]"
        )));
    }
    if n_per_cluster == 0 || noise_std < 0.0 {
        return Err(LabError::Data("cluster size must be positive, noise non-negative".into()));
    }

    let mut warnings = Vec::new();
    let bases: Vec<Matrix> = if k * q <= d_raw {
        let q_all = orthonormal_columns(&gaussian_matrix(rng, d_raw, k * q, 0.0, 1.0));
        (0..k)
            .map(|c| {
                let cols: Vec<Vec<f64>> = (c * q..(c + 1) * q).map(|j| q_all.col(j)).collect();
                Matrix::from_columns(&cols, d_raw).expect("basis columns")
            })
            .collect()
    } else {
        warnings.push(format!(
            "{k} clusters of dimension {q} exceed {d_raw} features; subspaces overlap"
        ));
        (0..k)
            .map(|_| orthonormal_columns(&gaussian_matrix(rng, d_raw, q, 0.0, 1.0)))
            .collect()
    };

    let n = k * n_per_cluster;
    let mut x = Matrix::zeros(n, d_raw);
    let mut labels = Vec::with_capacity(n);
    let shift = center / (q as f64).sqrt();
    for (c, basis) in bases.iter().enumerate() {
        for i in 0..n_per_cluster {
            let row = c * n_per_cluster + i;
            let z: Vec<f64> = (0..q).map(|_| shift + rng.normal(0.0, 1.0)).collect();
            let point = basis.matvec(&z)?;
            for (dst, v) in x.row_mut(row).iter_mut().zip(point) {
                *dst = v + if noise_std > 0.0 { rng.normal(0.0, noise_std) } else { 0.0 };
            }
            labels.push(c);
        }
    }
    let mut ds = Dataset::new(x, Targets::Classes(labels), DatasetKind::Classification { classes: k })?;
    ds.warnings = warnings;
    Ok(ds)
}

/// Regression target that is a different random affine map in each cell of
/// a Voronoi partition (a hyperplane arrangement) of the input space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseRegression {
    pub pieces: usize,
    pub d_raw: usize,
    pub n: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_outputs")]
    pub outputs: usize,
}

fn default_outputs() -> usize {
    1
}

/// Region of `x` under the centers (nearest center, lowest index on ties).
pub fn piece_of(centers: &Matrix, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for r in 0..centers.rows() {
        let d: f64 = centers.row(r).iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
        if d < best.1 {
            best = (r, d);
        }
    }
    best.0
}

/// Dataset plus the generating centers and per-piece maps `(W, b)`.
pub struct PiecewiseTruth {
    pub centers: Matrix,
    pub maps: Vec<(Matrix, Vec<f64>)>,
}

pub fn gen_piecewise_regression(rng: &mut Rng, spec: &PiecewiseRegression) -> Result<(Dataset, PiecewiseTruth)> {
    if spec.pieces < 2 {
        return Err(LabError::Data("piecewise regression needs at least two pieces".into()));
    }
    if spec.d_raw == 0 || spec.n == 0 || spec.outputs == 0 || spec.noise_std < 0.0 {
        return Err(LabError::Data("invalid piecewise regression shape".into()));
    }
    let centers = gaussian_matrix(rng, spec.pieces, spec.d_raw, 0.0, 1.0);
    let maps: Vec<(Matrix, Vec<f64>)> = (0..spec.pieces)
        .map(|_| {
            let w = gaussian_matrix(rng, spec.outputs, spec.d_raw, 0.0, 1.0 / (spec.d_raw as f64).sqrt());
            let b = gaussian_matrix(rng, spec.outputs, 1, 0.0, 1.0).into_vec();
            (w, b)
        })
        .collect();
    let x = gaussian_matrix(rng, spec.n, spec.d_raw, 0.0, 1.0);
    let mut y = Matrix::zeros(spec.n, spec.outputs);
    for r in 0..spec.n {
        let (w, b) = &maps[piece_of(&centers, x.row(r))];
        let v = w.matvec(x.row(r))?;
        for (o, (vi, bi)) in y.row_mut(r).iter_mut().zip(v.iter().zip(b)) {
            *o = vi + bi + if spec.noise_std > 0.0 { rng.normal(0.0, spec.noise_std) } else { 0.0 };
        }
    }
    let ds = Dataset::new(x, Targets::Values(y), DatasetKind::Regression { outputs: spec.outputs })?;
    Ok((ds, PiecewiseTruth { centers, maps }))
}

/// Column layout of a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub target: String,
    /// Class count for classification; `None` reads the target as a real.
    #[serde(default)]
    pub classes: Option<usize>,
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| LabError::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| LabError::Data(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| LabError::Load {
            row: 0,
            column: name.to_string(),
            message: "column missing from header".into(),
        })
    };
    let feature_cols = schema
        .features
        .iter()
        .map(|f| find(f))
        .collect::<Result<Vec<_>>>()?;
    let target_col = find(&schema.target)?;

    let mut data = Vec::new();
    let mut classes = Vec::new();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| LabError::Load {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(LabError::Load {
                row,
                column: String::new(),
                message: format!("{} fields, header has {}", record.len(), headers.len()),
            });
        }
        for (&c, name) in feature_cols.iter().zip(&schema.features) {
            data.push(parse_cell(&record[c], row, name)?);
        }
        let cell = &record[target_col];
        match schema.classes {
            Some(k) => {
                let v: usize = cell.trim().parse().map_err(|_| LabError::Load {
                    row,
                    column: schema.target.clone(),
                    message: format!("`{cell}` is not a class index"),
                })?;
                if v >= k {
                    return Err(LabError::Load {
                        row,
                        column: schema.target.clone(),
                        message: format!("class {v} outside [0, {k})"),
                    });
                }
                classes.push(v);
            }
            None => values.push(parse_cell(cell, row, &schema.target)?),
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(LabError::Data("no data rows".into()));
    }
    let x = Matrix::from_vec(rows, schema.features.len(), data)?;
    match schema.classes {
        Some(k) => Dataset::new(x, Targets::Classes(classes), DatasetKind::Classification { classes: k }),
        None => Dataset::new(
            x,
            Targets::Values(Matrix::from_vec(rows, 1, values)?),
            DatasetKind::Regression { outputs: 1 },
        ),
    }
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| LabError::Load {
        row,
        column: column.to_string(),
        message: format!("`{cell}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(LabError::Load {
            row,
            column: column.to_string(),
            message: "value is not finite".into(),
        });
    }
    Ok(v)
}

/// Writes `ds` with feature columns `x0..` and target column `y`.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<CsvSchema> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::Data(e.to_string()))?;
    let features: Vec<String> = (0..ds.features()).map(|i| format!("x{i}")).collect();
    let mut header = features.clone();
    header.push("y".into());
    w.write_record(&header).map_err(|e| LabError::Data(e.to_string()))?;
    for r in 0..ds.len() {
        // Display for f64 prints the shortest string that parses back exactly.
        let mut rec: Vec<String> = ds.x.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(match &ds.y {
            Targets::Classes(c) => c[r].to_string(),
            Targets::Values(v) => v[(r, 0)].to_string(),
        });
        w.write_record(&rec).map_err(|e| LabError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(CsvSchema {
        features,
        target: "y".into(),
        classes: match ds.kind {
            DatasetKind::Classification { classes } => Some(classes),
            DatasetKind::Regression { .. } => None,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Shuffle {
    #[default]
    PerEpoch,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle: Shuffle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub epoch: usize,
    pub x: Matrix,
    pub y: Targets,
}

impl BatchPlan {
    /// Row order for `epoch`; epoch `e` uses the stream derived from
    /// `(seed, e)`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        if self.shuffle == Shuffle::PerEpoch {
            Rng::derived(self.seed, epoch as u64).shuffle(&mut idx);
        }
        idx
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn epoch_batches(&self, d: &Dataset, epoch: usize) -> Result<Vec<Batch>> {
        if self.batch_size == 0 || self.batch_size > d.len() {
            return Err(LabError::contract(format!(
                "batch size {} must lie in [1, {}]",
                self.batch_size,
                d.len()
            )));
        }
        let order = self.epoch_order(d.len(), epoch);
        Ok(order
            .chunks(self.batch_size)
            .map(|chunk| {
                let (x, y) = d.select(chunk);
                Batch { epoch, x, y }
            })
            .collect())
    }
}

/// Every batch of every epoch in training order.
pub fn batches(d: &Dataset, plan: &BatchPlan) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    for epoch in 0..plan.epochs {
        out.extend(plan.epoch_batches(d, epoch)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    fn small(noise: f64, q: usize, d_raw: usize) -> SubspaceClusters {
        SubspaceClusters {
            clusters: 2,
            d_raw,
            n_per_cluster: 20,
            subspace_dim: q,
            noise_std: noise,
            center: 2.0,
        }
    }

    #[test]
    fn one_dimensional_clusters_lie_on_lines() {
        let ds = gen_subspace_clusters(&mut Rng::new(1), &small(0.0, 1, 4)).unwrap();
        let Targets::Classes(labels) = &ds.y else { panic!() };
        for class in 0..2 {
            let rows: Vec<usize> = (0..ds.len()).filter(|r| labels[*r] == class).collect();
            let first = ds.x.row(rows[0]);
            let nf = dot(first, first).sqrt();
            for &r in &rows {
                let row = ds.x.row(r);
                let cos = dot(row, first) / (nf * dot(row, row).sqrt());
                assert!((cos.abs() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clusters_are_balanced_and_deterministic() {
        let spec = SubspaceClusters::default();
        let a = gen_subspace_clusters(&mut Rng::new(5), &spec).unwrap();
        let b = gen_subspace_clusters(&mut Rng::new(5), &spec).unwrap();
        assert_eq!(a, b);
        let Targets::Classes(labels) = &a.y else { panic!() };
        for c in 0..4 {
            assert_eq!(labels.iter().filter(|l| **l == c).count(), 500);
        }
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn noiseless_classes_are_orthogonal() {
        let spec = SubspaceClusters {
            clusters: 3,
            d_raw: 12,
            n_per_cluster: 10,
            subspace_dim: 3,
            noise_std: 0.0,
            center: 2.0,
        };
        let ds = gen_subspace_clusters(&mut Rng::new(2), &spec).unwrap();
        let Targets::Classes(labels) = &ds.y else { panic!() };
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if labels[i] != labels[j] {
                    assert!(dot(ds.x.row(i), ds.x.row(j)).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn overlapping_subspaces_warn() {
        let spec = SubspaceClusters {
            clusters: 3,
            d_raw: 4,
            n_per_cluster: 5,
            subspace_dim: 2,
            noise_std: 0.1,
            center: 1.0,
        };
        let ds = gen_subspace_clusters(&mut Rng::new(3), &spec).unwrap();
        assert_eq!(ds.warnings.len(), 1);
        assert!(gen_subspace_clusters(&mut Rng::new(3), &SubspaceClusters { clusters: 1, ..spec }).is_err());
    }

    #[test]
    fn piecewise_regression_is_piecewise_linear() {
        let spec = PiecewiseRegression {
            pieces: 3,
            d_raw: 4,
            n: 200,
            noise_std: 0.0,
            outputs: 1,
        };
        let (ds, truth) = gen_piecewise_regression(&mut Rng::new(4), &spec).unwrap();
        let Targets::Values(y) = &ds.y else { panic!() };
        for r in 0..ds.len() {
            let (w, b) = &truth.maps[piece_of(&truth.centers, ds.x.row(r))];
            let expected = w.matvec(ds.x.row(r)).unwrap()[0] + b[0];
            assert_eq!(y[(r, 0)], expected);
        }
        let (again, _) = gen_piecewise_regression(&mut Rng::new(4), &spec).unwrap();
        assert_eq!(ds, again);
        assert!(gen_piecewise_regression(&mut Rng::new(4), &PiecewiseRegression { pieces: 1, ..spec }).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = gen_subspace_clusters(&mut Rng::new(6), &small(0.3, 2, 5)).unwrap();
        let schema = write_csv(&ds, &path).unwrap();
        assert_eq!(load_csv(&path, &schema).unwrap(), ds);

        let (reg, _) = gen_piecewise_regression(
            &mut Rng::new(7),
            &PiecewiseRegression {
                pieces: 2,
                d_raw: 3,
                n: 30,
                noise_std: 0.1,
                outputs: 1,
            },
        )
        .unwrap();
        let schema = write_csv(&reg, &path).unwrap();
        assert_eq!(load_csv(&path, &schema).unwrap(), reg);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut text = String::from("a,b,y\n");
        for i in 1..=9 {
            if i == 7 {
                text.push_str("1.0,oops,0\n");
            } else {
                text.push_str("1.0,2.0,1\n");
            }
        }
        std::fs::write(&path, text).unwrap();
        let schema = CsvSchema {
            features: vec!["a".into(), "b".into()],
            target: "y".into(),
            classes: Some(2),
        };
        match load_csv(&path, &schema).unwrap_err() {
            LabError::Load { row, column, .. } => {
                assert_eq!(row, 7);
                assert_eq!(column, "b");
            }
            other => panic!("{other:?}"),
        }

        std::fs::write(&path, "a,b,y\n").unwrap();
        let err = load_csv(&path, &schema).unwrap_err();
        assert_eq!(err.to_string(), "no data rows");

        std::fs::write(&path, "a,y\n1,0\n").unwrap();
        assert!(matches!(load_csv(&path, &schema), Err(LabError::Load { row: 0, .. })));
    }

    #[test]
    fn batching_rules() {
        let ds = gen_subspace_clusters(&mut Rng::new(8), &SubspaceClusters {
            n_per_cluster: 5,
            ..small(0.1, 1, 4)
        })
        .unwrap();
        assert_eq!(ds.len(), 10);
        let plan = BatchPlan {
            seed: 3,
            batch_size: 4,
            epochs: 2,
            shuffle: Shuffle::PerEpoch,
        };
        let all = batches(&ds, &plan).unwrap();
        let sizes: Vec<usize> = all.iter().filter(|b| b.epoch == 0).map(|b| b.x.rows()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(all, batches(&ds, &plan).unwrap());

        let mut order = plan.epoch_order(10, 1);
        order.sort_unstable();
        assert_eq!(order, (0..10).collect::<Vec<_>>());

        let full = BatchPlan {
            batch_size: 10,
            epochs: 1,
            ..plan
        };
        let one = batches(&ds, &full).unwrap();
        assert_eq!(one.len(), 1);
        let mut rows: Vec<Vec<u64>> = (0..10)
            .map(|r| one[0].x.row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> = (0..10)
            .map(|r| ds.x.row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);

        let too_big = BatchPlan {
            batch_size: 11,
            ..plan
        };
        assert!(batches(&ds, &too_big).is_err());
    }

    #[test]
    fn split_partitions_rows() {
        let ds = gen_subspace_clusters(&mut Rng::new(9), &small(0.1, 1, 4)).unwrap();
        let (train, eval) = ds.split(0.25, 1).unwrap();
        assert_eq!(train.len() + eval.len(), ds.len());
        assert_eq!(eval.len(), 10);
    }
}
