//! Datasets: CSV files with a header, feature columns, and a trailing
//! integer `label` column, plus the seeded synthetic generators used by the
//! experiment pipeline (two moons, Gaussian blobs, rotated task pairs,
//! shifted OOD blobs).

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// Features (one row per example) and integer labels.
#[derive(Debug, Clone)]
pub struct Split {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.y.iter().copied().max().map_or(0, |m| m + 1)
    }
}

/// Train split plus optional validation split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Split,
    pub val: Option<Split>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(train: Split, val: Option<Split>) -> Self {
        let classes = train
            .classes()
            .max(val.as_ref().map_or(0, |v| v.classes()));
        Self { train, val, classes }
    }
}

pub fn write_csv(path: impl AsRef<Path>, split: &Split) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let features = split.x.cols();
    let mut header: Vec<String> = (0..features).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..split.len() {
        let mut record: Vec<String> = split.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        record.push(split.y[i].to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Split> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact {
            phase: "read_csv",
            path: path.to_path_buf(),
            hint: "gen-data",
        });
    }
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.len() < 2 || header.iter().last() != Some("label") {
        return Err(bad("expected feature columns followed by `label`".into()));
    }
    let features = header.len() - 1;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != header.len() {
            return Err(bad(format!(
                "row {} has {} fields, expected {}",
                rows.len() + 2,
                record.len(),
                header.len()
            )));
        }
        let mut row = Vec::with_capacity(features);
        for field in record.iter().take(features) {
            let v: f64 = field
                .parse()
                .map_err(|_| bad(format!("bad feature value `{field}`")))?;
            row.push(v);
        }
        let label: usize = record[features]
            .parse()
            .map_err(|_| bad(format!("bad label `{}`", &record[features])))?;
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(bad("no data rows".into()));
    }
    Ok(Split {
        x: Matrix::from_rows(&rows)?,
        y: labels,
    })
}

/// Two interleaved half-circles with Gaussian jitter; classes alternate so
/// every prefix is balanced.
pub fn two_moons(n: usize, noise: f64, rng: &mut SeededRng) -> Split {
    let mut x = Matrix::zeros(n.max(1), 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = rng.uniform(0.0, std::f64::consts::PI);
        // sin(t) >= 0 on [0, pi]; deriving it from cos(t) keeps the stream
        // free of sin/cos call pairs that compilers may fuse into sincos.
        let c = t.cos();
        let s = (1.0 - c * c).max(0.0).sqrt();
        let (mut px, mut py) = if class == 0 {
            (c, s)
        } else {
            (1.0 - c, 0.5 - s)
        };
        px += noise * rng.next_normal();
        py += noise * rng.next_normal();
        x[(i, 0)] = px;
        x[(i, 1)] = py;
        y.push(class);
    }
    Split { x, y }
}

/// Isotropic Gaussian blobs, one per mean, classes alternating.
pub fn gaussian_blobs(n: usize, means: &[[f64; 2]], std: f64, rng: &mut SeededRng) -> Split {
    assert!(!means.is_empty());
    let mut x = Matrix::zeros(n.max(1), 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % means.len();
        x[(i, 0)] = means[class][0] + std * rng.next_normal();
        x[(i, 1)] = means[class][1] + std * rng.next_normal();
        y.push(class);
    }
    Split { x, y }
}

/// Rotate 2-D features about the origin by `degrees`.
pub fn rotate_features(split: &Split, degrees: f64) -> Split {
    assert_eq!(split.x.cols(), 2, "rotation is defined for 2-D features");
    let rad = degrees.to_radians();
    // sin via a shifted cosine for the same build-stable reason as in
    // `two_moons`.
    let (c, s) = (rad.cos(), (rad - std::f64::consts::FRAC_PI_2).cos());
    let mut x = split.x.clone();
    for i in 0..x.rows() {
        let (px, py) = (x[(i, 0)], x[(i, 1)]);
        x[(i, 0)] = c * px - s * py;
        x[(i, 1)] = s * px + c * py;
    }
    Split {
        x,
        y: split.y.clone(),
    }
}

/// Append squared coordinates (x1^2, x2^2) to 2-D features. Off the data
/// manifold these grow faster than the raw coordinates, which lets a
/// full-rank input-layer adapter express distance-aware uncertainty in
/// every direction.
pub fn expand_quadratic(split: &Split) -> Split {
    assert_eq!(split.x.cols(), 2, "quadratic expansion is defined for 2-D features");
    let n = split.x.rows();
    let mut x = Matrix::zeros(n, 4);
    for i in 0..n {
        let (a, b) = (split.x[(i, 0)], split.x[(i, 1)]);
        x[(i, 0)] = a;
        x[(i, 1)] = b;
        x[(i, 2)] = a * a;
        x[(i, 3)] = b * b;
    }
    Split {
        x,
        y: split.y.clone(),
    }
}

/// Mean Euclidean norm of the feature rows; used to sanity-check OOD shifts.
pub fn mean_feature_norm(split: &Split) -> f64 {
    let mut total = 0.0;
    for i in 0..split.x.rows() {
        total += split.x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    total / split.x.rows().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let split = two_moons(20, 0.1, &mut SeededRng::new(1));
        write_csv(&path, &split).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(split.x, back.x);
        assert_eq!(split.y, back.y);

        // Byte-identical on rewrite.
        let path2 = dir.path().join("d2.csv");
        write_csv(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn generators_deterministic() {
        let a = two_moons(50, 0.2, &mut SeededRng::new(7));
        let b = two_moons(50, 0.2, &mut SeededRng::new(7));
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn blobs_linearly_separable() {
        // Means +/-(3,3) at std 0.5: the rule sign(x + y) classifies
        // essentially perfectly.
        let split = gaussian_blobs(2000, &[[3.0, 3.0], [-3.0, -3.0]], 0.5, &mut SeededRng::new(3));
        let mut correct = 0;
        for i in 0..split.len() {
            let s = split.x[(i, 0)] + split.x[(i, 1)];
            let pred = if s >= 0.0 { 0 } else { 1 };
            if pred == split.y[i] {
                correct += 1;
            }
        }
        assert!(correct as f64 / split.len() as f64 >= 0.999);
    }

    #[test]
    fn rotation_preserves_norms() {
        let split = two_moons(30, 0.1, &mut SeededRng::new(9));
        let rot = rotate_features(&split, 40.0);
        for i in 0..split.len() {
            let n0: f64 = split.x.row(i).iter().map(|v| v * v).sum();
            let n1: f64 = rot.x.row(i).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn malformed_csv_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1,label\n1.0,2.0,zero\n").unwrap();
        assert!(read_csv(&path).is_err());
        std::fs::write(&path, "f0,f1,tag\n1.0,2.0,0\n").unwrap();
        assert!(read_csv(&path).is_err());
    }
}
