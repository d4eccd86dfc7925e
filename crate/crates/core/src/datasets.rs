//! Synthetic ID / semi-OOD / full-OOD data, pseudo-OOD construction and the
//! IDX image format.
//!
//! ID samples are isotropic Gaussian blobs around well separated centers.
//! Semi-OOD samples keep the class centers but move every point by a fixed
//! style offset and widen the noise by 1.5×. Full-OOD samples are uniform in
//! a bounding box and carry no class structure.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AbnnError, IdxError, Result};
use crate::numerics::{Matrix, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Generator parameters for the synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub centers: Matrix,
    pub sigma_id: f64,
    /// Length of the style offset applied to semi-OOD points.
    pub semi_shift: f64,
    /// Minimum pairwise center distance.
    pub margin: f64,
    pub box_lo: f64,
    pub box_hi: f64,
    /// Std of the Gaussian noise that turns ID training points into the
    /// training-time OOD pool.
    pub ood_noise_std: f64,
}

/// Knobs for [`BlobSpec::standard`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobParams {
    pub classes: usize,
    pub dim: usize,
    pub sigma_id: f64,
    pub margin: f64,
    pub semi_shift: f64,
    pub box_lo: f64,
    pub box_hi: f64,
    pub ood_noise_std: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 8,
            sigma_id: 1.0,
            margin: 10.0,
            semi_shift: 6.0,
            box_lo: -15.0,
            box_hi: 15.0,
            ood_noise_std: 3.0,
        }
    }
}

impl BlobSpec {
    /// Centers on scaled coordinate axes when `K ≤ d` (pairwise distance
    /// exactly `margin`), otherwise rejection-sampled on a sphere.
    pub fn standard(p: &BlobParams, rng: &mut Rng) -> Result<Self> {
        if p.classes < 2 {
            return Err(AbnnError::Config("classes: K ≥ 2 required".into()));
        }
        if p.dim == 0 {
            return Err(AbnnError::Config("dim must be ≥ 1".into()));
        }
        let mut centers = Matrix::zeros(p.classes, p.dim);
        if p.classes <= p.dim {
            let a = p.margin / std::f64::consts::SQRT_2;
            for k in 0..p.classes {
                centers.set(k, k, a);
            }
        } else {
            let radius = p.margin * p.classes as f64;
            let mut placed = 0;
            let mut attempts = 0;
            while placed < p.classes {
                attempts += 1;
                if attempts > 100_000 {
                    return Err(AbnnError::Config("could not place centers at requested margin".into()));
                }
                let v: Vec<f64> = (0..p.dim).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let c: Vec<f64> = v.iter().map(|x| x / norm * radius).collect();
                let far = (0..placed).all(|j| dist(&c, centers.row(j)) >= p.margin);
                if far {
                    centers.row_mut(placed).copy_from_slice(&c);
                    placed += 1;
                }
            }
        }
        let spec = Self {
            classes: p.classes,
            dim: p.dim,
            centers,
            sigma_id: p.sigma_id,
            semi_shift: p.semi_shift,
            margin: p.margin,
            box_lo: p.box_lo,
            box_hi: p.box_hi,
            ood_noise_std: p.ood_noise_std,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(AbnnError::Config("classes: K ≥ 2 required".into()));
        }
        if self.centers.shape() != (self.classes, self.dim) {
            return Err(AbnnError::Config("centers must be K × d".into()));
        }
        if !(self.sigma_id > 0.0) {
            return Err(AbnnError::Config("sigma_id must be positive".into()));
        }
        if !(self.semi_shift > 0.0) {
            return Err(AbnnError::Config("semi_shift must be positive".into()));
        }
        if !(self.box_hi > self.box_lo) {
            return Err(AbnnError::Config("box_hi must exceed box_lo".into()));
        }
        if !(self.ood_noise_std > 0.0) {
            return Err(AbnnError::Config("ood_noise_std must be positive".into()));
        }
        for i in 0..self.classes {
            for j in 0..i {
                if dist(self.centers.row(i), self.centers.row(j)) < self.margin * (1.0 - 1e-12) {
                    return Err(AbnnError::Config(format!(
                        "centers {j} and {i} are closer than margin {}",
                        self.margin
                    )));
                }
            }
        }
        Ok(())
    }

    /// Unit-norm style direction, equidistant from every axis-aligned center.
    pub fn shift_direction(&self) -> Vec<f64> {
        vec![1.0 / (self.dim as f64).sqrt(); self.dim]
    }

    /// Per-class Gaussian densities `f(x, θ_k)` at every row of `x`.
    pub fn class_densities(&self, x: &Matrix) -> Matrix {
        let d = self.dim as f64;
        let s2 = self.sigma_id * self.sigma_id;
        let norm = (2.0 * std::f64::consts::PI * s2).powf(-d / 2.0);
        let mut out = Matrix::zeros(x.rows(), self.classes);
        for r in 0..x.rows() {
            for k in 0..self.classes {
                let d2: f64 = x
                    .row(r)
                    .iter()
                    .zip(self.centers.row(k))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                out.set(r, k, norm * (-0.5 * d2 / s2).exp());
            }
        }
        out
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub spec: BlobSpec,
    pub seed: u64,
    pub n_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub id_train: DataSplit,
    pub id_test: DataSplit,
    pub semi_ood: Matrix,
    pub full_ood: Matrix,
    pub ood_train: Matrix,
    pub meta: BundleMeta,
}

/// Draws `n_per_class` points per class for the train and test splits, the
/// same per-class count of semi-OOD points, `K·n_per_class` full-OOD points,
/// and a pseudo-OOD pool from the training features.
pub fn gen_blobs(spec: &BlobSpec, n_per_class: usize, seed: u64) -> Result<DatasetBundle> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(AbnnError::Config("n_per_class must be ≥ 1".into()));
    }
    let root = Rng::new(seed);
    let id_train = sample_id(spec, n_per_class, &mut root.derive(1));
    let id_test = sample_id(spec, n_per_class, &mut root.derive(2));
    let semi_ood = sample_semi(spec, n_per_class, &mut root.derive(3));
    let full_ood = sample_box(spec, spec.classes * n_per_class, &mut root.derive(4));
    let ood_train = pseudo_ood(&id_train.features, spec.ood_noise_std, &mut root.derive(5))?;
    Ok(DatasetBundle {
        id_train,
        id_test,
        semi_ood,
        full_ood,
        ood_train,
        meta: BundleMeta {
            spec: spec.clone(),
            seed,
            n_per_class,
        },
    })
}

fn sample_id(spec: &BlobSpec, n_per_class: usize, rng: &mut Rng) -> DataSplit {
    let n = spec.classes * n_per_class;
    let mut features = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.classes;
        for (j, v) in features.row_mut(i).iter_mut().enumerate() {
            *v = spec.centers.get(k, j) + spec.sigma_id * rng.normal();
        }
        labels.push(k);
    }
    DataSplit { features, labels }
}

fn sample_semi(spec: &BlobSpec, n_per_class: usize, rng: &mut Rng) -> Matrix {
    let n = spec.classes * n_per_class;
    let shift = spec.shift_direction();
    let mut out = Matrix::zeros(n, spec.dim);
    for i in 0..n {
        let k = i % spec.classes;
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = spec.centers.get(k, j) + spec.semi_shift * shift[j] + 1.5 * spec.sigma_id * rng.normal();
        }
    }
    out
}

fn sample_box(spec: &BlobSpec, n: usize, rng: &mut Rng) -> Matrix {
    let width = spec.box_hi - spec.box_lo;
    let mut out = Matrix::zeros(n, spec.dim);
    for v in out.data_mut() {
        *v = spec.box_lo + width * rng.uniform();
    }
    out
}

/// ID features plus `noise_std` times standard normal noise.
pub fn pseudo_ood(id_features: &Matrix, noise_std: f64, rng: &mut Rng) -> Result<Matrix> {
    if !(noise_std > 0.0) {
        return Err(AbnnError::Config(format!(
            "noise_std must be positive, got {noise_std}"
        )));
    }
    let mut out = id_features.clone();
    for v in out.data_mut() {
        *v += noise_std * rng.normal();
    }
    Ok(out)
}

/// Per-feature affine map to zero mean / unit variance, fitted on ID train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mut mean = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        // Constant features (e.g. blank image borders) keep unit scale.
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(crate::error::shape_err(
                "Standardizer::apply",
                self.mean.len(),
                x.cols(),
            ));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

impl DatasetBundle {
    pub fn dim(&self) -> usize {
        self.id_train.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.meta.spec.classes
    }

    /// Every split mapped with statistics of the ID training features.
    pub fn standardized(&self) -> Result<(DatasetBundle, Standardizer)> {
        let st = Standardizer::fit(&self.id_train.features);
        Ok((self.with_standardizer(&st)?, st))
    }

    /// Every split mapped through an existing standardizer.
    pub fn with_standardizer(&self, st: &Standardizer) -> Result<DatasetBundle> {
        Ok(DatasetBundle {
            id_train: DataSplit {
                features: st.apply(&self.id_train.features)?,
                labels: self.id_train.labels.clone(),
            },
            id_test: DataSplit {
                features: st.apply(&self.id_test.features)?,
                labels: self.id_test.labels.clone(),
            },
            semi_ood: st.apply(&self.semi_ood)?,
            full_ood: st.apply(&self.full_ood)?,
            ood_train: st.apply(&self.ood_train)?,
            meta: self.meta.clone(),
        })
    }

    /// Writes `train.csv`, `test.csv`, `semi.csv`, `full.csv`,
    /// `ood_train.csv` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("train.csv"),
            split_to_csv(&self.id_train.features, Some(&self.id_train.labels)),
        )?;
        fs::write(
            dir.join("test.csv"),
            split_to_csv(&self.id_test.features, Some(&self.id_test.labels)),
        )?;
        fs::write(dir.join("semi.csv"), split_to_csv(&self.semi_ood, None))?;
        fs::write(dir.join("full.csv"), split_to_csv(&self.full_ood, None))?;
        fs::write(dir.join("ood_train.csv"), split_to_csv(&self.ood_train, None))?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let read = |name: &str, labeled: bool| -> Result<(Matrix, Vec<usize>)> {
            csv_to_split(&fs::read_to_string(dir.join(name))?, labeled)
        };
        let (train_x, train_y) = read("train.csv", true)?;
        let (test_x, test_y) = read("test.csv", true)?;
        let bundle = DatasetBundle {
            id_train: DataSplit {
                features: train_x,
                labels: train_y,
            },
            id_test: DataSplit {
                features: test_x,
                labels: test_y,
            },
            semi_ood: read("semi.csv", false)?.0,
            full_ood: read("full.csv", false)?.0,
            ood_train: read("ood_train.csv", false)?.0,
            meta,
        };
        let d = bundle.dim();
        for m in [
            &bundle.id_test.features,
            &bundle.semi_ood,
            &bundle.full_ood,
            &bundle.ood_train,
        ] {
            if m.rows() > 0 && m.cols() != d {
                return Err(crate::error::shape_err("DatasetBundle::load", d, m.cols()));
            }
        }
        Ok(bundle)
    }
}

pub fn split_to_csv(x: &Matrix, labels: Option<&[usize]>) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for r in 0..x.rows() {
        let row: Vec<String> = x.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        if let Some(l) = labels {
            let _ = write!(out, ",{}", l[r]);
        }
        out.push('\n');
    }
    out
}

pub fn csv_to_split(text: &str, labeled: bool) -> Result<(Matrix, Vec<usize>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| AbnnError::Config("empty CSV".into()))?;
    let n_cols = header.split(',').count();
    let n_features = if labeled { n_cols - 1 } else { n_cols };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_cols {
            return Err(AbnnError::Config(format!(
                "CSV row {} has {} fields, expected {n_cols}",
                i + 1,
                fields.len()
            )));
        }
        for f in &fields[..n_features] {
            data.push(
                f.parse::<f64>()
                    .map_err(|e| AbnnError::Config(format!("CSV row {}: {e}", i + 1)))?,
            );
        }
        if labeled {
            labels.push(
                fields[n_features]
                    .parse::<usize>()
                    .map_err(|e| AbnnError::Config(format!("CSV row {} label: {e}", i + 1)))?,
            );
        }
    }
    let rows = data.len() / n_features.max(1);
    Ok((Matrix::from_vec(rows, n_features, data)?, labels))
}

fn read_be_u32(bytes: &[u8], offset: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: offset + 4,
            available: bytes.len(),
        })
}

/// Parses an IDX3 (`u8`, `[n, rows, cols]`) image file into `n × rows·cols`
/// pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<Matrix, IdxError> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::WrongMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let pixels = n * rows * cols;
    let payload = bytes.get(16..16 + pixels).ok_or(IdxError::Truncated {
        needed: 16 + pixels,
        available: bytes.len(),
    })?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Matrix::from_vec(n, rows * cols, data).expect("length checked above"))
}

/// Parses an IDX1 (`u8`, `[n]`) label file.
pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<usize>, IdxError> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::WrongMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let payload = bytes.get(8..8 + n).ok_or(IdxError::Truncated {
        needed: 8 + n,
        available: bytes.len(),
    })?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.rows() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        }
        .into());
    }
    Ok((images, labels))
}
