//! Fixture builders and small oracles shared by the integration tests.

#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use mondeq::LinearOperator;
use mondeq_train::config::{Preset, TrainConfig};
use mondeq_train::data::{DatasetName, DatasetSpec, Splits};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    mondeq::Tensor::randn(&[n], 1.0, r).data().to_vec()
}

/// The 4000/1000-example MNIST sample shipped with the tests.
pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist5k")
}

pub fn fixture_splits(train: usize, test: usize) -> Splits {
    let mut spec = DatasetSpec::new(DatasetName::Mnist, fixture_dir());
    spec.train_limit = Some(train);
    spec.test_limit = Some(test);
    spec.load().unwrap()
}

/// FC preset on the fixture, outputs in a scratch directory.
pub fn fc_config(out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::for_preset(Preset::FcMnist);
    cfg.data_dir = Some(fixture_dir());
    cfg.out_dir = out.to_path_buf();
    cfg
}

pub fn idx_images(n: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803u32, n, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(px);
    b
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0801u32, labels.len() as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(labels);
    b
}

pub fn write(path: &Path, bytes: &[u8]) {
    std::fs::write(path, bytes).unwrap();
}

pub fn write_gz(path: &Path, bytes: &[u8]) {
    let mut enc = GzEncoder::new(std::fs::File::create(path).unwrap(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap();
}

/// Dense matrix of an operator, one basis vector at a time.
pub fn dense_of(op: &dyn LinearOperator) -> DMatrix<f64> {
    let (n, m) = (op.dim_out(), op.dim_in());
    let mut out = DMatrix::zeros(n, m);
    let mut e = vec![0.0; m];
    let mut y = vec![0.0; n];
    for j in 0..m {
        e[j] = 1.0;
        op.apply(&e, &mut y);
        for i in 0..n {
            out[(i, j)] = y[i];
        }
        e[j] = 0.0;
    }
    out
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / n.max(1e-300)
}

/// Dense LU solve.
pub fn dense_solve(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    a.clone()
        .lu()
        .solve(&nalgebra::DVector::from_column_slice(b))
        .expect("nonsingular oracle system")
        .as_slice()
        .to_vec()
}

/// Smallest eigenvalue of `sym(I − W)`.
pub fn min_sym_eigenvalue(w: &DMatrix<f64>) -> f64 {
    let n = w.nrows();
    let g = DMatrix::<f64>::identity(n, n) - w;
    let sym = (&g + g.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

/// `I + α(I − W)`
pub fn resolvent_system(w: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let n = w.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    &id + (&id - w) * alpha
}
