use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use robust_student::data::{gcn, toy_dataset, toy_dataset_with, Dataset, ToyConfig, ToyKind, ZcaTransform, GCN_EPSILON};
use robust_student::tensor::{matmul, transpose, Tensor};

fn covariance(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.len() / x.shape()[0]);
    let flat = x.reshape([n, d]).unwrap();
    let mut centered = flat.data().to_vec();
    for j in 0..d {
        let m = (0..n).map(|i| flat.data()[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * d + j] -= m;
        }
    }
    let c = Tensor::new(vec![n, d], centered).unwrap();
    matmul(&transpose(&c).unwrap(), &c).unwrap().scale(1.0 / n as f64).unwrap().into_data()
}

fn correlated_samples(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mix: Vec<f64> = (0..d * d).map(|_| normal.sample(&mut rng)).collect();
    let z = Tensor::new(vec![n, d], (0..n * d).map(|_| normal.sample(&mut rng)).collect()).unwrap();
    let a = Tensor::new(vec![d, d], mix).unwrap();
    matmul(&z, &a).unwrap().map("shift", |v| v + 3.0).unwrap()
}

#[test]
fn zca_whitens_its_fit_set() {
    let x = correlated_samples(500, 16, 1);
    for eps in [1e-4, 1e-3] {
        let t = ZcaTransform::fit(&x, eps).unwrap();
        let cov = covariance(&t.apply(&x).unwrap());
        let dev = (0..16 * 16)
            .map(|k| (cov[k] - if k % 17 == 0 { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        assert!(dev < 0.1, "eps {eps}: {dev}");
    }
}

#[test]
fn zca_applies_to_image_batches() {
    let x = correlated_samples(300, 12, 2).reshape([300, 3, 2, 2]).unwrap();
    let t = ZcaTransform::fit(&x, 1e-2).unwrap();
    let y = t.apply(&x).unwrap();
    assert_eq!(y.shape(), x.shape());
    let cov = covariance(&y);
    for i in 0..12 {
        assert!(cov[i * 13] <= 1.0 + 1e-9);
        assert!(cov[i * 13] > 0.5);
    }
    assert!(t.apply(&Tensor::zeros([2, 5])).is_err());
}

#[test]
fn gcn_then_zca_pipeline_is_deterministic() {
    let data = toy_dataset(ToyKind::BlobDigits, 200, 4).unwrap();
    let run = || {
        let g = gcn(&data.images, GCN_EPSILON).unwrap();
        ZcaTransform::fit(&g, 1e-2).unwrap().apply(&g).unwrap()
    };
    assert_eq!(run(), run());
}

/// Least-squares one-vs-rest linear classifier on raw pixels plus a bias.
fn linear_probe_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let k = train.classes;
    let d = train.images.len() / train.len() + 1;
    let design = |data: &Dataset| {
        let n = data.len();
        let mut rows = Vec::with_capacity(n * d);
        for img in data.images.data().chunks(d - 1) {
            rows.extend_from_slice(img);
            rows.push(1.0);
        }
        nalgebra::DMatrix::from_row_slice(n, d, &rows)
    };
    let x = design(train);
    let mut y = nalgebra::DMatrix::zeros(train.len(), k);
    for (i, &l) in train.labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    let gram = x.transpose() * &x + nalgebra::DMatrix::identity(d, d) * 1e-3;
    let w = gram.cholesky().unwrap().solve(&(x.transpose() * y));
    let scores = design(test) * w;
    let correct = (0..test.len())
        .filter(|&i| {
            let row = scores.row(i);
            let best = (0..k).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            best == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn linear_probe_separates_blob_digits() {
    let cfg = ToyConfig { margin: 1.0, ..ToyConfig::default() };
    let train = toy_dataset_with(&cfg, 2000, 1).unwrap();
    let test = toy_dataset_with(&cfg, 1000, 2).unwrap();
    let acc = linear_probe_accuracy(&train, &test);
    assert!(acc >= 0.95, "{acc}");
}
