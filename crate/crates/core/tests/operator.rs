mod common;

use common::*;
use fad_core::{diag_s, DataSet, FileFormat, ImplicitW, ScaleMode};
use ndarray::{array, Array2};
use proptest::prelude::*;

const MODES: [ScaleMode; 2] = [ScaleMode::Correlation, ScaleMode::Covariance];

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE)).min(num.sqrt())
}

#[test]
fn first_basis_vector_of_integer_instance() {
    let data = DataSet::new(array![[1.0, 2.0, 0.0], [4.0, 0.0, 1.0], [2.0, 2.0, 5.0], [7.0, 1.0, 3.0]]).unwrap();
    let psi = [1.0; 3];
    let w = ImplicitW::new(&data, &psi, ScaleMode::Covariance).unwrap();
    let got = w.w_times(&[1.0, 0.0, 0.0]).unwrap();
    let want = dense_w(&data, &psi, ScaleMode::Covariance).column(0).to_vec();
    for (g, e) in got.iter().zip(&want) {
        assert!((g - e).abs() < 1e-14);
    }
    // column 0 has mean 3.5 and n = 4
    assert!((got[0] - (1.0 - 3.5) / 2.0).abs() < 1e-15);
}

#[test]
fn explicit_columns_reproduce_dense_w() {
    let mut r = rng(1);
    for &(n, p) in &[(10, 7), (25, 40), (60, 3)] {
        let data = DataSet::new(gaussian(&mut r, n, p)).unwrap();
        let psi = random_psi(&mut r, p, 0.1, 1.0);
        for mode in MODES {
            let w = ImplicitW::new(&data, &psi, mode).unwrap();
            let dense = dense_w(&data, &psi, mode);
            let mut e = vec![0.0; p];
            for j in 0..p {
                e[j] = 1.0;
                let col = w.w_times(&e).unwrap();
                e[j] = 0.0;
                assert!(rel_err(&col, &dense.column(j).to_vec()) < 1e-12);
            }
            let u = gaussian(&mut r, n, 1).column(0).to_vec();
            let wt = w.wt_times(&u).unwrap();
            let want = dense.t().dot(&ndarray::Array1::from(u)).to_vec();
            assert!(rel_err(&wt, &want) < 1e-12);
        }
    }
}

#[test]
fn block_products_match_vector_products() {
    let mut r = rng(2);
    let data = DataSet::new(gaussian(&mut r, 15, 9)).unwrap();
    let psi = random_psi(&mut r, 9, 0.2, 1.0);
    let w = ImplicitW::new(&data, &psi, ScaleMode::Correlation).unwrap();
    let dense = dense_w(&data, &psi, ScaleMode::Correlation);
    let t = gaussian(&mut r, 9, 3);
    let u = gaussian(&mut r, 15, 2);
    assert!(rel_mat(&w.w_times_block(t.view()), &dense.dot(&t)) < 1e-12);
    assert!(rel_mat(&w.wt_times_block(u.view()), &dense.t().dot(&u)) < 1e-12);
}

#[test]
fn diag_s_matches_dense_covariance() {
    let mut r = rng(3);
    let data = DataSet::new(gaussian(&mut r, 20, 15)).unwrap();
    let s = dense_s(&data, ScaleMode::Covariance);
    let d = diag_s(&data, ScaleMode::Covariance);
    for j in 0..15 {
        assert!((d[j] - s[[j, j]]).abs() < 1e-12 * s[[j, j]]);
    }
    assert!(diag_s(&data, ScaleMode::Correlation).iter().all(|&v| v == 1.0));
    let two = DataSet::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
    assert_eq!(diag_s(&two, ScaleMode::Covariance), vec![1.0, 1.0]);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let data = DataSet::new(array![[1.0, 2.0], [3.0, 5.0], [0.0, 1.0]]).unwrap();
    let w = ImplicitW::unweighted(&data, ScaleMode::Covariance);
    assert!(w.w_times(&[1.0]).is_err());
    assert!(w.wt_times(&[1.0, 2.0]).is_err());
    assert!(ImplicitW::new(&data, &[1.0], ScaleMode::Covariance).is_err());
}

#[test]
fn csv_and_binary_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("two.csv");
    std::fs::write(&csv, "1,2\n3,4\n").unwrap();
    let d = DataSet::ingest(&csv, FileFormat::from_path(&csv, false)).unwrap();
    assert_eq!((d.n(), d.p()), (2, 2));
    assert_eq!(d.col_mean(), &[2.0, 3.0]);
    assert_eq!(d.col_sd(), &[1.0, 1.0]);

    let constant = dir.path().join("constant.csv");
    std::fs::write(&constant, "1,5\n2,5\n4,5\n").unwrap();
    let err = DataSet::ingest(&constant, FileFormat::Csv { header: false }).unwrap_err();
    assert!(err.to_string().contains("column 2"), "{err}");

    let mut r = rng(4);
    let values = gaussian(&mut r, 50, 200);
    let bin = dir.path().join("m.fadm");
    DataSet::new(values.clone()).unwrap().write_binary(&bin).unwrap();
    let back = DataSet::ingest(&bin, FileFormat::from_path(&bin, false)).unwrap();
    assert!(back.values().iter().zip(values.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn truncated_binary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("m.bin");
    DataSet::new(array![[1.0, 2.0], [3.0, 5.0]]).unwrap().write_binary(&bin).unwrap();
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    assert!(DataSet::ingest(&bin, FileFormat::Binary).is_err());
}

fn instance() -> impl Strategy<Value = (Array2<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..12, 1usize..10).prop_flat_map(|(n, p)| {
        (
            proptest::collection::vec(-10.0f64..10.0, n * p)
                .prop_map(move |v| Array2::from_shape_vec((n, p), v).unwrap()),
            proptest::collection::vec(0.01f64..2.0, p),
            proptest::collection::vec(-1.0f64..1.0, p),
            proptest::collection::vec(-1.0f64..1.0, n),
        )
    })
}

proptest! {
    #![proptest_config(cases(100))]

    #[test]
    fn adjoint_identity((y, psi, v, u) in instance()) {
        let Ok(data) = DataSet::new(y) else { return Ok(()) };
        for mode in MODES {
            let w = ImplicitW::new(&data, &psi, mode).unwrap();
            let wv = w.w_times(&v).unwrap();
            let wtu = w.wt_times(&u).unwrap();
            let lhs: f64 = u.iter().zip(&wv).map(|(a, b)| a * b).sum();
            let rhs: f64 = wtu.iter().zip(&v).map(|(a, b)| a * b).sum();
            let scale: f64 = u.iter().zip(&wv).map(|(a, b)| (a * b).abs()).sum::<f64>().max(1e-300);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale, "{} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn linearity_and_zero((y, psi, v, _u) in instance()) {
        let Ok(data) = DataSet::new(y) else { return Ok(()) };
        let w = ImplicitW::new(&data, &psi, ScaleMode::Correlation).unwrap();
        prop_assert!(w.w_times(&vec![0.0; v.len()]).unwrap().iter().all(|&x| x == 0.0));
        prop_assert!(w.wt_times(&vec![0.0; data.n()]).unwrap().iter().all(|&x| x == 0.0));
        let a = w.w_times(&v).unwrap();
        let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        let b = w.w_times(&v3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((3.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn moments_are_cached_correctly((y, _psi, _v, _u) in instance()) {
        let Ok(data) = DataSet::new(y.clone()) else { return Ok(()) };
        let n = y.nrows() as f64;
        for j in 0..y.ncols() {
            let col = y.column(j);
            let mean = col.sum() / n;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!((data.col_mean()[j] - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
            prop_assert!((data.col_sd()[j] - sd).abs() <= 1e-12 * sd);
        }
    }
}
