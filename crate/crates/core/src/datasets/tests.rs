use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use super::*;
use crate::geometry::norm;

fn tiny_dataset() -> LabeledDataset {
    gen_dataset(2, 40, 5, 0.5).unwrap().0
}

#[test]
fn exact_sphere_has_unit_norms() {
    for n in [32, 33, 257] {
        let c = gen_shape_with(ShapeClass::Sphere, n, 9, ShapeOptions::exact()).unwrap();
        assert_eq!(c.len(), n);
        for p in c.points() {
            assert!((norm(&p.map(f64::from)) - 1.0).abs() <= 1e-6);
        }
    }
    let rotated = ShapeOptions {
        rotation: true,
        ..ShapeOptions::exact()
    };
    let c = gen_shape_with(ShapeClass::Sphere, 64, 9, rotated).unwrap();
    assert!(c.points().iter().all(|p| (norm(&p.map(f64::from)) - 1.0).abs() <= 1e-6));
}

/// Smallest-eigenvalue direction of the covariance gives the best-fit plane.
fn plane_residuals(points: &[[f32; 3]]) -> Vec<f64> {
    let n = points.len() as f64;
    let mean = (0..3).map(|k| points.iter().map(|p| f64::from(p[k])).sum::<f64>() / n).collect::<Vec<_>>();
    let centered = DMatrix::from_fn(points.len(), 3, |i, k| f64::from(points[i][k]) - mean[k]);
    let cov = centered.transpose() * &centered;
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let normal = eig.eigenvectors.column(imin);
    (0..points.len())
        .map(|i| (0..3).map(|k| centered[(i, k)] * normal[k]).sum::<f64>().abs())
        .collect()
}

#[test]
fn planes_stay_within_the_jitter_bound() {
    for seed in 0..20 {
        let c = gen_shape(ShapeClass::Plane, 256, seed).unwrap();
        let worst = plane_residuals(c.points()).into_iter().fold(0.0, f64::max);
        assert!(worst < 0.02, "seed {seed}: {worst}");
    }
    let thick = gen_shape(ShapeClass::Box, 256, 0).unwrap();
    assert!(plane_residuals(thick.points()).into_iter().fold(0.0, f64::max) > 0.1);
}

#[test]
fn shapes_are_deterministic_normalized_and_seed_dependent() {
    for class in ShapeClass::ALL {
        let a = gen_shape(class, 128, 3).unwrap();
        assert_eq!(a, gen_shape(class, 128, 3).unwrap());
        assert_ne!(a, gen_shape(class, 128, 4).unwrap());
        assert_eq!(a.len(), 128);
        assert!(a.max_norm() <= 1.0 + 1e-6);
        let c = a.centroid();
        assert!(norm(&c) < 1e-6, "{class}: {c:?}");
        assert_eq!(class.name().parse::<ShapeClass>().unwrap(), class);
    }
    assert!(gen_shape(ShapeClass::Torus, 31, 0).is_err());
    assert!("blob".parse::<ShapeClass>().is_err());
}

#[test]
fn dataset_split_arithmetic_and_balance() {
    let (train, test) = gen_dataset(10, 32, 1, 0.8).unwrap();
    assert_eq!((train.len(), test.len()), (64, 16));
    assert_eq!(test.class_counts(), vec![2; 8]);
    assert_eq!(train.class_counts(), vec![8; 8]);
    assert_eq!(train.class_names[4], "torus");
    // Class label c, within-class index i -> seed 1 ^ (c * 10 + i).
    assert_eq!(train.clouds[0], gen_shape(ShapeClass::Sphere, 32, 1).unwrap());
    assert_eq!(test.clouds[9], gen_shape(ShapeClass::Box, 32, 1 ^ 19).unwrap());
    assert_eq!(test.ids[9], "box_0009");
    let mut ids = train.ids.clone();
    ids.extend(test.ids.clone());
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 80);
    assert!(gen_dataset(1, 32, 0, 0.5).is_err());
}

#[test]
fn full_size_split_counts() {
    let (train, test) = gen_dataset(100, 32, 0, 0.8).unwrap();
    assert_eq!((train.len(), test.len()), (640, 160));
    assert!(test.class_counts().iter().all(|&c| c == 20));
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn xyz_examples() {
    let dir = tempfile::tempdir().unwrap();
    let c = read_xyz(&write(dir.path(), "a.xyz", "0 0 0\n1 0 0")).unwrap();
    assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    let c = read_xyz(&write(dir.path(), "b.xyz", "# c\n\n1 2 3")).unwrap();
    assert_eq!(c.points(), &[[1.0, 2.0, 3.0]]);
}

#[test]
fn xyz_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    for (text, line) in [("0 0 0\n1 2\n", 2), ("# x\n0 0 nan\n", 2), ("1 1 1\n\n0 inf 0", 3), ("a b c", 1)] {
        match read_xyz(&write(dir.path(), "bad.xyz", text)) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    assert!(matches!(read_xyz(&write(dir.path(), "empty.xyz", "# only\n")), Err(Error::Format(_))));
    assert!(matches!(read_xyz(&dir.path().join("none.xyz")), Err(Error::Io { .. })));
}

#[test]
fn xyz_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let c = gen_shape(ShapeClass::Helix, 200, 11).unwrap();
    let p = dir.path().join("h.xyz");
    write_xyz(&c, &p).unwrap();
    let back = read_xyz(&p).unwrap();
    for (a, b) in c.points().iter().zip(back.points()) {
        for k in 0..3 {
            assert!((f64::from(a[k]) - f64::from(b[k])).abs() <= 1e-9);
        }
    }
}

#[test]
fn manifest_and_spcd_round_trip_to_equal_values() {
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let mdir = dir.path().join("m");
    save_dataset(&ds, &mdir, DatasetFormat::Manifest).unwrap();
    let spcd = dir.path().join("d.spcd");
    save_dataset(&ds, &spcd, DatasetFormat::Spcd).unwrap();
    let from_manifest = load_dataset(&mdir).unwrap();
    let from_spcd = load_dataset(&spcd).unwrap();
    assert_eq!(from_manifest, ds);
    assert_eq!(from_spcd, ds);
    assert_eq!(std::fs::read_dir(&mdir).unwrap().count(), ds.len() + 1);
}

#[test]
fn manifest_order_defines_sample_order() {
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path(), DatasetFormat::Manifest).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["entries"].as_array_mut().unwrap().reverse();
    std::fs::write(&path, v.to_string()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    let mut ids = ds.ids.clone();
    ids.reverse();
    assert_eq!(back.ids, ids);
}

#[test]
fn manifest_with_missing_file_names_it() {
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path(), DatasetFormat::Manifest).unwrap();
    std::fs::remove_file(dir.path().join(format!("{}.xyz", ds.ids[3]))).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Format(m)) => assert!(m.contains(&ds.ids[3]), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn damaged_spcd_files_are_format_errors() {
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.spcd");
    write_spcd(&ds, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    for cut in [2, 10, 30, bytes.len() - 1] {
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(read_spcd(&p), Err(Error::Format(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'Q';
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(read_spcd(&p), Err(Error::Format(_))));
    let mut nan = bytes.clone();
    let at = nan.len() - 4;
    nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&p, &nan).unwrap();
    assert!(matches!(read_spcd(&p), Err(Error::Format(_))));
}

fn row(acc: f64) -> MetricsRow {
    MetricsRow {
        config: "base, \"quoted\"".into(),
        corruption: "gaussian-noise".into(),
        severity: 5,
        mode: "online-bn".into(),
        views: 48,
        samples: 160,
        skipped: 0,
        accuracy: acc,
        samples_per_second: 12.5,
        samples_per_second_std: 0.25,
    }
}

#[test]
fn metrics_csv_format_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    write_metrics(&[], &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), METRICS_HEADER.join(",") + "\n");
    assert!(read_metrics(&p).unwrap().is_empty());

    let rows = vec![row(0.8125), row(1.0 / 3.0)];
    write_metrics(&rows, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.contains(",0.8125,"));
    assert!(text.contains(",0.3333,"));
    assert!(text.contains("\"base, \"\"quoted\"\"\""));
    let back = read_metrics(&p).unwrap();
    assert_eq!(back[0], rows[0]);
    assert_eq!(back[1].accuracy, 0.3333);
    assert_eq!(back[1].config, rows[1].config);
}

#[test]
fn run_config_json_round_trips_and_rejects_unknown_keys() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    let partial = RunConfig::from_json(r#"{"epochs": 3, "model": {"width": 32}}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.model.width, 32);
    assert_eq!(partial.model.patches, 32);
    assert!(matches!(RunConfig::from_json(r#"{"epoch": 3}"#), Err(Error::Format(_))));
    assert!(matches!(RunConfig::from_json(r#"{"model": {"widht": 3}}"#), Err(Error::Format(_))));
    assert!(matches!(
        RunConfig::from_json(r#"{"adapt": {"mode": "online-bn", "momentum": 2.0}}"#),
        Err(Error::InvalidArgument(_))
    ));
    let modes = RunConfig::from_json(r#"{"adapt": {"mode": "standard", "augmentation": "hflip"}}"#).unwrap();
    assert_eq!(modes.adapt.iterations(), 20);
    assert_eq!(modes.adapt.augmentation, Augmentation::Hflip);
    assert_eq!("online-bp".parse::<AdaptMode>().unwrap(), AdaptMode::OnlineBp);
}
