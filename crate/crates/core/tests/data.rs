use std::fs;

use proptest::prelude::*;
use unravel_core::data::{desk_task, gen_spirals, load_csv, split};
use unravel_core::Error;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_with_stratification(per_class in 2usize..40, classes in 2usize..5, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let all = gen_spirals(per_class, classes, 0.1, seed).unwrap();
        let (tr, te) = split(&all, frac, seed ^ 1).unwrap();
        prop_assert_eq!(tr.len() + te.len(), all.len());

        let key = |d: &unravel_core::data::Dataset| {
            let mut rows: Vec<(Vec<u64>, usize)> = (0..d.len())
                .map(|i| (d.features.row(i).iter().map(|v| v.to_bits()).collect(), d.labels[i]))
                .collect();
            rows.sort();
            rows
        };
        let mut joined = key(&tr);
        joined.extend(key(&te));
        joined.sort();
        prop_assert_eq!(joined, key(&all));

        for c in 0..classes {
            let want = per_class as f64 * frac;
            let got = te.class_counts()[c] as f64;
            prop_assert!((got - want).abs() <= 1.0, "class {} got {} want {}", c, got, want);
        }
    }

    #[test]
    fn csv_round_trip(per_class in 1usize..20, seed in any::<u64>()) {
        let d = gen_spirals(per_class, 3, 0.2, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        d.save_csv(&path).unwrap();
        let back = load_csv(&path).unwrap();
        prop_assert_eq!(&back.labels, &d.labels);
        prop_assert_eq!(back.classes, d.classes);
        for (a, b) in back.features.data().iter().zip(d.features.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn desk_task_shape() {
    let (tr, te) = desk_task(3).unwrap();
    assert_eq!(tr.len(), 3000);
    assert_eq!(te.len(), 1002);
    assert_eq!(te.class_counts(), vec![334, 334, 334]);
    assert!((te.chance_error() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(desk_task(3).unwrap(), (tr, te));
}

#[test]
fn noiseless_arms_are_separate_curves() {
    let d = gen_spirals(200, 2, 0.0, 1).unwrap();
    // points on different arms never coincide
    let mut closest = f64::MAX;
    for i in 0..d.len() {
        for j in 0..d.len() {
            if d.labels[i] != d.labels[j] {
                let (a, b) = (d.features.row(i), d.features.row(j));
                closest = closest.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
    }
    assert!(closest > 1e-3, "{closest}");
}

#[test]
fn bad_files_name_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "f0,f1,label\n0.1,0.2,0\n0.3,1\n").unwrap();
    match load_csv(&path) {
        Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
        other => panic!("{other:?}"),
    }
    fs::write(&path, "f0,f1,label\n0.1,0.2,-1\n").unwrap();
    assert!(load_csv(&path).unwrap_err().to_string().contains("row 1"));
    fs::write(&path, "f0,f1,label\n0.1,0.2,0\n0.3,0.4,1\n").unwrap();
    assert_eq!(load_csv(&path).unwrap().len(), 2);
    assert!(load_csv(dir.path().join("missing.csv")).is_err());
}

#[test]
fn invalid_arguments() {
    assert!(gen_spirals(0, 3, 0.1, 1).is_err());
    assert!(gen_spirals(5, 1, 0.1, 1).is_err());
    assert!(gen_spirals(5, 3, -0.1, 1).is_err());
    let d = gen_spirals(5, 3, 0.1, 1).unwrap();
    assert!(split(&d, 0.0, 1).is_err());
    assert!(split(&d, 1.0, 1).is_err());
    assert!(split(&gen_spirals(1, 3, 0.1, 1).unwrap(), 0.5, 1).is_err());
}
