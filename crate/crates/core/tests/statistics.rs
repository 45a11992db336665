use espresso::synthbench::stats::REFERENCE_TABLES;
use espresso::synthbench::{compression_sweep, parse_metric_csv, pearson, SweepAxis};
use proptest::prelude::*;

fn data_file(name: &str) -> String {
    let path = format!("{}/data/{name}.csv", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(path).unwrap()
}

proptest! {
    #[test]
    fn pearson_ignores_positive_affine_maps(
        xs in prop::collection::vec(-100.0f64..100.0, 3..20),
        noise in prop::collection::vec(-10.0f64..10.0, 20),
        a in 0.01f64..50.0,
        b in -100.0f64..100.0,
        c in 0.01f64..50.0,
        d in -100.0f64..100.0,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| 0.5 * x + e).collect();
        prop_assume!(pearson(&xs, &ys).is_ok());
        let r = pearson(&xs, &ys).unwrap();
        let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let ys2: Vec<f64> = ys.iter().map(|y| c * y + d).collect();
        let r2 = pearson(&xs2, &ys2).unwrap();
        prop_assert!((r - r2).abs() < 1e-9, "{} vs {}", r, r2);
        prop_assert!((-1.0..=1.0).contains(&r));
        let flipped: Vec<f64> = ys.iter().map(|y| -y).collect();
        prop_assert!((pearson(&xs, &flipped).unwrap() + r).abs() < 1e-12);
    }
}

#[test]
fn shipped_tables_match_built_in_tables() {
    for table in REFERENCE_TABLES {
        let (axis, values, metrics) = parse_metric_csv(&data_file(table.name), None).unwrap();
        assert_eq!(axis, table.axis);
        assert_eq!(values, table.values);
        assert_eq!(metrics, table.metrics);
    }
}

#[test]
fn sweep_uses_negative_log_rate_for_query_counts() {
    let mut seen = Vec::new();
    let s = compression_sweep(SweepAxis::Spatial, &[16.0, 4.0, 1.0], |v| {
        seen.push(v);
        Ok(v.sqrt())
    })
    .unwrap();
    assert_eq!(seen, [16.0, 4.0, 1.0]);
    assert_eq!(s.rows[2].rate, -0.0f64);
    assert!((s.rows[0].rate + 16f64.ln()).abs() < 1e-15);
    assert!(s.r < -0.9);
    assert!(compression_sweep(SweepAxis::Temporal, &[4.0, 0.0], |_| Ok(1.0)).is_err());
    assert!(compression_sweep(SweepAxis::Segments, &[1.0], |_| Ok(1.0)).is_err());
}
