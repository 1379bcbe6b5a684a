mod common;

use camlabel_core::metrics::{aggregate, percent, relative_time_saving, tallies_from_csv, SavingBandTally};
use common::percent_oracle;
use proptest::prelude::*;

/// Published band counts per class: (class, N, g95, g75, g50, reported percent).
const TABLE: [(&str, u64, u64, u64, u64, i64); 3] =
    [("crack", 111, 19, 40, 30, 57), ("spalling", 65, 17, 19, 14, 58), ("rust", 89, 22, 14, 9, 40)];
const ALL_ROW: (u64, u64, u64, u64, i64) = (265, 58, 73, 53, 51);

fn tallies() -> Vec<SavingBandTally> {
    TABLE.iter().map(|&(c, n, a, b, d, _)| SavingBandTally::new(c, n, a, b, d)).collect()
}

#[test]
fn published_rows_reproduce() {
    let report = aggregate(&tallies()).unwrap();
    for (row, &(class, n, g95, g75, g50, reported)) in report.classes.iter().zip(&TABLE) {
        assert_eq!(row.tally.defect_class, class);
        assert_eq!(row.time_saved_percent, reported, "{class}");
        assert_eq!(row.time_saved_percent, percent_oracle(n, g95, g75, g50), "{class}");
    }
    let all = &report.all;
    assert_eq!((all.tally.instance_count, all.tally.g95, all.tally.g75, all.tally.g50), (ALL_ROW.0, ALL_ROW.1, ALL_ROW.2, ALL_ROW.3));
    assert_eq!(all.time_saved_percent, ALL_ROW.4);
    assert!((all.relative_time_saving - 136.35 / 265.0).abs() < 1e-12);
    assert!((report.classes[0].relative_time_saving - 63.05 / 111.0).abs() < 1e-12);
}

#[test]
fn overall_is_not_the_mean_of_class_savings() {
    let report = aggregate(&tallies()).unwrap();
    let mean = report.classes.iter().map(|r| r.relative_time_saving).sum::<f64>() / 3.0;
    assert_eq!(percent(mean), 52);
    assert_eq!(report.all.time_saved_percent, 51);
}

#[test]
fn report_csv_mirrors_the_table() {
    let csv = aggregate(&tallies()).unwrap().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "defect,instance_count,95,75,50,time_saved_percent,relative_time_saving");
    assert!(lines[1].starts_with("crack,111,19,40,30,57,"));
    assert!(lines[2].starts_with("spalling,65,17,19,14,58,"));
    assert!(lines[3].starts_with("rust,89,22,14,9,40,"));
    assert!(lines[4].starts_with("all,265,58,73,53,51,"));
    assert_eq!(tallies_from_csv(&csv).unwrap(), tallies());
}

#[test]
fn all_zero_bands_give_zero() {
    assert_eq!(relative_time_saving(&SavingBandTally::new("crack", 10, 0, 0, 0)).unwrap(), 0.0);
}

fn tally_strategy() -> impl Strategy<Value = SavingBandTally> {
    (1u64..500).prop_flat_map(|n| {
        (Just(n), 0..=n).prop_flat_map(|(n, a)| {
            (Just(n), Just(a), 0..=n - a).prop_flat_map(|(n, a, b)| {
                (0..=n - a - b).prop_map(move |c| SavingBandTally::new("x", n, a, b, c))
            })
        })
    })
}

proptest! {
    #[test]
    fn saving_is_bounded(t in tally_strategy()) {
        let s = relative_time_saving(&t).unwrap();
        prop_assert!((0.0..=0.95).contains(&s));
        prop_assert_eq!(percent(s), percent_oracle(t.instance_count, t.g95, t.g75, t.g50));
    }

    #[test]
    fn promoting_an_instance_never_lowers_saving(t in tally_strategy(), band in 0usize..3) {
        let before = relative_time_saving(&t).unwrap();
        let rest = t.instance_count - t.g95 - t.g75 - t.g50;
        let mut u = t.clone();
        let moved = match band {
            0 if rest > 0 => { u.g50 += 1; true }
            1 if u.g50 > 0 => { u.g50 -= 1; u.g75 += 1; true }
            2 if u.g75 > 0 => { u.g75 -= 1; u.g95 += 1; true }
            _ => false,
        };
        prop_assume!(moved);
        prop_assert!(relative_time_saving(&u).unwrap() >= before);
    }

    #[test]
    fn aggregate_uses_summed_counts(a in tally_strategy(), b in tally_strategy()) {
        let a = SavingBandTally { defect_class: "a".into(), ..a };
        let b = SavingBandTally { defect_class: "b".into(), ..b };
        let report = aggregate(&[a.clone(), b.clone()]).unwrap();
        let summed = SavingBandTally::new("all", a.instance_count + b.instance_count, a.g95 + b.g95, a.g75 + b.g75, a.g50 + b.g50);
        prop_assert_eq!(&report.all.tally, &summed);
        prop_assert_eq!(report.all.relative_time_saving, relative_time_saving(&summed).unwrap());
    }
}
