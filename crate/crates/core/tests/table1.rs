//! The published score cells against the published estimates once the
//! rounding of the estimates is taken into account: every cell lies within
//! 0.005 of the score of some estimate that rounds to the printed one.

mod common;

use arphmm::{percentage_error, timeliness};
use common::fixture;

/// Half a unit in the last printed decimal.
fn half_ulp(cell: &str) -> f64 {
    let decimals = cell.split('.').nth(1).map_or(0, str::len);
    0.5 * 10f64.powi(-(decimals as i32))
}

#[test]
fn every_cell_is_consistent_with_a_rounded_estimate() {
    let text = std::fs::read_to_string(fixture("table1.csv")).unwrap();
    let mut checked = 0;
    for line in text.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let truth: f64 = c[2].parse().unwrap();
        for m in 0..3 {
            let (hat, s, pct) = (c[3 + 3 * m], c[4 + 3 * m], c[5 + 3 * m]);
            let h: f64 = hat.parse().unwrap();
            let (lo, hi) = (h - half_ulp(hat), h + half_ulp(hat));
            let s_range = [timeliness(lo - truth), timeliness(hi - truth)];
            let p_range = [
                percentage_error(truth, lo).unwrap(),
                percentage_error(truth, hi).unwrap(),
            ];
            for (printed, range) in [(s, s_range), (pct, p_range)] {
                let v: f64 = printed.parse().unwrap();
                let tol = 0.005;
                // both scores are monotone in the estimate on each side of the truth
                let (a, b) = if range[0] <= range[1] {
                    (range[0], range[1])
                } else {
                    (range[1], range[0])
                };
                let a = if (lo - truth) * (hi - truth) < 0.0 { 0.0 } else { a };
                assert!(
                    a - tol <= v && v <= b + tol,
                    "line {line}: {printed} outside [{a}, {b}]"
                );
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 90);
}
