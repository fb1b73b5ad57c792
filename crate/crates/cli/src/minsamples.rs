//! Evaluation counts needed by each method as the input dimension grows.

use std::ops::RangeInclusive;

use std::path::Path;

use apc::apc_basis::basis_cardinality;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{write_csv, Provenance};
use crate::error::CliError;

/// Points of the level-`level` Smolyak grid in `dim` dimensions built on
/// nested Clenshaw-Curtis rules (1, 3, 5, 9, 17, ... points per level).
pub fn smolyak_points(dim: usize, level: usize) -> u128 {
    // New points contributed by univariate level i.
    let delta = |i: usize| -> u128 {
        match i {
            0 => 1,
            1 => 2,
            _ => 1u128 << (i - 1),
        }
    };
    // by_level[l]: points over the dimensions so far with level sum exactly l.
    let mut by_level = vec![0u128; level + 1];
    by_level[0] = 1;
    for _ in 0..dim {
        let mut next = vec![0u128; level + 1];
        for (l, &n) in by_level.iter().enumerate() {
            for (i, slot) in next.iter_mut().enumerate().skip(l) {
                *slot += n * delta(i - l);
            }
        }
        by_level = next;
    }
    by_level.iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountMethod {
    Sear,
    Wlsq,
    Smolyak,
}

impl CountMethod {
    pub fn name(self) -> &'static str {
        match self {
            CountMethod::Sear => "sear",
            CountMethod::Wlsq => "wlsq",
            CountMethod::Smolyak => "smolyak",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinSamplesRow {
    pub n_u: usize,
    pub p: usize,
    pub method: CountMethod,
    pub count: u128,
}

/// `n_o (P+1)` evaluations without gradients, `ceil(n_o (P+1) / (n_u+1))`
/// with them, and the level-`p` sparse grid for comparison.
pub fn min_samples_figure(n_u: RangeInclusive<usize>, orders: &[usize], n_o: usize) -> Vec<MinSamplesRow> {
    let mut rows = Vec::new();
    for d in n_u {
        for &p in orders {
            let terms = basis_cardinality(d, p).expect("cardinality fits in u128");
            let q_a = n_o as u128 * terms;
            let q = q_a.div_ceil(d as u128 + 1);
            for (method, count) in [
                (CountMethod::Sear, q),
                (CountMethod::Wlsq, q_a),
                (CountMethod::Smolyak, smolyak_points(d, p)),
            ] {
                rows.push(MinSamplesRow {
                    n_u: d,
                    p,
                    method,
                    count,
                });
            }
        }
    }
    rows
}

/// Write the figure data as `n_u,p,method,count` and return the row count.
pub fn write_min_samples(
    path: &Path,
    n_u: RangeInclusive<usize>,
    orders: &[usize],
    n_o: usize,
) -> Result<usize, CliError> {
    let params = serde_json::json!({
        "n_u_min": n_u.start(),
        "n_u_max": n_u.end(),
        "orders": orders,
        "n_o": n_o,
    });
    let prov = Provenance {
        config_sha256: hex::encode(Sha256::digest(params.to_string())),
        seed: 0,
    };
    let rows = min_samples_figure(n_u, orders, n_o);
    write_csv(
        path,
        &prov,
        &["n_u", "p", "method", "count"],
        rows.iter().map(|r| {
            vec![
                r.n_u.to_string(),
                r.p.to_string(),
                r.method.name().to_string(),
                r.count.to_string(),
            ]
        }),
    )?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_levels_match_closed_forms() {
        for d in 1..40usize {
            let d128 = d as u128;
            assert_eq!(smolyak_points(d, 0), 1);
            assert_eq!(smolyak_points(d, 1), 2 * d128 + 1);
            assert_eq!(smolyak_points(d, 2), 2 * d128 * d128 + 2 * d128 + 1);
        }
    }

    #[test]
    fn one_dimension_is_the_clenshaw_curtis_rule() {
        for (level, n) in [(0, 1), (1, 3), (2, 5), (3, 9), (4, 17)] {
            assert_eq!(smolyak_points(1, level), n);
        }
    }

    #[test]
    fn two_dimensional_level_three() {
        // Enumerate (i, j) with i + j <= 3 directly.
        let delta = [1u128, 2, 2, 4];
        let mut n = 0;
        for i in 0..=3 {
            for j in 0..=3 - i {
                n += delta[i] * delta[j];
            }
        }
        assert_eq!(smolyak_points(2, 3), n);
    }

    fn count(rows: &[MinSamplesRow], n_u: usize, p: usize, m: CountMethod) -> u128 {
        rows.iter()
            .find(|r| r.n_u == n_u && r.p == p && r.method == m)
            .unwrap()
            .count
    }

    #[test]
    fn first_order_gradient_count_is_the_oversampling_ratio() {
        let rows = min_samples_figure(1..=60, &[1], 2);
        assert!(rows
            .iter()
            .filter(|r| r.method == CountMethod::Sear)
            .all(|r| r.count == 2));
    }

    #[test]
    fn table_counts() {
        let rows = min_samples_figure(10..=10, &[1, 2, 3], 2);
        let sear: Vec<u128> = (1..=3).map(|p| count(&rows, 10, p, CountMethod::Sear)).collect();
        let wlsq: Vec<u128> = (1..=3).map(|p| count(&rows, 10, p, CountMethod::Wlsq)).collect();
        assert_eq!(sear, [2, 12, 52]);
        assert_eq!(wlsq, [22, 132, 572]);
    }

    #[test]
    fn gradient_count_grows_like_a_power_of_dimension() {
        let rows = min_samples_figure(50..=100, &[2, 3], 2);
        for p in [2, 3] {
            let ratio = count(&rows, 100, p, CountMethod::Sear) as f64 / count(&rows, 50, p, CountMethod::Sear) as f64;
            let expected = 2f64.powi(p as i32 - 1);
            assert!((ratio / expected - 1.0).abs() <= 0.2, "p={p}: ratio {ratio}");
        }
    }
}
