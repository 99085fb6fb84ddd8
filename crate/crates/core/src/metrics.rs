//! Throughput and precision-alignment metrics.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("non-positive input: {0}")]
    NonPositive(&'static str),
    #[error("series lengths differ: {reference} vs {candidate}")]
    LengthMismatch { reference: usize, candidate: usize },
    #[error("empty series")]
    Empty,
    #[error("reference value at index {0} is zero")]
    ZeroReference(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Heterogeneous throughput over the sum of per-type homogeneous throughputs:
/// `N * tgs / sum_i N_i * TGS_i`.
pub fn hetero_speedup_ratio(
    hetero_tgs: f64,
    total_chips: usize,
    baselines: &[(usize, f64)],
) -> Result<f64, MetricsError> {
    if !(hetero_tgs > 0.0) {
        return Err(MetricsError::NonPositive("hetero_tgs"));
    }
    if total_chips == 0 {
        return Err(MetricsError::NonPositive("total_chips"));
    }
    let mut denom = 0.0;
    for &(n, tgs) in baselines {
        if n == 0 || !(tgs > 0.0) {
            return Err(MetricsError::NonPositive("baseline"));
        }
        denom += n as f64 * tgs;
    }
    if denom == 0.0 {
        return Err(MetricsError::ZeroDenominator);
    }
    Ok(total_chips as f64 * hetero_tgs / denom)
}

/// Tokens per chip per second for one iteration over `chips` chips.
pub fn tokens_per_chip_second(
    global_batch: usize,
    sequence_length: usize,
    iteration_time: f64,
    chips: usize,
) -> f64 {
    (global_batch * sequence_length) as f64 / (iteration_time * chips as f64)
}

/// `mean_i |y_i - yhat_i| / |y_i|`.
pub fn mean_relative_error(reference: &[f64], candidate: &[f64]) -> Result<f64, MetricsError> {
    if reference.len() != candidate.len() {
        return Err(MetricsError::LengthMismatch {
            reference: reference.len(),
            candidate: candidate.len(),
        });
    }
    if reference.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sum = 0.0;
    for (i, (y, yh)) in reference.iter().zip(candidate).enumerate() {
        if *y == 0.0 {
            return Err(MetricsError::ZeroReference(i));
        }
        sum += (y - yh).abs() / y.abs();
    }
    Ok(sum / reference.len() as f64)
}

/// Reads `(iteration, value)` rows separated by commas, tabs or spaces.
/// Blank lines, `#` comments and a non-numeric header row are skipped.
pub fn parse_series(text: &str) -> Result<Vec<(f64, f64)>, MetricsError> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c == '\t' || c == ';' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let err = |msg: String| MetricsError::Parse { line: i + 1, msg };
        if fields.len() != 2 {
            return Err(err(format!("expected 2 columns, found {}", fields.len())));
        }
        match (fields[0].parse::<f64>(), fields[1].parse::<f64>()) {
            (Ok(x), Ok(y)) => rows.push((x, y)),
            _ if rows.is_empty() && fields.iter().all(|f| f.parse::<f64>().is_err()) => {}
            _ => return Err(err(format!("not a number pair: `{line}`"))),
        }
    }
    Ok(rows)
}

/// The value column of a parsed series.
pub fn series_values(rows: &[(f64, f64)]) -> Vec<f64> {
    rows.iter().map(|r| r.1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn speedup_examples() {
        let base = [(256, 136.9), (256, 143.7), (256, 46.2)];
        let weighted = (136.9 + 143.7 + 46.2) / 3.0;
        assert!((hetero_speedup_ratio(weighted, 768, &base).unwrap() - 1.0).abs() < 1e-12);
        let r = hetero_speedup_ratio(118.76, 768, &base).unwrap();
        assert!((r - 1.0903).abs() < 1e-3, "{r}");
        let r2 = hetero_speedup_ratio(2.0 * 118.76, 768, &base).unwrap();
        assert!((r2 - 2.0 * r).abs() < 1e-12);
        assert!(hetero_speedup_ratio(1.0, 1, &[]).is_err());
        assert!(hetero_speedup_ratio(0.0, 1, &base).is_err());
    }

    #[test]
    fn mre_examples() {
        assert_eq!(mean_relative_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mean_relative_error(&[2.0, 4.0], &[1.0, 4.0]).unwrap(), 0.25);
        let aligned = mean_relative_error(&[2.0, 4.0], &[2.00782, 3.98436]).unwrap();
        assert!((aligned - 0.00391).abs() < 1e-9 && aligned < 0.015);
        assert!(mean_relative_error(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mean_relative_error(&[0.0], &[1.0]).is_err());
        assert!(mean_relative_error(&[], &[]).is_err());
    }

    #[test]
    fn series_parsing() {
        let rows = parse_series("iter,loss\n1,2.5\n2\t2.25\n\n# note\n3 2.0\n").unwrap();
        assert_eq!(rows, [(1.0, 2.5), (2.0, 2.25), (3.0, 2.0)]);
        assert!(parse_series("1,2,3\n").is_err());
        assert!(parse_series("1,2\nx,y\n").is_err());
    }

    proptest! {
        #[test]
        fn speedup_scale_invariant(h in 0.1f64..1e3, t in proptest::collection::vec((1usize..1000, 0.1f64..1e3), 1..5), k in 0.01f64..100.0) {
            let n: usize = t.iter().map(|x| x.0).sum();
            let a = hetero_speedup_ratio(h, n, &t).unwrap();
            let scaled: Vec<_> = t.iter().map(|&(n, g)| (n, g * k)).collect();
            let b = hetero_speedup_ratio(h * k, n, &scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }

        #[test]
        fn mre_properties(pairs in proptest::collection::vec((0.01f64..1e3, -1e3f64..1e3, any::<bool>()), 1..20)) {
            let y: Vec<f64> = pairs.iter().map(|p| if p.2 { p.0 } else { -p.0 }).collect();
            let yh: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let e = mean_relative_error(&y, &yh).unwrap();
            prop_assert!(e >= 0.0);
            prop_assert_eq!(mean_relative_error(&y, &y).unwrap(), 0.0);
            let ny: Vec<f64> = y.iter().map(|v| -v).collect();
            let nyh: Vec<f64> = yh.iter().map(|v| -v).collect();
            prop_assert_eq!(mean_relative_error(&ny, &nyh).unwrap(), e);
            if y != yh {
                prop_assert!(e > 0.0);
            }
        }
    }
}
