use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Metric values aggregated over `item_count` dataset items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricResult {
    pub metrics: BTreeMap<String, f64>,
    pub item_count: u64,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub extra: Value,
}

impl MetricResult {
    pub fn new(metrics: impl IntoIterator<Item = (String, f64)>, item_count: u64) -> Self {
        Self {
            metrics: metrics.into_iter().collect(),
            item_count,
            extra: Value::Null,
        }
    }

    /// The first schema metric this result lacks, if any.
    pub fn missing_metric<'a>(&self, schema: &'a [String]) -> Option<&'a str> {
        schema
            .iter()
            .find(|m| !self.metrics.contains_key(m.as_str()))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MergeError {
    #[error("no results to merge")]
    Empty,
    #[error("result is missing schema metric {0:?}")]
    SchemaMismatch(String),
    #[error("metric {0:?} is not a finite number")]
    NonFinite(String),
}

/// Item-count weighted mean of each metric across `parts`.
///
/// Chunk means that are ratios of small integers (accuracy, success rate,
/// any per-item score with bounded denominators) are recovered exactly and
/// summed in integer arithmetic, so the merged value is bit-identical to the
/// value a single pass over all items would report. Other values fall back
/// to floating-point summation in a canonical order. Either way the result
/// does not depend on the order of `parts`.
pub fn merge_results(parts: &[MetricResult], schema: &[String]) -> Result<MetricResult, MergeError> {
    if parts.is_empty() {
        return Err(MergeError::Empty);
    }
    for part in parts {
        if let Some(missing) = part.missing_metric(schema) {
            return Err(MergeError::SchemaMismatch(missing.to_string()));
        }
        if let Some((name, _)) = part.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(MergeError::NonFinite(name.clone()));
        }
    }
    if let [only] = parts {
        return Ok(only.clone());
    }
    let item_count = parts.iter().map(|p| p.item_count).sum();
    let mut metrics = BTreeMap::new();
    for name in parts[0].metrics.keys() {
        if !parts.iter().all(|p| p.metrics.contains_key(name)) {
            continue;
        }
        let weighted: Vec<(u64, f64)> = parts.iter().map(|p| (p.item_count, p.metrics[name])).collect();
        metrics.insert(name.clone(), weighted_mean(&weighted));
    }
    let mut extras: Vec<&Value> = parts.iter().map(|p| &p.extra).filter(|e| !e.is_null()).collect();
    extras.sort_by_cached_key(|e| e.to_string());
    let extra = if extras.is_empty() {
        Value::Null
    } else {
        Value::Array(extras.into_iter().cloned().collect())
    };
    Ok(MetricResult {
        metrics,
        item_count,
        extra,
    })
}

const MAX_EXACT_ITEMS: u64 = 1 << 26;
const EXACT_F64_INT: i128 = 1 << 53;

fn weighted_mean(parts: &[(u64, f64)]) -> f64 {
    exact_weighted_mean(parts).unwrap_or_else(|| float_weighted_mean(parts))
}

fn exact_weighted_mean(parts: &[(u64, f64)]) -> Option<f64> {
    let total: u64 = parts.iter().map(|(n, _)| n).sum();
    if total == 0 || total > MAX_EXACT_ITEMS {
        return None;
    }
    // Running sum of n_i * p_i / q_i as num / den.
    let (mut num, mut den) = (0i128, 1i128);
    for &(n, value) in parts {
        if n == 0 {
            continue;
        }
        let (p, q) = recover_fraction(value, n)?;
        let term_num = p.checked_mul(n as i128)?;
        let g = gcd(term_num, q);
        let (term_num, q) = (term_num / g, q / g);
        let l = den / gcd(den, q) * q;
        num = num.checked_mul(l / den)?.checked_add(term_num.checked_mul(l / q)?)?;
        den = l;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    let den = den.checked_mul(total as i128)?;
    let g = gcd(num, den);
    let (num, den) = (num / g, den / g);
    if num.abs() >= EXACT_F64_INT || den >= EXACT_F64_INT {
        return None;
    }
    // Both operands are exact, so IEEE division rounds the true quotient correctly.
    Some(num as f64 / den as f64)
}

fn float_weighted_mean(parts: &[(u64, f64)]) -> f64 {
    let mut ordered = parts.to_vec();
    ordered.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let total: u64 = ordered.iter().map(|(n, _)| n).sum();
    if total == 0 {
        return ordered.iter().map(|(_, v)| v).sum::<f64>() / ordered.len() as f64;
    }
    ordered.iter().map(|&(n, v)| n as f64 * v).sum::<f64>() / total as f64
}

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// The fraction `p/q` with `q <= max_den` that rounds to exactly `value`.
/// Distinct fractions with such denominators are at least `1/max_den^2`
/// apart, far wider than an f64 rounding interval, so the answer is unique.
fn recover_fraction(value: f64, max_den: u64) -> Option<(i128, i128)> {
    let (num, den) = exact_dyadic(value)?;
    let (p, q) = limit_denominator(num, den, max_den as i128)?;
    if p.abs() >= EXACT_F64_INT || p as f64 / q as f64 != value {
        return None;
    }
    Some((p, q))
}

/// `value` as an exact ratio `num / 2^k` when it fits in i128.
fn exact_dyadic(value: f64) -> Option<(i128, i128)> {
    if value == 0.0 {
        return Some((0, 1));
    }
    let bits = value.to_bits();
    let negative = bits >> 63 == 1;
    let exponent = ((bits >> 52) & 0x7ff) as i32;
    let fraction = (bits & ((1 << 52) - 1)) as i128;
    let (mantissa, exp) = if exponent == 0 {
        (fraction, -1074)
    } else {
        (fraction | (1 << 52), exponent - 1075)
    };
    let (mut num, mut den) = if exp >= 0 {
        if exp > 60 {
            return None;
        }
        (mantissa << exp, 1i128)
    } else {
        let shift = -exp;
        // Strip trailing zero bits so the denominator stays small.
        let tz = (mantissa.trailing_zeros() as i32).min(shift);
        let (m, s) = (mantissa >> tz, shift - tz);
        if s > 96 {
            return None;
        }
        (m, 1i128 << s)
    };
    if negative {
        num = -num;
    }
    let g = gcd(num, den);
    num /= g;
    den /= g;
    Some((num, den))
}

/// Closest fraction to `num/den` with denominator at most `max_den`,
/// or `None` if intermediate values overflow.
fn limit_denominator(num: i128, den: i128, max_den: i128) -> Option<(i128, i128)> {
    if den <= max_den {
        return Some((num, den));
    }
    let (mut n, mut d) = (num.abs(), den);
    let (target_n, target_d) = (n, d);
    let (mut p0, mut q0, mut p1, mut q1) = (0i128, 1i128, 1i128, 0i128);
    loop {
        let a = n / d;
        let q2 = q0.checked_add(a.checked_mul(q1)?)?;
        if q2 > max_den {
            break;
        }
        let p2 = p0.checked_add(a.checked_mul(p1)?)?;
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
        (n, d) = (d, n - a * d);
        if d == 0 {
            break;
        }
    }
    let k = (max_den - q0) / q1;
    let (bp, bq) = (p0 + k * p1, q0 + k * q1);
    // |p/q - t| compared without division: |p*td - tn*q| / (q*td).
    let dist = |p: i128, q: i128| Some(p.checked_mul(target_d)?.checked_sub(target_n.checked_mul(q)?)?.abs());
    let bound_closer = dist(bp, bq)?.checked_mul(q1)? < dist(p1, q1)?.checked_mul(bq)?;
    let (p, q) = if bound_closer { (bp, bq) } else { (p1, q1) };
    Some((if num < 0 { -p } else { p }, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn acc(value: f64, n: u64) -> MetricResult {
        MetricResult::new([("accuracy".to_string(), value)], n)
    }

    fn schema() -> Vec<String> {
        vec!["accuracy".to_string()]
    }

    #[test]
    fn weighted_mean_of_two_parts() {
        let merged = merge_results(&[acc(1.0, 3), acc(0.0, 1)], &schema()).unwrap();
        assert_eq!(merged.metrics["accuracy"], (1.0 * 3.0 + 0.0 * 1.0) / 4.0);
        assert_eq!(merged.item_count, 4);
    }

    #[test]
    fn single_part_is_returned_unchanged() {
        let mut part = acc(0.123456789, 7);
        part.metrics.insert("extra_metric".into(), 42.0);
        part.extra = serde_json::json!({"note": "kept"});
        assert_eq!(merge_results(std::slice::from_ref(&part), &schema()).unwrap(), part);
    }

    #[test]
    fn missing_schema_metric_is_rejected() {
        let bad = MetricResult::new([("f1".to_string(), 0.5)], 2);
        assert_eq!(
            merge_results(&[acc(0.5, 2), bad], &schema()),
            Err(MergeError::SchemaMismatch("accuracy".into()))
        );
        assert_eq!(merge_results(&[], &schema()), Err(MergeError::Empty));
    }

    #[test]
    fn merge_is_exact_where_float_weighting_drifts() {
        let naive = (1.0 * 0.0 + 22.0 * (15.0f64 / 22.0)) / 23.0;
        let serial = 15.0f64 / 23.0;
        assert_ne!(naive, serial);
        let merged = merge_results(&[acc(0.0, 1), acc(15.0 / 22.0, 22)], &schema()).unwrap();
        assert_eq!(merged.metrics["accuracy"], serial);
    }

    #[test]
    fn non_ratio_values_fall_back_to_float_sum() {
        let merged = merge_results(&[acc(std::f64::consts::PI, 2), acc(std::f64::consts::E, 2)], &schema()).unwrap();
        let expected = (2.0 * std::f64::consts::E + 2.0 * std::f64::consts::PI) / 4.0;
        assert_eq!(merged.metrics["accuracy"], expected);
    }

    #[test]
    fn limit_denominator_matches_known_values() {
        let (n, d) = exact_dyadic(0.1).unwrap();
        assert_eq!(limit_denominator(n, d, 10), Some((1, 10)));
        let (n, d) = exact_dyadic(std::f64::consts::PI).unwrap();
        assert_eq!(limit_denominator(n, d, 1000), Some((355, 113)));
        let (n, d) = exact_dyadic(-0.75).unwrap();
        assert_eq!((n, d), (-3, 4));
    }

    proptest! {
        #[test]
        fn chunked_counts_merge_to_serial_value(
            chunks in prop::collection::vec((1u64..300, 0.0f64..=1.0), 1..12)
        ) {
            let parts: Vec<(u64, u64)> = chunks.iter().map(|&(n, f)| (n, (f * n as f64).floor() as u64)).collect();
            let results: Vec<MetricResult> = parts.iter().map(|&(n, c)| acc(c as f64 / n as f64, n)).collect();
            let total: u64 = parts.iter().map(|p| p.0).sum();
            let correct: u64 = parts.iter().map(|p| p.1).sum();
            let merged = merge_results(&results, &schema()).unwrap();
            prop_assert_eq!(merged.metrics["accuracy"].to_bits(), (correct as f64 / total as f64).to_bits());
            prop_assert_eq!(merged.item_count, total);
        }

        #[test]
        fn merge_ignores_part_order(
            values in prop::collection::vec((1u64..100, -1e6f64..1e6), 2..8),
            seed in any::<u64>()
        ) {
            let parts: Vec<MetricResult> = values.iter().map(|&(n, v)| acc(v, n)).collect();
            let mut shuffled = parts.clone();
            let len = shuffled.len();
            shuffled.rotate_left((seed as usize) % len);
            shuffled.swap(0, (seed as usize / 7) % len);
            let a = merge_results(&parts, &schema()).unwrap();
            let b = merge_results(&shuffled, &schema()).unwrap();
            prop_assert_eq!(a.metrics["accuracy"].to_bits(), b.metrics["accuracy"].to_bits());
        }
    }
}
