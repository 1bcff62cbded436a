//! Small numeric helpers shared across modules.
//!
//! Norms use Neumaier-compensated summation so that "exact" claims
//! (Bernoulli norms, symmetric-noise norms) hold to a few ulp regardless
//! of how many entries are summed.

/// Compensated (Neumaier) sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Compensated sum of squares.
pub fn sum_of_squares(values: impl IntoIterator<Item = f64>) -> f64 {
    compensated_sum(values.into_iter().map(|v| v * v))
}

/// L2 norm with compensated accumulation.
pub fn l2_norm(values: impl IntoIterator<Item = f64>) -> f64 {
    sum_of_squares(values).sqrt()
}

/// Mean of a nonempty slice.
pub fn mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Median of a nonempty slice (average of the middle pair for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in median"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Distance between two floats in units of the last place of `reference`.
pub fn ulp_distance(a: f64, reference: f64) -> f64 {
    let ulp = ulp_of(reference);
    (a - reference).abs() / ulp
}

/// Size of one ulp at `x`.
pub fn ulp_of(x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 {
        return f64::MIN_POSITIVE;
    }
    let next = f64::from_bits(x.to_bits() + 1);
    next - x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_beats_naive() {
        // 1 + 2^-60 added 2^20 times: naive summation loses every tiny term.
        let tiny = 2f64.powi(-60);
        let n = 1 << 20;
        let values: Vec<f64> = std::iter::once(1.0)
            .chain(std::iter::repeat(tiny).take(n))
            .collect();
        let exact = 1.0 + tiny * n as f64;
        assert_eq!(compensated_sum(values.iter().copied()), exact);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn ulp_sanity() {
        assert_eq!(ulp_distance(1.0, 1.0), 0.0);
        let one_ulp_up = f64::from_bits(1.0f64.to_bits() + 1);
        assert_eq!(ulp_distance(one_ulp_up, 1.0), 1.0);
    }
}
