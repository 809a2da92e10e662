use crate::tensor::Tensor;

fn power_of_two_slopes(n: usize) -> Vec<f64> {
    (0..n).map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / n as f64)).collect()
}

/// Per-head ALiBi slopes.
///
/// For a power-of-two head count head `h` gets `2^(-8(h+1)/n)`. Other
/// counts take the slopes of the largest power of two below `n` and fill
/// the remaining heads with every other slope of the next power of two.
pub fn alibi_slopes(n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    if n.is_power_of_two() {
        return power_of_two_slopes(n);
    }
    let closest = 1usize << (usize::BITS - 1 - n.leading_zeros());
    let mut slopes = power_of_two_slopes(closest);
    slopes.extend(
        power_of_two_slopes(2 * closest)
            .into_iter()
            .step_by(2)
            .take(n - closest),
    );
    slopes
}

/// Causal ALiBi bias `[n x T x T]`: `-m_h (i - j)` for `j <= i`, `-inf` above
/// the diagonal.
pub fn alibi_biases(n: usize, t: usize) -> Tensor {
    let slopes = alibi_slopes(n);
    let mut data = Vec::with_capacity(n * t * t);
    for m in slopes {
        for i in 0..t {
            for j in 0..t {
                data.push(if j <= i { -m * (i - j) as f64 } else { f64::NEG_INFINITY });
            }
        }
    }
    Tensor::new(vec![n, t, t], data).expect("alibi shape")
}
