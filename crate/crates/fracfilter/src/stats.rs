//! Small numeric helpers shared across the filters.

/// Resets the upper halves of the wide SIMD registers.
///
/// The dense matrix kernels use VEX-encoded instructions and return with the
/// upper register state dirty. Every legacy-SSE-encoded libm call made
/// afterwards (`exp`, `atan`, ...) then pays a state-merge stall of ~100 ns
/// per call, which can dominate softmax- or observation-heavy loops. Calling
/// this once after a block of matrix work removes the penalty.
#[inline]
pub(crate) fn clear_simd_upper_state() {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            unsafe { avx_zeroupper() }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn avx_zeroupper() {
    std::arch::x86_64::_mm256_zeroupper();
}

/// Compensated (Neumaier) summation. Ensemble statistics are accumulated with
/// this so results do not depend on summation order rewrites by the optimizer
/// and stay accurate for large ensembles.
pub fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    sum(values.iter().copied()) / values.len() as f64
}

/// Mean over one coordinate of a set of vectors.
pub fn mean_component(vectors: &[Vec<f64>], component: usize) -> f64 {
    if vectors.is_empty() {
        return 0.0;
    }
    sum(vectors.iter().map(|v| v[component])) / vectors.len() as f64
}

/// Coordinate-wise mean of a set of equal-length vectors.
pub fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = vectors.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|c| mean_component(vectors, c))
        .collect()
}

/// Quantile with linear interpolation between order statistics; `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty() && (0.0..=1.0).contains(&q));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    // Lerp from the lower order statistic: exact when the endpoints agree,
    // so repeated values cannot produce out-of-order quantiles.
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Root-mean-square difference between two equal-length vectors,
/// sqrt(|a - b|^2 / n).
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ss = sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)));
    (ss / a.len() as f64).sqrt()
}
