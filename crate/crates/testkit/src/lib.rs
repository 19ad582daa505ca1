//! Reference computations used as independent oracles by the test suites.
//!
//! Everything here is deliberately written on the slowest, most obvious
//! route (exhaustive enumeration, bisection, closed forms) so it shares no
//! code path with the library implementations it checks.

/// Deterministic 64-bit generator (SplitMix64) for fixture generation.
///
/// Kept here so randomized acceptance checks do not depend on any RNG
/// crate version staying stable.
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// Best segmentation score by exhaustive enumeration.
///
/// Considers every way of splitting `sentence` into pieces where each piece
/// is either a vocabulary token or a single character expanded to
/// `char_fallback_cost(c)` (e.g. the summed byte-token cost). Returns the
/// maximum total log probability, or `None` when the sentence cannot be
/// covered at all (only possible when no fallback cost is supplied).
pub fn best_segmentation_exhaustive(
    sentence: &str,
    vocab: &[(String, f64)],
    char_fallback_cost: Option<&dyn Fn(char) -> f64>,
) -> Option<f64> {
    fn recurse(
        rest: &str,
        vocab: &[(String, f64)],
        fallback: Option<&dyn Fn(char) -> f64>,
    ) -> Option<f64> {
        if rest.is_empty() {
            return Some(0.0);
        }
        let mut best: Option<f64> = None;
        for (tok, lp) in vocab {
            if let Some(tail) = rest.strip_prefix(tok.as_str()) {
                if let Some(score) = recurse(tail, vocab, fallback) {
                    let total = lp + score;
                    if best.is_none_or(|b| total > b) {
                        best = Some(total);
                    }
                }
            }
        }
        if let Some(cost) = fallback {
            let c = rest.chars().next().unwrap();
            let tail = &rest[c.len_utf8()..];
            if let Some(score) = recurse(tail, vocab, fallback) {
                let total = cost(c) + score;
                if best.is_none_or(|b| total > b) {
                    best = Some(total);
                }
            }
        }
        best
    }
    recurse(sentence, vocab, char_fallback_cost)
}

/// Mutual-argmax pairs by scanning every cell.
///
/// `(i, j)` is a pair when `sim[i][j]` is the first-attained maximum of both
/// row `i` and column `j` (ties broken toward the lowest index on each axis).
pub fn mutual_argmax_bruteforce(sim: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = sim.len();
    let cols = if rows == 0 { 0 } else { sim[0].len() };
    let mut pairs = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let row_best = (0..cols).all(|l| {
                sim[i][l] < sim[i][j] || (sim[i][l] == sim[i][j] && l >= j)
            });
            let col_best = (0..rows).all(|l| {
                sim[l][j] < sim[i][j] || (sim[l][j] == sim[i][j] && l >= i)
            });
            if row_best && col_best {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Closed-form simplex projection of the 2-vector `[t, 0]`.
pub fn sparsemax_2d_closed_form(t: f64) -> [f64; 2] {
    if t >= 1.0 {
        [1.0, 0.0]
    } else if t <= -1.0 {
        [0.0, 1.0]
    } else {
        [(1.0 + t) / 2.0, (1.0 - t) / 2.0]
    }
}

/// Simplex projection by bisection on the threshold.
///
/// Solves `sum(max(z - tau, 0)) = 1` for `tau` numerically instead of via
/// the sort-based formula, so it is an independent route to the same point.
pub fn sparsemax_bisection(z: &[f64]) -> Vec<f64> {
    assert!(!z.is_empty());
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = max - 1.0; // sum >= 1 here (the max element alone contributes 1)
    let mut hi = max; // sum = 0 here
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let sum: f64 = z.iter().map(|&v| (v - mid).max(0.0)).sum();
        if sum > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// Central-difference gradient of a scalar function.
pub fn central_difference_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_prefers_cheaper_split() {
        let vocab = vec![
            ("a".to_string(), -1.0),
            ("b".to_string(), -1.0),
            ("ab".to_string(), -0.5),
        ];
        let best = best_segmentation_exhaustive("abab", &vocab, None).unwrap();
        assert!((best - -1.0).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_returns_none_when_uncoverable() {
        let vocab = vec![("a".to_string(), -1.0)];
        assert!(best_segmentation_exhaustive("ab", &vocab, None).is_none());
    }

    #[test]
    fn bruteforce_pairs_on_diagonal_matrix() {
        let sim = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(mutual_argmax_bruteforce(&sim), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn bisection_matches_closed_form() {
        let got = sparsemax_bisection(&[0.5, 0.0]);
        let want = sparsemax_2d_closed_form(0.5);
        assert!((got[0] - want[0]).abs() < 1e-10);
        assert!((got[1] - want[1]).abs() < 1e-10);
    }

    #[test]
    fn central_difference_of_quadratic() {
        let grad = central_difference_grad(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], 1e-5);
        assert!((grad[0] - 4.0).abs() < 1e-6);
        assert!((grad[1] - 3.0).abs() < 1e-6);
    }
}
