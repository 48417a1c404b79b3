//! T-decomposition and T-complexity.
//!
//! A string is parsed into codewords, starting from single symbols. Each
//! step takes the penultimate codeword `p` as copy pattern and the length
//! `k` of the run of `p` that ends there as copy factor, then re-parses with
//! the T-augmented code `{p^j w : 0 <= j <= k, w != p} ∪ {p^(k+1)}`. The
//! process stops once the whole string is one codeword. The complexity is
//! `sum log2(k_i + 1)` over all steps.
//!
//! Only occurrences of `p` are touched in a step, so the cost is dominated
//! by the number of merges, which is bounded by the string length.

use std::collections::HashMap;

const NIL: usize = usize::MAX;

/// Result of decomposing one string.
#[derive(Debug, Clone, PartialEq)]
pub struct TDecomposition {
    /// Copy factors `k_i` in the order they were found.
    pub copy_factors: Vec<usize>,
    pub complexity: f64,
}

pub fn t_decompose(input: &[u8]) -> TDecomposition {
    let len = input.len();
    if len < 2 {
        return TDecomposition {
            copy_factors: Vec::new(),
            complexity: 0.0,
        };
    }

    // doubly linked list of codeword nodes
    let mut id: Vec<usize> = input.iter().map(|&b| usize::from(b)).collect();
    let mut prev: Vec<usize> = (0..len).map(|i| if i == 0 { NIL } else { i - 1 }).collect();
    let mut next: Vec<usize> = (0..len)
        .map(|i| if i + 1 == len { NIL } else { i + 1 })
        .collect();
    let mut alive = vec![true; len];
    let tail = len - 1;
    let mut nodes = len;

    // occurrence lists per codeword id, in left-to-right order; may hold stale
    // entries for nodes whose codeword has since changed
    let mut occurrences: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (i, &sym) in id.iter().enumerate() {
        occurrences[sym].push(i);
    }

    let mut copy_factors = Vec::new();
    while nodes > 1 {
        let penultimate = prev[tail];
        let pattern = id[penultimate];
        let mut k = 0;
        let mut cur = penultimate;
        while cur != NIL && id[cur] == pattern {
            k += 1;
            cur = prev[cur];
        }
        copy_factors.push(k);

        let mut interned: HashMap<(usize, usize), usize> = HashMap::new();
        let occ = std::mem::take(&mut occurrences[pattern]);
        let mut i = 0;
        while i < occ.len() {
            let start = occ[i];
            i += 1;
            if !alive[start] || id[start] != pattern {
                continue;
            }
            // extend the maximal run of the pattern starting here
            let mut run = vec![start];
            let mut last = start;
            while next[last] != NIL && id[next[last]] == pattern {
                last = next[last];
                run.push(last);
            }
            let follower = next[last];

            // greedy left-to-right parse of p^r w with the augmented code
            let full = run.len() / (k + 1);
            let mut fresh_id = |key: (usize, usize), occurrences: &mut Vec<Vec<usize>>| {
                *interned.entry(key).or_insert_with(|| {
                    occurrences.push(Vec::new());
                    occurrences.len() - 1
                })
            };
            for chunk in run.chunks(k + 1).take(full) {
                let keep = *chunk.last().unwrap();
                for &node in &chunk[..chunk.len() - 1] {
                    unlink(node, &mut prev, &mut next, &mut alive);
                    nodes -= 1;
                }
                let new_id = fresh_id((k + 1, NIL), &mut occurrences);
                id[keep] = new_id;
                occurrences[new_id].push(keep);
            }
            let rest = &run[full * (k + 1)..];
            if !rest.is_empty() {
                debug_assert!(
                    follower != NIL,
                    "a trailing run of the pattern is always complete"
                );
                let new_id = fresh_id((rest.len(), id[follower]), &mut occurrences);
                for &node in rest {
                    unlink(node, &mut prev, &mut next, &mut alive);
                    nodes -= 1;
                }
                id[follower] = new_id;
                occurrences[new_id].push(follower);
            }
        }
    }

    let complexity = copy_factors.iter().map(|&k| ((k + 1) as f64).log2()).sum();
    TDecomposition {
        copy_factors,
        complexity,
    }
}

fn unlink(node: usize, prev: &mut [usize], next: &mut [usize], alive: &mut [bool]) {
    let (p, n) = (prev[node], next[node]);
    if p != NIL {
        next[p] = n;
    }
    if n != NIL {
        prev[n] = p;
    }
    alive[node] = false;
}

/// Logarithmic integral `li(x)` for `x > 1`, via Ramanujan's series.
pub fn li(x: f64) -> f64 {
    assert!(x > 1.0, "li is evaluated only above 1, got {x}");
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    let ln_x = x.ln();
    let mut sum = 0.0;
    let mut term = 1.0; // (ln x)^n / (n! 2^(n-1)), starting at n = 1 below
    let mut inner = 0.0; // sum_{k=0}^{floor((n-1)/2)} 1/(2k+1)
    for n in 1..400 {
        term *= ln_x / n as f64;
        if n > 1 {
            term /= 2.0;
        }
        if (n - 1) % 2 == 0 {
            inner += 1.0 / (n - 1 + 1) as f64;
        }
        let sign = if (n - 1) % 2 == 0 { 1.0 } else { -1.0 };
        let delta = sign * term * inner;
        sum += delta;
        if delta.abs() < 1e-17 * sum.abs() && n > 10 {
            break;
        }
    }
    EULER_GAMMA + ln_x.ln() + x.sqrt() * sum
}

/// Inverse of [`li`] by Newton iteration; `li'(x) = 1 / ln x`.
pub fn li_inverse(y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    // li is increasing above its root mu ~ 1.451
    let mut x = (y * y.max(2.0).ln()).max(2.0);
    for _ in 0..100 {
        let step = (li(x) - y) * x.ln();
        let next = (x - step).max(1.0 + 1e-9);
        if (next - x).abs() <= 1e-12 * x {
            return next;
        }
        x = next;
    }
    x
}

/// Scale factor that makes the T-entropy estimate match `L log2 A` on
/// i.i.d. uniform strings: `calibrate_scale(16, 100_000, 16, 0x7ca1)`.
/// The `calibration_constant` test recomputes it.
pub const T_ENTROPY_SCALE: f64 = 1.497_2;

/// Total-entropy estimate in bits: `scale * li^-1(C_T) / ln 2`, i.e. the
/// T-information in nats converted to bits.
pub fn t_information_bits(complexity: f64) -> f64 {
    T_ENTROPY_SCALE * raw_t_information_bits(complexity)
}

pub fn raw_t_information_bits(complexity: f64) -> f64 {
    li_inverse(complexity) / std::f64::consts::LN_2
}

/// Ratio between the true information of a uniform string and the raw
/// T-information estimate, averaged over `strings` draws.
pub fn calibrate_scale(alphabet: u8, len: usize, strings: usize, seed: u64) -> f64 {
    use rand::Rng as _;
    let mut ratio = 0.0;
    for s in 0..strings {
        let mut rng = crate::rng::stream(seed, s as u64);
        let text: Vec<u8> = (0..len).map(|_| rng.random_range(0..alphabet)).collect();
        let raw = raw_t_information_bits(t_decompose(&text).complexity);
        ratio += len as f64 * f64::from(alphabet).log2() / raw;
    }
    ratio / strings as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook reference: rebuild the whole parse every step.
    fn naive(input: &[u8]) -> Vec<usize> {
        let mut parse: Vec<Vec<u8>> = input.iter().map(|&b| vec![b]).collect();
        let mut factors = Vec::new();
        while parse.len() > 1 {
            let pen = parse.len() - 2;
            let p = parse[pen].clone();
            let mut k = 0;
            while k <= pen && parse[pen - k] == p {
                k += 1;
            }
            factors.push(k);
            let mut out: Vec<Vec<u8>> = Vec::new();
            let mut run = 0;
            for cw in parse {
                if cw == p {
                    run += 1;
                    if run == k + 1 {
                        out.push(p.repeat(k + 1));
                        run = 0;
                    }
                } else {
                    let mut merged = p.repeat(run);
                    merged.extend(cw);
                    out.push(merged);
                    run = 0;
                }
            }
            assert_eq!(run, 0);
            parse = out;
        }
        factors
    }

    #[test]
    fn matches_naive_parse() {
        use rand::Rng as _;
        let mut rng = crate::rng::stream(3, 0);
        for len in [2, 3, 5, 17, 64, 300] {
            for alphabet in [1u8, 2, 3, 7] {
                let text: Vec<u8> = (0..len).map(|_| rng.random_range(0..alphabet)).collect();
                assert_eq!(t_decompose(&text).copy_factors, naive(&text), "{text:?}");
            }
        }
        let text = b"0010010010111010";
        assert_eq!(t_decompose(text).copy_factors, naive(text));
    }

    #[test]
    fn small_cases() {
        assert_eq!(t_decompose(b"").complexity, 0.0);
        assert_eq!(t_decompose(b"a").complexity, 0.0);
        assert_eq!(t_decompose(b"ab").copy_factors, vec![1]);
        assert_eq!(t_decompose(b"aaaa").copy_factors, vec![3]);
        assert!((t_decompose(b"aaaa").complexity - 2.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_constant() {
        let scale = calibrate_scale(16, 100_000, 16, 0x7ca1);
        assert!((scale / T_ENTROPY_SCALE - 1.0).abs() < 1e-4, "{scale}");
    }

    #[test]
    fn li_values() {
        // li(2) = 1.045163780117..., li(10) = 6.165599504787...
        assert!((li(2.0) - 1.045_163_780_117_492).abs() < 1e-12);
        assert!((li(10.0) - 6.165_599_504_787_297).abs() < 1e-10);
        assert!((li(1e6) - 78_627.549_159_462_18).abs() < 1e-6);
        for y in [0.5, 3.0, 100.0, 5e4] {
            assert!((li(li_inverse(y)) - y).abs() < 1e-8 * y.max(1.0));
        }
    }
}
