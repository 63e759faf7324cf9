//! Recollision patterns, pairings, pairing graphs, peaks and staircases,
//! with exhaustive and sampled checks of the counting lemmas.

use crate::rng;
use crate::stats::Estimate;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiagramError {
    #[error("n = {n} and N = {big_n} must have equal parity with n <= N")]
    ParityMismatch { n: usize, big_n: usize },
    #[error("exhaustive enumeration is limited to n <= {limit}, got {n}")]
    TooLarge { n: usize, limit: usize },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("recollision marker {a} violates the pattern constraints")]
    InvalidMarker { a: usize },
}

/// Largest n enumerated exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 10;

/// Binomial coefficient, saturating at u128::MAX.
pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = match r.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    r
}

fn sat_pow(base: u128, exp: u64) -> u128 {
    let mut r: u128 = 1;
    for _ in 0..exp {
        r = r.saturating_mul(base);
    }
    r
}

/// Tuple m = (m_0, .., m_n) with n + 2 |m| = N.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecollisionPattern {
    pub n: usize,
    pub big_n: usize,
    pub m: Vec<usize>,
}

impl RecollisionPattern {
    pub fn new(m: Vec<usize>) -> Self {
        let n = m.len() - 1;
        let big_n = n + 2 * m.iter().sum::<usize>();
        Self { n, big_n, m }
    }

    /// Number of immediate recollision pairs |m|.
    pub fn size(&self) -> usize {
        self.m.iter().sum()
    }

    /// mu(0..=n+1) with mu(0) = 0, mu(n+1) = N + 1.
    pub fn mu(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n + 2);
        out.push(0);
        for j in 0..=self.n {
            out.push(out[j] + 2 * self.m[j] + 1);
        }
        out
    }

    /// External indices I = {mu(1), .., mu(n)}.
    pub fn external(&self) -> Vec<usize> {
        let mu = self.mu();
        mu[1..=self.n].to_vec()
    }

    /// I_j = {mu(j) + 1, mu(j) + 3, .., mu(j) + 2 m_j - 1}.
    pub fn i_j(&self, j: usize) -> Vec<usize> {
        let base = self.mu()[j];
        (0..self.m[j]).map(|i| base + 1 + 2 * i).collect()
    }

    /// I_j^c = {mu(j), mu(j) + 2, .., mu(j) + 2 m_j}.
    pub fn i_j_complement(&self, j: usize) -> Vec<usize> {
        let base = self.mu()[j];
        (0..=self.m[j]).map(|i| base + 2 * i).collect()
    }

    /// J = union of the I_j: left ends b of the immediate pairs (b, b + 1).
    pub fn j_set(&self) -> Vec<usize> {
        (0..=self.n).flat_map(|j| self.i_j(j)).collect()
    }

    pub fn j_complement(&self) -> Vec<usize> {
        (0..=self.n).flat_map(|j| self.i_j_complement(j)).collect()
    }

    /// Membership in M_a(n, N): m_0 = 0, mu(a) >= 3, and m_1 >= 1 if a = 2.
    pub fn in_m_a(&self, a: usize) -> bool {
        if a < 2 || a > self.n {
            return false;
        }
        self.m[0] == 0 && self.mu()[a] >= 3 && (a != 2 || self.m[1] >= 1)
    }

    /// Recover the pattern from its external indices.
    pub fn from_external(external: &[usize], big_n: usize) -> Option<Self> {
        let mut prev = 0;
        let mut m = Vec::with_capacity(external.len() + 1);
        for &x in external.iter().chain(std::iter::once(&(big_n + 1))) {
            if x <= prev || (x - prev) % 2 == 0 {
                return None;
            }
            m.push((x - prev - 1) / 2);
            prev = x;
        }
        Some(Self::new(m))
    }
}

/// All patterns in M(n, N), in lexicographic order of m.
pub fn enumerate_patterns(n: usize, big_n: usize) -> Result<Vec<RecollisionPattern>, DiagramError> {
    if n > big_n || (big_n - n) % 2 != 0 {
        return Err(DiagramError::ParityMismatch { n, big_n });
    }
    let total = (big_n - n) / 2;
    let mut out = Vec::new();
    let mut m = vec![0usize; n + 1];
    fn rec(m: &mut Vec<usize>, i: usize, left: usize, out: &mut Vec<RecollisionPattern>) {
        if i + 1 == m.len() {
            m[i] = left;
            out.push(RecollisionPattern::new(m.clone()));
            return;
        }
        for v in (0..=left).rev() {
            m[i] = v;
            rec(m, i + 1, left - v, out);
        }
    }
    rec(&mut m, 0, total, &mut out);
    Ok(out)
}

/// Permutation pi of {1..n} stored as pi[a - 1] = pi(a), with an optional
/// recollision marker a.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pairing {
    pub perm: Vec<usize>,
    pub marker: Option<usize>,
}

impl Pairing {
    pub fn new(perm: Vec<usize>) -> Result<Self, DiagramError> {
        let n = perm.len();
        let mut seen = vec![false; n + 1];
        for &v in &perm {
            if v == 0 || v > n || seen[v] {
                return Err(DiagramError::InvalidPermutation(format!("{perm:?}")));
            }
            seen[v] = true;
        }
        Ok(Self { perm, marker: None })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (1..=n).collect(),
            marker: None,
        }
    }

    /// Attach marker a, which must be admissible for pattern m.
    pub fn with_marker(mut self, a: usize, pattern: &RecollisionPattern) -> Result<Self, DiagramError> {
        if pattern.n != self.perm.len() || !pattern.in_m_a(a) {
            return Err(DiagramError::InvalidMarker { a });
        }
        self.marker = Some(a);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    /// pi(a) for 1-based a.
    pub fn at(&self, a: usize) -> usize {
        self.perm[a - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Direct,
    Crossing {
        /// All (a, b), a < b, with pi(b) < pi(a).
        pairs: Vec<(usize, usize)>,
        /// For each b having a crossing partner, the smallest such a.
        minimal_per_b: Vec<(usize, usize)>,
        /// Minimal pair for the smallest b that has a crossing partner.
        minimal: (usize, usize),
    },
}

pub fn classify(pi: &Pairing) -> Classification {
    let n = pi.n();
    let mut pairs = Vec::new();
    let mut minimal_per_b = Vec::new();
    for b in 1..=n {
        let mut first = None;
        for a in 1..b {
            if pi.at(b) < pi.at(a) {
                pairs.push((a, b));
                first.get_or_insert(a);
            }
        }
        if let Some(a) = first {
            minimal_per_b.push((a, b));
        }
    }
    if pairs.is_empty() {
        return Classification::Direct;
    }
    pairs.sort_unstable();
    let minimal = minimal_per_b[0];
    Classification::Crossing {
        pairs,
        minimal_per_b,
        minimal,
    }
}

/// Perfect matching on 2N half-edges: 0..N are k_1..k_N, N..2N are the
/// tilde variables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingGraph {
    pub big_n: usize,
    pub partner: Vec<usize>,
}

/// Side and 1-based index of a half-edge.
fn half_edge(big_n: usize, h: usize) -> (bool, usize) {
    if h < big_n {
        (false, h + 1)
    } else {
        (true, h - big_n + 1)
    }
}

impl PairingGraph {
    pub fn new(big_n: usize, partner: Vec<usize>) -> Result<Self, DiagramError> {
        if partner.len() != 2 * big_n {
            return Err(DiagramError::InvalidGraph("wrong number of half-edges".into()));
        }
        for (i, &j) in partner.iter().enumerate() {
            if j >= partner.len() || j == i || partner[j] != i {
                return Err(DiagramError::InvalidGraph(format!("half-edge {i} is not matched to a distinct partner")));
            }
        }
        Ok(Self { big_n, partner })
    }

    /// Graph of the immediate recollision patterns m (upper) and m~ (lower)
    /// with external lines k_{mu(a)} -- k~_{mu~(pi(a))}.
    pub fn from_pattern(m: &RecollisionPattern, mt: &RecollisionPattern, pi: &Pairing) -> Result<Self, DiagramError> {
        if m.big_n != mt.big_n || m.n != mt.n || pi.n() != m.n {
            return Err(DiagramError::InvalidGraph("pattern sizes disagree".into()));
        }
        let big_n = m.big_n;
        let mut partner = vec![usize::MAX; 2 * big_n];
        for (side, pat) in [(0, m), (big_n, mt)] {
            for b in pat.j_set() {
                partner[side + b - 1] = side + b;
                partner[side + b] = side + b - 1;
            }
        }
        let (ext, ext_t) = (m.external(), mt.external());
        for a in 1..=m.n {
            let u = ext[a - 1] - 1;
            let l = big_n + ext_t[pi.at(a) - 1] - 1;
            partner[u] = l;
            partner[l] = u;
        }
        Self::new(big_n, partner)
    }

    /// Same-side pairs (i, j), i < j, 1-based, for one side.
    pub fn same_side_pairs(&self, tilde: bool) -> Vec<(usize, usize)> {
        let off = if tilde { self.big_n } else { 0 };
        (0..self.big_n)
            .filter_map(|i| {
                let j = self.partner[off + i];
                let (side, idx) = half_edge(self.big_n, j);
                (side == tilde && idx > i + 1).then_some((i + 1, idx))
            })
            .collect()
    }

    /// Whether line from half-edge h is internal: pairs (k_a, k_{a+1}).
    pub fn is_internal(&self, h: usize) -> bool {
        let (s1, i1) = half_edge(self.big_n, h);
        let (s2, i2) = half_edge(self.big_n, self.partner[h]);
        s1 == s2 && i1.abs_diff(i2) == 1
    }

    /// Skeleton: drop internal lines and relabel. Returns the external
    /// index sets of both sides and, when every external line joins the two
    /// sides, the induced patterns and pairing.
    pub fn skeleton(&self) -> Skeleton {
        let ext = |tilde: bool| -> Vec<usize> {
            let off = if tilde { self.big_n } else { 0 };
            (0..self.big_n).filter(|&i| !self.is_internal(off + i)).map(|i| i + 1).collect()
        };
        let (up, low) = (ext(false), ext(true));
        let cross_only = up.iter().all(|&i| half_edge(self.big_n, self.partner[i - 1]).0);
        let reduced = if cross_only && up.len() == low.len() {
            let perm: Vec<usize> = up
                .iter()
                .map(|&i| {
                    let (_, j) = half_edge(self.big_n, self.partner[i - 1]);
                    low.iter().position(|&x| x == j).unwrap() + 1
                })
                .collect();
            match (
                RecollisionPattern::from_external(&up, self.big_n),
                RecollisionPattern::from_external(&low, self.big_n),
                Pairing::new(perm),
            ) {
                (Some(m), Some(mt), Ok(pi)) => Some((m, mt, pi)),
                _ => None,
            }
        } else {
            None
        };
        Skeleton {
            upper_external: up,
            lower_external: low,
            reduced,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub upper_external: Vec<usize>,
    pub lower_external: Vec<usize>,
    pub reduced: Option<(RecollisionPattern, RecollisionPattern, Pairing)>,
}

/// j1 < j2 < j3 < j4 with (j1, j4) and (j2, j3) paired on the same side.
pub fn detect_nested(graph: &PairingGraph) -> bool {
    for tilde in [false, true] {
        let pairs = graph.same_side_pairs(tilde);
        for &(a, d) in &pairs {
            if pairs.iter().any(|&(b, c)| a < b && c < d) {
                return true;
            }
        }
    }
    false
}

/// Interior peaks and valleys, 1-based.
pub fn peaks_valleys(perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut peaks = Vec::new();
    let mut valleys = Vec::new();
    for a in 1..perm.len().saturating_sub(1) {
        let (l, c, r) = (perm[a - 1], perm[a], perm[a + 1]);
        if l < c && c > r {
            peaks.push(a + 1);
        } else if l > c && c < r {
            valleys.push(a + 1);
        }
    }
    (peaks, valleys)
}

pub fn peak_count(perm: &[usize]) -> usize {
    perm.windows(3).filter(|w| w[0] < w[1] && w[1] > w[2]).count()
}

fn is_peak(perm: &[usize], a: usize) -> bool {
    a >= 2 && a < perm.len() && perm[a - 2] < perm[a - 1] && perm[a - 1] > perm[a]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StairKind {
    Increasing,
    Decreasing,
}

/// Stairs (a_j, h_j), 1-based bottoms for increasing, tops for decreasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Staircase {
    pub kind: StairKind,
    pub stairs: Vec<(usize, usize)>,
}

impl Staircase {
    /// Tips (increasing) or peaks a_j (decreasing).
    pub fn tips(&self) -> Vec<usize> {
        self.stairs
            .iter()
            .map(|&(a, h)| match self.kind {
                StairKind::Increasing => a + h,
                StairKind::Decreasing => a,
            })
            .collect()
    }
}

/// Check conditions (i)-(v) of a staircase together with the stair shape.
pub fn validate_staircase(perm: &[usize], s: &Staircase) -> Result<(), String> {
    let n = perm.len();
    let p = |a: usize| perm[a - 1];
    if s.stairs.is_empty() {
        return Err("empty staircase".into());
    }
    for &(a, h) in &s.stairs {
        if h < 1 || a < 1 || a + h > n {
            return Err(format!("stair ({a}, {h}) out of range"));
        }
        for i in a..a + h {
            let ok = match s.kind {
                StairKind::Increasing => p(i) < p(i + 1),
                StairKind::Decreasing => p(i) > p(i + 1),
            };
            if !ok {
                return Err(format!("stair ({a}, {h}) not monotone"));
            }
        }
    }
    let k = s.stairs.len();
    for j in 0..k {
        let (a, h) = s.stairs[j];
        // (ii)
        let peak = match s.kind {
            StairKind::Increasing => a + h,
            StairKind::Decreasing => a,
        };
        if !is_peak(perm, peak) {
            return Err(format!("(ii) fails at stair {}", j + 1));
        }
        if j + 1 == k {
            break;
        }
        let (a2, h2) = s.stairs[j + 1];
        // (i)
        if a + h >= a2 {
            return Err(format!("(i) fails at j = {}", j + 1));
        }
        match s.kind {
            StairKind::Increasing => {
                let tip = p(a + h);
                // (iii)
                if tip >= p(a2 + h2) {
                    return Err(format!("(iii) fails at j = {}", j + 1));
                }
                // (iv)
                if (a + 1..a2).any(|q| is_peak(perm, q) && p(q) > tip) {
                    return Err(format!("(iv) fails at j = {}", j + 1));
                }
                // (v)
                if !(p(a2 + 1) > tip && tip > p(a2)) {
                    return Err(format!("(v) fails at j = {}", j + 1));
                }
            }
            StairKind::Decreasing => {
                if p(a) <= p(a2) {
                    return Err(format!("(iii) fails at j = {}", j + 1));
                }
                if (a + 1..a2).any(|q| is_peak(perm, q) && p(q) > p(a2)) {
                    return Err(format!("(iv) fails at j = {}", j + 1));
                }
                if !(p(a + h - 1) > p(a2) && p(a2) > p(a + h)) {
                    return Err(format!("(v) fails at j = {}", j + 1));
                }
            }
        }
    }
    Ok(())
}

/// Backtracking search for a kappa-staircase, candidate peaks tried in
/// order of height.
pub fn find_staircase(perm: &[usize], kind: StairKind, kappa: usize) -> Option<Staircase> {
    if kappa == 0 {
        return None;
    }
    let n = perm.len();
    let p = |a: usize| perm[a - 1];
    let (peaks, _) = peaks_valleys(perm);
    if peaks.len() < kappa {
        return None;
    }
    let mut stairs: Vec<(usize, usize)> = Vec::with_capacity(kappa);
    match kind {
        StairKind::Increasing => {
            // state: previous bottom a_j and tip t_j
            fn rec(
                perm: &[usize],
                peaks: &[usize],
                kappa: usize,
                stairs: &mut Vec<(usize, usize)>,
            ) -> bool {
                if stairs.len() == kappa {
                    return true;
                }
                let p = |a: usize| perm[a - 1];
                let (a_prev, h_prev) = *stairs.last().unwrap();
                let t_prev = a_prev + h_prev;
                let level = p(t_prev);
                let mut cands: Vec<usize> = peaks.iter().copied().filter(|&t| t > t_prev && p(t) > level).collect();
                cands.sort_by_key(|&t| p(t));
                for t in cands {
                    // bottom: the up-run into t crosses the level at a
                    let mut a = t - 1;
                    while a > t_prev && p(a) > level {
                        a -= 1;
                    }
                    if a <= t_prev || p(a) > level || (a + 1..=t).any(|i| p(i - 1) > p(i)) {
                        continue;
                    }
                    if (a_prev + 1..a).any(|q| is_peak(perm, q) && p(q) > level) {
                        continue;
                    }
                    stairs.push((a, t - a));
                    if rec(perm, peaks, kappa, stairs) {
                        return true;
                    }
                    stairs.pop();
                }
                false
            }
            let mut firsts = peaks.clone();
            firsts.sort_by_key(|&t| p(t));
            for t in firsts {
                stairs.clear();
                stairs.push((t - 1, 1));
                if rec(perm, &peaks, kappa, &mut stairs) {
                    return Some(Staircase { kind, stairs });
                }
            }
            None
        }
        StairKind::Decreasing => {
            // stairs hold (a_j, h_j); h_j is fixed once a_{j+1} is chosen
            fn rec(perm: &[usize], peaks: &[usize], kappa: usize, tops: &mut Vec<usize>, ends: &mut Vec<usize>) -> bool {
                if tops.len() == kappa {
                    return true;
                }
                let n = perm.len();
                let p = |a: usize| perm[a - 1];
                let a_prev = *tops.last().unwrap();
                let mut cands: Vec<usize> = peaks.iter().copied().filter(|&a| a > a_prev && p(a) < p(a_prev)).collect();
                cands.sort_by_key(|&a| std::cmp::Reverse(p(a)));
                for a in cands {
                    let level = p(a);
                    // end of the previous down-stair: first e with p(e) < level
                    let mut e = a_prev + 1;
                    while e <= n && p(e) > level && p(e) < p(e - 1) {
                        e += 1;
                    }
                    if e > n || e >= a || !(p(e) < level && p(e) < p(e - 1)) {
                        continue;
                    }
                    if (a_prev + 1..a).any(|q| is_peak(perm, q) && p(q) > level) {
                        continue;
                    }
                    tops.push(a);
                    ends.push(e);
                    if rec(perm, peaks, kappa, tops, ends) {
                        return true;
                    }
                    tops.pop();
                    ends.pop();
                }
                false
            }
            let mut firsts = peaks.clone();
            firsts.sort_by_key(|&a| std::cmp::Reverse(p(a)));
            for a in firsts {
                let mut tops = vec![a];
                let mut ends = Vec::new();
                if rec(perm, &peaks, kappa, &mut tops, &mut ends) {
                    for j in 0..kappa {
                        let e = if j + 1 < kappa { ends[j] } else { tops[j] + 1 };
                        stairs.push((tops[j], e - tops[j]));
                    }
                    debug_assert!(n >= 1);
                    return Some(Staircase { kind, stairs });
                }
            }
            None
        }
    }
}

/// Next permutation in lexicographic order; false when wrapped.
pub fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        v.reverse();
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Parallel fold over all permutations of {1..n}, split into lexicographic
/// blocks by the first two entries; blocks are reduced in order.
pub fn fold_permutations<T, F, R>(n: usize, init: T, f: F, reduce: R) -> T
where
    T: Clone + Send + Sync,
    F: Fn(&mut T, &[usize]) + Sync,
    R: Fn(T, T) -> T + Sync,
{
    if n < 3 {
        let mut acc = init;
        let mut v: Vec<usize> = (1..=n).collect();
        loop {
            f(&mut acc, &v);
            if !next_permutation(&mut v) {
                break;
            }
        }
        return acc;
    }
    let blocks: Vec<(usize, usize)> = (1..=n)
        .flat_map(|a| (1..=n).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let parts: Vec<T> = blocks
        .par_iter()
        .map(|&(a, b)| {
            let mut acc = init.clone();
            let mut v = vec![a, b];
            v.extend((1..=n).filter(|&x| x != a && x != b));
            loop {
                f(&mut acc, &v);
                if !next_permutation(&mut v[2..]) {
                    break;
                }
            }
            acc
        })
        .collect();
    parts.into_iter().fold(init, reduce)
}

/// Exact number of permutations of n with exactly K interior peaks, for
/// every K, by enumeration.
pub fn peak_distribution(n: usize) -> Result<Vec<u128>, DiagramError> {
    if n > EXHAUSTIVE_LIMIT {
        return Err(DiagramError::TooLarge { n, limit: EXHAUSTIVE_LIMIT });
    }
    let slots = n / 2 + 1;
    Ok(fold_permutations(
        n,
        vec![0u128; slots],
        |acc, v| acc[peak_count(v)] += 1,
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        },
    ))
}

/// The counting bound n^{4K+3} (2K+2)^n.
pub fn peak_count_bound(n: usize, k: usize) -> u128 {
    sat_pow(n as u128, 4 * k as u64 + 3).saturating_mul(sat_pow(2 * k as u128 + 2, n as u64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakCount {
    pub n: usize,
    pub max_peaks: usize,
    /// Exact count (exhaustive) or estimate of count (sampled).
    pub count: Estimate,
    pub exhaustive: bool,
    pub bound: u128,
    pub bound_ok: bool,
}

/// Number of permutations with at most K peaks; exhaustive for n <= 10,
/// sampled (count = n! times the sampled fraction) otherwise.
pub fn count_by_max_peaks(n: usize, k: usize, samples: usize, seed: u64) -> PeakCount {
    let bound = peak_count_bound(n, k);
    if n <= EXHAUSTIVE_LIMIT {
        let dist = peak_distribution(n).expect("within limit");
        let c: u128 = dist.iter().take(k + 1).sum();
        return PeakCount {
            n,
            max_peaks: k,
            count: Estimate::exact(c as f64),
            exhaustive: true,
            bound,
            bound_ok: c <= bound,
        };
    }
    let frac = sample_fraction(n, samples, seed, |v| peak_count(v) <= k);
    let fact: f64 = (1..=n).map(|i| i as f64).product();
    let count = Estimate {
        value: frac.value * fact,
        stderr: frac.stderr * fact,
    };
    PeakCount {
        n,
        max_peaks: k,
        count,
        exhaustive: false,
        bound,
        bound_ok: count.value <= bound as f64,
    }
}

fn sample_fraction<F>(n: usize, samples: usize, seed: u64, pred: F) -> Estimate
where
    F: Fn(&[usize]) -> bool + Sync,
{
    let chunk = crate::stats::CHUNK;
    let chunks = samples.div_ceil(chunk);
    let hits: Vec<usize> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, rng::tag::DIAGRAMS | ((n as u64) << 32) | c as u64);
            let len = chunk.min(samples - c * chunk);
            let mut v: Vec<usize> = (1..=n).collect();
            (0..len)
                .filter(|_| {
                    v.shuffle(&mut r);
                    pred(&v)
                })
                .count()
        })
        .collect();
    let h: usize = hits.iter().sum();
    let p = h as f64 / samples.max(1) as f64;
    Estimate {
        value: p,
        stderr: (p * (1.0 - p) / samples.max(1) as f64).sqrt(),
    }
}

/// Longest strictly increasing and decreasing subsequence lengths.
pub fn longest_monotone(seq: &[usize]) -> (usize, usize) {
    fn lis(seq: impl Iterator<Item = usize>) -> usize {
        let mut tails: Vec<usize> = Vec::new();
        for x in seq {
            match tails.binary_search(&x) {
                Ok(_) => {}
                Err(i) if i == tails.len() => tails.push(x),
                Err(i) => tails[i] = x,
            }
        }
        tails.len()
    }
    let m = seq.iter().copied().max().unwrap_or(0);
    (lis(seq.iter().copied()), lis(seq.iter().map(|&x| m - x)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RamseyReport {
    pub alpha: usize,
    pub beta: usize,
    pub threshold: usize,
    pub checked: u64,
    /// Permutations at or above the peak threshold.
    pub applicable: u64,
    pub counterexamples: Vec<Vec<usize>>,
    /// Peak-height sequences with >= alpha beta + 1 peaks and no monotone
    /// subsequence of the required length.
    pub sequence_counterexamples: Vec<Vec<usize>>,
    pub exhaustive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RamseyVerdict {
    NotApplicable,
    Holds(StairKind),
    Counterexample,
}

/// Staircase dichotomy for one permutation.
pub fn ramsey_verdict(perm: &[usize], alpha: usize, beta: usize) -> RamseyVerdict {
    let threshold = binomial((alpha + beta) as u64, alpha as u64) as usize;
    if peak_count(perm) < threshold {
        return RamseyVerdict::NotApplicable;
    }
    if find_staircase(perm, StairKind::Increasing, alpha + 1).is_some() {
        RamseyVerdict::Holds(StairKind::Increasing)
    } else if find_staircase(perm, StairKind::Decreasing, beta + 1).is_some() {
        RamseyVerdict::Holds(StairKind::Decreasing)
    } else {
        RamseyVerdict::Counterexample
    }
}

fn sequence_ok(perm: &[usize], alpha: usize, beta: usize) -> bool {
    let (peaks, _) = peaks_valleys(perm);
    if peaks.len() < alpha * beta + 1 {
        return true;
    }
    let heights: Vec<usize> = peaks.iter().map(|&a| perm[a - 1]).collect();
    let (inc, dec) = longest_monotone(&heights);
    inc > alpha || dec > beta
}

/// Check the staircase lemma and the monotone-subsequence lemma over all
/// permutations of n in `ns` (exhaustive) or `samples` random ones.
pub fn ramsey_check(alpha: usize, beta: usize, ns: &[usize], samples: usize, seed: u64) -> Result<RamseyReport, DiagramError> {
    let mut rep = RamseyReport {
        alpha,
        beta,
        threshold: binomial((alpha + beta) as u64, alpha as u64) as usize,
        exhaustive: samples == 0,
        ..Default::default()
    };
    type Acc = (u64, u64, Vec<Vec<usize>>, Vec<Vec<usize>>);
    let step = |acc: &mut Acc, v: &[usize]| {
        acc.0 += 1;
        match ramsey_verdict(v, alpha, beta) {
            RamseyVerdict::NotApplicable => {}
            RamseyVerdict::Holds(_) => acc.1 += 1,
            RamseyVerdict::Counterexample => {
                acc.1 += 1;
                acc.2.push(v.to_vec());
            }
        }
        if !sequence_ok(v, alpha, beta) {
            acc.3.push(v.to_vec());
        }
    };
    let merge = |mut a: Acc, b: Acc| {
        a.0 += b.0;
        a.1 += b.1;
        a.2.extend(b.2);
        a.3.extend(b.3);
        a
    };
    for &n in ns {
        let acc: Acc = if samples == 0 {
            if n > EXHAUSTIVE_LIMIT {
                return Err(DiagramError::TooLarge { n, limit: EXHAUSTIVE_LIMIT });
            }
            fold_permutations(n, (0, 0, Vec::new(), Vec::new()), step, merge)
        } else {
            let chunk = crate::stats::CHUNK;
            let parts: Vec<Acc> = (0..samples.div_ceil(chunk))
                .into_par_iter()
                .map(|c| {
                    let mut r = rng::stream(seed, rng::tag::DIAGRAMS | ((n as u64) << 32) | c as u64);
                    let mut v: Vec<usize> = (1..=n).collect();
                    let mut acc: Acc = (0, 0, Vec::new(), Vec::new());
                    for _ in 0..chunk.min(samples - c * chunk) {
                        v.shuffle(&mut r);
                        step(&mut acc, &v);
                    }
                    acc
                })
                .collect();
            parts.into_iter().fold((0, 0, Vec::new(), Vec::new()), merge)
        };
        rep.checked += acc.0;
        rep.applicable += acc.1;
        rep.counterexamples.extend(acc.2);
        rep.sequence_counterexamples.extend(acc.3);
    }
    Ok(rep)
}

fn lacks_both(perm: &[usize], kappa: usize) -> bool {
    find_staircase(perm, StairKind::Increasing, kappa).is_none() && find_staircase(perm, StairKind::Decreasing, kappa).is_none()
}

/// Bound n^{4 * 4^{kappa-1} + 3} (2 * 4^{kappa-1} + 2)^n on the exceptional set.
pub fn exceptional_bound(n: usize, kappa: usize) -> u128 {
    let q = 4u128.saturating_pow(kappa.saturating_sub(1) as u32);
    let e = q.saturating_mul(4).saturating_add(3).min(u64::MAX as u128) as u64;
    sat_pow(n as u128, e).saturating_mul(sat_pow(q.saturating_mul(2).saturating_add(2), n as u64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExceptionalReport {
    pub n: usize,
    pub kappa: usize,
    pub fraction: Estimate,
    pub count: Option<u128>,
    pub bound: u128,
    pub bound_ok: Option<bool>,
}

/// Fraction of permutations having neither an increasing nor a decreasing
/// kappa-staircase; exhaustive when samples = 0.
pub fn exceptional_fraction(n: usize, kappa: usize, samples: usize, seed: u64) -> Result<ExceptionalReport, DiagramError> {
    let bound = exceptional_bound(n, kappa);
    if samples == 0 {
        if n > EXHAUSTIVE_LIMIT {
            return Err(DiagramError::TooLarge { n, limit: EXHAUSTIVE_LIMIT });
        }
        let (count, total) = fold_permutations(
            n,
            (0u128, 0u128),
            |acc, v| {
                acc.1 += 1;
                if lacks_both(v, kappa) {
                    acc.0 += 1;
                }
            },
            |a, b| (a.0 + b.0, a.1 + b.1),
        );
        return Ok(ExceptionalReport {
            n,
            kappa,
            fraction: Estimate::exact(count as f64 / total as f64),
            count: Some(count),
            bound,
            bound_ok: Some(count <= bound),
        });
    }
    Ok(ExceptionalReport {
        n,
        kappa,
        fraction: sample_fraction(n, samples, seed, |v| lacks_both(v, kappa)),
        count: None,
        bound,
        bound_ok: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(3, 0), 1);
        assert_eq!(binomial(2, 3), 0);
        assert_eq!(binomial(40, 20), 137_846_528_820);
    }

    #[test]
    fn next_permutation_cycles() {
        let mut v = vec![1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut v) {
            count += 1;
        }
        assert_eq!(count, 6);
        assert_eq!(v, vec![1, 2, 3]);
    }
}
