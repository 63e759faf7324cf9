use phonon_kinetics::diagrams::*;
use phonon_kinetics::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn all_perms(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut v: Vec<usize> = (1..=n).collect();
    loop {
        out.push(v.clone());
        if !next_permutation(&mut v) {
            break;
        }
    }
    out
}

#[test]
fn pattern_counts_and_examples() {
    let one = enumerate_patterns(4, 4).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].m, vec![0; 5]);
    let p = enumerate_patterns(1, 3).unwrap();
    let ms: Vec<Vec<usize>> = p.iter().map(|x| x.m.clone()).collect();
    assert_eq!(ms.len(), 2);
    assert!(ms.contains(&vec![1, 0]) && ms.contains(&vec![0, 1]));
    assert_eq!(enumerate_patterns(2, 3), Err(DiagramError::ParityMismatch { n: 2, big_n: 3 }));
    for big_n in 0..=9 {
        for n in (big_n % 2..=big_n).step_by(2) {
            let pats = enumerate_patterns(n, big_n).unwrap();
            let k = ((big_n - n) / 2 + n) as u64;
            assert_eq!(pats.len() as u128, binomial(k, n as u64), "n {n} N {big_n}");
            for pat in &pats {
                let (j, jc) = (pat.j_set(), pat.j_complement());
                assert_eq!(j.len(), pat.size());
                assert_eq!(jc.len(), n + pat.size() + 1);
                let mut all: Vec<usize> = j.iter().chain(&jc).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..=big_n).collect::<Vec<_>>());
                let mu = pat.mu();
                assert_eq!(mu[0], 0);
                assert_eq!(mu[n + 1], big_n + 1);
                for w in mu.windows(2) {
                    assert_eq!((w[1] - w[0]) % 2, 1);
                }
            }
        }
    }
}

#[test]
fn marker_constraints() {
    let pat = RecollisionPattern::new(vec![0, 1, 0]);
    assert!(pat.in_m_a(2));
    let pi = Pairing::identity(2);
    assert!(pi.clone().with_marker(2, &pat).is_ok());
    let bad = RecollisionPattern::new(vec![0, 0, 1]);
    assert!(!bad.in_m_a(2));
    assert_eq!(pi.with_marker(2, &bad), Err(DiagramError::InvalidMarker { a: 2 }));
}

#[test]
fn classification_examples() {
    assert_eq!(classify(&Pairing::identity(5)), Classification::Direct);
    match classify(&Pairing::new(vec![2, 1]).unwrap()) {
        Classification::Crossing { pairs, minimal, .. } => {
            assert_eq!(pairs, vec![(1, 2)]);
            assert_eq!(minimal, (1, 2));
        }
        _ => panic!("expected crossing"),
    }
    assert!(Pairing::new(vec![1, 1]).is_err());
}

#[test]
fn crossing_pairs_match_brute_force() {
    let mut r = rng::stream(1, rng::tag::DIAGRAMS);
    for _ in 0..200 {
        let mut v: Vec<usize> = (1..=7).collect();
        v.shuffle(&mut r);
        let pi = Pairing::new(v.clone()).unwrap();
        let mut brute = Vec::new();
        for a in 1..=7 {
            for b in a + 1..=7 {
                if v[b - 1] < v[a - 1] {
                    brute.push((a, b));
                }
            }
        }
        match classify(&pi) {
            Classification::Direct => assert!(brute.is_empty()),
            Classification::Crossing { pairs, minimal_per_b, .. } => {
                assert_eq!(pairs, brute);
                for (a, b) in minimal_per_b {
                    assert!(v[a - 1] > v[b - 1]);
                    assert!((1..a).all(|c| v[c - 1] < v[b - 1]));
                }
            }
        }
    }
}

/// All perfect matchings of 2N half-edges.
fn all_matchings(m: usize) -> Vec<Vec<usize>> {
    fn rec(partner: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let Some(i) = partner.iter().position(|&x| x == usize::MAX) else {
            out.push(partner.clone());
            return;
        };
        for j in i + 1..partner.len() {
            if partner[j] == usize::MAX {
                partner[i] = j;
                partner[j] = i;
                rec(partner, out);
                partner[i] = usize::MAX;
                partner[j] = usize::MAX;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut vec![usize::MAX; m], &mut out);
    out
}

#[test]
fn nested_detection_examples_and_exhaustive() {
    let ladder = PairingGraph::new(3, vec![3, 4, 5, 0, 1, 2]).unwrap();
    assert!(!detect_nested(&ladder));
    // (k1, k4), (k2, k3), tilde side laddered among themselves
    let g = PairingGraph::new(4, vec![3, 2, 1, 0, 7, 6, 5, 4]).unwrap();
    assert!(detect_nested(&g));
    let big_n = 5;
    let ms = all_matchings(2 * big_n);
    assert_eq!(ms.len(), 945);
    let mut count = 0;
    let mut brute_count = 0;
    for partner in ms {
        let g = PairingGraph::new(big_n, partner.clone()).unwrap();
        if detect_nested(&g) {
            count += 1;
        }
        let mut nested = false;
        for off in [0, big_n] {
            for j1 in 0..big_n {
                for j2 in j1 + 1..big_n {
                    for j3 in j2 + 1..big_n {
                        for j4 in j3 + 1..big_n {
                            if partner[off + j1] == off + j4 && partner[off + j2] == off + j3 {
                                nested = true;
                            }
                        }
                    }
                }
            }
        }
        if nested {
            brute_count += 1;
        }
    }
    assert_eq!(count, brute_count);
    assert!(count > 0);
}

#[test]
fn skeleton_round_trip() {
    for big_n in 1..=7 {
        for n in (big_n % 2..=big_n).step_by(2) {
            let pats = enumerate_patterns(n, big_n).unwrap();
            let perms = all_perms(n);
            for m in &pats {
                for mt in &pats {
                    for p in perms.iter().take(6) {
                        let pi = Pairing::new(p.clone()).unwrap();
                        let g = PairingGraph::from_pattern(m, mt, &pi).unwrap();
                        let sk = g.skeleton();
                        assert_eq!(sk.reduced, Some((m.clone(), mt.clone(), pi)));
                    }
                }
            }
        }
    }
}

#[test]
fn peak_examples() {
    assert_eq!(peaks_valleys(&[1, 2, 3, 4]), (vec![], vec![]));
    assert_eq!(peaks_valleys(&[1, 3, 2]), (vec![2], vec![]));
}

proptest! {
    #[test]
    fn peaks_and_valleys_alternate(seed in any::<u64>(), n in 1usize..30) {
        let mut r = rng::stream(seed, rng::tag::DIAGRAMS);
        let mut v: Vec<usize> = (1..=n).collect();
        v.shuffle(&mut r);
        let (p, q) = peaks_valleys(&v);
        let mut marks: Vec<(usize, bool)> = p.iter().map(|&a| (a, true)).chain(q.iter().map(|&a| (a, false))).collect();
        marks.sort_unstable();
        for w in marks.windows(2) {
            prop_assert_ne!(w[0].1, w[1].1);
        }
        prop_assert!(p.iter().chain(&q).all(|&a| a > 1 && a < n));
    }

    #[test]
    fn found_staircases_validate(seed in any::<u64>(), n in 3usize..16, kappa in 1usize..4) {
        let mut r = rng::stream(seed, rng::tag::DIAGRAMS);
        let mut v: Vec<usize> = (1..=n).collect();
        v.shuffle(&mut r);
        for kind in [StairKind::Increasing, StairKind::Decreasing] {
            if let Some(s) = find_staircase(&v, kind, kappa) {
                prop_assert_eq!(s.stairs.len(), kappa);
                prop_assert!(validate_staircase(&v, &s).is_ok(), "{:?} {:?}", v, s);
            }
        }
    }
}

#[test]
fn peak_counts_small() {
    let c = count_by_max_peaks(3, 0, 0, 0);
    assert_eq!(c.count.value, 4.0);
    assert_eq!(c.bound, 216);
    assert!(c.bound_ok);
    assert_eq!(count_by_max_peaks(3, 1, 0, 0).count.value, 6.0);
    let c = count_by_max_peaks(8, 2, 0, 0);
    assert!(c.bound_ok && c.exhaustive);
    // the four peak-free permutations of 3 by hand
    let free: Vec<Vec<usize>> = all_perms(3).into_iter().filter(|v| peak_count(v) == 0).collect();
    assert_eq!(free, vec![vec![1, 2, 3], vec![2, 1, 3], vec![3, 1, 2], vec![3, 2, 1]]);
}

#[test]
fn peak_distribution_matches_recurrence() {
    // T(n, k) = (2k + 2) T(n-1, k) + (n - 2k) T(n-1, k-1)
    let mut t: Vec<Vec<u128>> = vec![vec![1], vec![1], vec![2]];
    for n in 3..=10usize {
        let prev = &t[n - 1];
        let row: Vec<u128> = (0..=n / 2)
            .map(|k| {
                let a = prev.get(k).copied().unwrap_or(0) * (2 * k as u128 + 2);
                let b = if k >= 1 { prev.get(k - 1).copied().unwrap_or(0) * (n as u128 - 2 * k as u128) } else { 0 };
                a + b
            })
            .collect();
        t.push(row);
    }
    for n in 1..=9 {
        let d = peak_distribution(n).unwrap();
        let expect: Vec<u128> = (0..d.len()).map(|k| t[n].get(k).copied().unwrap_or(0)).collect();
        assert_eq!(d, expect, "n = {n}");
        let fact: u128 = (1..=n as u128).product();
        assert_eq!(d.iter().sum::<u128>(), fact);
    }
    assert_eq!(peak_distribution(11), Err(DiagramError::TooLarge { n: 11, limit: 10 }));
}

fn exists_brute(v: &[usize], kind: StairKind, kappa: usize) -> bool {
    let (peaks, _) = peaks_valleys(v);
    if peaks.len() < kappa {
        return false;
    }
    // every kappa-subset of peaks and every admissible stair length
    fn subsets(peaks: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..peaks.len() {
            cur.push(peaks[i]);
            subsets(peaks, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut subs = Vec::new();
    subsets(&peaks, kappa, 0, &mut Vec::new(), &mut subs);
    let n = v.len();
    for s in subs {
        let mut choice = vec![1usize; kappa];
        loop {
            let stairs: Option<Vec<(usize, usize)>> = s
                .iter()
                .zip(&choice)
                .map(|(&t, &h)| match kind {
                    StairKind::Increasing => (h < t).then(|| (t - h, h)),
                    StairKind::Decreasing => (t + h <= n).then_some((t, h)),
                })
                .collect();
            if let Some(stairs) = stairs {
                if validate_staircase(v, &Staircase { kind, stairs }).is_ok() {
                    return true;
                }
            }
            let mut i = 0;
            loop {
                if i == kappa {
                    break;
                }
                choice[i] += 1;
                if choice[i] < n {
                    break;
                }
                choice[i] = 1;
                i += 1;
            }
            if i == kappa {
                break;
            }
        }
    }
    false
}

#[test]
fn staircase_search_is_complete_up_to_eight() {
    for n in 1..=8 {
        for v in all_perms(n) {
            for kappa in 1..=3 {
                for kind in [StairKind::Increasing, StairKind::Decreasing] {
                    let found = find_staircase(&v, kind, kappa);
                    if let Some(s) = &found {
                        assert!(validate_staircase(&v, s).is_ok());
                    }
                    assert_eq!(found.is_some(), exists_brute(&v, kind, kappa), "{v:?} {kind:?} {kappa}");
                }
            }
        }
    }
}

#[test]
fn staircase_examples() {
    for kind in [StairKind::Increasing, StairKind::Decreasing] {
        for kappa in 1..4 {
            assert!(find_staircase(&[1, 2, 3, 4, 5, 6], kind, kappa).is_none());
        }
    }
    // two peaks with increasing heights always give an increasing 2-staircase
    for n in 3..=8 {
        for v in all_perms(n) {
            let (peaks, _) = peaks_valleys(&v);
            let inc = peaks.iter().any(|&a| peaks.iter().any(|&b| b > a && v[b - 1] > v[a - 1]));
            if inc {
                assert!(find_staircase(&v, StairKind::Increasing, 2).is_some(), "{v:?}");
            }
            let dec = peaks.iter().any(|&a| peaks.iter().any(|&b| b > a && v[b - 1] < v[a - 1]));
            if dec {
                assert!(find_staircase(&v, StairKind::Decreasing, 2).is_some(), "{v:?}");
            }
        }
    }
}

#[test]
fn ramsey_small_cases() {
    let rep = ramsey_check(1, 1, &[3, 4, 5, 6, 7, 8, 9], 0, 0).unwrap();
    assert_eq!(rep.threshold, 2);
    assert!(rep.counterexamples.is_empty());
    assert!(rep.sequence_counterexamples.is_empty());
    assert!(rep.applicable > 0);
    assert_eq!(ramsey_verdict(&[1, 3, 2], 1, 1), RamseyVerdict::NotApplicable);
}

#[test]
fn exceptional_fraction_examples() {
    let r = exceptional_fraction(3, 1, 0, 0).unwrap();
    assert_eq!(r.count, Some(4));
    assert!((r.fraction.value - 4.0 / 6.0).abs() < 1e-15);
    assert_eq!(r.bound_ok, Some(true));
    let r = exceptional_fraction(5, 3, 0, 0).unwrap();
    assert_eq!(r.fraction.value, 1.0);
    let f: Vec<f64> = [12, 16, 20]
        .iter()
        .map(|&n| exceptional_fraction(n, 2, 100_000, 7).unwrap().fraction.value)
        .collect();
    assert!(f[0] > f[1] && f[1] > f[2], "{f:?}");
}

#[test]
fn sampled_peak_count_mode() {
    let c = count_by_max_peaks(14, 2, 50_000, 3);
    assert!(!c.exhaustive);
    assert!(c.count.stderr > 0.0);
    assert!(c.bound_ok);
}
