use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimem::memory::{read_similarity, read_union, MemoryCache, MemoryEntry, OverflowPolicy, ReadMode};
use unimem::Tensor;

fn segment(index: usize, len: usize) -> Vec<MemoryEntry> {
    (0..len)
        .map(|p| MemoryEntry::new(vec![index as f64, p as f64], vec![p as f64], index, p))
        .collect()
}

fn ids(cache: &MemoryCache) -> Vec<(usize, usize)> {
    cache.entries().map(|e| (e.segment_index, e.position)).collect()
}

fn cache_from_keys(keys: &[Vec<f64>]) -> MemoryCache {
    let mut c = MemoryCache::new(keys.len().max(1), OverflowPolicy::Fifo);
    let entries = keys
        .iter()
        .enumerate()
        .map(|(i, k)| MemoryEntry::new(k.clone(), vec![0.0], 0, i))
        .collect();
    c.write(entries).unwrap();
    c
}

/// Full sort of every entry by score, best first, older first on ties.
fn sort_oracle(q: &[f64], keys: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = keys
        .iter()
        .enumerate()
        .map(|(j, key)| (q.iter().zip(key).fold(0.0, |acc, (a, b)| acc + a * b), j))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, j)| j).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fifo_holds_exactly_the_newest_tokens(
        capacity in 1usize..=12,
        lens in prop::collection::vec(0usize..=6, 0..=6),
    ) {
        let mut cache = MemoryCache::new(capacity, OverflowPolicy::Fifo);
        let mut all = Vec::new();
        for (s, &len) in lens.iter().enumerate() {
            let len = len.min(capacity);
            let entries = segment(s, len);
            all.extend(entries.iter().map(|e| (e.segment_index, e.position)));
            cache.write(entries).unwrap();
            let keep = all.len().min(capacity);
            prop_assert_eq!(ids(&cache), all[all.len() - keep..].to_vec());
        }
    }

    #[test]
    fn clear_all_keeps_newest_segment_after_overflow(
        capacity in 1usize..=12,
        lens in prop::collection::vec(0usize..=6, 0..=6),
    ) {
        let mut cache = MemoryCache::new(capacity, OverflowPolicy::ClearAll);
        let mut held: Vec<(usize, usize)> = Vec::new();
        for (s, &len) in lens.iter().enumerate() {
            let len = len.min(capacity);
            let entries = segment(s, len);
            let fresh: Vec<_> = entries.iter().map(|e| (e.segment_index, e.position)).collect();
            cache.write(entries).unwrap();
            if held.len() + fresh.len() > capacity {
                held = fresh;
            } else {
                held.extend(fresh);
            }
            prop_assert_eq!(ids(&cache), held.clone());
            prop_assert!(cache.len() <= capacity);
        }
    }

    #[test]
    fn similarity_matches_full_sort(
        n in 0usize..=64,
        d in 1usize..=32,
        k in 1usize..=70,
        coarse in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse integer entries force plenty of exact ties.
        let draw = |rng: &mut ChaCha8Rng| if coarse {
            rng.gen_range(-1i32..=1) as f64
        } else {
            rng.gen_range(-1.0..1.0)
        };
        let keys: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| draw(&mut rng)).collect()).collect();
        let rows = 3;
        let q: Vec<f64> = (0..rows * d).map(|_| draw(&mut rng)).collect();
        let query = Tensor::matrix(rows, d, q);
        let cache = cache_from_keys(&keys);
        let got = read_similarity(&query, &cache, k).unwrap();
        for (i, picks) in got.iter().enumerate() {
            prop_assert_eq!(picks, &sort_oracle(query.row(i), &keys, k));
        }
    }

    #[test]
    fn union_is_the_union_of_modes(
        n in 0usize..=12,
        topk in 1usize..=4,
        window in 0usize..=4,
        globals in 0usize..=3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let query = Tensor::matrix(2, 2, vec![0.3, -0.7, 1.0, 0.2]);
        let cache = cache_from_keys(&keys);
        let modes = [ReadMode::Similarity { topk }, ReadMode::Position { window, globals }];
        let got = read_union(&query, &cache, &modes, seed).unwrap();
        let sim = read_similarity(&query, &cache, topk).unwrap();
        for i in 0..2 {
            let mut want: BTreeSet<usize> = sim[i].iter().copied().collect();
            want.extend(n.saturating_sub(window)..n);
            want.extend(0..globals.min(n));
            prop_assert_eq!(&got[i], &want.into_iter().collect::<Vec<_>>());
        }
        let all = read_union(&query, &cache, &[ReadMode::All], 0).unwrap();
        prop_assert!(all.iter().all(|row| *row == (0..n).collect::<Vec<_>>()));
    }

    #[test]
    fn random_reads_are_seeded(n in 0usize..=12, count in 0usize..=5, seed in any::<u64>()) {
        let keys: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let cache = cache_from_keys(&keys);
        let query = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]);
        let modes = [ReadMode::Random { count }];
        let a = read_union(&query, &cache, &modes, seed).unwrap();
        prop_assert_eq!(&a, &read_union(&query, &cache, &modes, seed).unwrap());
        for row in &a {
            prop_assert_eq!(row.len(), count.min(n));
            prop_assert!(row.iter().all(|&j| j < n));
        }
    }
}

#[test]
fn similarity_ties_prefer_older_entries() {
    let keys = vec![vec![1.0], vec![2.0], vec![2.0], vec![1.0]];
    let cache = cache_from_keys(&keys);
    let q = Tensor::matrix(1, 1, vec![1.0]);
    assert_eq!(read_similarity(&q, &cache, 3).unwrap(), vec![vec![1, 2, 0]]);
}
