use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::time::Instant;

use serde::Serialize;

use super::{score_bound, score_entry, QueryProfile, RetrievalError, Score, Timing};
use crate::bank::MemoryBank;
use crate::layout::SalientLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrieveOptions {
    pub m: usize,
    pub workers: usize,
    /// Skip entries whose [`score_bound`] cannot beat the current m-th best.
    pub prune: bool,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        Self {
            m: 3,
            workers: 1,
            prune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Hit {
    /// Ingest position in the bank.
    pub index: usize,
    pub id: String,
    pub score: Score,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ScanCounters {
    pub scored: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub fingerprint: String,
    pub counters: ScanCounters,
    pub timing: Timing,
}

/// Higher score first, then earlier ingest position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Ranked {
    score: Score,
    index: usize,
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.cmp(&other.score).then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Best `m` of a contiguous index range, scanned in increasing index order.
fn scan_chunk(
    bank: &MemoryBank,
    profile: &QueryProfile,
    range: std::ops::Range<usize>,
    m: usize,
    prune: bool,
) -> (Vec<Ranked>, ScanCounters) {
    // min-heap on rank: the top is the current m-th best
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(m + 1);
    let mut counters = ScanCounters::default();
    for index in range {
        let entry = &bank.entries()[index];
        if prune && heap.len() == m {
            let worst = heap.peek().expect("heap is full").0;
            // ties lose to the earlier index already held, so `<=` is safe
            if score_bound(profile.counts(), entry.counts()) <= worst.score {
                counters.pruned += 1;
                continue;
            }
        }
        counters.scored += 1;
        let r = Ranked {
            score: score_entry(profile, entry),
            index,
        };
        if heap.len() < m {
            heap.push(Reverse(r));
        } else if r > heap.peek().expect("heap is full").0 {
            heap.pop();
            heap.push(Reverse(r));
        }
    }
    (heap.into_iter().map(|r| r.0).collect(), counters)
}

/// Exact top-m for an already profiled query.
pub fn retrieve_profile(bank: &MemoryBank, profile: &QueryProfile, options: RetrieveOptions) -> Result<RetrievalResult, RetrievalError> {
    if bank.is_empty() {
        return Err(RetrievalError::EmptyBank);
    }
    if options.m == 0 || options.workers == 0 {
        return Err(RetrievalError::Argument("m and workers must be positive".into()));
    }
    if profile.canvas() != bank.canvas() {
        return Err(RetrievalError::Mismatch(format!(
            "canvas {} vs bank {}",
            profile.canvas(),
            bank.canvas()
        )));
    }
    if profile.counts().len() != bank.taxonomy().c_o() {
        return Err(RetrievalError::Mismatch("foreground category count differs from the bank".into()));
    }
    let n = bank.len();
    let workers = options.workers.min(n);
    let chunk = n.div_ceil(workers);
    let started = Instant::now();
    let partials: Vec<(Vec<Ranked>, ScanCounters)> = if workers == 1 {
        vec![scan_chunk(bank, profile, 0..n, options.m, options.prune)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = w * chunk..((w + 1) * chunk).min(n);
                    s.spawn(move || scan_chunk(bank, profile, range, options.m, options.prune))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("scan worker panicked")).collect()
        })
    };
    let scan = started.elapsed();

    let started = Instant::now();
    let mut counters = ScanCounters::default();
    let mut all = Vec::with_capacity(workers * options.m);
    for (ranked, c) in partials {
        counters.scored += c.scored;
        counters.pruned += c.pruned;
        all.extend(ranked);
    }
    all.sort_unstable_by(|a, b| b.cmp(a));
    all.truncate(options.m);
    let hits = all
        .into_iter()
        .map(|r| Hit {
            index: r.index,
            id: bank.entries()[r.index].id().to_string(),
            score: r.score,
        })
        .collect();
    let merge = started.elapsed();
    Ok(RetrievalResult {
        hits,
        fingerprint: profile.fingerprint(),
        counters,
        timing: Timing {
            profile: Default::default(),
            scan,
            merge,
        },
    })
}

/// Ranks the bank against a query layout; equal scores keep ingest order.
pub fn retrieve_top_m(bank: &MemoryBank, query: &SalientLayout, options: RetrieveOptions) -> Result<RetrievalResult, RetrievalError> {
    if bank.is_empty() {
        return Err(RetrievalError::EmptyBank);
    }
    let started = Instant::now();
    let profile = QueryProfile::from_layout(query, bank.taxonomy())?;
    let profiled = started.elapsed();
    let mut result = retrieve_profile(bank, &profile, options)?;
    result.timing.profile = profiled;
    Ok(result)
}
