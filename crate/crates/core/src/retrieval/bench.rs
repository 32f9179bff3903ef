use std::time::Instant;

use serde::Serialize;

use super::topm::retrieve_profile;
use super::{score_entry, QueryProfile, RetrievalError, RetrieveOptions};
use crate::bank::MemoryBank;
use crate::layout::SalientLayout;

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub workers: usize,
    pub m: usize,
    pub prune: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            m: 3,
            prune: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    pub fn from_ms(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        let pick = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
        Self {
            samples: v.len(),
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            p50_ms: pick(0.5),
            p95_ms: pick(0.95),
            p99_ms: pick(0.99),
            max_ms: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScanPass {
    pub workers: usize,
    /// Sum of the per-query scan times.
    pub total_s: f64,
    /// Wall clock around the whole pass.
    pub wall_s: f64,
    pub per_query_ms: Vec<f64>,
    pub scored: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub entries: usize,
    pub queries: usize,
    pub available_parallelism: usize,
    /// Single scoring calls, one worker.
    pub per_entry: LatencySummary,
    pub single: ScanPass,
    pub parallel: ScanPass,
    /// `single.total_s / parallel.total_s`.
    pub speedup: f64,
    /// Fraction of entries skipped by the bound in the parallel pass.
    pub prune_rate: f64,
}

fn pass(bank: &MemoryBank, profiles: &[QueryProfile], options: RetrieveOptions) -> Result<ScanPass, RetrievalError> {
    let mut out = ScanPass {
        workers: options.workers,
        ..Default::default()
    };
    let wall = Instant::now();
    for p in profiles {
        let t = Instant::now();
        let r = retrieve_profile(bank, p, options)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        out.per_query_ms.push(ms);
        out.total_s += ms / 1e3;
        out.scored += r.counters.scored;
        out.pruned += r.counters.pruned;
    }
    out.wall_s = wall.elapsed().as_secs_f64();
    Ok(out)
}

/// Times single scoring calls, then whole scans at one worker and at
/// `options.workers`.
pub fn bench_retrieval(bank: &MemoryBank, queries: &[SalientLayout], options: BenchOptions) -> Result<BenchReport, RetrievalError> {
    if bank.is_empty() {
        return Err(RetrievalError::EmptyBank);
    }
    let profiles = queries
        .iter()
        .map(|q| QueryProfile::from_layout(q, bank.taxonomy()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut latencies = Vec::with_capacity(bank.len() * profiles.len());
    for p in &profiles {
        for e in bank.entries() {
            let t = Instant::now();
            std::hint::black_box(score_entry(p, std::hint::black_box(e)));
            latencies.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }

    let base = RetrieveOptions {
        m: options.m,
        workers: 1,
        prune: options.prune,
    };
    let single = pass(bank, &profiles, base)?;
    let parallel = pass(
        bank,
        &profiles,
        RetrieveOptions {
            workers: options.workers,
            ..base
        },
    )?;
    let visited = (parallel.scored + parallel.pruned).max(1);
    Ok(BenchReport {
        entries: bank.len(),
        queries: profiles.len(),
        available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        per_entry: LatencySummary::from_ms(latencies),
        speedup: if parallel.total_s > 0.0 {
            single.total_s / parallel.total_s
        } else {
            0.0
        },
        prune_rate: parallel.pruned as f64 / visited as f64,
        single,
        parallel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let s = LatencySummary::from_ms((1..=100).map(|v| v as f64).collect());
        assert_eq!(s.samples, 100);
        assert_eq!(s.mean_ms, 50.5);
        assert_eq!(s.max_ms, 100.0);
        assert_eq!(s.p50_ms, 51.0);
        assert_eq!(s.p99_ms, 99.0);
        assert_eq!(LatencySummary::from_ms(vec![]), LatencySummary::default());
    }
}
