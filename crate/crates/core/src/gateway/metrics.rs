use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Upper bucket bounds in seconds; a final overflow bucket catches the rest.
pub const LATENCY_BUCKETS_S: [f64; 10] =
    [0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 1.0, 5.0];

#[derive(Debug, Default)]
pub struct Histogram {
    counts: [AtomicU64; LATENCY_BUCKETS_S.len() + 1],
    sum_us: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSnapshot {
    pub bounds_s: Vec<f64>,
    /// One count per bound plus the overflow bucket.
    pub counts: Vec<u64>,
    pub count: u64,
    pub sum_s: f64,
}

impl Histogram {
    pub fn observe(&self, seconds: f64) {
        let i = LATENCY_BUCKETS_S
            .iter()
            .position(|&b| seconds <= b)
            .unwrap_or(LATENCY_BUCKETS_S.len());
        self.counts[i].fetch_add(1, Ordering::Relaxed);
        self.sum_us
            .fetch_add((seconds.max(0.0) * 1e6).round() as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> HistogramSnapshot {
        let counts: Vec<u64> = self
            .counts
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect();
        HistogramSnapshot {
            bounds_s: LATENCY_BUCKETS_S.to_vec(),
            count: counts.iter().sum(),
            counts,
            sum_s: self.sum_us.load(Ordering::Relaxed) as f64 / 1e6,
        }
    }
}

#[derive(Debug, Default)]
pub struct Metrics {
    pub requests_total: AtomicU64,
    pub routed_total: AtomicU64,
    pub degraded_total: AtomicU64,
    pub errors_total: AtomicU64,
    pub remote_calls_total: AtomicU64,
    pub local_latency: Histogram,
    pub remote_latency: Histogram,
    pub total_latency: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub requests_total: u64,
    /// Responses answered by the remote backend.
    pub routed_total: u64,
    pub degraded_total: u64,
    pub errors_total: u64,
    /// Requests that decided to call the remote backend, successful or not.
    pub remote_calls_total: u64,
    pub local_latency: HistogramSnapshot,
    pub remote_latency: HistogramSnapshot,
    pub total_latency: HistogramSnapshot,
}

impl Metrics {
    /// Outcome counters are read before `requests_total`, which is bumped
    /// first on every request, so a snapshot never shows more outcomes
    /// than requests.
    pub fn snapshot(&self) -> MetricsSnapshot {
        let routed_total = self.routed_total.load(Ordering::SeqCst);
        let degraded_total = self.degraded_total.load(Ordering::SeqCst);
        let errors_total = self.errors_total.load(Ordering::SeqCst);
        let remote_calls_total = self.remote_calls_total.load(Ordering::SeqCst);
        let requests_total = self.requests_total.load(Ordering::SeqCst);
        MetricsSnapshot {
            requests_total,
            routed_total,
            degraded_total,
            errors_total,
            remote_calls_total,
            local_latency: self.local_latency.snapshot(),
            remote_latency: self.remote_latency.snapshot(),
            total_latency: self.total_latency.snapshot(),
        }
    }
}
