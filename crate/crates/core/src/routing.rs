//! Confidence-threshold routing between a local and a remote model.
//!
//! A query goes to the remote model iff its confidence is strictly below
//! the threshold. Thresholds are swept over empirical quantiles of a score
//! set so the curve spans routing rates from 0 to 1.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::confidence::{ConfidenceScore, ScoreRecord};
use crate::error::{Error, Result};
use crate::types::{Dataset, PredictionRecord};

pub const DEFAULT_STEPS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingPolicy {
    pub threshold: f64,
    pub quantile_step: Option<u32>,
}

impl RoutingPolicy {
    pub fn fixed(threshold: f64) -> Self {
        RoutingPolicy {
            threshold,
            quantile_step: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteDecision {
    Local,
    Remote,
}

/// Remote iff `score < threshold`.
pub fn route(score: &ConfidenceScore, policy: &RoutingPolicy) -> RouteDecision {
    route_value(score.value, policy.threshold)
}

pub fn route_value(value: f64, threshold: f64) -> RouteDecision {
    if value < threshold {
        RouteDecision::Remote
    } else {
        RouteDecision::Local
    }
}

/// Thresholds for `p = 0..=steps`.
///
/// For `p < steps` the threshold is the sorted score at 0-based rank
/// `floor(p * N / steps)`, so a tie-free sample routes exactly that many
/// items under the strict rule. The last threshold sits just above the
/// maximum and routes everything.
pub fn quantile_thresholds(scores: &[f64], steps: u32) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("scores".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {s}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let max = sorted[n - 1];
    Ok((0..=steps)
        .map(|p| {
            let rank = (p as usize * n) / steps as usize;
            if p == steps || rank >= n {
                next_up(max)
            } else {
                sorted[rank]
            }
        })
        .collect())
}

pub fn quantile_policies(scores: &[f64], steps: u32) -> Result<Vec<RoutingPolicy>> {
    Ok(quantile_thresholds(scores, steps)?
        .into_iter()
        .enumerate()
        .map(|(p, threshold)| RoutingPolicy {
            threshold,
            quantile_step: Some(p as u32),
        })
        .collect())
}

/// Smallest double strictly greater than `x` (finite `x`).
pub fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub routing_rate: f64,
    pub accuracy: f64,
    pub mean_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub points: Vec<CurvePoint>,
}

impl TradeoffCurve {
    /// CSV with header `routing_rate,accuracy,mean_latency_s`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("routing_rate,accuracy,mean_latency_s\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{}",
                p.routing_rate, p.accuracy, p.mean_latency_s
            );
        }
        out
    }
}

/// Per-query facts the curve needs, already joined across sources.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingItem {
    pub score: f64,
    pub local_correct: bool,
    pub remote_correct: bool,
    pub local_per_token_s: f64,
    pub remote_per_token_s: f64,
}

/// Join predictions, scores and truths on query id, in dataset order.
pub fn join_items(
    local: &[PredictionRecord],
    remote: &[PredictionRecord],
    scores: &[ScoreRecord],
    truths: &Dataset,
) -> Result<Vec<RoutingItem>> {
    let local: HashMap<&str, &PredictionRecord> =
        local.iter().map(|p| (p.query_id.as_str(), p)).collect();
    let remote: HashMap<&str, &PredictionRecord> =
        remote.iter().map(|p| (p.query_id.as_str(), p)).collect();
    let scores: HashMap<&str, &ScoreRecord> =
        scores.iter().map(|s| (s.query_id.as_str(), s)).collect();
    truths
        .records
        .iter()
        .map(|r| {
            let id = r.id.as_str();
            let missing = |what: &str| Error::Alignment(format!("no {what} for query {id:?}"));
            let l = local.get(id).ok_or_else(|| missing("local prediction"))?;
            let m = remote.get(id).ok_or_else(|| missing("remote prediction"))?;
            let s = scores.get(id).ok_or_else(|| missing("score"))?;
            Ok(RoutingItem {
                score: s.score()?.value,
                local_correct: r.ground_truth.is_matched_by(&l.answer),
                remote_correct: r.ground_truth.is_matched_by(&m.answer),
                local_per_token_s: l.per_token_latency(),
                remote_per_token_s: m.per_token_latency(),
            })
        })
        .collect()
}

/// Join without ground truth: the remote answer is the reference, so
/// "accuracy" reads as agreement with the remote model.
pub fn join_items_against_remote(
    local: &[PredictionRecord],
    remote: &[PredictionRecord],
    scores: &[ScoreRecord],
) -> Result<Vec<RoutingItem>> {
    let remote_by: HashMap<&str, &PredictionRecord> =
        remote.iter().map(|p| (p.query_id.as_str(), p)).collect();
    let scores: HashMap<&str, &ScoreRecord> =
        scores.iter().map(|s| (s.query_id.as_str(), s)).collect();
    local
        .iter()
        .map(|l| {
            let id = l.query_id.as_str();
            let m = remote_by
                .get(id)
                .ok_or_else(|| Error::Alignment(format!("no remote prediction for {id:?}")))?;
            let s = scores
                .get(id)
                .ok_or_else(|| Error::Alignment(format!("no score for {id:?}")))?;
            Ok(RoutingItem {
                score: s.score()?.value,
                local_correct: l.answer.trim() == m.answer.trim(),
                remote_correct: true,
                local_per_token_s: l.per_token_latency(),
                remote_per_token_s: m.per_token_latency(),
            })
        })
        .collect()
}

pub fn curve_from_items(items: &[RoutingItem], thresholds: &[f64]) -> Result<TradeoffCurve> {
    if items.is_empty() {
        return Err(Error::Empty("routing items".into()));
    }
    let n = items.len() as f64;
    let points = thresholds
        .iter()
        .map(|&t| {
            let mut routed = 0usize;
            let mut correct = 0usize;
            let mut latency = 0.0;
            for it in items {
                let (ok, lat) = match route_value(it.score, t) {
                    RouteDecision::Remote => {
                        routed += 1;
                        (it.remote_correct, it.remote_per_token_s)
                    }
                    RouteDecision::Local => (it.local_correct, it.local_per_token_s),
                };
                correct += usize::from(ok);
                latency += lat;
            }
            CurvePoint {
                threshold: t,
                routing_rate: routed as f64 / n,
                accuracy: correct as f64 / n,
                mean_latency_s: latency / n,
            }
        })
        .collect();
    Ok(TradeoffCurve { points })
}

/// System accuracy and latency at each threshold.
pub fn tradeoff_curve(
    local: &[PredictionRecord],
    remote: &[PredictionRecord],
    scores: &[ScoreRecord],
    truths: &Dataset,
    thresholds: &[f64],
) -> Result<TradeoffCurve> {
    curve_from_items(&join_items(local, remote, scores, truths)?, thresholds)
}

/// Expected accuracy when a fraction `r` is routed uniformly at random.
pub fn random_baseline(acc_local: f64, acc_remote: f64, rates: &[f64]) -> Result<Vec<(f64, f64)>> {
    for a in [acc_local, acc_remote] {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Range(a));
        }
    }
    Ok(rates
        .iter()
        .map(|&r| (r, (1.0 - r) * acc_local + r * acc_remote))
        .collect())
}

/// Smallest routing rate whose accuracy reaches `target`.
pub fn parity_routing_rate(curve: &TradeoffCurve, target_accuracy: f64) -> Option<f64> {
    curve
        .points
        .iter()
        .filter(|p| p.accuracy >= target_accuracy)
        .map(|p| p.routing_rate)
        .min_by(f64::total_cmp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyAccount {
    pub mixture_per_token_s: f64,
    pub speedup: f64,
}

/// Additive per-token latency of the routed mixture and its speedup over
/// sending everything remote. Network transfer is not modeled.
pub fn latency_account(
    local_per_token_s: f64,
    remote_per_token_s: f64,
    routed_fraction: f64,
) -> Result<LatencyAccount> {
    if !(local_per_token_s > 0.0 && remote_per_token_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "latencies must be positive, got local {local_per_token_s}, remote {remote_per_token_s}"
        )));
    }
    if !(0.0..=1.0).contains(&routed_fraction) {
        return Err(Error::Range(routed_fraction));
    }
    let mixture =
        (1.0 - routed_fraction) * local_per_token_s + routed_fraction * remote_per_token_s;
    Ok(LatencyAccount {
        mixture_per_token_s: mixture,
        speedup: remote_per_token_s / mixture,
    })
}
