//! Latency samples with nearest-rank percentiles and a fixed bucket layout.

use serde::{Deserialize, Serialize};

/// Upper bucket bounds in milliseconds; a final open bucket follows.
pub const BUCKETS_MS: [f64; 12] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0, 2000.0, 5000.0];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyHistogram {
    samples: Vec<f64>,
    sorted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Bucket {
    /// Inclusive upper bound; `None` for the overflow bucket.
    pub le_ms: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HistogramSummary {
    pub count: usize,
    pub min_ms: Option<f64>,
    pub p50_ms: Option<f64>,
    pub p90_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub max_ms: Option<f64>,
    pub mean_ms: Option<f64>,
    pub buckets: Vec<Bucket>,
}

impl LatencyHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, ms: f64) {
        if ms.is_finite() {
            self.samples.push(ms);
            self.sorted = false;
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn sort(&mut self) {
        if !self.sorted {
            self.samples.sort_by(f64::total_cmp);
            self.sorted = true;
        }
    }

    /// Nearest-rank percentile, `p` in `(0, 100]`.
    pub fn percentile(&mut self, p: f64) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        self.sort();
        let n = self.samples.len();
        let rank = ((p / 100.0) * n as f64).ceil().clamp(1.0, n as f64) as usize;
        Some(self.samples[rank - 1])
    }

    pub fn buckets(&self) -> Vec<Bucket> {
        let mut counts = vec![0usize; BUCKETS_MS.len() + 1];
        for &s in &self.samples {
            let i = BUCKETS_MS.iter().position(|&b| s <= b).unwrap_or(BUCKETS_MS.len());
            counts[i] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| Bucket {
                le_ms: BUCKETS_MS.get(i).copied(),
                count,
            })
            .collect()
    }

    pub fn summary(&mut self) -> HistogramSummary {
        let n = self.samples.len();
        HistogramSummary {
            count: n,
            min_ms: self.percentile(0.0),
            p50_ms: self.percentile(50.0),
            p90_ms: self.percentile(90.0),
            p99_ms: self.percentile(99.0),
            max_ms: self.percentile(100.0),
            mean_ms: (n > 0).then(|| self.samples.iter().sum::<f64>() / n as f64),
            buckets: self.buckets(),
        }
    }
}

impl HistogramSummary {
    /// Text rendering, one bar per bucket.
    pub fn render(&self, title: &str) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
        let mut out = format!(
            "{title}: n={} p50={} p90={} p99={} max={} ms\n",
            self.count,
            fmt(self.p50_ms),
            fmt(self.p90_ms),
            fmt(self.p99_ms),
            fmt(self.max_ms)
        );
        let peak = self.buckets.iter().map(|b| b.count).max().unwrap_or(0).max(1);
        for b in &self.buckets {
            let label = b.le_ms.map_or("  > 5000".to_string(), |x| format!("<= {x:>5}"));
            let bar = "#".repeat((b.count * 40).div_ceil(peak));
            out.push_str(&format!("  {label} ms {:>7} {bar}\n", b.count));
        }
        out
    }
}
