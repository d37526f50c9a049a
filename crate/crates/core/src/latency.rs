//! Single-query end-to-end latency measurement.
//!
//! Protocol: `n_warmups` unmeasured invocations, then `n_runs` timed ones on
//! a monotonic clock. Reports the median, sample standard deviation (n - 1)
//! and nearest-rank p95 in milliseconds.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monotonic time source.
pub trait Clock {
    fn now(&self) -> Duration;
}

/// Wall clock backed by [`Instant`].
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Smallest non-zero step observed on the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn default_warmups() -> usize {
    5
}
fn default_runs() -> usize {
    50
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyProtocol {
    #[serde(default = "default_warmups")]
    pub n_warmups: usize,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    /// Selects the measured query from the query set.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for LatencyProtocol {
    fn default() -> Self {
        Self {
            n_warmups: default_warmups(),
            n_runs: default_runs(),
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub std_ms: f64,
    pub p95_ms: f64,
    pub n_runs: usize,
    pub n_warmups: usize,
    pub timer_resolution_ns: u64,
    pub samples_ms: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>, n_warmups: usize, resolution: Duration) -> Result<Self> {
        Ok(Self {
            median_ms: median(&samples_ms)?,
            std_ms: sample_std(&samples_ms),
            p95_ms: percentile(&samples_ms, 95.0)?,
            n_runs: samples_ms.len(),
            n_warmups,
            timer_resolution_ns: resolution.as_nanos() as u64,
            samples_ms,
        })
    }
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)` of
/// the ascending samples.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("percentile of an empty sample".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidInput(format!("percentile {p} outside (0, 100]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn median(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("median of an empty sample".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Ok(if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    })
}

/// Sample standard deviation; 0 for fewer than two samples.
pub fn sample_std(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Runs the protocol against `pipeline` on the wall clock.
pub fn measure_latency<T>(
    pipeline: impl FnMut() -> Result<T>,
    protocol: &LatencyProtocol,
) -> Result<LatencyStats> {
    measure_latency_with(&MonotonicClock::default(), timer_resolution(), pipeline, protocol)
}

pub fn measure_latency_with<T, C: Clock>(
    clock: &C,
    resolution: Duration,
    mut pipeline: impl FnMut() -> Result<T>,
    protocol: &LatencyProtocol,
) -> Result<LatencyStats> {
    if protocol.n_runs == 0 {
        return Err(Error::InvalidInput("n_runs must be at least 1".into()));
    }
    for _ in 0..protocol.n_warmups {
        pipeline().map_err(|e| e.in_stage("warmup"))?;
    }
    let mut samples = Vec::with_capacity(protocol.n_runs);
    for run in 0..protocol.n_runs {
        let start = clock.now();
        let out = pipeline();
        let elapsed = clock.now().saturating_sub(start);
        out.map_err(|e| Error::Measurement {
            run,
            source: Box::new(e),
        })?;
        samples.push(elapsed.as_secs_f64() * 1e3);
    }
    LatencyStats::from_samples(samples, protocol.n_warmups, resolution)
}

/// One row of the latency table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub model: String,
    pub stats: LatencyStats,
    pub cost_per_million_tokens: Option<f64>,
}

pub fn render_latency_table(rows: &[LatencyRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<width$}  {:>10}  {:>9}  {:>9}  {:>12}\n",
        "Model", "median(ms)", "std(ms)", "p95(ms)", "$/1M tok"
    );
    for r in rows {
        let cost = r
            .cost_per_million_tokens
            .map_or_else(|| "-".to_string(), |c| format!("{c:.3}"));
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.2}  {:>9.2}  {:>9.2}  {:>12}",
            r.model, r.stats.median_ms, r.stats.std_ms, r.stats.p95_ms, cost
        );
    }
    out
}

pub fn render_latency_csv(rows: &[LatencyRow]) -> String {
    let mut out = String::from("model,median_ms,std_ms,p95_ms,n_runs,n_warmups,timer_resolution_ns,cost_per_million_tokens\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{},{},{},{}",
            r.model,
            r.stats.median_ms,
            r.stats.std_ms,
            r.stats.p95_ms,
            r.stats.n_runs,
            r.stats.n_warmups,
            r.stats.timer_resolution_ns,
            r.cost_per_million_tokens.map(|c| c.to_string()).unwrap_or_default()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct FakeClock(Cell<Duration>);

    impl Clock for FakeClock {
        fn now(&self) -> Duration {
            self.0.get()
        }
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[10.0], 95.0).unwrap(), 10.0);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0).unwrap(), 95.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 100.0);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&v, 0.0).is_err());
    }

    #[test]
    fn simulated_one_to_fifty() {
        let clock = FakeClock(Cell::new(Duration::ZERO));
        let mut calls = 0usize;
        let protocol = LatencyProtocol::default();
        let stats = measure_latency_with(
            &clock,
            Duration::from_nanos(1),
            || {
                calls += 1;
                // warmups take 1000 ms so any leak into samples is visible
                let ms = if calls <= 5 { 1000 } else { (calls - 5) as u64 };
                clock.0.set(clock.0.get() + Duration::from_millis(ms));
                Ok(())
            },
            &protocol,
        )
        .unwrap();
        assert_eq!(calls, 55);
        assert_eq!(stats.n_runs, 50);
        assert_eq!(stats.samples_ms.len(), 50);
        assert!((stats.median_ms - 25.5).abs() < 1e-9);
        assert!((stats.p95_ms - 48.0).abs() < 1e-9);
    }

    #[test]
    fn single_run_has_zero_std() {
        let clock = FakeClock(Cell::new(Duration::ZERO));
        let protocol = LatencyProtocol {
            n_warmups: 0,
            n_runs: 1,
            seed: 42,
        };
        let stats = measure_latency_with(
            &clock,
            Duration::from_nanos(1),
            || {
                clock.0.set(clock.0.get() + Duration::from_millis(7));
                Ok(())
            },
            &protocol,
        )
        .unwrap();
        assert_eq!(stats.median_ms, 7.0);
        assert_eq!(stats.std_ms, 0.0);
    }

    #[test]
    fn constant_delay_wall_clock() {
        let protocol = LatencyProtocol {
            n_warmups: 1,
            n_runs: 5,
            seed: 42,
        };
        let stats = measure_latency(
            || {
                std::thread::sleep(Duration::from_millis(5));
                Ok(())
            },
            &protocol,
        )
        .unwrap();
        assert!(stats.median_ms >= 5.0 && stats.median_ms < 50.0);
        assert!(stats.p95_ms >= stats.median_ms);
    }

    #[test]
    fn failing_run_reports_index() {
        let clock = FakeClock(Cell::new(Duration::ZERO));
        let mut calls = 0;
        let err = measure_latency_with(
            &clock,
            Duration::from_nanos(1),
            || {
                calls += 1;
                if calls == 8 {
                    Err(Error::Data("boom".into()))
                } else {
                    Ok(())
                }
            },
            &LatencyProtocol::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Measurement { run: 2, .. }));
    }

    #[test]
    fn std_uses_n_minus_one() {
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]) - 1.2909944487358056).abs() < 1e-12);
    }
}
