//! Efficiency harness: parameter count, per-batch forward and backward wall
//! time, throughput and peak resident memory.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    backward_pass, count_parameters, model_forward, random_input, GradMode, ModelConfig,
    ModelInput, ModelParams,
};

pub const DEFAULT_WARMUP: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub config: ModelConfig,
    pub param_count: usize,
    pub forward_sec_per_batch: f64,
    pub backward_sec_per_batch: f64,
    pub throughput_samples_per_sec: f64,
    /// Peak resident set size; `None` where the platform does not expose it.
    pub peak_memory_mb: Option<f64>,
    pub batch_size: usize,
    pub iterations: usize,
    pub warmup: usize,
}

/// Timed section currently executing, passed to the benchmark hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    Table,
}

pub fn run_benchmark(
    config: &ModelConfig,
    batch_size: usize,
    iterations: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    run_benchmark_with_hook(config, batch_size, iterations, warmup, seed, |_| {})
}

/// As [`run_benchmark`], calling `hook` once inside every timed forward and
/// backward section, warmup included.
pub fn run_benchmark_with_hook<H>(
    config: &ModelConfig,
    batch_size: usize,
    iterations: usize,
    warmup: usize,
    seed: u64,
    mut hook: H,
) -> Result<BenchReport>
where
    H: FnMut(Phase),
{
    if iterations == 0 {
        return Err(Error::Input(
            "benchmark needs at least one iteration".into(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::Input("benchmark batch size must be >= 1".into()));
    }
    config.validate()?;
    let mut params = ModelParams::init(config, seed)?;
    let batch: Vec<(ModelInput, usize)> = (0..batch_size)
        .map(|i| {
            let input = random_input(config, seed.wrapping_add(1 + i as u64));
            (input, i % config.classes)
        })
        .collect();

    let mut forward = Vec::with_capacity(iterations);
    let mut backward = Vec::with_capacity(iterations);
    for iter in 0..warmup + iterations {
        let start = Instant::now();
        hook(Phase::Forward);
        let mut traces = Vec::with_capacity(batch_size);
        for (input, _) in &batch {
            traces.push(model_forward(input, &params, config)?.1);
        }
        let fwd = start.elapsed();

        let start = Instant::now();
        hook(Phase::Backward);
        for (i, (trace, (_, label))) in traces.iter_mut().zip(&batch).enumerate() {
            let mode = if i == 0 {
                GradMode::Overwrite
            } else {
                GradMode::Accumulate
            };
            backward_pass(trace, &mut params, *label, mode)?;
        }
        let bwd = start.elapsed();
        if iter >= warmup {
            forward.push(fwd);
            backward.push(bwd);
        }
    }

    let forward_sec = median(&mut forward);
    let backward_sec = median(&mut backward);
    Ok(BenchReport {
        config: config.clone(),
        param_count: count_parameters(config),
        forward_sec_per_batch: forward_sec,
        backward_sec_per_batch: backward_sec,
        throughput_samples_per_sec: batch_size as f64 / forward_sec,
        peak_memory_mb: peak_memory_mb(),
        batch_size,
        iterations,
        warmup,
    })
}

/// Median in seconds, never below one nanosecond so rates stay finite.
fn median(samples: &mut [Duration]) -> f64 {
    samples.sort();
    let n = samples.len();
    let mid = if n % 2 == 1 {
        samples[n / 2].as_secs_f64()
    } else {
        0.5 * (samples[n / 2 - 1].as_secs_f64() + samples[n / 2].as_secs_f64())
    };
    mid.max(1e-9)
}

/// Peak resident set size from `/proc/self/status`.
pub fn peak_memory_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    parse_vm_hwm(&status)
}

fn parse_vm_hwm(status: &str) -> Option<f64> {
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    (kb > 0.0).then_some(kb / 1024.0)
}

pub fn render_report(report: &BenchReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => serde_json::to_string(report)
            .map_err(|e| Error::Format(format!("cannot serialize report: {e}"))),
        ReportFormat::Table => Ok(render_table(report)),
    }
}

pub fn parse_report(text: &str) -> Result<BenchReport> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("bad benchmark report: {e}")))
}

fn render_table(r: &BenchReport) -> String {
    let header = ["#para.", "forw.", "back.", "thr.", "mem."];
    let values = [
        r.param_count.to_string(),
        format!("{:.6} s", r.forward_sec_per_batch),
        format!("{:.6} s", r.backward_sec_per_batch),
        format!("{:.2} /s", r.throughput_samples_per_sec),
        r.peak_memory_mb
            .map_or_else(|| "-".to_string(), |m| format!("{m:.1} MB")),
    ];
    let widths: Vec<usize> = header
        .iter()
        .zip(&values)
        .map(|(h, v)| h.len().max(v.len()))
        .collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "batch {}, iterations {}, warmup {}",
        r.batch_size, r.iterations, r.warmup
    );
    for row in [header.map(String::from), values] {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_report() -> BenchReport {
        run_benchmark(&ModelConfig::tiny(), 2, 3, 1, 0).unwrap()
    }

    #[test]
    fn throughput_is_batch_over_forward_time() {
        let r = tiny_report();
        let expect = r.batch_size as f64 / r.forward_sec_per_batch;
        assert!(
            (r.throughput_samples_per_sec - expect).abs() / r.throughput_samples_per_sec < 1e-9
        );
        assert!(r.forward_sec_per_batch > 0.0 && r.backward_sec_per_batch > 0.0);
    }

    #[test]
    fn param_count_delegates() {
        let cfg = ModelConfig::tiny();
        assert_eq!(tiny_report().param_count, count_parameters(&cfg));
        let wider = ModelConfig {
            channels: cfg.channels * 2,
            ..cfg.clone()
        };
        assert!(count_parameters(&wider) > count_parameters(&cfg));
    }

    #[test]
    fn json_round_trip() {
        let mut r = tiny_report();
        let back = parse_report(&render_report(&r, ReportFormat::Json).unwrap()).unwrap();
        assert_eq!(back, r);
        r.peak_memory_mb = None;
        let json = render_report(&r, ReportFormat::Json).unwrap();
        assert!(json.contains("\"peak_memory_mb\":null"));
        assert_eq!(parse_report(&json).unwrap(), r);
    }

    #[test]
    fn table_has_column_names_and_dash_for_missing_memory() {
        let mut r = tiny_report();
        r.peak_memory_mb = None;
        let table = render_report(&r, ReportFormat::Table).unwrap();
        for token in ["#para.", "forw.", "back.", "thr.", "mem."] {
            assert!(table.contains(token), "{token}");
        }
        let last = table.lines().last().unwrap();
        assert!(last.trim_end().ends_with('-'));
    }

    #[test]
    fn injected_delay_raises_forward_time() {
        let cfg = ModelConfig::tiny();
        let base = run_benchmark(&cfg, 1, 5, 1, 0).unwrap();
        let slow = run_benchmark_with_hook(&cfg, 1, 5, 1, 0, |p| {
            if p == Phase::Forward {
                std::thread::sleep(Duration::from_millis(10));
            }
        })
        .unwrap();
        assert!(slow.forward_sec_per_batch - base.forward_sec_per_batch >= 0.009);
    }

    #[test]
    fn vm_hwm_parsing() {
        assert_eq!(
            parse_vm_hwm("VmPeak:\t 10 kB\nVmHWM:\t    2048 kB\n"),
            Some(2.0)
        );
        assert_eq!(parse_vm_hwm("VmRSS: 1 kB\n"), None);
    }

    #[test]
    fn rejects_zero_iterations() {
        assert!(matches!(
            run_benchmark(&ModelConfig::tiny(), 1, 0, 0, 0),
            Err(Error::Input(_))
        ));
    }
}
