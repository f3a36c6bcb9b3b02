//! Per-round resource accounting: local training time, process CPU share,
//! peak resident memory, and communication bytes.
//!
//! The sampler polls the operating system's process statistics on a
//! background thread. CPU percent is process-level, normalized so that one
//! fully busy core reads 100. Absent statistics (unsupported platform, zero
//! samples) leave the fields empty rather than zero — profiling must never
//! fail or distort a training run.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One round's resource profile. Byte counters equal the sum of frame wire
/// sizes that crossed the channel during the round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundProfile {
    pub round: u32,
    pub train_seconds: f64,
    pub peak_rss_bytes: Option<u64>,
    pub mean_cpu_percent: Option<f32>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Snapshot of process CPU time (seconds) and resident set size (bytes).
fn read_proc_stats() -> Option<(f64, u64)> {
    #[cfg(target_os = "linux")]
    {
        let stat = fs::read_to_string("/proc/self/stat").ok()?;
        // Fields after the parenthesized command name; utime and stime are
        // the 12th and 13th of those.
        let after = stat.rsplit_once(") ")?.1;
        let fields: Vec<&str> = after.split_whitespace().collect();
        let utime: u64 = fields.get(11)?.parse().ok()?;
        let stime: u64 = fields.get(12)?.parse().ok()?;
        let ticks = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
        if ticks <= 0 {
            return None;
        }
        let cpu_seconds = (utime + stime) as f64 / ticks as f64;

        let status = fs::read_to_string("/proc/self/status").ok()?;
        let rss_kb: u64 = status
            .lines()
            .find(|l| l.starts_with("VmRSS:"))?
            .split_whitespace()
            .nth(1)?
            .parse()
            .ok()?;
        Some((cpu_seconds, rss_kb * 1024))
    }
    #[cfg(not(target_os = "linux"))]
    {
        None
    }
}

/// Handle to a running background sampler.
pub struct ResourceSampler {
    stop: Arc<AtomicBool>,
    handle: thread::JoinHandle<(Option<f32>, Option<u64>)>,
}

/// Start sampling at `interval` (clamped to at least 50 ms).
pub fn sample_resources(interval: Duration) -> ResourceSampler {
    let interval = interval.max(Duration::from_millis(50));
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let handle = thread::spawn(move || {
        let start = read_proc_stats();
        let start_wall = std::time::Instant::now();
        let mut peak_rss: Option<u64> = start.map(|(_, rss)| rss);
        let mut last: Option<(f64, u64)> = start;
        while !stop_flag.load(Ordering::Relaxed) {
            thread::sleep(interval);
            if let Some((cpu, rss)) = read_proc_stats() {
                peak_rss = Some(peak_rss.map_or(rss, |p| p.max(rss)));
                last = Some((cpu, rss));
            }
        }
        let mean_cpu = match (start, last) {
            (Some((cpu0, _)), Some((cpu1, _))) if cpu1 > cpu0 => {
                let wall = start_wall.elapsed().as_secs_f64();
                (wall > 0.0).then(|| ((cpu1 - cpu0) / wall * 100.0) as f32)
            }
            _ => None,
        };
        (mean_cpu, peak_rss)
    });
    ResourceSampler { stop, handle }
}

impl ResourceSampler {
    /// Stop the sampler and return (mean cpu percent, peak rss bytes);
    /// either is `None` when the statistics were unavailable.
    pub fn finalize(self) -> (Option<f32>, Option<u64>) {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.join().unwrap_or((None, None))
    }
}

const PROFILE_HEADER: &str =
    "round,train_seconds,peak_rss_bytes,mean_cpu_percent,bytes_up,bytes_down";

/// CSV with a fixed column order; absent fields are empty cells.
pub fn write_profile_csv(path: &Path, history: &[RoundProfile]) -> Result<()> {
    if history.is_empty() {
        return Err(Error::Data("no profile rows to export".into()));
    }
    let mut out = String::from(PROFILE_HEADER);
    out.push('\n');
    for p in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.round,
            p.train_seconds,
            p.peak_rss_bytes.map(|v| v.to_string()).unwrap_or_default(),
            p.mean_cpu_percent.map(|v| v.to_string()).unwrap_or_default(),
            p.bytes_up,
            p.bytes_down
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// JSON array of objects with the same keys as the CSV columns.
pub fn write_profile_json(path: &Path, history: &[RoundProfile]) -> Result<()> {
    if history.is_empty() {
        return Err(Error::Data("no profile rows to export".into()));
    }
    let json = serde_json::to_string_pretty(history).map_err(|e| Error::Codec(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_profile_csv(path: &Path) -> Result<Vec<RoundProfile>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == PROFILE_HEADER => {}
        _ => return Err(Error::Data("bad profile CSV header".into())),
    }
    let mut out = Vec::new();
    for (no, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(Error::Data(format!("profile row {} malformed", no + 2)));
        }
        let parse_opt = |s: &str| -> Option<String> {
            (!s.is_empty()).then(|| s.to_string())
        };
        out.push(RoundProfile {
            round: cells[0].parse().map_err(|_| Error::Data("bad round".into()))?,
            train_seconds: cells[1]
                .parse()
                .map_err(|_| Error::Data("bad train_seconds".into()))?,
            peak_rss_bytes: parse_opt(cells[2])
                .map(|s| s.parse().map_err(|_| Error::Data("bad rss".into())))
                .transpose()?,
            mean_cpu_percent: parse_opt(cells[3])
                .map(|s| s.parse().map_err(|_| Error::Data("bad cpu".into())))
                .transpose()?,
            bytes_up: cells[4].parse().map_err(|_| Error::Data("bad bytes_up".into()))?,
            bytes_down: cells[5]
                .parse()
                .map_err(|_| Error::Data("bad bytes_down".into()))?,
        });
    }
    Ok(out)
}
