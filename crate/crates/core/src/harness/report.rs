use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{percentile_sorted, HarnessError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Completed,
    TimedOut,
    /// No endpoint could take the request, or the chosen one was down.
    Unroutable,
    InFlight,
}

impl RequestStatus {
    pub fn name(self) -> &'static str {
        match self {
            RequestStatus::Completed => "completed",
            RequestStatus::TimedOut => "timed_out",
            RequestStatus::Unroutable => "unroutable",
            RequestStatus::InFlight => "in_flight",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    #[serde(with = "crate::serde_ms")]
    pub send: Duration,
    #[serde(with = "opt_ms")]
    pub complete: Option<Duration>,
    pub endpoint: Option<String>,
    /// End-to-end latency; the timeout value for requests that did not
    /// complete.
    #[serde(with = "crate::serde_ms")]
    pub latency: Duration,
    pub status: RequestStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEvent {
    #[serde(with = "crate::serde_ms")]
    pub ts: Duration,
    pub endpoint: String,
    pub weight: u32,
    pub conns: u32,
    pub util: f64,
    /// `controller` or `reconciler`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpcRow {
    #[serde(with = "crate::serde_ms")]
    pub ts: Duration,
    pub node: String,
    pub pages_in: u64,
    pub pages_out: u64,
    pub enclaves_json: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaEvent {
    #[serde(with = "crate::serde_ms")]
    pub ts: Duration,
    pub replica: String,
    pub node: String,
    /// `start`, `restart`, `drain`, `stop`, `crash`, or `placement_failure`.
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    #[serde(with = "crate::serde_ms")]
    pub p90: Duration,
    #[serde(with = "crate::serde_ms")]
    pub p95: Duration,
    #[serde(with = "crate::serde_ms")]
    pub p99: Duration,
}

impl Percentiles {
    pub fn of(latencies: &[Duration]) -> Result<Self, HarnessError> {
        let mut sorted = latencies.to_vec();
        sorted.sort_unstable();
        Ok(Percentiles {
            p90: percentile_sorted(&sorted, 90.0)?,
            p95: percentile_sorted(&sorted, 95.0)?,
            p99: percentile_sorted(&sorted, 99.0)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub service: String,
    pub seed: u64,
    pub clock: String,
    pub algorithm: String,
    pub model: String,
    #[serde(with = "crate::serde_ms")]
    pub slo: Duration,
    pub boundary: Option<f64>,
    pub sent: u64,
    pub completed: u64,
    pub timed_out: u64,
    pub unroutable: u64,
    pub in_flight_at_cutoff: u64,
    pub percentiles: Percentiles,
    /// Completed requests per second of workload duration.
    pub throughput: f64,
    pub slo_met: bool,
    pub requests: Vec<RequestRecord>,
    pub weight_events: Vec<WeightEvent>,
    pub replica_events: Vec<ReplicaEvent>,
    pub epc: Vec<EpcRow>,
}

impl RunReport {
    /// Fills the aggregate fields from the request records.
    pub(crate) fn finalize(&mut self, duration: Duration) -> Result<(), HarnessError> {
        let count = |s| self.requests.iter().filter(|r| r.status == s).count() as u64;
        self.sent = self.requests.len() as u64;
        self.completed = count(RequestStatus::Completed);
        self.timed_out = count(RequestStatus::TimedOut);
        self.unroutable = count(RequestStatus::Unroutable);
        self.in_flight_at_cutoff = count(RequestStatus::InFlight);
        let latencies: Vec<Duration> = self.requests.iter().map(|r| r.latency).collect();
        self.percentiles = Percentiles::of(&latencies)?;
        self.throughput = self.completed as f64 / duration.as_secs_f64();
        self.slo_met = self.percentiles.p99 <= self.slo;
        Ok(())
    }

    /// Canonical serialization; equal reports give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("report serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        serde_json::from_slice(bytes).map_err(|e| HarnessError::Io(e.to_string()))
    }

    pub fn summary(&self) -> String {
        let ms = |d: Duration| format!("{:.3}", d.as_secs_f64() * 1e3);
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k}: {v}\n"));
        line("scenario", self.scenario.clone());
        line("service", self.service.clone());
        line("seed", self.seed.to_string());
        line("clock", self.clock.clone());
        line("algorithm", self.algorithm.clone());
        line("model", self.model.clone());
        line(
            "boundary_pages_per_s",
            self.boundary.map_or("none".into(), |b| format!("{b:.1}")),
        );
        line("sent", self.sent.to_string());
        line("completed", self.completed.to_string());
        line("timed_out", self.timed_out.to_string());
        line("unroutable", self.unroutable.to_string());
        line("in_flight_at_cutoff", self.in_flight_at_cutoff.to_string());
        line("p90_ms", ms(self.percentiles.p90));
        line("p95_ms", ms(self.percentiles.p95));
        line("p99_ms", ms(self.percentiles.p99));
        line("throughput_rps", format!("{:.3}", self.throughput));
        line("slo_ms", ms(self.slo));
        line("slo_met", self.slo_met.to_string());
        line("weight_changes", self.weight_events.len().to_string());
        s
    }
}

mod opt_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        d.map(|d| d.as_secs_f64() * 1e3).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.map(|ms| Duration::from_secs_f64(ms / 1e3)))
    }
}

fn ms(d: Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1e3)
}

fn io(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(format!("{}: {e}", path.display()))
}

/// Writes `latencies.csv`, `weights.csv`, `epc.csv`, `summary.txt` and
/// `report.json` under `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let path = |name: &str| dir.join(name);

    let p = path("latencies.csv");
    let mut w = csv::Writer::from_path(&p).map_err(io(&p))?;
    w.write_record(["id", "send_ms", "complete_ms", "endpoint", "latency_ms", "status"])
        .map_err(io(&p))?;
    for r in &report.requests {
        w.write_record([
            r.id.to_string(),
            ms(r.send),
            r.complete.map(ms).unwrap_or_default(),
            r.endpoint.clone().unwrap_or_default(),
            ms(r.latency),
            r.status.name().to_owned(),
        ])
        .map_err(io(&p))?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))?;

    let p = path("weights.csv");
    let mut w = csv::Writer::from_path(&p).map_err(io(&p))?;
    w.write_record(["ts", "service", "endpoint", "weight", "conns", "util"])
        .map_err(io(&p))?;
    let service = report.service.as_str();
    for e in &report.weight_events {
        w.write_record([
            ms(e.ts),
            service.to_owned(),
            e.endpoint.clone(),
            e.weight.to_string(),
            e.conns.to_string(),
            format!("{:.4}", e.util),
        ])
        .map_err(io(&p))?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))?;

    let p = path("epc.csv");
    let mut w = csv::Writer::from_path(&p).map_err(io(&p))?;
    w.write_record(["ts", "node", "pages_in", "pages_out", "enclaves_json"])
        .map_err(io(&p))?;
    for e in &report.epc {
        w.write_record([
            ms(e.ts),
            e.node.clone(),
            e.pages_in.to_string(),
            e.pages_out.to_string(),
            e.enclaves_json.clone(),
        ])
        .map_err(io(&p))?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))?;

    let write =
        |name: &str, bytes: &[u8]| fs::write(path(name), bytes).map_err(|e| HarnessError::Io(format!("{name}: {e}")));
    write("summary.txt", report.summary().as_bytes())?;
    write("report.json", &report.to_bytes())?;
    Ok(
        ["latencies.csv", "weights.csv", "epc.csv", "summary.txt", "report.json"]
            .iter()
            .map(|n| path(n))
            .collect(),
    )
}

/// Percentiles recomputed from a `latencies.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSummary {
    pub sent: usize,
    pub completed: usize,
    pub percentiles: Percentiles,
}

pub fn summarize_latencies_csv(path: &Path) -> Result<CsvSummary, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(io(path))?;
    let mut latencies = Vec::new();
    let mut completed = 0;
    for row in r.records() {
        let row = row.map_err(io(path))?;
        let ms: f64 = row
            .get(4)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| HarnessError::Io(format!("{}: bad latency column", path.display())))?;
        if row.get(5) == Some("completed") {
            completed += 1;
        }
        latencies.push(Duration::from_secs_f64(ms / 1e3));
    }
    Ok(CsvSummary {
        sent: latencies.len(),
        completed,
        percentiles: Percentiles::of(&latencies)?,
    })
}
