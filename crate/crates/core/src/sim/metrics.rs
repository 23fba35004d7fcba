use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safeguard::Fallback;

/// One logged control step.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub step: u64,
    pub t: f64,
    pub d: f64,
    pub d_dot: f64,
    pub d_ddot: f64,
    pub phi: f64,
    pub active: bool,
    pub fallback: Fallback,
    pub u_nom: Vec<f64>,
    pub u_safe: Vec<f64>,
    pub robot_link: usize,
    pub agent: usize,
    /// 1-based capsule index within the agent.
    pub agent_link: usize,
    pub epoch: u64,
    pub pre_clip_violations: usize,
    pub s: f64,
    pub lu_safe: f64,
}

pub const TELEMETRY_FIXED_COLUMNS: [&str; 7] = ["t", "d", "d_dot", "d_ddot", "phi", "active", "fallback"];

/// Summary of a run, computed from the telemetry alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub min_distance: f64,
    pub first_trigger: Option<f64>,
    pub last_trigger: Option<f64>,
    pub active_duration: f64,
    /// Mean `|ḋ|` over the run.
    pub mean_critical_velocity: f64,
    /// Mean `|d̈|` over the run.
    pub mean_critical_acceleration: f64,
    /// Same means over active steps only (zero when never active).
    pub active_mean_critical_velocity: f64,
    pub active_mean_critical_acceleration: f64,
    /// Steps with surface distance below `d_min`.
    pub violations: usize,
    /// Steps where any fallback was used.
    pub fallback_steps: usize,
    pub max_brake_steps: usize,
    /// Total out-of-bound components before clipping (baseline only).
    pub pre_clip_violations: usize,
    pub steps: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl RunMetrics {
    pub fn from_log(log: &[TelemetryRecord], tau: f64, d_min: f64) -> Self {
        let active: Vec<&TelemetryRecord> = log.iter().filter(|r| r.active).collect();
        Self {
            min_distance: log.iter().map(|r| r.d).fold(f64::INFINITY, f64::min),
            first_trigger: active.first().map(|r| r.t),
            last_trigger: active.last().map(|r| r.t),
            active_duration: tau * active.len() as f64,
            mean_critical_velocity: mean(log.iter().map(|r| r.d_dot.abs())),
            mean_critical_acceleration: mean(log.iter().map(|r| r.d_ddot.abs())),
            active_mean_critical_velocity: mean(active.iter().map(|r| r.d_dot.abs())),
            active_mean_critical_acceleration: mean(active.iter().map(|r| r.d_ddot.abs())),
            violations: log.iter().filter(|r| r.d < d_min).count(),
            fallback_steps: log.iter().filter(|r| r.fallback != Fallback::None).count(),
            max_brake_steps: log.iter().filter(|r| r.fallback == Fallback::MaxBrake).count(),
            pre_clip_violations: log.iter().map(|r| r.pre_clip_violations).sum(),
            steps: log.len(),
        }
    }

    pub fn is_clean(&self) -> bool {
        self.violations == 0 && self.fallback_steps == 0
    }
}

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

const METRIC_COLUMNS: [&str; 13] = [
    "min_distance",
    "first_trigger",
    "last_trigger",
    "active_duration",
    "mean_critical_velocity",
    "mean_critical_acceleration",
    "active_mean_critical_velocity",
    "active_mean_critical_acceleration",
    "violations",
    "fallback_steps",
    "max_brake_steps",
    "pre_clip_violations",
    "steps",
];

fn metric_fields(m: &RunMetrics) -> Vec<String> {
    vec![
        m.min_distance.to_string(),
        opt(m.first_trigger),
        opt(m.last_trigger),
        m.active_duration.to_string(),
        m.mean_critical_velocity.to_string(),
        m.mean_critical_acceleration.to_string(),
        m.active_mean_critical_velocity.to_string(),
        m.active_mean_critical_acceleration.to_string(),
        m.violations.to_string(),
        m.fallback_steps.to_string(),
        m.max_brake_steps.to_string(),
        m.pre_clip_violations.to_string(),
        m.steps.to_string(),
    ]
}

pub fn write_metrics_csv<W: Write>(metrics: &RunMetrics, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRIC_COLUMNS).map_err(io_err)?;
    w.write_record(metric_fields(metrics)).map_err(io_err)?;
    w.flush().map_err(io_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub metrics: RunMetrics,
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["lambda1", "lambda2"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header).map_err(io_err)?;
    for r in rows {
        let mut fields = vec![r.lambda1.to_string(), r.lambda2.to_string()];
        fields.extend(metric_fields(&r.metrics));
        w.write_record(&fields).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn write_telemetry_csv<W: Write>(log: &[TelemetryRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let n = log.first().map_or(0, |r| r.u_nom.len());
    let mut header: Vec<String> = TELEMETRY_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=n).map(|j| format!("u_nom_{j}")));
    header.extend((1..=n).map(|j| format!("u_safe_{j}")));
    header.extend(["robot_link", "agent_link", "agent", "epoch", "pre_clip_violations"].map(String::from));
    w.write_record(&header).map_err(io_err)?;
    for r in log {
        let mut row = vec![
            r.t.to_string(),
            r.d.to_string(),
            r.d_dot.to_string(),
            r.d_ddot.to_string(),
            r.phi.to_string(),
            u8::from(r.active).to_string(),
            r.fallback.as_str().to_string(),
        ];
        row.extend(r.u_nom.iter().map(f64::to_string));
        row.extend(r.u_safe.iter().map(f64::to_string));
        row.extend([
            r.robot_link.to_string(),
            r.agent_link.to_string(),
            r.agent.to_string(),
            r.epoch.to_string(),
            r.pre_clip_violations.to_string(),
        ]);
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads the columns of a telemetry CSV needed to recompute [`RunMetrics`].
pub fn read_telemetry_csv<R: Read>(reader: R) -> Result<Vec<TelemetryRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(io_err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::Config(format!("telemetry csv lacks column '{name}'")));
    let idx: Vec<usize> = TELEMETRY_FIXED_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let (robot_link, agent_link, agent, epoch, pre) = (col("robot_link")?, col("agent_link")?, col("agent")?, col("epoch")?, col("pre_clip_violations")?);
    let num = |s: &str| s.parse::<f64>().map_err(io_err);
    let int = |s: &str| s.parse::<u64>().map_err(io_err);
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(io_err)?;
        let fallback = match &rec[idx[6]] {
            "none" => Fallback::None,
            "clip" => Fallback::Clip,
            "max_brake" => Fallback::MaxBrake,
            other => return Err(Error::Config(format!("unknown fallback '{other}'"))),
        };
        out.push(TelemetryRecord {
            step: k as u64,
            t: num(&rec[idx[0]])?,
            d: num(&rec[idx[1]])?,
            d_dot: num(&rec[idx[2]])?,
            d_ddot: num(&rec[idx[3]])?,
            phi: num(&rec[idx[4]])?,
            active: &rec[idx[5]] == "1",
            fallback,
            u_nom: Vec::new(),
            u_safe: Vec::new(),
            robot_link: int(&rec[robot_link])? as usize,
            agent: int(&rec[agent])? as usize,
            agent_link: int(&rec[agent_link])? as usize,
            epoch: int(&rec[epoch])?,
            pre_clip_violations: int(&rec[pre])? as usize,
            s: f64::NAN,
            lu_safe: f64::NAN,
        });
    }
    Ok(out)
}
