use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{compute_metrics, HarnessError, Metrics, ScenarioConfig};
use crate::geometry::Phase;
use crate::vehicle::WorldState;

/// Everything logged for one closed-loop iteration. `state` is the state the
/// controllers saw; the inputs and plans are what they returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub time: f64,
    pub state: WorldState,
    pub accel: f64,
    pub steer: f64,
    pub saturated: bool,
    pub ov_accel: f64,
    pub ov_interacting: bool,
    pub ov_fallback: bool,
    pub predicted_ov_accel: f64,
    pub headway: f64,
    pub variance: f64,
    pub phase: Phase,
    pub overlap: bool,
    pub nodes: usize,
    pub lateral_objective: f64,
    pub lateral_soft: bool,
    pub lateral_slack: f64,
    pub audit_error: f64,
    pub target_rel_y: f64,
    pub headway_gate: bool,
    pub active_pairs: usize,
    pub longitudinal_objective: f64,
    pub longitudinal_soft: bool,
    pub longitudinal_slack: f64,
    /// Controller computation time, s.
    pub wall_time: f64,
    pub shared_ego_speed: Vec<f64>,
    pub shared_ov_speed: Vec<f64>,
    pub plan_steer: Vec<f64>,
    pub plan_accel: Vec<f64>,
    pub plan_ego_speed: Vec<f64>,
    pub plan_ov_speed: Vec<f64>,
}

/// Column order of the CSV trace. Booleans are 0/1, the phase is 1 (approach),
/// 2 (alongside) or 3 (return), and vector columns are `;`-separated.
pub const TRACE_COLUMNS: [&str; 36] = [
    "step",
    "time",
    "rel_x",
    "rel_y",
    "heading",
    "speed",
    "ov_speed",
    "accel",
    "steer",
    "saturated",
    "ov_accel",
    "ov_interacting",
    "ov_fallback",
    "predicted_ov_accel",
    "headway",
    "variance",
    "phase",
    "overlap",
    "nodes",
    "lateral_objective",
    "lateral_soft",
    "lateral_slack",
    "audit_error",
    "target_rel_y",
    "headway_gate",
    "active_pairs",
    "longitudinal_objective",
    "longitudinal_soft",
    "longitudinal_slack",
    "wall_time",
    "shared_ego_speed",
    "shared_ov_speed",
    "plan_steer",
    "plan_accel",
    "plan_ego_speed",
    "plan_ov_speed",
];

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn flag(b: bool) -> String {
    u8::from(b).to_string()
}

impl TraceRecord {
    fn to_fields(&self) -> Vec<String> {
        let s = &self.state;
        let mut out: Vec<String> = vec![self.step.to_string()];
        out.extend(
            [self.time, s.rel_x, s.rel_y, s.heading, s.speed, s.ov_speed, self.accel, self.steer]
                .map(|x| x.to_string()),
        );
        out.push(flag(self.saturated));
        out.push(self.ov_accel.to_string());
        out.push(flag(self.ov_interacting));
        out.push(flag(self.ov_fallback));
        out.extend([self.predicted_ov_accel, self.headway, self.variance].map(|x| x.to_string()));
        out.push(self.phase.index().to_string());
        out.push(flag(self.overlap));
        out.push(self.nodes.to_string());
        out.push(self.lateral_objective.to_string());
        out.push(flag(self.lateral_soft));
        out.extend([self.lateral_slack, self.audit_error, self.target_rel_y].map(|x| x.to_string()));
        out.push(flag(self.headway_gate));
        out.push(self.active_pairs.to_string());
        out.push(self.longitudinal_objective.to_string());
        out.push(flag(self.longitudinal_soft));
        out.extend([self.longitudinal_slack, self.wall_time].map(|x| x.to_string()));
        for v in [
            &self.shared_ego_speed,
            &self.shared_ov_speed,
            &self.plan_steer,
            &self.plan_accel,
            &self.plan_ego_speed,
            &self.plan_ov_speed,
        ] {
            out.push(join(v));
        }
        out
    }

    fn from_fields(row: usize, rec: &csv::StringRecord) -> Result<Self, HarnessError> {
        let err = |msg: String| HarnessError::TraceFormat { row, msg };
        if rec.len() != TRACE_COLUMNS.len() {
            return Err(err(format!("expected {} fields, found {}", TRACE_COLUMNS.len(), rec.len())));
        }
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num =
            |i: usize| field(i).parse::<f64>().map_err(|_| err(format!("`{}` is not a number", TRACE_COLUMNS[i])));
        let int =
            |i: usize| field(i).parse::<usize>().map_err(|_| err(format!("`{}` is not an integer", TRACE_COLUMNS[i])));
        let boolean = |i: usize| match field(i) {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(err(format!("`{}` is not 0 or 1", TRACE_COLUMNS[i]))),
        };
        let vector = |i: usize| -> Result<Vec<f64>, HarnessError> {
            if field(i).is_empty() {
                return Ok(Vec::new());
            }
            field(i)
                .split(';')
                .map(|x| x.parse::<f64>().map_err(|_| err(format!("`{}` holds a non-number", TRACE_COLUMNS[i]))))
                .collect()
        };
        let phase =
            u8::try_from(int(16)?).ok().and_then(Phase::from_index).ok_or_else(|| err("unknown phase".into()))?;
        Ok(Self {
            step: int(0)?,
            time: num(1)?,
            state: WorldState { rel_x: num(2)?, rel_y: num(3)?, heading: num(4)?, speed: num(5)?, ov_speed: num(6)? },
            accel: num(7)?,
            steer: num(8)?,
            saturated: boolean(9)?,
            ov_accel: num(10)?,
            ov_interacting: boolean(11)?,
            ov_fallback: boolean(12)?,
            predicted_ov_accel: num(13)?,
            headway: num(14)?,
            variance: num(15)?,
            phase,
            overlap: boolean(17)?,
            nodes: int(18)?,
            lateral_objective: num(19)?,
            lateral_soft: boolean(20)?,
            lateral_slack: num(21)?,
            audit_error: num(22)?,
            target_rel_y: num(23)?,
            headway_gate: boolean(24)?,
            active_pairs: int(25)?,
            longitudinal_objective: num(26)?,
            longitudinal_soft: boolean(27)?,
            longitudinal_slack: num(28)?,
            wall_time: num(29)?,
            shared_ego_speed: vector(30)?,
            shared_ov_speed: vector(31)?,
            plan_steer: vector(32)?,
            plan_accel: vector(33)?,
            plan_ego_speed: vector(34)?,
            plan_ov_speed: vector(35)?,
        })
    }

    fn without_timing(&self) -> Self {
        Self { wall_time: 0.0, ..self.clone() }
    }
}

/// Result of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLog {
    pub config: ScenarioConfig,
    pub records: Vec<TraceRecord>,
    /// State after the last logged iteration.
    pub final_state: WorldState,
    /// Error that stopped the run early.
    pub aborted: Option<String>,
}

/// JSON companion of a CSV trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Version of the crate that produced the run.
    pub version: String,
    pub config: ScenarioConfig,
    pub steps: usize,
    pub final_state: WorldState,
    pub aborted: Option<String>,
    pub metrics: Metrics,
}

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";

impl TraceLog {
    /// Equality of everything except wall-clock timings.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.final_state == other.final_state
            && self.aborted == other.aborted
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.without_timing() == b.without_timing())
    }

    pub fn metrics(&self) -> Result<Metrics, HarnessError> {
        compute_metrics(self)
    }

    pub fn summary(&self) -> Result<RunSummary, HarnessError> {
        Ok(RunSummary {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            steps: self.records.len(),
            final_state: self.final_state,
            aborted: self.aborted.clone(),
            metrics: self.metrics()?,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_COLUMNS)?;
        for r in &self.records {
            w.write_record(r.to_fields())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads records written by [`TraceLog::write_csv`]. The final state is
    /// taken from the last record since the CSV does not hold it.
    pub fn read_csv<R: Read>(input: R, config: ScenarioConfig) -> Result<Self, HarnessError> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(TRACE_COLUMNS.iter().copied()) {
            return Err(HarnessError::TraceFormat { row: 0, msg: "unexpected header".into() });
        }
        let records = rdr
            .records()
            .enumerate()
            .map(|(i, rec)| TraceRecord::from_fields(i + 1, &rec?))
            .collect::<Result<Vec<_>, _>>()?;
        let final_state = records.last().ok_or(HarnessError::EmptyTrace)?.state;
        Ok(Self { config, records, final_state, aborted: None })
    }

    /// Writes `trace.csv` and `summary.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<RunSummary, HarnessError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(dir.join(TRACE_FILE))?))?;
        let summary = self.summary()?;
        std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
        Ok(summary)
    }

    /// Loads a directory written by [`TraceLog::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, RunSummary), HarnessError> {
        let dir = dir.as_ref();
        let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
        let file = std::fs::File::open(dir.join(TRACE_FILE))?;
        let mut log = Self::read_csv(std::io::BufReader::new(file), summary.config.clone())?;
        log.final_state = summary.final_state;
        log.aborted = summary.aborted.clone();
        Ok((log, summary))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_closed_loop, short_scenario};

    #[test]
    fn csv_round_trip_is_lossless() {
        let log = run_closed_loop(&short_scenario(2.0)).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let back = TraceLog::read_csv(buf.as_slice(), log.config.clone()).unwrap();
        assert_eq!(back.records, log.records);
    }

    #[test]
    fn infinite_values_survive() {
        let mut log = run_closed_loop(&short_scenario(2.0)).unwrap();
        log.records[0].audit_error = f64::INFINITY;
        log.records[0].headway = f64::NEG_INFINITY;
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let back = TraceLog::read_csv(buf.as_slice(), log.config.clone()).unwrap();
        assert_eq!(back.records[0].audit_error, f64::INFINITY);
        assert_eq!(back.records[0].headway, f64::NEG_INFINITY);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = run_closed_loop(&short_scenario(2.0)).unwrap();
        let saved = log.save(dir.path()).unwrap();
        let (back, summary) = TraceLog::load(dir.path()).unwrap();
        assert_eq!(summary, saved);
        assert_eq!(back, log);
    }

    #[test]
    fn malformed_rows_are_reported() {
        let log = run_closed_loop(&short_scenario(2.0)).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("\n0,", "\nzero,", 1);
        let err = TraceLog::read_csv(text.as_bytes(), log.config.clone()).unwrap_err();
        assert!(matches!(err, HarnessError::TraceFormat { row: 1, .. }), "{err}");
        let empty = TRACE_COLUMNS.join(",") + "\n";
        assert!(matches!(TraceLog::read_csv(empty.as_bytes(), log.config), Err(HarnessError::EmptyTrace)));
    }
}
