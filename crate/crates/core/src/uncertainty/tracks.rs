//! Overtaking-pair extraction from per-frame trajectory tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{headway_time, UncertaintyError, MIN_OV_SPEED};

/// Column names of the track table. Defaults follow the highD track files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackSchema {
    pub frame: String,
    pub id: String,
    pub position: String,
    pub lane: String,
    pub speed: String,
    pub accel: String,
}

impl Default for TrackSchema {
    fn default() -> Self {
        Self {
            frame: "frame".into(),
            id: "id".into(),
            position: "x".into(),
            lane: "laneId".into(),
            speed: "xVelocity".into(),
            accel: "xAcceleration".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Headway-time window of emitted samples, s.
    pub window: (f64, f64),
    /// Largest gap between two vehicles considered as a pair, m.
    pub max_gap: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { window: (super::LEFT_EDGE, super::RIGHT_EDGE), max_gap: 120.0 }
    }
}

/// Response of the overtaken vehicle at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub headway: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    pub samples: Vec<Sample>,
    pub pairs: usize,
    pub skipped_rows: usize,
}

#[derive(Debug, Clone, Copy)]
struct Row {
    position: f64,
    lane: i64,
    speed: f64,
    accel: f64,
}

type Tracks = HashMap<i64, BTreeMap<i64, Row>>;

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, UncertaintyError> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| UncertaintyError::MissingColumn(name.to_string()))
}

fn read_tracks<R: Read>(reader: R, schema: &TrackSchema) -> Result<(Tracks, usize), UncertaintyError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx = [
        column(&headers, &schema.frame)?,
        column(&headers, &schema.id)?,
        column(&headers, &schema.position)?,
        column(&headers, &schema.lane)?,
        column(&headers, &schema.speed)?,
        column(&headers, &schema.accel)?,
    ];
    let mut tracks: Tracks = HashMap::new();
    let mut skipped = 0;
    for record in rdr.records() {
        let Ok(record) = record else {
            skipped += 1;
            continue;
        };
        let num = |i: usize| record.get(idx[i]).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
        let parsed = (|| {
            let frame = num(0)?;
            let id = num(1)?;
            let lane = num(3)?;
            Some((
                frame as i64,
                id as i64,
                Row { position: num(2)?, lane: lane as i64, speed: num(4)?, accel: num(5)? },
            ))
        })();
        match parsed {
            Some((frame, id, row)) => {
                tracks.entry(id).or_default().insert(frame, row);
            }
            None => skipped += 1,
        }
    }
    Ok((tracks, skipped))
}

/// Ordered `(overtaker, overtaken)` pairs seen side by side in adjacent lanes.
fn candidate_pairs(tracks: &Tracks, max_gap: f64) -> Vec<(i64, i64)> {
    let mut by_frame: BTreeMap<i64, Vec<(f64, i64, i64)>> = BTreeMap::new();
    for (&id, rows) in tracks {
        for (&frame, row) in rows {
            by_frame.entry(frame).or_default().push((row.position, row.lane, id));
        }
    }
    let mut pairs = HashSet::new();
    for vehicles in by_frame.values_mut() {
        vehicles.sort_by(|a, b| a.0.total_cmp(&b.0));
        for i in 0..vehicles.len() {
            for j in i + 1..vehicles.len() {
                let (xi, li, a) = vehicles[i];
                let (xj, lj, b) = vehicles[j];
                if xj - xi > max_gap {
                    break;
                }
                if (li - lj).abs() == 1 {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    let mut out: Vec<_> = pairs.into_iter().collect();
    out.sort_unstable();
    out
}

/// Samples of `overtaken` if `overtaker` passes it from behind; `None` otherwise.
fn pair_samples(tracks: &Tracks, overtaker: i64, overtaken: i64, opts: &IngestOptions) -> Option<Vec<Sample>> {
    let ego = &tracks[&overtaker];
    let ov = &tracks[&overtaken];
    let common: Vec<(Row, Row)> = ov.iter().filter_map(|(f, o)| ego.get(f).map(|e| (*e, *o))).collect();
    let (first, last) = (common.first()?, common.last()?);
    // Travel direction follows the sign of the overtaken vehicle's speed.
    let dir = |o: &Row| if o.speed < 0.0 { -1.0 } else { 1.0 };
    let gap = |(e, o): &(Row, Row)| dir(o) * (e.position - o.position);
    let passes = gap(first) < 0.0 && gap(last) > 0.0;
    let adjacent = common.iter().any(|(e, o)| (e.lane - o.lane).abs() == 1);
    if !passes || !adjacent {
        return None;
    }
    Some(
        common
            .iter()
            .filter(|(_, o)| o.speed.abs() > MIN_OV_SPEED)
            .map(|pair| Sample {
                headway: headway_time(gap(pair), pair.1.speed.abs()),
                accel: dir(&pair.1) * pair.1.accel,
            })
            .filter(|s| (opts.window.0..=opts.window.1).contains(&s.headway))
            .collect(),
    )
}

/// Extracts `(headway, accel)` samples of overtaken vehicles from a reader.
pub fn ingest_reader<R: Read>(
    reader: R,
    schema: &TrackSchema,
    opts: &IngestOptions,
) -> Result<Ingested, UncertaintyError> {
    let (tracks, skipped_rows) = read_tracks(reader, schema)?;
    let mut samples = Vec::new();
    let mut pairs = 0;
    for (a, b) in candidate_pairs(&tracks, opts.max_gap) {
        for (ego, ov) in [(a, b), (b, a)] {
            if let Some(s) = pair_samples(&tracks, ego, ov, opts) {
                pairs += 1;
                samples.extend(s);
            }
        }
    }
    if samples.is_empty() {
        return Err(UncertaintyError::NoSamples);
    }
    Ok(Ingested { samples, pairs, skipped_rows })
}

pub fn ingest_tracks(
    path: impl AsRef<Path>,
    schema: &TrackSchema,
    opts: &IngestOptions,
) -> Result<Ingested, UncertaintyError> {
    let file = std::fs::File::open(path)?;
    ingest_reader(std::io::BufReader::new(file), schema, opts)
}
