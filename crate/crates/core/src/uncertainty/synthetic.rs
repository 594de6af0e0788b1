//! Seeded generators of synthetic driver-response data.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Sample, UncertaintyError, VarianceCurve, LEFT_EDGE, RIGHT_EDGE};

fn normal(mean: f64, variance: f64) -> Normal<f64> {
    Normal::new(mean, variance.max(0.0).sqrt()).expect("finite moments")
}

/// `n` samples at a single headway.
pub fn gaussian_samples(headway: f64, mean: f64, variance: f64, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = normal(mean, variance);
    (0..n).map(|_| Sample { headway, accel: d.sample(&mut rng) }).collect()
}

/// `per_bin` samples in every bin of the interaction band with headways
/// uniform inside the bin and zero-mean accelerations of the curve's variance.
pub fn samples_from_curve(curve: &VarianceCurve, per_bin: usize, bin_width: f64, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = ((RIGHT_EDGE - LEFT_EDGE) / bin_width - 1e-9).ceil() as usize;
    let mut out = Vec::with_capacity(bins * per_bin);
    for i in 0..bins {
        let lo = LEFT_EDGE + i as f64 * bin_width;
        let hi = (lo + bin_width).min(RIGHT_EDGE);
        for _ in 0..per_bin {
            let headway = rng.random_range(lo..hi);
            out.push(Sample { headway, accel: normal(0.0, curve.lookup(headway)).sample(&mut rng) });
        }
    }
    out
}

/// Layout of a synthetic track table with one overtaking per frame block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackFixture {
    pub pairs: usize,
    pub frame_rate: f64,
    pub ov_speed: f64,
    pub speed_gap: f64,
    /// Headway span covered by each pass, s.
    pub headway_span: (f64, f64),
    pub seed: u64,
}

impl Default for TrackFixture {
    fn default() -> Self {
        Self { pairs: 250, frame_rate: 25.0, ov_speed: 16.0, speed_gap: 1.0, headway_span: (-0.8, 3.2), seed: 11 }
    }
}

impl TrackFixture {
    pub fn frames_per_pair(&self) -> usize {
        let gap_span = (self.headway_span.1 - self.headway_span.0) * self.ov_speed;
        (gap_span / self.speed_gap * self.frame_rate).ceil() as usize
    }

    /// Expected samples per headway bin across all pairs.
    pub fn samples_per_bin(&self, bin_width: f64) -> f64 {
        self.pairs as f64 * bin_width * self.ov_speed / self.speed_gap * self.frame_rate
    }
}

/// Writes a highD-style table in which every overtaken vehicle keeps its
/// speed while its recorded acceleration is drawn from the curve.
pub fn write_tracks<W: Write>(out: W, curve: &VarianceCurve, fixture: &TrackFixture) -> Result<(), UncertaintyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(fixture.seed);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "id", "x", "laneId", "xVelocity", "xAcceleration"])?;
    let frames = fixture.frames_per_pair();
    let dt = 1.0 / fixture.frame_rate;
    let ego_speed = fixture.ov_speed + fixture.speed_gap;
    for p in 0..fixture.pairs {
        let base = p * (frames + 10);
        let (ov_id, ego_id) = (2 * p + 1, 2 * p + 2);
        let start_gap = fixture.headway_span.0 * fixture.ov_speed;
        for f in 0..frames {
            let t = f as f64 * dt;
            let ov_x = 50.0 + fixture.ov_speed * t;
            let ego_x = 50.0 + start_gap + ego_speed * t;
            let headway = (ego_x - ov_x) / fixture.ov_speed;
            let accel = normal(0.0, curve.lookup(headway)).sample(&mut rng);
            let frame = (base + f).to_string();
            w.write_record([
                &frame,
                &ov_id.to_string(),
                &format!("{ov_x:.6}"),
                "2",
                &fixture.ov_speed.to_string(),
                &format!("{accel:.6}"),
            ])?;
            w.write_record([&frame, &ego_id.to_string(), &format!("{ego_x:.6}"), "3", &ego_speed.to_string(), "0"])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::{ingest_reader, IngestOptions, TrackSchema};

    #[test]
    fn generators_are_deterministic() {
        let c = VarianceCurve::default();
        assert_eq!(samples_from_curve(&c, 20, 0.1, 5), samples_from_curve(&c, 20, 0.1, 5));
        assert_ne!(samples_from_curve(&c, 20, 0.1, 5), samples_from_curve(&c, 20, 0.1, 6));
    }

    #[test]
    fn fixture_ingests_every_pair() {
        let fixture = TrackFixture { pairs: 3, ..TrackFixture::default() };
        let mut buf = Vec::new();
        write_tracks(&mut buf, &VarianceCurve::default(), &fixture).unwrap();
        let out = ingest_reader(buf.as_slice(), &TrackSchema::default(), &IngestOptions::default()).unwrap();
        assert_eq!(out.pairs, 3);
        assert_eq!(out.skipped_rows, 0);
        let expected = fixture.samples_per_bin(0.1) * 36.0;
        assert!((out.samples.len() as f64 - expected).abs() <= 0.01 * expected + 6.0);
    }
}
