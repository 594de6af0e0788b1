use gtpro::uncertainty::synthetic::{write_tracks, TrackFixture};
use gtpro::uncertainty::{
    fit_bins, fit_variance_curve, ingest_tracks, CurveFitOptions, IngestOptions, TrackSchema, VarianceCurve,
};

#[test]
fn tracks_round_trip_to_the_generating_curve() {
    let truth = VarianceCurve::default();
    let fixture = TrackFixture { pairs: 260, ..TrackFixture::default() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tracks.csv");
    write_tracks(std::fs::File::create(&path).unwrap(), &truth, &fixture).unwrap();

    let ingested = ingest_tracks(&path, &TrackSchema::default(), &IngestOptions::default()).unwrap();
    assert_eq!(ingested.pairs, fixture.pairs);
    let bins = fit_bins(&ingested.samples, 0.1, 50).unwrap();
    assert_eq!(bins.len(), 36);
    for b in &bins {
        assert!(b.count >= 10_000, "bin {} holds {}", b.center, b.count);
        assert!(b.r_squared.unwrap() >= 0.95, "bin {} r2 {:?}", b.center, b.r_squared);
    }
    let fit = fit_variance_curve(&bins, &CurveFitOptions::default()).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..=36 {
        let t = -0.6 + 0.1 * i as f64;
        worst = worst.max((fit.lookup(t) - truth.lookup(t)).abs() / truth.lookup(t));
    }
    println!("worst relative error {worst:.4}, report {:?}", fit.fit);
    assert!(worst <= 0.05);
}
