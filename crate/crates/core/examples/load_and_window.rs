//! Round-trips generated traffic through the CSV loader, cuts it into
//! scene windows, labels maneuvers and splits the windows.

use std::collections::BTreeMap;

use safecast::trajectory::{
    extract_maneuver_labels, load_trajectories, split_windows, synthesize_tracks, window_scenes, write_ngsim_csv,
    LabelConfig, SplitConfig, SynthSpec, TrajectoryFormat, WindowConfig,
};

fn main() -> safecast::Result<()> {
    let spec = SynthSpec {
        n_scenes: 40,
        seed: 7,
        ..Default::default()
    };
    let tracks: Vec<_> = synthesize_tracks(&spec)?.into_iter().flat_map(|s| s.tracks).collect();
    let path = std::env::temp_dir().join("safecast_example_tracks.csv");
    write_ngsim_csv(&path, &tracks)?;

    let report = load_trajectories(&path, TrajectoryFormat::NgsimCsv, 10.0)?;
    println!(
        "loaded {} tracks from {} ({} rows skipped, {} velocity warnings)",
        report.tracks.len(),
        path.display(),
        report.skipped_rows,
        report.velocity_warnings
    );

    let cfg = WindowConfig::default();
    let windows = window_scenes(&report.tracks, &cfg, "example")?;
    let w = &windows[0];
    println!(
        "{} windows; first: ego {} at frame {}, {} history / {} future steps of {} s, {} neighbor slots",
        windows.len(),
        w.ego_id,
        w.anchor_frame,
        w.history_len(),
        w.future_len(),
        w.dt,
        w.n_slots()
    );

    let mut histogram = BTreeMap::new();
    for w in &windows {
        *histogram.entry(extract_maneuver_labels(w, &LabelConfig::default()).to_string()).or_insert(0) += 1;
    }
    println!("maneuver labels: {histogram:?}");

    let split = split_windows(windows, &SplitConfig::default(), 0)?;
    println!("split: {} train, {} val, {} test", split.train.len(), split.val.len(), split.test.len());
    std::fs::remove_file(&path).ok();
    Ok(())
}
