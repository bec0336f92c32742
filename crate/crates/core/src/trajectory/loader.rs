//! Trajectory log readers and the CSV writer used by the generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentState, AgentType, Track};
use crate::error::{Error, Result};

pub const NGSIM_COLUMNS: [&str; 10] = ["frame", "agent_id", "x", "y", "vx", "vy", "ax", "ay", "type", "lane_id"];

/// Tolerance between reported velocities and position differences.
pub const VELOCITY_CONSISTENCY_TOL: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    #[default]
    NgsimCsv,
    ApolloTxt,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub tracks: Vec<Track>,
    /// Rows dropped because a field failed to parse or a frame repeated.
    pub skipped_rows: usize,
    /// Consecutive-frame pairs whose reported velocity disagrees with the
    /// position difference by more than [`VELOCITY_CONSISTENCY_TOL`].
    pub velocity_warnings: usize,
}

pub fn load_trajectories(path: &Path, format: TrajectoryFormat, frame_rate_hz: f64) -> Result<LoadReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyInput(format!("{} contains no data", path.display())));
    }
    let name = path.display().to_string();
    match format {
        TrajectoryFormat::NgsimCsv => parse_ngsim_csv(&text, &name, frame_rate_hz),
        TrajectoryFormat::ApolloTxt => parse_apollo_txt(&text, &name, frame_rate_hz),
    }
}

pub fn parse_ngsim_csv(text: &str, source: &str, frame_rate_hz: f64) -> Result<LoadReport> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Format {
        path: source.to_string(),
        message: e.to_string(),
    })?;
    let mut col = [0usize; 10];
    for (k, name) in NGSIM_COLUMNS.iter().enumerate() {
        col[k] = headers.iter().position(|h| h == *name).ok_or_else(|| Error::Format {
            path: source.to_string(),
            message: format!("missing required column `{name}`"),
        })?;
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    let mut seen_rows = 0;
    for record in reader.records() {
        seen_rows += 1;
        let Ok(record) = record else {
            skipped += 1;
            continue;
        };
        match parse_ngsim_record(&record, &col) {
            Some(s) => rows.push(s),
            None => skipped += 1,
        }
    }
    if seen_rows == 0 {
        return Err(Error::EmptyInput(format!("{source} has a header but no rows")));
    }
    let (tracks, dupes) = group_tracks(rows);
    let velocity_warnings = tracks.iter().map(|t| velocity_inconsistencies(t, frame_rate_hz)).sum();
    Ok(LoadReport {
        tracks,
        skipped_rows: skipped + dupes,
        velocity_warnings,
    })
}

fn parse_ngsim_record(r: &csv::StringRecord, col: &[usize; 10]) -> Option<AgentState> {
    let num = |k: usize| -> Option<f64> { r.get(col[k])?.parse::<f64>().ok().filter(|v| v.is_finite()) };
    let int = |k: usize| -> Option<i64> { r.get(col[k])?.parse::<i64>().ok() };
    let lane = r.get(col[9])?;
    let lane_id = if lane.is_empty() { None } else { Some(lane.parse::<i64>().ok()?) };
    Some(AgentState {
        frame: int(0)?,
        agent_id: int(1)?,
        p: [num(2)?, num(3)?],
        v: [num(4)?, num(5)?],
        a: [num(6)?, num(7)?],
        kind: r.get(col[8])?.parse().ok()?,
        lane_id,
    })
}

fn apollo_type(code: &str) -> Option<AgentType> {
    match code {
        "1" | "2" | "5" => Some(AgentType::Vehicle),
        "3" => Some(AgentType::Pedestrian),
        "4" => Some(AgentType::Bicycle),
        other => other.parse().ok(),
    }
}

pub fn parse_apollo_txt(text: &str, source: &str, frame_rate_hz: f64) -> Result<LoadReport> {
    let mut rows = Vec::new();
    let mut skipped = 0;
    let mut seen = 0;
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        seen += 1;
        let parsed = (|| {
            Some(AgentState {
                frame: fields.first()?.parse().ok()?,
                agent_id: fields.get(1)?.parse().ok()?,
                kind: apollo_type(fields.get(2)?)?,
                p: [
                    fields.get(3)?.parse::<f64>().ok().filter(|v| v.is_finite())?,
                    fields.get(4)?.parse::<f64>().ok().filter(|v| v.is_finite())?,
                ],
                ..Default::default()
            })
        })();
        match parsed {
            Some(s) => rows.push(s),
            None => skipped += 1,
        }
    }
    if seen == 0 {
        return Err(Error::EmptyInput(format!("{source} contains no rows")));
    }
    let (mut tracks, dupes) = group_tracks(rows);
    for t in &mut tracks {
        derive_kinematics(t, frame_rate_hz);
    }
    Ok(LoadReport {
        tracks,
        skipped_rows: skipped + dupes,
        velocity_warnings: 0,
    })
}

/// Groups rows by agent, sorts each track by frame and drops repeated
/// frames. Returns the tracks (ordered by agent id) and the drop count.
fn group_tracks(rows: Vec<AgentState>) -> (Vec<Track>, usize) {
    let mut by_agent: BTreeMap<i64, Vec<AgentState>> = BTreeMap::new();
    for s in rows {
        by_agent.entry(s.agent_id).or_default().push(s);
    }
    let mut dupes = 0;
    let tracks = by_agent
        .into_iter()
        .map(|(agent_id, mut states)| {
            states.sort_by_key(|s| s.frame);
            let before = states.len();
            states.dedup_by_key(|s| s.frame);
            dupes += before - states.len();
            Track { agent_id, states }
        })
        .collect();
    (tracks, dupes)
}

/// Fills velocities and accelerations by central differences (one-sided at
/// the ends).
pub fn derive_kinematics(track: &mut Track, frame_rate_hz: f64) {
    let n = track.states.len();
    if n < 2 {
        for s in &mut track.states {
            s.v = [0.0; 2];
            s.a = [0.0; 2];
        }
        return;
    }
    let dt = 1.0 / frame_rate_hz;
    let diff = |vals: &[[f64; 2]], frames: &[i64], k: usize| -> [f64; 2] {
        let (lo, hi) = (k.saturating_sub(1), (k + 1).min(n - 1));
        let span = (frames[hi] - frames[lo]) as f64 * dt;
        [(vals[hi][0] - vals[lo][0]) / span, (vals[hi][1] - vals[lo][1]) / span]
    };
    let frames: Vec<i64> = track.states.iter().map(|s| s.frame).collect();
    let pos: Vec<[f64; 2]> = track.states.iter().map(|s| s.p).collect();
    let vel: Vec<[f64; 2]> = (0..n).map(|k| diff(&pos, &frames, k)).collect();
    let acc: Vec<[f64; 2]> = (0..n).map(|k| diff(&vel, &frames, k)).collect();
    for (k, s) in track.states.iter_mut().enumerate() {
        s.v = vel[k];
        s.a = acc[k];
    }
}

fn velocity_inconsistencies(track: &Track, frame_rate_hz: f64) -> usize {
    track
        .states
        .windows(2)
        .filter(|w| w[1].frame == w[0].frame + 1)
        .filter(|w| {
            let dt = 1.0 / frame_rate_hz;
            let vx = (w[1].p[0] - w[0].p[0]) / dt;
            let vy = (w[1].p[1] - w[0].p[1]) / dt;
            let mean = [(w[0].v[0] + w[1].v[0]) / 2.0, (w[0].v[1] + w[1].v[1]) / 2.0];
            (vx - mean[0]).hypot(vy - mean[1]) > VELOCITY_CONSISTENCY_TOL
        })
        .count()
}

/// Writes tracks in the `ngsim_csv` layout, rows ordered by frame then
/// agent id.
pub fn write_ngsim_csv(path: &Path, tracks: &[Track]) -> Result<()> {
    let mut rows: Vec<&AgentState> = tracks.iter().flat_map(|t| t.states.iter()).collect();
    rows.sort_by_key(|s| (s.frame, s.agent_id));
    let mut out = Vec::with_capacity(rows.len() * 80);
    writeln!(out, "{}", NGSIM_COLUMNS.join(",")).expect("write to vec");
    for s in rows {
        let lane = s.lane_id.map(|l| l.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.frame, s.agent_id, s.p[0], s.p[1], s.v[0], s.v[1], s.a[0], s.a[1], s.kind, lane
        )
        .expect("write to vec");
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "frame,agent_id,x,y,vx,vy,ax,ay,type,lane_id\n";

    #[test]
    fn two_row_file_gives_one_track() {
        let text = format!("{HEADER}1,7,0,0,10,0,0,0,vehicle,2\n2,7,1,0,10,0,0,0,vehicle,2\n");
        let r = parse_ngsim_csv(&text, "mem", 10.0).unwrap();
        assert_eq!(r.tracks.len(), 1);
        assert_eq!(r.tracks[0].states.len(), 2);
        assert_eq!(r.skipped_rows, 0);
        assert_eq!(r.velocity_warnings, 0);
    }

    #[test]
    fn non_numeric_x_row_is_skipped() {
        let text = format!("{HEADER}1,7,abc,0,10,0,0,0,vehicle,2\n2,7,1,0,10,0,0,0,vehicle,2\n");
        let r = parse_ngsim_csv(&text, "mem", 10.0).unwrap();
        assert_eq!(r.skipped_rows, 1);
        assert_eq!(r.tracks[0].states.len(), 1);
    }

    #[test]
    fn interleaved_agents_are_grouped_and_sorted() {
        let mut text = HEADER.to_string();
        for (frame, agent) in [(3, 1), (1, 2), (2, 3), (1, 1), (3, 2), (1, 3), (2, 1), (2, 2), (3, 3)] {
            text.push_str(&format!("{frame},{agent},0,0,0,0,0,0,vehicle,1\n"));
        }
        let r = parse_ngsim_csv(&text, "mem", 10.0).unwrap();
        assert_eq!(r.tracks.len(), 3);
        for t in &r.tracks {
            let frames: Vec<i64> = t.states.iter().map(|s| s.frame).collect();
            assert_eq!(frames, vec![1, 2, 3]);
        }
    }

    #[test]
    fn missing_column_is_named() {
        let text = "frame,agent_id,x,y,vx,vy,ax,type,lane_id\n1,1,0,0,0,0,0,vehicle,1\n";
        let err = parse_ngsim_csv(text, "mem", 10.0).unwrap_err();
        assert!(err.to_string().contains("`ay`"), "{err}");
    }

    #[test]
    fn empty_file_is_empty_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(
            load_trajectories(&p, TrajectoryFormat::NgsimCsv, 10.0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn inconsistent_velocity_is_a_warning_not_an_error() {
        let text = format!("{HEADER}1,7,0,0,10,0,0,0,vehicle,2\n2,7,5,0,10,0,0,0,vehicle,2\n");
        let r = parse_ngsim_csv(&text, "mem", 10.0).unwrap();
        assert_eq!(r.velocity_warnings, 1);
    }

    #[test]
    fn apollo_central_differences() {
        let text = "0 1 1 0 0\n1 1 1 1 0\n2 1 1 4 0\n3 1 3 9 0\n";
        let r = parse_apollo_txt(text, "mem", 1.0).unwrap();
        let s = &r.tracks[0].states;
        assert_eq!(s[1].v, [2.0, 0.0]);
        assert_eq!(s[2].v, [4.0, 0.0]);
        assert_eq!(s[0].v, [1.0, 0.0]);
        assert_eq!(s[3].kind, AgentType::Pedestrian);
        assert_eq!(s[0].lane_id, None);
    }

    #[test]
    fn writer_round_trips_through_reader() {
        let states = (0..4)
            .map(|k| AgentState {
                agent_id: 3,
                frame: k,
                p: [k as f64 * 0.1, 0.25],
                v: [1.0, 0.0],
                a: [0.0, 0.0],
                kind: AgentType::Bicycle,
                lane_id: Some(1),
            })
            .collect();
        let tracks = vec![Track { agent_id: 3, states }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_ngsim_csv(&p, &tracks).unwrap();
        let r = load_trajectories(&p, TrajectoryFormat::NgsimCsv, 10.0).unwrap();
        assert_eq!(r.tracks, tracks);
    }
}
