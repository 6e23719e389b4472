//! Line-delimited step reports written by `track` and read by `eval`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use dmt_core::eval::TrackletRun;
use dmt_core::geometry::{Box3D, BoxSize, Point3};
use dmt_core::{Error, Result};

/// One tracked frame. `box` is `[cx, cy, cz, h, w, l, yaw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLine {
    pub tracklet_id: u32,
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 7],
    pub coarse_center: [f64; 3],
    pub fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub micros: Option<u64>,
}

pub fn box_array(b: &Box3D) -> [f64; 7] {
    let c = b.center();
    let s = b.size();
    [c.x, c.y, c.z, s.h, s.w, s.l, b.yaw()]
}

pub fn array_box(a: &[f64; 7]) -> Result<Box3D> {
    Box3D::new(Point3::new(a[0], a[1], a[2]), BoxSize::new(a[3], a[4], a[5]), a[6])
}

pub fn write_steps<W: Write>(mut w: W, steps: &[StepLine]) -> std::io::Result<()> {
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_steps<R: BufRead>(r: R) -> Result<Vec<StepLine>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Groups steps by tracklet. Frames of each tracklet must run 1, 2, ...
/// without gaps. Timing is kept only when every step of a tracklet has it.
pub fn steps_to_runs(steps: &[StepLine], categories: &BTreeMap<u32, String>) -> Result<Vec<TrackletRun>> {
    let mut grouped: BTreeMap<u32, Vec<&StepLine>> = BTreeMap::new();
    for s in steps {
        grouped.entry(s.tracklet_id).or_default().push(s);
    }
    grouped
        .into_iter()
        .map(|(id, mut lines)| {
            lines.sort_by_key(|s| s.frame);
            if lines.iter().enumerate().any(|(i, s)| s.frame != i + 1) {
                return Err(Error::Data(format!("tracklet {id}: step frames are not 1..{}", lines.len())));
            }
            Ok(TrackletRun {
                id,
                category: categories.get(&id).cloned().unwrap_or_default(),
                boxes: lines.iter().map(|s| array_box(&s.bbox)).collect::<Result<_>>()?,
                micros: lines.iter().map(|s| s.micros).sum(),
            })
        })
        .collect()
}
