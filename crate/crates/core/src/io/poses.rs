//! CSV pose tables.
//!
//! Layout: a header row `index,theta1_rad,theta2_rad,theta3_rad,t1_px,t2_px`,
//! one row per projection, indices 0..P-1. An extended table may append the
//! same five value columns with a `_true` suffix to carry ground-truth poses
//! alongside estimates. Values are written with 17 significant digits so an
//! f64 round-trips exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::CryoError;
use crate::geometry::{EulerAngles, InPlaneShift, Pose};

const COLUMNS: [&str; 5] = ["theta1_rad", "theta2_rad", "theta3_rad", "t1_px", "t2_px"];

/// Result of parsing a pose table.
#[derive(Debug, Clone)]
pub struct PoseTable {
    /// Estimated (or only) poses, ordered by index.
    pub poses: Vec<Pose>,
    /// Ground-truth poses if the file carried `_true` columns.
    pub truth: Option<Vec<Pose>>,
    /// Non-fatal observations, e.g. angles outside the canonical range.
    pub warnings: Vec<String>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

fn render(out: &mut String, pose: &Pose) {
    let a = pose.angles;
    let t = pose.shift;
    for v in [a.theta1, a.theta2, a.theta3, t.t1, t.t2] {
        write!(out, ",{}", fmt_f64(v)).unwrap();
    }
}

/// Serializes poses (and optional ground truth) to CSV text.
pub fn poses_to_csv(poses: &[Pose], truth: Option<&[Pose]>) -> Result<String, CryoError> {
    if let Some(t) = truth {
        if t.len() != poses.len() {
            return Err(CryoError::Shape(format!(
                "pose table has {} estimates but {} ground-truth rows",
                poses.len(),
                t.len()
            )));
        }
    }
    let mut out = String::from("index");
    for c in COLUMNS {
        write!(out, ",{c}").unwrap();
    }
    if truth.is_some() {
        for c in COLUMNS {
            write!(out, ",{c}_true").unwrap();
        }
    }
    out.push('\n');
    for (i, pose) in poses.iter().enumerate() {
        write!(out, "{i}").unwrap();
        render(&mut out, pose);
        if let Some(t) = truth {
            render(&mut out, &t[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_poses(path: &Path, poses: &[Pose], truth: Option<&[Pose]>) -> Result<(), CryoError> {
    std::fs::write(path, poses_to_csv(poses, truth)?)?;
    Ok(())
}

fn parse_field(raw: &str, name: &str, row: usize) -> Result<f64, CryoError> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| CryoError::PoseTable {
            row,
            msg: format!("column {name} is not a number: {raw:?}"),
        })?;
    if !v.is_finite() {
        return Err(CryoError::PoseTable {
            row,
            msg: format!("column {name} is not finite: {raw}"),
        });
    }
    Ok(v)
}

fn pose_from_fields(
    fields: &[&str],
    start: usize,
    suffix: &str,
    row: usize,
    warnings: &mut Vec<String>,
) -> Result<Pose, CryoError> {
    let mut v = [0.0f64; 5];
    for (k, slot) in v.iter_mut().enumerate() {
        *slot = parse_field(fields[start + k], &format!("{}{suffix}", COLUMNS[k]), row)?;
    }
    let raw = EulerAngles {
        theta1: v[0],
        theta2: v[1],
        theta3: v[2],
    };
    let canon = raw.canonicalized();
    if canon != raw {
        warnings.push(format!(
            "row {row}: angles ({}, {}, {}) outside the canonical range; canonicalized",
            v[0], v[1], v[2]
        ));
    }
    Ok(Pose::new(canon, InPlaneShift { t1: v[3], t2: v[4] }))
}

/// Parses CSV pose-table text.
pub fn poses_from_csv(text: &str) -> Result<PoseTable, CryoError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CryoError::PoseTable {
        row: 0,
        msg: "empty pose table".to_string(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let base: Vec<String> = std::iter::once("index".to_string())
        .chain(COLUMNS.iter().map(|c| c.to_string()))
        .collect();
    let with_truth: Vec<String> = base
        .iter()
        .cloned()
        .chain(COLUMNS.iter().map(|c| format!("{c}_true")))
        .collect();
    let has_truth = if cols == base {
        false
    } else if cols == with_truth {
        true
    } else {
        let missing = base
            .iter()
            .find(|c| !cols.contains(&c.as_str()))
            .cloned()
            .unwrap_or_else(|| "unexpected column order".to_string());
        return Err(CryoError::PoseTable {
            row: 0,
            msg: format!("bad header (expected {:?}): missing or misplaced {missing}", base.join(",")),
        });
    };
    let want_fields = if has_truth { 11 } else { 6 };

    let mut warnings = Vec::new();
    let mut rows: Vec<(usize, Pose, Option<Pose>)> = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = lineno; // header is row 0, data starts at 1
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != want_fields {
            return Err(CryoError::PoseTable {
                row,
                msg: format!("expected {want_fields} fields, found {}", fields.len()),
            });
        }
        let index: usize = fields[0].trim().parse().map_err(|_| CryoError::PoseTable {
            row,
            msg: format!("bad index {:?}", fields[0]),
        })?;
        let pose = pose_from_fields(&fields, 1, "", row, &mut warnings)?;
        let truth = if has_truth {
            Some(pose_from_fields(&fields, 6, "_true", row, &mut warnings)?)
        } else {
            None
        };
        rows.push((index, pose, truth));
    }

    rows.sort_by_key(|r| r.0);
    for (slot, (index, _, _)) in rows.iter().enumerate() {
        if *index != slot {
            let msg = if rows.iter().filter(|r| r.0 == *index).count() > 1 {
                format!("duplicate index {index}")
            } else {
                format!("indices must cover 0..{} exactly; found {index}", rows.len())
            };
            return Err(CryoError::PoseTable { row: slot + 1, msg });
        }
    }
    let truth = if has_truth {
        Some(rows.iter().map(|r| r.2.unwrap()).collect())
    } else {
        None
    };
    Ok(PoseTable {
        poses: rows.into_iter().map(|r| r.1).collect(),
        truth,
        warnings,
    })
}

pub fn read_poses(path: &Path) -> Result<PoseTable, CryoError> {
    poses_from_csv(&std::fs::read_to_string(path)?)
}
