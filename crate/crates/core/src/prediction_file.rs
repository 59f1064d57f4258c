//! Tab-separated triplet prediction files.
//!
//! One record per line: `scene_id`, subject box (x1 y1 x2 y2), subject
//! class, object box, object class, predicate, score. Reals are written in
//! shortest round-trip form, so reading back is exact. Lines starting with
//! `#` are comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::RankedTriplet;
use crate::scene::BoundingBox;

const FIELDS: usize = 13;

/// Renders `(scene_id, triplet)` records.
pub fn format_predictions<'a>(records: impl IntoIterator<Item = (usize, &'a RankedTriplet)>) -> String {
    let mut out = String::new();
    for (scene, t) in records {
        let s = t.subject_box;
        let o = t.object_box;
        let _ = writeln!(
            out,
            "{scene}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.x1, s.y1, s.x2, s.y2, t.subject_class, o.x1, o.y1, o.x2, o.y2, t.object_class, t.predicate, t.score
        );
    }
    out
}

/// Parses records into per-scene lists, `num_scenes` long, preserving file
/// order within a scene. Object indices are not stored, so `pair` is `None`.
pub fn parse_predictions(text: &str, num_scenes: usize, path: &Path) -> Result<Vec<Vec<RankedTriplet>>> {
    let mut scenes = vec![Vec::new(); num_scenes];
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != FIELDS {
            return Err(err(format!(
                "expected {FIELDS} tab-separated fields, found {}",
                fields.len()
            )));
        }
        let int = |k: usize| {
            fields[k]
                .trim()
                .parse::<usize>()
                .map_err(|e| err(format!("field {}: {e}", k + 1)))
        };
        let real = |k: usize| {
            let v = fields[k]
                .trim()
                .parse::<f64>()
                .map_err(|e| err(format!("field {}: {e}", k + 1)))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("field {} is not finite", k + 1)))
            }
        };
        let bbox = |k: usize| -> Result<BoundingBox> {
            BoundingBox::new(real(k)?, real(k + 1)?, real(k + 2)?, real(k + 3)?).map_err(|e| err(e.to_string()))
        };
        let scene = int(0)?;
        if scene >= num_scenes {
            return Err(err(format!("scene id {scene} outside 0..{num_scenes}")));
        }
        let predicate = int(11)?;
        if predicate == 0 {
            return Err(err("predicate 0 (no relation) cannot be a prediction".into()));
        }
        scenes[scene].push(RankedTriplet {
            pair: None,
            subject_box: bbox(1)?,
            subject_class: int(5)?,
            object_box: bbox(6)?,
            object_class: int(10)?,
            predicate,
            score: real(12)?,
        });
    }
    Ok(scenes)
}

/// Orders each scene's triplets by descending score, keeping file order on ties.
pub fn sort_by_score(scenes: &mut [Vec<RankedTriplet>]) {
    for s in scenes {
        s.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
}

pub fn read_predictions(path: impl AsRef<Path>, num_scenes: usize) -> Result<Vec<Vec<RankedTriplet>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_predictions(&text, num_scenes, path)
}
