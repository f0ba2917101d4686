//! Annotation JSON: one object per image,
//!
//! ```json
//! {"id": "000001", "width": 64, "height": 64,
//!  "joints": [{"name": "r-ankle", "x": 20.5, "y": 51.0, "visible": true}, ...]}
//! ```
//!
//! with exactly 14 joints in canonical order. A multi-image file holds a JSON
//! array of such objects.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::skeleton::{canonical_skeleton, KeypointSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub keypoints: KeypointSet,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointRecord {
    name: String,
    x: f64,
    y: f64,
    visible: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    id: String,
    width: usize,
    height: usize,
    joints: Vec<JointRecord>,
}

impl From<&Annotation> for ImageRecord {
    fn from(a: &Annotation) -> Self {
        let sk = canonical_skeleton();
        ImageRecord {
            id: a.id.clone(),
            width: a.width,
            height: a.height,
            joints: a
                .keypoints
                .points
                .iter()
                .zip(&a.keypoints.visible)
                .enumerate()
                .map(|(j, (p, v))| JointRecord {
                    name: sk.joint_names.get(j).map_or_else(|| format!("joint-{j}"), |n| n.to_string()),
                    x: p.x,
                    y: p.y,
                    visible: *v,
                })
                .collect(),
        }
    }
}

impl TryFrom<ImageRecord> for Annotation {
    type Error = Error;

    fn try_from(r: ImageRecord) -> Result<Self> {
        let sk = canonical_skeleton();
        if r.joints.len() != sk.num_joints() {
            return Err(Error::SchemaMismatch(format!(
                "image {:?}: expected {} joints, found {}",
                r.id,
                sk.num_joints(),
                r.joints.len()
            )));
        }
        for (j, rec) in r.joints.iter().enumerate() {
            if rec.name != sk.joint_names[j] {
                return Err(Error::SchemaMismatch(format!(
                    "image {:?}: joint {j} is {:?}, expected {:?}",
                    r.id, rec.name, sk.joint_names[j]
                )));
            }
        }
        let keypoints = KeypointSet {
            points: r.joints.iter().map(|j| Point::new(j.x, j.y)).collect(),
            visible: r.joints.iter().map(|j| j.visible).collect(),
        };
        keypoints.validate(&sk)?;
        Ok(Annotation {
            id: r.id,
            width: r.width,
            height: r.height,
            keypoints,
        })
    }
}

fn parse_error(text: &str, e: serde_json::Error) -> Error {
    let (line, column) = (e.line(), e.column());
    // serde_json reports 1-based line and column; column 0 means "before the
    // first character of the line"
    let offset = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + column.saturating_sub(1);
    Error::Parse {
        line,
        column,
        offset: offset.min(text.len()),
        message: e.to_string(),
    }
}

pub fn encode_annotation(a: &Annotation) -> String {
    let mut s = serde_json::to_string_pretty(&ImageRecord::from(a)).expect("annotation serializes");
    s.push('\n');
    s
}

pub fn decode_annotation(text: &str) -> Result<Annotation> {
    let rec: ImageRecord = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    rec.try_into()
}

pub fn encode_annotations(corpus: &[Annotation]) -> String {
    let recs: Vec<ImageRecord> = corpus.iter().map(ImageRecord::from).collect();
    let mut s = serde_json::to_string_pretty(&recs).expect("annotations serialize");
    s.push('\n');
    s
}

pub fn decode_annotations(text: &str) -> Result<Vec<Annotation>> {
    let recs: Vec<ImageRecord> = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    recs.into_iter().map(Annotation::try_from).collect()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_annotation(path: impl AsRef<Path>, a: &Annotation) -> Result<()> {
    std::fs::write(path.as_ref(), encode_annotation(a)).map_err(|e| Error::io(path, e))
}

pub fn read_annotation(path: impl AsRef<Path>) -> Result<Annotation> {
    decode_annotation(&read_text(path.as_ref())?)
}

pub fn write_annotations(path: impl AsRef<Path>, corpus: &[Annotation]) -> Result<()> {
    std::fs::write(path.as_ref(), encode_annotations(corpus)).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    decode_annotations(&read_text(path.as_ref())?)
}
