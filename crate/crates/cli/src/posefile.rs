//! Pose files for `synth`.
//!
//! ```json
//! {"poses": [
//!   {"R": [1,0,0, 0,1,0, 0,0,1], "T": [0,0,0]},
//!   {"view": 2},
//!   {"R": [...], "T": [...], "inputs": [0, 1]}
//! ]}
//! ```
//!
//! A bare array is accepted too. `view` reuses a scene view's pose and
//! compares against its image; by default it is rendered from every other
//! view. Explicit poses render from all views unless `inputs` is given.

use std::path::Path;

use fwd_core::geometry::Pose;
use fwd_core::io::SceneBundle;
use fwd_core::{FwdError, Real, Result};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEntry {
    pub pose: Pose,
    pub inputs: Vec<usize>,
    /// Scene view whose image is the ground truth.
    pub view: Option<usize>,
}

fn field<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    v.as_object().and_then(|o| o.get(key))
}

fn numbers<const N: usize>(v: &Value, file: &str, name: &str) -> Result<[Real; N]> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == N)
        .ok_or_else(|| FwdError::Format {
            file: file.into(),
            field: name.into(),
            msg: format!("expected an array of {N} numbers"),
        })?;
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = x.as_f64().ok_or_else(|| FwdError::Format {
            file: file.into(),
            field: name.into(),
            msg: format!("{x} is not a number"),
        })? as Real;
    }
    Ok(out)
}

pub fn parse_pose_file(text: &str, file: &str, scene: &SceneBundle) -> Result<Vec<PoseEntry>> {
    let err = |field: String, msg: String| FwdError::Format {
        file: file.into(),
        field,
        msg,
    };
    let root: Value = serde_json::from_str(text).map_err(|e| err(format!("line {}", e.line()), e.to_string()))?;
    let list = match &root {
        Value::Array(a) => a,
        Value::Object(o) => o
            .get("poses")
            .and_then(Value::as_array)
            .ok_or_else(|| err("poses".into(), "expected an array".into()))?,
        _ => return Err(err("poses".into(), "expected an array or {\"poses\": [...]}".into())),
    };
    let n = scene.len();
    let mut out = Vec::with_capacity(list.len());
    for (i, e) in list.iter().enumerate() {
        let at = |k: &str| format!("poses[{i}].{k}");
        let view = match field(e, "view") {
            Some(v) => {
                let idx = v.as_u64().map(|x| x as usize).filter(|&x| x < n).ok_or_else(|| {
                    err(at("view"), format!("expected a view index below {n}, got {v}"))
                })?;
                Some(idx)
            }
            None => None,
        };
        let pose = match (view, field(e, "R"), field(e, "T")) {
            (_, Some(r), Some(t)) => {
                let r = numbers::<9>(r, file, &at("R"))?;
                let t = numbers::<3>(t, file, &at("T"))?;
                Pose::from_row_major(&r, &t).map_err(|e| match e {
                    FwdError::Domain(m) => err(at("R"), m),
                    other => other,
                })?
            }
            (Some(v), None, None) => scene.views[v].pose,
            _ => return Err(err(format!("poses[{i}]"), "needs \"R\" and \"T\", or \"view\"".into())),
        };
        let inputs = match field(e, "inputs") {
            Some(v) => {
                let arr = v.as_array().ok_or_else(|| err(at("inputs"), "expected an array".into()))?;
                let idx = arr
                    .iter()
                    .map(|x| x.as_u64().map(|x| x as usize).filter(|&x| x < n))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| err(at("inputs"), format!("entries must be view indices below {n}")))?;
                if idx.is_empty() {
                    return Err(err(at("inputs"), "no input views".into()));
                }
                idx
            }
            None => (0..n).filter(|&j| Some(j) != view || n == 1).collect(),
        };
        out.push(PoseEntry { pose, inputs, view });
    }
    Ok(out)
}

pub fn read_pose_file(path: &Path, scene: &SceneBundle) -> Result<Vec<PoseEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| FwdError::Io {
        path: path.into(),
        source: e,
    })?;
    parse_pose_file(&text, &path.display().to_string(), scene)
}
