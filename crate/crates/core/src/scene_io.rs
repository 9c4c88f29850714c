//! Scene and dataset files: canonical JSON with sorted keys and
//! shortest-round-trip float formatting, so save(load(p)) is byte-identical
//! for canonically written files.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde_json::{Map, Value, json};

use crate::error::{CoreError, Result};
use crate::motion::{MotionSequence, Skeleton};

pub const SCENE_FORMAT_VERSION: u64 = 1;

/// Serialize through `serde_json::Value`, whose object map is a BTreeMap:
/// keys come out sorted, floats in shortest round-trip form.
pub fn canonical_json(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("canonical json");
    s.push('\n');
    s
}

pub fn scene_to_value(seq: &MotionSequence) -> Value {
    let (n, frames, j, _) = seq.positions.dim();
    let mut persons = Vec::with_capacity(n);
    for pi in 0..n {
        let mut frames_v = Vec::with_capacity(frames);
        for t in 0..frames {
            let mut joints_v = Vec::with_capacity(j);
            for ji in 0..j {
                joints_v.push(json!([
                    seq.positions[(pi, t, ji, 0)],
                    seq.positions[(pi, t, ji, 1)],
                    seq.positions[(pi, t, ji, 2)]
                ]));
            }
            frames_v.push(Value::Array(joints_v));
        }
        persons.push(Value::Array(frames_v));
    }
    json!({
        "format_version": SCENE_FORMAT_VERSION,
        "fps": seq.fps,
        "skeleton": {
            "joint_names": seq.skeleton.joint_names,
            "edges": seq.skeleton.edges.iter().map(|&(a, b)| json!([a, b])).collect::<Vec<_>>(),
        },
        "positions": Value::Array(persons),
    })
}

pub fn save_scene(seq: &MotionSequence, path: &Path) -> Result<()> {
    fs::write(path, canonical_json(&scene_to_value(seq)))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<MotionSequence> {
    let text = fs::read_to_string(path)
        .map_err(|e| CoreError::MalformedFile { path: path.display().to_string(), reason: e.to_string() })?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CoreError::MalformedFile { path: path.display().to_string(), reason: e.to_string() })?;
    scene_from_value(&value, path)
}

fn bad(path: &Path, reason: impl Into<String>) -> CoreError {
    CoreError::MalformedFile { path: path.display().to_string(), reason: reason.into() }
}

pub fn scene_from_value(value: &Value, path: &Path) -> Result<MotionSequence> {
    let obj = value.as_object().ok_or_else(|| bad(path, "top level is not an object"))?;
    let version = obj
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad(path, "missing format_version"))?;
    if version != SCENE_FORMAT_VERSION {
        return Err(bad(path, format!("unsupported format_version {version}")));
    }
    let fps = obj.get("fps").and_then(Value::as_f64).ok_or_else(|| bad(path, "missing fps"))?;

    let sk = obj
        .get("skeleton")
        .and_then(Value::as_object)
        .ok_or_else(|| bad(path, "missing skeleton"))?;
    let joint_names: Vec<String> = sk
        .get("joint_names")
        .and_then(Value::as_array)
        .ok_or_else(|| bad(path, "missing skeleton.joint_names"))?
        .iter()
        .map(|v| v.as_str().map(String::from).ok_or_else(|| bad(path, "joint name is not a string")))
        .collect::<Result<_>>()?;
    let edges: Vec<(usize, usize)> = sk
        .get("edges")
        .and_then(Value::as_array)
        .ok_or_else(|| bad(path, "missing skeleton.edges"))?
        .iter()
        .map(|v| {
            let pair = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| bad(path, "edge is not a pair"))?;
            let a = pair[0].as_u64().ok_or_else(|| bad(path, "edge index is not an integer"))?;
            let b = pair[1].as_u64().ok_or_else(|| bad(path, "edge index is not an integer"))?;
            Ok((a as usize, b as usize))
        })
        .collect::<Result<_>>()?;
    let skeleton = Skeleton::new(joint_names, edges)?;
    let j = skeleton.joint_count();

    let persons = obj
        .get("positions")
        .and_then(Value::as_array)
        .ok_or_else(|| bad(path, "missing positions"))?;
    let n = persons.len();
    if n == 0 {
        return Err(bad(path, "no persons"));
    }
    let frames = persons[0].as_array().map(|a| a.len()).unwrap_or(0);
    if frames == 0 {
        return Err(bad(path, "no frames"));
    }

    let mut positions = Array4::<f64>::zeros((n, frames, j, 3));
    for (pi, person) in persons.iter().enumerate() {
        let frames_v = person.as_array().ok_or_else(|| bad(path, "person entry is not an array"))?;
        if frames_v.len() != frames {
            return Err(CoreError::ShapeMismatch(format!(
                "person {pi} has {} frames, person 0 has {frames}",
                frames_v.len()
            )));
        }
        for (t, frame) in frames_v.iter().enumerate() {
            let joints_v = frame.as_array().ok_or_else(|| bad(path, "frame entry is not an array"))?;
            if joints_v.len() != j {
                return Err(CoreError::ShapeMismatch(format!(
                    "person {pi} frame {t} has {} joints, skeleton declares {j}",
                    joints_v.len()
                )));
            }
            for (ji, joint) in joints_v.iter().enumerate() {
                let coords = joint.as_array().filter(|a| a.len() == 3).ok_or_else(|| bad(path, "joint is not an [x,y,z] triple"))?;
                for c in 0..3 {
                    let v = coords[c]
                        .as_f64()
                        .ok_or_else(|| CoreError::NonFinite(format!("person {pi} frame {t} joint {ji} coord {c}")))?;
                    positions[(pi, t, ji, c)] = v;
                }
            }
        }
    }
    MotionSequence::new(skeleton, positions, fps)
}

/// Dataset manifest: scene paths relative to the manifest's directory, each
/// tagged "train", "val", or "test".
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub format_version: u64,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: String,
}

pub fn save_manifest(manifest: &Manifest, dir: &Path) -> Result<()> {
    let value = serde_json::to_value(manifest)?;
    fs::write(dir.join("manifest.json"), canonical_json(&value))?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CoreError::DataError(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CoreError::MalformedFile { path: path.display().to_string(), reason: e.to_string() })?;
    Ok(manifest)
}

/// Load every scene in `dir` whose manifest split tag equals `split`.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<(PathBuf, MotionSequence)>> {
    let manifest = load_manifest(dir)?;
    let mut out = Vec::new();
    for entry in &manifest.scenes {
        if entry.split == split {
            let p = dir.join(&entry.path);
            out.push((p.clone(), load_scene(&p)?));
        }
    }
    Ok(out)
}

/// Parse for values that came out of `scene_to_value`; used by tests and FFI.
pub fn scene_from_str(text: &str) -> Result<MotionSequence> {
    let value: Value = serde_json::from_str(text)?;
    scene_from_value(&value, Path::new("<memory>"))
}

/// Render any serializable struct canonically (sorted keys).
pub fn to_canonical_string<T: serde::Serialize>(v: &T) -> Result<String> {
    let value = serde_json::to_value(v)?;
    Ok(canonical_json(&value))
}

/// Map-based helper used by debug/attention exports.
pub fn object(entries: Vec<(&str, Value)>) -> Value {
    let mut m = Map::new();
    for (k, v) in entries {
        m.insert(k.to_string(), v);
    }
    Value::Object(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::Skeleton;
    use ndarray::Array4;

    fn sample_scene() -> MotionSequence {
        let sk = Skeleton::new(
            vec!["root".into(), "a".into(), "b".into(), "c".into()],
            vec![(0, 1), (1, 2), (1, 3)],
        )
        .unwrap();
        let positions = Array4::from_shape_fn((2, 30, 4, 3), |(n, t, j, c)| {
            0.1 * n as f64 + 0.01 * t as f64 + 0.001 * j as f64 + 1e-4 * c as f64 + 0.333333333
        });
        MotionSequence::new(sk, positions, 15.0).unwrap()
    }

    #[test]
    fn load_valid_scene_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.json");
        save_scene(&sample_scene(), &p).unwrap();
        let seq = load_scene(&p).unwrap();
        assert_eq!(seq.positions.shape(), &[2, 30, 4, 3]);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.json");
        let q = dir.path().join("scene2.json");
        save_scene(&sample_scene(), &p).unwrap();
        let loaded = load_scene(&p).unwrap();
        save_scene(&loaded, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn frame_count_mismatch_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.json");
        save_scene(&sample_scene(), &p).unwrap();
        // drop one frame from person 1 only
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["positions"][1].as_array_mut().unwrap().pop();
        fs::write(&p, canonical_json(&v)).unwrap();
        assert!(matches!(load_scene(&p), Err(CoreError::ShapeMismatch(_))));
    }

    #[test]
    fn joint_count_mismatch_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.json");
        save_scene(&sample_scene(), &p).unwrap();
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["positions"][0][0].as_array_mut().unwrap().pop();
        fs::write(&p, canonical_json(&v)).unwrap();
        assert!(matches!(load_scene(&p), Err(CoreError::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.json");
        save_scene(&sample_scene(), &p).unwrap();
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["positions"][0][0][0][0] = Value::String("oops".into());
        fs::write(&p, canonical_json(&v)).unwrap();
        assert!(matches!(load_scene(&p), Err(CoreError::NonFinite(_))));
    }

    #[test]
    fn malformed_json_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.json");
        fs::write(&p, "{ not json").unwrap();
        assert!(matches!(load_scene(&p), Err(CoreError::MalformedFile { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            format_version: 1,
            scenes: vec![
                ManifestEntry { path: "a.json".into(), split: "train".into() },
                ManifestEntry { path: "b.json".into(), split: "test".into() },
            ],
        };
        save_manifest(&m, dir.path()).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.scenes.len(), 2);
        assert_eq!(loaded.scenes[1].split, "test");
    }
}
