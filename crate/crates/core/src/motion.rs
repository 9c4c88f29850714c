//! Motion sequences, skeleton topology, and observed/future splitting.

use ndarray::{Array4, s};

use crate::error::{CoreError, Result};

/// Bone connectivity of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    /// Bones as joint-index pairs.
    pub edges: Vec<(usize, usize)>,
}

impl Skeleton {
    pub fn new(joint_names: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let sk = Skeleton { joint_names, edges };
        sk.validate()?;
        Ok(sk)
    }

    /// Chain skeleton 0-1-2-...-(J-1) with generated joint names.
    pub fn chain(j: usize) -> Self {
        let joint_names = (0..j).map(|i| format!("joint{i}")).collect();
        let edges = (1..j).map(|i| (i - 1, i)).collect();
        Skeleton { joint_names, edges }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if j == 0 {
            return Err(CoreError::ShapeMismatch("skeleton has no joints".into()));
        }
        for &(a, b) in &self.edges {
            if a >= j || b >= j {
                return Err(CoreError::ShapeMismatch(format!(
                    "bone ({a},{b}) out of range for {j} joints"
                )));
            }
            if a == b {
                return Err(CoreError::ShapeMismatch(format!("self-loop bone at joint {a}")));
            }
        }
        if !self.is_connected() {
            return Err(CoreError::ShapeMismatch("skeleton graph is not connected".into()));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let j = self.joint_count();
        if j <= 1 {
            return true;
        }
        let mut adj = vec![Vec::new(); j];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; j];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|x| x)
    }

    /// Joint-attention mask: adjacency plus self-loops, symmetric.
    pub fn attention_mask(&self) -> ndarray::Array2<bool> {
        let j = self.joint_count();
        let mut m = ndarray::Array2::from_elem((j, j), false);
        for i in 0..j {
            m[(i, i)] = true;
        }
        for &(a, b) in &self.edges {
            m[(a, b)] = true;
            m[(b, a)] = true;
        }
        m
    }
}

/// One scene: world-space joint positions for N persons over a run of frames.
///
/// Positions are meters, indexed `[person, frame, joint, xyz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub skeleton: Skeleton,
    pub positions: Array4<f64>,
    pub fps: f64,
}

impl MotionSequence {
    pub fn new(skeleton: Skeleton, positions: Array4<f64>, fps: f64) -> Result<Self> {
        let seq = MotionSequence { skeleton, positions, fps };
        seq.validate()?;
        Ok(seq)
    }

    pub fn persons(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.positions.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        let sh = self.positions.shape();
        if sh[0] == 0 || sh[1] == 0 {
            return Err(CoreError::ShapeMismatch("empty person or frame axis".into()));
        }
        if sh[2] != self.skeleton.joint_count() {
            return Err(CoreError::ShapeMismatch(format!(
                "positions have {} joints, skeleton has {}",
                sh[2],
                self.skeleton.joint_count()
            )));
        }
        if sh[3] != 3 {
            return Err(CoreError::ShapeMismatch(format!("last axis must be 3, got {}", sh[3])));
        }
        if !(self.fps > 0.0) {
            return Err(CoreError::ShapeMismatch(format!("fps must be positive, got {}", self.fps)));
        }
        if self.positions.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("positions contain NaN or Inf".into()));
        }
        Ok(())
    }

    /// Sub-sequence over frames `[start, start+len)` as an owned value.
    pub fn frame_range(&self, start: usize, len: usize) -> MotionSequence {
        MotionSequence {
            skeleton: self.skeleton.clone(),
            positions: self.positions.slice(s![.., start..start + len, .., ..]).to_owned(),
            fps: self.fps,
        }
    }
}

/// Observed window plus future window of one scene.
#[derive(Debug, Clone)]
pub struct SceneSplit {
    pub observed: MotionSequence,
    pub future: MotionSequence,
}

/// Split a scene into the first `t` observed frames and the following `p`
/// future frames. Both halves are owned values, so mutating one never
/// changes the other.
pub fn split_scene(seq: &MotionSequence, t: usize, p: usize) -> Result<SceneSplit> {
    if seq.frames() < t + p {
        return Err(CoreError::InsufficientFrames { have: seq.frames(), need: t + p });
    }
    Ok(SceneSplit {
        observed: seq.frame_range(0, t),
        future: seq.frame_range(t, p),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn seq(frames: usize) -> MotionSequence {
        let sk = Skeleton::chain(3);
        let positions = Array4::from_shape_fn((2, frames, 3, 3), |(n, t, j, c)| {
            (n * 1000 + t * 100 + j * 10 + c) as f64
        });
        MotionSequence::new(sk, positions, 15.0).unwrap()
    }

    #[test]
    fn split_windows_paper_settings() {
        // 15 observed + 45 future, and the 16 + 14 variant
        let s = seq(60);
        let sp = split_scene(&s, 15, 45).unwrap();
        assert_eq!(sp.observed.frames(), 15);
        assert_eq!(sp.future.frames(), 45);

        let s = seq(30);
        let sp = split_scene(&s, 16, 14).unwrap();
        assert_eq!(sp.observed.frames(), 16);
        assert_eq!(sp.future.frames(), 14);
    }

    #[test]
    fn split_rejects_insufficient_frames() {
        let s = seq(10);
        let err = split_scene(&s, 8, 5).unwrap_err();
        assert!(matches!(err, CoreError::InsufficientFrames { have: 10, need: 13 }));
    }

    #[test]
    fn split_reconstructs_original() {
        let s = seq(20);
        let sp = split_scene(&s, 12, 8).unwrap();
        for n in 0..2 {
            for t in 0..20 {
                for j in 0..3 {
                    for c in 0..3 {
                        let expect = s.positions[(n, t, j, c)];
                        let got = if t < 12 {
                            sp.observed.positions[(n, t, j, c)]
                        } else {
                            sp.future.positions[(n, t - 12, j, c)]
                        };
                        assert_eq!(expect, got);
                    }
                }
            }
        }
    }

    #[test]
    fn split_halves_are_independent() {
        let s = seq(10);
        let mut sp = split_scene(&s, 6, 4).unwrap();
        let before = sp.future.positions.clone();
        sp.observed.positions.fill(-1.0);
        assert_eq!(sp.future.positions, before);
    }

    #[test]
    fn skeleton_rejects_bad_edges() {
        assert!(Skeleton::new(vec!["a".into(), "b".into()], vec![(0, 2)]).is_err());
        assert!(Skeleton::new(vec!["a".into(), "b".into()], vec![(1, 1)]).is_err());
        // disconnected
        assert!(Skeleton::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1)]
        )
        .is_err());
    }

    #[test]
    fn sequence_rejects_non_finite() {
        let sk = Skeleton::chain(2);
        let mut positions = Array4::zeros((1, 2, 2, 3));
        positions[(0, 0, 0, 0)] = f64::NAN;
        assert!(matches!(
            MotionSequence::new(sk, positions, 15.0),
            Err(CoreError::NonFinite(_))
        ));
    }

    #[test]
    fn attention_mask_has_self_loops_and_bones() {
        let sk = Skeleton::chain(3);
        let m = sk.attention_mask();
        assert!(m[(0, 0)] && m[(1, 1)] && m[(2, 2)]);
        assert!(m[(0, 1)] && m[(1, 0)] && m[(1, 2)]);
        assert!(!m[(0, 2)]);
    }
}
