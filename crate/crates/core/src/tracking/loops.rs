//! Loop detection by feature overlap and similarity loop correction.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ba::{global_ba, BaConfig, BaReport};
use super::types::{Keyframe, LoopConstraint, MapPoint};
use super::TrackingError;
use crate::geometry::{umeyama_align, SimilarityTransform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Minimum keyframe id gap between the loop ends.
    pub min_gap: usize,
    /// Minimum fraction of the current keyframe's features also seen by the candidate.
    pub min_overlap: f64,
    /// Estimate a similarity (monocular) rather than a rigid correction.
    pub with_scale: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            min_gap: 50,
            min_overlap: 0.3,
            with_scale: false,
        }
    }
}

fn descriptor_map(kf: &Keyframe, points: &HashMap<usize, &MapPoint>) -> HashMap<u64, usize> {
    let mut out = HashMap::new();
    for pid in &kf.observed_points {
        if let Some(p) = points.get(pid) {
            out.entry(p.descriptor).or_insert(*pid);
        }
    }
    out
}

/// Looks for an older keyframe sharing enough features with `current_id`.
/// The constraint's similarity maps the current side's point positions onto
/// the older side's.
pub fn detect_loop(
    keyframes: &[Keyframe],
    points: &[MapPoint],
    current_id: usize,
    config: &LoopConfig,
) -> Option<LoopConstraint> {
    let by_id: HashMap<usize, &MapPoint> = points.iter().map(|p| (p.id, p)).collect();
    let current = keyframes.iter().find(|k| k.id == current_id)?;
    let cur = descriptor_map(current, &by_id);
    if cur.is_empty() {
        return None;
    }
    let mut best: Option<(f64, &Keyframe)> = None;
    for kf in keyframes {
        if kf.id >= current_id || current_id - kf.id < config.min_gap {
            continue;
        }
        let cand = descriptor_map(kf, &by_id);
        let shared = cur.keys().filter(|d| cand.contains_key(d)).count();
        let overlap = shared as f64 / cur.len() as f64;
        if overlap > config.min_overlap && best.is_none_or(|(o, _)| overlap > o) {
            best = Some((overlap, kf));
        }
    }
    let (_, old) = best?;
    let old_map = descriptor_map(old, &by_id);
    let mut descriptors: Vec<&u64> = cur.keys().filter(|d| old_map.contains_key(d)).collect();
    descriptors.sort();
    let matches: Vec<(usize, usize)> = descriptors
        .into_iter()
        .map(|d| (old_map[d], cur[d]))
        .filter(|(a, b)| a != b)
        .collect();
    if matches.len() < 3 {
        return None;
    }
    let source: Vec<_> = matches.iter().map(|(_, b)| by_id[b].position).collect();
    let target: Vec<_> = matches.iter().map(|(a, _)| by_id[a].position).collect();
    let correction = umeyama_align(&source, &target, config.with_scale).ok()?;
    Some(LoopConstraint {
        a: old.id,
        b: current_id,
        correction,
        matches,
    })
}

fn blend(constraint: &LoopConstraint, id: usize) -> Option<SimilarityTransform> {
    if id <= constraint.a {
        return None;
    }
    let w = ((id - constraint.a) as f64 / (constraint.b - constraint.a) as f64).min(1.0);
    let s = constraint.correction.interpolate(w);
    (s != SimilarityTransform::identity()).then_some(s)
}

/// Moves keyframes after `a` by the constraint's similarity, blended from the
/// identity at `a` to the full correction at `b`, and carries each point with
/// its most recent observer.
pub fn apply_loop_correction(keyframes: &mut [Keyframe], points: &mut [MapPoint], constraint: &LoopConstraint) {
    for kf in keyframes.iter_mut() {
        if let Some(s) = blend(constraint, kf.id) {
            kf.pose = s.transform_camera(&kf.pose);
        }
    }
    for p in points.iter_mut() {
        if let Some(s) = p.last_observer().and_then(|k| blend(constraint, k)) {
            p.position = s.apply(&p.position);
        }
    }
}

/// Merges each matched current-side point into its older twin.
pub fn fuse_loop_points(keyframes: &mut [Keyframe], points: &mut Vec<MapPoint>, constraint: &LoopConstraint) {
    let replace: HashMap<usize, usize> = constraint.matches.iter().map(|&(a, b)| (b, a)).collect();
    let mut moved: HashMap<usize, Vec<super::types::Observation>> = HashMap::new();
    points.retain(|p| match replace.get(&p.id) {
        Some(&a) => {
            moved.entry(a).or_default().extend(p.observations.iter().copied());
            false
        }
        None => true,
    });
    for p in points.iter_mut() {
        if let Some(obs) = moved.remove(&p.id) {
            let seen: HashSet<usize> = p.observations.iter().map(|o| o.keyframe_id).collect();
            p.observations.extend(obs.into_iter().filter(|o| !seen.contains(&o.keyframe_id)));
            p.observations.sort_by_key(|o| o.keyframe_id);
        }
    }
    for kf in keyframes.iter_mut() {
        let mut seen = HashSet::new();
        kf.observed_points = kf
            .observed_points
            .iter()
            .map(|id| *replace.get(id).unwrap_or(id))
            .filter(|id| seen.insert(*id))
            .collect();
    }
}

/// Full loop closure: similarity propagation, point fusion, then global BA.
pub fn correct_loop(
    keyframes: &mut [Keyframe],
    points: &mut Vec<MapPoint>,
    constraint: &LoopConstraint,
    ba: &BaConfig,
) -> Result<BaReport, TrackingError> {
    apply_loop_correction(keyframes, points, constraint);
    fuse_loop_points(keyframes, points, constraint);
    global_ba(keyframes, points, ba)
}
