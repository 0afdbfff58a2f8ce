//! Landmark streams, clip windowing, and the synthetic dataset generator.
//!
//! A landmark stream is newline-delimited JSON with one object per frame:
//!
//! ```text
//! {"clip": "c01", "frame": 0, "detected": true, "label": "yawning", "points": [[x, y, c], ...]}
//! ```
//!
//! `points` must hold exactly 68 `[x, y, confidence]` triples. Unknown keys
//! are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

pub const NUM_LANDMARKS: usize = 68;
pub const POINT_FEATURES: usize = 3;

/// Class names used by the synthetic generator, in label-index order.
pub const THREE_CLASSES: [&str; 3] = ["normal", "talking", "yawning"];
pub const TWO_CLASSES: [&str; 2] = ["normal", "yawning"];

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFrame {
    pub clip_id: String,
    pub frame_index: u64,
    pub detected: bool,
    /// 68x3 rows of `(x, y, confidence)`.
    pub points: DenseMatrix,
    pub label: Option<String>,
}

impl LandmarkFrame {
    pub fn new(
        clip_id: impl Into<String>,
        frame_index: u64,
        detected: bool,
        points: DenseMatrix,
        label: Option<String>,
    ) -> Result<Self> {
        if points.shape() != (NUM_LANDMARKS, POINT_FEATURES) {
            return Err(Error::shape(format!(
                "landmark matrix must be {NUM_LANDMARKS}x{POINT_FEATURES}, got {}x{}",
                points.rows(),
                points.cols()
            )));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            frame_index,
            detected,
            points,
            label,
        })
    }

    /// The matrix every undetected frame carries.
    pub fn fallback_points() -> DenseMatrix {
        DenseMatrix::filled(NUM_LANDMARKS, POINT_FEATURES, 1.0)
    }
}

/// Replace an undetected frame's landmarks with the all-ones matrix.
pub fn apply_missing_face_fallback(mut frame: LandmarkFrame) -> LandmarkFrame {
    if !frame.detected {
        frame.points = LandmarkFrame::fallback_points();
    }
    frame
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    clip: String,
    frame: u64,
    detected: bool,
    label: Option<String>,
    points: Vec<Vec<f64>>,
}

/// Parse a landmark stream. Frames come back sorted by `(clip, frame)`
/// with the missing-face fallback already applied.
pub fn parse_landmark_stream<R: BufRead>(input: R) -> Result<Vec<LandmarkFrame>> {
    let mut frames = parse_landmark_records(input)?;
    frames.sort_by(|a, b| {
        a.clip_id
            .cmp(&b.clip_id)
            .then(a.frame_index.cmp(&b.frame_index))
    });
    Ok(frames)
}

/// As [`parse_landmark_stream`] but keeps the input order.
pub fn parse_landmark_records<R: BufRead>(input: R) -> Result<Vec<LandmarkFrame>> {
    let mut seen: BTreeMap<(String, u64), usize> = BTreeMap::new();
    let mut frames = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::LineFormat {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::LineFormat {
            line: line_no,
            reason,
        };
        let record: FrameRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if record.points.len() != NUM_LANDMARKS {
            return Err(bad(format!(
                "expected {NUM_LANDMARKS} points, found {}",
                record.points.len()
            )));
        }
        let mut data = Vec::with_capacity(NUM_LANDMARKS * POINT_FEATURES);
        for (i, p) in record.points.iter().enumerate() {
            if p.len() != POINT_FEATURES {
                return Err(bad(format!(
                    "point {i} has {} values, expected {POINT_FEATURES}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("point {i} is not finite")));
            }
            data.extend_from_slice(p);
        }
        let key = (record.clip.clone(), record.frame);
        if let Some(first) = seen.insert(key, line_no) {
            return Err(bad(format!(
                "duplicate clip '{}' frame {} (first seen on line {first})",
                record.clip, record.frame
            )));
        }
        let points = DenseMatrix::new(NUM_LANDMARKS, POINT_FEATURES, data)?;
        let frame = LandmarkFrame::new(
            record.clip,
            record.frame,
            record.detected,
            points,
            record.label,
        )?;
        frames.push(apply_missing_face_fallback(frame));
    }
    Ok(frames)
}

pub fn write_landmark_stream<'a, W, I>(mut out: W, frames: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a LandmarkFrame>,
{
    for f in frames {
        let record = FrameRecord {
            clip: f.clip_id.clone(),
            frame: f.frame_index,
            detected: f.detected,
            label: f.label.clone(),
            points: (0..NUM_LANDMARKS)
                .map(|r| f.points.row(r).to_vec())
                .collect(),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<landmark stream>", e))?;
    }
    Ok(())
}

/// Group sorted frames by clip, preserving order.
pub fn group_by_clip(frames: &[LandmarkFrame]) -> Vec<&[LandmarkFrame]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=frames.len() {
        if i == frames.len() || frames[i].clip_id != frames[start].clip_id {
            if i > start {
                out.push(&frames[start..i]);
            }
            start = i;
        }
    }
    out
}

/// Indices chosen by uniform temporal subsampling of a clip of length `len`.
/// Clips shorter than `count` are padded by repeating the last index.
pub fn key_frame_indices(len: usize, count: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Input(
            "cannot select key frames from an empty clip".into(),
        ));
    }
    if count == 0 {
        return Err(Error::Input("key-frame count must be >= 1".into()));
    }
    if len < count {
        return Ok((0..count).map(|i| i.min(len - 1)).collect());
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    // round(i * (len - 1) / (count - 1)), half rounds up, in exact integers
    let span = len - 1;
    let den = count - 1;
    Ok((0..count)
        .map(|i| (2 * i * span + den) / (2 * den))
        .collect())
}

pub fn select_key_frames(frames: &[LandmarkFrame], count: usize) -> Result<Vec<LandmarkFrame>> {
    Ok(key_frame_indices(frames.len(), count)?
        .into_iter()
        .map(|i| frames[i].clone())
        .collect())
}

/// A fixed-length window of one clip, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub clip_id: String,
    pub frames: Vec<LandmarkFrame>,
    pub embeddings: Vec<Vec<f64>>,
    pub label: usize,
}

impl ClipSample {
    pub fn new(
        clip_id: impl Into<String>,
        frames: Vec<LandmarkFrame>,
        embeddings: Vec<Vec<f64>>,
        label: usize,
    ) -> Result<Self> {
        let clip_id = clip_id.into();
        if frames.is_empty() {
            return Err(Error::Input(format!("clip '{clip_id}' has no frames")));
        }
        if frames.len() != embeddings.len() {
            return Err(Error::shape(format!(
                "clip '{clip_id}': {} frames but {} embeddings",
                frames.len(),
                embeddings.len()
            )));
        }
        let dim = embeddings[0].len();
        if embeddings.iter().any(|e| e.len() != dim) {
            return Err(Error::shape(format!("clip '{clip_id}': ragged embeddings")));
        }
        for pair in frames.windows(2) {
            // padded tails repeat the last frame, so equal indices are allowed
            if pair[1].frame_index < pair[0].frame_index {
                return Err(Error::Input(format!(
                    "clip '{clip_id}': frame indices out of order"
                )));
            }
        }
        if let Some(f) = frames.iter().find(|f| f.clip_id != clip_id) {
            return Err(Error::Input(format!(
                "clip '{clip_id}' contains a frame from clip '{}'",
                f.clip_id
            )));
        }
        Ok(Self {
            clip_id,
            frames,
            embeddings,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ClipSample>,
    pub validation: Vec<ClipSample>,
    pub test: Vec<ClipSample>,
    pub class_names: Vec<String>,
}

/// Split sizes for `total` clips: 70% train and 15% validation, floored,
/// with the remainder going to test.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let train = total * 70 / 100;
    let validation = total * 15 / 100;
    (train, validation, total - train - validation)
}

/// Order clip ids so that contiguous chunks are roughly class-balanced:
/// shuffle within each class, then deal round-robin across classes.
pub fn interleave_by_class(mut per_class: Vec<Vec<String>>, rng: &mut impl Rng) -> Vec<String> {
    for ids in per_class.iter_mut() {
        ids.sort();
        ids.shuffle(rng);
    }
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..longest {
        for ids in &per_class {
            if let Some(id) = ids.get(i) {
                out.push(id.clone());
            }
        }
    }
    out
}

/// Assignment of clip ids to splits.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn from_ordered(ids: Vec<String>) -> Self {
        let (tr, va, _) = split_sizes(ids.len());
        let mut it = ids.into_iter();
        let train = it.by_ref().take(tr).collect();
        let validation = it.by_ref().take(va).collect();
        let test = it.collect();
        Self {
            train,
            validation,
            test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .all(|id| seen.insert(id))
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// A full-length synthetic clip before key-frame selection.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip_id: String,
    pub label: usize,
    pub frames: Vec<LandmarkFrame>,
}

/// Raw synthetic clips plus their split assignment.
#[derive(Debug, Clone)]
pub struct SynthStreams {
    pub clips: Vec<SynthClip>,
    pub class_names: Vec<String>,
    pub split: SplitAssignment,
}

impl SynthStreams {
    pub fn frames(&self) -> impl Iterator<Item = &LandmarkFrame> {
        self.clips.iter().flat_map(|c| c.frames.iter())
    }
}

const FRAME_W: f64 = 640.0;
const FRAME_H: f64 = 480.0;
const MIN_CLIP_LEN: usize = 36;
const MAX_CLIP_LEN: usize = 44;
const MISS_RATE: f64 = 0.03;

/// Mouth landmark ranges in the 68-point layout.
pub const MOUTH: std::ops::Range<usize> = 48..68;
const UPPER_OUTER_LIP: usize = 51;
const LOWER_OUTER_LIP: usize = 57;

/// A neutral frontal face in pixels, centred on the origin, y pointing down.
pub fn canonical_face() -> Vec<[f64; 2]> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    // jaw 0..17
    for i in 0..17 {
        let a = PI * i as f64 / 16.0;
        pts.push([-80.0 * a.cos(), 10.0 + 90.0 * a.sin()]);
    }
    // brows 17..27
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let u = i as f64 / 4.0;
            let x = if side < 0.0 {
                -60.0 + 40.0 * u
            } else {
                20.0 + 40.0 * u
            };
            pts.push([x, -45.0 - 6.0 * (PI * u).sin()]);
        }
    }
    // nose bridge 27..31, nostrils 31..36
    for i in 0..4 {
        pts.push([0.0, -30.0 + 13.0 * i as f64]);
    }
    for i in 0..5 {
        let x = -16.0 + 8.0 * i as f64;
        pts.push([x, 20.0 + 4.0 * (1.0 - (x / 16.0).abs())]);
    }
    // eyes 36..48
    for cx in [-35.0, 35.0] {
        for i in 0..6 {
            let a = PI * i as f64 / 3.0;
            pts.push([cx - 12.0 * a.cos(), -25.0 - 5.0 * a.sin()]);
        }
    }
    // outer lip 48..60
    for i in 0..12 {
        let a = PI * i as f64 / 6.0;
        pts.push([-28.0 * a.cos(), 50.0 - 10.0 * a.sin()]);
    }
    // inner lip 60..68
    for i in 0..8 {
        let a = PI * i as f64 / 4.0;
        pts.push([-18.0 * a.cos(), 50.0 - 4.0 * a.sin()]);
    }
    debug_assert_eq!(pts.len(), NUM_LANDMARKS);
    pts
}

/// Vertical distance between the outer-lip midpoints.
pub fn mouth_spread(points: &DenseMatrix) -> f64 {
    points.get(LOWER_OUTER_LIP, 1) - points.get(UPPER_OUTER_LIP, 1)
}

fn class_kind(class_names: &[String], label: usize) -> &str {
    class_names[label].as_str()
}

/// Render one frame of a face whose mouth is opened by `open` pixels.
fn render_face(
    template: &[[f64; 2]],
    center: [f64; 2],
    scale: f64,
    open: f64,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mouth_cy = 50.0;
    let mut data = Vec::with_capacity(NUM_LANDMARKS * POINT_FEATURES);
    for (i, p) in template.iter().enumerate() {
        let [mut x, mut y] = *p;
        if MOUTH.contains(&i) {
            if y < mouth_cy {
                y -= 0.35 * open;
            } else if y > mouth_cy {
                y += 0.65 * open;
            }
            x *= 1.0 - 0.002 * open;
        } else if i < 17 && y > 40.0 {
            // lower jaw follows the mouth
            y += 0.5 * open * ((y - 40.0) / 60.0).min(1.0);
        }
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        data.push(center[0] + scale * x + jitter * nx);
        data.push(center[1] + scale * y + jitter * ny);
        data.push(rng.random_range(0.85..1.0));
    }
    data
}

/// Deterministic synthetic clips with class-specific mouth and head motion.
///
/// * normal: small jitter around a still face
/// * yawning: one slow, wide mouth opening across the clip
/// * talking: fast, narrow mouth oscillation plus horizontal head drift
pub fn synth_streams(seed: u64, clips_per_class: usize, classes: usize) -> Result<SynthStreams> {
    let class_names: Vec<String> = match classes {
        2 => TWO_CLASSES.iter().map(|s| s.to_string()).collect(),
        3 => THREE_CLASSES.iter().map(|s| s.to_string()).collect(),
        m => {
            return Err(Error::Input(format!(
                "synthetic data supports 2 or 3 classes, got {m}"
            )))
        }
    };
    if clips_per_class < 3 {
        return Err(Error::Input(format!(
            "need at least 3 clips per class, got {clips_per_class}"
        )));
    }
    let template = canonical_face();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(classes * clips_per_class);
    let mut per_class_ids = vec![Vec::new(); classes];
    for label in 0..classes {
        for k in 0..clips_per_class {
            let clip_id = format!("{}-{:03}", class_names[label], k);
            let len = rng.random_range(MIN_CLIP_LEN..=MAX_CLIP_LEN);
            let center0 = [
                FRAME_W / 2.0 + rng.random_range(-30.0..30.0),
                FRAME_H / 2.0 + rng.random_range(-20.0..20.0),
            ];
            let scale = rng.random_range(0.9..1.1);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let kind = class_kind(&class_names, label).to_string();
            let (amp, period, drift) = match kind.as_str() {
                "yawning" => (
                    rng.random_range(40.0..55.0),
                    len as f64 * rng.random_range(0.9..1.1),
                    0.0,
                ),
                "talking" => {
                    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (
                        rng.random_range(8.0..14.0),
                        rng.random_range(3.0..5.0),
                        dir * rng.random_range(1.0..1.6),
                    )
                }
                _ => (0.0, 1.0, 0.0),
            };
            let mut frames = Vec::with_capacity(len);
            for t in 0..len {
                let tf = t as f64;
                let open = match kind.as_str() {
                    // starts closed, peaks mid-clip
                    "yawning" => amp * 0.5 * (1.0 - (std::f64::consts::TAU * tf / period).cos()),
                    "talking" => {
                        amp * 0.5 * (1.0 + (std::f64::consts::TAU * tf / period + phase).sin())
                    }
                    _ => rng.random_range(0.0..1.5),
                };
                let center = [center0[0] + drift * tf, center0[1]];
                let points = render_face(&template, center, scale, open, 1.0, &mut rng);
                let detected = !rng.random_bool(MISS_RATE);
                let frame = LandmarkFrame::new(
                    clip_id.clone(),
                    t as u64,
                    detected,
                    DenseMatrix::new(NUM_LANDMARKS, POINT_FEATURES, points)?,
                    Some(class_names[label].clone()),
                )?;
                frames.push(apply_missing_face_fallback(frame));
            }
            per_class_ids[label].push(clip_id.clone());
            clips.push(SynthClip {
                clip_id,
                label,
                frames,
            });
        }
    }
    let split = SplitAssignment::from_ordered(interleave_by_class(per_class_ids, &mut rng));
    Ok(SynthStreams {
        clips,
        class_names,
        split,
    })
}

/// Turn raw clips into fixed-length samples with embeddings from `embed`.
pub fn build_samples<F>(
    clips: &[(String, usize, &[LandmarkFrame])],
    frames_per_sample: usize,
    mut embed: F,
) -> Result<Vec<ClipSample>>
where
    F: FnMut(&LandmarkFrame) -> Result<Vec<f64>>,
{
    clips
        .iter()
        .map(|(id, label, frames)| {
            let picked = select_key_frames(frames, frames_per_sample)?;
            let embeddings = picked.iter().map(&mut embed).collect::<Result<Vec<_>>>()?;
            ClipSample::new(id.clone(), picked, embeddings, *label)
        })
        .collect()
}

/// Assemble a split from labelled clips and an id assignment.
pub fn assemble_split<F>(
    clips: &[(String, usize, &[LandmarkFrame])],
    assignment: &SplitAssignment,
    class_names: Vec<String>,
    frames_per_sample: usize,
    mut embed: F,
) -> Result<DatasetSplit>
where
    F: FnMut(&LandmarkFrame) -> Result<Vec<f64>>,
{
    if !assignment.is_disjoint() {
        return Err(Error::Input("split assignment lists a clip twice".into()));
    }
    let by_id: BTreeMap<&str, &(String, usize, &[LandmarkFrame])> =
        clips.iter().map(|c| (c.0.as_str(), c)).collect();
    let mut pick = |ids: &[String]| -> Result<Vec<ClipSample>> {
        let chosen = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|c| (*c).clone())
                    .ok_or_else(|| Error::Input(format!("split names unknown clip '{id}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        build_samples(&chosen, frames_per_sample, &mut embed)
    };
    Ok(DatasetSplit {
        train: pick(&assignment.train)?,
        validation: pick(&assignment.validation)?,
        test: pick(&assignment.test)?,
        class_names,
    })
}

/// Synthetic dataset with embeddings from the seeded projection provider.
pub fn synth_dataset(
    seed: u64,
    clips_per_class: usize,
    classes: usize,
    frames_per_sample: usize,
    embed_dim: usize,
) -> Result<DatasetSplit> {
    let streams = synth_streams(seed, clips_per_class, classes)?;
    let projector =
        crate::embed::SyntheticEmbedder::new(embed_dim, crate::embed::DEFAULT_EMBED_SEED)?;
    let clips: Vec<(String, usize, &[LandmarkFrame])> = streams
        .clips
        .iter()
        .map(|c| (c.clip_id.clone(), c.label, c.frames.as_slice()))
        .collect();
    assemble_split(
        &clips,
        &streams.split,
        streams.class_names.clone(),
        frames_per_sample,
        |f| Ok(projector.embed(&f.points)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_json(clip: &str, frame: u64, detected: bool, n_points: usize) -> String {
        let pts: Vec<String> = (0..n_points)
            .map(|i| format!("[{}.5, {}, 0.9]", i, 2 * i))
            .collect();
        format!(
            r#"{{"clip": "{clip}", "frame": {frame}, "detected": {detected}, "label": "normal", "points": [{}]}}"#,
            pts.join(",")
        )
    }

    #[test]
    fn parses_well_formed_record() {
        let text = frame_json("a", 0, true, 68);
        let frames = parse_landmark_stream(text.as_bytes()).unwrap();
        assert_eq!(frames.len(), 1);
        assert!(frames[0].detected);
        assert_eq!(frames[0].points.get(3, 0), 3.5);
        assert_eq!(frames[0].label.as_deref(), Some("normal"));
    }

    #[test]
    fn short_point_list_names_the_line() {
        let text = format!(
            "{}\n{}\n",
            frame_json("a", 0, true, 68),
            frame_json("a", 1, true, 67)
        );
        match parse_landmark_stream(text.as_bytes()) {
            Err(Error::LineFormat { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("67"), "{reason}");
            }
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_numeric_duplicates_and_unknown_fields() {
        let bad_num = frame_json("a", 0, true, 68).replacen("0.5", "\"x\"", 1);
        assert!(matches!(
            parse_landmark_stream(bad_num.as_bytes()),
            Err(Error::LineFormat { line: 1, .. })
        ));

        let dup = format!(
            "{}\n{}\n",
            frame_json("a", 3, true, 68),
            frame_json("a", 3, true, 68)
        );
        assert!(matches!(
            parse_landmark_stream(dup.as_bytes()),
            Err(Error::LineFormat { line: 2, .. })
        ));

        let extra = frame_json("a", 0, true, 68).replacen('{', r#"{"extra": 1, "#, 1);
        assert!(parse_landmark_stream(extra.as_bytes()).is_err());
    }

    #[test]
    fn undetected_frames_become_all_ones() {
        let text = frame_json("a", 0, false, 68);
        let frames = parse_landmark_stream(text.as_bytes()).unwrap();
        assert!(frames[0].points.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fallback_rules() {
        let pts = DenseMatrix::new(68, 3, (0..204).map(|i| i as f64 * 0.37).collect()).unwrap();
        let detected = LandmarkFrame::new("c", 0, true, pts.clone(), None).unwrap();
        let kept = apply_missing_face_fallback(detected.clone());
        assert_eq!(kept, detected);
        for (a, b) in kept.points.data().iter().zip(pts.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let missing = LandmarkFrame::new("c", 0, false, pts, None).unwrap();
        let once = apply_missing_face_fallback(missing);
        assert!(once.points.data().iter().all(|&v| v == 1.0));
        assert_eq!(apply_missing_face_fallback(once.clone()), once);
    }

    #[test]
    fn stream_orders_by_clip_then_frame() {
        let streams = synth_streams(3, 3, 3).unwrap();
        let mut subset: Vec<LandmarkFrame> = streams
            .clips
            .iter()
            .filter(|c| c.frames.len() >= 40)
            .take(3)
            .flat_map(|c| c.frames[..40].to_vec())
            .collect();
        subset.reverse();
        let mut buf = Vec::new();
        write_landmark_stream(&mut buf, &subset).unwrap();
        let parsed = parse_landmark_stream(buf.as_slice()).unwrap();
        assert_eq!(parsed.len(), 120);
        for pair in parsed.windows(2) {
            let a = (&pair[0].clip_id, pair[0].frame_index);
            let b = (&pair[1].clip_id, pair[1].frame_index);
            assert!(a < b);
        }
        assert_eq!(group_by_clip(&parsed).len(), 3);
    }

    #[test]
    fn key_frame_selection() {
        assert_eq!(
            key_frame_indices(16, 16).unwrap(),
            (0..16).collect::<Vec<_>>()
        );
        assert_eq!(
            key_frame_indices(31, 16).unwrap(),
            (0..16).map(|i| 2 * i).collect::<Vec<_>>()
        );
        let mut want: Vec<usize> = (0..5).collect();
        want.extend(std::iter::repeat_n(4, 11));
        assert_eq!(key_frame_indices(5, 16).unwrap(), want);
        assert_eq!(key_frame_indices(7, 1).unwrap(), vec![0]);
        assert!(key_frame_indices(0, 16).is_err());
        assert!(select_key_frames(&[], 4).is_err());
    }

    #[test]
    fn key_frames_match_rounding_formula() {
        for len in 1..60usize {
            for count in 2..20usize {
                let got = key_frame_indices(len, count).unwrap();
                assert_eq!(got.len(), count);
                if len >= count {
                    for (i, &g) in got.iter().enumerate() {
                        let exact = i as f64 * (len - 1) as f64 / (count - 1) as f64;
                        assert_eq!(g, exact.round() as usize, "len={len} count={count} i={i}");
                    }
                }
            }
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(30), (21, 4, 5));
        assert_eq!(split_sizes(90), (63, 13, 14));
        let ds = synth_dataset(1, 10, 3, 16, 8).unwrap();
        assert_eq!(
            (ds.train.len(), ds.validation.len(), ds.test.len()),
            (21, 4, 5)
        );
        let mut ids: Vec<&str> = ds
            .train
            .iter()
            .chain(&ds.validation)
            .chain(&ds.test)
            .map(|c| c.clip_id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 30);
        assert!(ds.train.iter().all(|c| c.len() == 16 && c.embed_dim() == 8));
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(42, 4, 3, 16, 8).unwrap();
        let b = synth_dataset(42, 4, 3, 16, 8).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(43, 4, 3, 16, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_rejects_bad_arguments() {
        assert!(synth_streams(0, 2, 3).is_err());
        assert!(synth_streams(0, 5, 4).is_err());
        assert_eq!(
            synth_streams(0, 3, 2).unwrap().class_names,
            vec!["normal", "yawning"]
        );
    }

    #[test]
    fn yawning_mouth_spread_varies_more_than_normal() {
        let streams = synth_streams(7, 10, 3).unwrap();
        let mean_var = |label: usize| {
            let vars: Vec<f64> = streams
                .clips
                .iter()
                .filter(|c| c.label == label)
                .map(|c| {
                    let s: Vec<f64> = c
                        .frames
                        .iter()
                        .filter(|f| f.detected)
                        .map(|f| mouth_spread(&f.points))
                        .collect();
                    let m = s.iter().sum::<f64>() / s.len() as f64;
                    s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64
                })
                .collect();
            vars.iter().sum::<f64>() / vars.len() as f64
        };
        let normal = mean_var(0);
        let yawning = mean_var(2);
        assert!(
            yawning > 10.0 * normal,
            "yawning {yawning} vs normal {normal}"
        );
    }

    #[test]
    fn canonical_face_has_68_points() {
        let face = canonical_face();
        assert_eq!(face.len(), NUM_LANDMARKS);
        // mouth closed: lower lip below upper lip
        let pts =
            DenseMatrix::new(68, 3, face.iter().flat_map(|p| [p[0], p[1], 1.0]).collect()).unwrap();
        assert!(mouth_spread(&pts) > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn stream_round_trips(seed in any::<u64>()) {
                let streams = synth_streams(seed, 3, 2).unwrap();
                let frames: Vec<LandmarkFrame> = streams.frames().cloned().collect();
                let mut buf = Vec::new();
                write_landmark_stream(&mut buf, &frames).unwrap();
                let parsed = parse_landmark_stream(buf.as_slice()).unwrap();
                let mut sorted = frames.clone();
                sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id).then(a.frame_index.cmp(&b.frame_index)));
                prop_assert_eq!(parsed, sorted);
            }

            #[test]
            fn samples_have_exact_length(len in 1usize..50, count in 1usize..24) {
                let idx = key_frame_indices(len, count).unwrap();
                prop_assert_eq!(idx.len(), count);
                prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(idx.iter().all(|&i| i < len));
            }
        }
    }
}
