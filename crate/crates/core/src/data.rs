//! Synthetic video-pose generation (the backbone stand-in), interchange-file
//! ingestion, and clip sampling / bbox augmentation.
//!
//! Interchange format (JSON-lines), one file per sequence:
//! first line `{"schema": "tempose/1", "d": <dim>, "intrinsics": {...}}`,
//! then one line per frame:
//! `{"frame": i, "objects": [{"class_id", "bbox": [cx,cy,w,h],
//! "pose": {"quat": [w,x,y,z], "t": [x,y,z]}}]}`.
//!
//! Feature files are TNSR chunks, one per frame, shaped [n, d], in a
//! directory keyed by zero-padded frame index.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{
    project_center, transform_points, BoundingBox, CameraIntrinsics, ObjectModel, Pose,
    Quaternion,
};
use crate::model::{FeatureKind, FeatureSeq};
use crate::serialize;
use crate::tensor::Tensor;

pub const SCHEMA: &str = "tempose/1";
pub const MAX_STRIDE: usize = 10;
/// Bbox jitter extends width/height by up to this fraction.
pub const MAX_JITTER: f64 = 0.10;

/// Nominal image size used to normalize bbox coordinates for the synthetic
/// feature embedding.
pub const IMAGE_W: f64 = 640.0;
pub const IMAGE_H: f64 = 480.0;

/// Depth range the synthetic trajectories stay inside, meters.
pub const SYNTH_Z_RANGE: (f64, f64) = (0.5, 3.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class_id: u32,
    pub bbox: BoundingBox,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame: usize,
    pub objects: Vec<ObjectAnnotation>,
}

/// Where a sequence's features came from. Mixing sources in one sequence is
/// rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Synthetic,
    Loaded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    /// Feature dimension the sequence was generated/ingested with.
    pub d: usize,
    pub frames: Vec<FrameAnnotation>,
    /// Per frame: n*d feature values, object-major.
    pub features: Option<Vec<Vec<f64>>>,
    pub feature_source: Option<FeatureSource>,
}

impl VideoSequence {
    pub fn num_objects(&self) -> usize {
        self.frames.first().map_or(0, |f| f.objects.len())
    }

    pub fn set_features(&mut self, source: FeatureSource, features: Vec<Vec<f64>>) -> Result<()> {
        if let Some(existing) = self.feature_source {
            if existing != source {
                return Err(Error::InvalidInput {
                    op: "set_features",
                    msg: format!(
                        "sequence {} already has {existing:?} features; refusing to mix with {source:?}",
                        self.id
                    ),
                });
            }
        }
        if features.len() != self.frames.len() {
            return Err(Error::InvalidInput {
                op: "set_features",
                msg: format!(
                    "got features for {} frames, sequence has {}",
                    features.len(),
                    self.frames.len()
                ),
            });
        }
        self.features = Some(features);
        self.feature_source = Some(source);
        Ok(())
    }
}

/// Synthetic generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Objects per frame.
    pub n_objects: usize,
    /// Feature dimension (>= 4).
    pub feature_dim: usize,
    /// Trajectory keyframes per sequence (>= 2).
    pub keyframes: usize,
    /// Interpolated frames between consecutive keyframes.
    pub frames_per_segment: usize,
    /// Gaussian noise std added to the feature embedding.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 4 {
            return Err(Error::InvalidInput {
                op: "SynthConfig",
                msg: format!("feature_dim must be >= 4, got {}", self.feature_dim),
            });
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidInput {
                op: "SynthConfig",
                msg: "noise_sigma must be >= 0".to_string(),
            });
        }
        if self.n_objects == 0 || self.keyframes < 2 || self.frames_per_segment == 0 {
            return Err(Error::InvalidInput {
                op: "SynthConfig",
                msg: "need n_objects >= 1, keyframes >= 2, frames_per_segment >= 1".to_string(),
            });
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        (self.keyframes - 1) * self.frames_per_segment + 1
    }
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).expect("static intrinsics")
}

/// Deterministic ball-shaped object models (Fibonacci sphere point sets).
/// Odd class ids are flagged symmetric.
pub fn synth_object_models(n: usize) -> Vec<ObjectModel> {
    (0..n)
        .map(|i| {
            let radius = 0.04 + 0.015 * i as f64;
            let m = 64;
            let points: Vec<[f64; 3]> = (0..m)
                .map(|k| {
                    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                    let y = 1.0 - 2.0 * (k as f64 + 0.5) / m as f64;
                    let r = (1.0 - y * y).sqrt();
                    let theta = golden * k as f64;
                    [
                        radius * r * theta.cos(),
                        radius * y,
                        radius * r * theta.sin(),
                    ]
                })
                .collect();
            ObjectModel::new(i as u32 + 1, format!("ball_{:02}", i + 1), points, i % 2 == 1)
                .expect("synthetic model is valid")
        })
        .collect()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> Quaternion {
    loop {
        let q = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if q.norm() > 0.1 {
            return q.normalized().expect("norm checked");
        }
    }
}

fn catmull_rom(p: &[[f64; 3]], seg: usize, u: f64) -> [f64; 3] {
    let at = |i: isize| -> [f64; 3] {
        let i = i.clamp(0, p.len() as isize - 1) as usize;
        p[i]
    };
    let (p0, p1, p2, p3) = (
        at(seg as isize - 1),
        at(seg as isize),
        at(seg as isize + 1),
        at(seg as isize + 2),
    );
    let mut out = [0.0; 3];
    let (u2, u3) = (u * u, u * u * u);
    for k in 0..3 {
        out[k] = 0.5
            * (2.0 * p1[k]
                + (-p0[k] + p2[k]) * u
                + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * u2
                + (-p0[k] + 3.0 * p1[k] - 3.0 * p2[k] + p3[k]) * u3);
    }
    out
}

/// The fixed linear embedding that turns (unit quaternion, scaled
/// translation, normalized bbox) into a d-dimensional feature. Depends only
/// on the seed and dimension, never on the frame.
pub struct FeatureEmbedder {
    // d x 11, row-major
    weights: Vec<f64>,
    d: usize,
}

pub const EMBED_INPUT_DIM: usize = 11;

impl FeatureEmbedder {
    pub fn new(d: usize, seed: u64) -> FeatureEmbedder {
        // distinct stream from trajectory randomness
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed_feed));
        let bound = 1.0 / (EMBED_INPUT_DIM as f64).sqrt();
        let weights = (0..d * EMBED_INPUT_DIM)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        FeatureEmbedder { weights, d }
    }

    pub fn embed(
        &self,
        pose: &Pose,
        bbox: &BoundingBox,
        sigma: f64,
        noise_rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let q = pose.rotation.normalized().expect("valid pose");
        let t = pose.translation;
        let input = [
            q.w,
            q.x,
            q.y,
            q.z,
            t[0] / 0.5,
            t[1] / 0.5,
            t[2] / SYNTH_Z_RANGE.1,
            bbox.c_x / IMAGE_W,
            bbox.c_y / IMAGE_H,
            bbox.width / IMAGE_W,
            bbox.height / IMAGE_H,
        ];
        (0..self.d)
            .map(|r| {
                let mut v = 0.0;
                for (c, x) in input.iter().enumerate() {
                    v += self.weights[r * EMBED_INPUT_DIM + c] * x;
                }
                if sigma > 0.0 {
                    v += sigma * gauss(noise_rng);
                }
                v
            })
            .collect()
    }
}

fn bbox_from_projection(
    pose: &Pose,
    model: &ObjectModel,
    k: &CameraIntrinsics,
) -> Result<BoundingBox> {
    let pts = transform_points(pose, &model.points)?;
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        let px = project_center(p, k)?;
        min_x = min_x.min(px[0]);
        max_x = max_x.max(px[0]);
        min_y = min_y.min(px[1]);
        max_y = max_y.max(px[1]);
    }
    BoundingBox::new(
        0.5 * (min_x + max_x),
        0.5 * (min_y + max_y),
        (max_x - min_x).max(1.0),
        (max_y - min_y).max(1.0),
    )
}

/// Generate one synthetic sequence: smooth slerp/cubic trajectories, bboxes
/// from projected model extents, and seeded features.
pub fn synth_sequence(
    cfg: &SynthConfig,
    models: &[ObjectModel],
    sequence_index: u64,
) -> Result<VideoSequence> {
    cfg.validate()?;
    if models.len() < cfg.n_objects {
        return Err(Error::InvalidInput {
            op: "synth_sequence",
            msg: format!(
                "need {} object models, got {}",
                cfg.n_objects,
                models.len()
            ),
        });
    }
    let k = default_intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(sequence_index.wrapping_mul(0x9e37_79b9)));
    let num_frames = cfg.num_frames();

    // keyframes per object
    let mut rot_keys: Vec<Vec<Quaternion>> = Vec::with_capacity(cfg.n_objects);
    let mut pos_keys: Vec<Vec<[f64; 3]>> = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        rot_keys.push((0..cfg.keyframes).map(|_| random_unit_quat(&mut rng)).collect());
        pos_keys.push(
            (0..cfg.keyframes)
                .map(|_| {
                    [
                        rng.gen_range(-0.25..0.25),
                        rng.gen_range(-0.18..0.18),
                        rng.gen_range(0.8..2.4),
                    ]
                })
                .collect(),
        );
    }

    let embedder = FeatureEmbedder::new(cfg.feature_dim, cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_add(0xba5e)
            .wrapping_add(sequence_index.wrapping_mul(0x517c_c1b7)),
    );

    let mut frames = Vec::with_capacity(num_frames);
    let mut features = Vec::with_capacity(num_frames);
    for f in 0..num_frames {
        let seg = (f / cfg.frames_per_segment).min(cfg.keyframes - 2);
        let u = (f - seg * cfg.frames_per_segment) as f64 / cfg.frames_per_segment as f64;
        let mut objects = Vec::with_capacity(cfg.n_objects);
        let mut frame_features = Vec::with_capacity(cfg.n_objects * cfg.feature_dim);
        for o in 0..cfg.n_objects {
            let rot = rot_keys[o][seg].slerp(&rot_keys[o][seg + 1], u);
            let mut t = catmull_rom(&pos_keys[o], seg, u);
            t[2] = t[2].clamp(SYNTH_Z_RANGE.0, SYNTH_Z_RANGE.1);
            let pose = Pose::new(rot, t);
            let bbox = bbox_from_projection(&pose, &models[o], &k)?;
            frame_features.extend(embedder.embed(&pose, &bbox, cfg.noise_sigma, &mut noise_rng));
            objects.push(ObjectAnnotation {
                class_id: models[o].class_id,
                bbox,
                pose,
            });
        }
        frames.push(FrameAnnotation { frame: f, objects });
        features.push(frame_features);
    }

    let mut seq = VideoSequence {
        id: format!("seq_{sequence_index:03}"),
        intrinsics: k,
        d: cfg.feature_dim,
        frames,
        features: None,
        feature_source: None,
    };
    seq.set_features(FeatureSource::Synthetic, features)?;
    validate_bbox_consistency(&seq, true)?;
    Ok(seq)
}

/// Check the Eq.-1 consistency between bbox centers and projected pose
/// translations. `strict` turns violations into errors; otherwise they only
/// warn (ingested data may be noisy).
pub fn validate_bbox_consistency(seq: &VideoSequence, strict: bool) -> Result<()> {
    for frame in &seq.frames {
        for obj in &frame.objects {
            let c = project_center(&obj.pose.translation, &seq.intrinsics)?;
            let dx = (c[0] - obj.bbox.c_x).abs();
            let dy = (c[1] - obj.bbox.c_y).abs();
            if dx > obj.bbox.width / 2.0 || dy > obj.bbox.height / 2.0 {
                let msg = format!(
                    "sequence {} frame {} class {}: bbox center ({}, {}) inconsistent with projected center ({}, {})",
                    seq.id, frame.frame, obj.class_id, obj.bbox.c_x, obj.bbox.c_y, c[0], c[1]
                );
                if strict {
                    return Err(Error::InvalidInput {
                        op: "validate_bbox_consistency",
                        msg,
                    });
                }
                eprintln!("warning: {msg}");
            }
        }
    }
    Ok(())
}

/// A sampled training clip: source frame indices plus the stride drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frame_indices: Vec<usize>,
    pub stride: usize,
}

/// Draw a clip of `clip_len` frames with stride uniform in 1..=10 and a
/// uniform start over the valid range.
pub fn sample_clip(seq: &VideoSequence, clip_len: usize, rng: &mut ChaCha8Rng) -> Result<Clip> {
    let need = (clip_len - 1) * MAX_STRIDE + 1;
    if seq.frames.len() < need {
        return Err(Error::SequenceTooShort {
            clip_len,
            max_stride: MAX_STRIDE,
            need,
            got: seq.frames.len(),
        });
    }
    let stride = rng.gen_range(1..=MAX_STRIDE);
    let span = (clip_len - 1) * stride;
    let start = rng.gen_range(0..seq.frames.len() - span);
    Ok(Clip {
        frame_indices: (0..clip_len).map(|i| start + i * stride).collect(),
        stride,
    })
}

/// Extend width and height each by an independent uniform factor in
/// [1, 1 + MAX_JITTER]; the center never moves.
pub fn jitter_bbox(b: &BoundingBox, rng: &mut ChaCha8Rng) -> BoundingBox {
    let uw: f64 = rng.gen_range(0.0..=MAX_JITTER);
    let uh: f64 = rng.gen_range(0.0..=MAX_JITTER);
    BoundingBox {
        c_x: b.c_x,
        c_y: b.c_y,
        width: b.width * (1.0 + uw),
        height: b.height * (1.0 + uh),
    }
}

/// Gather one clip's features as a [t, n, d] sequence. The sequence must
/// have features attached (synthetic or loaded).
pub fn clip_features(seq: &VideoSequence, clip: &Clip) -> Result<FeatureSeq> {
    let features = seq.features.as_ref().ok_or_else(|| Error::MissingFeature {
        sequence: seq.id.clone(),
        frame: clip.frame_indices.first().copied().unwrap_or(0),
        object: 0,
    })?;
    let n = seq.num_objects();
    let d = seq.d;
    let t = clip.frame_indices.len();
    let mut data = Vec::with_capacity(t * n * d);
    for &fi in &clip.frame_indices {
        data.extend_from_slice(&features[fi]);
    }
    FeatureSeq::new(FeatureKind::Encoded, Tensor::constant(&[t, n, d], data)?)
}

/// Bbox centers per clip frame per object, optionally jittered.
pub fn clip_centers(
    seq: &VideoSequence,
    clip: &Clip,
    jitter_rng: Option<&mut ChaCha8Rng>,
) -> Vec<Vec<[f64; 2]>> {
    let mut jitter_rng = jitter_rng;
    clip.frame_indices
        .iter()
        .map(|&fi| {
            seq.frames[fi]
                .objects
                .iter()
                .map(|o| {
                    let b = match &mut jitter_rng {
                        Some(rng) => jitter_bbox(&o.bbox, rng),
                        None => o.bbox,
                    };
                    [b.c_x, b.c_y]
                })
                .collect()
        })
        .collect()
}

/// Ground-truth poses per clip frame per object.
pub fn clip_poses(seq: &VideoSequence, clip: &Clip) -> Vec<Vec<(u32, Pose)>> {
    clip.frame_indices
        .iter()
        .map(|&fi| {
            seq.frames[fi]
                .objects
                .iter()
                .map(|o| (o.class_id, o.pose))
                .collect()
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    d: usize,
    intrinsics: CameraIntrinsics,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameLine {
    frame: usize,
    objects: Vec<ObjectLine>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectLine {
    class_id: u32,
    bbox: [f64; 4],
    pose: PoseLine,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseLine {
    quat: [f64; 4],
    t: [f64; 3],
}

/// Serialize one sequence in the interchange format.
pub fn sequence_to_jsonl(seq: &VideoSequence) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let header = Header {
        schema: SCHEMA.to_string(),
        d: seq.d,
        intrinsics: seq.intrinsics,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("serializable")).unwrap();
    for frame in &seq.frames {
        let line = FrameLine {
            frame: frame.frame,
            objects: frame
                .objects
                .iter()
                .map(|o| ObjectLine {
                    class_id: o.class_id,
                    bbox: [o.bbox.c_x, o.bbox.c_y, o.bbox.width, o.bbox.height],
                    pose: PoseLine {
                        quat: [o.pose.rotation.w, o.pose.rotation.x, o.pose.rotation.y, o.pose.rotation.z],
                        t: o.pose.translation,
                    },
                })
                .collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("serializable")).unwrap();
    }
    out
}

/// Parse one interchange file. Frame indices must be strictly increasing.
pub fn sequence_from_jsonl(id: &str, text: &str) -> Result<VideoSequence> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline_no, hline) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header line".to_string(),
    })?;
    let header: Header = serde_json::from_str(hline).map_err(|e| Error::Parse {
        line: hline_no + 1,
        msg: e.to_string(),
    })?;
    if header.schema != SCHEMA {
        return Err(Error::SchemaVersion {
            found: header.schema,
            supported: SCHEMA,
        });
    }
    let mut frames: Vec<FrameAnnotation> = Vec::new();
    for (i, line) in lines {
        let fl: FrameLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Some(last) = frames.last() {
            if fl.frame <= last.frame {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!(
                        "frame indices must be strictly increasing, got {} after {}",
                        fl.frame, last.frame
                    ),
                });
            }
        }
        let objects = fl
            .objects
            .into_iter()
            .map(|o| {
                Ok(ObjectAnnotation {
                    class_id: o.class_id,
                    bbox: BoundingBox::new(o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3])?,
                    pose: Pose::new(
                        Quaternion::new(o.pose.quat[0], o.pose.quat[1], o.pose.quat[2], o.pose.quat[3]),
                        o.pose.t,
                    ),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push(FrameAnnotation {
            frame: fl.frame,
            objects,
        });
    }
    let seq = VideoSequence {
        id: id.to_string(),
        intrinsics: header.intrinsics,
        d: header.d,
        frames,
        features: None,
        feature_source: None,
    };
    validate_bbox_consistency(&seq, false)?;
    Ok(seq)
}

/// Load every `*.jsonl` sequence in a directory (sorted by filename), or a
/// single file.
pub fn load_sequences(path: &Path) -> Result<Vec<VideoSequence>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "jsonl") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    files
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            sequence_from_jsonl(&id, &std::fs::read_to_string(p)?)
        })
        .collect()
}

/// Write sequences (and their features, when present) under `dir`:
/// `<id>.jsonl` plus `features/<id>/<%06d>.tnsr`.
pub fn save_sequences(sequences: &[VideoSequence], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for seq in sequences {
        let file = dir.join(format!("{}.jsonl", seq.id));
        std::fs::write(&file, sequence_to_jsonl(seq))?;
        written.push(file);
        if let Some(features) = &seq.features {
            let fdir = dir.join("features").join(&seq.id);
            std::fs::create_dir_all(&fdir)?;
            let n = seq.num_objects();
            for (frame, data) in seq.frames.iter().zip(features) {
                let path = fdir.join(format!("{:06}.tnsr", frame.frame));
                serialize::write_tnsr_file(&path, &[n, seq.d], data)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Attach precomputed features from `dir/features/<id>/<%06d>.tnsr` to each
/// sequence.
pub fn load_features(sequences: &mut [VideoSequence], dir: &Path) -> Result<()> {
    for seq in sequences.iter_mut() {
        let fdir = dir.join("features").join(&seq.id);
        let n = seq.num_objects();
        let mut features = Vec::with_capacity(seq.frames.len());
        for frame in &seq.frames {
            let path = fdir.join(format!("{:06}.tnsr", frame.frame));
            if !path.exists() {
                return Err(Error::MissingFeature {
                    sequence: seq.id.clone(),
                    frame: frame.frame,
                    object: 0,
                });
            }
            let (shape, data) = serialize::read_tnsr_file(&path)?;
            if shape != [n, seq.d] {
                return Err(Error::ShapeMismatch {
                    op: "load_features",
                    lhs: shape,
                    rhs: vec![n, seq.d],
                });
            }
            features.push(data);
        }
        seq.set_features(FeatureSource::Loaded, features)?;
    }
    Ok(())
}

/// Recompute synthetic features for a sequence from its annotations (the
/// embedding is a pure function of the config seed).
pub fn embed_features(seq: &mut VideoSequence, cfg: &SynthConfig, sequence_index: u64) -> Result<()> {
    cfg.validate()?;
    let embedder = FeatureEmbedder::new(cfg.feature_dim, cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_add(0xba5e)
            .wrapping_add(sequence_index.wrapping_mul(0x517c_c1b7)),
    );
    let features = seq
        .frames
        .iter()
        .map(|frame| {
            let mut row = Vec::with_capacity(frame.objects.len() * cfg.feature_dim);
            for o in &frame.objects {
                row.extend(embedder.embed(&o.pose, &o.bbox, cfg.noise_sigma, &mut noise_rng));
            }
            row
        })
        .collect();
    seq.set_features(FeatureSource::Synthetic, features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_objects: 2,
            feature_dim: 8,
            keyframes: 4,
            frames_per_segment: 20,
            noise_sigma: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let models = synth_object_models(2);
        let a = synth_sequence(&cfg, &models, 0).unwrap();
        let b = synth_sequence(&cfg, &models, 0).unwrap();
        assert_eq!(a, b);
        let c = synth_sequence(&cfg, &models, 1).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn synth_rotation_delta_bounded_by_interpolation() {
        // per-frame geodesic angle along a slerp segment is total/segment
        let models = synth_object_models(1);
        for seed in 0..50u64 {
            let cfg = SynthConfig {
                n_objects: 1,
                seed,
                ..small_cfg()
            };
            let seq = synth_sequence(&cfg, &models, 0).unwrap();
            let bound = std::f64::consts::PI / cfg.frames_per_segment as f64 + 1e-9;
            for w in seq.frames.windows(2) {
                let a = w[0].objects[0].pose.rotation;
                let b = w[1].objects[0].pose.rotation;
                assert!(a.angle_to(&b) <= bound, "seed {seed}: {}", a.angle_to(&b));
            }
        }
    }

    #[test]
    fn synth_bbox_center_matches_projection_for_balls() {
        let cfg = small_cfg();
        let models = synth_object_models(2);
        let seq = synth_sequence(&cfg, &models, 3).unwrap();
        for frame in &seq.frames {
            for o in &frame.objects {
                let c = project_center(&o.pose.translation, &seq.intrinsics).unwrap();
                assert!((c[0] - o.bbox.c_x).abs() <= 1.0);
                assert!((c[1] - o.bbox.c_y).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn synth_depth_stays_in_range() {
        let cfg = small_cfg();
        let models = synth_object_models(2);
        let seq = synth_sequence(&cfg, &models, 5).unwrap();
        for frame in &seq.frames {
            for o in &frame.objects {
                let z = o.pose.translation[2];
                assert!((SYNTH_Z_RANGE.0..=SYNTH_Z_RANGE.1).contains(&z));
            }
        }
    }

    #[test]
    fn sample_clip_stride_semantics() {
        let cfg = SynthConfig {
            keyframes: 5,
            frames_per_segment: 15,
            ..small_cfg()
        };
        let models = synth_object_models(2);
        let seq = synth_sequence(&cfg, &models, 0).unwrap();
        assert!(seq.frames.len() >= 41);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // stride 1 -> contiguous; stride 10 with clip_len 5 spans 40 frames
        for _ in 0..200 {
            let clip = sample_clip(&seq, 5, &mut rng).unwrap();
            assert_eq!(clip.frame_indices.len(), 5);
            for w in clip.frame_indices.windows(2) {
                assert_eq!(w[1] - w[0], clip.stride);
            }
            assert_eq!(
                clip.frame_indices[4] - clip.frame_indices[0],
                4 * clip.stride
            );
        }
    }

    #[test]
    fn sample_clip_stride_frequencies_uniform() {
        let cfg = SynthConfig {
            keyframes: 5,
            frames_per_segment: 15,
            ..small_cfg()
        };
        let models = synth_object_models(2);
        let seq = synth_sequence(&cfg, &models, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; MAX_STRIDE + 1];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_clip(&seq, 5, &mut rng).unwrap().stride] += 1;
        }
        for s in 1..=MAX_STRIDE {
            let freq = counts[s] as f64 / draws as f64;
            assert!((freq - 0.1).abs() <= 0.01, "stride {s}: {freq}");
        }
    }

    #[test]
    fn sample_clip_too_short_names_minimum() {
        let cfg = small_cfg(); // 61 frames
        let models = synth_object_models(2);
        let seq = synth_sequence(&cfg, &models, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_clip(&seq, 10, &mut rng).unwrap_err();
        match err {
            Error::SequenceTooShort { need, got, .. } => {
                assert_eq!(need, 91);
                assert_eq!(got, 61);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn jitter_bbox_bounds_and_mean() {
        let b = BoundingBox::new(100.0, 50.0, 40.0, 20.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sum_scale = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let j = jitter_bbox(&b, &mut rng);
            assert_eq!(j.c_x, b.c_x);
            assert_eq!(j.c_y, b.c_y);
            assert!(j.width >= b.width && j.width <= b.width * 1.1 + 1e-12);
            assert!(j.height >= b.height && j.height <= b.height * 1.1 + 1e-12);
            sum_scale += j.width / b.width;
            sum_scale += j.height / b.height;
        }
        let mean = sum_scale / (2 * draws) as f64;
        assert!((mean - 1.05).abs() <= 0.005, "mean scale {mean}");
    }

    #[test]
    fn interchange_roundtrip() {
        let cfg = small_cfg();
        let models = synth_object_models(2);
        let seq = synth_sequence(&cfg, &models, 0).unwrap();
        let text = sequence_to_jsonl(&seq);
        let parsed = sequence_from_jsonl(&seq.id, &text).unwrap();
        assert_eq!(parsed.frames, seq.frames);
        assert_eq!(parsed.intrinsics, seq.intrinsics);
        assert_eq!(parsed.d, seq.d);
    }

    #[test]
    fn interchange_rejects_out_of_order_and_bad_schema() {
        let good = format!(
            "{}\n{}\n{}\n",
            serde_json::json!({"schema": SCHEMA, "d": 8, "intrinsics": default_intrinsics()}),
            serde_json::json!({"frame": 5, "objects": []}),
            serde_json::json!({"frame": 3, "objects": []}),
        );
        let err = sequence_from_jsonl("x", &good).unwrap_err();
        assert!(err.to_string().contains('3'), "{err}");

        let bad_schema = format!(
            "{}\n",
            serde_json::json!({"schema": "tempose/99", "d": 8, "intrinsics": default_intrinsics()})
        );
        assert!(matches!(
            sequence_from_jsonl("x", &bad_schema),
            Err(Error::SchemaVersion { .. })
        ));
    }

    #[test]
    fn empty_file_is_parse_error_but_empty_dir_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_sequences(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn features_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let models = synth_object_models(2);
        let seq = synth_sequence(&cfg, &models, 0).unwrap();
        save_sequences(std::slice::from_ref(&seq), dir.path()).unwrap();
        let mut loaded = load_sequences(dir.path()).unwrap();
        assert!(loaded[0].features.is_none());
        load_features(&mut loaded, dir.path()).unwrap();
        assert_eq!(loaded[0].features, seq.features);
        // loaded features cannot be mixed with synthetic re-embedding
        assert!(embed_features(&mut loaded[0], &cfg, 0).is_err());
    }

    #[test]
    fn clip_features_shape() {
        let cfg = small_cfg();
        let models = synth_object_models(2);
        let seq = synth_sequence(&cfg, &models, 0).unwrap();
        let clip = Clip {
            frame_indices: vec![0, 2, 4],
            stride: 2,
        };
        let f = clip_features(&seq, &clip).unwrap();
        assert_eq!(f.tensor.shape(), &[3, 2, 8]);
        let centers = clip_centers(&seq, &clip, None);
        assert_eq!(centers.len(), 3);
        assert_eq!(centers[0].len(), 2);
    }
}
