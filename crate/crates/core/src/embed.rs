//! Per-frame appearance embeddings.
//!
//! The model consumes one `D`-vector per frame next to the landmark matrix.
//! Embeddings come either from a precomputed file or from a deterministic
//! projection of the landmarks themselves.
//!
//! Embedding file: newline-delimited JSON, `{"clip": str, "frame": int, "vec": [f64; D]}`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{canonical_face, LandmarkFrame, NUM_LANDMARKS, POINT_FEATURES};
use crate::numkit::DenseMatrix;

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_EMBED_SEED: u64 = 0x11fa7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEmbedding {
    pub clip: String,
    pub frame: u64,
    pub vec: Vec<f64>,
}

/// Embeddings keyed by `(clip, frame)`, all of one dimension.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<(String, u64), Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_records(records: impl IntoIterator<Item = FrameEmbedding>) -> Result<Self> {
        let mut table = EmbeddingTable::default();
        for (i, rec) in records.into_iter().enumerate() {
            table.insert(rec).map_err(|e| match e {
                Error::Format(reason) => Error::LineFormat {
                    line: i + 1,
                    reason,
                },
                other => other,
            })?;
        }
        Ok(table)
    }

    fn insert(&mut self, rec: FrameEmbedding) -> Result<()> {
        if rec.vec.is_empty() {
            return Err(Error::Format("empty embedding vector".into()));
        }
        if self.entries.is_empty() {
            self.dim = rec.vec.len();
        } else if rec.vec.len() != self.dim {
            return Err(Error::Format(format!(
                "embedding dimension {} differs from earlier records ({})",
                rec.vec.len(),
                self.dim
            )));
        }
        let key = (rec.clip, rec.frame);
        if self.entries.contains_key(&key) {
            return Err(Error::Format(format!(
                "duplicate embedding for clip '{}' frame {}",
                key.0, key.1
            )));
        }
        self.entries.insert(key, rec.vec);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, clip: &str, frame: u64) -> Result<&[f64]> {
        self.entries
            .get(&(clip.to_string(), frame))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup {
                clip: clip.to_string(),
                frame,
            })
    }
}

pub fn read_embeddings<R: BufRead>(input: R) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::default();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::LineFormat {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameEmbedding = serde_json::from_str(&line).map_err(|e| Error::LineFormat {
            line: line_no,
            reason: e.to_string(),
        })?;
        if rec.vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::LineFormat {
                line: line_no,
                reason: "non-finite embedding value".into(),
            });
        }
        table.insert(rec).map_err(|e| match e {
            Error::Format(reason) => Error::LineFormat {
                line: line_no,
                reason,
            },
            other => other,
        })?;
    }
    Ok(table)
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file))
}

pub fn write_embeddings<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a FrameEmbedding>,
) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<embedding stream>", e))?;
    }
    Ok(())
}

pub fn save_embedding_file<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a FrameEmbedding>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_embeddings(&mut w, records)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seeded random projection of the landmark matrix squashed through tanh.
///
/// Each frame's points are centred on their centroid and divided by their
/// RMS radius, so the embedding ignores where the face sits and how large
/// it is. The canonical face, normalised the same way, is subtracted and the
/// residual amplified by `SHAPE_GAIN`: the embedding describes expression,
/// not identity. Confidences pass through unchanged.
#[derive(Debug, Clone)]
pub struct SyntheticEmbedder {
    dim: usize,
    seed: u64,
    projection: Vec<f64>,
    template: Vec<[f64; 2]>,
}

const PROJ_GAIN: f64 = 2.0;
const SHAPE_GAIN: f64 = 5.0;

/// Centroid and RMS radius of a point set; the radius is floored so a
/// degenerate frame (all points equal) normalises to the origin.
fn centre_and_radius(points: impl Iterator<Item = [f64; 2]> + Clone) -> ([f64; 2], f64) {
    let n = points.clone().count().max(1) as f64;
    let (sx, sy) = points
        .clone()
        .fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let c = [sx / n, sy / n];
    let r2 = points.fold(0.0, |acc, p| {
        acc + (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)
    });
    (c, (r2 / n).sqrt().max(1e-9))
}

impl SyntheticEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("embedding dimension must be >= 1".into()));
        }
        let inputs = NUM_LANDMARKS * POINT_FEATURES;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = PROJ_GAIN / (inputs as f64).sqrt();
        let projection = (0..dim * inputs)
            .map(|_| {
                scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
            .collect();
        let canon = canonical_face();
        let (c, r) = centre_and_radius(canon.iter().copied());
        let template = canon
            .iter()
            .map(|p| [(p[0] - c[0]) / r, (p[1] - c[1]) / r])
            .collect();
        Ok(Self {
            dim,
            seed,
            projection,
            template,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed(&self, points: &DenseMatrix) -> Vec<f64> {
        let inputs = NUM_LANDMARKS * POINT_FEATURES;
        let (c, r) =
            centre_and_radius((0..points.rows()).map(|i| [points.get(i, 0), points.get(i, 1)]));
        let z: Vec<f64> = points
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let node = i / POINT_FEATURES;
                match i % POINT_FEATURES {
                    0 => SHAPE_GAIN * ((v - c[0]) / r - self.template[node][0]),
                    1 => SHAPE_GAIN * ((v - c[1]) / r - self.template[node][1]),
                    _ => v,
                }
            })
            .collect();
        self.projection
            .chunks_exact(inputs)
            .map(|row| row.iter().zip(&z).map(|(p, x)| p * x).sum::<f64>().tanh())
            .collect()
    }
}

pub fn synthetic_embedding(frame: &LandmarkFrame, dim: usize, seed: u64) -> Result<FrameEmbedding> {
    let e = SyntheticEmbedder::new(dim, seed)?;
    Ok(FrameEmbedding {
        clip: frame.clip_id.clone(),
        frame: frame.frame_index,
        vec: e.embed(&frame.points),
    })
}

#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    File(EmbeddingTable),
    Synthetic(SyntheticEmbedder),
    Constant { dim: usize, value: f64 },
}

impl EmbeddingProvider {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::File(t) => t.dim(),
            EmbeddingProvider::Synthetic(s) => s.dim(),
            EmbeddingProvider::Constant { dim, .. } => *dim,
        }
    }

    pub fn embed(&self, frame: &LandmarkFrame) -> Result<Vec<f64>> {
        match self {
            EmbeddingProvider::File(t) => t
                .get(&frame.clip_id, frame.frame_index)
                .map(<[f64]>::to_vec),
            EmbeddingProvider::Synthetic(s) => Ok(s.embed(&frame.points)),
            EmbeddingProvider::Constant { dim, value } => Ok(vec![*value; *dim]),
        }
    }
}
