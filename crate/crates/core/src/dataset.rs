//! Multimodal samples on disk and the JSON manifest that indexes them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Keypoints2DSequence, MotionSequence, KEYPOINT_WIDTH, POSE_WIDTH};
use crate::tensor_file::{write_atomic, Modality, TensorFile};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Genre {
    Street,
    HipHop,
    Popping,
    Locking,
    Breaking,
    House,
    Krump,
    Waacking,
    Jazz,
    Ballet,
    Contemporary,
    KPop,
    Latin,
    Folk,
}

impl Genre {
    pub const ALL: [Genre; 14] = [
        Genre::Street,
        Genre::HipHop,
        Genre::Popping,
        Genre::Locking,
        Genre::Breaking,
        Genre::House,
        Genre::Krump,
        Genre::Waacking,
        Genre::Jazz,
        Genre::Ballet,
        Genre::Contemporary,
        Genre::KPop,
        Genre::Latin,
        Genre::Folk,
    ];

    pub fn index(self) -> usize {
        Genre::ALL.iter().position(|&g| g == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Genre::Street => "street",
            Genre::HipHop => "hip_hop",
            Genre::Popping => "popping",
            Genre::Locking => "locking",
            Genre::Breaking => "breaking",
            Genre::House => "house",
            Genre::Krump => "krump",
            Genre::Waacking => "waacking",
            Genre::Jazz => "jazz",
            Genre::Ballet => "ballet",
            Genre::Contemporary => "contemporary",
            Genre::KPop => "k_pop",
            Genre::Latin => "latin",
            Genre::Folk => "folk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePaths {
    pub motion: PathBuf,
    pub keypoints: PathBuf,
    pub audio_features: PathBuf,
    pub text_embedding: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: String,
    pub genre: Genre,
    pub fps: f64,
    pub duration_s: f64,
    pub frames: usize,
    pub split: Split,
    /// Relative paths resolve against the manifest's directory.
    pub paths: SamplePaths,
    /// Music beat positions in frames.
    pub music_beats: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub samples: Vec<ManifestSample>,
    /// Free-form provenance (generator or pipeline config, seed).
    #[serde(default)]
    pub provenance: serde_json::Value,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn empty(root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            samples: Vec::new(),
            provenance: serde_json::Value::Null,
            root: root.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::tensor_file::read_bytes(path)?;
        let mut m: DatasetManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: m.schema_version,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn load_sample(&self, entry: &ManifestSample) -> Result<DanceSample> {
        DanceSample::load(self, entry).map_err(|e| e.in_sample(&entry.id))
    }

    pub fn load_all(&self) -> Result<Vec<DanceSample>> {
        self.samples.iter().map(|s| self.load_sample(s)).collect()
    }

    /// Checks that every referenced file exists and agrees with the declared
    /// frame count, width and frame rate.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            let sample = self.load_sample(s)?;
            sample.check_alignment()?;
            if sample.motion.frames() != s.frames {
                return Err(mismatch(&s.id, "frames", format!("manifest says {}, motion has {}", s.frames, sample.motion.frames())));
            }
            if (s.duration_s - s.frames as f64 / s.fps).abs() > 0.5 / s.fps {
                return Err(mismatch(&s.id, "duration", format!("{} s does not match {} frames at {} fps", s.duration_s, s.frames, s.fps)));
            }
            if let Some(video) = &s.paths.video {
                let p = self.resolve(video);
                if !p.exists() {
                    return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
            }
        }
        Ok(())
    }
}

fn mismatch(sample: &str, axis: &str, detail: String) -> Error {
    Error::ModalityMismatch {
        sample: sample.to_string(),
        axis: axis.to_string(),
        detail,
    }
}

/// Frame-aligned audio descriptors, row-major `frames x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct MusicFeatures {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl MusicFeatures {
    pub fn frames(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        MusicFeatures {
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// One multimodal sample held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DanceSample {
    pub id: String,
    pub genre: Genre,
    pub motion: MotionSequence,
    pub keypoints: Keypoints2DSequence,
    pub music: MusicFeatures,
    pub text: Vec<f32>,
    pub music_beats: Vec<usize>,
}

impl DanceSample {
    pub fn fps(&self) -> f64 {
        self.motion.fps
    }

    pub fn frames(&self) -> usize {
        self.motion.frames()
    }

    pub fn check_alignment(&self) -> Result<()> {
        let t = self.motion.frames();
        if self.keypoints.frames() != t {
            return Err(mismatch(&self.id, "keypoints.frames", format!("{} vs motion {t}", self.keypoints.frames())));
        }
        if self.music.frames() != t {
            return Err(mismatch(&self.id, "music.frames", format!("{} vs motion {t}", self.music.frames())));
        }
        if (self.keypoints.fps - self.motion.fps).abs() > 1e-9 {
            return Err(mismatch(&self.id, "keypoints.fps", format!("{} vs motion {}", self.keypoints.fps, self.motion.fps)));
        }
        if self.text.is_empty() {
            return Err(mismatch(&self.id, "text", "empty text embedding".into()));
        }
        Ok(())
    }

    /// Frames `[start, end)` of every frame-aligned stream; beats are re-based.
    pub fn slice(&self, start: usize, end: usize, id: String) -> Self {
        DanceSample {
            id,
            genre: self.genre,
            motion: self.motion.slice(start, end),
            keypoints: self.keypoints.slice(start, end),
            music: self.music.slice(start, end),
            text: self.text.clone(),
            music_beats: self
                .music_beats
                .iter()
                .filter(|&&b| b >= start && b < end)
                .map(|&b| b - start)
                .collect(),
        }
    }

    pub fn load(manifest: &DatasetManifest, entry: &ManifestSample) -> Result<Self> {
        let motion_file = TensorFile::read_expecting(&manifest.resolve(&entry.paths.motion), Modality::Motion, Some(POSE_WIDTH))?;
        let fps = motion_file.header.fps.unwrap_or(entry.fps);
        if (fps - entry.fps).abs() > 1e-9 {
            return Err(mismatch(&entry.id, "motion.fps", format!("file {fps} vs manifest {}", entry.fps)));
        }
        let motion = MotionSequence::from_rows(&motion_file.data, fps)?;
        let kp_file = TensorFile::read_expecting(&manifest.resolve(&entry.paths.keypoints), Modality::Keypoints, Some(KEYPOINT_WIDTH))?;
        let keypoints = Keypoints2DSequence::from_rows(&kp_file.data, kp_file.header.fps.unwrap_or(fps))?;
        let music_file = TensorFile::read_expecting(&manifest.resolve(&entry.paths.audio_features), Modality::Music, None)?;
        let dim = *music_file.header.shape.last().unwrap_or(&0);
        let text_file = TensorFile::read_expecting(&manifest.resolve(&entry.paths.text_embedding), Modality::Text, None)?;
        if text_file.header.shape.len() != 1 {
            return Err(mismatch(&entry.id, "text", format!("expected one vector, shape {:?}", text_file.header.shape)));
        }
        let sample = DanceSample {
            id: entry.id.clone(),
            genre: entry.genre,
            motion,
            keypoints,
            music: MusicFeatures {
                dim,
                data: music_file.data,
            },
            text: text_file.data,
            music_beats: entry.music_beats.clone(),
        };
        sample.check_alignment()?;
        Ok(sample)
    }

    /// Writes the four modality files under `dir` (named after the id) and
    /// returns the manifest entry pointing at them, relative to `dir`.
    pub fn write(&self, dir: &Path, split: Split) -> Result<ManifestSample> {
        self.check_alignment()?;
        let t = self.frames();
        let fps = self.fps();
        let paths = SamplePaths {
            motion: PathBuf::from(format!("{}.motion.bin", self.id)),
            keypoints: PathBuf::from(format!("{}.kpts.bin", self.id)),
            audio_features: PathBuf::from(format!("{}.music.bin", self.id)),
            text_embedding: PathBuf::from(format!("{}.text.bin", self.id)),
            video: None,
        };
        TensorFile::new(Modality::Motion, vec![t, POSE_WIDTH], Some(fps), self.motion.to_rows())?.write(&dir.join(&paths.motion))?;
        TensorFile::new(Modality::Keypoints, vec![t, KEYPOINT_WIDTH], Some(fps), self.keypoints.to_rows())?
            .write(&dir.join(&paths.keypoints))?;
        TensorFile::new(Modality::Music, vec![t, self.music.dim], Some(fps), self.music.data.clone())?
            .write(&dir.join(&paths.audio_features))?;
        TensorFile::new(Modality::Text, vec![self.text.len()], None, self.text.clone())?.write(&dir.join(&paths.text_embedding))?;
        Ok(ManifestSample {
            id: self.id.clone(),
            genre: self.genre,
            fps,
            duration_s: t as f64 / fps,
            frames: t,
            split,
            paths,
            music_beats: self.music_beats.clone(),
        })
    }
}
