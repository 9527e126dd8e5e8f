//! JSON dataset manifests.
//!
//! Paths inside a manifest are relative to the manifest's directory. Loading
//! validates every cross-reference up front, so downstream code can index
//! sentences and feature rows without re-checking.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fvec::{read_fvec, read_fvec_shape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One annotated temporal segment of a video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub start_s: f64,
    pub end_s: f64,
    /// Human description of the segment.
    pub sentence_id: usize,
    /// Object-definition descriptions detected in the segment.
    #[serde(default)]
    pub object_sentence_ids: Vec<usize>,
}

impl SegmentAnnotation {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub fvec_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    #[serde(default)]
    pub segments: Vec<SegmentAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrototypeEntry {
    pub class_name: String,
    pub prototype_sentence_id: usize,
}

/// The on-disk manifest schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub videos: Vec<VideoEntry>,
    pub sentence_table_path: PathBuf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_prototypes: Vec<ClassPrototypeEntry>,
}

/// A manifest whose references have been checked, with resolved paths and
/// per-video durations.
#[derive(Clone, Debug)]
pub struct ValidatedManifest {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    /// Feature rows (seconds) per video, parallel to `manifest.videos`.
    pub durations: Vec<usize>,
    pub feature_dim: usize,
    pub sentence_count: usize,
    pub sentence_dim: usize,
}

impl ValidatedManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn videos(&self) -> &[VideoEntry] {
        &self.manifest.videos
    }
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<ValidatedManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    validate_manifest(manifest, root)
}

/// Cross-checks a parsed manifest against the files it references.
pub fn validate_manifest(manifest: DatasetManifest, root: PathBuf) -> Result<ValidatedManifest> {
    let (sentence_count, sentence_dim) = read_fvec_shape(root.join(&manifest.sentence_table_path))?;
    let check_id = |id: usize| -> Result<()> {
        if id >= sentence_count {
            Err(Error::DanglingSentence {
                id,
                rows: sentence_count,
            })
        } else {
            Ok(())
        }
    };

    let mut seen_videos = HashSet::new();
    let mut durations = Vec::with_capacity(manifest.videos.len());
    let mut feature_dim = None;
    for video in &manifest.videos {
        if !seen_videos.insert(video.video_id.as_str()) {
            return Err(Error::Manifest(format!(
                "duplicate video id {:?}",
                video.video_id
            )));
        }
        let (rows, cols) = read_fvec_shape(root.join(&video.fvec_path))?;
        match feature_dim {
            None => feature_dim = Some(cols),
            Some(d) if d != cols => {
                return Err(Error::Manifest(format!(
                    "video {:?} has {cols}-d features, dataset uses {d}-d",
                    video.video_id
                )))
            }
            _ => {}
        }
        for (k, seg) in video.segments.iter().enumerate() {
            let at = || format!("video {:?} segment {k}", video.video_id);
            if !(seg.start_s.is_finite() && seg.end_s.is_finite()) || seg.start_s < 0.0 {
                return Err(Error::Manifest(format!("{}: invalid bounds", at())));
            }
            if seg.end_s <= seg.start_s {
                return Err(Error::Manifest(format!(
                    "{}: end_s {} must exceed start_s {}",
                    at(),
                    seg.end_s,
                    seg.start_s
                )));
            }
            if seg.end_s > rows as f64 {
                return Err(Error::Manifest(format!(
                    "{}: end_s {} beyond the {rows} s feature stack",
                    at(),
                    seg.end_s
                )));
            }
            check_id(seg.sentence_id)?;
            seg.object_sentence_ids
                .iter()
                .try_for_each(|&id| check_id(id))?;
        }
        durations.push(rows);
    }

    let mut seen_classes = HashSet::new();
    for proto in &manifest.class_prototypes {
        if !seen_classes.insert(proto.class_name.as_str()) {
            return Err(Error::Manifest(format!(
                "duplicate class name {:?}",
                proto.class_name
            )));
        }
        check_id(proto.prototype_sentence_id)?;
    }

    Ok(ValidatedManifest {
        feature_dim: feature_dim.unwrap_or(0),
        manifest,
        root,
        durations,
        sentence_count,
        sentence_dim,
    })
}

/// Feature rows selected by a window `[start_s, end_s)`: `floor(start)` through
/// `ceil(end) - 1`, clamped to the stack and at least one row.
pub fn segment_rows(start_s: f64, end_s: f64, rows: usize) -> (usize, usize) {
    assert!(rows > 0);
    let last = rows - 1;
    let first = (start_s.floor().max(0.0) as usize).min(last);
    let end = (end_s.ceil() as usize).clamp(first + 1, rows);
    (first, end)
}

/// A manifest with every feature stack and the sentence table in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: ValidatedManifest,
    pub features: Vec<Matrix<f32>>,
    pub sentences: Matrix<f32>,
}

impl Dataset {
    pub fn load(manifest: ValidatedManifest) -> Result<Self> {
        let sentences = read_fvec(manifest.resolve(&manifest.manifest.sentence_table_path))?;
        let features = manifest
            .videos()
            .iter()
            .map(|v| read_fvec(manifest.resolve(&v.fvec_path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest,
            features,
            sentences,
        })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::load(load_manifest(path)?)
    }

    pub fn videos(&self) -> &[VideoEntry] {
        self.manifest.videos()
    }

    pub fn video_index(&self, video_id: &str) -> Option<usize> {
        self.videos().iter().position(|v| v.video_id == video_id)
    }

    pub fn sentence(&self, id: usize) -> &[f32] {
        self.sentences.row(id)
    }

    pub fn prototypes(&self) -> &[ClassPrototypeEntry] {
        &self.manifest.manifest.class_prototypes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::write_fvec;

    fn fixture(dir: &Path, segments: &str, protos: &str) -> PathBuf {
        write_fvec(dir.join("sent.fvec"), &Matrix::filled(10, 4, 1.0)).unwrap();
        write_fvec(dir.join("v0.fvec"), &Matrix::filled(8, 6, 0.5)).unwrap();
        let text = format!(
            r#"{{"videos": [{{"video_id": "v0", "fvec_path": "v0.fvec", "class_name": "jump",
                "segments": [{segments}]}}],
               "sentence_table_path": "sent.fvec", "class_prototypes": [{protos}]}}"#
        );
        let path = dir.join("m.json");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(
            dir.path(),
            r#"{"start_s": 0, "end_s": 4.5, "sentence_id": 3, "object_sentence_ids": [1, 2]}"#,
            r#"{"class_name": "jump", "prototype_sentence_id": 9}"#,
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.durations, vec![8]);
        assert_eq!(
            (m.feature_dim, m.sentence_count, m.sentence_dim),
            (6, 10, 4)
        );
        assert_eq!(m.videos()[0].segments[0].object_sentence_ids, vec![1, 2]);
        let ds = Dataset::load(m).unwrap();
        assert_eq!(ds.features[0].shape(), (8, 6));
    }

    #[test]
    fn reference_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(
            dir.path(),
            r#"{"start_s": 0, "end_s": 2, "sentence_id": 99}"#,
            "",
        );
        let err = load_manifest(&p).unwrap_err();
        assert!(
            err.to_string().contains("dangling sentence reference"),
            "{err}"
        );

        let p = fixture(
            dir.path(),
            r#"{"start_s": 5, "end_s": 3, "sentence_id": 1}"#,
            "",
        );
        assert!(matches!(load_manifest(&p), Err(Error::Manifest(_))));

        let p = fixture(
            dir.path(),
            r#"{"start_s": 5, "end_s": 9, "sentence_id": 1}"#,
            "",
        );
        assert!(matches!(load_manifest(&p), Err(Error::Manifest(_))));

        let p = fixture(
            dir.path(),
            "",
            r#"{"class_name": "a", "prototype_sentence_id": 1},
               {"class_name": "a", "prototype_sentence_id": 2}"#,
        );
        assert!(load_manifest(&p)
            .unwrap_err()
            .to_string()
            .contains("duplicate class"));

        std::fs::remove_file(dir.path().join("v0.fvec")).unwrap();
        let p = fixture(dir.path(), "", "");
        std::fs::remove_file(dir.path().join("v0.fvec")).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Io { .. })));
    }

    #[test]
    fn segment_row_mapping() {
        assert_eq!(segment_rows(0.0, 4.5, 8), (0, 5));
        assert_eq!(segment_rows(2.3, 2.4, 8), (2, 3));
        assert_eq!(segment_rows(7.5, 8.0, 8), (7, 8));
        assert_eq!(segment_rows(0.0, 30.0, 8), (0, 8));
        assert_eq!(segment_rows(3.0, 3.0, 8), (3, 4));
    }
}
