//! On-disk datasets and frame cropping.
//!
//! A dataset directory holds `manifest.json` and one subdirectory per
//! sequence containing `image_NNNN.png` (8-bit RGB) and `depth_NNNN.png`
//! (KITTI 16-bit depth). The manifest schema:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "split": "train",
//!   "sequences": [
//!     { "id": "seq_0000", "frame_count": 2,
//!       "images": ["seq_0000/image_0000.png", "seq_0000/image_0001.png"],
//!       "depths": ["seq_0000/depth_0000.png", "seq_0000/depth_0001.png"] }
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::codec::{read_depth_png, read_rgb_png, write_depth_png, write_rgb_png};
use crate::depth::{DepthSequence, SequenceFrame};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: String,
    pub frame_count: usize,
    pub images: Vec<String>,
    pub depths: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub split: String,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    pub fn new(split: impl Into<String>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            split: split.into(),
            sequences: Vec::new(),
        }
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frame_count).sum()
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Parses and validates a manifest: known schema, consistent counts, and
/// every referenced file present.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{}: unknown manifest schema_version {}",
            path.display(),
            m.schema_version
        )));
    }
    let root = base_dir(path);
    for s in &m.sequences {
        if s.images.len() != s.frame_count || s.depths.len() != s.frame_count {
            return Err(Error::Data(format!(
                "sequence {} declares {} frames but lists {} images and {} depths",
                s.id,
                s.frame_count,
                s.images.len(),
                s.depths.len()
            )));
        }
        for rel in s.images.iter().chain(&s.depths) {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::Data(format!(
                    "sequence {} references missing file {}",
                    s.id,
                    p.display()
                )));
            }
        }
    }
    Ok(m)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Writes sequences under `dir` and returns the manifest written to
/// `dir/manifest.json`.
pub fn write_dataset(sequences: &[DepthSequence], dir: impl AsRef<Path>, split: &str) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let mut manifest = DatasetManifest::new(split);
    for seq in sequences {
        let sub = dir.join(seq.id());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut entry = SequenceEntry {
            id: seq.id().to_string(),
            frame_count: seq.len(),
            images: Vec::with_capacity(seq.len()),
            depths: Vec::with_capacity(seq.len()),
        };
        for (t, f) in seq.frames().iter().enumerate() {
            let image = format!("{}/image_{t:04}.png", seq.id());
            let depth = format!("{}/depth_{t:04}.png", seq.id());
            write_rgb_png(dir.join(&image), &f.image)?;
            write_depth_png(dir.join(&depth), &f.depth)?;
            entry.images.push(image);
            entry.depths.push(depth);
        }
        manifest.sequences.push(entry);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_manifest(&manifest, dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Loads every sequence of a manifest. `path` may name the manifest file or
/// its directory.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DepthSequence>> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(MANIFEST_FILE);
    }
    let manifest = load_manifest(&path)?;
    let root = base_dir(&path);
    manifest
        .sequences
        .iter()
        .map(|s| {
            let frames = s
                .images
                .iter()
                .zip(&s.depths)
                .enumerate()
                .map(|(t, (img, dep))| {
                    SequenceFrame::new(read_rgb_png(root.join(img))?, read_depth_png(root.join(dep))?, t)
                })
                .collect::<Result<Vec<_>>>()?;
            DepthSequence::new(s.id.clone(), frames)
        })
        .collect()
}

/// Top-left corner of a bottom-anchored, horizontally centered window.
pub fn crop_origin(height: usize, width: usize, target_h: usize, target_w: usize) -> Result<(usize, usize)> {
    if target_h > height || target_w > width || target_h == 0 || target_w == 0 {
        return Err(Error::Dimension(format!(
            "cannot crop {height}x{width} to {target_h}x{target_w}"
        )));
    }
    Ok((height - target_h, (width - target_w) / 2))
}

/// Bottom-center crop applied identically to image and depth.
pub fn crop_frame(frame: &SequenceFrame, target_h: usize, target_w: usize) -> Result<SequenceFrame> {
    let (h, w) = frame.shape();
    let (r0, c0) = crop_origin(h, w, target_h, target_w)?;
    SequenceFrame::new(
        frame.image.window(r0, c0, target_h, target_w)?,
        frame.depth.window(r0, c0, target_h, target_w)?,
        frame.timestamp,
    )
}

pub fn crop_sequence(seq: &DepthSequence, target_h: usize, target_w: usize) -> Result<DepthSequence> {
    let frames = seq
        .frames()
        .iter()
        .map(|f| crop_frame(f, target_h, target_w))
        .collect::<Result<Vec<_>>>()?;
    DepthSequence::new(seq.id(), frames)
}
