//! On-disk dataset layout: one `manifest.json` plus one tensor file per clip,
//! with paths relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Domain, LatentTrajectory, PairedDemo, TaskDescription, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::{tensor_from_bytes, tensor_to_bytes};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: usize,
    pub task_id: usize,
    pub description: String,
    pub human_file: String,
    pub robot_file: String,
    pub human_len: usize,
    pub robot_len: usize,
    pub human_sha256: String,
    pub robot_sha256: String,
    /// Generator ground truth, absent for recorded data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub frame_shape: [usize; 3],
    pub pairs: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn save_manifest(set: &[PairedDemo], path: &Path) -> Result<Manifest> {
    let dir = manifest_dir(path);
    let clips_dir = dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;

    let frame_shape = set.first().map(|p| p.human.frame_shape()).unwrap_or([16, 16, 3]);
    let mut pairs = Vec::with_capacity(set.len());
    for p in set {
        p.validate()?;
        for clip in [&p.human, &p.robot] {
            if clip.frame_shape() != frame_shape {
                return Err(Error::dim(format!(
                    "pair {} has frame shape {:?}, manifest uses {frame_shape:?}",
                    p.pair_id(),
                    clip.frame_shape()
                )));
            }
        }
        let write_clip = |clip: &VideoClip| -> Result<(String, String)> {
            let rel = format!("clips/{:06}_{}.tensor", clip.pair_id, clip.domain.as_str());
            let bytes = tensor_to_bytes(&clip.frames);
            write_atomic(&dir.join(&rel), &bytes)?;
            Ok((rel, sha256_hex(&bytes)))
        };
        let (human_file, human_sha256) = write_clip(&p.human)?;
        let (robot_file, robot_sha256) = write_clip(&p.robot)?;
        pairs.push(ManifestEntry {
            pair_id: p.pair_id(),
            task_id: p.task_id(),
            description: p.description.text.clone(),
            human_file,
            robot_file,
            human_len: p.human.len(),
            robot_len: p.robot.len(),
            human_sha256,
            robot_sha256,
            latent: p.latent.clone(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        frame_shape,
        pairs,
    };
    write_atomic(path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Vec<PairedDemo>> {
    let load_err = |entry: &str, reason: String| Error::Load {
        entry: entry.to_string(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| load_err(&path.display().to_string(), e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| load_err(&path.display().to_string(), format!("malformed manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(load_err(
            &path.display().to_string(),
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let dir = manifest_dir(path);
    let [h, w, c] = manifest.frame_shape;

    let read_clip = |entry: &ManifestEntry, domain: Domain| -> Result<VideoClip> {
        let (rel, len, sha) = match domain {
            Domain::Human => (&entry.human_file, entry.human_len, &entry.human_sha256),
            Domain::Robot => (&entry.robot_file, entry.robot_len, &entry.robot_sha256),
        };
        let file = dir.join(rel);
        let name = format!("pair {} {} clip {}", entry.pair_id, domain.as_str(), file.display());
        let bytes = fs::read(&file).map_err(|e| load_err(&name, format!("cannot read {}: {e}", file.display())))?;
        let digest = sha256_hex(&bytes);
        if &digest != sha {
            return Err(load_err(&name, format!("checksum mismatch: manifest {sha}, file {digest}")));
        }
        let (frames, used) = tensor_from_bytes(&bytes).map_err(|e| load_err(&name, e.to_string()))?;
        if used != bytes.len() {
            return Err(load_err(&name, "trailing bytes after tensor".into()));
        }
        if frames.shape() != [len, h, w, c] {
            return Err(load_err(
                &name,
                format!("shape {:?} does not match manifest [{len}, {h}, {w}, {c}]", frames.shape()),
            ));
        }
        VideoClip::new(frames, domain, entry.task_id, entry.pair_id).map_err(|e| load_err(&name, e.to_string()))
    };

    manifest
        .pairs
        .iter()
        .map(|entry| {
            let demo = PairedDemo {
                human: read_clip(entry, Domain::Human)?,
                robot: read_clip(entry, Domain::Robot)?,
                description: TaskDescription {
                    text: entry.description.clone(),
                    task_id: entry.task_id,
                },
                latent: entry.latent.clone(),
            };
            demo.validate().map_err(|e| load_err(&format!("pair {}", entry.pair_id), e.to_string()))?;
            Ok(demo)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_paired_set;
    use crate::tensor::RngState;

    #[test]
    fn empty_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = save_manifest(&[], &path).unwrap();
        assert!(m.pairs.is_empty());
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn generated_set_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let set = generate_paired_set(&RngState::new(7), 2, 2, 0.7).unwrap();
        save_manifest(&set, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.len(), set.len());
        for (a, b) in set.iter().zip(&back) {
            assert_eq!(*a.human.frames.data(), *b.human.frames.data());
            assert_eq!(*a.robot.frames.data(), *b.robot.frames.data());
            assert_eq!(a.description, b.description);
            assert_eq!(a.latent, b.latent);
        }
    }

    #[test]
    fn missing_clip_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let set = generate_paired_set(&RngState::new(7), 2, 1, 0.7).unwrap();
        let m = save_manifest(&set, &path).unwrap();
        let victim = dir.path().join(&m.pairs[1].robot_file);
        fs::remove_file(&victim).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains(&m.pairs[1].robot_file), "{err}");
    }

    #[test]
    fn corrupted_clip_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let set = generate_paired_set(&RngState::new(7), 2, 1, 0.7).unwrap();
        let m = save_manifest(&set, &path).unwrap();
        let victim = dir.path().join(&m.pairs[0].human_file);
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&victim, bytes).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn length_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let set = generate_paired_set(&RngState::new(7), 2, 1, 0.7).unwrap();
        let mut m = save_manifest(&set, &path).unwrap();
        m.pairs[0].human_len += 1;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");
    }
}
