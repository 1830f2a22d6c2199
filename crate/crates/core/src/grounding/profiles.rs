use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{l2_normalize, FaceEmbedder};
use crate::imaging::FaceDetector;
use crate::{Error, Result};

/// Reference face of one knowledge-base entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityProfile {
    pub entity_id: String,
    pub display_name: String,
    pub reference_image: PathBuf,
    #[serde(skip)]
    pub reference_embedding: Vec<f32>,
    pub sample_count: usize,
}

impl EntityProfile {
    pub fn embedding_is_unit(&self) -> bool {
        let n: f64 = self
            .reference_embedding
            .iter()
            .map(|x| (*x as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        (n - 1.0).abs() <= 1e-6
    }
}

/// Embeds the largest detected face of the reference image. Fails when the
/// image has no face.
pub fn build_profile(
    entity_id: &str,
    display_name: &str,
    reference_image: &Path,
    image: &RgbImage,
    detector: &dyn FaceDetector,
    embedder: &dyn FaceEmbedder,
) -> Result<EntityProfile> {
    let faces = detector.detect(image)?;
    let largest = faces
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.area().cmp(&b.area()).then(ib.cmp(ia)))
        .map(|(_, f)| *f)
        .ok_or_else(|| Error::ReferenceWithoutFace(entity_id.to_string()))?;
    let raw = embedder.embed(image, &largest)?;
    let reference_embedding = l2_normalize(&raw)
        .ok_or_else(|| Error::InvalidArgument(format!("zero embedding for {entity_id}")))?;
    Ok(EntityProfile {
        entity_id: entity_id.to_string(),
        display_name: display_name.to_string(),
        reference_image: reference_image.to_path_buf(),
        reference_embedding,
        sample_count: 0,
    })
}

/// Directory of profiles laid out as
/// `entities/<entity_id>/{reference.png, embedding.f32, profile.json-lines}`.
#[derive(Debug, Clone)]
pub struct ProfileRepository {
    root: PathBuf,
}

fn safe_component(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_alphanumeric() || matches!(c, '_' | '-' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl ProfileRepository {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ProfileRepository { root: root.into() }
    }

    pub fn entity_dir(&self, entity_id: &str) -> PathBuf {
        self.root.join("entities").join(safe_component(entity_id))
    }

    /// Writes the profile, copying the reference image into the repository.
    pub fn save(&self, profile: &EntityProfile, image: &RgbImage) -> Result<EntityProfile> {
        let dir = self.entity_dir(&profile.entity_id);
        std::fs::create_dir_all(&dir)?;
        let image_path = dir.join("reference.png");
        image.save(&image_path)?;
        let bytes: Vec<u8> = profile
            .reference_embedding
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect();
        std::fs::write(dir.join("embedding.f32"), bytes)?;
        let mut stored = profile.clone();
        stored.reference_image = image_path;
        let mut line = serde_json::to_string(&stored)?;
        line.push('\n');
        std::fs::write(dir.join("profile.json-lines"), line)?;
        Ok(stored)
    }

    pub fn load(&self, entity_id: &str) -> Result<EntityProfile> {
        let dir = self.entity_dir(entity_id);
        let meta = std::fs::read_to_string(dir.join("profile.json-lines"))?;
        let first = meta.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        let mut profile: EntityProfile = serde_json::from_str(first)?;
        let bytes = std::fs::read(dir.join("embedding.f32"))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding.f32 of {entity_id} has {} bytes",
                bytes.len()
            )));
        }
        profile.reference_embedding = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(profile)
    }

    /// Every profile in the repository, sorted by entity id.
    pub fn load_all(&self) -> Result<Vec<EntityProfile>> {
        let dir = self.root.join("entities");
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            if entry.path().join("profile.json-lines").is_file() {
                let meta = std::fs::read_to_string(entry.path().join("profile.json-lines"))?;
                let first = meta.lines().next().unwrap_or("");
                let p: EntityProfile = serde_json::from_str(first)?;
                out.push(self.load(&p.entity_id)?);
            }
        }
        out.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repository_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let repo = ProfileRepository::new(dir.path());
        let profile = EntityProfile {
            entity_id: "Angela_Merkel".into(),
            display_name: "Angela Merkel".into(),
            reference_image: PathBuf::new(),
            reference_embedding: l2_normalize(&[0.5, -1.0, 2.0]).unwrap(),
            sample_count: 3,
        };
        let stored = repo.save(&profile, &RgbImage::new(2, 2)).unwrap();
        let loaded = repo.load("Angela_Merkel").unwrap();
        assert_eq!(loaded, stored);
        assert!(loaded.embedding_is_unit());
        assert_eq!(
            std::fs::read(repo.entity_dir("Angela_Merkel").join("embedding.f32"))
                .unwrap()
                .len(),
            12
        );
        assert_eq!(repo.load_all().unwrap().len(), 1);
    }
}
