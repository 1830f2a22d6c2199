//! Built-in models, all small and deterministically initialized from fixed
//! seeds so every stage runs offline. Each sits behind the same trait a
//! production model would implement; [`registry`] resolves config ids.

pub mod autoencoder;
pub mod dense;
pub mod faces;
pub mod features;
pub mod iqa;
pub mod scorer;
pub mod text;

pub use autoencoder::{image_to_tensor, tensor_to_image, LatentAutoencoder, LinearAutoencoder};
pub use faces::{MarkerFaceDetector, PatchFaceEmbedder};
pub use features::{ImageFeatureExtractor, TinyImageFeatures};
pub use iqa::StructureIqa;
pub use scorer::{AlignmentScorer, TinyAlignmentScorer};
pub use text::{TextEncoder, TinyTextEncoder, Token, Tokenizer, WordTokenizer};

pub mod registry {
    use super::*;
    use crate::corpus::{GazetteerNer, NerBackend, SentenceSimilarity, TrigramSimilarity};
    use crate::diffusion::{DenoiserConfig, TinyDenoiser};
    use crate::grounding::FaceEmbedder;
    use crate::imaging::{FaceDetector, IqaModel};
    use crate::{Error, Result};

    pub const TEXT_ENCODER: &str = "tiny-clip-text-v1";
    pub const BACKBONE: &str = "tiny-unet-v1";
    pub const AUTOENCODER: &str = "linear-ae-v1";
    pub const REWARD: &str = "tiny-imagereward-v1";
    pub const PREFERENCE: &str = "tiny-hps-v1";
    pub const FEATURES: &str = "tiny-clip-vision-v1";
    pub const IQA: &str = "structure-iqa-v1";
    pub const DETECTOR: &str = "marker-face-v1";
    pub const RECOGNIZER: &str = "patch-face-v1";
    pub const NER: &str = "gazetteer-ner-v1";
    pub const SIMILARITY: &str = "trigram-sim-v1";

    fn unknown(kind: &str, id: &str) -> Error {
        Error::ModelUnavailable(format!("no {kind} named {id:?}"))
    }

    pub fn text_encoder(id: &str) -> Result<TinyTextEncoder> {
        match id {
            TEXT_ENCODER => Ok(TinyTextEncoder::new(TEXT_ENCODER, 0x7e47, 32)),
            _ => Err(unknown("text encoder", id)),
        }
    }

    pub fn backbone(id: &str, text_width: usize) -> Result<TinyDenoiser> {
        match id {
            BACKBONE => TinyDenoiser::new(BACKBONE, &DenoiserConfig::standard(text_width), 0xd1ff),
            _ => Err(unknown("backbone", id)),
        }
    }

    pub fn autoencoder(id: &str) -> Result<LinearAutoencoder> {
        match id {
            AUTOENCODER => Ok(LinearAutoencoder::default()),
            _ => Err(unknown("autoencoder", id)),
        }
    }

    pub fn scorer(id: &str) -> Result<TinyAlignmentScorer> {
        match id {
            REWARD => Ok(TinyAlignmentScorer::new(REWARD, 0x1e3a)),
            PREFERENCE => Ok(TinyAlignmentScorer::new(PREFERENCE, 0x4b52)),
            _ => Err(unknown("alignment scorer", id)),
        }
    }

    pub fn features(id: &str) -> Result<TinyImageFeatures> {
        match id {
            FEATURES => Ok(TinyImageFeatures::default()),
            _ => Err(unknown("feature extractor", id)),
        }
    }

    pub fn iqa(id: &str) -> Result<Box<dyn IqaModel>> {
        match id {
            IQA => Ok(Box::new(StructureIqa::default())),
            _ => Err(Error::IqaBackendUnavailable(id.to_string())),
        }
    }

    pub fn detector(id: &str) -> Result<Box<dyn FaceDetector>> {
        match id {
            DETECTOR => Ok(Box::new(MarkerFaceDetector::default())),
            _ => Err(Error::DetectorUnavailable(id.to_string())),
        }
    }

    pub fn recognizer(id: &str) -> Result<Box<dyn FaceEmbedder>> {
        match id {
            RECOGNIZER => Ok(Box::new(PatchFaceEmbedder)),
            _ => Err(Error::RecognizerUnavailable(id.to_string())),
        }
    }

    pub fn ner(id: &str) -> Result<Box<dyn NerBackend>> {
        match id {
            NER => Ok(Box::new(GazetteerNer::news_default())),
            _ => Err(Error::NerBackendUnavailable(id.to_string())),
        }
    }

    pub fn similarity(id: &str) -> Result<Box<dyn SentenceSimilarity>> {
        match id {
            SIMILARITY => Ok(Box::new(TrigramSimilarity)),
            _ => Err(unknown("sentence similarity", id)),
        }
    }
}
