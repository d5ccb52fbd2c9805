//! Versioned JSON checkpoints for [`Tagger`] models.
//!
//! Floats are written in shortest round-trip form and parsed back exactly, so
//! a reloaded model reproduces the saved one's outputs bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::{Encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::task::TaskSpec;
use crate::tensor::Matrix;
use crate::train::Tagger;

pub const FORMAT: &str = "locattn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize)]
struct Out<'a, T> {
    format: &'static str,
    version: u32,
    config: &'a ModelConfig,
    task: Option<&'a TaskSpec>,
    embed: &'a Matrix<T>,
    encoder: &'a EncoderParams<Matrix<T>>,
    out_w: &'a Matrix<T>,
    out_b: &'a Matrix<T>,
}

#[derive(Deserialize)]
struct In<T> {
    format: String,
    version: u32,
    config: ModelConfig,
    task: Option<TaskSpec>,
    embed: Matrix<T>,
    encoder: EncoderParams<Matrix<T>>,
    out_w: Matrix<T>,
    out_b: Matrix<T>,
}

/// A loaded model plus the task it was trained on, if recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub tagger: Tagger<T>,
    pub task: Option<TaskSpec>,
}

pub fn to_json<T: Scalar + Serialize>(tagger: &Tagger<T>, task: Option<&TaskSpec>) -> Result<String> {
    let out = Out {
        format: FORMAT,
        version: VERSION,
        config: tagger.config(),
        task,
        embed: &tagger.embed,
        encoder: &tagger.encoder.params,
        out_w: &tagger.out_w,
        out_b: &tagger.out_b,
    };
    Ok(serde_json::to_string(&out)?)
}

pub fn from_json<T: Scalar + DeserializeOwned>(text: &str) -> Result<Checkpoint<T>> {
    let raw: In<T> = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if raw.format != FORMAT {
        return Err(Error::Checkpoint(format!("format `{}`, expected `{FORMAT}`", raw.format)));
    }
    if raw.version != VERSION {
        return Err(Error::Checkpoint(format!("version {}, this build reads version {VERSION}", raw.version)));
    }
    raw.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let encoder = Encoder::new(raw.config, raw.encoder)?;
    let tagger = Tagger::from_parts(encoder, raw.embed, raw.out_w, raw.out_b)?;
    Ok(Checkpoint { tagger, task: raw.task })
}

pub fn save<T: Scalar + Serialize>(path: &Path, tagger: &Tagger<T>, task: Option<&TaskSpec>) -> Result<()> {
    fs::write(path, to_json(tagger, task)?)?;
    Ok(())
}

pub fn load<T: Scalar + DeserializeOwned>(path: &Path) -> Result<Checkpoint<T>> {
    from_json(&fs::read_to_string(path)?)
}

/// Loads and additionally requires the stored config to equal `expected`.
pub fn load_for<T: Scalar + DeserializeOwned>(path: &Path, expected: &ModelConfig) -> Result<Checkpoint<T>> {
    let ck = load(path)?;
    if ck.tagger.config() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with config `{}`, requested `{}`",
            ck.tagger.config().preset.as_deref().unwrap_or("custom"),
            expected.preset.as_deref().unwrap_or("custom")
        )));
    }
    Ok(ck)
}
