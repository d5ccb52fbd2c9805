//! Encoder configuration: dimensions, per-head mask assignment and `W_q`/`W_k`
//! tie groups, plus the named presets.
//!
//! Two on-disk forms are accepted. JSON uses the keys `n_layers`, `heads`,
//! `d_v`, `d_l`, `d_ff`, `masks`, `tie_groups`, `preset` and optionally
//! `mask_mode`. The flat text form is one `key = value` per line:
//!
//! ```text
//! # comments and blank lines are ignored
//! preset   = tiny_band2          # alone: resolve the preset
//! n_layers = 2                   # or give the model explicitly
//! heads    = 4
//! d_v      = 64
//! d_l      = 16
//! d_ff     = 128
//! masks    = band2,band2,-,-; band1,band1,band1,band1   # layers split by `;`, `-`/`none` unmasked
//! tie      = 0:0 0:1             # repeatable, one group per line; untied heads stay singletons
//! mask_mode = post_softmax       # or `renormalized`
//! ```
//!
//! `masks` may also be a single mask name, applied to every head. In both
//! forms a preset name given together with explicit dimensions is kept as a
//! label only.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskKind;

/// How a head's mask is combined with its attention scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Full-row softmax, then elementwise mask; kept coefficients are not
    /// renormalized. The masked-out tokens still enter each row's softmax
    /// normalizer.
    #[default]
    PostSoftmax,
    /// Softmax restricted to the mask support (equivalently: post-softmax
    /// masking followed by row renormalization). Masked-out tokens have no
    /// influence at all.
    Renormalized,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::PostSoftmax => "post_softmax",
            MaskMode::Renormalized => "renormalized",
        })
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post_softmax" => Ok(MaskMode::PostSoftmax),
            "renormalized" => Ok(MaskMode::Renormalized),
            other => Err(Error::Config(format!("unknown mask_mode `{other}` (post_softmax | renormalized)"))),
        }
    }
}

/// (layer, head)
pub type HeadId = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ConfigFile", try_from = "ConfigFile")]
pub struct ModelConfig {
    pub n_layers: usize,
    pub heads: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub d_ff: usize,
    /// Layer-major: `masks[layer][head]`.
    pub masks: Vec<Vec<Option<MaskKind>>>,
    /// Partition of all heads; each group shares one `W_q`/`W_k` pair.
    pub tie_groups: Vec<Vec<HeadId>>,
    pub mask_mode: MaskMode,
    pub preset: Option<String>,
}

impl ModelConfig {
    /// Unmasked, untied model.
    pub fn standard(n_layers: usize, heads: usize, d_v: usize, d_l: usize, d_ff: usize) -> Self {
        ModelConfig {
            n_layers,
            heads,
            d_v,
            d_l,
            d_ff,
            masks: vec![vec![None; heads]; n_layers],
            tie_groups: singleton_groups(0..n_layers, heads),
            mask_mode: MaskMode::PostSoftmax,
            preset: None,
        }
    }

    pub fn with_masks(mut self, masks: Vec<Vec<Option<MaskKind>>>) -> Self {
        self.masks = masks;
        self
    }

    /// Every head of every layer gets `kind`.
    pub fn with_uniform_mask(mut self, kind: MaskKind) -> Self {
        self.masks = vec![vec![Some(kind); self.heads]; self.n_layers];
        self
    }

    pub fn with_tie_groups(mut self, groups: Vec<Vec<HeadId>>) -> Self {
        self.tie_groups = groups;
        self
    }

    pub fn with_mask_mode(mut self, mode: MaskMode) -> Self {
        self.mask_mode = mode;
        self
    }

    pub fn with_preset_name(mut self, name: &str) -> Self {
        self.preset = Some(name.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_v == 0 || self.d_l == 0 || self.d_ff == 0 {
            return Err(Error::Config("heads, d_v, d_l and d_ff must be positive".into()));
        }
        if self.masks.len() != self.n_layers || self.masks.iter().any(|l| l.len() != self.heads) {
            return Err(Error::Config(format!(
                "masks must list {} layers of {} heads",
                self.n_layers, self.heads
            )));
        }
        for kind in self.masks.iter().flatten().flatten() {
            kind.validate()?;
        }
        let mut seen = BTreeSet::new();
        for group in &self.tie_groups {
            if group.is_empty() {
                return Err(Error::Config("empty tie group".into()));
            }
            for &(l, h) in group {
                if l >= self.n_layers || h >= self.heads {
                    return Err(Error::Config(format!("tie group member ({l}, {h}) out of range")));
                }
                if !seen.insert((l, h)) {
                    return Err(Error::Config(format!("head ({l}, {h}) appears in more than one tie group")));
                }
            }
        }
        if seen.len() != self.n_layers * self.heads {
            return Err(Error::Config(format!(
                "tie groups cover {} of {} heads",
                seen.len(),
                self.n_layers * self.heads
            )));
        }
        Ok(())
    }

    /// `pool[layer][head]` = index of the tie group owning that head.
    pub fn head_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![vec![usize::MAX; self.heads]; self.n_layers];
        for (g, group) in self.tie_groups.iter().enumerate() {
            for &(l, h) in group {
                pools[l][h] = g;
            }
        }
        pools
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.heads
    }

    /// Largest `|i - j|` any single layer can connect when every head is
    /// masked; `None` if some head is unmasked.
    pub fn max_mask_reach(&self) -> Option<usize> {
        let mut reach = 0;
        for kind in self.masks.iter().flatten() {
            reach = reach.max(kind.as_ref()?.reach());
        }
        Some(reach)
    }

    fn label(&self) -> String {
        self.preset.clone().unwrap_or_else(|| "custom".into())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ConfigFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ConfigFile = serde_json::from_str(text)?;
        file.into_config()
    }

    /// Parses the flat `key = value` form documented at module level.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut file = ConfigFile::default();
        let mut ties: Vec<Vec<HeadId>> = Vec::new();
        let mut masks: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("line {}: `{key}` needs an integer", n + 1)))
            };
            match key {
                "preset" => file.preset = Some(value.to_string()),
                "n_layers" => file.n_layers = Some(num()?),
                "heads" => file.heads = Some(num()?),
                "d_v" => file.d_v = Some(num()?),
                "d_l" => file.d_l = Some(num()?),
                "d_ff" => file.d_ff = Some(num()?),
                "mask_mode" => file.mask_mode = Some(value.parse()?),
                "masks" => masks = Some(value.to_string()),
                "tie" => {
                    let group = value
                        .split_whitespace()
                        .map(|pair| {
                            let (l, h) = pair.split_once(':').ok_or(())?;
                            Ok::<_, ()>((l.parse().map_err(|_| ())?, h.parse().map_err(|_| ())?))
                        })
                        .collect::<std::result::Result<Vec<HeadId>, ()>>()
                        .map_err(|_| Error::Config(format!("line {}: tie expects `layer:head` pairs", n + 1)))?;
                    ties.push(group);
                }
                other => return Err(Error::Config(format!("line {}: unknown key `{other}`", n + 1))),
            }
        }
        if let Some(spec) = masks {
            file.masks = Some(parse_kv_masks(&spec)?);
        }
        if !ties.is_empty() {
            file.tie_groups = Some(ties);
        }
        file.into_config()
    }

    /// Loads `.json` files as JSON and anything else as the flat form.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_kv(&text)
        }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} layers x {} heads, d_v={}, d_l={}, d_ff={}, {} tie groups, {})",
            self.label(),
            self.n_layers,
            self.heads,
            self.d_v,
            self.d_l,
            self.d_ff,
            self.tie_groups.len(),
            self.mask_mode
        )
    }
}

fn singleton_groups(layers: std::ops::Range<usize>, heads: usize) -> Vec<Vec<HeadId>> {
    layers.flat_map(|l| (0..heads).map(move |h| vec![(l, h)])).collect()
}

fn parse_kv_masks(spec: &str) -> Result<MaskSpec> {
    let parse_head = |s: &str| -> Result<Option<MaskKind>> {
        match s.trim() {
            "-" | "none" | "null" => Ok(None),
            name => name.parse().map(Some),
        }
    };
    if !spec.contains(',') && !spec.contains(';') {
        return Ok(MaskSpec::Uniform(parse_head(spec)?));
    }
    let layers = spec
        .split(';')
        .map(|layer| layer.split(',').map(parse_head).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSpec::Nested(layers))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum MaskSpec {
    Nested(Vec<Vec<Option<MaskKind>>>),
    Flat(Vec<Option<MaskKind>>),
    Uniform(Option<MaskKind>),
}

/// On-disk schema; every field optional so a bare `{"preset": ...}` works.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    n_layers: Option<usize>,
    heads: Option<usize>,
    d_v: Option<usize>,
    d_l: Option<usize>,
    d_ff: Option<usize>,
    masks: Option<MaskSpec>,
    tie_groups: Option<Vec<Vec<HeadId>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_mode: Option<MaskMode>,
}

impl From<&ModelConfig> for ConfigFile {
    fn from(c: &ModelConfig) -> Self {
        ConfigFile {
            preset: c.preset.clone(),
            n_layers: Some(c.n_layers),
            heads: Some(c.heads),
            d_v: Some(c.d_v),
            d_l: Some(c.d_l),
            d_ff: Some(c.d_ff),
            masks: Some(MaskSpec::Nested(c.masks.clone())),
            tie_groups: Some(c.tie_groups.clone()),
            mask_mode: Some(c.mask_mode),
        }
    }
}

impl From<ModelConfig> for ConfigFile {
    fn from(c: ModelConfig) -> Self {
        ConfigFile::from(&c)
    }
}

impl TryFrom<ConfigFile> for ModelConfig {
    type Error = Error;

    fn try_from(file: ConfigFile) -> Result<Self> {
        file.into_config()
    }
}

impl ConfigFile {
    fn into_config(self) -> Result<ModelConfig> {
        let explicit = self.n_layers.is_some() || self.heads.is_some();
        let mut cfg = match (&self.preset, explicit) {
            (Some(name), false) => {
                if self.masks.is_some() || self.tie_groups.is_some() {
                    return Err(Error::Config("a bare preset cannot be combined with masks or tie_groups".into()));
                }
                resolve_preset(name)?
            }
            _ => {
                let need = |v: Option<usize>, k: &str| v.ok_or_else(|| Error::Config(format!("missing `{k}`")));
                let n_layers = need(self.n_layers, "n_layers")?;
                let heads = need(self.heads, "heads")?;
                let mut cfg = ModelConfig::standard(
                    n_layers,
                    heads,
                    need(self.d_v, "d_v")?,
                    need(self.d_l, "d_l")?,
                    need(self.d_ff, "d_ff")?,
                );
                cfg.masks = match self.masks {
                    None => cfg.masks,
                    Some(MaskSpec::Nested(m)) => m,
                    Some(MaskSpec::Uniform(k)) => vec![vec![k; heads]; n_layers],
                    Some(MaskSpec::Flat(flat)) => {
                        if flat.len() != n_layers * heads {
                            return Err(Error::Config(format!(
                                "flat masks list has {} entries, expected {}",
                                flat.len(),
                                n_layers * heads
                            )));
                        }
                        flat.chunks(heads).map(<[_]>::to_vec).collect()
                    }
                };
                if let Some(groups) = self.tie_groups {
                    cfg.tie_groups = complete_partition(groups, n_layers, heads);
                }
                cfg.preset = self.preset;
                cfg
            }
        };
        if let Some(mode) = self.mask_mode {
            cfg.mask_mode = mode;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Adds singleton groups for heads not mentioned in `groups`.
fn complete_partition(mut groups: Vec<Vec<HeadId>>, n_layers: usize, heads: usize) -> Vec<Vec<HeadId>> {
    let covered: BTreeSet<HeadId> = groups.iter().flatten().copied().collect();
    for l in 0..n_layers {
        for h in 0..heads {
            if !covered.contains(&(l, h)) {
                groups.push(vec![(l, h)]);
            }
        }
    }
    groups
}

pub const PRESET_NAMES: [&str; 19] = [
    "baseline",
    "2LocHeads_All6",
    "4LocHeads_All6",
    "8LocHeads_First3",
    "8LocHeads_Last3",
    "8LocHeads_All6",
    "4LocHeads_4TiedLoc_All6",
    "2LocHeads_6TiedLoc_All6",
    "1LocHead_7TiedLoc_All6",
    "1LocHead_7TiedLoc_First3",
    "half_tied",
    "fully_tied",
    "bert_band2_untied",
    "bert_band6_untied",
    "bert_band6_alltied",
    "bert_band6_132tied",
    "bert_band6_120tied",
    "tiny_baseline",
    "tiny_band2",
];

const BASE_LAYERS: usize = 6;
const BASE_HEADS: usize = 8;

fn transformer_base() -> ModelConfig {
    ModelConfig::standard(BASE_LAYERS, BASE_HEADS, 512, 64, 2048)
}

fn bert_base() -> ModelConfig {
    ModelConfig::standard(12, 12, 768, 64, 3072)
}

/// Per-layer head masks for a layer whose first heads are local.
fn local_layer(prefix: &[MaskKind]) -> Vec<Option<MaskKind>> {
    let mut layer: Vec<Option<MaskKind>> = prefix.iter().copied().map(Some).collect();
    layer.resize(BASE_HEADS, None);
    layer
}

/// One tie group per `chunk` consecutive heads within each listed layer.
fn tie_within_layers(layers: std::ops::Range<usize>, chunk: usize) -> Vec<Vec<HeadId>> {
    layers
        .flat_map(|l| (0..BASE_HEADS).step_by(chunk).map(move |h0| (h0..h0 + chunk).map(|h| (l, h)).collect()))
        .collect()
}

fn tie_across_layers(layers: std::ops::Range<usize>, heads: usize) -> Vec<HeadId> {
    layers.flat_map(|l| (0..heads).map(move |h| (l, h))).collect()
}

/// Resolves a preset name to its fixed configuration.
pub fn resolve_preset(name: &str) -> Result<ModelConfig> {
    use MaskKind::*;
    let full = local_layer(&MaskKind::FULL_LOCAL_LAYER);
    let none = vec![None; BASE_HEADS];
    let base = transformer_base();
    let cfg = match name {
        "baseline" => base,
        "2LocHeads_All6" => base.with_masks(vec![local_layer(&[Band(1), Band(2)]); BASE_LAYERS]),
        "4LocHeads_All6" => base.with_masks(vec![local_layer(&[Band(1), Band(2), Band(1), Band(2)]); BASE_LAYERS]),
        "8LocHeads_First3" => base.with_masks([vec![full.clone(); 3], vec![none; 3]].concat()),
        "8LocHeads_Last3" => base.with_masks([vec![none; 3], vec![full.clone(); 3]].concat()),
        "8LocHeads_All6" => base.with_masks(vec![full; BASE_LAYERS]),
        "4LocHeads_4TiedLoc_All6" => {
            let pair = [Identity, Band(2)];
            base.with_masks(vec![local_layer(&pair.repeat(4)); BASE_LAYERS])
                .with_tie_groups(tie_within_layers(0..BASE_LAYERS, 2))
        }
        "2LocHeads_6TiedLoc_All6" => {
            let quad = [Identity, Band(2), Prev(1), Next(1)];
            base.with_masks(vec![local_layer(&quad.repeat(2)); BASE_LAYERS])
                .with_tie_groups(tie_within_layers(0..BASE_LAYERS, 4))
        }
        "1LocHead_7TiedLoc_All6" => {
            base.with_masks(vec![full; BASE_LAYERS]).with_tie_groups(tie_within_layers(0..BASE_LAYERS, BASE_HEADS))
        }
        "1LocHead_7TiedLoc_First3" => {
            let mut ties = tie_within_layers(0..3, BASE_HEADS);
            ties.extend(singleton_groups(3..BASE_LAYERS, BASE_HEADS));
            base.with_masks([vec![full; 3], vec![none; 3]].concat()).with_tie_groups(ties)
        }
        "half_tied" => {
            let mut ties = vec![tie_across_layers(0..3, BASE_HEADS)];
            ties.extend(singleton_groups(3..BASE_LAYERS, BASE_HEADS));
            base.with_masks([vec![full; 3], vec![none; 3]].concat()).with_tie_groups(ties)
        }
        "fully_tied" => base
            .with_masks(vec![full; BASE_LAYERS])
            .with_tie_groups(vec![tie_across_layers(0..BASE_LAYERS, BASE_HEADS)]),
        "bert_band2_untied" => bert_base().with_uniform_mask(Band(2)),
        "bert_band6_untied" => bert_base().with_uniform_mask(Band(6)),
        "bert_band6_alltied" => {
            bert_base().with_uniform_mask(Band(6)).with_tie_groups(vec![tie_across_layers(0..12, 12)])
        }
        "bert_band6_132tied" | "bert_band6_120tied" => {
            let tied_layers = if name == "bert_band6_132tied" { 11 } else { 10 };
            let mut ties = vec![tie_across_layers(0..tied_layers, 12)];
            ties.extend(singleton_groups(tied_layers..12, 12));
            bert_base().with_uniform_mask(Band(6)).with_tie_groups(ties)
        }
        "tiny_baseline" => tiny(),
        "tiny_band2" => tiny().with_uniform_mask(Band(2)),
        other => {
            return Err(Error::UnknownPreset {
                name: other.to_string(),
                valid: PRESET_NAMES.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    let cfg = cfg.with_preset_name(name);
    cfg.validate()?;
    Ok(cfg)
}

/// Desk-scale encoder used by the training harness.
fn tiny() -> ModelConfig {
    ModelConfig::standard(2, 4, 64, 16, 64)
}
