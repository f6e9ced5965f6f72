//! Model configurations and their canonical text form.
//!
//! The canonical form is a `key = value` line format with a fixed key
//! order, `#` comments, and unknown keys rejected. The same format is
//! embedded in model files and accepted as CLI `--model-config` input,
//! where omitted keys fall back to defaults and dataset-derived dims.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Both,
    VideoOnly,
    AudioOnly,
}

impl Modality {
    fn as_str(&self) -> &'static str {
        match self {
            Modality::Both => "both",
            Modality::VideoOnly => "video_only",
            Modality::AudioOnly => "audio_only",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Modality::Both),
            "video_only" => Ok(Modality::VideoOnly),
            "audio_only" => Ok(Modality::AudioOnly),
            other => Err(Error::input(format!("unknown modality '{other}'"))),
        }
    }
}

/// Residual MLP over video/audio vectors (Fig.-3-style wiring).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResNetLikeConfig {
    pub inner_size: usize,
    pub av_id_block_num: usize,
    pub concat_id_block_num: usize,
    pub dropout: f64,
    pub modality: Modality,
    pub vocabulary_size: usize,
    pub d_v: usize,
    pub d_a: usize,
    /// Append frame statistics (6 (D_v + D_a) + 1 values) to the video
    /// branch input.
    pub frame_stat_features: bool,
}

impl ResNetLikeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_size == 0 {
            return Err(Error::input("inner_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::input(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if self.vocabulary_size == 0 {
            return Err(Error::input("vocabulary_size must be positive"));
        }
        if self.d_v == 0 || self.d_a == 0 {
            return Err(Error::input("input dims must be positive"));
        }
        Ok(())
    }

    /// Width of the video-branch input including optional frame statistics.
    pub fn video_input_dim(&self) -> usize {
        if self.frame_stat_features {
            self.d_v + 6 * (self.d_v + self.d_a) + 1
        } else {
            self.d_v
        }
    }
}

/// Learnable bag-of-words over frames with a trainable power coefficient.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VladBowConfig {
    pub clusters: usize,
    pub input_dim: usize,
    pub initial_power: f64,
    /// Head over the K-dim BOW vector. Only `inner_size`,
    /// `concat_id_block_num`, `dropout` and `vocabulary_size` matter here;
    /// modality and dims are ignored for single-vector trunks.
    pub head: ResNetLikeConfig,
}

impl VladBowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::input("clusters must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::input("input_dim must be positive"));
        }
        if self.initial_power <= 0.0 {
            return Err(Error::input("initial_power must be positive"));
        }
        self.head.validate()
    }
}

/// Trainable linear combinations of padded frames feeding a head.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameMixConfig {
    pub num_combinations: usize,
    pub t_max: usize,
    pub input_dim: usize,
    pub head: ResNetLikeConfig,
}

impl FrameMixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_combinations == 0 {
            return Err(Error::input("num_combinations must be at least 1"));
        }
        if self.t_max == 0 {
            return Err(Error::input("t_max must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::input("input_dim must be positive"));
        }
        self.head.validate()
    }
}

/// A single affine + sigmoid classification layer (the stacking head).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StackHeadConfig {
    pub input_dim: usize,
    pub vocabulary_size: usize,
}

impl StackHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.vocabulary_size == 0 {
            return Err(Error::input("stack head dims must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    ResNetLike(ResNetLikeConfig),
    VladBow(VladBowConfig),
    FrameMix(FrameMixConfig),
    StackHead(StackHeadConfig),
}

impl ModelConfig {
    /// Canonicalize fields that single-vector heads ignore (modality,
    /// dims, per-modality depth) so equality and round trips are stable.
    pub fn normalized(mut self) -> ModelConfig {
        let fix = |head: &mut ResNetLikeConfig, fused_dim: usize| {
            head.av_id_block_num = 0;
            head.modality = Modality::Both;
            head.d_v = fused_dim;
            head.d_a = 1;
            head.frame_stat_features = false;
        };
        match &mut self {
            ModelConfig::VladBow(c) => {
                let fused = c.clusters;
                fix(&mut c.head, fused);
            }
            ModelConfig::FrameMix(c) => {
                let fused = c.num_combinations * c.input_dim;
                fix(&mut c.head, fused);
            }
            _ => {}
        }
        self
    }

    pub fn arch_tag(&self) -> &'static str {
        match self {
            ModelConfig::ResNetLike(_) => "resnetlike",
            ModelConfig::VladBow(_) => "vladbow",
            ModelConfig::FrameMix(_) => "framemix",
            ModelConfig::StackHead(_) => "stackhead",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::ResNetLike(c) => c.validate(),
            ModelConfig::VladBow(c) => c.validate(),
            ModelConfig::FrameMix(c) => c.validate(),
            ModelConfig::StackHead(c) => c.validate(),
        }
    }

    pub fn vocabulary_size(&self) -> usize {
        match self {
            ModelConfig::ResNetLike(c) => c.vocabulary_size,
            ModelConfig::VladBow(c) => c.head.vocabulary_size,
            ModelConfig::FrameMix(c) => c.head.vocabulary_size,
            ModelConfig::StackHead(c) => c.vocabulary_size,
        }
    }

    /// Does this architecture consume the frame sequence?
    pub fn needs_frames(&self) -> bool {
        matches!(self, ModelConfig::VladBow(_) | ModelConfig::FrameMix(_))
            || matches!(
                self,
                ModelConfig::ResNetLike(c) if c.frame_stat_features
            )
    }
}

// ---------------------------------------------------------------------------
// canonical text

/// Dataset-derived context used to default dims in CLI configs.
#[derive(Debug, Clone, Copy)]
pub struct DimContext {
    pub vocabulary_size: usize,
    pub d_v: usize,
    pub d_a: usize,
}

pub(crate) struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<ConfigMap> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::input(format!(
                    "config line {}: expected 'key = value'",
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::input(format!("duplicate config key '{key}'")));
            }
        }
        Ok(ConfigMap { entries })
    }

    pub fn take<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.entries.remove(key) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::input(format!("bad value for '{key}': '{v}'"))),
            None => Ok(default),
        }
    }

    pub fn take_required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        match self.entries.remove(key) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::input(format!("bad value for '{key}': '{v}'"))),
            None => Err(Error::input(format!("missing config key '{key}'"))),
        }
    }

    pub fn take_str(&mut self, key: &str, default: &str) -> String {
        self.entries
            .remove(key)
            .unwrap_or_else(|| default.to_string())
    }

    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            return Err(Error::input(format!("unknown config key '{key}'")));
        }
        Ok(())
    }

    /// Reject keys not in the allowed list up front, so unknown keys are
    /// reported even when required keys are also missing.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::input(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }
}

const HEAD_KEYS: [&str; 4] = [
    "head.inner_size",
    "head.concat_id_block_num",
    "head.dropout",
    "head.vocabulary_size",
];

fn allowed_keys(arch: &str) -> Result<Vec<&'static str>> {
    let mut keys: Vec<&'static str> = match arch {
        "resnetlike" => vec![
            "inner_size",
            "av_id_block_num",
            "concat_id_block_num",
            "dropout",
            "modality",
            "vocabulary_size",
            "d_v",
            "d_a",
            "frame_stat_features",
        ],
        "vladbow" => vec!["clusters", "input_dim", "initial_power"],
        "framemix" => vec!["num_combinations", "t_max", "input_dim"],
        "stackhead" => vec!["input_dim", "vocabulary_size"],
        other => {
            return Err(Error::input(format!("unknown architecture '{other}'")));
        }
    };
    if matches!(arch, "vladbow" | "framemix") {
        keys.extend(HEAD_KEYS);
    }
    Ok(keys)
}

/// Overlay one canonical config text on another: overlay keys win. When
/// the overlay names a different `arch` than the base, the base is
/// discarded entirely (its keys belong to another architecture).
pub fn merge_config_texts(base: &str, overlay: &str) -> Result<String> {
    let base_map = ConfigMap::parse(base)?;
    let overlay_map = ConfigMap::parse(overlay)?;
    let base_arch = base_map.entries.get("arch").cloned();
    let overlay_arch = overlay_map.entries.get("arch").cloned();
    if let (Some(b), Some(o)) = (&base_arch, &overlay_arch) {
        if b != o {
            return Ok(overlay.to_string());
        }
    }
    let mut merged = base_map.entries;
    for (k, v) in overlay_map.entries {
        merged.insert(k, v);
    }
    let mut out = String::new();
    // arch first for readability; the remaining keys sorted.
    if let Some(arch) = merged.remove("arch") {
        out.push_str(&format!("arch = {arch}\n"));
    }
    for (k, v) in merged {
        out.push_str(&format!("{k} = {v}\n"));
    }
    Ok(out)
}

fn head_to_text(out: &mut String, head: &ResNetLikeConfig) {
    let _ = writeln!(out, "head.inner_size = {}", head.inner_size);
    let _ = writeln!(
        out,
        "head.concat_id_block_num = {}",
        head.concat_id_block_num
    );
    let _ = writeln!(out, "head.dropout = {}", head.dropout);
    let _ = writeln!(out, "head.vocabulary_size = {}", head.vocabulary_size);
}

fn head_from_map(
    map: &mut ConfigMap,
    ctx: Option<&DimContext>,
    fused_dim: usize,
) -> Result<ResNetLikeConfig> {
    let vocab_default = ctx.map(|c| c.vocabulary_size).unwrap_or(0);
    let vocabulary_size = if vocab_default > 0 {
        map.take("head.vocabulary_size", vocab_default)?
    } else {
        map.take_required("head.vocabulary_size")?
    };
    Ok(ResNetLikeConfig {
        inner_size: map.take("head.inner_size", 64)?,
        av_id_block_num: 0,
        concat_id_block_num: map.take("head.concat_id_block_num", 1)?,
        dropout: map.take("head.dropout", 0.3)?,
        modality: Modality::Both,
        vocabulary_size,
        d_v: fused_dim,
        d_a: 1,
        frame_stat_features: false,
    })
}

impl ModelConfig {
    /// Serialize to the canonical text form (complete; round-trips).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "arch = {}", self.arch_tag());
        match self {
            ModelConfig::ResNetLike(c) => {
                let _ = writeln!(out, "inner_size = {}", c.inner_size);
                let _ = writeln!(out, "av_id_block_num = {}", c.av_id_block_num);
                let _ = writeln!(out, "concat_id_block_num = {}", c.concat_id_block_num);
                let _ = writeln!(out, "dropout = {}", c.dropout);
                let _ = writeln!(out, "modality = {}", c.modality.as_str());
                let _ = writeln!(out, "vocabulary_size = {}", c.vocabulary_size);
                let _ = writeln!(out, "d_v = {}", c.d_v);
                let _ = writeln!(out, "d_a = {}", c.d_a);
                let _ = writeln!(out, "frame_stat_features = {}", c.frame_stat_features);
            }
            ModelConfig::VladBow(c) => {
                let _ = writeln!(out, "clusters = {}", c.clusters);
                let _ = writeln!(out, "input_dim = {}", c.input_dim);
                let _ = writeln!(out, "initial_power = {}", c.initial_power);
                head_to_text(&mut out, &c.head);
            }
            ModelConfig::FrameMix(c) => {
                let _ = writeln!(out, "num_combinations = {}", c.num_combinations);
                let _ = writeln!(out, "t_max = {}", c.t_max);
                let _ = writeln!(out, "input_dim = {}", c.input_dim);
                head_to_text(&mut out, &c.head);
            }
            ModelConfig::StackHead(c) => {
                let _ = writeln!(out, "input_dim = {}", c.input_dim);
                let _ = writeln!(out, "vocabulary_size = {}", c.vocabulary_size);
            }
        }
        out
    }

    /// Parse the canonical text form. With a [`DimContext`], omitted dims
    /// and vocabulary default from the dataset; without one they are
    /// required. Unknown keys are rejected.
    pub fn from_text(text: &str, ctx: Option<&DimContext>) -> Result<ModelConfig> {
        let mut map = ConfigMap::parse(text)?;
        let arch = map.take_str("arch", "resnetlike");
        map.reject_unknown(&allowed_keys(&arch)?)?;
        let config = match arch.as_str() {
            "resnetlike" => {
                let (vocab, d_v, d_a) = match ctx {
                    Some(c) => (
                        map.take("vocabulary_size", c.vocabulary_size)?,
                        map.take("d_v", c.d_v)?,
                        map.take("d_a", c.d_a)?,
                    ),
                    None => (
                        map.take_required("vocabulary_size")?,
                        map.take_required("d_v")?,
                        map.take_required("d_a")?,
                    ),
                };
                let modality = Modality::parse(&map.take_str("modality", "both"))?;
                ModelConfig::ResNetLike(ResNetLikeConfig {
                    inner_size: map.take("inner_size", 2048)?,
                    av_id_block_num: map.take("av_id_block_num", 1)?,
                    concat_id_block_num: map.take("concat_id_block_num", 1)?,
                    dropout: map.take("dropout", 0.5)?,
                    modality,
                    vocabulary_size: vocab,
                    d_v,
                    d_a,
                    frame_stat_features: map.take("frame_stat_features", false)?,
                })
            }
            "vladbow" => {
                let input_dim = match ctx {
                    Some(c) => map.take("input_dim", c.d_v + c.d_a)?,
                    None => map.take_required("input_dim")?,
                };
                let clusters = map.take("clusters", 64)?;
                ModelConfig::VladBow(VladBowConfig {
                    clusters,
                    input_dim,
                    initial_power: map.take("initial_power", 1.0)?,
                    head: head_from_map(&mut map, ctx, clusters)?,
                })
            }
            "framemix" => {
                let input_dim = match ctx {
                    Some(c) => map.take("input_dim", c.d_v + c.d_a)?,
                    None => map.take_required("input_dim")?,
                };
                let num_combinations = map.take("num_combinations", 5)?;
                let t_max = map.take("t_max", 32)?;
                ModelConfig::FrameMix(FrameMixConfig {
                    num_combinations,
                    t_max,
                    input_dim,
                    head: head_from_map(&mut map, ctx, num_combinations * input_dim)?,
                })
            }
            "stackhead" => ModelConfig::StackHead(StackHeadConfig {
                input_dim: map.take_required("input_dim")?,
                vocabulary_size: match ctx {
                    Some(c) => map.take("vocabulary_size", c.vocabulary_size)?,
                    None => map.take_required("vocabulary_size")?,
                },
            }),
            other => {
                return Err(Error::input(format!("unknown architecture '{other}'")));
            }
        };
        map.finish()?;
        let config = config.normalized();
        config.validate()?;
        Ok(config)
    }
}
