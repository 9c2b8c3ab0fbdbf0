//! Run configuration: TOML with dotted sections, named base profiles and
//! `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::adam::AdamConfig;

pub const DEFAULT_CLASSES: [&str; 7] = [
    "surprise",
    "fear",
    "disgust",
    "happiness",
    "sadness",
    "anger",
    "neutral",
];

/// Text prompt wrapped around each class name before text embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    /// `[class]`
    #[default]
    Class,
    /// `a photo of [class].`
    Photo,
    /// `a photo of a [class] face.`
    PhotoFace,
    /// `a [class] facial expression.`
    FacialExpression,
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 4] = [
        PromptTemplate::Class,
        PromptTemplate::Photo,
        PromptTemplate::PhotoFace,
        PromptTemplate::FacialExpression,
    ];

    pub fn pattern(self) -> &'static str {
        match self {
            PromptTemplate::Class => "[class]",
            PromptTemplate::Photo => "a photo of [class].",
            PromptTemplate::PhotoFace => "a photo of a [class] face.",
            PromptTemplate::FacialExpression => "a [class] facial expression.",
        }
    }

    pub fn render(self, class_name: &str) -> String {
        self.pattern().replace("[class]", class_name)
    }
}

/// How the per-query gate logits are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSource {
    /// Extra output channels of the query projection.
    #[default]
    Shared,
    /// A dedicated linear map on the appearance tokens.
    Separate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub landmark_guidance: bool,
    pub bgca: bool,
    pub vles: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            landmark_guidance: true,
            bgca: true,
            vles: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset_dir: Option<PathBuf>,
    pub image_size: usize,
    /// Fraction of each class held out for checkpoint selection.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset_dir: None,
            image_size: 32,
            val_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub class_names: Vec<String>,
    /// Patch edge per scale; tokens per scale are `(image_size / patch)²`.
    pub patch_sizes: Vec<usize>,
    /// Backbone token width per scale.
    pub scale_dims: Vec<usize>,
    /// Per-head query/key/value width of the gated cross attention.
    pub bgca_head_dim: usize,
    pub bgca_heads: usize,
    pub bgca_eps: f64,
    pub gate_source: GateSource,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    /// Width of the cross-similarity embedding.
    pub csl_dim: usize,
    pub head_depth: usize,
    pub d_clip: usize,
    /// Side of the average-pooled grid fed to the teacher image stub.
    pub teacher_pool: usize,
    /// Adds the attended teacher value to the class token instead of replacing it.
    pub teacher_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            class_names: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            patch_sizes: vec![4, 8, 16],
            scale_dims: vec![16, 32, 64],
            bgca_head_dim: 32,
            bgca_heads: 1,
            bgca_eps: 1e-6,
            gate_source: GateSource::Shared,
            d_model: 64,
            depth: 2,
            heads: 4,
            csl_dim: 96,
            head_depth: 1,
            d_clip: 32,
            teacher_pool: 8,
            teacher_residual: true,
        }
    }
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlesConfig {
    pub tau: f64,
    pub alpha: f64,
    pub template: PromptTemplate,
    /// When false the text bias is forced to zero (fixed prompts only).
    pub ecp: bool,
}

impl Default for VlesConfig {
    fn default() -> Self {
        VlesConfig {
            tau: 0.07,
            alpha: 0.1,
            template: PromptTemplate::Class,
            ecp: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the visual cross-entropy terms.
    pub lambda: f64,
    /// Stop once training-split accuracy reaches this value.
    pub target_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            lambda: 1.0,
            target_train_acc: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Toy,
    /// Optimiser and schedule values for full-size face datasets.
    FullScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub vles: VlesConfig,
    pub ablation: AblationFlags,
    pub train: TrainConfig,
    pub optim: AdamConfig,
}

/// Learning rate of the toy profile; every ablation variant trains stably
/// at this rate on the synthetic set.
pub const TOY_LR: f64 = 1e-4;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: Profile::Toy,
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            vles: VlesConfig::default(),
            ablation: AblationFlags::default(),
            train: TrainConfig::default(),
            optim: AdamConfig {
                lr: TOY_LR,
                ..AdamConfig::default()
            },
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = RunConfig {
            profile,
            ..Default::default()
        };
        if profile == Profile::FullScale {
            cfg.optim.lr = 4e-6;
            cfg.optim.weight_decay = 1e-4;
            cfg.train.batch_size = 24;
            cfg.train.epochs = 200;
        }
        cfg
    }

    /// Parses TOML text on top of its profile's defaults, then applies
    /// `key=value` overrides and validates the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        for ov in overrides {
            let (key, value) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(ov.clone(), "override must look like key=value"))?;
            set_path(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let profile = match table.get("profile") {
            Some(v) => Profile::deserialize(v.clone()).map_err(|e| Error::config("profile", e.to_string()))?,
            None => Profile::Toy,
        };
        let mut merged = toml::Table::try_from(Self::for_profile(profile)).expect("config serialises");
        merge(&mut merged, table);
        let cfg = RunConfig::deserialize(toml::Value::Table(merged)).map_err(|e| field_error(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Structural checks that do not depend on which command runs.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("data.image_size", self.data.image_size),
            ("model.bgca_head_dim", m.bgca_head_dim),
            ("model.bgca_heads", m.bgca_heads),
            ("model.d_model", m.d_model),
            ("model.heads", m.heads),
            ("model.csl_dim", m.csl_dim),
            ("model.d_clip", m.d_clip),
            ("model.teacher_pool", m.teacher_pool),
            ("train.batch_size", self.train.batch_size),
            ("train.epochs", self.train.epochs),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if m.class_names.len() < 2 {
            return Err(Error::config("model.class_names", "need at least two classes"));
        }
        if m.patch_sizes.len() != 3 || m.scale_dims.len() != 3 {
            return Err(Error::config("model.patch_sizes", "exactly three scales are required"));
        }
        for (i, &p) in m.patch_sizes.iter().enumerate() {
            if p == 0 || self.data.image_size % p != 0 {
                return Err(Error::config(
                    "model.patch_sizes",
                    format!("patch {p} at scale {} does not tile image size {}", i + 1, self.data.image_size),
                ));
            }
        }
        if m.scale_dims.contains(&0) {
            return Err(Error::config("model.scale_dims", "must be positive"));
        }
        if m.d_model % m.heads != 0 {
            return Err(Error::config("model.heads", "must divide model.d_model"));
        }
        if self.data.image_size % m.teacher_pool != 0 {
            return Err(Error::config("model.teacher_pool", "must divide data.image_size"));
        }
        if !(self.vles.tau > 0.0) {
            return Err(Error::config("vles.tau", "must be positive"));
        }
        if !(m.bgca_eps > 0.0) {
            return Err(Error::config("model.bgca_eps", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("data.val_fraction", "must lie in [0, 1)"));
        }
        if self.ablation.bgca && !self.ablation.landmark_guidance {
            return Err(Error::config("ablation.bgca", "requires ablation.landmark_guidance"));
        }
        if let Some(t) = self.train.target_train_acc {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("train.target_train_acc", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> Result<&Path> {
        self.data
            .dataset_dir
            .as_deref()
            .ok_or_else(|| Error::config("data.dataset_dir", "missing; set it in the config or with --override"))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Maps a deserialisation error to the dotted field it concerns, when known.
fn field_error(e: &toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field"))
        .unwrap_or("<config>")
        .to_string();
    Error::config(field, msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.data.dataset_dir = Some("data/x".into());
        cfg.train.target_train_acc = Some(0.95);
        cfg.vles.template = PromptTemplate::PhotoFace;
        cfg.optim.lr = 0.1 + 0.2;
        let text = cfg.to_toml();
        assert_eq!(RunConfig::parse(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let cfg = RunConfig::parse(
            "[train]\nepochs = 5\n",
            &[
                "ablation.vles=false".into(),
                "vles.template=photo".into(),
                "data.dataset_dir=/tmp/d".into(),
                "model.class_names=[\"a\",\"b\"]".into(),
            ],
        )
        .unwrap();
        assert!(!cfg.ablation.vles);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.vles.template, PromptTemplate::Photo);
        assert_eq!(cfg.data.dataset_dir.as_deref(), Some(Path::new("/tmp/d")));
        assert_eq!(cfg.model.class_names, vec!["a", "b"]);
    }

    #[test]
    fn full_scale_profile_sets_optimiser_values() {
        let cfg = RunConfig::parse("profile = \"full-scale\"\n[train]\nepochs = 3\n", &[]).unwrap();
        assert_eq!(cfg.optim.lr, 4e-6);
        assert_eq!(cfg.train.batch_size, 24);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse("", &["ablation.landmark_guidance=false".into()]).unwrap_err();
        assert!(err.to_string().contains("ablation.bgca"), "{err}");
        let err = RunConfig::parse("[model]\nbogus = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = RunConfig::default().dataset_dir().unwrap_err();
        assert!(matches!(&err, Error::ConfigInvalid { field, .. } if field == "data.dataset_dir"));
        assert!(RunConfig::parse("", &["vles.tau=0".into()]).is_err());
    }

    #[test]
    fn templates_render() {
        assert_eq!(PromptTemplate::Class.render("fear"), "fear");
        assert_eq!(PromptTemplate::Photo.render("fear"), "a photo of fear.");
        assert_eq!(PromptTemplate::PhotoFace.render("fear"), "a photo of a fear face.");
        assert_eq!(PromptTemplate::FacialExpression.render("fear"), "a fear facial expression.");
    }
}
