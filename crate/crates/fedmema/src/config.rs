//! Experiment configuration: a closed TOML schema.
//!
//! Unknown keys are rejected everywhere (typos must fail loudly, not silently
//! run a default experiment). `--set key.path=value` overrides are applied on
//! the parsed TOML tree before deserialization, so they obey exactly the same
//! schema rules as the file itself.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::anchors::MembershipFeature;
use crate::error::{Error, Result};
use crate::nn::NetConfig;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub anchors: AnchorsSection,
    pub lacca: LaccaSection,
    pub federation: FederationSection,
    pub optim: OptimSection,
    pub ablation: AblationSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub setting: u8,
    pub samples_per_site: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Probability mass a client's private shard puts on its favored
    /// appearance phenotype. `1/3` keeps shards identically distributed;
    /// `1.0` makes each client phenotype-pure. Server and evaluation
    /// data are always uniform.
    pub phenotype_skew: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_width: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorsSection {
    pub n_k: usize,
    pub level: LevelSpec,
    pub omega: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LaccaSection {
    pub heads: usize,
    pub enabled: bool,
    pub multi_anchor: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub clients_per_modality: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub mode: AblationMode,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub parallelism: usize,
    pub out_dir: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { name: "experiment".into() }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            setting: 1,
            samples_per_site: 43,
            image_size: 32,
            seed: 17,
            phenotype_skew: 1.0 / 3.0,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { base_width: 8, num_classes: 4 }
    }
}

impl Default for AnchorsSection {
    fn default() -> Self {
        AnchorsSection { n_k: 3, level: LevelSpec(MembershipFeature::Level(4)), omega: 0.999 }
    }
}

impl Default for LaccaSection {
    fn default() -> Self {
        LaccaSection { heads: 8, enabled: true, multi_anchor: true }
    }
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection { rounds: 50, epochs_per_round: 1, clients_per_modality: 1 }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection { lr: 2e-4, weight_decay: 1e-5, batch_size: 4 }
    }
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { mode: AblationMode::Full }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { parallelism: 1, out_dir: "runs".into() }
    }
}

/// Anchor membership level: a single pyramid level or the `"1-4"` concat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec(pub MembershipFeature);

impl Serialize for LevelSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            MembershipFeature::Level(l) => s.serialize_u64(l as u64),
            MembershipFeature::ConcatAll => s.serialize_str("1-4"),
        }
    }
}

impl<'de> Deserialize<'de> for LevelSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = LevelSpec;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("an integer 1..=4 or the string \"1-4\"")
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<LevelSpec, E> {
                if (1..=4).contains(&v) {
                    Ok(LevelSpec(MembershipFeature::Level(v as usize)))
                } else {
                    Err(E::custom(format!("anchor level {v} out of range 1..=4")))
                }
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<LevelSpec, E> {
                self.visit_i64(v as i64)
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<LevelSpec, E> {
                if v == "1-4" {
                    Ok(LevelSpec(MembershipFeature::ConcatAll))
                } else {
                    Err(E::custom(format!("anchor level `{v}` is not \"1-4\"")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// The whole protocol: modality encoders, fusion, multi-anchor LACCA.
    Full,
    /// Full structure, calibration disabled.
    NoLacca,
    /// Calibration with a single anchor per class.
    MonoAnchor,
    /// Classic FedAvg of the whole mono-architecture model across clients.
    FedavgAll,
    /// FedAvg of encoders only; decoders stay personal.
    FedEncoderOnly,
    /// FedAvg of decoders only; encoders stay personal.
    FedDecoderOnly,
    /// No federation at all: every site trains alone.
    LocalOnly,
}

impl AblationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoLacca => "no_lacca",
            AblationMode::MonoAnchor => "mono_anchor",
            AblationMode::FedavgAll => "fedavg_all",
            AblationMode::FedEncoderOnly => "fed_encoder_only",
            AblationMode::FedDecoderOnly => "fed_decoder_only",
            AblationMode::LocalOnly => "local_only",
        }
    }

    /// Modes that use the modality-specific multi-encoder architecture and a
    /// trained server (the protocol proper, with or without calibration).
    pub fn uses_fusion_server(&self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NoLacca | AblationMode::MonoAnchor)
    }

    /// Modes whose server holds and trains the fused multimodal model on its
    /// own data. Covers the protocol modes plus `local_only`, where the
    /// server-local model is the no-federation baseline.
    pub fn server_trains_fusion(&self) -> bool {
        self.uses_fusion_server() || matches!(self, AblationMode::LocalOnly)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("{e}")))?;
        cfg.normalized()
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Parse with `--set key.path=value` overrides applied on the TOML tree.
    pub fn load_with_overrides(path: &std::path::Path, sets: &[String]) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut tree: toml::Value =
            toml::from_str(&text).map_err(|e| Error::config(format!("{e}")))?;
        for s in sets {
            apply_override(&mut tree, s)?;
        }
        let cfg: ExperimentConfig = tree.try_into().map_err(|e| Error::config(format!("{e}")))?;
        cfg.normalized()
    }

    /// Copy with one `key.path=value` override applied through the schema.
    /// The result still needs `normalized()` before use.
    pub fn with_override(&self, kv: &str) -> Result<ExperimentConfig> {
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::config(format!("{e}")))?;
        apply_override(&mut tree, kv)?;
        tree.try_into().map_err(|e| Error::config(format!("{e}")))
    }

    /// Apply mode-implied switches and validate. The returned config is what
    /// actually runs (and what gets written into the run directory).
    pub fn normalized(mut self) -> Result<ExperimentConfig> {
        match self.ablation.mode {
            AblationMode::Full => {}
            AblationMode::NoLacca => self.lacca.enabled = false,
            AblationMode::MonoAnchor => self.lacca.multi_anchor = false,
            // Baselines have no server prototypes to calibrate against.
            AblationMode::FedavgAll
            | AblationMode::FedEncoderOnly
            | AblationMode::FedDecoderOnly
            | AblationMode::LocalOnly => self.lacca.enabled = false,
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.setting != 1 && d.setting != 2 {
            return Err(Error::config(format!("data.setting must be 1 or 2, got {}", d.setting)));
        }
        if d.samples_per_site == 0 {
            return Err(Error::config("data.samples_per_site must be positive"));
        }
        if !(1.0 / 3.0..=1.0).contains(&d.phenotype_skew) {
            return Err(Error::config(format!(
                "data.phenotype_skew must lie in [1/3, 1], got {}",
                d.phenotype_skew
            )));
        }
        self.net_config().validate()?;
        if self.model.num_classes != 4 {
            return Err(Error::config(format!(
                "model.num_classes must be 4 for the lesion generator, got {}",
                self.model.num_classes
            )));
        }
        if self.anchors.n_k == 0 || self.anchors.n_k > 16 {
            return Err(Error::config(format!("anchors.n_k must be in 1..=16, got {}", self.anchors.n_k)));
        }
        if !(0.0..1.0).contains(&self.anchors.omega) {
            return Err(Error::config(format!("anchors.omega must be in [0,1), got {}", self.anchors.omega)));
        }
        if self.lacca.enabled {
            crate::lacca::check_heads(self.model.base_width, self.lacca.heads)?;
        }
        if self.federation.rounds == 0 {
            return Err(Error::config("federation.rounds must be positive"));
        }
        if self.federation.clients_per_modality == 0 {
            return Err(Error::config("federation.clients_per_modality must be positive"));
        }
        if self.optim.lr < 0.0 || !self.optim.lr.is_finite() {
            return Err(Error::config(format!("optim.lr must be finite and non-negative, got {}", self.optim.lr)));
        }
        if self.optim.weight_decay < 0.0 {
            return Err(Error::config("optim.weight_decay must be non-negative"));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::config("optim.batch_size must be positive"));
        }
        if self.run.parallelism == 0 {
            return Err(Error::config("run.parallelism must be positive"));
        }
        if self.experiment.name.is_empty()
            || !self
                .experiment
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        {
            return Err(Error::config(format!(
                "experiment.name `{}` must be non-empty and filesystem-safe",
                self.experiment.name
            )));
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            base_width: self.model.base_width,
            num_classes: self.model.num_classes,
            image_size: self.data.image_size,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig::new(self.optim.lr, self.optim.weight_decay)
    }

    pub fn membership_feature(&self) -> MembershipFeature {
        self.anchors.level.0
    }

    /// Effective anchors per class (mono-anchor collapses to one).
    pub fn effective_n_k(&self) -> usize {
        if self.lacca.multi_anchor {
            self.anchors.n_k
        } else {
            1
        }
    }

    pub fn num_clients(&self) -> usize {
        4 * self.federation.clients_per_modality
    }

    /// Total generated training samples (server + clients).
    pub fn total_train_samples(&self) -> usize {
        self.data.samples_per_site * (self.num_clients() + 1)
    }

    pub fn run_dir(&self) -> std::path::PathBuf {
        std::path::Path::new(&self.run.out_dir).join(&self.experiment.name)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Apply one `key.path=value` override onto a TOML tree.
fn apply_override(tree: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override key `{path}` has empty segments")));
    }
    let value = parse_toml_scalar(raw);
    let mut cur = tree;
    for seg in &segments[..segments.len() - 1] {
        cur = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{path}`: `{seg}` is not a table")))?
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("`{path}` does not address a table entry")))?;
    table.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Interpret an override value: int, float, bool, then string.
fn parse_toml_scalar(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    toml::Value::String(raw.to_string())
}
