//! Experiment configuration: one TOML file with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SemiError};
use crate::eval::{BenchmarkConfig, HeldOut};
use crate::hypernet::{FinetuneConfig, GenerationMode, HypernetConfig, HypernetTraining};
use crate::projector::ProjectorTraining;
use crate::synth::{DecoderConfig, DecoderTraining, EncoderFamily, WorldConfig};

/// Training encoders share the hypernetwork width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSetup {
    pub family: EncoderFamily,
    /// Modalities `0..train_modalities` are used for stages 1 and 2.
    pub train_modalities: usize,
    /// Encoder `m` is built from seed `train_seed + m`.
    pub train_seed: u64,
}

impl Default for EncoderSetup {
    fn default() -> Self {
        Self {
            family: EncoderFamily::default(),
            train_modalities: 3,
            train_seed: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { max_len: 16, seed: 0 }
    }
}

/// Hypernetwork variants compared by the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoText,
    NoIso,
    NoTextNoIso,
    LargerHypernet,
    LargerContext,
    TwoLayerAdapters,
    SingleAdapter,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Full,
        AblationVariant::NoText,
        AblationVariant::NoIso,
        AblationVariant::NoTextNoIso,
        AblationVariant::LargerHypernet,
        AblationVariant::LargerContext,
        AblationVariant::TwoLayerAdapters,
        AblationVariant::SingleAdapter,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "Full",
            AblationVariant::NoText => "w/o Text",
            AblationVariant::NoIso => "w/o IsoTransf",
            AblationVariant::NoTextNoIso => "w/o Text & IsoTransf",
            AblationVariant::LargerHypernet => "w/ Larger Hypernet",
            AblationVariant::LargerContext => "w/ Larger Ctx Len",
            AblationVariant::TwoLayerAdapters => "Adapter Layers 2",
            AblationVariant::SingleAdapter => "Single Adapter",
        }
    }

    /// Hypernetwork shape, Stage-2 toggles and generation mode for this variant.
    pub fn apply(self, base: &HypernetConfig, train: &HypernetTraining) -> (HypernetConfig, HypernetTraining, GenerationMode) {
        let (mut h, mut t, mut g) = (base.clone(), train.clone(), GenerationMode::Averaged);
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoText => t.text_grounding = false,
            AblationVariant::NoIso => t.iso_transforms = false,
            AblationVariant::NoTextNoIso => {
                t.text_grounding = false;
                t.iso_transforms = false;
            }
            AblationVariant::LargerHypernet => h.depth = base.depth + 1,
            AblationVariant::LargerContext => h.context = base.context * 2,
            AblationVariant::TwoLayerAdapters => h.adapter_layers = 2,
            AblationVariant::SingleAdapter => g = GenerationMode::Single,
        }
        (h, t, g)
    }

    /// Variants that reuse another variant's trained hypernetwork.
    pub fn shares_weights_with(self) -> AblationVariant {
        match self {
            AblationVariant::SingleAdapter => AblationVariant::Full,
            v => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<AblationVariant>,
    pub held_out: HeldOut,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Overrides the Stage-2 step count for every variant.
    pub stage2_steps: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: AblationVariant::ALL.to_vec(),
            held_out: HeldOut {
                modality: 3,
                enc_dim: 64,
                seed: 5000,
            },
            shots: vec![8, 32],
            seeds: vec![0, 1, 2],
            stage2_steps: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for the world, decoder and stage runs.
    pub seed: u64,
    pub world: WorldConfig,
    pub encoders: EncoderSetup,
    pub text: TextConfig,
    pub decoder: DecoderConfig,
    pub decoder_training: DecoderTraining,
    pub stage1: ProjectorTraining,
    pub hypernet: HypernetConfig,
    pub stage2: HypernetTraining,
    pub finetune: FinetuneConfig,
    pub benchmark: BenchmarkConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    /// Parses a possibly partial file; absent keys, including fields of a
    /// partially given optimizer block, keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SemiError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Parses `text` after applying `key.path=value` overrides. Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let given: toml::Table = toml::from_str(text).map_err(|e| SemiError::Config(e.to_string()))?;
        let mut root = toml::Table::try_from(Self::default()).map_err(|e| SemiError::Config(e.to_string()))?;
        merge_tables(&mut root, given);
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| SemiError::Config(format!("override {item:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, path) = parts.split_last().expect("split yields one part");
            let mut table = &mut root;
            for p in path {
                let entry = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| SemiError::Config(format!("{key}: {p} is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| SemiError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SemiError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.encoders.family.validate()?;
        self.hypernet.validate()?;
        self.stage1.optimizer.validate()?;
        self.stage2.optimizer.validate()?;
        self.finetune.optimizer.validate()?;
        self.finetune.scratch_optimizer.validate()?;
        let bad = |m: String| Err(SemiError::Config(m));
        if self.encoders.train_modalities < 2 {
            return bad("at least two training modalities are needed".into());
        }
        let pools = self.world.instruction_pools;
        let held = self.benchmark.held_out.iter().chain([&self.ablation.held_out]);
        for h in held {
            if h.modality < self.encoders.train_modalities || h.modality >= pools {
                return bad(format!(
                    "held-out modality {} must lie in {}..{pools}",
                    h.modality, self.encoders.train_modalities
                ));
            }
            if h.enc_dim < 4 {
                return bad(format!("held-out encoder width {} < 4", h.enc_dim));
            }
        }
        if self.encoders.train_modalities > pools {
            return bad(format!("{} training modalities but {pools} instruction pools", self.encoders.train_modalities));
        }
        if self.stage1.steps == 0 || self.stage1.batch == 0 || self.stage1.hidden == 0 {
            return bad("stage1 steps, batch and hidden width must be positive".into());
        }
        if self.stage2.batch == 0 || self.stage2.eval_episodes == 0 {
            return bad("stage2 batch and eval_episodes must be positive".into());
        }
        if self.finetune.batch == 0 || self.finetune.max_decode_len == 0 || self.finetune.lora_rank == 0 {
            return bad("finetune batch, max_decode_len and lora_rank must be positive".into());
        }
        if self.text.max_len < self.world.max_caption_len + 1 {
            return bad("text encoder cannot hold a full caption".into());
        }
        let b = &self.benchmark;
        if b.shots.is_empty() || b.seeds.is_empty() || b.methods.is_empty() || b.held_out.is_empty() {
            return bad("benchmark grid has an empty axis".into());
        }
        if !b.shots.windows(2).all(|w| w[0] < w[1]) || b.shots[0] == 0 || !b.shots.contains(&b.cka_shots) {
            return bad(format!("invalid shot ladder {:?} (cka at {})", b.shots, b.cka_shots));
        }
        let a = &self.ablation;
        if a.variants.is_empty() || a.shots.is_empty() || a.seeds.is_empty() || a.shots.contains(&0) {
            return bad("ablation grid has an empty axis".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; embedded in every artifact.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical))
    }
}

/// Recursively overlays `top` onto `base`; arrays and scalars replace.
fn merge_tables(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
