use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemiError};
use crate::numerics::{rng_for, DenseMatrix};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const INSTRUCTION_WORDS: [&str; 8] = [
    "describe", "caption", "summarize", "explain", "the", "this", "signal", "input",
];
const FILLERS: [&str; 3] = ["with", "and", "near"];

/// Caption layouts; `None` marks an attribute slot, `Some(i)` a filler word.
const TEMPLATES: [&[Option<usize>]; 3] = [
    &[None, None, None],
    &[None, Some(0), None, None],
    &[None, None, Some(1), None],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Number of concepts `K`.
    pub concepts: usize,
    pub attributes: usize,
    pub values_per_attribute: usize,
    pub latent_dim: usize,
    pub max_caption_len: usize,
    /// Number of instruction pools (one per modality the world serves).
    pub instruction_pools: usize,
    pub phrasings_per_pool: usize,
    /// Fraction of concepts in the validation and test splits.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            concepts: 200,
            attributes: 3,
            values_per_attribute: 6,
            latent_dim: 12,
            max_caption_len: 6,
            instruction_pools: 8,
            phrasings_per_pool: 2,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concepts < 4 {
            return Err(SemiError::Config(format!("need at least 4 concepts, got {}", self.concepts)));
        }
        let combos = self.values_per_attribute.pow(self.attributes as u32) * TEMPLATES.len();
        if self.concepts > combos {
            return Err(SemiError::Config(format!(
                "{} concepts exceed the {combos} distinct attribute combinations",
                self.concepts
            )));
        }
        if self.attributes == 0 || self.values_per_attribute < 2 || self.latent_dim == 0 {
            return Err(SemiError::Config("degenerate attribute space".into()));
        }
        if self.phrasings_per_pool < 2 || self.instruction_pools == 0 {
            return Err(SemiError::Config("each modality needs at least two instruction phrasings".into()));
        }
        if self.max_caption_len < self.attributes + 2 {
            return Err(SemiError::Config("max caption length too short for the templates".into()));
        }
        if !(0.0..0.5).contains(&self.val_fraction) || !(0.0..0.5).contains(&self.test_fraction) {
            return Err(SemiError::Config("split fractions must be in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        3 + INSTRUCTION_WORDS.len() + FILLERS.len() + self.attributes * self.values_per_attribute
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub attributes: Vec<usize>,
    pub template: usize,
    pub latent: Vec<f64>,
    pub caption: Vec<usize>,
}

/// The procedurally generated concept space every modality describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub concepts: Vec<Concept>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Instruction phrasings per pool, as token sequences.
    pub instructions: Vec<Vec<Vec<usize>>>,
    /// Per attribute, per value latent directions.
    attribute_vectors: Vec<Vec<Vec<f64>>>,
    template_vectors: Vec<Vec<f64>>,
}

pub fn build_world(config: &WorldConfig, seed: u64) -> Result<ConceptWorld> {
    config.validate()?;
    let mut rng = rng_for(seed, 1);
    let mut vocab: Vec<String> = ["<pad>", "<bos>", "<eos>"].iter().map(|s| s.to_string()).collect();
    vocab.extend(INSTRUCTION_WORDS.iter().map(|s| s.to_string()));
    vocab.extend(FILLERS.iter().map(|s| s.to_string()));
    for a in 0..config.attributes {
        for v in 0..config.values_per_attribute {
            vocab.push(format!("a{a}v{v}"));
        }
    }

    let d = config.latent_dim;
    let scale = 1.0 / ((config.attributes + 1) as f64).sqrt();
    let attribute_vectors: Vec<Vec<Vec<f64>>> = (0..config.attributes)
        .map(|_| {
            (0..config.values_per_attribute)
                .map(|_| DenseMatrix::randn(1, d, scale, &mut rng).into_data())
                .collect()
        })
        .collect();
    let template_vectors: Vec<Vec<f64>> = (0..TEMPLATES.len())
        .map(|_| DenseMatrix::randn(1, d, scale, &mut rng).into_data())
        .collect();

    // Distinct (attributes, template) combinations.
    let combos = config.values_per_attribute.pow(config.attributes as u32) * TEMPLATES.len();
    let mut order: Vec<usize> = (0..combos).collect();
    order.shuffle(&mut rng);
    let attr_word_base = 3 + INSTRUCTION_WORDS.len() + FILLERS.len();
    let filler_base = 3 + INSTRUCTION_WORDS.len();
    let concepts: Vec<Concept> = order[..config.concepts]
        .iter()
        .map(|&code| {
            let template = code % TEMPLATES.len();
            let mut rest = code / TEMPLATES.len();
            let attributes: Vec<usize> = (0..config.attributes)
                .map(|_| {
                    let v = rest % config.values_per_attribute;
                    rest /= config.values_per_attribute;
                    v
                })
                .collect();
            let mut latent = template_vectors[template].clone();
            for (a, &v) in attributes.iter().enumerate() {
                for (l, u) in latent.iter_mut().zip(&attribute_vectors[a][v]) {
                    *l += u;
                }
            }
            let caption = render_caption(&attributes, template, config.values_per_attribute, attr_word_base, filler_base);
            Concept {
                attributes,
                template,
                latent,
                caption,
            }
        })
        .collect();

    let mut ids: Vec<usize> = (0..config.concepts).collect();
    ids.shuffle(&mut rng);
    let n_val = ((config.concepts as f64 * config.val_fraction).round() as usize).max(1);
    let n_test = ((config.concepts as f64 * config.test_fraction).round() as usize).max(1);
    let test: Vec<usize> = ids[..n_test].to_vec();
    let val: Vec<usize> = ids[n_test..n_test + n_val].to_vec();
    let train: Vec<usize> = ids[n_test + n_val..].to_vec();
    if train.len() < 2 {
        return Err(SemiError::Config("training split would hold fewer than 2 concepts".into()));
    }

    let instruction_base = 3;
    let mut instructions = Vec::with_capacity(config.instruction_pools);
    for _ in 0..config.instruction_pools {
        let mut pool: Vec<Vec<usize>> = Vec::new();
        while pool.len() < config.phrasings_per_pool {
            let verb = instruction_base + rng.random_range(0..4);
            let noun = instruction_base + rng.random_range(4..INSTRUCTION_WORDS.len());
            let phrase = vec![verb, noun];
            if !pool.contains(&phrase) {
                pool.push(phrase);
            }
        }
        instructions.push(pool);
    }

    let world = ConceptWorld {
        config: config.clone(),
        seed,
        vocab,
        concepts,
        train,
        val,
        test,
        instructions,
        attribute_vectors,
        template_vectors,
    };
    for c in &world.concepts {
        if c.caption.len() > config.max_caption_len {
            return Err(SemiError::Config("caption exceeds max length".into()));
        }
    }
    Ok(world)
}

fn render_caption(
    attributes: &[usize],
    template: usize,
    values: usize,
    attr_word_base: usize,
    filler_base: usize,
) -> Vec<usize> {
    let mut next_attr = 0;
    let mut tokens = Vec::new();
    for slot in TEMPLATES[template] {
        match slot {
            Some(f) => tokens.push(filler_base + f),
            None => {
                tokens.push(attr_word_base + next_attr * values + attributes[next_attr]);
                next_attr += 1;
            }
        }
    }
    while next_attr < attributes.len() {
        tokens.push(attr_word_base + next_attr * values + attributes[next_attr]);
        next_attr += 1;
    }
    tokens.push(EOS);
    tokens
}

impl ConceptWorld {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn caption(&self, concept: usize) -> &[usize] {
        &self.concepts[concept].caption
    }

    pub fn instruction_pool(&self, modality: usize) -> &[Vec<usize>] {
        &self.instructions[modality % self.instructions.len()]
    }

    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.vocab.get(t).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.vocab
                    .iter()
                    .position(|v| v == w)
                    .ok_or_else(|| SemiError::InputDomain(format!("unknown word {w}")))
            })
            .collect()
    }

    /// Latent directions of the attribute values (used to rebuild latents).
    pub fn attribute_vector(&self, attribute: usize, value: usize) -> &[f64] {
        &self.attribute_vectors[attribute][value]
    }

    pub fn template_vector(&self, template: usize) -> &[f64] {
        &self.template_vectors[template]
    }
}
