use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::world::{ConceptWorld, Split};
use crate::error::{Result, SemiError};
use crate::numerics::{rng_for, DenseMatrix};

/// How a family of synthetic encoders relates to the shared concept space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderFamily {
    /// Weight of the world-wide map component; the rest is modality specific.
    pub shared_fraction: f64,
    /// Standard deviation of the per-encoder offset before the nonlinearity.
    pub offset_scale: f64,
    /// Additive Gaussian noise on encoder outputs.
    pub noise_scale: f64,
}

impl Default for EncoderFamily {
    fn default() -> Self {
        Self {
            shared_fraction: 0.5,
            offset_scale: 0.5,
            noise_scale: 0.1,
        }
    }
}

impl EncoderFamily {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shared_fraction) || self.offset_scale < 0.0 || self.noise_scale < 0.0 {
            return Err(SemiError::Config(format!("invalid encoder family {self:?}")));
        }
        Ok(())
    }
}

/// A frozen modality encoder: `tanh(M z + c)` plus output noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEncoder {
    pub modality: usize,
    pub out_dim: usize,
    pub map: DenseMatrix,
    pub offset: Vec<f64>,
    pub noise_scale: f64,
    pub seed: u64,
    /// Clean embedding of every concept, `[K x out_dim]`.
    clean: DenseMatrix,
}

const MAX_RETRIES: u64 = 8;

pub fn make_encoder(
    world: &ConceptWorld,
    modality: usize,
    out_dim: usize,
    seed: u64,
    family: &EncoderFamily,
) -> Result<SyntheticEncoder> {
    if out_dim < 4 {
        return Err(SemiError::Config(format!("encoder output dim {out_dim} < 4")));
    }
    family.validate()?;
    let d = world.latent_dim();
    let std = 1.0 / (d as f64).sqrt();
    let shared = DenseMatrix::randn(out_dim, d, std, &mut rng_for(world.seed ^ 0x5eed_5eed, out_dim as u64));
    for attempt in 0..MAX_RETRIES {
        let mut rng = rng_for(seed, 100 + attempt);
        let own = DenseMatrix::randn(out_dim, d, std, &mut rng);
        let (ws, wo) = (family.shared_fraction.sqrt(), (1.0 - family.shared_fraction).sqrt());
        let map = shared.zip_map(&own, |a, b| ws * a + wo * b);
        let offset: Vec<f64> = (0..out_dim)
            .map(|_| family.offset_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut enc = SyntheticEncoder {
            modality,
            out_dim,
            map,
            offset,
            noise_scale: family.noise_scale,
            seed,
            clean: DenseMatrix::zeros(0, 0),
        };
        let rows: Vec<Vec<f64>> = world.concepts.iter().map(|c| enc.encode_latent(&c.latent)).collect();
        enc.clean = DenseMatrix::from_rows(&rows)?;
        if enc.min_pairwise_distance() > 4.0 * family.noise_scale {
            return Ok(enc);
        }
    }
    Err(SemiError::Generation(format!(
        "no encoder with separated concepts after {MAX_RETRIES} attempts (seed {seed})"
    )))
}

impl SyntheticEncoder {
    pub fn encode_latent(&self, z: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|i| {
                let u: f64 = self.map.row(i).iter().zip(z).map(|(a, b)| a * b).sum();
                (u + self.offset[i]).tanh()
            })
            .collect()
    }

    pub fn clean_embedding(&self, concept: usize) -> &[f64] {
        self.clean.row(concept)
    }

    pub fn clean_embeddings(&self) -> &DenseMatrix {
        &self.clean
    }

    pub fn encode<R: Rng + ?Sized>(&self, concept: usize, rng: &mut R) -> Vec<f64> {
        self.clean
            .row(concept)
            .iter()
            .map(|&c| c + self.noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let k = self.clean.rows();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                let d: f64 = self
                    .clean
                    .row(i)
                    .iter()
                    .zip(self.clean.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }
}

/// One paired example: encoder output, caption tokens (ending in EOS), concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub tokens: Vec<usize>,
    pub concept: usize,
}

pub fn sample_pair<R: Rng + ?Sized>(
    world: &ConceptWorld,
    encoder: &SyntheticEncoder,
    split: Split,
    rng: &mut R,
) -> Sample {
    let pool = world.split(split);
    let concept = pool[rng.random_range(0..pool.len())];
    Sample {
        x: encoder.encode(concept, rng),
        tokens: world.caption(concept).to_vec(),
        concept,
    }
}

pub fn sample_many<R: Rng + ?Sized>(
    world: &ConceptWorld,
    encoder: &SyntheticEncoder,
    split: Split,
    n: usize,
    rng: &mut R,
) -> Vec<Sample> {
    (0..n).map(|_| sample_pair(world, encoder, split, rng)).collect()
}

/// Stacks the encoder outputs of `samples` into a `[n x d]` matrix.
pub fn stack_inputs(samples: &[Sample]) -> Result<DenseMatrix> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    DenseMatrix::from_rows(&rows)
}
