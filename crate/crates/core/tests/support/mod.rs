//! Tiny fixtures shared by the integration tests.

#![allow(dead_code)]

use semi_core::hypernet::{Episode, Frozen, HypernetConfig, HypernetParams};
use semi_core::numerics::{rng_for, DenseMatrix};
use semi_core::projector::ProjectorParams;
use semi_core::synth::{build_world, ConceptWorld, DecoderConfig, FrozenDecoder, FrozenTextEncoder, WorldConfig};

pub const D_H: usize = 8;
pub const D_HID: usize = 6;
pub const D_MODEL: usize = 16;

/// World, randomly initialised decoder and text encoder at tiny widths.
pub struct Tiny {
    pub world: ConceptWorld,
    pub decoder: FrozenDecoder,
    pub text: FrozenTextEncoder,
}

impl Tiny {
    pub fn new(seed: u64) -> Self {
        let world = build_world(&WorldConfig::default(), seed).unwrap();
        let cfg = DecoderConfig {
            d_model: D_MODEL,
            prefix_slots: 1,
            blocks: 1,
            ff_mult: 2,
        };
        let mut decoder = FrozenDecoder::init(world.vocab_size(), world.latent_dim(), &cfg, seed).unwrap();
        decoder.frozen = true;
        let text = FrozenTextEncoder::new(world.vocab_size(), D_H, 16, seed).unwrap();
        Self { world, decoder, text }
    }

    pub fn frozen<'a>(&'a self, psi: &'a ProjectorParams) -> Frozen<'a> {
        Frozen {
            world: &self.world,
            text: &self.text,
            decoder: &self.decoder,
            psi,
        }
    }

    /// `n` (instruction, caption) pairs from modality 0.
    pub fn supervision(&self, n: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let pool = self.world.instruction_pool(0);
        let k = self.world.concepts.len();
        let instr = (0..n).map(|i| pool[i % pool.len()].clone()).collect();
        let caps = (0..n)
            .map(|i| self.world.caption((seed as usize * 7 + i * 13) % k).to_vec())
            .collect();
        (instr, caps)
    }
}

/// Projector with every tensor, biases included, drawn at random.
pub fn random_projector(d_in: usize, d_hid: usize, seed: u64) -> ProjectorParams {
    let mut psi = ProjectorParams::init(d_in, d_hid, 1, D_MODEL, 0.0, seed).unwrap();
    let mut rng = rng_for(seed, 900);
    for (_, m) in psi.params.iter_mut() {
        *m = DenseMatrix::randn(m.rows(), m.cols(), 0.5, &mut rng);
    }
    psi
}

pub fn hypernet_config(context: usize, layers: usize) -> HypernetConfig {
    HypernetConfig {
        d_h: D_H,
        rank: 2,
        alpha: 4.0,
        context,
        depth: 1,
        dropout: 0.0,
        adapter_layers: layers,
        positional: true,
    }
}

/// Hypernetwork with all tensors random, so every head carries gradient.
pub fn random_hypernet(cfg: &HypernetConfig, psi: &ProjectorParams, seed: u64) -> HypernetParams {
    let mut theta = HypernetParams::init(cfg, psi.d_in, psi.d_hid, psi.out_width(), seed).unwrap();
    let mut rng = rng_for(seed, 901);
    for (_, m) in theta.params.iter_mut() {
        *m = DenseMatrix::randn(m.rows(), m.cols(), 0.4, &mut rng);
    }
    theta
}

pub fn random_episode(d: usize, pairs: usize, seed: u64) -> Episode {
    let mut rng = rng_for(seed, 902);
    let mut v = || DenseMatrix::randn(1, d, 1.0, &mut rng).into_data();
    Episode {
        instruction: v(),
        pairs: (0..pairs).map(|_| (v(), v())).collect(),
    }
}
