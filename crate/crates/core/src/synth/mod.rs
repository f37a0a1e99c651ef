//! Procedural stand-ins for encoders, datasets and the frozen language model.

pub mod decoder;
pub mod encoder;
pub mod text;
pub mod world;

pub use decoder::{pretrain_frozen_decoder, DecoderConfig, DecoderTraining, DecoderVars, FrozenDecoder, TeacherForced};
pub use encoder::{make_encoder, sample_many, sample_pair, stack_inputs, EncoderFamily, Sample, SyntheticEncoder};
pub use text::FrozenTextEncoder;
pub use world::{build_world, ConceptWorld, Split, WorldConfig, BOS, EOS, PAD};
