//! Hypernetwork training over emulated encoders.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Episode, HypernetParams};
use crate::error::{Result, SemiError};
use crate::numerics::{rng_for, AdamW, DenseMatrix, GradContext, IsometricTransform, OptimizerConfig, Schedule, SemiRng};
use crate::projector::{caption_loss, project_graph, ProjectorParams, Supervision};
use crate::synth::{sample_pair, ConceptWorld, FrozenDecoder, FrozenTextEncoder, Split, SyntheticEncoder, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypernetTraining {
    pub steps: usize,
    /// Supervision batch size `B`.
    pub batch: usize,
    pub iso_transforms: bool,
    pub text_grounding: bool,
    /// Fixed validation episodes used to measure progress.
    pub eval_episodes: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for HypernetTraining {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            iso_transforms: true,
            text_grounding: true,
            eval_episodes: 24,
            optimizer: OptimizerConfig {
                lr: 1e-4,
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
                weight_decay: 5e-6,
                schedule: Schedule::WarmupCosine {
                    warmup: 100,
                    total: 2000,
                },
                clip_norm: 1.0,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub step: usize,
    pub modality: usize,
    pub loss: f64,
    pub q_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Frozen context shared by hypernetwork training and evaluation.
#[derive(Clone, Copy)]
pub struct Frozen<'a> {
    pub world: &'a ConceptWorld,
    pub text: &'a FrozenTextEncoder,
    pub decoder: &'a FrozenDecoder,
    pub psi: &'a ProjectorParams,
}

/// Text embedding of a caption, ignoring the EOS marker.
pub fn caption_embedding(text: &FrozenTextEncoder, tokens: &[usize]) -> Result<Vec<f64>> {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    text.encode(&tokens[..end.max(1)])
}

/// Builds the conditioning episode from modality embeddings (rows of `x`,
/// already `d_h` wide) and their captions. Without text grounding the
/// instruction and caption embeddings are zero vectors.
pub fn conditioning_episode(
    text: &FrozenTextEncoder,
    instruction: &[usize],
    x: &DenseMatrix,
    captions: &[Vec<usize>],
    text_grounding: bool,
) -> Result<Episode> {
    let d = text.dim();
    let zero = vec![0.0; d];
    let instruction = if text_grounding {
        text.encode(instruction)?
    } else {
        zero.clone()
    };
    let pairs = captions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let t = if text_grounding {
                caption_embedding(text, c)?
            } else {
                zero.clone()
            };
            Ok((x.row(i).to_vec(), t))
        })
        .collect::<Result<_>>()?;
    Ok(Episode { instruction, pairs })
}

/// One training episode: conditioning set and an independently drawn
/// supervision batch, both passed through the same transform.
pub struct Stage2Episode {
    pub modality: usize,
    pub episode: Episode,
    pub x: DenseMatrix,
    pub instructions: Vec<Vec<usize>>,
    pub captions: Vec<Vec<usize>>,
    pub q_seed: Option<u64>,
}

impl Stage2Episode {
    pub fn supervision(&self) -> Vec<Supervision<'_>> {
        self.instructions
            .iter()
            .zip(&self.captions)
            .map(|(i, c)| Supervision {
                instruction: i,
                caption: c,
            })
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn draw_stage2_episode(
    frozen: &Frozen<'_>,
    encoder: &SyntheticEncoder,
    context: usize,
    batch: usize,
    text_grounding: bool,
    q: &IsometricTransform,
    split: Split,
    rng: &mut SemiRng,
) -> Result<Stage2Episode> {
    if q.dim != encoder.out_dim {
        return Err(SemiError::Config(format!(
            "transform of dim {} for encoder of dim {}",
            q.dim, encoder.out_dim
        )));
    }
    let world = frozen.world;
    let pool = world.instruction_pool(encoder.modality);
    let instruction = pool.choose(rng).expect("non-empty pool").clone();
    let draw = |n: usize, rng: &mut SemiRng| -> Result<(DenseMatrix, Vec<Vec<usize>>)> {
        let samples: Vec<_> = (0..n).map(|_| sample_pair(world, encoder, split, rng)).collect();
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| q.apply(&s.x)).collect();
        let x = if rows.is_empty() {
            DenseMatrix::zeros(0, encoder.out_dim)
        } else {
            DenseMatrix::from_rows(&rows)?
        };
        Ok((x, samples.into_iter().map(|s| s.tokens).collect()))
    };
    let (cx, ccap) = draw(context, rng)?;
    let episode = conditioning_episode(frozen.text, &instruction, &cx, &ccap, text_grounding)?;
    let (x, captions) = draw(batch, rng)?;
    let instructions = (0..batch).map(|_| pool.choose(rng).expect("non-empty pool").clone()).collect();
    Ok(Stage2Episode {
        modality: encoder.modality,
        episode,
        x,
        instructions,
        captions,
        q_seed: Some(q.seed),
    })
}

/// Records the loss of `psi + delta(theta, episode)` on the supervision
/// batch. `trainable` registers theta as parameters.
pub fn stage2_loss(
    ctx: &mut GradContext,
    theta: &HypernetParams,
    frozen: &Frozen<'_>,
    ep: &Stage2Episode,
    trainable: bool,
    rng: Option<&mut SemiRng>,
) -> Result<crate::numerics::Var> {
    let dec = frozen.decoder.bind(ctx, false)?;
    let pv = frozen.psi.bind(ctx, "projector", false)?;
    let hv = theta.bind(ctx, trainable)?;
    let g = theta.forward_graph(ctx, &hv, &ep.episode, rng)?;
    let x = ctx.constant(ep.x.clone());
    let out = project_graph(ctx, &pv, x, Some(g.delta1), g.delta2, None)?;
    caption_loss(ctx, &dec, out, frozen.psi.prefix_slots, frozen.psi.d_out, &ep.supervision())
}

fn sample_transform(dim: usize, iso: bool, rng: &mut SemiRng, seen: &mut HashSet<u64>) -> Result<IsometricTransform> {
    if !iso {
        return Ok(IsometricTransform::identity(dim));
    }
    let mut seed: u64 = rng.random();
    while !seen.insert(seed) {
        seed = rng.random();
    }
    IsometricTransform::from_seed(dim, seed)
}

/// Mean eval-mode loss over a fixed set of validation episodes.
pub fn stage2_eval_loss(
    theta: &HypernetParams,
    frozen: &Frozen<'_>,
    encoders: &[SyntheticEncoder],
    cfg: &HypernetTraining,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng_for(seed, 41);
    let mut seen = HashSet::new();
    let mut total = 0.0;
    for i in 0..cfg.eval_episodes {
        let enc = &encoders[i % encoders.len()];
        let q = sample_transform(enc.out_dim, cfg.iso_transforms, &mut rng, &mut seen)?;
        let ep = draw_stage2_episode(
            frozen,
            enc,
            theta.config.context,
            cfg.batch,
            cfg.text_grounding,
            &q,
            Split::Val,
            &mut rng,
        )?;
        let mut ctx = GradContext::new();
        let loss = stage2_loss(&mut ctx, theta, frozen, &ep, false, None)?;
        total += ctx.value(loss).get(0, 0);
    }
    Ok(total / cfg.eval_episodes.max(1) as f64)
}

/// Trains the hypernetwork with the projector, decoder and encoders frozen.
pub fn train_hypernet(
    theta_init: &HypernetParams,
    frozen: &Frozen<'_>,
    encoders: &[SyntheticEncoder],
    cfg: &HypernetTraining,
    seed: u64,
) -> Result<(HypernetParams, Vec<Stage2Record>, Stage2Summary)> {
    cfg.optimizer.validate()?;
    if encoders.is_empty() {
        return Err(SemiError::Precondition("no training modalities".into()));
    }
    for e in encoders {
        if e.out_dim != theta_init.config.d_h || e.out_dim != frozen.psi.d_in {
            return Err(SemiError::Config(format!(
                "training encoder {} has dim {}, expected {}",
                e.modality, e.out_dim, theta_init.config.d_h
            )));
        }
    }
    let mut theta = theta_init.clone();
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = rng_for(seed, 42);
    let mut q_rng = rng_for(seed, 43);
    let mut drop_rng = rng_for(seed, 44);
    let mut seen = HashSet::new();
    let initial_val_loss = stage2_eval_loss(&theta, frozen, encoders, cfg, seed)?;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let enc = &encoders[rng.random_range(0..encoders.len())];
        let q = sample_transform(enc.out_dim, cfg.iso_transforms, &mut q_rng, &mut seen)?;
        let mut ep = draw_stage2_episode(
            frozen,
            enc,
            theta.config.context,
            cfg.batch,
            cfg.text_grounding,
            &q,
            Split::Train,
            &mut rng,
        )?;
        if !cfg.iso_transforms {
            ep.q_seed = None;
        }
        let mut ctx = GradContext::new();
        let loss = stage2_loss(&mut ctx, &theta, frozen, &ep, true, Some(&mut drop_rng))?;
        let value = ctx.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(SemiError::Diverged {
                step,
                last_good: Box::new(theta.params.clone()),
            });
        }
        log.push(Stage2Record {
            step,
            modality: enc.modality,
            loss: value,
            q_seed: ep.q_seed,
        });
        let grads = ctx.backward(loss)?.into_params().strip_prefix("hypernet");
        opt.step(&mut theta.params, &grads)?;
    }
    let final_val_loss = stage2_eval_loss(&theta, frozen, encoders, cfg, seed)?;
    Ok((
        theta,
        log,
        Stage2Summary {
            initial_val_loss,
            final_val_loss,
        },
    ))
}
