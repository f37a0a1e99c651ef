//! Tiny causal transformer standing in for the frozen language model.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{ConceptWorld, BOS, EOS};
use crate::error::{Result, SemiError};
use crate::numerics::functions::gelu_approx;
use crate::numerics::nn::{attention_block_plain, batched_attention_block, layer_norm_plain, linear, AttentionVars, LN_EPS};
use crate::numerics::{rng_for, sinusoidal_pe, AdamW, DenseMatrix, GradContext, OptimizerConfig, Params, Schedule, Var};

/// Positions reserved for prefix, instruction and caption.
const MAX_POSITIONS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub prefix_slots: usize,
    pub blocks: usize,
    pub ff_mult: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            prefix_slots: 1,
            blocks: 2,
            ff_mult: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Gaussian noise added to ideal prefixes during training.
    pub prefix_noise: f64,
    pub eval_every: usize,
    pub target_accuracy: f64,
}

impl Default for DecoderTraining {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 32,
            lr: 2e-3,
            prefix_noise: 0.3,
            eval_every: 250,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenDecoder {
    pub config: DecoderConfig,
    pub vocab: usize,
    pub params: Params,
    /// Fixed linear embedding of concept latents into prefix space,
    /// `[P*d_model x latent_dim]`.
    pub ideal_map: DenseMatrix,
    pub frozen: bool,
}

/// Graph handles for the decoder weights.
pub struct DecoderVars {
    tok_emb: Var,
    blocks: Vec<BlockVars>,
    head: Var,
    positions: DenseMatrix,
    prefix_slots: usize,
}

struct BlockVars {
    attn: AttentionVars,
    fc1: Var,
    fb1: Var,
    fc2: Var,
    fb2: Var,
}

/// One teacher-forced example: decoder input is
/// `prefix ++ instruction ++ [BOS] ++ caption[..n-1]`, targets are `caption`.
pub struct TeacherForced<'a> {
    pub prefix: Var,
    pub instruction: &'a [usize],
    pub caption: &'a [usize],
}

impl FrozenDecoder {
    pub fn init(vocab: usize, latent_dim: usize, config: &DecoderConfig, seed: u64) -> Result<Self> {
        if !config.d_model.is_multiple_of(2) || config.prefix_slots == 0 || config.blocks == 0 {
            return Err(SemiError::Config(format!("invalid decoder config {config:?}")));
        }
        let mut rng = rng_for(seed, 11);
        let d = config.d_model;
        let f = d * config.ff_mult;
        let s = 1.0 / (d as f64).sqrt();
        let mut params = Params::new();
        params.insert("tok_emb", DenseMatrix::randn(vocab, d, 1.0, &mut rng));
        for b in 0..config.blocks {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("b{b}.{w}"), DenseMatrix::randn(d, d, s, &mut rng));
            }
            params.insert(format!("b{b}.fc1"), DenseMatrix::randn(f, d, s, &mut rng));
            params.insert(format!("b{b}.fb1"), DenseMatrix::zeros(1, f));
            params.insert(format!("b{b}.fc2"), DenseMatrix::randn(d, f, 1.0 / (f as f64).sqrt(), &mut rng));
            params.insert(format!("b{b}.fb2"), DenseMatrix::zeros(1, d));
        }
        params.insert("head", DenseMatrix::randn(d, vocab, s, &mut rng));
        let ideal_map = DenseMatrix::randn(
            config.prefix_slots * d,
            latent_dim,
            1.0 / (latent_dim as f64).sqrt(),
            &mut rng_for(seed, 12),
        );
        Ok(Self {
            config: config.clone(),
            vocab,
            params,
            ideal_map,
            frozen: false,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn prefix_slots(&self) -> usize {
        self.config.prefix_slots
    }

    /// Flattened prefix width `P * d_model`.
    pub fn prefix_width(&self) -> usize {
        self.config.prefix_slots * self.config.d_model
    }

    /// `[P x d_model]` ideal prefix of a latent.
    pub fn ideal_prefix(&self, latent: &[f64]) -> DenseMatrix {
        let flat: Vec<f64> = (0..self.ideal_map.rows())
            .map(|i| self.ideal_map.row(i).iter().zip(latent).map(|(a, b)| a * b).sum())
            .collect();
        DenseMatrix::from_vec(self.config.prefix_slots, self.config.d_model, flat)
            .expect("ideal map rows = P * d_model")
    }

    /// Registers the weights in `ctx`: as parameters when `trainable`,
    /// otherwise as constants that never receive gradients.
    pub fn bind(&self, ctx: &mut GradContext, trainable: bool) -> Result<DecoderVars> {
        let mut get = |name: &str| -> Result<Var> {
            let v = self.params.get(name)?.clone();
            if trainable {
                ctx.param(&format!("decoder.{name}"), v)
            } else {
                Ok(ctx.constant(v))
            }
        };
        let tok_emb = get("tok_emb")?;
        let mut blocks = Vec::with_capacity(self.config.blocks);
        for b in 0..self.config.blocks {
            blocks.push(BlockVars {
                attn: AttentionVars {
                    wq: get(&format!("b{b}.wq"))?,
                    wk: get(&format!("b{b}.wk"))?,
                    wv: get(&format!("b{b}.wv"))?,
                    wo: get(&format!("b{b}.wo"))?,
                },
                fc1: get(&format!("b{b}.fc1"))?,
                fb1: get(&format!("b{b}.fb1"))?,
                fc2: get(&format!("b{b}.fc2"))?,
                fb2: get(&format!("b{b}.fb2"))?,
            });
        }
        let head = get("head")?;
        Ok(DecoderVars {
            tok_emb,
            blocks,
            head,
            positions: sinusoidal_pe(MAX_POSITIONS, self.config.d_model)?,
            prefix_slots: self.config.prefix_slots,
        })
    }

    /// Logits for the next token after `generated`, without recording a graph.
    pub fn next_token_logits(&self, prefix: &DenseMatrix, instruction: &[usize], generated: &[usize]) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        if prefix.shape() != (self.config.prefix_slots, d) {
            return Err(SemiError::Shape(format!(
                "prefix {:?}, decoder expects {}x{d}",
                prefix.shape(),
                self.config.prefix_slots
            )));
        }
        let mut tokens = instruction.to_vec();
        tokens.push(BOS);
        tokens.extend_from_slice(generated);
        let t = prefix.rows() + tokens.len();
        if t > MAX_POSITIONS {
            return Err(SemiError::InputDomain(format!("sequence of {t} positions is too long")));
        }
        let emb = self.params.get("tok_emb")?;
        let pe = sinusoidal_pe(t, d)?;
        let mut x = DenseMatrix::zeros(t, d);
        for i in 0..t {
            let src = if i < prefix.rows() {
                prefix.row(i)
            } else {
                let tok = tokens[i - prefix.rows()];
                if tok >= self.vocab {
                    return Err(SemiError::InputDomain(format!("token {tok} outside vocabulary")));
                }
                emb.row(tok)
            };
            for ((o, s), p) in x.row_mut(i).iter_mut().zip(src).zip(pe.row(i)) {
                *o = s + p;
            }
        }
        for b in 0..self.config.blocks {
            let g = |n: &str| self.params.get(&format!("b{b}.{n}"));
            x = attention_block_plain(&x, g("wq")?, g("wk")?, g("wv")?, g("wo")?, true)?;
            let h = layer_norm_plain(&x);
            let mut f = h.matmul_t(g("fc1")?)?;
            let fb1 = g("fb1")?;
            for i in 0..f.rows() {
                for (v, b) in f.row_mut(i).iter_mut().zip(fb1.data()) {
                    *v = gelu_approx(*v + b);
                }
            }
            let mut o = f.matmul_t(g("fc2")?)?;
            let fb2 = g("fb2")?;
            for i in 0..o.rows() {
                for (v, b) in o.row_mut(i).iter_mut().zip(fb2.data()) {
                    *v += b;
                }
            }
            x = x.add(&o)?;
        }
        let last = layer_norm_plain(&x.slice_rows(t - 1, t));
        Ok(last.matmul(self.params.get("head")?)?.into_data())
    }

    /// Exact-match rate of greedy decoding from ideal prefixes over `concepts`.
    pub fn ideal_prefix_accuracy(&self, world: &ConceptWorld, concepts: &[usize], max_len: usize) -> Result<f64> {
        let instruction = &world.instruction_pool(0)[0];
        let mut hits = 0;
        for &c in concepts {
            let prefix = self.ideal_prefix(&world.concepts[c].latent);
            let out = greedy(self, &prefix, instruction, max_len)?;
            if out == world.caption(c) {
                hits += 1;
            }
        }
        Ok(hits as f64 / concepts.len().max(1) as f64)
    }
}

/// Argmax decoding; ties go to the lowest token id. Output includes the
/// terminating EOS when one is produced.
pub(crate) fn greedy(dec: &FrozenDecoder, prefix: &DenseMatrix, instruction: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(max_len);
    while out.len() < max_len {
        let logits = dec.next_token_logits(prefix, instruction, &out)?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        out.push(best);
        if best == EOS {
            break;
        }
    }
    Ok(out)
}

impl DecoderVars {
    /// Mean next-token cross-entropy over all caption positions of the batch.
    pub fn teacher_forced_loss(&self, ctx: &mut GradContext, examples: &[TeacherForced<'_>]) -> Result<Var> {
        let (logits, targets) = self.teacher_forced_logits(ctx, examples)?;
        ctx.cross_entropy(logits, &targets)
    }

    pub fn teacher_forced_logits(&self, ctx: &mut GradContext, examples: &[TeacherForced<'_>]) -> Result<(Var, Vec<usize>)> {
        if examples.is_empty() {
            return Err(SemiError::InputDomain("empty decoder batch".into()));
        }
        let mut seqs = Vec::with_capacity(examples.len());
        let mut segments = Vec::with_capacity(examples.len());
        let mut target_rows = Vec::with_capacity(examples.len());
        let mut targets = Vec::new();
        let mut start = 0;
        for ex in examples {
            if ex.caption.is_empty() {
                return Err(SemiError::InputDomain("empty caption".into()));
            }
            let pv = ctx.value(ex.prefix);
            if pv.rows() != self.prefix_slots {
                return Err(SemiError::Shape(format!("prefix has {} rows, expected {}", pv.rows(), self.prefix_slots)));
            }
            let mut tokens = ex.instruction.to_vec();
            tokens.push(BOS);
            tokens.extend_from_slice(&ex.caption[..ex.caption.len() - 1]);
            let emb = ctx.gather_rows(self.tok_emb, &tokens)?;
            let seq = ctx.concat_rows(&[ex.prefix, emb])?;
            let t = self.prefix_slots + tokens.len();
            if t > self.positions.rows() {
                return Err(SemiError::InputDomain(format!("sequence of {t} positions is too long")));
            }
            let pe = ctx.constant(self.positions.slice_rows(0, t));
            seqs.push(ctx.add(seq, pe)?);
            segments.push((start, t));
            let first_target = start + self.prefix_slots + ex.instruction.len();
            target_rows.push((first_target, first_target + ex.caption.len()));
            targets.extend_from_slice(ex.caption);
            start += t;
        }
        let mut x = if seqs.len() == 1 { seqs[0] } else { ctx.concat_rows(&seqs)? };
        for block in &self.blocks {
            x = batched_attention_block::<rand_chacha::ChaCha8Rng>(ctx, x, block.attn, &segments, true, None)?;
            let h = ctx.layer_norm(x, LN_EPS);
            let f = linear(ctx, h, block.fc1, block.fb1)?;
            let f = ctx.gelu(f);
            let o = linear(ctx, f, block.fc2, block.fb2)?;
            x = ctx.add(x, o)?;
        }
        let picked: Vec<Var> = target_rows
            .iter()
            .map(|&(a, b)| ctx.slice_rows(x, a, b))
            .collect::<Result<_>>()?;
        let sel = if picked.len() == 1 { picked[0] } else { ctx.concat_rows(&picked)? };
        let h = ctx.layer_norm(sel, LN_EPS);
        let logits = ctx.matmul(h, self.head)?;
        Ok((logits, targets))
    }
}

/// Trains the stand-in language model on `(ideal prefix, caption)` pairs
/// for every concept, then freezes it. Fails if greedy decoding from clean
/// ideal prefixes does not reach the target exact-match rate.
pub fn pretrain_frozen_decoder(
    world: &ConceptWorld,
    config: &DecoderConfig,
    training: &DecoderTraining,
    seed: u64,
) -> Result<FrozenDecoder> {
    let mut dec = FrozenDecoder::init(world.vocab_size(), world.latent_dim(), config, seed)?;
    let mut rng = rng_for(seed, 13);
    let mut opt = AdamW::new(OptimizerConfig {
        lr: training.lr,
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-8,
        weight_decay: 0.0,
        schedule: Schedule::WarmupCosine {
            warmup: training.steps / 20,
            total: training.steps,
        },
        clip_norm: 1.0,
    });
    let all: Vec<usize> = (0..world.concepts.len()).collect();
    let max_len = world.config.max_caption_len;
    let mut best = 0.0;
    for step in 0..training.steps {
        let mut ctx = GradContext::new();
        let vars = dec.bind(&mut ctx, true)?;
        let mut chosen = Vec::with_capacity(training.batch);
        for _ in 0..training.batch {
            let c = all[rng.random_range(0..all.len())];
            let pool = world.instruction_pool(rng.random_range(0..world.instructions.len()));
            let instr = pool.choose(&mut rng).expect("non-empty pool").clone();
            let mut prefix = dec.ideal_prefix(&world.concepts[c].latent);
            let noise = DenseMatrix::randn(prefix.rows(), prefix.cols(), training.prefix_noise, &mut rng);
            prefix.add_assign(&noise)?;
            chosen.push((ctx.constant(prefix), instr, c));
        }
        let examples: Vec<TeacherForced<'_>> = chosen
            .iter()
            .map(|(p, instr, c)| TeacherForced {
                prefix: *p,
                instruction: instr,
                caption: world.caption(*c),
            })
            .collect();
        let loss = vars.teacher_forced_loss(&mut ctx, &examples)?;
        let lv = ctx.value(loss).get(0, 0);
        if !lv.is_finite() {
            return Err(SemiError::Training(format!("decoder loss diverged at step {step}")));
        }
        let grads = ctx.backward(loss)?.into_params().strip_prefix("decoder");
        opt.step(&mut dec.params, &grads)?;
        if (step + 1) % training.eval_every == 0 || step + 1 == training.steps {
            best = dec.ideal_prefix_accuracy(world, &all, max_len)?;
            log::debug!("decoder step {} loss {lv:.4} exact {best:.3}", step + 1);
            if best >= 1.0 {
                break;
            }
        }
    }
    if best < training.target_accuracy {
        return Err(SemiError::Training(format!(
            "decoder reached {best:.3} exact-match, below target {}",
            training.target_accuracy
        )));
    }
    dec.frozen = true;
    Ok(dec)
}
