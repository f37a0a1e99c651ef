//! Few-shot adaptation with generated adapters, and the baselines.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::HypernetParams;
use super::train::conditioning_episode;
use crate::adapters::{average_adapters, mean_delta, merge, merge_layer2, AdapterSet};
use crate::error::{Result, SemiError};
use crate::eval::{evaluate_projector, LabeledSet};
use crate::numerics::{rng_for, AdamW, DenseMatrix, GradContext, OptimizerConfig, Params, Schedule, SemiRng};
use crate::projector::{caption_loss, project_graph, projector_loss, ProjectorParams, Supervision};
use crate::synth::{FrozenDecoder, FrozenTextEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopping {
    /// Mean BLEU-4 of greedy decodes on the validation set.
    ValBleu,
    /// Eval-mode loss on the few-shot set itself.
    TrainLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// One adapter per context-sized chunk, averaged.
    Averaged,
    /// Only the first chunk.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 never stops early.
    pub patience: usize,
    pub early_stopping: EarlyStopping,
    pub max_decode_len: usize,
    pub optimizer: OptimizerConfig,
    /// Optimizer for the from-scratch projector.
    pub scratch_optimizer: OptimizerConfig,
    pub scratch_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let constant = OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-6,
            schedule: Schedule::Constant,
            clip_norm: 1.0,
        };
        Self {
            steps: 200,
            batch: 32,
            eval_every: 10,
            patience: 6,
            early_stopping: EarlyStopping::ValBleu,
            max_decode_len: 8,
            optimizer: constant.clone(),
            scratch_optimizer: OptimizerConfig {
                schedule: Schedule::WarmupCosine { warmup: 10, total: 200 },
                ..constant
            },
            scratch_hidden: 64,
            lora_rank: 8,
            lora_alpha: 8.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Trainable {
    Full,
    Lora { rank: usize, alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub psi: ProjectorParams,
    pub best_step: usize,
    pub steps_run: usize,
    /// `(step, metric)` at every evaluation; higher is better.
    pub history: Vec<(usize, f64)>,
}

fn metric(
    psi: &ProjectorParams,
    decoder: &FrozenDecoder,
    train: &LabeledSet,
    val: &LabeledSet,
    cfg: &FinetuneConfig,
) -> Result<f64> {
    match cfg.early_stopping {
        EarlyStopping::ValBleu => Ok(evaluate_projector(psi, decoder, val, cfg.max_decode_len)?.bleu4),
        EarlyStopping::TrainLoss => Ok(-projector_loss(psi, decoder, &train.x, &supervision(train))?),
    }
}

fn supervision(set: &LabeledSet) -> Vec<Supervision<'_>> {
    set.instructions
        .iter()
        .zip(&set.captions)
        .map(|(i, c)| Supervision {
            instruction: i,
            caption: c,
        })
        .collect()
}

fn materialise(psi: &ProjectorParams, lora: &Params, trainable: Trainable) -> Result<ProjectorParams> {
    match trainable {
        Trainable::Full => Ok(psi.clone()),
        Trainable::Lora { rank, alpha } => {
            let delta = lora.get("b")?.matmul(lora.get("a")?)?.scale(alpha / rank as f64);
            merge(psi, &delta)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fit(
    psi: &ProjectorParams,
    trainable: Trainable,
    decoder: &FrozenDecoder,
    train: &LabeledSet,
    val: &LabeledSet,
    cfg: &FinetuneConfig,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(SemiError::Precondition("few-shot set is empty".into()));
    }
    if train.x.cols() != psi.d_in {
        return Err(SemiError::Shape(format!(
            "few-shot inputs have {} features, projector expects {}",
            train.x.cols(),
            psi.d_in
        )));
    }
    optimizer.validate()?;
    let mut rng: SemiRng = rng_for(seed, 51);
    let mut base = psi.clone();
    let mut lora = Params::new();
    if let Trainable::Lora { rank, .. } = trainable {
        if rank == 0 || rank > psi.d_in.min(psi.d_hid) {
            return Err(SemiError::Config(format!("LoRA rank {rank} invalid for projector")));
        }
        lora.insert("a", DenseMatrix::randn(rank, psi.d_in, 1.0 / (psi.d_in as f64).sqrt(), &mut rng));
        lora.insert("b", DenseMatrix::zeros(psi.d_hid, rank));
    }
    let mut opt = AdamW::new(optimizer.clone());
    let eval_every = cfg.eval_every.max(1);
    let mut best = (metric(psi, decoder, train, val, cfg)?, 0usize, psi.clone());
    let mut history = vec![(0, best.0)];
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut steps_run = 0;
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = if train.len() <= cfg.batch {
            order.clone()
        } else {
            let mut picked = Vec::with_capacity(cfg.batch);
            while picked.len() < cfg.batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                picked.push(order[cursor]);
                cursor += 1;
            }
            picked
        };
        let batch = train.subset(&idx)?;
        let mut ctx = GradContext::new();
        let dec = decoder.bind(&mut ctx, false)?;
        let full = trainable == Trainable::Full;
        let pv = base.bind(&mut ctx, "projector", full)?;
        let delta = match trainable {
            Trainable::Full => None,
            Trainable::Lora { rank, alpha } => {
                let a = ctx.param("lora.a", lora.get("a")?.clone())?;
                let b = ctx.param("lora.b", lora.get("b")?.clone())?;
                let ba = ctx.matmul(b, a)?;
                Some(ctx.scale(ba, alpha / rank as f64))
            }
        };
        let x = ctx.constant(batch.x.clone());
        let out = project_graph(&mut ctx, &pv, x, delta, None, Some(&mut rng))?;
        let loss = caption_loss(&mut ctx, &dec, out, base.prefix_slots, base.d_out, &supervision(&batch))?;
        let value = ctx.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(SemiError::Diverged {
                step,
                last_good: Box::new(best.2.params.clone()),
            });
        }
        let grads = ctx.backward(loss)?.into_params();
        if full {
            opt.step(&mut base.params, &grads.strip_prefix("projector"))?;
        } else {
            opt.step(&mut lora, &grads.strip_prefix("lora"))?;
        }
        steps_run = step;
        if step % eval_every == 0 || step == cfg.steps {
            let current = materialise(&base, &lora, trainable)?;
            let m = metric(&current, decoder, train, val, cfg)?;
            history.push((step, m));
            if m > best.0 {
                best = (m, step, current);
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(FitOutcome {
        psi: best.2,
        best_step: best.1,
        steps_run,
        history,
    })
}

/// Generates one adapter per `context`-sized chunk of the few-shot set
/// (only the first chunk in single mode). `hyper_x` holds the modality
/// embeddings at hypernetwork width.
pub fn generate_adapters(
    theta: &HypernetParams,
    text: &FrozenTextEncoder,
    instruction: &[usize],
    hyper_x: &DenseMatrix,
    captions: &[Vec<usize>],
    text_grounding: bool,
    mode: GenerationMode,
) -> Result<AdapterSet> {
    let n = captions.len();
    if n == 0 || hyper_x.rows() != n {
        return Err(SemiError::Precondition("few-shot set is empty or inconsistent".into()));
    }
    let s = theta.config.context;
    if s == 0 {
        return Err(SemiError::Config("context size must be positive for generation".into()));
    }
    let chunks = n.div_ceil(s);
    let take = match mode {
        GenerationMode::Averaged => chunks,
        GenerationMode::Single => 1,
    };
    let mut set = AdapterSet::default();
    for c in 0..take {
        let idx: Vec<usize> = (c * s..((c + 1) * s).min(n)).collect();
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| hyper_x.row(i).to_vec()).collect();
        let caps: Vec<Vec<usize>> = idx.iter().map(|&i| captions[i].clone()).collect();
        let ep = conditioning_episode(text, instruction, &DenseMatrix::from_rows(&rows)?, &caps, text_grounding)?;
        let g = theta.forward(&ep)?;
        set.push(g.layer1, g.layer2, idx)?;
    }
    Ok(set)
}

/// Zero-pads (or passes through) rows to the hypernetwork width.
pub fn pad_to_width(x: &DenseMatrix, width: usize) -> Result<DenseMatrix> {
    if x.cols() > width {
        return Err(SemiError::Shape(format!("{} features exceed width {width}", x.cols())));
    }
    Ok(DenseMatrix::from_fn(x.rows(), width, |i, j| if j < x.cols() { x.get(i, j) } else { 0.0 }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub adapters: AdapterSet,
    /// `psi_base` with the averaged delta merged in.
    pub merged: ProjectorParams,
    pub fit: FitOutcome,
}

/// Generated-adapter adaptation: generate, average, merge into
/// `psi_base`, then fine-tune all merged projector parameters. When
/// `psi_base` is pruned, the delta keeps its leading input columns.
#[allow(clippy::too_many_arguments)]
pub fn adapt_few_shot(
    theta: &HypernetParams,
    text: &FrozenTextEncoder,
    decoder: &FrozenDecoder,
    psi_base: &ProjectorParams,
    fewshot: &LabeledSet,
    val: &LabeledSet,
    text_grounding: bool,
    mode: GenerationMode,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    let hyper_x = pad_to_width(&fewshot.x, theta.config.d_h)?;
    let instruction = &fewshot.instructions[0];
    let adapters = generate_adapters(theta, text, instruction, &hyper_x, &fewshot.captions, text_grounding, mode)?;
    let delta = average_adapters(&adapters)?;
    let keep: Vec<usize> = (0..psi_base.d_in).collect();
    let mut merged = merge(psi_base, &delta.select_columns(&keep)?)?;
    if !adapters.layer2.is_empty() {
        merged = merge_layer2(&merged, &mean_delta(&adapters.layer2)?)?;
    }
    let fit = fit(&merged, Trainable::Full, decoder, fewshot, val, cfg, &cfg.optimizer, seed)?;
    Ok(AdaptOutcome { adapters, merged, fit })
}

/// Fresh projector at the encoder's own width, trained on the few-shot set.
pub fn baseline_projector_scratch(
    decoder: &FrozenDecoder,
    fewshot: &LabeledSet,
    val: &LabeledSet,
    dropout: f64,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FitOutcome> {
    let d_e = fewshot.x.cols();
    let psi = ProjectorParams::init(
        d_e,
        cfg.scratch_hidden.min(d_e),
        decoder.prefix_slots(),
        decoder.d_model(),
        dropout,
        seed,
    )?;
    fit(&psi, Trainable::Full, decoder, fewshot, val, cfg, &cfg.scratch_optimizer, seed)
}

/// Full fine-tuning of the (pruned or input-reduced) shared projector.
pub fn baseline_ft_projector(
    psi_base: &ProjectorParams,
    decoder: &FrozenDecoder,
    fewshot: &LabeledSet,
    val: &LabeledSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FitOutcome> {
    fit(psi_base, Trainable::Full, decoder, fewshot, val, cfg, &cfg.optimizer, seed)
}

/// A trained first-layer LoRA on the frozen shared projector, merged.
pub fn baseline_lora(
    psi_base: &ProjectorParams,
    decoder: &FrozenDecoder,
    fewshot: &LabeledSet,
    val: &LabeledSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FitOutcome> {
    let trainable = Trainable::Lora {
        rank: cfg.lora_rank,
        alpha: cfg.lora_alpha,
    };
    fit(psi_base, trainable, decoder, fewshot, val, cfg, &cfg.optimizer, seed)
}
