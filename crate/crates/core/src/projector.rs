//! The shared two-layer GELU projector from encoder space to decoder prefixes.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::error::{Result, SemiError};
use crate::numerics::functions::gelu_approx;
use crate::numerics::nn::{dropout, linear};
use crate::numerics::{rng_for, AdamW, DenseMatrix, GradContext, OptimizerConfig, Params, Schedule, SemiRng, Var};
use crate::synth::{sample_pair, ConceptWorld, DecoderVars, FrozenDecoder, Split, SyntheticEncoder, TeacherForced};

/// Projector weights. `w1` is `[d_hid x d_in]`, `w2` is `[P*d_d x d_hid]`,
/// biases are row vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub params: Params,
    pub d_in: usize,
    pub d_hid: usize,
    pub prefix_slots: usize,
    pub d_out: usize,
    pub dropout: f64,
}

pub enum ForwardMode<'a> {
    Eval,
    Train(&'a mut SemiRng),
}

impl ProjectorParams {
    pub fn init(d_in: usize, d_hid: usize, prefix_slots: usize, d_out: usize, dropout: f64, seed: u64) -> Result<Self> {
        if d_in == 0 || d_hid == 0 || prefix_slots == 0 || d_out == 0 {
            return Err(SemiError::Config("projector dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(SemiError::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut rng = rng_for(seed, 21);
        let mut params = Params::new();
        params.insert("w1", DenseMatrix::randn(d_hid, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng));
        params.insert("b1", DenseMatrix::zeros(1, d_hid));
        params.insert(
            "w2",
            DenseMatrix::randn(prefix_slots * d_out, d_hid, 1.0 / (d_hid as f64).sqrt(), &mut rng),
        );
        params.insert("b2", DenseMatrix::zeros(1, prefix_slots * d_out));
        Ok(Self {
            params,
            d_in,
            d_hid,
            prefix_slots,
            d_out,
            dropout,
        })
    }

    pub fn w1(&self) -> &DenseMatrix {
        self.params.get("w1").expect("w1 present")
    }

    pub fn w2(&self) -> &DenseMatrix {
        self.params.get("w2").expect("w2 present")
    }

    pub fn out_width(&self) -> usize {
        self.prefix_slots * self.d_out
    }

    fn check_adapter(&self, adapter: &LoraAdapter) -> Result<()> {
        if adapter.d_in() != self.d_in || adapter.d_out() != self.d_hid {
            return Err(SemiError::Config(format!(
                "adapter maps {} -> {}, W1 is {}x{}",
                adapter.d_in(),
                adapter.d_out(),
                self.d_hid,
                self.d_in
            )));
        }
        Ok(())
    }

    /// Registers the weights under `prefix.` as parameters or constants.
    pub fn bind(&self, ctx: &mut GradContext, prefix: &str, trainable: bool) -> Result<ProjectorVars> {
        let mut get = |n: &str| -> Result<Var> {
            let v = self.params.get(n)?.clone();
            if trainable {
                ctx.param(&format!("{prefix}.{n}"), v)
            } else {
                Ok(ctx.constant(v))
            }
        };
        Ok(ProjectorVars {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
            dropout: self.dropout,
        })
    }
}

/// `[P x d_d]` prefix for one input. Adapter, when given, acts on layer 1 as
/// `(W1 + (alpha/r) B A) x` without materialising the merged matrix.
pub fn project_forward(
    psi: &ProjectorParams,
    x: &[f64],
    adapter: Option<&LoraAdapter>,
    mode: ForwardMode<'_>,
) -> Result<DenseMatrix> {
    if x.len() != psi.d_in {
        return Err(SemiError::Shape(format!("input of {} values, projector expects {}", x.len(), psi.d_in)));
    }
    let xm = DenseMatrix::row_vector(x);
    let mut pre = xm.matmul_t(psi.w1())?;
    if let Some(ad) = adapter {
        psi.check_adapter(ad)?;
        let low = xm.matmul_t(&ad.a)?.matmul_t(&ad.b)?.scale(ad.scale());
        pre.add_assign(&low)?;
    }
    let b1 = psi.params.get("b1")?;
    let mut h = pre.zip_map(b1, |a, b| gelu_approx(a + b));
    if let ForwardMode::Train(rng) = mode {
        if psi.dropout > 0.0 {
            let keep = 1.0 / (1.0 - psi.dropout);
            for v in h.data_mut() {
                *v = if rng.random::<f64>() < psi.dropout { 0.0 } else { *v * keep };
            }
        }
    }
    let out = h.matmul_t(psi.w2())?.add(psi.params.get("b2")?)?;
    out.reshape(psi.prefix_slots, psi.d_out)
}

/// Eval-mode projection of a batch: `[n x d_in] -> [n x P*d_d]`.
pub fn project_batch(psi: &ProjectorParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.cols() != psi.d_in {
        return Err(SemiError::Shape(format!("input has {} columns, projector expects {}", x.cols(), psi.d_in)));
    }
    let mut h = x.matmul_t(psi.w1())?;
    let b1 = psi.params.get("b1")?.data();
    for i in 0..h.rows() {
        for (v, b) in h.row_mut(i).iter_mut().zip(b1) {
            *v = gelu_approx(*v + b);
        }
    }
    let mut out = h.matmul_t(psi.w2())?;
    let b2 = psi.params.get("b2")?.data();
    for i in 0..out.rows() {
        for (v, b) in out.row_mut(i).iter_mut().zip(b2) {
            *v += b;
        }
    }
    Ok(out)
}

/// Removes the trailing input columns of `W1` so the projector accepts
/// `d_e`-dimensional inputs.
pub fn prune_projector(psi: &ProjectorParams, d_e: usize) -> Result<ProjectorParams> {
    if d_e >= psi.d_in || d_e == 0 {
        return Err(SemiError::Precondition(format!(
            "pruning needs 0 < d_e < d_in, got d_e={d_e}, d_in={}",
            psi.d_in
        )));
    }
    let keep: Vec<usize> = (0..d_e).collect();
    let mut out = psi.clone();
    *out.params.get_mut("w1")? = psi.w1().select_columns(&keep)?;
    out.d_in = d_e;
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub dropout: f64,
}

/// Recorded forward pass over a batch `[n x d_in] -> [n x P*d_d]`.
/// `delta1`/`delta2` are already scaled additive updates to `W1`/`W2`.
pub fn project_graph(
    ctx: &mut GradContext,
    v: &ProjectorVars,
    x: Var,
    delta1: Option<Var>,
    delta2: Option<Var>,
    rng: Option<&mut SemiRng>,
) -> Result<Var> {
    let w1 = match delta1 {
        Some(d) => ctx.add(v.w1, d)?,
        None => v.w1,
    };
    let w2 = match delta2 {
        Some(d) => ctx.add(v.w2, d)?,
        None => v.w2,
    };
    let h = linear(ctx, x, w1, v.b1)?;
    let mut h = ctx.gelu(h);
    if let Some(rng) = rng {
        h = dropout(ctx, h, v.dropout, rng)?;
    }
    linear(ctx, h, w2, v.b2)
}

/// One supervised decoder example driven by a projected modality input.
#[derive(Clone, Debug)]
pub struct Supervision<'a> {
    pub instruction: &'a [usize],
    pub caption: &'a [usize],
}

/// Teacher-forced caption loss where row `i` of `projected` is the
/// flattened prefix of example `i`.
pub fn caption_loss(
    ctx: &mut GradContext,
    dec: &DecoderVars,
    projected: Var,
    prefix_slots: usize,
    d_out: usize,
    batch: &[Supervision<'_>],
) -> Result<Var> {
    if ctx.value(projected).rows() != batch.len() {
        return Err(SemiError::Shape("one projected row per supervision example".into()));
    }
    let mut prefixes = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let row = ctx.slice_rows(projected, i, i + 1)?;
        prefixes.push(ctx.reshape(row, prefix_slots, d_out)?);
    }
    let examples: Vec<TeacherForced<'_>> = batch
        .iter()
        .zip(&prefixes)
        .map(|(s, &p)| TeacherForced {
            prefix: p,
            instruction: s.instruction,
            caption: s.caption,
        })
        .collect();
    dec.teacher_forced_loss(ctx, &examples)
}

/// Eval-mode caption loss of `psi` (optionally with an adapter) on a batch.
pub fn projector_loss(
    psi: &ProjectorParams,
    decoder: &FrozenDecoder,
    x: &DenseMatrix,
    batch: &[Supervision<'_>],
) -> Result<f64> {
    let mut ctx = GradContext::new();
    let dec = decoder.bind(&mut ctx, false)?;
    let vars = psi.bind(&mut ctx, "projector", false)?;
    let xv = ctx.constant(x.clone());
    let out = project_graph(&mut ctx, &vars, xv, None, None, None)?;
    let loss = caption_loss(&mut ctx, &dec, out, psi.prefix_slots, psi.d_out, batch)?;
    Ok(ctx.value(loss).get(0, 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorTraining {
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for ProjectorTraining {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            hidden: 64,
            dropout: 0.1,
            optimizer: OptimizerConfig {
                lr: 2e-3,
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
pub struct LossRecord {
    pub step: usize,
    pub modality: usize,
    pub loss: f64,
}

/// Draws a supervision batch for `encoder`: inputs, instructions, captions.
pub(crate) struct DrawnBatch {
    pub x: DenseMatrix,
    pub instructions: Vec<Vec<usize>>,
    pub captions: Vec<Vec<usize>>,
}

impl DrawnBatch {
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

pub(crate) fn draw_batch(
    world: &ConceptWorld,
    encoder: &SyntheticEncoder,
    split: Split,
    n: usize,
    rng: &mut SemiRng,
) -> Result<DrawnBatch> {
    let mut rows = Vec::with_capacity(n);
    let mut instructions = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    let pool = world.instruction_pool(encoder.modality);
    for _ in 0..n {
        let s = sample_pair(world, encoder, split, rng);
        rows.push(s.x);
        instructions.push(pool.choose(rng).expect("non-empty pool").clone());
        captions.push(s.tokens);
    }
    Ok(DrawnBatch {
        x: DenseMatrix::from_rows(&rows)?,
        instructions,
        captions,
    })
}

/// Stage 1: trains a fresh projector on the training modalities with the
/// decoder frozen. Returns the projector and the per-step loss log.
pub fn pretrain_projector(
    encoders: &[SyntheticEncoder],
    world: &ConceptWorld,
    decoder: &FrozenDecoder,
    cfg: &ProjectorTraining,
    seed: u64,
) -> Result<(ProjectorParams, Vec<LossRecord>)> {
    if encoders.len() < 2 {
        return Err(SemiError::Precondition("projector pre-training needs at least two modalities".into()));
    }
    if !decoder.frozen {
        return Err(SemiError::Precondition("decoder must be frozen before projector training".into()));
    }
    let d_in = encoders[0].out_dim;
    if encoders.iter().any(|e| e.out_dim != d_in) {
        return Err(SemiError::Config("training encoders must share one output dimension".into()));
    }
    cfg.optimizer.validate()?;
    let mut psi = ProjectorParams::init(d_in, cfg.hidden, decoder.prefix_slots(), decoder.d_model(), cfg.dropout, seed)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = rng_for(seed, 22);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let m = rng.random_range(0..encoders.len());
        let batch = draw_batch(world, &encoders[m], Split::Train, cfg.batch, &mut rng)?;
        let mut ctx = GradContext::new();
        let dec = decoder.bind(&mut ctx, false)?;
        let vars = psi.bind(&mut ctx, "projector", true)?;
        let x = ctx.constant(batch.x.clone());
        let out = project_graph(&mut ctx, &vars, x, None, None, Some(&mut rng))?;
        let loss = caption_loss(&mut ctx, &dec, out, psi.prefix_slots, psi.d_out, &batch.supervision())?;
        let value = ctx.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(SemiError::Diverged {
                step,
                last_good: Box::new(psi.params.clone()),
            });
        }
        log.push(LossRecord {
            step,
            modality: encoders[m].modality,
            loss: value,
        });
        let grads = ctx.backward(loss)?.into_params().strip_prefix("projector");
        opt.step(&mut psi.params, &grads)?;
    }
    Ok((psi, log))
}
