//! Sample-efficiency benchmark: every method sees the same nested few-shot
//! subsets of a held-out encoder and is scored on a fixed test split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cka::{linear_cka, CkaGrid, CkaStage};
use super::metrics::{evaluate_projector, LabeledSet, Scores};
use crate::error::{Result, SemiError};
use crate::exec::Exec;
use crate::featsel::{FeatureSelection, SelectionMethod};
use crate::hypernet::{
    adapt_few_shot, baseline_ft_projector, baseline_lora, baseline_projector_scratch, caption_embedding,
    FinetuneConfig, GenerationMode, HypernetParams,
};
use crate::numerics::{rng_for, DenseMatrix, SemiRng};
use crate::projector::{project_batch, prune_projector, ProjectorParams};
use crate::synth::{
    make_encoder, sample_many, stack_inputs, ConceptWorld, EncoderFamily, FrozenDecoder, FrozenTextEncoder, Split,
    SyntheticEncoder,
};

pub const METRICS_HEADER: &str = "method,modality,enc_dim,shots,seed,token_accuracy,bleu4,rougeL,runtime_s";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SEMI")]
    Semi,
    #[serde(rename = "FT-Projector")]
    FtProjector,
    #[serde(rename = "Projector")]
    Projector,
    #[serde(rename = "LoRA")]
    Lora,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Semi, Method::FtProjector, Method::Projector, Method::Lora];

    pub fn label(self) -> &'static str {
        match self {
            Method::Semi => "SEMI",
            Method::FtProjector => "FT-Projector",
            Method::Projector => "Projector",
            Method::Lora => "LoRA",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(name))
            .ok_or_else(|| SemiError::Config(format!("unknown method {name:?}")))
    }
}

/// A held-out encoder: modality id, output width and construction seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeldOut {
    pub modality: usize,
    pub enc_dim: usize,
    pub seed: u64,
}

impl HeldOut {
    pub fn label(&self) -> String {
        format!("m{}-d{}", self.modality, self.enc_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub held_out: Vec<HeldOut>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub val_size: usize,
    pub test_size: usize,
    pub max_decode_len: usize,
    /// Reduction used when the encoder is wider than the projector input.
    pub selection: SelectionMethod,
    pub inffs_beta: f64,
    pub generation: GenerationMode,
    /// Shot count at which the stage-wise CKA grid is measured.
    pub cka_shots: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            held_out: [48, 64, 96]
                .into_iter()
                .map(|enc_dim| HeldOut {
                    modality: 3,
                    enc_dim,
                    seed: 5000,
                })
                .collect(),
            shots: vec![8, 32, 128],
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
            val_size: 32,
            test_size: 96,
            max_decode_len: 8,
            selection: SelectionMethod::InfFs,
            inffs_beta: 0.5,
            generation: GenerationMode::Averaged,
            cka_shots: 8,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self, world: &ConceptWorld) -> Result<()> {
        let bad = |m: String| Err(SemiError::Config(m));
        if self.held_out.is_empty() || self.shots.is_empty() || self.seeds.is_empty() || self.methods.is_empty() {
            return bad("benchmark grid has an empty axis".into());
        }
        if self.shots.contains(&0) || self.val_size == 0 || self.test_size < 2 || self.max_decode_len == 0 {
            return bad("shot counts and split sizes must be positive".into());
        }
        if !self.shots.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("shot ladder {:?} must be strictly increasing", self.shots));
        }
        if !self.shots.contains(&self.cka_shots) {
            return bad(format!("cka_shots {} is not on the shot ladder", self.cka_shots));
        }
        for h in &self.held_out {
            if h.modality >= world.config.instruction_pools {
                return bad(format!("held-out modality {} has no instruction pool", h.modality));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.held_out.len() * self.shots.len() * self.methods.len() * self.seeds.len()
    }
}

/// Frozen artifacts the benchmark runs against.
pub struct Assets<'a> {
    pub world: &'a ConceptWorld,
    pub family: &'a EncoderFamily,
    pub text: &'a FrozenTextEncoder,
    pub decoder: &'a FrozenDecoder,
    pub psi: &'a ProjectorParams,
    pub theta: &'a HypernetParams,
    /// Must match the toggle the hypernetwork was trained with.
    pub text_grounding: bool,
    pub finetune: &'a FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub modality: usize,
    pub enc_dim: usize,
    pub shots: usize,
    pub seed: u64,
    pub token_accuracy: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub runtime_s: f64,
}

impl MetricsRow {
    pub fn csv_line(&self, with_runtime: bool) -> String {
        let mut s = format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.method.label(),
            self.modality,
            self.enc_dim,
            self.shots,
            self.seed,
            self.token_accuracy,
            self.bleu4,
            self.rouge_l
        );
        if with_runtime {
            let _ = write!(s, ",{:.3}", self.runtime_s);
        }
        s
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 9 {
            return Err(SemiError::Format(format!("expected 9 fields, got {}: {line}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|e| SemiError::Format(format!("field {i} of {line:?}: {e}")))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse::<u64>()
                .map_err(|e| SemiError::Format(format!("field {i} of {line:?}: {e}")))
        };
        let row = MetricsRow {
            method: Method::parse(f[0])?,
            modality: int(1)? as usize,
            enc_dim: int(2)? as usize,
            shots: int(3)? as usize,
            seed: int(4)?,
            token_accuracy: num(5)?,
            bleu4: num(6)?,
            rouge_l: num(7)?,
            runtime_s: num(8)?,
        };
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(row.token_accuracy) && unit(row.bleu4) && unit(row.rouge_l)) || row.runtime_s < 0.0 {
            return Err(SemiError::Format(format!("metric out of range in {line:?}")));
        }
        Ok(row)
    }

    fn key(&self) -> (usize, usize, usize, u64, Method) {
        (self.modality, self.enc_dim, self.shots, self.seed, self.method)
    }
}

/// Serialises rows under the standard header, sorted by grid position.
pub fn metrics_csv(rows: &[MetricsRow], with_runtime: bool) -> String {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.key());
    let mut out = String::new();
    if with_runtime {
        out.push_str(METRICS_HEADER);
    } else {
        out.push_str(METRICS_HEADER.trim_end_matches(",runtime_s"));
    }
    out.push('\n');
    for r in sorted {
        out.push_str(&r.csv_line(with_runtime));
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == METRICS_HEADER => {}
        other => return Err(SemiError::Format(format!("unexpected CSV header {other:?}"))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse_csv).collect()
}

/// How a held-out encoder reaches the shared projector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Direct,
    Pruned,
    Selected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecord {
    pub modality: usize,
    pub enc_dim: usize,
    pub shots: usize,
    pub seed: u64,
    pub route: Route,
    pub sha256: String,
    /// Inf-FS or PCA indices when the encoder is wider than the projector.
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaRecord {
    pub modality: String,
    pub seed: u64,
    pub stage: CkaStage,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<MetricsRow>,
    /// Stage-wise CKA, mean over seeds.
    pub cka: CkaGrid,
    pub cka_runs: Vec<CkaRecord>,
    pub subsets: Vec<SubsetRecord>,
}

impl BenchmarkReport {
    pub fn csv(&self) -> String {
        metrics_csv(&self.rows, true)
    }

    /// Mean token accuracy over seeds for one grid column.
    pub fn mean_accuracy(&self, held: &HeldOut, method: Method, shots: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.modality == held.modality && r.enc_dim == held.enc_dim && r.method == method && r.shots == shots)
            .map(|r| r.token_accuracy)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Draws `n` labelled samples; instructions cycle through the modality's pool.
pub fn draw_labeled(
    world: &ConceptWorld,
    encoder: &SyntheticEncoder,
    split: Split,
    n: usize,
    rng: &mut SemiRng,
) -> Result<LabeledSet> {
    let samples = sample_many(world, encoder, split, n, rng);
    let pool = world.instruction_pool(encoder.modality);
    Ok(LabeledSet {
        x: stack_inputs(&samples)?,
        captions: samples.iter().map(|s| s.tokens.clone()).collect(),
        instructions: (0..n).map(|i| pool[i % pool.len()].clone()).collect(),
        concepts: samples.iter().map(|s| s.concept).collect(),
    })
}

/// SHA-256 over the exact bytes of a labelled set.
pub fn subset_hash(set: &LabeledSet) -> String {
    let mut h = Sha256::new();
    for v in set.x.data() {
        h.update(v.to_le_bytes());
    }
    for (cap, ins) in set.captions.iter().zip(&set.instructions) {
        for t in cap.iter().chain([&usize::MAX]).chain(ins).chain([&usize::MAX]) {
            h.update((*t as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Evaluation data for one held-out encoder and seed.
pub struct HeldOutData {
    pub encoder: SyntheticEncoder,
    /// Largest few-shot pool; smaller shot counts take its prefixes.
    pub pool: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

fn stream_of(held: &HeldOut) -> u64 {
    ((held.modality as u64) << 32) | held.enc_dim as u64
}

pub fn held_out_data(assets: &Assets<'_>, held: &HeldOut, pool_size: usize, cfg: &BenchmarkConfig, seed: u64) -> Result<HeldOutData> {
    let encoder = make_encoder(assets.world, held.modality, held.enc_dim, held.seed, assets.family)?;
    let stream = stream_of(held);
    let pool = draw_labeled(assets.world, &encoder, Split::Train, pool_size, &mut rng_for(held.seed ^ seed.wrapping_mul(0x9e37), stream))?;
    let val = draw_labeled(assets.world, &encoder, Split::Val, cfg.val_size, &mut rng_for(held.seed, stream + 1))?;
    let test = draw_labeled(assets.world, &encoder, Split::Test, cfg.test_size, &mut rng_for(held.seed, stream + 2))?;
    Ok(HeldOutData {
        encoder,
        pool,
        val,
        test,
    })
}

/// Few-shot, validation and test sets routed to the projector's input
/// width, together with the projector they feed.
pub struct Routed {
    pub route: Route,
    pub psi: ProjectorParams,
    pub fewshot: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    pub selection: Option<FeatureSelection>,
}

/// Narrower encoders get a pruned projector; wider ones are reduced to the
/// projector width with a selection fitted on the few-shot inputs only.
pub fn route_inputs(
    psi: &ProjectorParams,
    fewshot: &LabeledSet,
    val: &LabeledSet,
    test: &LabeledSet,
    method: SelectionMethod,
    beta: f64,
) -> Result<Routed> {
    let d_e = fewshot.x.cols();
    if d_e < psi.d_in {
        log::info!("encoder width {d_e} < {}: pruning projector inputs", psi.d_in);
        return Ok(Routed {
            route: Route::Pruned,
            psi: prune_projector(psi, d_e)?,
            fewshot: fewshot.clone(),
            val: val.clone(),
            test: test.clone(),
            selection: None,
        });
    }
    if d_e > psi.d_in {
        let sel = FeatureSelection::fit(method, &fewshot.x, psi.d_in, beta)?;
        log::info!("encoder width {d_e} > {}: {:?} keeps {:?}", psi.d_in, method, sel.indices);
        return Ok(Routed {
            route: Route::Selected,
            psi: psi.clone(),
            fewshot: fewshot.with_inputs(sel.apply(&fewshot.x)?)?,
            val: val.with_inputs(sel.apply(&val.x)?)?,
            test: test.with_inputs(sel.apply(&test.x)?)?,
            selection: Some(sel),
        });
    }
    Ok(Routed {
        route: Route::Direct,
        psi: psi.clone(),
        fewshot: fewshot.clone(),
        val: val.clone(),
        test: test.clone(),
        selection: None,
    })
}

/// Text embeddings of the test captions, the CKA reference.
pub fn caption_matrix(text: &FrozenTextEncoder, set: &LabeledSet) -> Result<DenseMatrix> {
    let rows = set
        .captions
        .iter()
        .map(|c| caption_embedding(text, c))
        .collect::<Result<Vec<_>>>()?;
    DenseMatrix::from_rows(&rows)
}

/// Result of one method on one few-shot subset.
pub struct CellResult {
    pub row: MetricsRow,
    /// Per-stage CKA on the SEMI path, when requested.
    pub cka: Vec<(CkaStage, f64)>,
}

/// Runs one method on one routed subset. `raw` is the unrouted few-shot
/// data, used by the from-scratch projector at the encoder's own width.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    assets: &Assets<'_>,
    method: Method,
    held: &HeldOut,
    seed: u64,
    routed: &Routed,
    raw: (&LabeledSet, &LabeledSet, &LabeledSet),
    cfg: &BenchmarkConfig,
    with_cka: bool,
) -> Result<CellResult> {
    let start = Instant::now();
    let ft = assets.finetune;
    let shots = routed.fewshot.len();
    let fit_seed = seed.wrapping_mul(1_000_003).wrapping_add(shots as u64);
    let mut cka = Vec::new();
    let (psi, test) = match method {
        Method::Semi => {
            let out = adapt_few_shot(
                assets.theta,
                assets.text,
                assets.decoder,
                &routed.psi,
                &routed.fewshot,
                &routed.val,
                assets.text_grounding,
                cfg.generation,
                ft,
                fit_seed,
            )?;
            if with_cka {
                let text = caption_matrix(assets.text, &routed.test)?;
                let stages = [
                    (CkaStage::Encoder, raw.2.x.clone()),
                    (CkaStage::PreMerge, project_batch(&routed.psi, &routed.test.x)?),
                    (CkaStage::PostMerge, project_batch(&out.merged, &routed.test.x)?),
                    (CkaStage::PostFinetune, project_batch(&out.fit.psi, &routed.test.x)?),
                ];
                for (stage, x) in stages {
                    cka.push((stage, linear_cka(&x, &text)?));
                }
            }
            (out.fit.psi, &routed.test)
        }
        Method::FtProjector => (
            baseline_ft_projector(&routed.psi, assets.decoder, &routed.fewshot, &routed.val, ft, fit_seed)?.psi,
            &routed.test,
        ),
        Method::Lora => (
            baseline_lora(&routed.psi, assets.decoder, &routed.fewshot, &routed.val, ft, fit_seed)?.psi,
            &routed.test,
        ),
        Method::Projector => (
            baseline_projector_scratch(assets.decoder, raw.0, raw.1, assets.psi.dropout, ft, fit_seed)?.psi,
            raw.2,
        ),
    };
    let Scores {
        token_accuracy,
        bleu4,
        rouge_l,
    } = evaluate_projector(&psi, assets.decoder, test, cfg.max_decode_len)?;
    Ok(CellResult {
        row: MetricsRow {
            method,
            modality: held.modality,
            enc_dim: held.enc_dim,
            shots,
            seed,
            token_accuracy,
            bleu4,
            rouge_l,
            runtime_s: start.elapsed().as_secs_f64(),
        },
        cka,
    })
}

struct Prepared {
    held: HeldOut,
    seed: u64,
    routed: Routed,
    raw: (LabeledSet, LabeledSet, LabeledSet),
}

/// Runs the grid. Cells already present in `done` (matched on method,
/// modality, width, shots and seed) are kept instead of recomputed.
pub fn run_benchmark(assets: &Assets<'_>, cfg: &BenchmarkConfig, exec: Exec, done: &[MetricsRow]) -> Result<BenchmarkReport> {
    cfg.validate(assets.world)?;
    if !assets.decoder.frozen {
        return Err(SemiError::Config("benchmark needs a frozen decoder".into()));
    }
    let pool_size = *cfg.shots.last().expect("validated non-empty");
    let mut prepared = Vec::new();
    let mut report = BenchmarkReport::default();
    for held in &cfg.held_out {
        for &seed in &cfg.seeds {
            let data = held_out_data(assets, held, pool_size, cfg, seed)?;
            for &shots in &cfg.shots {
                let idx: Vec<usize> = (0..shots).collect();
                let fewshot = data.pool.subset(&idx)?;
                let routed = route_inputs(assets.psi, &fewshot, &data.val, &data.test, cfg.selection, cfg.inffs_beta)?;
                let sha = subset_hash(&fewshot);
                log::info!("{} shots={shots} seed={seed} subset sha256={sha}", held.label());
                report.subsets.push(SubsetRecord {
                    modality: held.modality,
                    enc_dim: held.enc_dim,
                    shots,
                    seed,
                    route: routed.route,
                    sha256: sha,
                    selected: routed.selection.as_ref().map(|s| s.indices.clone()).unwrap_or_default(),
                });
                prepared.push(Prepared {
                    held: held.clone(),
                    seed,
                    routed,
                    raw: (fewshot, data.val.clone(), data.test.clone()),
                });
            }
        }
    }
    let mut jobs = Vec::new();
    for (p, prep) in prepared.iter().enumerate() {
        for &method in &cfg.methods {
            let shots = prep.routed.fewshot.len();
            let existing = done.iter().find(|r| {
                r.method == method
                    && r.modality == prep.held.modality
                    && r.enc_dim == prep.held.enc_dim
                    && r.shots == shots
                    && r.seed == prep.seed
            });
            let with_cka = method == Method::Semi && shots == cfg.cka_shots;
            match existing {
                Some(r) if !with_cka => report.rows.push(r.clone()),
                _ => jobs.push((p, method, with_cka)),
            }
        }
    }
    let results = exec.map(jobs, |(p, method, with_cka)| {
        let prep = &prepared[p];
        let raw = (&prep.raw.0, &prep.raw.1, &prep.raw.2);
        run_cell(assets, method, &prep.held, prep.seed, &prep.routed, raw, cfg, with_cka).map(|c| (p, c))
    });
    let mut cka_sums: BTreeMap<(String, CkaStage), (f64, usize)> = BTreeMap::new();
    for res in results {
        let (p, cell) = res?;
        let label = prepared[p].held.label();
        for (stage, value) in cell.cka {
            let e = cka_sums.entry((label.clone(), stage)).or_insert((0.0, 0));
            e.0 += value;
            e.1 += 1;
            report.cka_runs.push(CkaRecord {
                modality: label.clone(),
                seed: prepared[p].seed,
                stage,
                value,
            });
        }
        report.rows.push(cell.row);
    }
    for ((label, stage), (sum, n)) in cka_sums {
        report.cka.insert(stage, &label, sum / n as f64)?;
    }
    report.rows.sort_by_key(|r| r.key());
    Ok(report)
}
