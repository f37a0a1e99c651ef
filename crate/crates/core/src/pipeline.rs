//! Stage orchestration over an output directory: each command loads what
//! earlier stages saved, runs, and writes its artifacts atomically.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{atomic_write, Checkpoint, Persist, Precision};
use crate::config::{AblationVariant, ExperimentConfig};
use crate::error::{Result, SemiError};
use crate::eval::benchmark::{held_out_data, route_inputs, run_cell};
use crate::eval::{
    metrics_csv, parse_metrics_csv, run_benchmark, subset_hash, Assets, BenchmarkConfig, BenchmarkReport, HeldOut,
    Method, MetricsRow, Route, METRICS_HEADER,
};
use crate::exec::Exec;
use crate::hypernet::{train_hypernet, Frozen, HypernetParams, Stage2Record, Stage2Summary};
use crate::projector::{pretrain_projector, LossRecord, ProjectorParams};
use crate::synth::{build_world, make_encoder, pretrain_frozen_decoder, ConceptWorld, FrozenDecoder, FrozenTextEncoder, SyntheticEncoder};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SEMI_OUT";
pub const ABLATION_HEADER: &str = "variant,method,modality,enc_dim,shots,seed,token_accuracy,bleu4,rougeL,runtime_s";

/// `$SEMI_OUT` if set, else `runs`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Artifact locations under one output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn decoder(&self) -> PathBuf {
        self.root.join("decoder.ckpt")
    }
    pub fn projector(&self) -> PathBuf {
        self.root.join("stage1").join("projector.ckpt")
    }
    pub fn stage1_log(&self) -> PathBuf {
        self.root.join("stage1").join("loss.csv")
    }
    pub fn hypernet(&self) -> PathBuf {
        self.root.join("stage2").join("hypernet.ckpt")
    }
    pub fn stage2_log(&self) -> PathBuf {
        self.root.join("stage2").join("loss.csv")
    }
    pub fn stage2_summary(&self) -> PathBuf {
        self.root.join("stage2").join("summary.json")
    }
    pub fn benchmark_dir(&self) -> PathBuf {
        self.root.join("benchmark")
    }
    pub fn metrics(&self) -> PathBuf {
        self.benchmark_dir().join("metrics.csv")
    }
    pub fn cka(&self) -> PathBuf {
        self.benchmark_dir().join("cka.json")
    }
    pub fn adapt_dir(&self) -> PathBuf {
        self.root.join("adapt")
    }
    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }
    pub fn ablation_hypernet(&self, v: AblationVariant) -> PathBuf {
        self.ablation_dir().join(format!("{v:?}").to_lowercase()).join("hypernet.ckpt")
    }
}

/// Sidecar written next to reports so every output names its config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
}

fn write_manifest(dir: &Path, cfg: &ExperimentConfig, seeds: &[u64], files: &[&str]) -> Result<()> {
    let m = Manifest {
        config_hash: cfg.hash(),
        seeds: seeds.to_vec(),
        files: files.iter().map(|s| s.to_string()).collect(),
    };
    atomic_write(&dir.join("manifest.json"), &to_json(&m)?)
}

fn read_manifest(dir: &Path) -> Option<Manifest> {
    let bytes = std::fs::read(dir.join("manifest.json")).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| SemiError::Format(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn save<T: Persist>(path: &Path, object: &T, cfg: &ExperimentConfig) -> Result<()> {
    Checkpoint::new(object, &cfg.hash(), &[cfg.seed], Precision::F64)?.save(path)
}

/// Loads a checkpoint, warning when it was written under another config.
fn load<T: Persist>(path: &Path, cfg: &ExperimentConfig, what: &str) -> Result<T> {
    if !path.exists() {
        return Err(SemiError::Config(format!("missing {what} checkpoint {}", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    if ck.config_hash != cfg.hash() {
        log::warn!("{} was written with config {}, current config is {}", path.display(), ck.config_hash, cfg.hash());
    }
    ck.restore()
}

pub fn world(cfg: &ExperimentConfig) -> Result<ConceptWorld> {
    build_world(&cfg.world, cfg.seed)
}

pub fn training_encoders(cfg: &ExperimentConfig, world: &ConceptWorld) -> Result<Vec<SyntheticEncoder>> {
    (0..cfg.encoders.train_modalities)
        .map(|m| make_encoder(world, m, cfg.hypernet.d_h, cfg.encoders.train_seed + m as u64, &cfg.encoders.family))
        .collect()
}

pub fn text_encoder(cfg: &ExperimentConfig, world: &ConceptWorld) -> Result<FrozenTextEncoder> {
    FrozenTextEncoder::new(world.vocab_size(), cfg.hypernet.d_h, cfg.text.max_len, cfg.text.seed)
}

/// Loads the frozen decoder, pre-training and saving it first if absent.
pub fn ensure_decoder(cfg: &ExperimentConfig, layout: &Layout, world: &ConceptWorld) -> Result<FrozenDecoder> {
    let path = layout.decoder();
    if path.exists() {
        return load(&path, cfg, "decoder");
    }
    log::info!("no decoder at {}; pre-training one", path.display());
    let dec = pretrain_frozen_decoder(world, &cfg.decoder, &cfg.decoder_training, cfg.seed)?;
    save(&path, &dec, cfg)?;
    Ok(dec)
}

fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,modality,loss\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.step, r.modality, r.loss));
    }
    s
}

fn stage2_csv(records: &[Stage2Record], text: bool, iso: bool) -> String {
    let mut s = String::from("step,modality,loss,q_seed,text_grounding,iso_transforms\n");
    for r in records {
        let q = r.q_seed.map(|q| q.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{q},{text},{iso}\n", r.step, r.modality, r.loss));
    }
    s
}

/// Saves the last finite parameters of a diverged run next to `path`.
fn keep_last_good<T: Persist>(path: &Path, err: SemiError, rebuild: impl FnOnce(crate::numerics::Params) -> T, cfg: &ExperimentConfig) -> SemiError {
    if let SemiError::Diverged { step, last_good } = err {
        let rescue = path.with_extension("diverged.ckpt");
        match save(&rescue, &rebuild(*last_good.clone()), cfg) {
            Ok(()) => log::error!("diverged at step {step}; last finite parameters in {}", rescue.display()),
            Err(e) => log::error!("diverged at step {step}; could not save parameters: {e}"),
        }
        return SemiError::Diverged { step, last_good };
    }
    err
}

/// Stage 1: projector pre-training on the training modalities.
pub fn cmd_stage1(cfg: &ExperimentConfig, layout: &Layout) -> Result<ProjectorParams> {
    cfg.validate()?;
    let world = world(cfg)?;
    let decoder = ensure_decoder(cfg, layout, &world)?;
    let encoders = training_encoders(cfg, &world)?;
    let path = layout.projector();
    let (psi, log) = pretrain_projector(&encoders, &world, &decoder, &cfg.stage1, cfg.seed).map_err(|e| {
        let template = ProjectorParams::init(cfg.hypernet.d_h, cfg.stage1.hidden, decoder.prefix_slots(), decoder.d_model(), cfg.stage1.dropout, 0);
        keep_last_good(&path, e, |params| ProjectorParams { params, ..template.expect("validated dims") }, cfg)
    })?;
    save(&path, &psi, cfg)?;
    atomic_write(&layout.stage1_log(), loss_csv(&log).as_bytes())?;
    Ok(psi)
}

#[derive(Debug)]
pub struct Stage2Output {
    pub theta: HypernetParams,
    pub log: Vec<Stage2Record>,
    pub summary: Stage2Summary,
}

fn train_stage2(
    cfg: &ExperimentConfig,
    world: &ConceptWorld,
    decoder: &FrozenDecoder,
    psi: &ProjectorParams,
    hcfg: &crate::hypernet::HypernetConfig,
    tcfg: &crate::hypernet::HypernetTraining,
    path: &Path,
) -> Result<Stage2Output> {
    let text = text_encoder(cfg, world)?;
    let encoders = training_encoders(cfg, world)?;
    let frozen = Frozen {
        world,
        text: &text,
        decoder,
        psi,
    };
    let init = HypernetParams::init(hcfg, psi.d_in, psi.d_hid, psi.out_width(), cfg.seed)?;
    let (theta, log, summary) = train_hypernet(&init, &frozen, &encoders, tcfg, cfg.seed)
        .map_err(|e| keep_last_good(path, e, |params| HypernetParams { params, ..init.clone() }, cfg))?;
    Ok(Stage2Output { theta, log, summary })
}

/// Stage 2: hypernetwork training against the saved Stage-1 projector.
pub fn cmd_stage2(cfg: &ExperimentConfig, layout: &Layout) -> Result<Stage2Output> {
    cfg.validate()?;
    let world = world(cfg)?;
    let decoder: FrozenDecoder = load(&layout.decoder(), cfg, "decoder")?;
    let psi: ProjectorParams = load(&layout.projector(), cfg, "stage-1 projector")?;
    let path = layout.hypernet();
    let out = train_stage2(cfg, &world, &decoder, &psi, &cfg.hypernet, &cfg.stage2, &path)?;
    save(&path, &out.theta, cfg)?;
    let csv = stage2_csv(&out.log, cfg.stage2.text_grounding, cfg.stage2.iso_transforms);
    atomic_write(&layout.stage2_log(), csv.as_bytes())?;
    atomic_write(&layout.stage2_summary(), &to_json(&out.summary)?)?;
    Ok(out)
}

/// Everything the adaptation commands need, loaded from disk.
pub struct Loaded {
    pub world: ConceptWorld,
    pub text: FrozenTextEncoder,
    pub decoder: FrozenDecoder,
    pub psi: ProjectorParams,
    pub theta: HypernetParams,
}

pub fn load_assets(cfg: &ExperimentConfig, layout: &Layout) -> Result<Loaded> {
    let world = world(cfg)?;
    Ok(Loaded {
        text: text_encoder(cfg, &world)?,
        decoder: load(&layout.decoder(), cfg, "decoder")?,
        psi: load(&layout.projector(), cfg, "stage-1 projector")?,
        theta: load(&layout.hypernet(), cfg, "hypernetwork")?,
        world,
    })
}

impl Loaded {
    pub fn assets<'a>(&'a self, cfg: &'a ExperimentConfig) -> Assets<'a> {
        Assets {
            world: &self.world,
            family: &cfg.encoders.family,
            text: &self.text,
            decoder: &self.decoder,
            psi: &self.psi,
            theta: &self.theta,
            text_grounding: cfg.stage2.text_grounding,
            finetune: &cfg.finetune,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub row: MetricsRow,
    pub route: Route,
    pub subset_sha256: String,
    /// Selected input features when the encoder is wider than the projector.
    pub selected: Vec<usize>,
}

/// Adapts to one held-out encoder with one method and records the result.
pub fn cmd_adapt(cfg: &ExperimentConfig, layout: &Layout, method: Method, held: &HeldOut, shots: usize, seed: u64) -> Result<AdaptRecord> {
    cfg.validate()?;
    if shots == 0 {
        return Err(SemiError::Config("shots must be positive".into()));
    }
    let loaded = load_assets(cfg, layout)?;
    let assets = loaded.assets(cfg);
    let bcfg = &cfg.benchmark;
    let pool = shots.max(bcfg.shots.last().copied().unwrap_or(shots));
    let data = held_out_data(&assets, held, pool, bcfg, seed)?;
    let fewshot = data.pool.subset(&(0..shots).collect::<Vec<_>>())?;
    let routed = route_inputs(&loaded.psi, &fewshot, &data.val, &data.test, bcfg.selection, bcfg.inffs_beta)?;
    let cell = run_cell(&assets, method, held, seed, &routed, (&fewshot, &data.val, &data.test), bcfg, false)?;
    let record = AdaptRecord {
        row: cell.row,
        route: routed.route,
        subset_sha256: subset_hash(&fewshot),
        selected: routed.selection.map(|s| s.indices).unwrap_or_default(),
    };
    let dir = layout.adapt_dir();
    let stem = format!("{}-{}-s{shots}-seed{seed}", held.label(), method.label().to_lowercase());
    atomic_write(&dir.join(format!("{stem}.json")), &to_json(&record)?)?;
    let csv_path = dir.join("metrics.csv");
    let mut rows = match std::fs::read_to_string(&csv_path) {
        Ok(text) => parse_metrics_csv(&text)?,
        Err(_) => Vec::new(),
    };
    rows.retain(|r| {
        (r.method, r.modality, r.enc_dim, r.shots, r.seed) != (method, held.modality, held.enc_dim, shots, seed)
    });
    rows.push(record.row.clone());
    atomic_write(&csv_path, metrics_csv(&rows, true).as_bytes())?;
    write_manifest(&dir, cfg, &[seed], &["metrics.csv"])?;
    Ok(record)
}

/// The full grid. Completed cells from an earlier run under the same
/// config are reused.
pub fn cmd_benchmark(cfg: &ExperimentConfig, layout: &Layout, exec: Exec) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let loaded = load_assets(cfg, layout)?;
    let dir = layout.benchmark_dir();
    let mut done = Vec::new();
    if let Ok(text) = std::fs::read_to_string(layout.metrics()) {
        match read_manifest(&dir) {
            Some(m) if m.config_hash == cfg.hash() => done = parse_metrics_csv(&text)?,
            _ => log::warn!("existing benchmark results were produced under another config; recomputing"),
        }
    }
    let report = run_benchmark(&loaded.assets(cfg), &cfg.benchmark, exec, &done)?;
    write_benchmark(cfg, layout, &report)?;
    Ok(report)
}

pub fn write_benchmark(cfg: &ExperimentConfig, layout: &Layout, report: &BenchmarkReport) -> Result<()> {
    let dir = layout.benchmark_dir();
    atomic_write(&layout.metrics(), report.csv().as_bytes())?;
    atomic_write(&layout.cka(), report.cka.to_json()?.as_bytes())?;
    atomic_write(&dir.join("cka_runs.json"), &to_json(&report.cka_runs)?)?;
    atomic_write(&dir.join("subsets.json"), &to_json(&report.subsets)?)?;
    write_manifest(&dir, cfg, &cfg.benchmark.seeds, &["metrics.csv", "cka.json", "cka_runs.json", "subsets.json"])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub row: MetricsRow,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.variant.label(), r.row.csv_line(true)));
    }
    s
}

/// Parses an ablation CSV, checking the header and every metric field.
pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(ABLATION_HEADER) {
        return Err(SemiError::Format("unexpected ablation header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (variant, rest) = l
                .split_once(',')
                .ok_or_else(|| SemiError::Format(format!("short ablation row {l:?}")))?;
            let variant = AblationVariant::ALL
                .into_iter()
                .find(|v| v.label() == variant)
                .ok_or_else(|| SemiError::Format(format!("unknown variant {variant:?}")))?;
            Ok(AblationRow {
                variant,
                row: MetricsRow::parse_csv(rest)?,
            })
        })
        .collect()
}

/// Trains one hypernetwork per ablation variant and scores SEMI with each
/// on the ablation's held-out encoder.
pub fn cmd_ablate(cfg: &ExperimentConfig, layout: &Layout, exec: Exec) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let world = world(cfg)?;
    let text = text_encoder(cfg, &world)?;
    let decoder: FrozenDecoder = load(&layout.decoder(), cfg, "decoder")?;
    let psi: ProjectorParams = load(&layout.projector(), cfg, "stage-1 projector")?;
    let a = &cfg.ablation;
    let mut rows = Vec::new();
    for &variant in &a.variants {
        let (hcfg, mut tcfg, mode) = variant.apply(&cfg.hypernet, &cfg.stage2);
        if let Some(steps) = a.stage2_steps {
            tcfg.steps = steps;
            if let crate::numerics::Schedule::WarmupCosine { warmup, .. } = tcfg.optimizer.schedule {
                tcfg.optimizer.schedule = crate::numerics::Schedule::WarmupCosine {
                    warmup: warmup.min(steps / 10),
                    total: steps,
                };
            }
        }
        let owner = variant.shares_weights_with();
        let path = layout.ablation_hypernet(owner);
        let theta = match Checkpoint::load(&path) {
            Ok(ck) if ck.config_hash == cfg.hash() => ck.restore()?,
            _ => {
                log::info!("training hypernetwork for {}", owner.label());
                let out = train_stage2(cfg, &world, &decoder, &psi, &hcfg, &tcfg, &path)?;
                save(&path, &out.theta, cfg)?;
                let dir = path.parent().expect("variant directory");
                atomic_write(&dir.join("summary.json"), &to_json(&out.summary)?)?;
                let csv = stage2_csv(&out.log, tcfg.text_grounding, tcfg.iso_transforms);
                atomic_write(&dir.join("loss.csv"), csv.as_bytes())?;
                out.theta
            }
        };
        let bcfg = BenchmarkConfig {
            held_out: vec![a.held_out.clone()],
            shots: a.shots.clone(),
            seeds: a.seeds.clone(),
            methods: vec![Method::Semi],
            generation: mode,
            cka_shots: a.shots[0],
            ..cfg.benchmark.clone()
        };
        let assets = Assets {
            world: &world,
            family: &cfg.encoders.family,
            text: &text,
            decoder: &decoder,
            psi: &psi,
            theta: &theta,
            text_grounding: tcfg.text_grounding,
            finetune: &cfg.finetune,
        };
        let report = run_benchmark(&assets, &bcfg, exec, &[])?;
        rows.extend(report.rows.into_iter().map(|row| AblationRow { variant, row }));
    }
    let dir = layout.ablation_dir();
    atomic_write(&dir.join("metrics.csv"), ablation_csv(&rows).as_bytes())?;
    write_manifest(&dir, cfg, &a.seeds, &["metrics.csv"])?;
    Ok(rows)
}

/// Checks that a metrics CSV on disk is schema-valid and returns its rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    if !text.starts_with(METRICS_HEADER) {
        return Err(SemiError::Format(format!("{} lacks the metrics header", path.display())));
    }
    parse_metrics_csv(&text)
}
