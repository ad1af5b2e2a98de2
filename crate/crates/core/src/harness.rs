//! Config-driven experiment runner: training runs, ablations, optimizer
//! comparisons and overhead accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backprop::{backward, Targets};
use crate::error::{LabError, Result};
use crate::linalg::{mix_seed, Matrix, Rng, RNG_ALGORITHM};
use crate::metrics::{self, DiversityReport};
use crate::model::{init_model, Activation, InitMode, Layer, MoEModel, ModelDims, ParamId, RoutingMode};
use crate::omoe::{AvgNorm, OMoEConfig, OMoEState, Schedule, StepKind};
use crate::optim::{BaseOptimizer, OptimizerConfig, OptimizerKind};
use crate::projector::rls_update_macs;
use crate::tasks::{self, BatchPlan, CsvSchema, Dataset, DatasetKind, PiecewiseRegression, Shuffle, SubspaceClusters};

/// Environment variable capping the number of runs executed in parallel.
pub const THREADS_ENV: &str = "OMOE_LAB_THREADS";

/// Rows of the eval split used for per-expert output variance.
const OUTPUT_VARIANCE_ROWS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    SubspaceClusters {
        #[serde(default = "default_clusters")]
        clusters: usize,
        #[serde(default = "default_d_raw")]
        d_raw: usize,
        #[serde(default = "default_n_per_cluster")]
        n_per_cluster: usize,
        #[serde(default = "default_subspace_dim")]
        subspace_dim: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
        #[serde(default = "default_center")]
        center: f64,
    },
    PiecewiseRegression {
        pieces: usize,
        d_raw: usize,
        n: usize,
        #[serde(default)]
        noise_std: f64,
        #[serde(default = "default_one")]
        outputs: usize,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
}

fn default_clusters() -> usize {
    SubspaceClusters::default().clusters
}
fn default_d_raw() -> usize {
    SubspaceClusters::default().d_raw
}
fn default_n_per_cluster() -> usize {
    SubspaceClusters::default().n_per_cluster
}
fn default_subspace_dim() -> usize {
    SubspaceClusters::default().subspace_dim
}
fn default_noise() -> f64 {
    SubspaceClusters::default().noise_std
}
fn default_center() -> f64 {
    SubspaceClusters::default().center
}
fn default_one() -> usize {
    1
}

impl Default for TaskConfig {
    fn default() -> Self {
        let s = SubspaceClusters::default();
        Self::SubspaceClusters {
            clusters: s.clusters,
            d_raw: s.d_raw,
            n_per_cluster: s.n_per_cluster,
            subspace_dim: s.subspace_dim,
            noise_std: s.noise_std,
            center: s.center,
        }
    }
}

impl TaskConfig {
    pub fn build(&self, seed: u64) -> Result<Dataset> {
        let mut rng = Rng::derived(seed, 1);
        match self {
            Self::SubspaceClusters {
                clusters,
                d_raw,
                n_per_cluster,
                subspace_dim,
                noise_std,
                center,
            } => tasks::gen_subspace_clusters(
                &mut rng,
                &SubspaceClusters {
                    clusters: *clusters,
                    d_raw: *d_raw,
                    n_per_cluster: *n_per_cluster,
                    subspace_dim: *subspace_dim,
                    noise_std: *noise_std,
                    center: *center,
                },
            ),
            Self::PiecewiseRegression {
                pieces,
                d_raw,
                n,
                noise_std,
                outputs,
            } => Ok(tasks::gen_piecewise_regression(
                &mut rng,
                &PiecewiseRegression {
                    pieces: *pieces,
                    d_raw: *d_raw,
                    n: *n,
                    noise_std: *noise_std,
                    outputs: *outputs,
                },
            )?
            .0),
            Self::Csv { path, schema } => tasks::load_csv(path, schema),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_width")]
    pub d: usize,
    #[serde(default = "default_hidden")]
    pub h: usize,
    #[serde(default = "default_experts")]
    pub experts: usize,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub routing: RoutingMode,
    #[serde(default)]
    pub activation: Activation,
}

fn default_width() -> usize {
    16
}
fn default_hidden() -> usize {
    32
}
fn default_experts() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: default_width(),
            h: default_hidden(),
            experts: default_experts(),
            init: InitMode::default(),
            routing: RoutingMode::default(),
            activation: Activation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OMoESection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_skip")]
    pub s: u64,
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub avg_norm: AvgNorm,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_true() -> bool {
    true
}
fn default_skip() -> u64 {
    OMoEConfig::default().s
}
fn default_alpha0() -> f64 {
    OMoEConfig::default().alpha0
}
fn default_lambda() -> f64 {
    OMoEConfig::default().lambda
}

impl Default for OMoESection {
    fn default() -> Self {
        let c = OMoEConfig::default();
        Self {
            enabled: true,
            s: c.s,
            alpha0: c.alpha0,
            lambda: c.lambda,
            avg_norm: c.avg_norm,
            schedule: c.schedule,
        }
    }
}

impl OMoESection {
    pub fn optimizer_config(&self) -> OMoEConfig {
        OMoEConfig {
            s: self.s,
            alpha0: self.alpha0,
            lambda: self.lambda,
            avg_norm: self.avg_norm,
            schedule: self.schedule,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub omoe: OMoESection,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn default_eval_fraction() -> f64 {
    0.2
}
fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::new(OptimizerKind::Adamw, 3e-3)
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    32
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            eval_fraction: default_eval_fraction(),
            model: ModelConfig::default(),
            optimizer: default_optimizer(),
            omoe: OMoESection::default(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seeds: default_seeds(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON, rejecting unknown keys and reporting the failing path.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| LabError::config("<root>", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            LabError::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::config("<file>", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides (dotted paths) on top of `base`.
    pub fn with_overrides(base: Value, overrides: &[String]) -> Result<Self> {
        let mut value = base;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| LabError::config(o.clone(), "override must look like key=value"))?;
            let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(LabError::config("eval_fraction", "must lie in (0, 1)"));
        }
        let m = &self.model;
        for (name, v) in [("model.d", m.d), ("model.h", m.h), ("model.experts", m.experts)] {
            if v == 0 {
                return Err(LabError::config(name, "must be positive"));
            }
        }
        self.optimizer.validate("optimizer")?;
        if self.omoe.enabled {
            self.omoe.optimizer_config().validate("omoe")?;
            if m.experts < 2 {
                return Err(LabError::config(
                    "model.experts",
                    "orthogonal steps need at least two experts; set omoe.enabled=false or model.experts >= 2",
                ));
            }
        }
        if self.epochs == 0 {
            return Err(LabError::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(LabError::config("batch_size", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(LabError::config("seeds", "at least one seed required"));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn set_path(root: &mut Value, dotted: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(LabError::config(dotted, "empty path segment"));
        }
        if !cur.is_object() {
            return Err(LabError::config(dotted, "path crosses a non-object value"));
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_score: f64,
    pub diversity: DiversityReport,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTally {
    pub r_steps: u64,
    pub o_steps: u64,
    pub means_produced: u64,
    pub means_consumed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// `accuracy` for classification, `mse` for regression.
    pub metric: String,
    pub final_train_score: f64,
    pub final_eval_score: f64,
    pub loss_curve: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub steps: StepTally,
    pub final_diversity: DiversityReport,
    /// Share of eval tokens routed to each expert at the end of training.
    pub token_shares: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub eval_score: Stat,
    pub train_score: Stat,
    pub param_variance: Stat,
    pub similar_fraction: Stat,
    pub load_entropy: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub artifact: String,
    pub rng: String,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
    pub aggregate: Aggregate,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn eval_scores(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.final_eval_score).collect()
    }

    pub fn param_variances(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.final_diversity.param_variance).collect()
    }
}

/// Wall time per seed, kept apart from the deterministic report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Report plus the trained models, in seed order.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub models: Vec<MoEModel>,
    pub timings: Vec<Timing>,
}

/// Higher is better: accuracy, or negative MSE for regression.
pub fn comparable_score(metric: &str, value: f64) -> f64 {
    if metric == "mse" {
        -value
    } else {
        value
    }
}

fn evaluate(model: &MoEModel, ds: &Dataset) -> Result<f64> {
    let (logits, _) = model.forward(&ds.x)?;
    Ok(match &ds.y {
        Targets::Classes(c) => {
            let hits = (0..logits.rows())
                .filter(|&r| {
                    let row = logits.row(r);
                    let mut best = 0;
                    for (i, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = i;
                        }
                    }
                    best == c[r]
                })
                .count();
            hits as f64 / logits.rows() as f64
        }
        Targets::Values(v) => {
            let diff = logits.sub(v)?;
            diff.as_slice().iter().map(|e| e * e).sum::<f64>() / diff.len() as f64
        }
    })
}

/// Number of batches with `e mod s ≠ 0` among `e = 1..=total`.
pub fn planned_accumulations(total_batches: u64, s: u64) -> u64 {
    total_batches - total_batches / s
}

enum Trainer {
    Base(BaseOptimizer),
    OMoE(Box<OMoEState>),
}

/// Trains one seed and returns its record and final model.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(SeedRun, MoEModel)> {
    let data = cfg.task.build(seed)?;
    let (train, eval) = data.split(cfg.eval_fraction, mix_seed(seed, 2))?;
    let dims = ModelDims {
        d_raw: data.features(),
        d: cfg.model.d,
        h: cfg.model.h,
        c: data.output_width(),
    };
    let mut model = init_model(
        &mut Rng::derived(seed, 3),
        dims,
        cfg.model.experts,
        cfg.model.init,
        cfg.model.routing,
    )?;
    model.set_activation(cfg.model.activation);

    let plan = BatchPlan {
        seed: mix_seed(seed, 4),
        batch_size: cfg.batch_size.min(train.len()),
        epochs: cfg.epochs,
        shuffle: Shuffle::PerEpoch,
    };
    let total = (plan.batches_per_epoch(train.len()) * cfg.epochs) as u64;
    let base = BaseOptimizer::new(cfg.optimizer.clone());
    let mut trainer = if cfg.omoe.enabled {
        let oc = cfg.omoe.optimizer_config();
        let n_total = planned_accumulations(total, oc.s);
        Trainer::OMoE(Box::new(OMoEState::new(base, oc, &model, n_total)?))
    } else {
        Trainer::Base(base)
    };

    let metric = match data.kind {
        DatasetKind::Classification { .. } => "accuracy",
        DatasetKind::Regression { .. } => "mse",
    };
    let probe_rows: Vec<usize> = (0..eval.len().min(OUTPUT_VARIANCE_ROWS)).collect();
    let (probe_x, _) = eval.select(&probe_rows);

    let mut tally = StepTally::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if let Trainer::OMoE(st) = &mut trainer {
            st.begin_epoch();
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in plan.epoch_batches(&train, epoch)? {
            let loss = match &mut trainer {
                Trainer::Base(opt) => {
                    let (_, tape) = model.forward(&batch.x)?;
                    let (grads, _) = backward(&model, &tape, &batch.y)?;
                    opt.step(&mut model, &grads)?;
                    tally.r_steps += 1;
                    grads.loss
                }
                Trainer::OMoE(st) => {
                    let out = st.step_dispatch(&mut model, &batch.x, &batch.y)?;
                    match out.kind {
                        StepKind::R => tally.r_steps += 1,
                        StepKind::O => tally.o_steps += 1,
                    }
                    out.loss
                }
            };
            if !loss.is_finite() {
                return Err(LabError::Data(format!("loss diverged at epoch {epoch}")));
            }
            loss_sum += loss;
            batches += 1;
        }
        let mean_loss = loss_sum / batches as f64;
        loss_curve.push(mean_loss);
        epochs.push(EpochRecord {
            epoch,
            train_loss: mean_loss,
            eval_score: evaluate(&model, &eval)?,
            diversity: diversity_on(&model, &eval, &probe_x)?,
        });
    }
    if let Trainer::OMoE(st) = &trainer {
        let (p, c) = st.mean_traffic();
        tally.means_produced = p;
        tally.means_consumed = c;
    }

    let (_, tape) = model.forward(&eval.x)?;
    let counts = tape.expert_token_counts(model.expert_count());
    let token_shares = counts
        .iter()
        .map(|c| *c as f64 / eval.len() as f64)
        .collect();
    let final_diversity = epochs.last().expect("at least one epoch").diversity.clone();
    Ok((
        SeedRun {
            seed,
            metric: metric.into(),
            final_train_score: evaluate(&model, &train)?,
            final_eval_score: epochs.last().expect("epoch").eval_score,
            loss_curve,
            epochs,
            steps: tally,
            final_diversity,
            token_shares,
            warnings: data.warnings.clone(),
        },
        model,
    ))
}

fn diversity_on(model: &MoEModel, eval: &Dataset, probe: &Matrix) -> Result<DiversityReport> {
    let params = metrics::expert_params(model);
    let single = model.expert_count() < 2;
    let (_, tape) = model.forward(&eval.x)?;
    Ok(DiversityReport {
        param_variance: if single { 0.0 } else { metrics::expert_param_variance(&params)? },
        similar_fraction: if single {
            1.0
        } else {
            metrics::mean_pairwise_similarity(&params, metrics::SIMILARITY_THRESHOLD)?
        },
        output_variance: if single { 0.0 } else { metrics::mean_output_variance(model, probe)? },
        load_entropy: metrics::load_entropy(tape.routing(), model.expert_count())?,
    })
}

fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1)
}

/// Runs every (variant, seed) job, at most `OMOE_LAB_THREADS` at a time,
/// returning outcomes in variant order.
pub fn run_variants(configs: &[ExperimentConfig]) -> Result<Vec<RunOutcome>> {
    for c in configs {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |s| (i, *s)))
        .collect();
    let exec = |&(i, seed): &(usize, u64)| -> Result<(SeedRun, MoEModel, Timing)> {
        let start = Instant::now();
        let (run, model) = run_seed(&configs[i], seed)?;
        Ok((
            run,
            model,
            Timing {
                seed,
                wall_time_s: start.elapsed().as_secs_f64(),
            },
        ))
    };
    let threads = thread_count();
    let results: Vec<Result<(SeedRun, MoEModel, Timing)>> = if threads <= 1 {
        jobs.iter().map(exec).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| LabError::Data(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(exec).collect())
    };

    let mut grouped: Vec<Vec<(SeedRun, MoEModel, Timing)>> = vec![Vec::new(); configs.len()];
    for ((i, _), r) in jobs.iter().zip(results) {
        grouped[*i].push(r?);
    }
    Ok(configs
        .iter()
        .zip(grouped)
        .map(|(cfg, items)| {
            let mut runs = Vec::new();
            let mut models = Vec::new();
            let mut timings = Vec::new();
            for (r, m, t) in items {
                runs.push(r);
                models.push(m);
                timings.push(t);
            }
            RunOutcome {
                report: build_report(cfg, runs),
                models,
                timings,
            }
        })
        .collect())
}

fn build_report(cfg: &ExperimentConfig, runs: Vec<SeedRun>) -> RunReport {
    let col = |f: &dyn Fn(&SeedRun) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
    let aggregate = Aggregate {
        eval_score: col(&|r| r.final_eval_score),
        train_score: col(&|r| r.final_train_score),
        param_variance: col(&|r| r.final_diversity.param_variance),
        similar_fraction: col(&|r| r.final_diversity.similar_fraction),
        load_entropy: col(&|r| r.final_diversity.load_entropy),
    };
    RunReport {
        artifact: crate::ARTIFACT_VERSION.into(),
        rng: RNG_ALGORITHM.into(),
        config: cfg.clone(),
        runs,
        aggregate,
    }
}

/// Trains every seed of `cfg`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    Ok(run_variants(std::slice::from_ref(cfg))?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRow {
    pub s: u64,
    pub param_variance: f64,
    pub score: f64,
    /// Divided by the value at the smallest `s`.
    pub normalized_variance: f64,
    pub normalized_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipAblation {
    pub rows: Vec<SkipRow>,
    pub reports: Vec<RunReport>,
}

pub fn ablate_skip(cfg: &ExperimentConfig, s_values: &[u64]) -> Result<SkipAblation> {
    if !cfg.omoe.enabled {
        return Err(LabError::config("omoe.enabled", "skip ablation needs the orthogonal optimizer"));
    }
    if s_values.is_empty() {
        return Err(LabError::config("s_values", "at least one value required"));
    }
    let unique: BTreeSet<u64> = s_values.iter().copied().collect();
    if unique.len() != s_values.len() {
        return Err(LabError::config("s_values", "duplicate skipping steps"));
    }
    let variants: Vec<ExperimentConfig> = s_values
        .iter()
        .map(|s| {
            let mut c = cfg.clone();
            c.omoe.s = *s;
            c
        })
        .collect();
    let outcomes = run_variants(&variants)?;
    let mut rows: Vec<SkipRow> = s_values
        .iter()
        .zip(&outcomes)
        .map(|(s, o)| {
            let metric = o.report.runs[0].metric.clone();
            SkipRow {
                s: *s,
                param_variance: o.report.aggregate.param_variance.mean,
                score: comparable_score(&metric, o.report.aggregate.eval_score.mean),
                normalized_variance: 0.0,
                normalized_score: 0.0,
            }
        })
        .collect();
    let smallest = rows
        .iter()
        .min_by_key(|r| r.s)
        .map(|r| (r.param_variance, r.score))
        .expect("non-empty");
    for r in &mut rows {
        r.normalized_variance = r.param_variance / smallest.0;
        r.normalized_score = r.score / smallest.1;
    }
    Ok(SkipAblation {
        rows,
        reports: outcomes.into_iter().map(|o| o.report).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertRow {
    pub experts: usize,
    pub base_score: f64,
    pub omoe_score: f64,
    pub improvement: f64,
    pub base_token_shares: Vec<f64>,
    pub omoe_token_shares: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertAblation {
    pub rows: Vec<ExpertRow>,
    pub reports: Vec<RunReport>,
}

fn mean_shares(report: &RunReport) -> Vec<f64> {
    let m = report.runs[0].token_shares.len();
    (0..m)
        .map(|i| report.runs.iter().map(|r| r.token_shares[i]).sum::<f64>() / report.runs.len() as f64)
        .collect()
}

pub fn ablate_experts(cfg: &ExperimentConfig, m_values: &[usize]) -> Result<ExpertAblation> {
    if m_values.is_empty() {
        return Err(LabError::config("m_values", "at least one value required"));
    }
    if let Some(bad) = m_values.iter().find(|m| **m < 2) {
        return Err(LabError::config("m_values", format!("expert count {bad} below 2")));
    }
    let mut variants = Vec::new();
    for m in m_values {
        for enabled in [false, true] {
            let mut c = cfg.clone();
            c.model.experts = *m;
            c.omoe.enabled = enabled;
            variants.push(c);
        }
    }
    let outcomes = run_variants(&variants)?;
    let rows = m_values
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let base = &outcomes[2 * i].report;
            let omoe = &outcomes[2 * i + 1].report;
            let metric = &base.runs[0].metric;
            let b = comparable_score(metric, base.aggregate.eval_score.mean);
            let o = comparable_score(metric, omoe.aggregate.eval_score.mean);
            ExpertRow {
                experts: *m,
                base_score: b,
                omoe_score: o,
                improvement: o - b,
                base_token_shares: mean_shares(base),
                omoe_token_shares: mean_shares(omoe),
            }
        })
        .collect();
    Ok(ExpertAblation {
        rows,
        reports: outcomes.into_iter().map(|o| o.report).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRow {
    pub kind: OptimizerKind,
    pub base_scores: Vec<f64>,
    pub omoe_scores: Vec<f64>,
    pub base_mean: f64,
    pub omoe_mean: f64,
    pub median_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerComparison {
    pub rows: Vec<OptimizerRow>,
    pub reports: Vec<RunReport>,
}

/// Per-kind learning rates used when a comparison swaps the base optimizer;
/// keys present in `lr_overrides` take precedence.
pub fn default_lr(kind: OptimizerKind) -> f64 {
    match kind {
        OptimizerKind::Sgd => 0.1,
        OptimizerKind::Adam | OptimizerKind::Adamw => 3e-3,
        OptimizerKind::Rmsprop => 1e-3,
        OptimizerKind::Adagrad => 3e-2,
    }
}

pub fn compare_optimizers(
    cfg: &ExperimentConfig,
    kinds: &[OptimizerKind],
    lr_overrides: &BTreeMap<OptimizerKind, f64>,
) -> Result<OptimizerComparison> {
    if kinds.is_empty() {
        return Err(LabError::config("kinds", "at least one optimizer kind required"));
    }
    let mut variants = Vec::new();
    for kind in kinds {
        for enabled in [false, true] {
            let mut c = cfg.clone();
            if c.optimizer.kind != *kind {
                let mut o = OptimizerConfig::new(*kind, default_lr(*kind));
                o.momentum = 0.0;
                c.optimizer = o;
            }
            if let Some(lr) = lr_overrides.get(kind) {
                c.optimizer.lr = *lr;
            }
            c.omoe.enabled = enabled;
            variants.push(c);
        }
    }
    let outcomes = run_variants(&variants)?;
    let rows = kinds
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let base = &outcomes[2 * i].report;
            let omoe = &outcomes[2 * i + 1].report;
            let metric = &base.runs[0].metric;
            let bs: Vec<f64> = base.eval_scores().iter().map(|v| comparable_score(metric, *v)).collect();
            let os: Vec<f64> = omoe.eval_scores().iter().map(|v| comparable_score(metric, *v)).collect();
            let deltas: Vec<f64> = os.iter().zip(&bs).map(|(o, b)| o - b).collect();
            OptimizerRow {
                kind: *kind,
                base_mean: Stat::of(&bs).mean,
                omoe_mean: Stat::of(&os).mean,
                base_scores: bs,
                omoe_scores: os,
                median_delta: median(&deltas),
            }
        })
        .collect();
    Ok(OptimizerComparison {
        rows,
        reports: outcomes.into_iter().map(|o| o.report).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOverhead {
    pub layer: usize,
    /// Input width guarded by the projector.
    pub n_w: usize,
    /// Output width of the weight matrix.
    pub n_out: usize,
    pub buffered_means: usize,
    pub rls_macs: u64,
    pub averaging_macs: u64,
    pub projection_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadEstimate {
    pub experts: usize,
    /// Per weight layer, summed over all experts.
    pub layers: Vec<LayerOverhead>,
    pub macs_per_o_step: u64,
    pub projector_floats: u64,
    pub expert_params: u64,
    pub model_params: u64,
    pub base_optimizer_floats: u64,
    /// `(base + projectors) / base`; absent when the base keeps no state.
    pub optimizer_memory_ratio: Option<f64>,
}

/// Exact multiply-accumulate count of one O step given how many buffered
/// means each (expert, layer) projector will consume.
pub fn predict_o_step_macs(dims: &ModelDims, experts: usize, buffered: &BTreeMap<(usize, Layer), usize>) -> u64 {
    o_step_breakdown(dims, experts, |m, l| buffered.get(&(m, l)).copied().unwrap_or(0))
        .iter()
        .map(|l| l.rls_macs + l.averaging_macs + l.projection_macs)
        .sum()
}

fn layer_widths(dims: &ModelDims, layer: Layer) -> (usize, usize) {
    match layer {
        Layer::First => (dims.d, dims.h),
        Layer::Second => (dims.h, dims.d),
    }
}

fn o_step_breakdown(dims: &ModelDims, experts: usize, buffered: impl Fn(usize, Layer) -> usize) -> Vec<LayerOverhead> {
    Layer::BOTH
        .iter()
        .map(|&layer| {
            let (n_w, n_out) = layer_widths(dims, layer);
            let nw2 = (n_w * n_w) as u64;
            let means: usize = (0..experts).map(|m| buffered(m, layer)).sum();
            LayerOverhead {
                layer: layer.index(),
                n_w,
                n_out,
                buffered_means: means,
                rls_macs: means as u64 * rls_update_macs(n_w),
                averaging_macs: (experts as u64) * (experts.saturating_sub(1) as u64) * nw2,
                projection_macs: experts as u64 * n_out as u64 * nw2,
            }
        })
        .collect()
}

/// Closed-form overhead of the orthogonal optimizer for `cfg`'s shapes,
/// assuming every expert layer buffers `s − 1` means between O steps.
pub fn overhead_report(cfg: &ExperimentConfig, d_raw: usize, c: usize) -> Result<OverheadEstimate> {
    let dims = ModelDims {
        d_raw,
        d: cfg.model.d,
        h: cfg.model.h,
        c,
    };
    let m = cfg.model.experts;
    let per = cfg.omoe.s.saturating_sub(1) as usize;
    let layers = o_step_breakdown(&dims, m, |_, _| per);
    let macs = layers
        .iter()
        .map(|l| l.rls_macs + l.averaging_macs + l.projection_macs)
        .sum();
    let projector_floats = (m * (dims.d * dims.d + dims.h * dims.h)) as u64;
    let model = init_model(&mut Rng::new(0), dims, m, InitMode::Replicate, RoutingMode::Top1Hard)?;
    let expert_params = model
        .param_ids()
        .into_iter()
        .filter(|id| id.is_expert())
        .map(|id| model.param(id).len() as u64)
        .sum();
    let model_params = model.param_count() as u64;
    let base_floats = BaseOptimizer::new(cfg.optimizer.clone()).floats_per_param() as u64 * model_params;
    Ok(OverheadEstimate {
        experts: m,
        layers,
        macs_per_o_step: macs,
        projector_floats,
        expert_params,
        model_params,
        base_optimizer_floats: base_floats,
        optimizer_memory_ratio: (base_floats > 0).then(|| (base_floats + projector_floats) as f64 / base_floats as f64),
    })
}

/// Input and output widths of the configured task without materializing
/// a large dataset when the shapes are known from the config.
pub fn task_shape(cfg: &ExperimentConfig) -> Result<(usize, usize)> {
    match &cfg.task {
        TaskConfig::SubspaceClusters { clusters, d_raw, .. } => Ok((*d_raw, *clusters)),
        TaskConfig::PiecewiseRegression { d_raw, outputs, .. } => Ok((*d_raw, *outputs)),
        TaskConfig::Csv { .. } => {
            let ds = cfg.task.build(cfg.seeds[0])?;
            Ok((ds.features(), ds.output_width()))
        }
    }
}

/// Parameters of θ only, for checks that compare expert weights.
pub fn expert_param_ids(model: &MoEModel) -> Vec<ParamId> {
    model.param_ids().into_iter().filter(|id| id.is_expert()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ExperimentConfig {
        ExperimentConfig {
            task: TaskConfig::SubspaceClusters {
                clusters: 3,
                d_raw: 8,
                n_per_cluster: 40,
                subspace_dim: 2,
                noise_std: 0.1,
                center: 2.0,
            },
            model: ModelConfig {
                d: 6,
                h: 8,
                experts: 3,
                ..ModelConfig::default()
            },
            epochs: 2,
            batch_size: 16,
            seeds: vec![1, 2],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_rejects_unknown_keys_with_path() {
        let err = ExperimentConfig::from_json(r#"{"omoe": {"s": 5, "bogus": 1}}"#).unwrap_err();
        match err {
            LabError::Config { path, .. } => assert!(path.starts_with("omoe"), "{path}"),
            other => panic!("{other:?}"),
        }
        let err = ExperimentConfig::from_json(r#"{"omoe": {"s": 1}}"#).unwrap_err();
        assert!(matches!(err, LabError::Config { ref path, .. } if path == "omoe.s"));
    }

    #[test]
    fn overrides_apply_dotted_paths() {
        let cfg = ExperimentConfig::with_overrides(
            ExperimentConfig::default().to_value(),
            &["omoe.s=7".into(), "model.routing=DenseSoft".into(), "optimizer.kind=sgd".into()],
        )
        .unwrap();
        assert_eq!(cfg.omoe.s, 7);
        assert_eq!(cfg.model.routing, RoutingMode::DenseSoft);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Sgd);
        assert!(ExperimentConfig::with_overrides(ExperimentConfig::default().to_value(), &["nonsense".into()]).is_err());
    }

    #[test]
    fn single_expert_with_omoe_is_a_config_error() {
        let mut cfg = quick();
        cfg.model.experts = 1;
        let err = run(&cfg).unwrap_err();
        assert!(err.to_string().contains("omoe.enabled=false"));
        cfg.omoe.enabled = false;
        assert!(run(&cfg).is_ok());
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = quick();
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        assert_eq!(a.report.runs.len(), 2);
        let t = &a.report.runs[0].steps;
        assert!(t.o_steps > 0 && t.r_steps > 0);
    }

    #[test]
    fn ablation_validation_and_shapes() {
        let cfg = quick();
        assert!(ablate_skip(&cfg, &[5, 5]).is_err());
        let single = ablate_skip(&cfg, &[5]).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.rows[0].normalized_variance, 1.0);
        let direct = run(&cfg).unwrap();
        assert_eq!(single.reports[0], direct.report);

        assert!(ablate_experts(&cfg, &[1, 2]).is_err());
        let mut small = cfg.clone();
        small.seeds = vec![3];
        small.epochs = 1;
        let ex = ablate_experts(&small, &[2, 4]).unwrap();
        assert_eq!(ex.reports.len(), 4);
        assert_eq!(ex.rows.len(), 2);
        assert_eq!(ex.rows[1].omoe_token_shares.len(), 4);

        assert!(compare_optimizers(&small, &[], &BTreeMap::new()).is_err());
        let cmp = compare_optimizers(&small, &[OptimizerKind::Sgd], &BTreeMap::new()).unwrap();
        assert_eq!(cmp.reports.len(), 2);
    }

    #[test]
    fn overhead_closed_form() {
        let mut cfg = quick();
        cfg.model.experts = 1;
        cfg.omoe.enabled = false;
        let est = overhead_report(&cfg, 8, 3).unwrap();
        assert!(est.layers.iter().all(|l| l.averaging_macs == 0));

        let dims = ModelDims {
            d_raw: 3,
            d: 2,
            h: 2,
            c: 2,
        };
        let mut buffered = BTreeMap::new();
        buffered.insert((0, Layer::First), 1);
        // one rank-one update on a 2-wide projector: 3·4 + 2·2
        let rls_only = predict_o_step_macs(&dims, 2, &buffered) - predict_o_step_macs(&dims, 2, &BTreeMap::new());
        assert_eq!(rls_only, 16);
    }

    #[test]
    fn median_and_stat() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(planned_accumulations(10, 5), 8);
    }
}
