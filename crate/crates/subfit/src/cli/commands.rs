//! Phase implementations behind the `subfit` binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cli::manifest::PhaseRecorder;
use crate::cli::{
    CheckpointChoice, GeneratorKind, GeneratorSpec, OodScore, PosteriorKind,
    RunConfig,
};
use crate::data::{
    expand_quadratic, gaussian_blobs, mean_feature_norm, read_csv, rotate_features, two_moons,
    write_csv, Dataset, Split,
};
use crate::error::{Error, Result};
use crate::laplace::{
    default_precision_grid, fit_ggn_diag, fit_kfac, tune_prior_precision, Curvature, LaplaceMeta,
    LaplacePosterior, Structure,
};
use crate::net::{
    adapt_network, checkpoint_load, checkpoint_save, flatten, loss_nll, train_with_schedule,
    Layer, LrSchedule, Network, Regime, ThetaLayout,
};
use crate::numerics::{Matrix, SeededRng, WelfordState};
use crate::predictive::{
    accuracy, auroc, bma_predict, decompose, ece, nll, wasserstein1, MapPoint, ThetaSampler,
    UncertaintyTriple,
};
use crate::projections::{
    build, load_projection, save_projection, BuildOptions, ProjectionKind, ProjectionPair,
};
use crate::swag::{SwagCollector, SwagMeta, SwagPosterior};

/// CLI-level overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub train_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub posterior: Option<PosteriorKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    GenData,
    Pretrain,
    Project,
    TrainMap,
    FitSwag,
    FitLaplace,
    Evaluate,
    Ood,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::GenData => "gen-data",
            Phase::Pretrain => "pretrain",
            Phase::Project => "project",
            Phase::TrainMap => "train-map",
            Phase::FitSwag => "fit-swag",
            Phase::FitLaplace => "fit-laplace",
            Phase::Evaluate => "evaluate",
            Phase::Ood => "ood",
        }
    }
}

// Purpose tags mixed into the master seed for independent streams.
const TAG_DATA_TRAIN: u64 = 0x11;
const TAG_DATA_VAL: u64 = 0x12;
const TAG_DATA_TEST: u64 = 0x13;
const TAG_DATA_PRETRAIN: u64 = 0x14;
const TAG_DATA_PRETRAIN_VAL: u64 = 0x15;
const TAG_DATA_OOD: u64 = 0x20;
const TAG_INIT: u64 = 0x31;
const TAG_PRETRAIN: u64 = 0x32;
const TAG_TRAIN_MAP: u64 = 0x33;
const TAG_SWAG: u64 = 0x34;
const TAG_PROJECT: u64 = 0x35;
const TAG_EVAL: u64 = 0x36;

/// splitmix64-style mixer keeping per-purpose streams well separated.
fn derived_seed(master: u64, tag: u64) -> u64 {
    let mut x = master ^ tag.rotate_left(17) ^ 0x6A09_E667_F3BC_C908;
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub struct RunContext {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub config_bytes: Vec<u8>,
}

pub fn load_context(config_path: &Path, overrides: &Overrides) -> Result<RunContext> {
    let config_bytes = std::fs::read(config_path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", config_path.display())))?;
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(f) = overrides.train_fraction {
        cfg.train.train_fraction = f;
        cfg.train.validate()?;
    }
    let run_dir = overrides
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::config("no output directory: set `out_dir` or pass --out"))?;
    // Master seed drives every phase stream; per-phase seeds are derived.
    cfg.pretrain.seed = derived_seed(cfg.seed, TAG_PRETRAIN);
    cfg.train.seed = derived_seed(cfg.seed, TAG_TRAIN_MAP);
    Ok(RunContext {
        cfg,
        run_dir,
        config_bytes,
    })
}

pub fn run_phase(phase: Phase, ctx: &RunContext, overrides: &Overrides) -> Result<()> {
    let mut rec = PhaseRecorder::start(&ctx.run_dir, phase.name());
    let posterior = overrides.posterior.unwrap_or_default();
    match phase {
        Phase::GenData => gen_data(ctx, &mut rec)?,
        Phase::Pretrain => pretrain(ctx, &mut rec)?,
        Phase::Project => project(ctx, &mut rec)?,
        Phase::TrainMap => train_map_phase(ctx, &mut rec)?,
        Phase::FitSwag => fit_swag(ctx, &mut rec)?,
        Phase::FitLaplace => fit_laplace(ctx, &mut rec)?,
        Phase::Evaluate => evaluate(ctx, &mut rec, posterior)?,
        Phase::Ood => ood(ctx, &mut rec, posterior)?,
    }
    rec.finish(&ctx.config_bytes)
}

// ---------------------------------------------------------------- datasets

struct DataFiles {
    pretrain_train: PathBuf,
    pretrain_val: Option<PathBuf>,
    train: PathBuf,
    val: Option<PathBuf>,
    test: PathBuf,
    /// (name, path) pairs; the first entry is the standard shift.
    ood: Vec<(String, PathBuf)>,
}

fn data_files(ctx: &RunContext) -> DataFiles {
    match &ctx.cfg.dataset.csv {
        Some(paths) => DataFiles {
            pretrain_train: paths.pretrain_train.clone(),
            pretrain_val: paths.pretrain_val.clone(),
            train: paths.train.clone(),
            val: paths.val.clone(),
            test: paths.test.clone(),
            ood: paths
                .ood
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("ood_{i}"), p.clone()))
                .collect(),
        },
        None => {
            let dir = ctx.run_dir.join("gen-data");
            let n_ood = ctx
                .cfg
                .dataset
                .generator
                .as_ref()
                .map_or(0, |g| g.ood_shifts.len());
            DataFiles {
                pretrain_train: dir.join("pretrain_train.csv"),
                pretrain_val: Some(dir.join("pretrain_val.csv")),
                train: dir.join("train.csv"),
                val: Some(dir.join("val.csv")),
                test: dir.join("test.csv"),
                ood: (0..n_ood)
                    .map(|i| (format!("ood_{i}"), dir.join(format!("ood_{i}.csv"))))
                    .collect(),
            }
        }
    }
}

fn load_dataset(train: &Path, val: Option<&Path>) -> Result<Dataset> {
    let train = read_csv(train)?;
    let val = val.map(read_csv).transpose()?;
    Ok(Dataset::new(train, val))
}

fn generate_task(spec: &GeneratorSpec, n: usize, seed: u64) -> Split {
    let mut rng = SeededRng::new(seed);
    match spec.kind {
        GeneratorKind::TwoMoons => two_moons(n, spec.noise, &mut rng),
        GeneratorKind::Blobs => gaussian_blobs(n, &spec.blob_means, spec.blob_std, &mut rng),
    }
}

fn finalize_features(spec: &GeneratorSpec, split: Split) -> Split {
    if spec.quadratic_features {
        expand_quadratic(&split)
    } else {
        split
    }
}

fn gen_data(ctx: &RunContext, rec: &mut PhaseRecorder) -> Result<()> {
    let spec = ctx.cfg.dataset.generator.as_ref().ok_or_else(|| {
        Error::config("gen-data requires a `generator` dataset spec (csv paths are external)")
    })?;
    let dir = rec.phase_dir();
    std::fs::create_dir_all(&dir)?;
    let seed = ctx.cfg.seed;

    let splits = [
        ("train.csv", spec.n_train, TAG_DATA_TRAIN),
        ("val.csv", spec.n_val, TAG_DATA_VAL),
        ("test.csv", spec.n_test, TAG_DATA_TEST),
    ];
    for (name, n, tag) in splits {
        let split = finalize_features(spec, generate_task(spec, n, derived_seed(seed, tag)));
        write_csv(dir.join(name), &split)?;
    }

    // Pretraining task: the same family rotated about the origin, so the
    // frozen base weights are informative but imperfect for the target.
    let pre = generate_task(spec, spec.pretrain_n_train, derived_seed(seed, TAG_DATA_PRETRAIN));
    write_csv(
        dir.join("pretrain_train.csv"),
        &finalize_features(spec, rotate_features(&pre, spec.pretrain_rotation_degrees)),
    )?;
    let pre_val = generate_task(
        spec,
        spec.pretrain_n_val,
        derived_seed(seed, TAG_DATA_PRETRAIN_VAL),
    );
    write_csv(
        dir.join("pretrain_val.csv"),
        &finalize_features(spec, rotate_features(&pre_val, spec.pretrain_rotation_degrees)),
    )?;

    // Shifted-blob OOD sets centered away from the task support.
    for (i, shift) in spec.ood_shifts.iter().enumerate() {
        let means = [
            [shift[0] + 0.5, shift[1] + 0.5],
            [shift[0] - 0.5, shift[1] - 0.5],
        ];
        let mut rng = SeededRng::new(derived_seed(seed, TAG_DATA_OOD + i as u64));
        let split = finalize_features(spec, gaussian_blobs(spec.ood_n, &means, spec.ood_std, &mut rng));
        write_csv(dir.join(format!("ood_{i}.csv")), &split)?;
        rec.note(
            &format!("ood_{i}_mean_feature_norm"),
            mean_feature_norm(&split),
        );
    }

    rec.record_tree(&dir)?;
    Ok(())
}

// ------------------------------------------------------------------ phases

fn require_dir(path: PathBuf, phase: &'static str, hint: &'static str) -> Result<PathBuf> {
    if !path.join("manifest.json").exists() {
        return Err(Error::MissingArtifact { phase, path, hint });
    }
    Ok(path)
}

fn pretrain(ctx: &RunContext, rec: &mut PhaseRecorder) -> Result<()> {
    let files = data_files(ctx);
    let data = load_dataset(&files.pretrain_train, files.pretrain_val.as_deref())?;
    let widths: Vec<usize> = std::iter::once(data.train.x.cols())
        .chain(ctx.cfg.model.hidden.iter().copied())
        .chain(std::iter::once(data.classes))
        .collect();
    let mut net = Network::mlp(
        &widths,
        ctx.cfg.model.activation,
        derived_seed(ctx.cfg.seed, TAG_INIT),
    )?;
    let report = crate::net::train_map(&mut net, &data, &ctx.cfg.pretrain)?;

    let dir = rec.phase_dir();
    checkpoint_save(&net, dir.join("checkpoint"))?;
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&report.epochs)?,
    )?;
    rec.record_tree(&dir)?;
    rec.note("final_train_loss", report.epochs.last().map(|e| e.train_loss));
    Ok(())
}

/// Layers receiving adapters and the stored pair directories.
#[derive(Debug, Serialize, Deserialize)]
struct ProjectPlan {
    kind: ProjectionKind,
    rank: usize,
    layers: Vec<usize>,
}

fn adaptable_layers(net: &Network, rank: usize) -> Vec<usize> {
    let head = net
        .layers
        .iter()
        .rposition(|l| !matches!(l, Layer::Activation(_)))
        .unwrap_or(0);
    net.layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Plain(p)
                if i != head && p.weight.rows().min(p.weight.cols()) >= rank =>
            {
                Some(i)
            }
            _ => None,
        })
        .collect()
}

/// Per-layer input second moments over the (subsampled) whitening split.
fn layer_second_moments(
    net: &Network,
    x: &Matrix,
    layers: &[usize],
) -> Result<Vec<Matrix>> {
    let cache = net.forward_cached(x)?;
    let mut out = Vec::with_capacity(layers.len());
    for &idx in layers {
        let input = &cache_inputs(&cache)[idx];
        let mut state = WelfordState::new(input.cols());
        state.update(input)?;
        out.push(state.finalize()?);
    }
    Ok(out)
}

// Narrow accessor so the cache internals stay private to `net`.
fn cache_inputs(cache: &crate::net::ForwardCache) -> &[Matrix] {
    cache.layer_inputs()
}

fn project(ctx: &RunContext, rec: &mut PhaseRecorder) -> Result<()> {
    let base_dir = require_dir(
        ctx.run_dir.join("pretrain").join("checkpoint"),
        "project",
        "pretrain",
    )?;
    let base = checkpoint_load(base_dir)?;
    let spec = &ctx.cfg.projection;
    let layers = adaptable_layers(&base, spec.rank);
    if layers.is_empty() {
        return Err(Error::config(format!(
            "no layer can host a rank-{} adapter (head excluded)",
            spec.rank
        )));
    }

    let needs_whitening = matches!(
        spec.kind,
        ProjectionKind::Wsvd
            | ProjectionKind::Hybrid(crate::projections::ElemKind::Wsvd, _)
            | ProjectionKind::Hybrid(_, crate::projections::ElemKind::Wsvd)
    );
    let moments = if needs_whitening {
        let files = data_files(ctx);
        let whitening_split = match ctx.cfg.projection.whitening.as_deref() {
            None | Some("train") => read_csv(&files.train)?,
            Some("pretrain") => read_csv(&files.pretrain_train)?,
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown whitening source `{other}` (expected train or pretrain)"
                )))
            }
        };
        // Match the rows the MAP phase will actually train on.
        let rows = crate::net::subsample_indices(
            whitening_split.x.rows(),
            ctx.cfg.train.train_fraction,
            ctx.cfg.train.seed,
        );
        Some(layer_second_moments(
            &base,
            &whitening_split.x.select_rows(&rows),
            &layers,
        )?)
    } else {
        None
    };

    let dir = rec.phase_dir();
    std::fs::create_dir_all(&dir)?;
    for (pos, &layer_idx) in layers.iter().enumerate() {
        let w0 = match &base.layers[layer_idx] {
            Layer::Plain(l) => &l.weight,
            _ => unreachable!("adaptable_layers returns plain layers"),
        };
        let opts = BuildOptions {
            sigma_xx: moments.as_ref().map(|m| &m[pos]),
            ridge: spec.ridge,
            seed: spec
                .seed
                .unwrap_or_else(|| derived_seed(ctx.cfg.seed, TAG_PROJECT + layer_idx as u64)),
            permute: spec.permute,
        };
        let pair = build(w0, spec.kind, spec.rank, &opts)?;
        save_projection(dir.join(format!("layer_{layer_idx}")), &pair)?;
    }
    let plan = ProjectPlan {
        kind: spec.kind,
        rank: spec.rank,
        layers,
    };
    std::fs::write(dir.join("plan.json"), serde_json::to_string_pretty(&plan)?)?;
    rec.record_tree(&dir)?;
    Ok(())
}

fn load_adapted_network(ctx: &RunContext) -> Result<Network> {
    let base_dir = require_dir(
        ctx.run_dir.join("pretrain").join("checkpoint"),
        "train-map",
        "pretrain",
    )?;
    let base = checkpoint_load(base_dir)?;
    let project_dir = ctx.run_dir.join("project");
    let plan_path = project_dir.join("plan.json");
    if !plan_path.exists() {
        return Err(Error::MissingArtifact {
            phase: "train-map",
            path: plan_path,
            hint: "project",
        });
    }
    let plan: ProjectPlan = serde_json::from_str(&std::fs::read_to_string(&plan_path)?)?;
    let mut pairs: Vec<Option<ProjectionPair>> = vec![None; base.layers.len()];
    for &layer_idx in &plan.layers {
        let pair = load_projection(project_dir.join(format!("layer_{layer_idx}")))?;
        pairs[layer_idx] = Some(pair);
    }
    adapt_network(
        &base,
        pairs,
        ctx.cfg.train.alpha,
        ctx.cfg.train.regime == Regime::All,
    )
}

fn early_epoch(ctx: &RunContext) -> usize {
    ctx.cfg
        .laplace
        .checkpoint_epoch
        .unwrap_or(ctx.cfg.train.epochs / 2)
        .clamp(1, ctx.cfg.train.epochs)
}

fn train_map_phase(ctx: &RunContext, rec: &mut PhaseRecorder) -> Result<()> {
    let mut net = load_adapted_network(ctx)?;
    let files = data_files(ctx);
    let data = load_dataset(&files.train, files.val.as_deref())?;
    let cfg = &ctx.cfg.train;
    let early = early_epoch(ctx);
    let report = train_with_schedule(
        &mut net,
        &data,
        cfg,
        LrSchedule::WarmupLinear {
            lr: cfg.learning_rate,
            warmup_frac: cfg.warmup_frac,
        },
        cfg.epochs,
        &[early],
    )?;

    let dir = rec.phase_dir();
    checkpoint_save(&net, dir.join("checkpoint"))?;
    for (epoch, snapshot) in &report.checkpoints {
        checkpoint_save(snapshot, dir.join("checkpoint_early"))?;
        rec.note("early_checkpoint_epoch", epoch);
    }
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&report.epochs)?,
    )?;
    rec.record_tree(&dir)?;
    rec.note("train_rows", report.train_rows.len());
    rec.note("theta_dim", ThetaLayout::of(&net).dim);
    Ok(())
}

fn fit_swag(ctx: &RunContext, rec: &mut PhaseRecorder) -> Result<()> {
    let map_dir = require_dir(
        ctx.run_dir.join("train-map").join("checkpoint"),
        "fit-swag",
        "train-map",
    )?;
    let mut net = checkpoint_load(map_dir)?;
    let files = data_files(ctx);
    let data = load_dataset(&files.train, files.val.as_deref())?;

    let swag_cfg = &ctx.cfg.swag;
    let mut phase_cfg = ctx.cfg.train.clone();
    phase_cfg.seed = derived_seed(ctx.cfg.seed, TAG_SWAG);
    let lr = ctx.cfg.train.learning_rate * swag_cfg.lr_factor;
    let report = train_with_schedule(
        &mut net,
        &data,
        &phase_cfg,
        LrSchedule::Constant(lr),
        swag_cfg.epochs,
        &[],
    )?;

    let dim = flatten(&net).values.len();
    let mut collector = SwagCollector::new(dim, swag_cfg.k);
    for theta in &report.trajectory[swag_cfg.burn_in_epochs..] {
        collector.collect(&theta.values)?;
    }
    let posterior = collector.finalize()?;
    let meta = SwagMeta {
        k: swag_cfg.k,
        burn_in_epochs: swag_cfg.burn_in_epochs,
        snapshots: collector.count(),
    };
    let dir = rec.phase_dir();
    posterior.save(dir.join("posterior"), &meta)?;
    rec.record_tree(&dir)?;
    rec.note("snapshots", collector.count());
    Ok(())
}

fn laplace_checkpoint_dir(ctx: &RunContext, phase: &'static str) -> Result<PathBuf> {
    let name = match ctx.cfg.laplace.checkpoint {
        CheckpointChoice::Early => "checkpoint_early",
        CheckpointChoice::Final => "checkpoint",
    };
    require_dir(ctx.run_dir.join("train-map").join(name), phase, "train-map")
}

fn fit_laplace(ctx: &RunContext, rec: &mut PhaseRecorder) -> Result<()> {
    let net = checkpoint_load(laplace_checkpoint_dir(ctx, "fit-laplace")?)?;
    let files = data_files(ctx);
    let train = read_csv(&files.train)?;
    let rows = crate::net::subsample_indices(
        train.x.rows(),
        ctx.cfg.train.train_fraction,
        ctx.cfg.train.seed,
    );
    let x = train.x.select_rows(&rows);
    let y: Vec<usize> = rows.iter().map(|&i| train.y[i]).collect();

    let curv = match ctx.cfg.laplace.structure {
        Structure::Diag => Curvature::Diag(fit_ggn_diag(&net, &x)?),
        Structure::Kron => Curvature::Kron(fit_kfac(&net, &x)?),
    };
    let theta = flatten(&net);
    let data_nll = loss_nll(&net.forward(&x)?, &y)?;
    let grid = ctx
        .cfg
        .laplace
        .grid
        .clone()
        .unwrap_or_else(default_precision_grid);
    let lambda = tune_prior_precision(&curv, &theta.values, data_nll, x.rows(), &grid)?;
    let posterior =
        LaplacePosterior::new(theta.values, theta.layout.clone(), curv, lambda, x.rows())?;
    let meta = LaplaceMeta {
        structure: ctx.cfg.laplace.structure,
        lambda,
        grid,
        layout: theta.layout,
        n_data: x.rows(),
        checkpoint_epoch: Some(early_epoch(ctx)),
    };
    let dir = rec.phase_dir();
    posterior.save(dir.join("posterior"), &meta)?;
    rec.record_tree(&dir)?;
    rec.note("lambda", lambda);
    Ok(())
}

// -------------------------------------------------------------- evaluation

struct Predictor {
    net: Network,
    sampler: Box<dyn ThetaSampler>,
    samples: usize,
    name: &'static str,
}

fn load_predictor(ctx: &RunContext, kind: PosteriorKind, phase: &'static str) -> Result<Predictor> {
    match kind {
        PosteriorKind::Map => {
            let dir = require_dir(
                ctx.run_dir.join("train-map").join("checkpoint"),
                phase,
                "train-map",
            )?;
            let net = checkpoint_load(dir)?;
            let theta = flatten(&net).values;
            Ok(Predictor {
                net,
                sampler: Box::new(MapPoint(theta)),
                // A point posterior needs exactly one sample.
                samples: 1,
                name: "map",
            })
        }
        PosteriorKind::Swag => {
            let dir = require_dir(
                ctx.run_dir.join("train-map").join("checkpoint"),
                phase,
                "train-map",
            )?;
            let net = checkpoint_load(dir)?;
            let posterior_dir = ctx.run_dir.join("fit-swag").join("posterior");
            if !posterior_dir.join("meta.json").exists() {
                return Err(Error::MissingArtifact {
                    phase,
                    path: posterior_dir,
                    hint: "fit-swag",
                });
            }
            let (posterior, _) = SwagPosterior::load(posterior_dir)?;
            Ok(Predictor {
                net,
                sampler: Box::new(posterior),
                samples: ctx.cfg.swag.samples,
                name: "swag",
            })
        }
        PosteriorKind::Laplace => {
            let net = checkpoint_load(laplace_checkpoint_dir(ctx, phase)?)?;
            let posterior_dir = ctx.run_dir.join("fit-laplace").join("posterior");
            if !posterior_dir.join("meta.json").exists() {
                return Err(Error::MissingArtifact {
                    phase,
                    path: posterior_dir,
                    hint: "fit-laplace",
                });
            }
            let (posterior, _) = LaplacePosterior::load(posterior_dir)?;
            Ok(Predictor {
                net,
                sampler: Box::new(posterior),
                samples: ctx.cfg.laplace.samples,
                name: "laplace",
            })
        }
    }
}

/// Per-dataset predictive summary with per-input uncertainty triples.
struct PredictionSummary {
    mean_probs: Matrix,
    triples: Vec<UncertaintyTriple>,
}

fn predict_split(ctx: &RunContext, predictor: &Predictor, x: &Matrix) -> Result<PredictionSummary> {
    let out = bma_predict(
        &predictor.net,
        predictor.sampler.as_ref(),
        x,
        predictor.samples,
        derived_seed(ctx.cfg.seed, TAG_EVAL),
    )?;
    let triples = out.samples.per_input.iter().map(decompose).collect();
    Ok(PredictionSummary {
        mean_probs: out.mean_probs,
        triples,
    })
}

fn mean_of(triples: &[UncertaintyTriple], f: impl Fn(&UncertaintyTriple) -> f64) -> f64 {
    triples.iter().map(f).sum::<f64>() / triples.len().max(1) as f64
}

fn write_entropy_csv(path: &Path, triples: &[UncertaintyTriple]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["total", "aleatoric", "epistemic"])?;
    for t in triples {
        w.write_record([
            format!("{:?}", t.total),
            format!("{:?}", t.aleatoric),
            format!("{:?}", t.epistemic),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct MetricsJson {
    posterior: String,
    samples: usize,
    accuracy: f64,
    ece: f64,
    nll: f64,
    mean_total_entropy: f64,
    mean_aleatoric: f64,
    mean_epistemic: f64,
    auroc: Option<f64>,
    w1: Option<f64>,
}

fn evaluate(ctx: &RunContext, rec: &mut PhaseRecorder, kind: PosteriorKind) -> Result<()> {
    let predictor = load_predictor(ctx, kind, "evaluate")?;
    let files = data_files(ctx);
    let test = read_csv(&files.test)?;
    let summary = predict_split(ctx, &predictor, &test.x)?;

    let metrics = MetricsJson {
        posterior: predictor.name.to_string(),
        samples: predictor.samples,
        accuracy: accuracy(&summary.mean_probs, &test.y)?,
        ece: ece(&summary.mean_probs, &test.y, ctx.cfg.eval.ece_bins)?,
        nll: nll(&summary.mean_probs, &test.y)?,
        mean_total_entropy: mean_of(&summary.triples, |t| t.total),
        mean_aleatoric: mean_of(&summary.triples, |t| t.aleatoric),
        mean_epistemic: mean_of(&summary.triples, |t| t.epistemic),
        auroc: None,
        w1: None,
    };
    let dir = rec.phase_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join(format!("metrics-{}.json", predictor.name)),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    write_entropy_csv(
        &dir.join(format!("entropies-{}.csv", predictor.name)),
        &summary.triples,
    )?;
    rec.record_tree(&dir)?;
    Ok(())
}

#[derive(Serialize)]
struct OodDatasetJson {
    name: String,
    mean_total_entropy: f64,
    mean_epistemic: f64,
    auroc_total: f64,
    w1_total: f64,
    auroc_epistemic: f64,
    w1_epistemic: f64,
}

#[derive(Serialize)]
struct OodJson {
    posterior: String,
    samples: usize,
    score: String,
    id_mean_total_entropy: f64,
    id_mean_epistemic: f64,
    datasets: Vec<OodDatasetJson>,
}

fn ood(ctx: &RunContext, rec: &mut PhaseRecorder, kind: PosteriorKind) -> Result<()> {
    let predictor = load_predictor(ctx, kind, "ood")?;
    let files = data_files(ctx);
    if files.ood.is_empty() {
        return Err(Error::config("no OOD datasets configured"));
    }
    let dir = rec.phase_dir();
    std::fs::create_dir_all(&dir)?;

    let id_split = read_csv(&files.test)?;
    let id = predict_split(ctx, &predictor, &id_split.x)?;
    write_entropy_csv(
        &dir.join(format!("entropies-id-{}.csv", predictor.name)),
        &id.triples,
    )?;
    let id_total: Vec<f64> = id.triples.iter().map(|t| t.total).collect();
    let id_epi: Vec<f64> = id.triples.iter().map(|t| t.epistemic).collect();

    let mut datasets = Vec::new();
    for (name, path) in &files.ood {
        let split = read_csv(path)?;
        let summary = predict_split(ctx, &predictor, &split.x)?;
        write_entropy_csv(
            &dir.join(format!("entropies-{name}-{}.csv", predictor.name)),
            &summary.triples,
        )?;
        let total: Vec<f64> = summary.triples.iter().map(|t| t.total).collect();
        let epi: Vec<f64> = summary.triples.iter().map(|t| t.epistemic).collect();
        datasets.push(OodDatasetJson {
            name: name.clone(),
            mean_total_entropy: mean_of(&summary.triples, |t| t.total),
            mean_epistemic: mean_of(&summary.triples, |t| t.epistemic),
            auroc_total: auroc(&total, &id_total)?,
            w1_total: wasserstein1(&total, &id_total)?,
            auroc_epistemic: auroc(&epi, &id_epi)?,
            w1_epistemic: wasserstein1(&epi, &id_epi)?,
        });
    }

    let out = OodJson {
        posterior: predictor.name.to_string(),
        samples: predictor.samples,
        score: match ctx.cfg.eval.ood_score {
            OodScore::Total => "total".into(),
            OodScore::Epistemic => "epistemic".into(),
        },
        id_mean_total_entropy: mean_of(&id.triples, |t| t.total),
        id_mean_epistemic: mean_of(&id.triples, |t| t.epistemic),
        datasets,
    };
    std::fs::write(
        dir.join(format!("metrics-{}.json", predictor.name)),
        serde_json::to_string_pretty(&out)?,
    )?;
    rec.record_tree(&dir)?;
    Ok(())
}
