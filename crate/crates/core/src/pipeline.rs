//! End-to-end drivers behind the CLI subcommands. Each driver reuses cached
//! artifacts (base checkpoint, adapter files) when their config hash
//! matches and recomputes them otherwise, so repeated runs are fast and
//! byte-reproducible.
//!
//! Output layout under the config's `output_dir`:
//!   base.ckpt                         base-model checkpoint
//!   adapters/<task>.adapter           one adapter file per upstream task
//!   adapters/<task>.head.json         retained upstream head (zero-shot)
//!   reports/bench.{csv,json}          full grid report
//!   reports/bench_summary.csv         mean/std aggregates
//!   reports/weights_summary.csv       per-upstream mean weights
//!   reports/adapt-<cell>.csv          single-cell report rows
//!   weights/<cell>.csv                per-site learned weights
//!   analysis/{cka.csv,weights.csv,alignment.json}

use std::path::PathBuf;

use crate::analysis::{cka_map, export_maps, heat_grid_csv, weight_map};
use crate::error::{Error, Result};
use crate::io::{
    aggregates_csv, atomic_write, load_adapter, load_checkpoint, report_csv, report_json,
    save_adapter, save_checkpoint, weight_summaries_csv, AblationKind, AdapterFileMeta, RunConfig,
};
use crate::model::BaseModel;
use crate::tasks::{label_shift_with_sizes, make_entangled_suite, sample_episode, SuiteSpec};
use crate::train::{
    adapt, lookup, pretrain_base, run_grid, train_upstream, AdaptContext, EvalReport, GridInputs,
    ReportRow, TrainedUpstream, WeightDump,
};

pub struct OutPaths {
    pub report_csv: PathBuf,
    pub report_json: PathBuf,
    pub summary_csv: PathBuf,
    pub weights_csv: PathBuf,
}

fn base_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("base.ckpt")
}

fn adapter_path(cfg: &RunConfig, task_id: &str) -> PathBuf {
    cfg.output_dir.join("adapters").join(format!("{task_id}.adapter"))
}

fn head_path(cfg: &RunConfig, task_id: &str) -> PathBuf {
    cfg.output_dir.join("adapters").join(format!("{task_id}.head.json"))
}

/// Loads the cached base checkpoint when it matches this config, otherwise
/// pretrains and saves it.
pub fn ensure_base(cfg: &RunConfig, suite: &SuiteSpec) -> Result<BaseModel> {
    let path = base_path(cfg);
    let hash = cfg.config_hash();
    if path.exists() {
        if let Ok((base, stored_hash)) = load_checkpoint(&path) {
            if stored_hash == hash && base.config == cfg.model {
                return Ok(base);
            }
        }
    }
    let base = pretrain_base(suite, &cfg.model, &cfg.hyperparams, cfg.pipeline_seed)?;
    save_checkpoint(&base, &hash, &path)?;
    Ok(base)
}

/// Loads or trains the adapter set + retained head of one upstream task.
pub fn ensure_upstream(
    cfg: &RunConfig,
    suite: &SuiteSpec,
    base: &BaseModel,
    index: usize,
) -> Result<TrainedUpstream> {
    let task = suite.upstream.get(index).ok_or_else(|| {
        Error::Argument(format!(
            "task index {index} out of range for {} upstream tasks",
            suite.upstream.len()
        ))
    })?;
    let hash = cfg.config_hash();
    let set_path = adapter_path(cfg, &task.id);
    let head_file = head_path(cfg, &task.id);
    if set_path.exists() && head_file.exists() {
        if let Ok((set, meta)) = load_adapter(&set_path, &cfg.model.structural_hash()) {
            if meta.config_hash == hash {
                let head_bytes = crate::io::read_file(&head_file)?;
                if let Ok(head) = serde_json::from_slice(&head_bytes) {
                    return Ok(TrainedUpstream { set, head });
                }
            }
        }
    }
    let trained = train_upstream(
        base,
        task,
        &cfg.hyperparams,
        cfg.rank,
        cfg.alpha,
        cfg.pipeline_seed,
    )?;
    let meta = AdapterFileMeta {
        config_hash: hash,
        model_hash: cfg.model.structural_hash(),
        seed: cfg.pipeline_seed,
    };
    save_adapter(&trained.set, &meta, &set_path)?;
    let head_json = serde_json::to_string_pretty(&trained.head)
        .map_err(|e| Error::Format(format!("head json: {e}")))?;
    atomic_write(&head_file, head_json.as_bytes())?;
    Ok(trained)
}

pub fn ensure_all_upstream(
    cfg: &RunConfig,
    suite: &SuiteSpec,
    base: &BaseModel,
) -> Result<Vec<TrainedUpstream>> {
    (0..suite.upstream.len())
        .map(|i| ensure_upstream(cfg, suite, base, i))
        .collect()
}

/// `pretrain` subcommand: produce (or refresh) the base checkpoint.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let suite = cfg.build_suite()?;
    ensure_base(cfg, &suite)?;
    Ok(base_path(cfg))
}

/// `train-upstream` subcommand: produce one upstream adapter file.
pub fn cmd_train_upstream(cfg: &RunConfig, task_index: usize) -> Result<PathBuf> {
    let suite = cfg.build_suite()?;
    let base = ensure_base(cfg, &suite)?;
    let trained = ensure_upstream(cfg, &suite, &base, task_index)?;
    Ok(adapter_path(cfg, &trained.set.provenance))
}

/// `adapt` subcommand: one (method, k, seed) cell. Writes a one-row report
/// and, for learned composition, the per-site weight grid. Fails loudly
/// (unlike grid cells) so the exit code reflects the error kind.
pub fn cmd_adapt(
    cfg: &RunConfig,
    method_name: &str,
    k: crate::tasks::KShot,
    seed: u64,
) -> Result<(PathBuf, f64)> {
    let suite = cfg.build_suite()?;
    let base = ensure_base(cfg, &suite)?;
    let upstream = ensure_all_upstream(cfg, &suite, &base)?;
    let method = lookup(method_name)?;
    let episode = sample_episode(&suite.downstream, k, seed)?;
    let ctx = AdaptContext {
        base: &base,
        upstream: &upstream,
        suite: &suite,
        episode: &episode,
        hp: &cfg.hyperparams,
        rank: cfg.rank,
        alpha: cfg.alpha,
        seed,
    };
    let model = adapt(method, &ctx)?;
    let accuracy = model.accuracy(&episode.query_x, &episode.query_y)?;

    let mut report = EvalReport::default();
    report.rows.push(ReportRow {
        suite: suite.id.clone(),
        regime: suite.regime.tag().to_string(),
        method: method.name().to_string(),
        detail: String::new(),
        k,
        seed,
        accuracy,
        theta: model.theta,
    });
    let hash = cfg.config_hash();
    let cell = format!("{}-k{}-s{}", method.name(), k, seed);
    let path = cfg.output_dir.join("reports").join(format!("adapt-{cell}.csv"));
    atomic_write(&path, report_csv(&report, &hash).as_bytes())?;
    if let Some(weights) = &model.weights {
        let grid = weight_map(weights)?;
        let wpath = cfg.output_dir.join("weights").join(format!("{cell}.csv"));
        atomic_write(&wpath, heat_grid_csv(&grid).as_bytes())?;
    }
    Ok((path, accuracy))
}

fn write_reports(cfg: &RunConfig, report: &EvalReport, stem: &str) -> Result<OutPaths> {
    let hash = cfg.config_hash();
    let dir = cfg.output_dir.join("reports");
    let paths = OutPaths {
        report_csv: dir.join(format!("{stem}.csv")),
        report_json: dir.join(format!("{stem}.json")),
        summary_csv: dir.join(format!("{stem}_summary.csv")),
        weights_csv: dir.join("weights_summary.csv"),
    };
    atomic_write(&paths.report_csv, report_csv(report, &hash).as_bytes())?;
    atomic_write(&paths.report_json, report_json(report, &hash)?.as_bytes())?;
    atomic_write(&paths.summary_csv, aggregates_csv(report, &hash).as_bytes())?;
    atomic_write(&paths.weights_csv, weight_summaries_csv(report, &hash).as_bytes())?;
    for WeightDump { tag, weights } in &report.weight_dumps {
        let grid = weight_map(weights)?;
        let path = cfg.output_dir.join("weights").join(format!("{tag}.csv"));
        atomic_write(&path, heat_grid_csv(&grid).as_bytes())?;
    }
    Ok(paths)
}

/// `bench` subcommand: the full factorial over the configured suite.
pub fn cmd_bench(cfg: &RunConfig) -> Result<(OutPaths, EvalReport)> {
    let suite = cfg.build_suite()?;
    let base = ensure_base(cfg, &suite)?;
    let upstream = ensure_all_upstream(cfg, &suite, &base)?;
    let methods: Vec<_> = cfg
        .methods
        .iter()
        .map(|m| lookup(m))
        .collect::<Result<Vec<_>>>()?;
    let inputs = GridInputs {
        suite: &suite,
        config: &cfg.model,
        base: &base,
        upstream: &upstream,
        hp: &cfg.hyperparams,
        rank: cfg.rank,
        alpha: cfg.alpha,
    };
    let report = run_grid(&inputs, &methods, &cfg.k_grid, &cfg.seeds, "")?;
    let paths = write_reports(cfg, &report, "bench")?;
    Ok((paths, report))
}

/// `ablate` subcommand, dispatching on the configured kind.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<(OutPaths, EvalReport)> {
    let report = match cfg.ablation.kind {
        AblationKind::ScalingN => ablate_scaling_n(cfg)?,
        AblationKind::SplitSize => ablate_split_size(cfg)?,
        AblationKind::Rank => ablate_rank(cfg)?,
        AblationKind::Entangled => ablate_entangled(cfg)?,
    };
    let stem = match cfg.ablation.kind {
        AblationKind::ScalingN => "ablate_scaling_n",
        AblationKind::SplitSize => "ablate_split_size",
        AblationKind::Rank => "ablate_rank",
        AblationKind::Entangled => "ablate_entangled",
    };
    let paths = write_reports(cfg, &report, stem)?;
    Ok((paths, report))
}

/// Scaling the number of upstream modules on a task-shift rotation:
/// `n = 1` enumerates every single upstream separately (the single-module
/// spread), larger `n` composes the first `n` upstream sets.
fn ablate_scaling_n(cfg: &RunConfig) -> Result<EvalReport> {
    let mut suite_cfg = cfg.suite.clone();
    suite_cfg.regime = crate::tasks::Regime::TaskShift;
    let max_n = cfg.ablation.n_grid.iter().copied().max().unwrap_or(1);
    suite_cfg.n_upstream = suite_cfg.n_upstream.max(max_n);
    let suite = suite_cfg.build(cfg.model.input_dim)?;

    let base = pretrain_base(&suite, &cfg.model, &cfg.hyperparams, cfg.pipeline_seed)?;
    let upstream = crate::train::train_all_upstream(
        &base,
        &suite,
        &cfg.hyperparams,
        cfg.rank,
        cfg.alpha,
        cfg.pipeline_seed,
    )?;

    let k_grid = [cfg.ablation.k];
    let mut merged = EvalReport::default();
    for &n in &cfg.ablation.n_grid {
        if n == 0 || n > upstream.len() {
            return Err(Error::Config(format!(
                "n_grid entry {n} out of range for {} upstream tasks",
                upstream.len()
            )));
        }
        if n == 1 {
            for (i, single) in upstream.iter().enumerate() {
                let inputs = GridInputs {
                    suite: &suite,
                    config: &cfg.model,
                    base: &base,
                    upstream: std::slice::from_ref(single),
                    hp: &cfg.hyperparams,
                    rank: cfg.rank,
                    alpha: cfg.alpha,
                };
                let detail = format!("n=1:{}", suite.upstream[i].id);
                merged.merge(run_grid(
                    &inputs,
                    &[lookup("uniform_composition")?],
                    &k_grid,
                    &cfg.seeds,
                    &detail,
                )?);
            }
        } else {
            let inputs = GridInputs {
                suite: &suite,
                config: &cfg.model,
                base: &base,
                upstream: &upstream[..n],
                hp: &cfg.hyperparams,
                rank: cfg.rank,
                alpha: cfg.alpha,
            };
            let methods = [lookup("uniform_composition")?, lookup("learned_composition")?];
            merged.merge(run_grid(&inputs, &methods, &k_grid, &cfg.seeds, &format!("n={n}"))?);
        }
    }
    Ok(merged)
}

/// Splitting one fixed upstream label pool into more, smaller tasks.
fn ablate_split_size(cfg: &RunConfig) -> Result<EvalReport> {
    let mut merged = EvalReport::default();
    let k_grid = [cfg.ablation.k];
    let mut base_cache: Option<(SuiteSpec, BaseModel)> = None;
    for &splits in &cfg.ablation.split_grid {
        let suite = label_shift_with_sizes(
            8,
            cfg.ablation.upstream_pool,
            splits,
            cfg.model.input_dim,
            cfg.suite.noise_sigma,
            cfg.suite.seed,
        )?;
        // the base task is identical across splits; pretrain once
        let base = match &base_cache {
            Some((cached_suite, base)) if cached_suite.base_task == suite.base_task => base.clone(),
            _ => {
                let base = pretrain_base(&suite, &cfg.model, &cfg.hyperparams, cfg.pipeline_seed)?;
                base_cache = Some((suite.clone(), base.clone()));
                base
            }
        };
        let upstream = crate::train::train_all_upstream(
            &base,
            &suite,
            &cfg.hyperparams,
            cfg.rank,
            cfg.alpha,
            cfg.pipeline_seed,
        )?;
        let inputs = GridInputs {
            suite: &suite,
            config: &cfg.model,
            base: &base,
            upstream: &upstream,
            hp: &cfg.hyperparams,
            rank: cfg.rank,
            alpha: cfg.alpha,
        };
        let methods = [lookup("uniform_composition")?, lookup("learned_composition")?];
        merged.merge(run_grid(
            &inputs,
            &methods,
            &k_grid,
            &cfg.seeds,
            &format!("splits={splits}"),
        )?);
    }
    Ok(merged)
}

/// Rank grid plus a mixed-rank round where upstream task `i` trains at
/// `rank_grid[i % len]`; composition must accept the heterogeneous sets.
fn ablate_rank(cfg: &RunConfig) -> Result<EvalReport> {
    let suite = cfg.build_suite()?;
    let base = pretrain_base(&suite, &cfg.model, &cfg.hyperparams, cfg.pipeline_seed)?;
    let k_grid = [cfg.ablation.k];
    let methods = [
        lookup("lora_scratch")?,
        lookup("uniform_composition")?,
        lookup("learned_composition")?,
    ];
    let mut merged = EvalReport::default();

    let train_at = |rank: usize| -> Result<Vec<TrainedUpstream>> {
        suite
            .upstream
            .iter()
            .map(|task| {
                train_upstream(&base, task, &cfg.hyperparams, rank, cfg.alpha, cfg.pipeline_seed)
            })
            .collect()
    };

    for &rank in &cfg.ablation.rank_grid {
        let upstream = train_at(rank)?;
        let inputs = GridInputs {
            suite: &suite,
            config: &cfg.model,
            base: &base,
            upstream: &upstream,
            hp: &cfg.hyperparams,
            rank,
            alpha: cfg.alpha,
        };
        merged.merge(run_grid(&inputs, &methods, &k_grid, &cfg.seeds, &format!("r={rank}"))?);
    }

    // heterogeneous ranks across upstream sets
    let grid = &cfg.ablation.rank_grid;
    if grid.len() > 1 {
        let upstream: Vec<TrainedUpstream> = suite
            .upstream
            .iter()
            .enumerate()
            .map(|(i, task)| {
                train_upstream(
                    &base,
                    task,
                    &cfg.hyperparams,
                    grid[i % grid.len()],
                    cfg.alpha,
                    cfg.pipeline_seed,
                )
            })
            .collect::<Result<_>>()?;
        let inputs = GridInputs {
            suite: &suite,
            config: &cfg.model,
            base: &base,
            upstream: &upstream,
            hp: &cfg.hyperparams,
            rank: cfg.rank,
            alpha: cfg.alpha,
        };
        let methods = [lookup("uniform_composition")?, lookup("learned_composition")?];
        merged.merge(run_grid(&inputs, &methods, &k_grid, &cfg.seeds, "r=mixed")?);
    }
    Ok(merged)
}

/// Downstream label windows that coincide or overlap with upstream blocks.
fn ablate_entangled(cfg: &RunConfig) -> Result<EvalReport> {
    let mut merged = EvalReport::default();
    let k_grid = [cfg.ablation.k];
    let n_upstream = cfg.suite.n_upstream.max(4);
    for &window in &cfg.ablation.entangled_windows {
        let suite = make_entangled_suite(
            n_upstream,
            window,
            cfg.model.input_dim,
            cfg.suite.noise_sigma,
            cfg.suite.seed,
        )?;
        let base = pretrain_base(&suite, &cfg.model, &cfg.hyperparams, cfg.pipeline_seed)?;
        let upstream = crate::train::train_all_upstream(
            &base,
            &suite,
            &cfg.hyperparams,
            cfg.rank,
            cfg.alpha,
            cfg.pipeline_seed,
        )?;
        let inputs = GridInputs {
            suite: &suite,
            config: &cfg.model,
            base: &base,
            upstream: &upstream,
            hp: &cfg.hyperparams,
            rank: cfg.rank,
            alpha: cfg.alpha,
        };
        let methods = [lookup("uniform_composition")?, lookup("learned_composition")?];
        merged.merge(run_grid(
            &inputs,
            &methods,
            &k_grid,
            &cfg.seeds,
            &format!("window={window}"),
        )?);
    }
    Ok(merged)
}

pub struct CkaOutput {
    pub cka_csv: PathBuf,
    pub weights_csv: PathBuf,
    pub alignment_json: PathBuf,
    pub alignment_fraction: f64,
}

/// `analyze-cka` subcommand: trains a ground-truth adapter on the full
/// downstream pool, runs one learned-composition adaptation for the weight
/// map, computes the CKA map against the ground truth over the downstream
/// query probe, and exports both grids plus the alignment summary.
pub fn cmd_analyze_cka(cfg: &RunConfig) -> Result<CkaOutput> {
    let suite = cfg.build_suite()?;
    let base = ensure_base(cfg, &suite)?;
    let upstream = ensure_all_upstream(cfg, &suite, &base)?;

    let gt = train_upstream(
        &base,
        &suite.downstream,
        &cfg.hyperparams,
        cfg.rank,
        cfg.alpha,
        cfg.pipeline_seed,
    )?;

    let episode = sample_episode(&suite.downstream, cfg.cka.k, cfg.cka.weights_seed)?;
    let ctx = AdaptContext {
        base: &base,
        upstream: &upstream,
        suite: &suite,
        episode: &episode,
        hp: &cfg.hyperparams,
        rank: cfg.rank,
        alpha: cfg.alpha,
        seed: cfg.cka.weights_seed,
    };
    let learned = adapt(lookup("learned_composition")?, &ctx)?;
    let weights = learned
        .weights
        .ok_or_else(|| Error::Config("learned composition produced no weights".into()))?;

    let sets: Vec<_> = upstream.iter().map(|u| u.set.clone()).collect();
    let probe = &episode.query_x;
    let cka = cka_map(&base, &sets, &gt.set, probe, cfg.cka.centering)?;
    let wmap = weight_map(&weights)?;
    let fraction = cka.alignment_fraction(&wmap)?;
    let dir = cfg.output_dir.join("analysis");
    let (cka_csv, weights_csv, alignment_json) = export_maps(&cka, &wmap, &dir)?;
    Ok(CkaOutput {
        cka_csv,
        weights_csv,
        alignment_json,
        alignment_fraction: fraction,
    })
}
