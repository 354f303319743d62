//! The five subcommands and their shared plumbing: run directories, logging,
//! config → core-struct builders, dataset loading, and metric/CSV emission.
//!
//! Configs are command-scoped: each command consumes exactly the sections it
//! acts on, and any other key in the file is rejected. Errors before the run
//! directory exists (bad config, missing inputs) are usage errors (exit 2);
//! anything after is a runtime failure (exit 1).

use crate::config::FlatConfig;
use crate::CliError;
use dtrec_core::arh::HaltPolicy;
use dtrec_core::backbone::{BackboneConfig, BackboneKind, Model};
use dtrec_core::data::{
    generate_synthetic, interactions_tsv, labels_tsv, load_interactions, load_labels,
    InteractionDataset, ShiftScope, Split, SyntheticConfig, UserClass,
};
use dtrec_core::eval::{
    evaluate, export_trajectories, spearman, steps_by_length_group, summarize, write_exits_csv,
    EvalOptions, ExitRule, MetricsReport, UserOutcome,
};
use dtrec_core::hps::{refresh_index, GranularitySchedule, KmeansParams};
use dtrec_core::training::{train as run_training, TrainConfig, Trainer, Variant};
use serde::Serialize;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

fn us(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

// ─── Run directories and logging ─────────────────────────────────────────────

/// Resolve the requested output directory without ever clobbering earlier
/// results: an existing empty directory is used as-is, an existing non-empty
/// one (or a file) pushes the run to `<name>-2`, `-3`, ….
fn create_run_dir(requested: &Path) -> Result<PathBuf, CliError> {
    if let Some(parent) = requested.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| rt(format!("run dir parent {}: {e}", parent.display())))?;
        }
    }
    match std::fs::create_dir(requested) {
        Ok(()) => return Ok(requested.to_path_buf()),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {}
        Err(e) => return Err(rt(format!("run dir {}: {e}", requested.display()))),
    }
    if requested.is_dir() {
        let empty = std::fs::read_dir(requested)
            .map_err(|e| rt(format!("run dir {}: {e}", requested.display())))?
            .next()
            .is_none();
        if empty {
            return Ok(requested.to_path_buf());
        }
    }
    let name = requested
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    for i in 2..=1000 {
        let cand = requested.with_file_name(format!("{name}-{i}"));
        match std::fs::create_dir(&cand) {
            Ok(()) => return Ok(cand),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(rt(format!("run dir {}: {e}", cand.display()))),
        }
    }
    Err(rt(format!("no free run directory near {} after 1000 suffixes", requested.display())))
}

/// Line-oriented run log, mirrored to stdout. Content is free of timestamps
/// so identical runs leave identical logs.
struct Log {
    file: std::fs::File,
}

impl Log {
    fn create(run: &Path) -> Result<Self, CliError> {
        let file = std::fs::File::create(run.join("log"))
            .map_err(|e| rt(format!("log in {}: {e}", run.display())))?;
        Ok(Log { file })
    }

    fn line(&mut self, s: &str) {
        println!("{s}");
        let _ = writeln!(self.file, "{s}");
    }
}

fn write_file(run: &Path, name: &str, content: &str) -> Result<(), CliError> {
    std::fs::write(run.join(name), content)
        .map_err(|e| rt(format!("writing {name} in {}: {e}", run.display())))
}

// ─── Config → core structs ───────────────────────────────────────────────────

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    Variant::all()
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = Variant::all().iter().map(|v| v.name()).collect();
            us(format!("variant {s:?} is not one of {}", names.join(", ")))
        })
}

fn parse_scope(s: &str) -> Result<ShiftScope, CliError> {
    match s {
        "sibling" => Ok(ShiftScope::Sibling),
        "cross_category" => Ok(ShiftScope::CrossCategory),
        other => Err(us(format!("data.scope {other:?} must be sibling or cross_category"))),
    }
}

fn parse_kind(s: &str) -> Result<BackboneKind, CliError> {
    match s {
        "attention" => Ok(BackboneKind::Attention),
        "gru" => Ok(BackboneKind::Gru),
        other => Err(us(format!("backbone.kind {other:?} must be attention or gru"))),
    }
}

/// Whether `train.variant` and top-level `seed` belong to this command
/// (single training run) or are supplied per cell by an ablation sweep.
#[derive(PartialEq)]
enum VariantSource {
    Config,
    PerCell,
}

fn build_train_config(cfg: &FlatConfig, source: VariantSource) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let backbone = BackboneConfig {
        d_model: cfg.usize_or("backbone.d_model", d.backbone.d_model)?,
        n_layers: cfg.usize_or("backbone.n_layers", d.backbone.n_layers)?,
        n_heads: cfg.usize_or("backbone.n_heads", d.backbone.n_heads)?,
        max_len: cfg.usize_or("backbone.max_len", d.backbone.max_len)?,
        dropout: cfg.f64_or("backbone.dropout", d.backbone.dropout)?,
        kind: parse_kind(&cfg.string_or("backbone.kind", "attention")?)?,
        max_steps: cfg.usize_or("backbone.max_steps", d.backbone.max_steps)?,
    };
    let (variant, seed) = match source {
        VariantSource::Config => (
            parse_variant(&cfg.string_or("train.variant", "base")?)?,
            cfg.u64_or("seed", 0)?,
        ),
        // Placeholders; the sweep overwrites both per cell.
        VariantSource::PerCell => (Variant::Base, 0),
    };
    Ok(TrainConfig {
        backbone,
        variant,
        epochs: cfg.u64_or("train.epochs", d.epochs)?,
        batch_size: cfg.usize_or("train.batch_size", d.batch_size)?,
        lr: cfg.f64_or("train.lr", d.lr)?,
        beta1: cfg.f64_or("train.beta1", d.beta1)?,
        beta2: cfg.f64_or("train.beta2", d.beta2)?,
        adam_eps: cfg.f64_or("train.adam_eps", d.adam_eps)?,
        clip_norm: cfg.f64_or("train.clip_norm", d.clip_norm)?,
        lambda_p: cfg.f64_or("train.lambda_p", d.lambda_p)?,
        warmup_epochs: cfg.u64_or("train.warmup_epochs", d.warmup_epochs)?,
        // The schedule always spans exactly the backbone's reasoning depth;
        // a separate steps key could silently disagree.
        schedule: GranularitySchedule {
            k0: cfg.usize_or("schedule.k0", d.schedule.k0)?,
            k_upper: cfg.usize_or("schedule.k_upper", d.schedule.k_upper)?,
            alpha: cfg.f64_or("schedule.alpha", d.schedule.alpha)?,
            steps: backbone.max_steps,
        },
        kmeans: KmeansParams {
            restarts: cfg.usize_or("kmeans.restarts", d.kmeans.restarts)?,
            max_iter: cfg.usize_or("kmeans.max_iter", d.kmeans.max_iter)?,
            tol: cfg.f64_or("kmeans.tol", d.kmeans.tol)?,
        },
        supervise_step0: cfg.bool_or("train.supervise_step0", d.supervise_step0)?,
        patience: cfg.u64_or("train.patience", d.patience)?,
        seed,
    })
}

struct EvalKeys {
    delta: f64,
    min_steps: usize,
    batch_size: usize,
    groups: usize,
    split: Split,
}

fn eval_keys(cfg: &FlatConfig, with_split: bool) -> Result<EvalKeys, CliError> {
    let delta = cfg.f64_or("eval.delta", 0.5)?;
    if !(0.0..=1.0).contains(&delta) {
        return Err(us(format!("eval.delta {delta} must lie in [0, 1]")));
    }
    let split = if with_split {
        match cfg.string_or("eval.split", "test")?.as_str() {
            "test" => Split::Test,
            "valid" => Split::Valid,
            other => return Err(us(format!("eval.split {other:?} must be test or valid"))),
        }
    } else {
        Split::Test
    };
    Ok(EvalKeys {
        delta,
        min_steps: cfg.usize_or("eval.min_steps", 1)?,
        batch_size: cfg.usize_or("eval.batch_size", 256)?,
        groups: cfg.usize_or("eval.groups", 5)?,
        split,
    })
}

// ─── Dataset IO ──────────────────────────────────────────────────────────────

/// `--data` accepts a directory holding `interactions.tsv` (labels sidecar
/// attached when present) or a bare interactions TSV file.
fn load_dataset(path: &Path) -> Result<InteractionDataset, CliError> {
    let file = if path.is_dir() { path.join("interactions.tsv") } else { path.to_path_buf() };
    let mut ds = load_interactions(&file)
        .map_err(|e| us(format!("dataset {}: {e}", file.display())))?;
    if path.is_dir() {
        let sidecar = path.join("labels.tsv");
        if sidecar.exists() {
            let labels = load_labels(&sidecar, &ds)
                .map_err(|e| us(format!("labels {}: {e}", sidecar.display())))?;
            ds.labels = Some(labels);
        }
    }
    Ok(ds)
}

fn dataset_log_line(ds: &InteractionDataset) -> String {
    let total: usize = ds.users.iter().map(|u| u.items.len()).sum();
    format!(
        "dataset: {} users, {} items, {} interactions (mean length {:.1})",
        ds.n_users(),
        ds.n_items,
        total,
        total as f64 / ds.n_users().max(1) as f64
    )
}

// ─── Shared scoring ──────────────────────────────────────────────────────────

/// Evaluate a model the way its variant prescribes (early exit for halting
/// variants, fixed depth otherwise), then write `metrics.json` + `exits.csv`.
fn score(
    model: &Model<f32>,
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    keys: &EvalKeys,
    run: &Path,
    log: &mut Log,
) -> Result<(MetricsReport, Vec<UserOutcome>), CliError> {
    let steps = cfg.backbone.max_steps;
    let exit = cfg
        .variant
        .exit_head()
        .filter(|_| steps >= 1)
        .map(|head| ExitRule {
            head,
            policy: HaltPolicy { delta: keys.delta, min_steps: keys.min_steps, max_steps: steps },
        });
    let opts = EvalOptions {
        steps,
        batch_size: keys.batch_size,
        max_len: cfg.backbone.max_len,
        exit,
    };
    let outcome = evaluate(model, ds, keys.split, &opts).map_err(rt)?;
    let report = summarize(&outcome, cfg.variant.name(), cfg.seed, keys.groups);
    write_file(run, "metrics.json", &format!("{}\n", report.to_json()))?;
    let mut csv = Vec::new();
    write_exits_csv(&outcome, ds, &mut csv).map_err(rt)?;
    write_file(run, "exits.csv", &String::from_utf8_lossy(&csv))?;
    log.line(&format!(
        "{:5?} n={}  recall@10 {:.4}  ndcg@10 {:.4}  ndcg@20 {:.4}  mean exit {:.3}  cost {:.3}",
        keys.split,
        report.n_users,
        report.recall_at_10,
        report.ndcg_at_10,
        report.ndcg_at_20,
        report.mean_exit_step,
        report.cost_ratio,
    ));
    Ok((report, outcome.per_user))
}

// ─── gen-data ────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct DatasetSummary {
    n_users: usize,
    n_items: usize,
    n_leaves: usize,
    n_categories: usize,
    interactions: usize,
    mean_length: f64,
    min_length: usize,
    max_length: usize,
}

fn build_classes(cfg: &FlatConfig) -> Result<Vec<UserClass>, CliError> {
    if cfg.has("data.classes")
        && (cfg.has("data.pi") || cfg.has("data.len_min") || cfg.has("data.len_max"))
    {
        return Err(us("data.classes and data.pi/len_min/len_max are mutually exclusive"));
    }
    let Some(tables) = cfg.class_tables("data.classes")? else {
        let pi = cfg.f64_or("data.pi", 0.2)?;
        let len_min = cfg.usize_or("data.len_min", 20)?;
        let len_max = cfg.usize_or("data.len_max", 60)?;
        return Ok(vec![UserClass { pi, len_range: (len_min, len_max), share: 1.0 }]);
    };
    if tables.is_empty() {
        return Err(us("data.classes must list at least one class"));
    }
    let mut classes = Vec::with_capacity(tables.len());
    let mut echo = Vec::with_capacity(tables.len());
    for (i, t) in tables.iter().enumerate() {
        for k in t.keys() {
            if !matches!(k.as_str(), "pi" | "len_min" | "len_max" | "share") {
                return Err(us(format!("unknown config key: data.classes[{i}].{k}")));
            }
        }
        let num = |key: &str, default: f64| -> Result<f64, CliError> {
            match t.get(key) {
                None => Ok(default),
                Some(toml::Value::Float(f)) => Ok(*f),
                Some(toml::Value::Integer(n)) => Ok(*n as f64),
                Some(v) => Err(us(format!("data.classes[{i}].{key} must be a number, got `{v}`"))),
            }
        };
        let pi = match t.get("pi") {
            Some(_) => num("pi", 0.0)?,
            None => return Err(us(format!("data.classes[{i}] is missing pi"))),
        };
        let len_min = num("len_min", 20.0)? as usize;
        let len_max = num("len_max", 60.0)? as usize;
        let share = num("share", 1.0)?;
        classes.push(UserClass { pi, len_range: (len_min, len_max), share });
        let mut et = toml::Table::new();
        et.insert("pi".into(), toml::Value::Float(pi));
        et.insert("len_min".into(), toml::Value::Integer(len_min as i64));
        et.insert("len_max".into(), toml::Value::Integer(len_max as i64));
        et.insert("share".into(), toml::Value::Float(share));
        echo.push(toml::Value::Table(et));
    }
    cfg.record_value("data.classes", toml::Value::Array(echo));
    Ok(classes)
}

pub fn gen_data(
    config: Option<&Path>,
    out: &Path,
    set: &[String],
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = FlatConfig::load(config, set, seed)?;
    let sc = SyntheticConfig {
        branching: cfg.usize_list_or("data.branching", &[4, 4, 4])?,
        items_per_leaf: cfg.usize_or("data.items_per_leaf", 10)?,
        n_users: cfg.usize_or("data.n_users", 2000)?,
        classes: build_classes(&cfg)?,
        scope: parse_scope(&cfg.string_or("data.scope", "cross_category")?)?,
        seed: cfg.u64_or("seed", 0)?,
    };
    cfg.reject_unknown()?;
    let ds = generate_synthetic(&sc).map_err(us)?;

    let run = create_run_dir(out)?;
    write_file(&run, "resolved_config", &cfg.resolved_toml())?;
    let mut log = Log::create(&run)?;
    log.line(&format!("run dir: {}", run.display()));
    write_file(&run, "interactions.tsv", &interactions_tsv(&ds))?;
    if let Some(labels) = labels_tsv(&ds) {
        write_file(&run, "labels.tsv", &labels)?;
    }
    if let Some(users) = dtrec_core::data::users_tsv(&ds) {
        write_file(&run, "users.tsv", &users)?;
    }
    let lengths: Vec<usize> = ds.users.iter().map(|u| u.items.len()).collect();
    let total: usize = lengths.iter().sum();
    let labels = ds.labels.as_ref().expect("synthetic sets carry labels");
    let summary = DatasetSummary {
        n_users: ds.n_users(),
        n_items: ds.n_items,
        n_leaves: labels.n_leaves,
        n_categories: labels.n_categories,
        interactions: total,
        mean_length: total as f64 / ds.n_users() as f64,
        min_length: lengths.iter().copied().min().unwrap_or(0),
        max_length: lengths.iter().copied().max().unwrap_or(0),
    };
    write_file(
        &run,
        "metrics.json",
        &format!("{}\n", serde_json::to_string_pretty(&summary).expect("summary serialize")),
    )?;
    log.line(&dataset_log_line(&ds));
    log.line(&format!(
        "taxonomy: {} leaves in {} top-level categories",
        labels.n_leaves, labels.n_categories
    ));
    Ok(())
}

// ─── train ───────────────────────────────────────────────────────────────────

pub fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    set: &[String],
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = FlatConfig::load(config, set, seed)?;
    let tc = build_train_config(&cfg, VariantSource::Config)?;
    let keys = eval_keys(&cfg, false)?;
    cfg.reject_unknown()?;
    tc.validate().map_err(us)?;
    let ds = load_dataset(data)?;

    let run = create_run_dir(out)?;
    write_file(&run, "resolved_config", &cfg.resolved_toml())?;
    let mut log = Log::create(&run)?;
    log.line(&format!("run dir: {}", run.display()));
    log.line(&dataset_log_line(&ds));
    log.line(&format!(
        "training variant {} (T={}, d={}, seed {})",
        tc.variant.name(),
        tc.backbone.max_steps,
        tc.backbone.d_model,
        tc.seed
    ));

    let mut tr = Trainer::<f32>::new(ds.n_items, tc).map_err(rt)?;
    while !tr.is_done() {
        let s = tr.run_epoch(&ds).map_err(rt)?;
        log.line(&format!(
            "epoch {:>3}  loss {:.4}  val ndcg@10 {:.4}  lp_w {:.3}  norm_violations {}",
            s.epoch, s.train_loss, s.val_ndcg10, s.lp_weight, s.norm_band_violations
        ));
    }
    tr.finish();
    log.line(&format!(
        "stopped after {} epochs; best epoch {} (val ndcg@10 {:.4})",
        tr.epochs_done(),
        tr.best_epoch(),
        tr.best_val()
    ));
    tr.save_checkpoint(&run.join("checkpoint.ckpt")).map_err(rt)?;
    write_file(
        &run,
        "history.json",
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&tr.history).expect("history serialize")
        ),
    )?;
    score(&tr.model, &ds, &tr.cfg, &keys, &run, &mut log)?;
    Ok(())
}

// ─── eval ────────────────────────────────────────────────────────────────────

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    set: &[String],
) -> Result<(), CliError> {
    let cfg = FlatConfig::load(config, set, None)?;
    let keys = eval_keys(&cfg, true)?;
    cfg.reject_unknown()?;
    let tr = Trainer::<f32>::load_checkpoint(checkpoint)
        .map_err(|e| us(format!("checkpoint {}: {e}", checkpoint.display())))?;
    let ds = load_dataset(data)?;

    let run = create_run_dir(out)?;
    write_file(&run, "resolved_config", &cfg.resolved_toml())?;
    let mut log = Log::create(&run)?;
    log.line(&format!("run dir: {}", run.display()));
    log.line(&format!(
        "checkpoint: {} ({}; {} epochs trained, seed {})",
        checkpoint.display(),
        tr.cfg.variant.name(),
        tr.epochs_done(),
        tr.cfg.seed
    ));
    log.line(&dataset_log_line(&ds));
    score(&tr.model, &ds, &tr.cfg, &keys, &run, &mut log)?;
    Ok(())
}

// ─── ablate ──────────────────────────────────────────────────────────────────

const ALL_VARIANTS: [&str; 6] =
    ["base", "hps_kconst", "hps_nowarmup", "hps", "hps_ree", "hps_arh"];

pub fn ablate(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    set: &[String],
) -> Result<(), CliError> {
    let cfg = FlatConfig::load(config, set, None)?;
    let base_tc = build_train_config(&cfg, VariantSource::PerCell)?;
    let keys = eval_keys(&cfg, false)?;
    let variant_names = cfg.string_list_or("ablate.variants", &ALL_VARIANTS)?;
    let variants: Vec<Variant> =
        variant_names.iter().map(|s| parse_variant(s)).collect::<Result<_, _>>()?;
    let seeds = cfg.u64_list_or("ablate.seeds", &[0, 1, 2, 3, 4])?;
    cfg.reject_unknown()?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(us("ablate.variants and ablate.seeds must be non-empty"));
    }
    for &v in &variants {
        let mut tc = base_tc.clone();
        tc.variant = v;
        tc.validate().map_err(us)?;
    }
    let ds = load_dataset(data)?;

    let run = create_run_dir(out)?;
    write_file(&run, "resolved_config", &cfg.resolved_toml())?;
    let mut log = Log::create(&run)?;
    log.line(&format!("run dir: {}", run.display()));
    log.line(&dataset_log_line(&ds));
    log.line(&format!(
        "sweep: {} variants × {} seeds",
        variants.len(),
        seeds.len()
    ));

    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut csv = String::from("variant,seed,ndcg_at_10,cost_ratio\n");
    let mut summary_csv = String::from("variant,seeds,mean_ndcg_at_10,mean_cost_ratio\n");
    for &v in &variants {
        let mut ndcg_sum = 0.0;
        let mut cost_sum = 0.0;
        for &s in &seeds {
            let mut tc = base_tc.clone();
            tc.variant = v;
            tc.seed = s;
            let steps = tc.backbone.max_steps;
            let tr = run_training::<f32>(&ds, &tc).map_err(rt)?;
            let exit = v.exit_head().filter(|_| steps >= 1).map(|head| ExitRule {
                head,
                policy: HaltPolicy { delta: keys.delta, min_steps: keys.min_steps, max_steps: steps },
            });
            let opts = EvalOptions {
                steps,
                batch_size: keys.batch_size,
                max_len: tc.backbone.max_len,
                exit,
            };
            let outcome = evaluate(&tr.model, &ds, Split::Test, &opts).map_err(rt)?;
            let report = summarize(&outcome, v.name(), s, keys.groups);
            log.line(&format!(
                "{:<13} seed {s}: {} epochs, ndcg@10 {:.4}, cost {:.3}",
                v.name(),
                tr.epochs_done(),
                report.ndcg_at_10,
                report.cost_ratio
            ));
            let _ = writeln!(csv, "{},{},{},{}", v.name(), s, report.ndcg_at_10, report.cost_ratio);
            ndcg_sum += report.ndcg_at_10;
            cost_sum += report.cost_ratio;
            reports.push(report);
        }
        let n = seeds.len() as f64;
        let _ = writeln!(
            summary_csv,
            "{},{},{},{}",
            v.name(),
            seeds.len(),
            ndcg_sum / n,
            cost_sum / n
        );
    }
    write_file(&run, "ablation.csv", &csv)?;
    write_file(&run, "ablation_summary.csv", &summary_csv)?;
    write_file(
        &run,
        "metrics.json",
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&reports).expect("reports serialize")
        ),
    )?;
    log.line("wrote ablation.csv, ablation_summary.csv, metrics.json");
    Ok(())
}

// ─── analyze ─────────────────────────────────────────────────────────────────

pub fn analyze(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    set: &[String],
) -> Result<(), CliError> {
    let cfg = FlatConfig::load(config, set, None)?;
    let keys = eval_keys(&cfg, true)?;
    let groups = cfg.usize_or("analyze.groups", 5)?;
    cfg.reject_unknown()?;
    if groups == 0 {
        return Err(us("analyze.groups must be ≥ 1"));
    }
    let mut tr = Trainer::<f32>::load_checkpoint(checkpoint)
        .map_err(|e| us(format!("checkpoint {}: {e}", checkpoint.display())))?;
    let ds = load_dataset(data)?;

    let run = create_run_dir(out)?;
    write_file(&run, "resolved_config", &cfg.resolved_toml())?;
    let mut log = Log::create(&run)?;
    log.line(&format!("run dir: {}", run.display()));
    log.line(&format!(
        "checkpoint: {} ({}; {} epochs trained)",
        checkpoint.display(),
        tr.cfg.variant.name(),
        tr.epochs_done()
    ));
    log.line(&dataset_log_line(&ds));

    let keys = EvalKeys { groups: groups.min(ds.n_users()).max(1), ..keys };
    let (report, per_user) = score(&tr.model, &ds, &tr.cfg, &keys, &run, &mut log)?;

    // Reasoning depth by history length (quantile groups, shortest first).
    let steps = tr.cfg.backbone.max_steps;
    let mut order: Vec<&UserOutcome> = per_user.iter().collect();
    order.sort_by_key(|o| (o.length, o.user));
    let g_eff = keys.groups;
    let mut group_csv = String::from("group,n_users,mean_length,mean_exit_step\n");
    let mut group_means = Vec::with_capacity(g_eff);
    for g in 0..g_eff {
        let lo = g * order.len() / g_eff;
        let hi = (g + 1) * order.len() / g_eff;
        let chunk = &order[lo..hi];
        let mean_len =
            chunk.iter().map(|o| o.length as f64).sum::<f64>() / chunk.len() as f64;
        let mean_exit =
            chunk.iter().map(|o| o.exit_step as f64).sum::<f64>() / chunk.len() as f64;
        let _ = writeln!(group_csv, "{},{},{},{}", g, chunk.len(), mean_len, mean_exit);
        group_means.push(mean_exit);
    }
    debug_assert_eq!(group_means, steps_by_length_group(&per_user, g_eff));
    write_file(&run, "group_steps.csv", &group_csv)?;
    if g_eff >= 2 && steps > 0 {
        let xs: Vec<f64> = (0..g_eff).map(|g| g as f64).collect();
        log.line(&format!(
            "spearman(length group → mean exit step): {:.3}",
            spearman(&xs, &group_means)
        ));
    }

    // State trajectories with prototype assignments. A checkpoint that never
    // refreshed an index (base variant, or saved before the first epoch) gets
    // one fitted from its embedding table here.
    let index = match tr.index.take() {
        Some(i) => i,
        None => {
            let sched = GranularitySchedule {
                steps: steps.max(1),
                ..tr.cfg.effective_schedule()
            };
            refresh_index(
                tr.model.embedding(),
                &sched,
                &tr.cfg.kmeans,
                tr.epochs_done(),
                tr.cfg.seed,
            )
            .map_err(rt)?
        }
    };
    let opts = EvalOptions {
        steps,
        batch_size: keys.batch_size,
        max_len: tr.cfg.backbone.max_len,
        exit: None,
    };
    let mut traj = Vec::new();
    export_trajectories(&tr.model, &ds, keys.split, &opts, &index, &mut traj).map_err(rt)?;
    write_file(&run, "trajectories.csv", &String::from_utf8_lossy(&traj))?;
    log.line(&format!(
        "wrote group_steps.csv ({} groups), trajectories.csv, exits.csv; mean exit {:.3}",
        g_eff, report.mean_exit_step
    ));
    Ok(())
}
