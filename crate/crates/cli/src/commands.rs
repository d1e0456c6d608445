use std::fs;
use std::path::{Path, PathBuf};

use erkg::checkpoint::{load_checkpoint, save_checkpoint};
use erkg::data::{load_categories, CategoryMap, FilterIndex, Split, TripleStore};
use erkg::eval::{evaluate, RankingReport, TiePolicy};
use erkg::model::ModelKind;
use erkg::presets::{preset, Dataset, Scale, DESK_MAX_DIM};
use erkg::regularizer::RegularizerKind;
use erkg::synth::{generate_synthetic, write_synthetic, SynthConfig};
use erkg::theorem::{check_theorem, make_instance, Mechanism, Variant};
use erkg::trainer::train;
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub type CmdResult = Result<(), CliError>;

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

/// Loads the three splits (with inverse relations when configured) and the
/// optional category file.
pub fn load_data(config: &RunConfig) -> Result<(TripleStore, Option<CategoryMap>), CliError> {
    let p = &config.paths;
    let req = |x: &Option<PathBuf>, name: &str| x.clone().ok_or_else(|| CliError::Usage(format!("paths.{name} is required")));
    let mut store = TripleStore::load(&req(&p.train, "train")?, &req(&p.valid, "valid")?, &req(&p.test, "test")?)?;
    let categories = match &p.categories {
        Some(path) => {
            let (map, warnings) = load_categories(path, &store.vocab)?;
            if warnings.unknown_entities > 0 || warnings.relabeled > 0 {
                warn!(
                    "categories: {} unknown entities skipped, {} relabeled",
                    warnings.unknown_entities, warnings.relabeled
                );
            }
            Some(map)
        }
        None => None,
    };
    if config.reciprocal {
        store = store.add_reciprocals()?;
    }
    Ok((store, categories))
}

pub fn cmd_train(config: &RunConfig) -> CmdResult {
    config.validate()?;
    let (store, categories) = load_data(config)?;
    if config.regularizer.kind == RegularizerKind::Er && categories.is_none() && config.regularizer.lambda > 0.0 {
        info!("no category file; ER pairs use learned thresholds");
    }
    let out = train(&config.train_config(), &store, categories.as_ref())?;
    let dir = config.output_dir();
    save_checkpoint(&out.params, out.epsilon.as_ref(), &config.checkpoint_path())?;
    write_json(&dir.join("history.json"), &out.history)?;
    let filter = FilterIndex::build(&store);
    let report = evaluate(&out.params, &store.valid, &filter, config.evaluation.tie_policy)?;
    write_json(&dir.join("valid_report.json"), &report)?;
    println!("{}", report.to_json());
    Ok(())
}

pub fn cmd_evaluate(config: &RunConfig, checkpoint: Option<&Path>, split: Split, tie_policy: Option<TiePolicy>) -> CmdResult {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| config.checkpoint_path());
    let (params, _) = load_checkpoint(&path)?;
    let (store, _) = load_data(config)?;
    if params.n_entities() != store.n_entities() || params.n_relations() != store.n_relations() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} entities / {} relations, data has {} / {}",
            params.n_entities(),
            params.n_relations(),
            store.n_entities(),
            store.n_relations()
        )));
    }
    if params.kind() != config.model {
        warn!("checkpoint holds {}, config names {}", params.kind(), config.model);
    }
    let filter = FilterIndex::build(&store);
    let queries = store.split(split);
    let report = evaluate(&params, queries, &filter, tie_policy.unwrap_or(config.evaluation.tie_policy))?;
    let name = match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    };
    write_json(&config.output_dir().join(format!("{name}_report.json")), &report)?;
    println!("{}", report.to_json());
    Ok(())
}

pub struct TheoremArgs {
    pub sizes: [usize; 4],
    pub variants: Vec<Variant>,
    pub mechanism: Option<Mechanism>,
    pub restarts: usize,
    pub instances: usize,
    pub seed: u64,
    pub gate_all: bool,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct FailedCheck {
    variant: Variant,
    seed: u64,
    error: String,
}

pub fn cmd_verify_theorems(args: &TheoremArgs) -> CmdResult {
    if args.restarts == 0 || args.instances == 0 {
        return Err(CliError::Usage("--restarts and --instances must be >= 1".into()));
    }
    if args.sizes.contains(&0) {
        return Err(CliError::Usage("--sizes entries must be >= 1".into()));
    }
    if let Some(m) = args.mechanism {
        for v in &args.variants {
            if v.mechanism() != m {
                return Err(CliError::Usage(format!(
                    "{} needs the {:?} mechanism, got {m:?}",
                    v.name(),
                    v.mechanism()
                )));
            }
        }
    }
    let [i, j, k, d] = args.sizes;
    let mut lines = String::new();
    let mut failures = Vec::new();
    for n in 0..args.instances {
        let seed = args.seed + n as u64;
        for &variant in &args.variants {
            let inst = make_instance(i, j, k, d, variant.norm_order(), variant.mechanism(), seed)?;
            match check_theorem(&inst, variant, args.restarts) {
                Ok(r) => {
                    let gated = variant == Variant::Amgm4 || args.gate_all;
                    let ok = if variant == Variant::Amgm4 {
                        r.passes_equality_gate()
                    } else {
                        !r.flagged
                    };
                    println!(
                        "{:<5} seed {seed:<3} lhs {:.6} nuclear {:.6} ratio {:.4} balance {:.2e} residual {:.1e}{}",
                        variant.name(),
                        r.lhs_value,
                        r.nuclear_estimate,
                        r.ratio,
                        r.equality_residual,
                        r.reconstruction_residual,
                        if r.flagged { "  FLAGGED" } else { "" }
                    );
                    if gated && !ok {
                        failures.push(format!("{} seed {seed}: ratio {:.4}", variant.name(), r.ratio));
                    }
                    lines.push_str(&serde_json::to_string(&r).expect("serializable"));
                }
                Err(e) => {
                    println!("{:<5} seed {seed:<3} ERROR {e}", variant.name());
                    failures.push(format!("{} seed {seed}: {e}", variant.name()));
                    let rec = FailedCheck {
                        variant,
                        seed,
                        error: e.to_string(),
                    };
                    lines.push_str(&serde_json::to_string(&rec).expect("serializable"));
                }
            }
            lines.push('\n');
        }
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    write_text(&out.join("theorem_reports.jsonl"), &lines)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!("{} check(s) failed: {}", failures.len(), failures.join("; "))))
    }
}

pub fn cmd_synth(config: &SynthConfig, out: &Path) -> CmdResult {
    let kg = generate_synthetic(config)?;
    write_synthetic(&kg, out)?;
    let (tr, va, te) = config.split_sizes();
    println!("wrote {tr}/{va}/{te} triples and categories to {}", out.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub learning_rate: f64,
    pub lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<RankingReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub best: bool,
}

pub fn cmd_gridsearch(config: &RunConfig) -> CmdResult {
    config.validate()?;
    let (store, categories) = load_data(config)?;
    let filter = FilterIndex::build(&store);
    let lambdas = if config.regularizer.kind == RegularizerKind::None {
        vec![0.0]
    } else {
        config.grid.lambdas.clone()
    };
    let mut base = config.train_config();
    if base.dim > DESK_MAX_DIM {
        info!("grid search caps dim {} at {DESK_MAX_DIM}", base.dim);
        base.dim = DESK_MAX_DIM;
        if base.model.is_complex() && base.dim % 2 == 1 {
            base.dim -= 1;
        }
    }
    let mut rows = Vec::new();
    for &lr in &config.grid.learning_rates {
        for &lambda in &lambdas {
            let mut cell = base.clone();
            cell.learning_rate = lr;
            cell.regularizer.lambda = lambda;
            let result = train(&cell, &store, categories.as_ref())
                .and_then(|out| evaluate(&out.params, &store.valid, &filter, cell.tie_policy));
            let row = match result {
                Ok(r) => {
                    info!("lr {lr} lambda {lambda}: valid mrr {:.4}", r.mrr);
                    GridRow {
                        learning_rate: lr,
                        lambda,
                        valid: Some(r),
                        error: None,
                        best: false,
                    }
                }
                Err(e) => {
                    warn!("lr {lr} lambda {lambda} failed: {e}");
                    GridRow {
                        learning_rate: lr,
                        lambda,
                        valid: None,
                        error: Some(e.to_string()),
                        best: false,
                    }
                }
            };
            rows.push(row);
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.valid.as_ref().map(|v| (i, v.mrr)))
        .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
            Some((_, b)) if b >= m => acc,
            _ => Some((i, m)),
        });
    if let Some((i, _)) = best {
        rows[i].best = true;
    }
    write_json(&config.output_dir().join("leaderboard.json"), &rows)?;
    for r in &rows {
        match &r.valid {
            Some(v) => println!(
                "lr {:<6} lambda {:<6} mrr {:.4}{}",
                r.learning_rate,
                r.lambda,
                v.mrr,
                if r.best { "  *" } else { "" }
            ),
            None => println!("lr {:<6} lambda {:<6} failed", r.learning_rate, r.lambda),
        }
    }
    match best {
        Some(_) => Ok(()),
        None => Err(CliError::Numeric("every grid cell failed".into())),
    }
}

pub fn cmd_preset(model: ModelKind, dataset: Dataset, desk: bool) -> CmdResult {
    let scale = if desk { Scale::Desk } else { Scale::Full };
    let p = preset(model, dataset, scale)?;
    println!("{}", serde_json::to_string_pretty(&p).expect("serializable"));
    Ok(())
}
