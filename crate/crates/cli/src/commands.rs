//! One function per subcommand. Each writes its artifacts into `out` and
//! returns a report whose `lines` are printed by the binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use avm_core::metrics::{MetricReport, MetricSummary};
use avm_core::synth::{apply_shift, generate_world, read_dataset, write_dataset, ConditionShift, DatasetBundle, ShiftKind, World};
use avm_core::train::{
    evaluate_loss, log_csv, predict_trials, train_phase1, train_phase2, verify_backbone, Checkpoint, Samples, Strategy,
};
use avm_core::{CountScope, CoreError, FreezePlan, Model, ModelSpec, ParamGroup, Variant};
use serde::Serialize;

use crate::config::{ModulationSettings, RunConfig};
use crate::error::{CliError, Result};
use crate::svg::{line_plot, Series};

pub const TRAIN_FILE: &str = "train.avmd";
pub const VAL_FILE: &str = "val.avmd";
pub const TEST_FILE: &str = "test.avmd";
pub const TRUTH_FILE: &str = "truth.json";
pub const PHASE1_CHECKPOINT: &str = "phase1.ckpt";
pub const PHASE2_CHECKPOINT: &str = "phase2.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const PARAMS_FILE: &str = "params.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_ERRORS: &str = "ablation_errors.txt";

/// Counts quoted for context in the parameter table: full fine-tuning,
/// per-block adapters and shared adapters at the reference scale.
pub const REFERENCE_COUNTS: [(&str, f64); 3] = [("full-ft", 2.46e6), ("avm", 0.11e6), ("avm-s", 0.03e6)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file(self) -> &'static str {
        match self {
            Split::Train => TRAIN_FILE,
            Split::Val => VAL_FILE,
            Split::Test => TEST_FILE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn images(self, bundle: &DatasetBundle) -> &[usize] {
        match self {
            Split::Train => &bundle.splits.train,
            Split::Val => &bundle.splits.val,
            Split::Test => &bundle.splits.test,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(CliError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(path, &(text + "\n"))
}

pub fn load_split(data: &Path, split: Split) -> Result<DatasetBundle> {
    Ok(read_dataset(&data.join(split.file()))?)
}

fn samples(bundle: &DatasetBundle, split: Split) -> Samples<'_> {
    Samples::new(bundle, split.images(bundle))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| format!("{x:.4}"))
}

fn metrics_line(s: &MetricSummary) -> String {
    format!(
        "rho_trial {}  rho_avg {}  feve {}",
        fmt_metric(s.rho_trial),
        fmt_metric(s.rho_avg),
        fmt_metric(s.feve)
    )
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Serialize)]
struct Truth<'a> {
    shift: &'a ConditionShift,
    world: &'a World,
}

#[derive(Debug, Clone)]
pub struct SynthReport {
    pub conditions: Vec<PathBuf>,
    pub lines: Vec<String>,
}

fn write_condition(dir: &Path, bundle: &DatasetBundle, world: &World, shift: &ConditionShift) -> Result<()> {
    create_dir(dir)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let part = bundle.subset(split.images(bundle))?;
        write_dataset(&part, &dir.join(split.file()))?;
    }
    write_json(&dir.join(TRUTH_FILE), &Truth { shift, world })
}

/// Directory holding the shifted condition `kind` under a synth output.
pub fn shift_dir(out: &Path, kind: ShiftKind) -> PathBuf {
    out.join(format!("shift-{}", kind.name()))
}

/// Generates the base condition into `out` and each requested shift into
/// `out/shift-<kind>`, each with train/val/test containers and a
/// ground-truth sidecar.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, shifts: &[ShiftKind]) -> Result<SynthReport> {
    create_dir(out)?;
    cfg.echo(out)?;
    let (world, bundle) = generate_world(&cfg.world())?;
    write_condition(out, &bundle, &world, &ConditionShift::Identity)?;
    let mut conditions = vec![out.to_path_buf()];
    let mut lines = vec![format!(
        "base condition: {} images, {} trials, {} neurons -> {}",
        bundle.num_images(),
        bundle.num_trials(),
        bundle.num_neurons(),
        out.display()
    )];
    for &kind in shifts {
        let shift = ConditionShift::standard(kind, cfg.synth.shift_seed);
        let (shifted, shifted_world) = apply_shift(&bundle, &world, &shift)?;
        let dir = shift_dir(out, kind);
        write_condition(&dir, &shifted, &shifted_world, &shift)?;
        lines.push(format!("{} shift -> {}", kind.name(), dir.display()));
        conditions.push(dir);
    }
    Ok(SynthReport { conditions, lines })
}

// ---------------------------------------------------------------- train / adapt

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub strategy: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub epochs: usize,
    pub steps: u64,
    pub backbone_hash: String,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: RunSummary,
    pub checkpoint: PathBuf,
    pub lines: Vec<String>,
}

fn finish_run(out: &Path, name: &str, strategy: &str, outcome: &avm_core::train::TrainOutcome) -> Result<RunReport> {
    let best = &outcome.best;
    let model = best.model()?;
    let summary = RunSummary {
        strategy: strategy.to_string(),
        trainable_params: model.count_parameters(CountScope::Trainable, &best.plan),
        total_params: model.count_parameters(CountScope::All, &best.plan),
        initial_val_loss: outcome.log.first().map_or(f64::NAN, |r| r.loss),
        best_val_loss: best.best_val_loss,
        epochs: outcome.last.epoch,
        steps: outcome.last.optimizer.t,
        backbone_hash: model.backbone_hash(),
    };
    let checkpoint = out.join(name);
    best.save(&checkpoint)?;
    outcome.last.save(&out.join(LAST_CHECKPOINT))?;
    write_text(&out.join(TRAIN_LOG), &log_csv(&outcome.log))?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    let lines = vec![
        format!(
            "{strategy}: {} trainable of {} parameters",
            summary.trainable_params, summary.total_params
        ),
        format!(
            "validation loss {:.6} -> best {:.6} after {} epochs ({} steps)",
            summary.initial_val_loss, summary.best_val_loss, summary.epochs, summary.steps
        ),
        format!("checkpoint {}", checkpoint.display()),
    ];
    Ok(RunReport {
        summary,
        checkpoint,
        lines,
    })
}

/// Phase 1: joint backbone and readout training on `data`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<RunReport> {
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let model = Model::new(cfg.model_spec())?;
    let outcome = train_phase1(model, samples(&train, Split::Train), samples(&val, Split::Val), &cfg.phase1)?;
    finish_run(out, PHASE1_CHECKPOINT, "phase1", &outcome)
}

/// Phase 2 with `cfg.variant` starting from `checkpoint`.
pub fn cmd_adapt(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<RunReport> {
    let base = Checkpoint::load(checkpoint)?;
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let opts = cfg.adapt_options(cfg.modulation.clone(), cfg.train_readout);
    let outcome = train_phase2(
        &base,
        cfg.variant,
        &opts,
        samples(&train, Split::Train),
        samples(&val, Split::Val),
        &cfg.phase2,
    )?;
    finish_run(out, PHASE2_CHECKPOINT, cfg.variant.name(), &outcome)
}

/// Fails with an invariant breach when the adapted checkpoint's backbone
/// differs from the base checkpoint's.
pub fn cmd_check_freeze(base: &Path, adapted: &Path) -> Result<Vec<String>> {
    let base = Checkpoint::load(base)?;
    let adapted = Checkpoint::load(adapted)?;
    let expected = base.store.group_hash(ParamGroup::Backbone);
    verify_backbone(&adapted, &expected)?;
    Ok(vec![format!("backbone unchanged: {expected}")])
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub split: String,
    /// Mean Poisson loss per trial.
    pub loss: f64,
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub report: MetricReport,
    pub lines: Vec<String>,
}

pub fn evaluate(ckpt: &Checkpoint, bundle: &DatasetBundle, split: Split) -> Result<(f64, MetricReport)> {
    let model = ckpt.model()?;
    let images = split.images(bundle);
    let loss = evaluate_loss(&model, Samples::new(bundle, images), ckpt.config.loss_eps)?;
    let predictions = predict_trials(&model, bundle, images)?;
    let report = MetricReport::compute(&bundle.response_tensor(images)?, &predictions)?;
    Ok((loss, report))
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, split: Split, out: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let bundle = load_split(data, split)?;
    create_dir(out)?;
    let (loss, report) = evaluate(&ckpt, &bundle, split)?;
    let summary = EvalSummary {
        split: split.name().to_string(),
        loss,
        metrics: report.summary(),
    };
    write_text(&out.join(METRICS_FILE), &report.to_csv())?;
    write_json(&out.join(EVAL_FILE), &summary)?;
    let lines = vec![
        format!("{} split: mean loss per trial {loss:.10}", split.name()),
        metrics_line(&summary.metrics),
    ];
    Ok(EvalReport { summary, report, lines })
}

// ---------------------------------------------------------------- params

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub strategy: String,
    pub backbone: usize,
    pub modulation: usize,
    pub readout: usize,
    pub trainable: usize,
    /// Trainable parameters relative to full fine-tuning.
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct ParamsReport {
    pub rows: Vec<ParamRow>,
    pub lines: Vec<String>,
}

/// Closed-form counts for every strategy on `spec`'s backbone and readout.
pub fn parameter_rows(spec: &ModelSpec, modulation: &ModulationSettings, train_readout: bool) -> Vec<ParamRow> {
    let b = &spec.backbone;
    let backbone = b.parameter_count();
    let readout = spec.readout.parameter_count(b.embed_dim);
    let full = backbone + readout;
    Strategy::ALL
        .iter()
        .map(|&s| {
            let modulation = s
                .variant()
                .map_or(0, |v| modulation.for_variant(v).parameter_count(b.embed_dim, b.num_blocks));
            let trainable = match s {
                Strategy::FullFinetune => full,
                Strategy::Frozen => 0,
                _ => modulation + if train_readout { readout } else { 0 },
            };
            ParamRow {
                strategy: s.name().to_string(),
                backbone,
                modulation,
                readout,
                trainable,
                ratio: trainable as f64 / full as f64,
            }
        })
        .collect()
}

pub fn params_csv(rows: &[ParamRow]) -> String {
    let mut out = String::from("strategy,backbone,modulation,readout,trainable,ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.strategy, r.backbone, r.modulation, r.readout, r.trainable, r.ratio
        );
    }
    out
}

/// Parameter table for the model in `checkpoint`, or the configured model.
/// The adapter ordering AVM-S < AVM < AVM-B is checked.
pub fn cmd_params(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<ParamsReport> {
    let spec = match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let model = ckpt.model()?;
            let mut spec = model.spec.clone();
            spec.modulation = None;
            // The closed form must agree with the stored tensors.
            let stored = model.store.count_group(ParamGroup::Backbone) + model.store.count_group(ParamGroup::Readout);
            let formula = spec.parameter_count();
            if stored != formula {
                return Err(CoreError::InvariantBreach(format!(
                    "checkpoint holds {stored} backbone+readout values, closed form gives {formula}"
                ))
                .into());
            }
            spec
        }
        None => cfg.model_spec(),
    };
    let rows = parameter_rows(&spec, &cfg.modulation, cfg.train_readout);
    let modulation_of = |name: &str| rows.iter().find(|r| r.strategy == name).map_or(0, |r| r.modulation);
    let (s, a, b) = (modulation_of("avm-s"), modulation_of("avm"), modulation_of("avm-b"));
    if !(s < a && a < b) {
        return Err(CoreError::InvariantBreach(format!(
            "adapter sizes out of order: avm-s {s}, avm {a}, avm-b {b}"
        ))
        .into());
    }
    let mut lines = vec![format!(
        "{:<8} {:>10} {:>10} {:>8} {:>10} {:>9}",
        "strategy", "backbone", "modulation", "readout", "trainable", "of full"
    )];
    for r in &rows {
        lines.push(format!(
            "{:<8} {:>10} {:>10} {:>8} {:>10} {:>8.2}%",
            r.strategy,
            r.backbone,
            r.modulation,
            r.readout,
            r.trainable,
            100.0 * r.ratio
        ));
    }
    let [(_, full), (_, avm), (_, shared)] = REFERENCE_COUNTS;
    lines.push(format!(
        "reference scale: full-ft {:.2}M, avm {:.2}M ({:.1}%), avm-s {:.2}M ({:.1}%) trainable",
        full / 1e6,
        avm / 1e6,
        100.0 * avm / full,
        shared / 1e6,
        100.0 * shared / full
    ));
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join(PARAMS_FILE), &params_csv(&rows))?;
    }
    Ok(ParamsReport { rows, lines })
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub weight: f64,
    pub dim: usize,
    /// `None` when the cell failed.
    pub metrics: Option<MetricSummary>,
    pub trainable_params: usize,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub failures: Vec<(f64, usize, CliError)>,
    pub lines: Vec<String>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("weight,dim,rho_trial,rho_avg,feve,trainable_params,seconds\n");
    let f = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |x| x.to_string());
    for r in rows {
        let m = r.metrics.unwrap_or(MetricSummary {
            rho_trial: None,
            rho_avg: None,
            feve: None,
        });
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.3}",
            r.weight,
            r.dim,
            f(m.rho_trial),
            f(m.rho_avg),
            f(m.feve),
            r.trainable_params,
            r.seconds
        );
    }
    out
}

fn ablation_plot(rows: &[AblationRow], weights: &[f64], dims: &[usize], metric: &str) -> String {
    let pick = |m: &MetricSummary| match metric {
        "rho_trial" => m.rho_trial,
        "rho_avg" => m.rho_avg,
        _ => m.feve,
    };
    let series: Vec<Series> = weights
        .iter()
        .map(|&w| Series {
            label: format!("w={w}"),
            values: dims
                .iter()
                .map(|&d| {
                    rows.iter()
                        .find(|r| r.weight == w && r.dim == d)
                        .and_then(|r| r.metrics.as_ref())
                        .and_then(pick)
                })
                .collect(),
        })
        .collect();
    let labels: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    line_plot(&format!("{metric} by bottleneck dimension"), "bottleneck dimension", metric, &labels, &series)
}

/// Adapts `checkpoint` once per `(weight, dim)` cell and scores each result
/// on the test split. A failing cell is recorded and the grid continues.
pub fn cmd_ablate(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<AblationReport> {
    let base = Checkpoint::load(checkpoint)?;
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    let test = load_split(data, Split::Test)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let a = &cfg.ablation;
    let variant = a.variant.variant().unwrap_or(Variant::Avm);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for &weight in &a.weights {
        for &dim in &a.dims {
            let settings = ModulationSettings {
                bottleneck: dim,
                weight,
                ..cfg.modulation.clone()
            };
            let opts = cfg.adapt_options(settings.clone(), a.train_readout);
            let plan = FreezePlan::phase2(a.train_readout);
            let trainable = settings.for_variant(variant).parameter_count(base.spec.backbone.embed_dim, base.spec.backbone.num_blocks)
                + if plan.readout {
                    base.spec.readout.parameter_count(base.spec.backbone.embed_dim)
                } else {
                    0
                };
            let start = Instant::now();
            let result = train_phase2(
                &base,
                a.variant,
                &opts,
                samples(&train, Split::Train),
                samples(&val, Split::Val),
                &cfg.phase2,
            )
            .map_err(CliError::from)
            .and_then(|o| evaluate(&o.best, &test, Split::Test).map(|(_, r)| r.summary()));
            let seconds = start.elapsed().as_secs_f64();
            match result {
                Ok(m) => {
                    lines.push(format!("w={weight} dim={dim}: {} ({seconds:.1}s)", metrics_line(&m)));
                    rows.push(AblationRow {
                        weight,
                        dim,
                        metrics: Some(m),
                        trainable_params: trainable,
                        seconds,
                    });
                }
                Err(e) => {
                    lines.push(format!("w={weight} dim={dim}: FAILED: {e}"));
                    rows.push(AblationRow {
                        weight,
                        dim,
                        metrics: None,
                        trainable_params: trainable,
                        seconds,
                    });
                    failures.push((weight, dim, e));
                }
            }
        }
    }
    write_text(&out.join(ABLATION_FILE), &ablation_csv(&rows))?;
    for metric in ["rho_trial", "rho_avg", "feve"] {
        write_text(
            &out.join(format!("ablation_{metric}.svg")),
            &ablation_plot(&rows, &a.weights, &a.dims, metric),
        )?;
    }
    let errors_path = out.join(ABLATION_ERRORS);
    if failures.is_empty() {
        if errors_path.exists() {
            fs::remove_file(&errors_path).map_err(CliError::io(&errors_path))?;
        }
    } else {
        let text: String = failures.iter().map(|(w, d, e)| format!("weight {w} dim {d}: {e}\n")).collect();
        write_text(&errors_path, &text)?;
    }
    Ok(AblationReport { rows, failures, lines })
}
