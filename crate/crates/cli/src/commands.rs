use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gradecast::dataset::build_course_dataset;
use gradecast::eval::{format_table, metric_report, MetricReport, RiskRule};
use gradecast::explain::{influence_collective, top_influential, CollectiveEntry};
use gradecast::models::{artifact_path, load_registry, save_artifact, Family, ModelArtifact, Registry};
use gradecast::pipeline::{mc_distributions, split_target, train_target, TargetModels};
use gradecast::synth::{generate, GeneratorSpec};
use gradecast::uncertainty::{calibration_curve, error_at_deciles, risk_confidence_curves, spearman, ErrorMetric, PredictiveDistribution};
use gradecast_service::api::{self, ExplainRequest, GradeInput, PredictRequest, TranscriptRow};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{
    parse_term, CalibrateArgs, Cli, Command, EvaluateArgs, ExplainArgs, PredictArgs, RunConfig, ServeArgs, SynthArgs, TrainArgs,
};
use crate::data::DataDir;
use crate::error::{CliError, CliResult, Kind};

const TOOL: &str = "gradecast";
const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Config and seed recorded in every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub settings: BTreeMap<String, Value>,
}

impl Provenance {
    fn new(command: &str, seed: u64, settings: &[(&str, Value)]) -> Self {
        Provenance {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            seed,
            settings: settings.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    /// One `# key=value ...` comment line.
    fn header(&self) -> String {
        let mut line = format!("# {} {} {} seed={}", self.tool, self.version, self.command, self.seed);
        for (k, v) in &self.settings {
            let v = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let _ = write!(line, " {k}={v}");
        }
        line
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let config = RunConfig::load(cli.config.as_deref())?;
    let seed_flag = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(&config, seed_flag, a),
        Command::Train(a) => train(&config, seed_flag, a),
        Command::Evaluate(a) => evaluate(&config, seed_flag, a),
        Command::Predict(a) => predict(&config, seed_flag, a),
        Command::Explain(a) => explain(&config, seed_flag, a),
        Command::Calibrate(a) => calibrate(&config, seed_flag, a),
        Command::Serve(a) => serve(&config, a),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).map_err(|e| CliError::new(Kind::Data, "IoError", format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Compact JSON exactly as the service sends it, plus a newline.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string(value)? + "\n";
    match out {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_models(dir: &Path) -> CliResult<Registry> {
    if !dir.is_dir() {
        return Err(CliError::new(
            Kind::Data,
            "IoError",
            format!("model registry `{}` does not exist", dir.display()),
        ));
    }
    let registry = load_registry(dir)?;
    if registry.is_empty() {
        return Err(CliError::new(
            Kind::Data,
            "EmptyRegistry",
            format!("no models under `{}`", dir.display()),
        ));
    }
    Ok(registry)
}

fn synth(config: &RunConfig, seed_flag: Option<u64>, args: SynthArgs) -> CliResult<()> {
    let seed = config.seed(seed_flag);
    let out = config.out(args.out, "data");
    let spec = GeneratorSpec::preset(&args.spec, seed)?;
    let data = generate(&spec)?;
    data.write_to(&out)?;
    let provenance = Provenance::new("synth", seed, &[("spec", json!(args.spec))]);
    write_file(
        &out.join("synth.json"),
        &pretty(&json!({ "provenance": provenance, "generator": spec }))?,
    )?;
    println!(
        "{}\nwrote {} grade records for {} target courses to {}",
        provenance.header(),
        data.records.len(),
        data.catalog.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct FamilySummary {
    validation_mae: f64,
    chosen_iteration: usize,
    tau_inv: f64,
    notes: Vec<String>,
}

#[derive(Debug, Serialize)]
struct TargetSummary {
    target: String,
    test_term: u32,
    train_examples: usize,
    validation_examples: usize,
    test_examples: usize,
    families: BTreeMap<Family, FamilySummary>,
    skipped: BTreeMap<Family, String>,
}

fn summarize(t: &TargetModels) -> TargetSummary {
    TargetSummary {
        target: t.split.full.target_course.clone(),
        test_term: t.split.test_term,
        train_examples: t.split.train.len(),
        validation_examples: t.split.validation.len(),
        test_examples: t.split.test.len(),
        families: t
            .artifacts
            .iter()
            .map(|(f, a)| {
                (
                    *f,
                    FamilySummary {
                        validation_mae: a.report.validation_mae,
                        chosen_iteration: a.report.chosen_iteration,
                        tau_inv: a.tau_inv,
                        notes: a.report.notes.clone(),
                    },
                )
            })
            .collect(),
        skipped: t.skipped.iter().cloned().collect(),
    }
}

fn clear_target_dir(models: &Path, target: &str) -> CliResult<()> {
    for family in Family::ALL {
        let path = artifact_path(models, target, family);
        if path.exists() {
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

fn train(config: &RunConfig, seed_flag: Option<u64>, args: TrainArgs) -> CliResult<()> {
    let seed = config.seed(seed_flag);
    let data_dir = config.data(args.data.clone());
    let models = config.models(args.models.clone());
    let data = DataDir::load(&data_dir)?;
    let (cfg, grid_name) = config.pipeline(&args, seed)?;
    let jobs = args.jobs.or(config.jobs).unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::usage(format!("cannot start {jobs} worker threads: {e}")))?;
    let trained: Vec<_> = pool.install(|| {
        data.catalog
            .par_iter()
            .map(|entry| train_target(&data.records, entry, data.features.as_ref(), &cfg))
            .collect()
    });
    let trained = trained
        .into_iter()
        .collect::<Result<Vec<TargetModels>, _>>()
        .map_err(CliError::training)?;

    for t in &trained {
        clear_target_dir(&models, &t.split.full.target_course)?;
        for artifact in t.artifacts.values() {
            save_artifact(&models, artifact)?;
        }
    }
    let provenance = Provenance::new(
        "train",
        seed,
        &[
            ("grid", json!(grid_name)),
            ("max_iterations", json!(cfg.train.max_iterations)),
            ("samples", json!(cfg.mc_samples)),
            ("test_term", json!(cfg.test_term)),
        ],
    );
    let summaries: Vec<TargetSummary> = trained.iter().map(summarize).collect();
    write_file(
        &models.join("train_summary.json"),
        &pretty(&json!({ "provenance": provenance, "config": cfg, "targets": summaries }))?,
    )?;

    println!("{}", provenance.header());
    for s in &summaries {
        let fams: Vec<String> = s.families.iter().map(|(f, x)| format!("{f}={:.4}", x.validation_mae)).collect();
        println!(
            "{} (test term {}, {}/{}/{} examples): validation MAE {}",
            s.target,
            s.test_term,
            s.train_examples,
            s.validation_examples,
            s.test_examples,
            fams.join(" ")
        );
        for (f, why) in &s.skipped {
            println!("  skipped {f}: {why}");
        }
    }
    Ok(())
}

fn data_and_models(config: &RunConfig, data: Option<PathBuf>, models: Option<PathBuf>) -> CliResult<(DataDir, Registry)> {
    let data = DataDir::load(&config.data(data))?;
    let registry = load_models(&config.models(models))?;
    Ok((data, registry))
}

struct TargetPredictions {
    target: String,
    test_term: u32,
    labels: Vec<f64>,
    preds: BTreeMap<Family, Vec<f64>>,
}

fn test_predictions(data: &DataDir, registry: &Registry, term: Option<u32>) -> CliResult<Vec<TargetPredictions>> {
    let mut out = Vec::new();
    for entry in &data.catalog {
        let Some(fams) = registry.get(&entry.target_course) else {
            continue;
        };
        let split = split_target(&data.records, entry, data.features.as_ref(), term)?;
        let preds = fams
            .iter()
            .map(|(f, a)| Ok((*f, a.predict_dataset(&split.test)?)))
            .collect::<gradecast::Result<BTreeMap<_, _>>>()?;
        out.push(TargetPredictions {
            target: entry.target_course.clone(),
            test_term: split.test_term,
            labels: split.test.labels(),
            preds,
        });
    }
    if out.is_empty() {
        return Err(CliError::new(Kind::Data, "UnknownCourse", "no catalog target has trained models"));
    }
    Ok(out)
}

fn report_rows(targets: &[&TargetPredictions], rule: RiskRule) -> CliResult<Vec<(Family, MetricReport)>> {
    let mut rows = Vec::new();
    for family in Family::ALL {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for t in targets {
            if let Some(p) = t.preds.get(&family) {
                preds.extend_from_slice(p);
                labels.extend_from_slice(&t.labels);
            }
        }
        if !labels.is_empty() {
            rows.push((family, metric_report(&preds, &labels, rule)?));
        }
    }
    Ok(rows)
}

fn at_risk_table(rows: &[(Family, MetricReport)]) -> String {
    let mut out = format!(
        "{:<8} {:>6} {:>10} {:>9} {:>9} {:>7} {:>7}\n",
        "model", "n", "prevalence", "accuracy", "precision", "recall", "F1"
    );
    for (f, r) in rows {
        let a = &r.at_risk;
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>10.4} {:>9.4} {:>9.4} {:>7.4} {:>7.4}{}",
            f.label(),
            r.n,
            a.prevalence,
            a.accuracy,
            a.precision,
            a.recall,
            a.f1,
            if a.degenerate { " *" } else { "" }
        );
    }
    out
}

fn named(rows: &[(Family, MetricReport)]) -> Vec<(String, MetricReport)> {
    rows.iter().map(|(f, r)| (f.label().to_string(), r.clone())).collect()
}

fn evaluate(config: &RunConfig, seed_flag: Option<u64>, args: EvaluateArgs) -> CliResult<()> {
    let seed = config.seed(seed_flag);
    let term = parse_term(&args.term)?;
    let rule = config.risk_rule(args.at_risk_inclusive);
    let out_dir = config.out(args.out, "results");
    let (data, registry) = data_and_models(config, args.data, args.models)?;
    let targets = test_predictions(&data, &registry, term)?;
    let all: Vec<&TargetPredictions> = targets.iter().collect();
    let pooled = report_rows(&all, rule)?;

    let provenance = Provenance::new(
        "evaluate",
        seed,
        &[("term", json!(args.term)), ("at_risk_inclusive", json!(rule.inclusive))],
    );
    let mut text = format!("{}\n", provenance.header());
    let _ = writeln!(text, "\n## test split, pooled over {} target courses", targets.len());
    text.push_str(&format_table(&named(&pooled)));
    let _ = writeln!(text, "\n## at-risk identification (grade below {})", rule.threshold);
    text.push_str(&at_risk_table(&pooled));
    let mut per_target = Vec::new();
    for t in &targets {
        let rows = report_rows(&[t], rule)?;
        let _ = writeln!(text, "\n## {} (test term {})", t.target, t.test_term);
        text.push_str(&format_table(&named(&rows)));
        per_target.push(json!({ "target": t.target, "test_term": t.test_term, "rows": rows }));
    }
    text.push_str("\n* no predicted or no actual at-risk students; F1 reported as 0\n");

    write_file(&out_dir.join("evaluate.txt"), &text)?;
    write_file(
        &out_dir.join("evaluate.json"),
        &pretty(&json!({ "provenance": provenance, "pooled": pooled, "targets": per_target }))?,
    )?;
    print!("{text}");
    Ok(())
}

fn to_rows(transcript: &[(String, u32, f64)]) -> Vec<TranscriptRow> {
    transcript
        .iter()
        .map(|(course, term, grade)| TranscriptRow {
            course: course.clone(),
            term: *term,
            grade: GradeInput::Number(*grade),
        })
        .collect()
}

/// The student's transcript and the term they took `course`, if they did.
fn student_context(data: &DataDir, student: &str, course: &str) -> CliResult<(Vec<TranscriptRow>, Option<u32>)> {
    let rows = data.transcript(student)?;
    let term = rows.iter().filter(|r| r.0 == course).map(|r| r.1).max();
    Ok((to_rows(&rows), term))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new(Kind::Data, "IoError", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(Kind::Data, "JsonError", format!("{}: {e}", path.display())))
}

fn predict(config: &RunConfig, seed_flag: Option<u64>, args: PredictArgs) -> CliResult<()> {
    let registry = load_models(&config.models(args.models.clone()))?;
    let mut request: PredictRequest = match (&args.request, &args.student, &args.course) {
        (Some(path), _, _) => read_json(path)?,
        (None, Some(student), Some(course)) => {
            let data = DataDir::load(&config.data(args.data.clone()))?;
            let (transcript, term) = student_context(&data, student, course)?;
            PredictRequest {
                student: Some(student.clone()),
                transcript,
                target: course.clone(),
                family: None,
                term,
                level: None,
                samples: None,
                seed: None,
            }
        }
        _ => return Err(CliError::usage("give either --request or both --student and --course")),
    };
    request.family = args.family.or(request.family);
    request.level = args.level.or(request.level);
    request.samples = args.samples.or(config.samples).or(request.samples);
    request.seed = seed_flag.or(config.seed).or(request.seed);
    emit(&api::predict(&registry, &request)?, args.out.as_deref())
}

fn explain(config: &RunConfig, seed_flag: Option<u64>, args: ExplainArgs) -> CliResult<()> {
    let registry = load_models(&config.models(args.models.clone()))?;
    if let Some(path) = &args.request {
        let request: ExplainRequest = read_json(path)?;
        return emit(&api::explain(&registry, &request)?, args.out.as_deref());
    }
    let course = args.course.clone().ok_or_else(|| CliError::usage("--course is required"))?;
    let data = DataDir::load(&config.data(args.data.clone()))?;
    if let Some(student) = &args.student {
        let (transcript, term) = student_context(&data, student, &course)?;
        let request = ExplainRequest {
            student: Some(student.clone()),
            transcript,
            target: course,
            family: args.family,
            term,
            k: Some(args.top),
        };
        return emit(&api::explain(&registry, &request)?, args.out.as_deref());
    }

    let artifact = family_artifact(&registry, &course, args.family)?;
    let entry = data.entry(&course)?;
    let dataset = build_course_dataset(&data.records, &course, &entry.priors, data.features.as_ref())?;
    let table = influence_collective(artifact, &dataset.examples)?;
    let (entries, short): (Vec<CollectiveEntry>, bool) = top_influential(&table, args.top)?;
    let provenance = Provenance::new(
        "explain",
        config.seed(seed_flag),
        &[
            ("course", json!(course)),
            ("family", json!(artifact.family)),
            ("top", json!(args.top)),
        ],
    );
    emit(
        &json!({
            "provenance": provenance,
            "target": course,
            "family": artifact.family,
            "students": dataset.len(),
            "entries": entries,
            "fewer_than_requested": short,
        }),
        args.out.as_deref(),
    )
}

fn family_artifact<'a>(registry: &'a Registry, course: &str, family: Option<Family>) -> CliResult<&'a ModelArtifact> {
    let fams = registry
        .get(course)
        .ok_or_else(|| CliError::new(Kind::Data, "UnknownCourse", format!("no models for course `{course}`")))?;
    let family = family.unwrap_or(api::DEFAULT_FAMILY);
    fams.get(&family)
        .ok_or_else(|| CliError::new(Kind::Data, "UnknownModel", format!("no {family} model for course `{course}`")))
}

/// Levels 0.05, 0.10, ..., 0.95.
fn calibration_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

fn calibrate(config: &RunConfig, seed_flag: Option<u64>, args: CalibrateArgs) -> CliResult<()> {
    let seed = config.seed(seed_flag);
    let term = parse_term(&args.term)?;
    let samples = config.samples(args.samples);
    let rule = config.risk_rule(args.at_risk_inclusive);
    let out_dir = config.out(args.out, "results");
    let (data, registry) = data_and_models(config, args.data, args.models)?;

    let mut dists: Vec<PredictiveDistribution> = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for entry in &data.catalog {
        let Some(artifact) = registry.get(&entry.target_course).and_then(|f| f.get(&args.family)) else {
            continue;
        };
        let split = split_target(&data.records, entry, data.features.as_ref(), term)?;
        dists.extend(mc_distributions(artifact, &split.test.examples, samples, artifact.tau_inv, seed)?);
        labels.extend(split.test.labels());
        ids.extend(
            split
                .test
                .examples
                .iter()
                .map(|e| format!("{}/{}", entry.target_course, e.student_id)),
        );
    }
    if dists.is_empty() {
        return Err(CliError::new(
            Kind::Data,
            "UnknownModel",
            format!("no {} models with test examples", args.family),
        ));
    }

    let provenance = Provenance::new(
        "calibrate",
        seed,
        &[
            ("family", json!(args.family)),
            ("samples", json!(samples)),
            ("term", json!(args.term)),
            ("at_risk_inclusive", json!(rule.inclusive)),
        ],
    );
    let header = provenance.header();

    let curve = calibration_curve(&dists, &labels, &calibration_levels())?;
    let mut csv = format!("{header}\nlevel,empirical\n");
    for p in &curve {
        let _ = writeln!(csv, "{},{}", p.level, p.empirical);
    }
    write_file(&out_dir.join("calibration.csv"), &csv)?;

    let errors = error_at_deciles(&dists, &labels, &ids, ErrorMetric::Mae)?;
    let mut csv = format!("{header}\nk,error\n");
    for (k, e) in &errors {
        let _ = writeln!(csv, "{k},{e}");
    }
    write_file(&out_dir.join("error_at_k.csv"), &csv)?;

    let risk = risk_confidence_curves(&dists, &labels, &ids, rule)?;
    let mut csv = format!("{header}\ncut,fnr,fpr,coverage\n");
    for r in &risk {
        let _ = writeln!(csv, "{},{},{},{}", r.cut, r.fnr, r.fpr, r.coverage);
    }
    write_file(&out_dir.join("risk.csv"), &csv)?;

    let ks: Vec<f64> = errors.iter().map(|(k, _)| *k as f64).collect();
    let es: Vec<f64> = errors.iter().map(|(_, e)| *e).collect();
    let rho = if ks.len() >= 2 { spearman(&ks, &es)? } else { f64::NAN };
    let n = risk.len();
    let confident = risk[..3.min(n)].iter().map(|r| r.fnr).sum::<f64>() / 3.0_f64.min(n as f64);
    let least = risk[n.saturating_sub(3)..].iter().map(|r| r.fnr).sum::<f64>() / 3.0_f64.min(n as f64);
    let summary = json!({
        "provenance": provenance,
        "examples": dists.len(),
        "calibration": curve,
        "error_at_k_spearman": rho,
        "fnr_most_confident_3": confident,
        "fnr_least_confident_3": least,
    });
    write_file(&out_dir.join("calibrate.json"), &pretty(&summary)?)?;

    println!("{header}");
    for p in curve
        .iter()
        .filter(|p| [0.5, 0.8, 0.9, 0.95].iter().any(|l| (p.level - l).abs() < 1e-9))
    {
        println!("coverage at {:.2}: {:.3}", p.level, p.empirical);
    }
    println!("spearman(error@k, k): {rho:.3}");
    println!("mean FNR, 3 most / 3 least confident deciles: {confident:.3} / {least:.3}");
    println!(
        "wrote calibration.csv, error_at_k.csv, risk.csv and calibrate.json to {}",
        out_dir.display()
    );
    Ok(())
}

fn serve(config: &RunConfig, args: ServeArgs) -> CliResult<()> {
    let registry = load_models(&config.models(args.models))?;
    let addr: SocketAddr = args
        .addr
        .parse()
        .map_err(|_| CliError::usage(format!("invalid listen address `{}`", args.addr)))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new(Kind::Data, "IoError", e.to_string()))?;
    eprintln!("serving {} target courses on http://{addr}", registry.len());
    runtime
        .block_on(gradecast_service::serve(Arc::new(registry), addr))
        .map_err(|e| CliError::new(Kind::Data, "IoError", e.to_string()))
}
