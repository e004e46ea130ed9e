use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use serde::Serialize;

use omr_core::client::{ChatClient, EndpointConfig, HttpChatClient};
use omr_core::corpus::{
    corpus_stats, ingest_records, mix_domains, normalize_format, read_jsonl, write_jsonl, DatasetManifest,
    ReasoningTrace, Weight,
};
use omr_core::curate::{
    difficulty_filter, length_filter, pack_all, pack_stats, write_packed, PackItem, DEFAULT_CAPACITY,
};
use omr_core::dedup::{dedup_pass, near_dup_clusters, SignatureCache, DEFAULT_IMG_HAMMING, DEFAULT_TEXT_THRESH};
use omr_core::distill::{rejection_filter, sample_traces, Journal, PassRateTable, SimulatedTeacher, TeacherConfig};
use omr_core::evalrun::{aggregate_scores, run_eval, EvalConfig, Grouping};
use omr_core::verify::{Judge, Verifier};
use omr_rl::rlcore::{ClipConfig, CurriculumConfig, ObjectiveKind};
use omr_rl::toylab::{
    generate_tasks, oracle_suite, reward_summary, train_loop, DifficultyMix, SoftmaxSequencePolicy, TrainConfig,
};

use crate::settings::Settings;
use crate::{CliError, Command, Global};

const REQUEST_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Args)]
pub struct ManifestArg {
    pub manifest: PathBuf,
}

#[derive(Args)]
pub struct IngestArgs {
    pub input: PathBuf,
    /// Source label for records that carry none.
    #[arg(long)]
    pub source: Option<String>,
}

#[derive(Args)]
pub struct DistillArgs {
    pub manifest: PathBuf,
    /// Draws per sample.
    #[arg(long)]
    pub samples: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Use the offline simulated teacher even when an endpoint is configured.
    #[arg(long)]
    pub mock: bool,
    /// Accuracy of the simulated teacher.
    #[arg(long)]
    pub mock_accuracy: Option<f64>,
    /// Append-only request journal for resuming interrupted runs.
    #[arg(long)]
    pub journal: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    pub manifest: PathBuf,
    pub traces: PathBuf,
}

#[derive(Args)]
pub struct DedupArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub text_thresh: Option<f64>,
    #[arg(long)]
    pub img_hamming: Option<u32>,
    /// Signature cache file, read if present and rewritten afterwards.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Args)]
pub struct CurateArgs {
    pub manifest: PathBuf,
    /// Pass-rate table written by `verify`; enables the difficulty filter
    /// together with `--lo`/`--hi`.
    #[arg(long)]
    pub pass_rates: Option<PathBuf>,
    #[arg(long)]
    pub lo: Option<f64>,
    #[arg(long)]
    pub hi: Option<f64>,
    /// Traces to length-filter and restrict to the kept samples.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub min_tokens: Option<usize>,
}

#[derive(Args)]
pub struct PackArgs {
    /// Traces (JSON Lines).
    pub input: PathBuf,
    /// Output directory; overrides `--out`.
    pub dest: Option<PathBuf>,
    #[arg(long)]
    pub capacity: Option<usize>,
    /// Only pack traces whose sample is in this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Pack only traces that passed verification.
    #[arg(long)]
    pub passed_only: bool,
}

#[derive(Args)]
pub struct MixArgs {
    /// `path=weight`, weight as an integer or `p/q`.
    #[arg(long = "part", required = true)]
    pub parts: Vec<String>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct StatsArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Args)]
pub struct RlTrainArgs {
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_groups: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Share of two-digit tasks.
    #[arg(long)]
    pub hard_fraction: Option<f64>,
    #[arg(long)]
    pub curriculum: bool,
}

#[derive(Args)]
pub struct RlCheckArgs {
    /// grpo, dapo, gspo or all.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub instances: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub rollouts: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Group scores by `domain` or `source`.
    #[arg(long)]
    pub group_by: Option<String>,
    #[arg(long)]
    pub mock: bool,
    #[arg(long)]
    pub mock_accuracy: Option<f64>,
}

struct Ctx {
    settings: Settings,
    seed: u64,
    workers: usize,
    out: PathBuf,
}

impl Ctx {
    fn new(g: &Global, command: &str, out_override: Option<&Path>) -> Result<Ctx, CliError> {
        let mut settings = Settings::load(g.config.as_deref())?;
        settings.record("command", &command);
        let seed = settings.pick("seed", g.seed, 0u64)?;
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        let workers = settings.pick("workers", g.workers, cores)?.max(1);
        let out = match out_override {
            Some(p) => p.to_path_buf(),
            None => match &g.out {
                Some(p) => p.clone(),
                None => settings.peek::<String>("out")?.unwrap_or_else(|| "out".into()).into(),
            },
        };
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        // A second init in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
        Ok(Ctx { settings, seed, workers, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(self) -> Result<(), CliError> {
        self.settings.write(&self.out)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    PathBuf::from(format!("{}.lineage.json", s.strip_suffix(".jsonl").unwrap_or(&s)))
}

fn read_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    Ok(DatasetManifest::read_jsonl(path, Some(&sidecar(path)))?)
}

fn write_manifest(ctx: &Ctx, name: &str, m: &DatasetManifest) -> Result<(), CliError> {
    let p = ctx.path(name);
    m.write_jsonl(&p)?;
    m.write_sidecar(&sidecar(&p))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("json") + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn verifier_from_env() -> Verifier {
    match EndpointConfig::from_env("OMR_JUDGE") {
        Some(ep) => {
            let model = ep.model.clone();
            Verifier::with_judge(Judge::new(Arc::new(HttpChatClient::new(ep, REQUEST_TIMEOUT)), model))
        }
        None => Verifier::rule_only(),
    }
}

fn pick_client(
    prefix: &str,
    mock: bool,
    m: &DatasetManifest,
    accuracy: f64,
    seed: u64,
) -> (Box<dyn ChatClient>, Option<String>) {
    match EndpointConfig::from_env(prefix).filter(|_| !mock) {
        Some(ep) => {
            let model = ep.model.clone();
            (Box::new(HttpChatClient::new(ep, REQUEST_TIMEOUT)), Some(model))
        }
        None => (Box::new(SimulatedTeacher::new(m, accuracy, seed)), None),
    }
}

fn parse_objective(s: &str) -> Result<ObjectiveKind, CliError> {
    s.parse().map_err(|e: omr_rl::rlcore::RlError| CliError::Usage(e.to_string()))
}

pub fn dispatch(g: &Global, command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest(a) => ingest(g, a),
        Command::Normalize(a) => normalize(g, a),
        Command::Distill(a) => distill(g, a),
        Command::Verify(a) => verify(g, a),
        Command::Dedup(a) => dedup(g, a),
        Command::Curate(a) => curate(g, a),
        Command::Pack(a) => pack(g, a),
        Command::Mix(a) => mix(g, a),
        Command::Stats(a) => stats(g, a),
        Command::RlTrain(a) => rl_train(g, a),
        Command::RlCheck(a) => rl_check(g, a),
        Command::Eval(a) => eval(g, a),
    }
}

fn ingest(g: &Global, a: IngestArgs) -> Result<(), CliError> {
    let mut ctx = Ctx::new(g, "ingest", None)?;
    let source = ctx.settings.pick("source", a.source, "input".to_string())?;
    let rep = ingest_records(&a.input, &source)?;
    write_manifest(&ctx, "manifest.jsonl", &rep.manifest)?;
    let skipped: Vec<_> =
        rep.skipped.iter().map(|(line, reason)| serde_json::json!({ "line": line, "reason": reason })).collect();
    write_json(&ctx.path("ingest_report.json"), &serde_json::json!({
        "accepted": rep.manifest.len(),
        "skipped": skipped,
    }))?;
    println!("ingested {} records, skipped {}", rep.manifest.len(), rep.skip_count());
    ctx.finish()
}

fn normalize(g: &Global, a: ManifestArg) -> Result<(), CliError> {
    let ctx = Ctx::new(g, "normalize", None)?;
    let m = normalize_format(&read_manifest(&a.manifest)?)?;
    write_manifest(&ctx, "manifest.jsonl", &m)?;
    println!("normalized {} records", m.len());
    ctx.finish()
}

fn distill(g: &Global, a: DistillArgs) -> Result<(), CliError> {
    let mut ctx = Ctx::new(g, "distill", None)?;
    let m = read_manifest(&a.manifest)?;
    let n = ctx.settings.pick("samples", a.samples, 8u32)?;
    let accuracy = ctx.settings.pick("mock_accuracy", a.mock_accuracy, 0.7)?;
    let (client, model) = pick_client("OMR_TEACHER", a.mock, &m, accuracy, ctx.seed);
    let mut cfg = TeacherConfig { workers: ctx.workers, ..Default::default() };
    cfg.temperature = ctx.settings.pick("temperature", a.temperature, cfg.temperature)?;
    if let Some(model) = model {
        cfg.model = model;
    }
    ctx.settings.record("teacher", &cfg);
    let journal = a.journal.as_deref().map(Journal::open).transpose()?;
    let outcome = sample_traces(&m, n, client.as_ref(), &cfg, journal.as_ref())?;
    write_jsonl(&ctx.path("traces.jsonl"), &outcome.traces)?;
    write_json(&ctx.path("distill_report.json"), &serde_json::json!({
        "traces": outcome.traces.len(),
        "issued": outcome.issued,
        "replayed": outcome.replayed,
        "empty_replies": outcome.empty_replies,
        "incomplete": outcome.incomplete,
        "failures": outcome.failures,
    }))?;
    println!("{} traces ({} requests issued, {} failed)", outcome.traces.len(), outcome.issued, outcome.failures.len());
    ctx.finish()
}

fn verify(g: &Global, a: VerifyArgs) -> Result<(), CliError> {
    let ctx = Ctx::new(g, "verify", None)?;
    let m = read_manifest(&a.manifest)?;
    let traces: Vec<ReasoningTrace> = read_jsonl(&a.traces)?;
    let out = rejection_filter(&traces, &m, &verifier_from_env())?;
    write_jsonl(&ctx.path("verified.jsonl"), &out.kept)?;
    write_jsonl(&ctx.path("judged.jsonl"), &out.judged)?;
    write_json(&ctx.path("pass_rates.json"), &out.table)?;
    println!("{} of {} traces passed", out.kept.len(), traces.len());
    ctx.finish()
}

fn dedup(g: &Global, a: DedupArgs) -> Result<(), CliError> {
    let mut ctx = Ctx::new(g, "dedup", None)?;
    let m = read_manifest(&a.manifest)?;
    let text = ctx.settings.pick("text_thresh", a.text_thresh, DEFAULT_TEXT_THRESH)?;
    let img = ctx.settings.pick("img_hamming", a.img_hamming, DEFAULT_IMG_HAMMING)?;
    let cache = match &a.cache {
        Some(p) if p.exists() => SignatureCache::load(p)?,
        _ => SignatureCache::new(),
    };
    let clusters = near_dup_clusters(&m, text, img, &cache)?;
    let kept = dedup_pass(&m, &clusters)?;
    if let Some(p) = &a.cache {
        cache.save(p)?;
    }
    write_manifest(&ctx, "manifest.jsonl", &kept)?;
    let multi: Vec<&Vec<String>> = clusters.iter().filter(|c| c.len() > 1).collect();
    write_json(&ctx.path("clusters.json"), &multi)?;
    println!("kept {} of {} records ({} duplicate clusters)", kept.len(), m.len(), multi.len());
    ctx.finish()
}

fn curate(g: &Global, a: CurateArgs) -> Result<(), CliError> {
    let mut ctx = Ctx::new(g, "curate", None)?;
    let mut m = read_manifest(&a.manifest)?;
    let mut report = serde_json::Map::new();
    match (a.lo.is_some() || a.hi.is_some(), &a.pass_rates) {
        (true, None) => return Err(CliError::Usage("--lo/--hi need --pass-rates".into())),
        (true, Some(p)) => {
            let lo = ctx.settings.pick("lo", a.lo, 0.0)?;
            let hi = ctx.settings.pick("hi", a.hi, 1.0)?;
            let table: PassRateTable = read_json(p)?;
            let f = difficulty_filter(&m, &table, lo, hi)?;
            report.insert("difficulty_unscored".into(), serde_json::json!(f.unscored));
            m = f.manifest;
        }
        (false, _) => ctx.settings.record("difficulty_filter", &false),
    }
    write_manifest(&ctx, "manifest.jsonl", &m)?;
    report.insert("records".into(), serde_json::json!(m.len()));
    if let Some(tp) = &a.traces {
        let min = ctx.settings.pick("min_tokens", a.min_tokens, 0usize)?;
        let traces: Vec<ReasoningTrace> = read_jsonl(tp)?;
        let ids: HashSet<&str> = m.records.iter().map(|s| s.id.as_str()).collect();
        let kept: Vec<ReasoningTrace> =
            length_filter(&traces, min).into_iter().filter(|t| ids.contains(t.sample_id.as_str())).collect();
        write_jsonl(&ctx.path("traces.jsonl"), &kept)?;
        report.insert("traces".into(), serde_json::json!(kept.len()));
    }
    write_json(&ctx.path("curate_report.json"), &report)?;
    println!("curated {} records", m.len());
    ctx.finish()
}

fn pack(g: &Global, a: PackArgs) -> Result<(), CliError> {
    let mut ctx = Ctx::new(g, "pack", a.dest.as_deref())?;
    let capacity = ctx.settings.pick("capacity", a.capacity, DEFAULT_CAPACITY)?;
    let passed_only = ctx.settings.pick("passed_only", Some(a.passed_only).filter(|b| *b), false)?;
    let mut traces: Vec<ReasoningTrace> = read_jsonl(&a.input)?;
    if let Some(mp) = &a.manifest {
        let m = read_manifest(mp)?;
        let ids: HashSet<String> = m.records.into_iter().map(|s| s.id).collect();
        traces.retain(|t| ids.contains(&t.sample_id));
    }
    if passed_only {
        traces.retain(|t| t.verdict.passed());
    }
    let (batches, overflow) = pack_all(traces.iter().map(PackItem::from), capacity)?;
    write_packed(&ctx.path("packed.bin"), &ctx.path("packed.index.json"), &batches)?;
    let stats = pack_stats(&batches, &overflow);
    write_json(&ctx.path("pack_stats.json"), &serde_json::json!({ "stats": stats, "overflow": overflow }))?;
    println!(
        "{} batches, utilization {:.4}, {} overflow",
        stats.batches, stats.utilization, stats.overflow
    );
    ctx.finish()
}

fn mix(g: &Global, a: MixArgs) -> Result<(), CliError> {
    let mut ctx = Ctx::new(g, "mix", None)?;
    let limit: Option<usize> = ctx.settings.pick("limit", a.limit.map(Some), None)?;
    let mut parts = Vec::new();
    for spec in &a.parts {
        let (path, w) = spec
            .rsplit_once('=')
            .ok_or_else(|| CliError::Usage(format!("--part {spec:?}: expected path=weight")))?;
        let weight: Weight = w.parse().map_err(|_| CliError::Usage(format!("--part {spec:?}: bad weight {w:?}")))?;
        parts.push((read_manifest(Path::new(path))?, weight));
    }
    ctx.settings.record("parts", &a.parts);
    let m = mix_domains(&parts, ctx.seed, limit)?;
    write_manifest(&ctx, "manifest.jsonl", &m)?;
    println!("mixed {} records", m.len());
    ctx.finish()
}

fn stats(g: &Global, a: StatsArgs) -> Result<(), CliError> {
    let ctx = Ctx::new(g, "stats", None)?;
    let m = read_manifest(&a.manifest)?;
    let mut s = corpus_stats(&m);
    if let Some(tp) = &a.traces {
        let traces: Vec<ReasoningTrace> = read_jsonl(tp)?;
        s = s.with_traces(&traces);
    }
    std::fs::write(ctx.path("stats.json"), s.to_json() + "\n").map_err(|e| CliError::io(&ctx.path("stats.json"), e))?;
    println!("{}", s.to_json());
    ctx.finish()
}

fn rl_train(g: &Global, a: RlTrainArgs) -> Result<(), CliError> {
    let mut ctx = Ctx::new(g, "rl-train", None)?;
    let d = TrainConfig::default();
    let objective = parse_objective(&ctx.settings.pick("objective", a.objective, d.objective.to_string())?)?;
    let n_tasks = ctx.settings.pick("tasks", a.tasks, 200usize)?;
    let hard = ctx.settings.pick("hard_fraction", a.hard_fraction, 0.0)?;
    let cfg = TrainConfig {
        objective,
        group_size: ctx.settings.pick("group_size", a.group_size, d.group_size)?,
        temperature: ctx.settings.pick("temperature", a.temperature, d.temperature)?,
        steps: ctx.settings.pick("steps", a.steps, d.steps)?,
        lr: ctx.settings.pick("lr", a.lr, d.lr)?,
        batch_groups: ctx.settings.pick("batch_groups", a.batch_groups, d.batch_groups)?,
        seed: ctx.seed,
        clip: Some(ClipConfig::for_kind(objective)),
        curriculum: CurriculumConfig { enabled: a.curriculum, ..d.curriculum },
        ..d
    };
    if !(0.0..=1.0).contains(&hard) {
        return Err(CliError::Usage("--hard-fraction must lie in [0, 1]".into()));
    }
    let tasks = generate_tasks(n_tasks, ctx.seed, DifficultyMix { easy: 1.0 - hard, hard })?;
    write_json(&ctx.path("run_config.json"), &cfg)?;
    let records = train_loop(&mut SoftmaxSequencePolicy::default(), &tasks, &cfg)?;
    write_jsonl(&ctx.path("metrics.jsonl"), &records)?;
    if let Some(s) = reward_summary(&records, 5, 50) {
        println!("{objective}: mean reward {:.3} -> {:.3} over {} steps", s.initial, s.last, records.len());
    }
    ctx.finish()
}

fn rl_check(g: &Global, a: RlCheckArgs) -> Result<(), CliError> {
    let mut ctx = Ctx::new(g, "rl-check", None)?;
    let which = ctx.settings.pick("objective", a.objective, "all".to_string())?;
    let instances = ctx.settings.pick("instances", a.instances, 100usize)?;
    let kinds = if which == "all" { ObjectiveKind::ALL.to_vec() } else { vec![parse_objective(&which)?] };
    let mut reports = Vec::new();
    for kind in kinds {
        let rep = oracle_suite(kind, instances, ctx.seed)?;
        println!(
            "{} {kind}: {} instances ({} skipped near clip edges), {} parameters, max rel err {:.2e}",
            if rep.passed() { "PASS" } else { "FAIL" },
            rep.checked,
            rep.skipped,
            rep.params_checked,
            rep.max_rel_err
        );
        reports.push(rep);
    }
    write_json(&ctx.path("oracle_report.json"), &reports)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    ctx.finish()?;
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} objective(s) failed the gradient oracle")));
    }
    Ok(())
}

fn eval(g: &Global, a: EvalArgs) -> Result<(), CliError> {
    let mut ctx = Ctx::new(g, "eval", None)?;
    let m = read_manifest(&a.manifest)?;
    let accuracy = ctx.settings.pick("mock_accuracy", a.mock_accuracy, 0.5)?;
    let (client, model) = pick_client("OMR_POLICY", a.mock, &m, accuracy, ctx.seed);
    let d = EvalConfig::default();
    let cfg = EvalConfig {
        model: model.unwrap_or(d.model.clone()),
        rollouts: ctx.settings.pick("rollouts", a.rollouts, d.rollouts)?,
        temperature: ctx.settings.pick("temperature", a.temperature, d.temperature)?,
        seed: ctx.seed,
        workers: ctx.workers,
        ..d
    };
    let grouping = match ctx.settings.pick("group_by", a.group_by, "domain".to_string())?.as_str() {
        "domain" => Grouping::Domain,
        "source" => Grouping::Source,
        other => return Err(CliError::Usage(format!("--group-by {other:?}: expected domain or source"))),
    };
    ctx.settings.record("eval", &cfg);
    let results = run_eval(&m, client.as_ref(), &verifier_from_env(), &cfg)?;
    let report = aggregate_scores(&results, grouping);
    report.write(&ctx.out)?;
    print!("{}", report.to_text());
    ctx.finish()
}
