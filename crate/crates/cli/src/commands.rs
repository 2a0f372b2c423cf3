use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use tam_core::fuse::{ExplainConfig, Explainer};
use tam_core::metrics::{
    self, EvalOptions, EvalReport, InterferenceStats, PairStat, PairingMode, Totals, REPORT_SCHEMA_VERSION,
};
use tam_core::render::{self, RenderConfig};
use tam_core::{synth, FeatureDump};

use crate::input::{discover, Conversation};
use crate::{Cli, Command, PipelineArgs, REPRODUCTION_RECIPE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{failed} of {total} conversations failed; see log")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_file(path, text)
}

pub(crate) fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("TAM_THREADS / --threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Explain { io, pipeline } => explain(&io.input, &io.out, &pipeline),
        Command::Eval {
            io,
            pipeline,
            no_first_token_sub,
            masks,
            placebo,
            seed,
        } => eval(EvalRun {
            inputs: &io.input,
            out: io.out.as_deref(),
            pipeline: &pipeline,
            opts: EvalOptions {
                first_token_substitution: !no_first_token_sub,
            },
            masks: masks.as_deref(),
            placebo: placebo.then_some(seed),
        }),
        Command::Render { io, pipeline } => render_cmd(&io.input, &io.out, &pipeline),
        Command::Stats {
            io,
            mode,
            pairs,
            seed,
        } => stats(&io.input, &io.out, mode.into(), pairs, seed),
        Command::Synth { out } => {
            for (name, d) in synth::corpus() {
                let dir = out.join(name);
                synth::write_fixture(&d, &dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
            }
            Ok(())
        }
        Command::Recipe => {
            print!("{REPRODUCTION_RECIPE}");
            Ok(())
        }
    })
}

fn config(pipeline: &PipelineArgs) -> Result<ExplainConfig, CliError> {
    let cfg = pipeline.config();
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Conversations handled per parallel batch; bounds memory on large inputs.
fn chunk_size() -> usize {
    2 * rayon::current_num_threads()
}

/// Runs `work` over `convs` in parallel batches and feeds the results to
/// `sink` in input order. Failed conversations are logged and counted.
fn stream<T, W, S>(convs: &[Conversation], work: W, mut sink: S) -> Result<Vec<String>, CliError>
where
    T: Send,
    W: Fn(&Conversation) -> Result<T, String> + Sync,
    S: FnMut(&Conversation, T) -> Result<(), CliError>,
{
    let mut failures = Vec::new();
    for chunk in convs.chunks(chunk_size()) {
        let results: Vec<Result<T, String>> = chunk.par_iter().map(&work).collect();
        for (conv, result) in chunk.iter().zip(results) {
            match result {
                Ok(v) => sink(conv, v)?,
                Err(e) => {
                    error!("{}: {e}", conv.name);
                    failures.push(format!("{}: {e}", conv.name));
                }
            }
        }
    }
    Ok(failures)
}

fn finish(failures: &[String], total: usize) -> Result<(), CliError> {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed: failures.len(),
            total,
        })
    }
}

#[derive(Serialize)]
struct RunConfig {
    stage: &'static str,
    filter: &'static str,
    kernel: usize,
    epsilon: f64,
}

impl RunConfig {
    fn new(cfg: &ExplainConfig) -> Self {
        RunConfig {
            stage: cfg.stage.name(),
            filter: cfg.filter.kind.name(),
            kernel: cfg.filter.kernel_size,
            epsilon: cfg.causal.epsilon,
        }
    }
}

#[derive(Serialize)]
struct MapFile<'a> {
    conversation: &'a str,
    answer_index: usize,
    token_index: usize,
    text: &'a str,
    scale: f64,
    normalization_range: (f64, f64),
    visual: &'a [f64],
    textual: &'a [f64],
}

#[derive(Serialize)]
struct ExplainSummary<'a> {
    config: RunConfig,
    conversations: Vec<(String, usize)>,
    failures: &'a [String],
}

fn explain(inputs: &[PathBuf], out: &Path, pipeline: &PipelineArgs) -> Result<(), CliError> {
    let cfg = config(pipeline)?;
    let convs = discover(inputs)?;
    let mut written = Vec::new();
    let failures = stream(
        &convs,
        |conv| explain_one(conv, out, &cfg),
        |conv, n| {
            info!("{}: {n} maps", conv.name);
            written.push((conv.name.clone(), n));
            Ok(())
        },
    )?;
    write_json(
        &out.join("explain.json"),
        &ExplainSummary {
            config: RunConfig::new(&cfg),
            conversations: written,
            failures: &failures,
        },
    )?;
    finish(&failures, convs.len())
}

fn explain_one(conv: &Conversation, out: &Path, cfg: &ExplainConfig) -> Result<usize, String> {
    let d = conv.load(None).map_err(|e| e.to_string())?;
    let explainer = Explainer::new(&d).map_err(|e| e.to_string())?;
    let dir = out.join(&conv.name);
    let mut maps = Vec::with_capacity(d.n_answer());
    for i in 0..d.n_answer() {
        let trace = explainer.trace(i, cfg).map_err(|e| e.to_string())?;
        let text = &d.answer_tokens[i].text;
        let file = MapFile {
            conversation: &conv.name,
            answer_index: i,
            token_index: trace.result.token_index,
            text,
            scale: trace.scale,
            normalization_range: trace.result.normalization_range,
            visual: &trace.result.visual,
            textual: &trace.result.textual,
        };
        let name = format!("{i}_{}.json", render::slug(text));
        write_json(&dir.join("maps").join(name), &file).map_err(|e| e.to_string())?;
        maps.push(trace.result);
    }
    let html = render::render_report(&conv.name, &d, &conv.dir, &maps, &RenderConfig::default())
        .map_err(|e| e.to_string())?;
    write_file(&dir.join("report.html"), html).map_err(|e| e.to_string())?;
    Ok(maps.len())
}

struct EvalRun<'a> {
    inputs: &'a [PathBuf],
    out: Option<&'a Path>,
    pipeline: &'a PipelineArgs,
    opts: EvalOptions,
    masks: Option<&'a Path>,
    placebo: Option<u64>,
}

#[derive(Serialize)]
struct ConversationRow {
    name: String,
    obj_iou: f64,
    func_iou: f64,
    f1_iou: f64,
    o: usize,
    u: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    placebo_obj_iou: Option<f64>,
}

#[derive(Serialize)]
struct PlaceboSummary {
    seed: u64,
    real_obj_iou: f64,
    placebo_obj_iou: f64,
    ratio: Option<f64>,
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    schema_version: u32,
    config: RunConfig,
    first_token_substitution: bool,
    obj_iou: f64,
    func_iou: f64,
    f1_iou: f64,
    o: usize,
    u: usize,
    totals: Totals,
    #[serde(skip_serializing_if = "Option::is_none")]
    placebo: Option<PlaceboSummary>,
    conversations: Vec<ConversationRow>,
    issues: Vec<String>,
    failures: &'a [String],
}

/// Per-conversation placebo seed, independent of how many conversations
/// precede this one.
fn conversation_seed(seed: u64, name: &str) -> u64 {
    name.bytes()
        .fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn eval(run: EvalRun<'_>) -> Result<(), CliError> {
    let cfg = config(run.pipeline)?;
    let convs = discover(run.inputs)?;
    let mut per_token = match run.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("per_token.jsonl");
            Some((BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?), path))
        }
        None => None,
    };
    let mut totals = Totals::default();
    let (mut real_sum, mut placebo_sum) = (0.0, 0.0);
    let mut rows = Vec::new();
    let mut issues = Vec::new();

    let failures = stream(
        &convs,
        |conv| {
            let d = conv.load(run.masks).map_err(|e| e.to_string())?;
            let report = metrics::evaluate_dump(&conv.name, &d, &cfg, &run.opts).map_err(|e| e.to_string())?;
            let placebo = match run.placebo {
                Some(seed) => Some(
                    metrics::placebo_test(&d, &cfg, &run.opts, conversation_seed(seed, &conv.name))
                        .map_err(|e| e.to_string())?,
                ),
                None => None,
            };
            Ok((report, placebo))
        },
        |conv, (report, placebo): (EvalReport, Option<metrics::PlaceboReport>)| {
            for issue in &report.issues {
                warn!("{issue}");
            }
            if let Some((w, path)) = per_token.as_mut() {
                for e in &report.per_token {
                    let line = serde_json::to_string(e).expect("entries serialize");
                    writeln!(w, "{line}").map_err(io_err(path))?;
                }
            }
            if let Some(p) = &placebo {
                real_sum += p.real_obj_iou * report.o as f64;
                placebo_sum += p.placebo_obj_iou * report.o as f64;
            }
            totals.merge(&report.totals);
            issues.extend(report.issues);
            rows.push(ConversationRow {
                name: conv.name.clone(),
                obj_iou: report.obj_iou,
                func_iou: report.func_iou,
                f1_iou: report.f1_iou,
                o: report.o,
                u: report.u,
                placebo_obj_iou: placebo.map(|p| p.placebo_obj_iou),
            });
            Ok(())
        },
    )?;
    if let Some((mut w, path)) = per_token {
        w.flush().map_err(io_err(&path))?;
    }

    let label = cfg.stage.name().to_string();
    print!("{}", metrics::summary_table(&[(label, totals)]));
    let placebo = run.placebo.map(|seed| {
        let n = totals.objects.max(1) as f64;
        let (real, fake) = (real_sum / n, placebo_sum / n);
        PlaceboSummary {
            seed,
            real_obj_iou: real,
            placebo_obj_iou: fake,
            ratio: (fake > 0.0).then(|| real / fake),
        }
    });
    if let Some(p) = &placebo {
        let ratio = p.ratio.map_or("inf".to_string(), |r| format!("{r:.2}"));
        println!(
            "placebo  real Obj-IoU {:.2}%  placebo Obj-IoU {:.2}%  ratio {ratio}",
            100.0 * p.real_obj_iou,
            100.0 * p.placebo_obj_iou
        );
    }
    if let Some(dir) = run.out {
        write_json(
            &dir.join("eval_report.json"),
            &EvalSummary {
                schema_version: REPORT_SCHEMA_VERSION,
                config: RunConfig::new(&cfg),
                first_token_substitution: run.opts.first_token_substitution,
                obj_iou: totals.obj_iou(),
                func_iou: totals.func_iou(),
                f1_iou: totals.f1_iou(),
                o: totals.objects,
                u: totals.functions,
                totals,
                placebo,
                conversations: rows,
                issues,
                failures: &failures,
            },
        )?;
    }
    finish(&failures, convs.len())
}

fn render_cmd(inputs: &[PathBuf], out: &Path, pipeline: &PipelineArgs) -> Result<(), CliError> {
    let cfg = config(pipeline)?;
    let convs = discover(inputs)?;
    let failures = stream(
        &convs,
        |conv| render_one(conv, out, &cfg),
        |conv, n| {
            info!("{}: {n} overlays", conv.name);
            Ok(())
        },
    )?;
    finish(&failures, convs.len())
}

fn render_one(conv: &Conversation, out: &Path, cfg: &ExplainConfig) -> Result<usize, String> {
    let d = conv.load(None).map_err(|e| e.to_string())?;
    let maps = Explainer::new(&d)
        .and_then(|e| e.explain_all(cfg))
        .map_err(|e| e.to_string())?;
    let multi = d.layout.frame_count() > 1;
    let rcfg = RenderConfig::default();
    let mut n = 0;
    for (i, map) in maps.iter().enumerate() {
        let text = &d.answer_tokens[i].text;
        for (f, img) in render::render_frames(&d, &conv.dir, map, &rcfg)
            .map_err(|e| e.to_string())?
            .iter()
            .enumerate()
        {
            let name = render::overlay_file_name(i, text, multi.then_some(f));
            let png = render::encode_png(img).map_err(|e| e.to_string())?;
            write_file(&out.join(&conv.name).join(name), png).map_err(|e| e.to_string())?;
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Serialize)]
struct StatsFile {
    mode: PairingMode,
    seed: u64,
    pairs_per_dump: usize,
    pearson_r: f64,
    n_pairs: usize,
    pairs: Vec<PairStat>,
}

fn stats(inputs: &[PathBuf], out: &Path, mode: PairingMode, pairs_per_dump: usize, seed: u64) -> Result<(), CliError> {
    let convs = discover(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    // loading is parallel; sampling stays sequential so one generator
    // serves every conversation in input order
    let failures = stream(
        &convs,
        |conv| conv.load(None).map_err(|e| e.to_string()),
        |conv, d: FeatureDump| {
            match metrics::sample_pairs(&d, mode, &mut rng, pairs_per_dump) {
                Ok(p) => pairs.extend(p),
                Err(e) => warn!("{}: {e}", conv.name),
            }
            Ok(())
        },
    )?;
    let stats = InterferenceStats::from_pairs(mode, pairs).map_err(|e| CliError::Input(e.to_string()))?;
    println!("pearson r = {:.4} over {} pairs", stats.pearson_r, stats.pairs.len());
    write_json(
        &out.join("stats.json"),
        &StatsFile {
            mode,
            seed,
            pairs_per_dump,
            pearson_r: stats.pearson_r,
            n_pairs: stats.pairs.len(),
            pairs: stats.pairs,
        },
    )?;
    finish(&failures, convs.len())
}
