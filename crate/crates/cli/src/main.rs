use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use autofocus::backend::http::{probe, HttpConfig, HttpVisionModel, ENV_API_KEY};
use autofocus::backend::VisionModel;
use autofocus::config::ConfigFile;
use autofocus::coord_parser::GrammarStyle;
use autofocus::harness::{self, viz, DatasetRecord, EvalCase};
use autofocus::mock_world::{
    benchmark_items, render_scene, BenchmarkSpec, MockServer, MockVisionModel, NoiseModel,
    ServerOptions,
};
use autofocus::pipeline::{run, Backends, PipelineConfig, Trace, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "autofocus",
    version,
    about = "Uncertainty-guided zoom-in grounding for GUI screenshots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ground one instruction on one screenshot.
    Ground(GroundArgs),
    /// Evaluate a dataset (or the built-in mock benchmark) and write a report.
    Eval(EvalArgs),
    /// Write a synthetic dataset of rendered mock scenes.
    MockGen(MockGenArgs),
    /// Re-render heatmap and overlay pictures from a saved trace.
    Viz(VizArgs),
    /// Check that a backend returns per-token log-probabilities.
    Probe(ProbeArgs),
    /// Serve the mock oracle over the chat-completions protocol.
    MockServe(MockServeArgs),
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum BackendKind {
    Http,
    Mock,
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// `http` talks to an OpenAI-compatible endpoint; `mock` uses the
    /// in-process oracle.
    #[arg(long, value_enum, default_value = "http")]
    backend: BackendKind,
    /// Predictor endpoint; falls back to AUTOFOCUS_BASE_URL.
    #[arg(long, env = "AUTOFOCUS_BASE_URL")]
    base_url: Option<String>,
    /// Predictor model name; falls back to AUTOFOCUS_MODEL.
    #[arg(long, env = "AUTOFOCUS_MODEL")]
    model: Option<String>,
    /// Verifier endpoint (defaults to the predictor's).
    #[arg(long)]
    verifier_base_url: Option<String>,
    #[arg(long)]
    verifier_model: Option<String>,
    /// Aggregator endpoint (defaults to the predictor's).
    #[arg(long)]
    aggregator_base_url: Option<String>,
    #[arg(long)]
    aggregator_model: Option<String>,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
    /// Mock: localisation noise scale in pixels.
    #[arg(long, default_value_t = 1.0)]
    mock_base_sigma: f64,
    /// Mock: simulated resolution loss.
    #[arg(long, default_value_t = 4.0)]
    mock_downsample: f64,
    /// Mock: chance of answering with a distractor.
    #[arg(long, default_value_t = 0.1)]
    mock_confusion: f64,
    /// Mock: error rate of verification and aggregation answers.
    #[arg(long, default_value_t = 0.05)]
    mock_judge_error: f64,
}

struct Models {
    predictor: Arc<dyn VisionModel>,
    verifier: Arc<dyn VisionModel>,
    aggregator: Arc<dyn VisionModel>,
}

impl Models {
    fn backends(&self) -> Backends<'_> {
        Backends {
            predictor: self.predictor.as_ref(),
            verifier: self.verifier.as_ref(),
            aggregator: self.aggregator.as_ref(),
        }
    }
}

impl BackendArgs {
    fn mock(&self, cfg: &PipelineConfig) -> Result<MockVisionModel> {
        let noise = NoiseModel {
            downsample_factor: self.mock_downsample,
            base_sigma: self.mock_base_sigma,
            confusion_rate: self.mock_confusion,
        };
        noise.validate()?;
        Ok(MockVisionModel {
            noise,
            grammar: cfg.grammar.clone(),
            verify_error_rate: self.mock_judge_error,
            aggregate_error_rate: self.mock_judge_error,
        })
    }

    fn http(
        &self,
        base_url: Option<&String>,
        model: Option<&String>,
    ) -> Result<Arc<dyn VisionModel>> {
        let base_url = base_url
            .or(self.base_url.as_ref())
            .context("no --base-url given and AUTOFOCUS_BASE_URL is unset")?;
        let model = model
            .or(self.model.as_ref())
            .context("no --model given and AUTOFOCUS_MODEL is unset")?;
        let cfg = HttpConfig {
            api_key: std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty()),
            timeout: std::time::Duration::from_secs(self.timeout),
            ..HttpConfig::new(base_url.clone(), model.clone())
        };
        Ok(Arc::new(HttpVisionModel::new(cfg)?))
    }

    fn build(&self, cfg: &PipelineConfig) -> Result<Models> {
        match self.backend {
            BackendKind::Mock => {
                let m: Arc<dyn VisionModel> = Arc::new(self.mock(cfg)?);
                Ok(Models {
                    predictor: m.clone(),
                    verifier: m.clone(),
                    aggregator: m,
                })
            }
            BackendKind::Http => Ok(Models {
                predictor: self.http(None, None)?,
                verifier: self.http(
                    self.verifier_base_url.as_ref(),
                    self.verifier_model.as_ref(),
                )?,
                aggregator: self.http(
                    self.aggregator_base_url.as_ref(),
                    self.aggregator_model.as_ref(),
                )?,
            }),
        }
    }
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// TOML or JSON file with flat configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Return the greedy answer without self-check or zooming.
    #[arg(long)]
    no_refine: bool,
    /// Ablation variant [default: full].
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Sampling temperature [default: 0.75].
    #[arg(long)]
    temperature: Option<f64>,
    /// Number of sampled answers [default: 5].
    #[arg(long)]
    samples: Option<usize>,
    /// Pixels of kernel spread per unit of perplexity [default: 50].
    #[arg(long)]
    beta: Option<f64>,
    /// Scale factors of the field-level proposals [default: 5,8].
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Shape-aware zoom strength in [0, 1] [default: 0.5].
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of per-sample proposals kept after NMS [default: 3].
    #[arg(long)]
    k_local: Option<usize>,
    /// NMS IoU threshold [default: 0.5].
    #[arg(long)]
    iou: Option<f64>,
    /// Minimum crop side in pixels [default: 336].
    #[arg(long)]
    min_crop: Option<f64>,
    /// In-flight backend calls per query, and cases in flight for `eval` [default: 4].
    #[arg(long)]
    concurrency: Option<usize>,
    /// Coordinate grammar: paren_pair, json_object or tagged_box.
    #[arg(long)]
    grammar: Option<String>,
    /// The backend answers in 0..1 fractions rather than pixels.
    #[arg(long)]
    normalized: bool,
    /// Long side of resized crops [default: 1288].
    #[arg(long)]
    crop_long_side: Option<u32>,
    /// Directory for per-case trace JSON.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            ConfigFile::load(path)?
                .apply(&mut cfg)
                .map_err(anyhow::Error::msg)?;
        }
        let cli = ConfigFile {
            coordinate_grammar: self.grammar.clone(),
            normalized_coordinates: self.normalized.then_some(true),
            beta: self.beta,
            temperature: self.temperature,
            top_p: None,
            n_samples: self.samples,
            k_local: self.k_local,
            alphas: self.alphas.clone(),
            lambda: self.lambda,
            iou_threshold: self.iou,
            min_crop: self.min_crop,
            concurrency: self.concurrency,
            seed: self.seed,
        };
        cli.apply(&mut cfg).map_err(anyhow::Error::msg)?;
        if let Some(long_side) = self.crop_long_side {
            cfg.crop_target = autofocus::ResizePolicy::LongSide { long_side };
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if self.no_refine {
            cfg.refinement_enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GroundArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    instruction: String,
    /// Write the full trace here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset JSON; omit to run the seeded mock benchmark.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Number of mock benchmark scenes when no dataset is given.
    #[arg(long, default_value_t = 200)]
    mock_scenes: usize,
    #[arg(long, default_value_t = 2024)]
    mock_seed: u64,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct MockGenArgs {
    /// Output directory for images and dataset.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

#[derive(Args)]
struct VizArgs {
    /// Trace JSON written by `ground --out` or `--trace-dir`.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Heatmap cell size in pixels.
    #[arg(long, default_value_t = 4)]
    downsample: u32,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, env = "AUTOFOCUS_BASE_URL")]
    base_url: Option<String>,
    #[arg(long, env = "AUTOFOCUS_MODEL")]
    model: Option<String>,
    #[arg(long, default_value = "paren_pair")]
    grammar: String,
}

#[derive(Args)]
struct MockServeArgs {
    #[arg(long, default_value_t = 8077)]
    port: u16,
    /// Strip log-probabilities from replies.
    #[arg(long)]
    no_logprobs: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_trace(dir: &Path, index: usize, trace: &Trace) -> Result<()> {
    write_json(&dir.join(format!("case_{index:05}.json")), trace)?;
    write_json(
        &dir.join(format!("case_{index:05}.timing.json")),
        &trace.timings,
    )
}

fn ground(args: GroundArgs) -> Result<()> {
    let cfg = args.pipeline.config()?;
    let models = args.backend.build(&cfg)?;
    let img = image::open(&args.image)
        .with_context(|| format!("opening {}", args.image.display()))?
        .to_rgb8();
    let (p, trace) = run(Arc::new(img), &args.instruction, &cfg, models.backends())?;
    if let Some(out) = &args.out {
        write_json(out, &trace)?;
    }
    if let Some(dir) = &args.pipeline.trace_dir {
        write_trace(dir, 0, &trace)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "x": p.x,
            "y": p.y,
            "outcome": trace.outcome,
            "verify_result": trace.verify_result,
            "calls": trace.calls,
            "flags": trace.flags,
        }))?
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = args.pipeline.config()?;
    if args.dataset.is_none() && args.backend.backend != BackendKind::Mock {
        bail!("the built-in benchmark needs --backend mock; pass --dataset for real backends");
    }
    let models = args.backend.build(&cfg)?;
    let cases: Vec<EvalCase> = match &args.dataset {
        Some(path) => harness::load_dataset(path)?,
        None => autofocus::mock_world::benchmark_cases(&BenchmarkSpec {
            n_scenes: args.mock_scenes,
            seed: args.mock_seed,
            ..Default::default()
        })?,
    };
    let out = harness::evaluate(&cases, &cfg, models.backends(), cfg.concurrency_limit)?;
    if let Some(dir) = &args.pipeline.trace_dir {
        for (i, t) in out.traces.iter().enumerate() {
            if let Some(t) = t {
                write_trace(dir, i, t)?;
            }
        }
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, out.report.to_json())
                .with_context(|| format!("writing {}", path.display()))?;
            let sidecar = path.with_extension("timing.json");
            write_json(
                &sidecar,
                &json!({ "wall_clock_s": out.wall_clock.as_secs_f64() }),
            )?;
        }
        None => print!("{}", out.report.to_json()),
    }
    eprintln!(
        "{} cases, accuracy {}, {:.1}s",
        out.report.n_cases,
        out.report
            .accuracy
            .map(|a| format!("{:.2}%", 100.0 * a))
            .unwrap_or_else(|| "n/a".into()),
        out.wall_clock.as_secs_f64()
    );
    Ok(())
}

fn mock_gen(args: MockGenArgs) -> Result<()> {
    let items = benchmark_items(&BenchmarkSpec {
        n_scenes: args.scenes,
        seed: args.seed,
        ..Default::default()
    })?;
    let img_dir = args.out.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut records = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let name = format!("images/scene_{i:04}.png");
        std::fs::write(
            args.out.join(&name),
            autofocus::backend::http::encode_png(&render_scene(&item.scene)),
        )?;
        let t = item.target();
        records.push(DatasetRecord {
            img_filename: name,
            instruction: t.instruction(),
            bbox: [t.bbox.x_min, t.bbox.y_min, t.bbox.x_max, t.bbox.y_max],
            platform: "mock".into(),
            target_kind: t.kind.target_kind().into(),
        });
    }
    harness::save_dataset(&args.out.join("dataset.json"), &records)?;
    write_json(&args.out.join("scenes.json"), &items)?;
    eprintln!("wrote {} scenes to {}", items.len(), args.out.display());
    Ok(())
}

fn viz_cmd(args: VizArgs) -> Result<()> {
    let trace: Trace = serde_json::from_str(
        &std::fs::read_to_string(&args.trace)
            .with_context(|| format!("reading {}", args.trace.display()))?,
    )?;
    let img = image::open(&args.image)?.to_rgb8();
    std::fs::create_dir_all(&args.out)?;
    viz::emit_overlay(&img, &trace, &args.out.join("overlay.png"))?;
    if trace.kernels.is_empty() {
        eprintln!("trace has no kernels (the greedy answer was kept); skipping the heatmap");
    } else {
        viz::emit_heatmap(&trace, &args.out.join("heatmap.png"), args.downsample)?;
    }
    Ok(())
}

fn probe_cmd(args: ProbeArgs) -> Result<()> {
    let cfg = HttpConfig::from_env(args.base_url, args.model)?;
    let model = HttpVisionModel::new(cfg)?;
    let style: GrammarStyle = args.grammar.parse().map_err(anyhow::Error::msg)?;
    let report = probe(&model, &autofocus::CoordinateGrammar::new(style));
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.ok {
        bail!("probe failed: {}", report.message);
    }
    Ok(())
}

fn mock_serve(args: MockServeArgs) -> Result<()> {
    let model = args.backend.mock(&PipelineConfig::default())?;
    let server = MockServer::start(
        Arc::new(model),
        ServerOptions {
            logprobs: !args.no_logprobs,
        },
        args.port,
    )?;
    eprintln!("mock backend listening on {}", server.base_url());
    server.wait();
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ground(a) => ground(a),
        Command::Eval(a) => eval(a),
        Command::MockGen(a) => mock_gen(a),
        Command::Viz(a) => viz_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::MockServe(a) => mock_serve(a),
    }
}
