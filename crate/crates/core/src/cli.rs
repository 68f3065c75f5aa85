//! Command-line front end. Every stage of the pipeline is a subcommand; all
//! of them share seed, thread, logging and config-file handling.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use fenceguide::dcl::{self, SoftMask};
use fenceguide::edges::{canny, CannyParams};
use fenceguide::eval;
use fenceguide::guidance::{self, GuidanceParams, ShiftDir, ShiftRange};
use fenceguide::imagecore::{binarize, load_image, load_mask, save_image, save_mask};
use fenceguide::segmenter::{self, TrainConfig};
use fenceguide::synth::{self, DatasetManifest, Split, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "fenceguide", version, about = "Stereo-guided fence segmentation toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages; 1 is the reproducibility reference.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    log_level: Option<LogLevel>,
    /// Print reports as one JSON object per line.
    #[arg(long, global = true)]
    json: bool,
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Canny edge map of one image.
    Edges(EdgesArgs),
    /// Estimate the fence parallax of a stereo pair and write the guidance mask.
    Guidance(GuidanceArgs),
    /// Directional connectivity loss of a (soft) mask.
    Dcl(DclArgs),
    /// Finite-difference check of the connectivity-loss gradient.
    DclGradcheck(GradcheckArgs),
    /// Generate a synthetic pseudo-stereo dataset.
    Synth(SynthArgs),
    /// Train the segmenter on a dataset manifest.
    Train(TrainArgs),
    /// Predict a fence mask for one image or a whole dataset split.
    Predict(PredictArgs),
    /// Precision, recall and F-measure of predicted masks against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct CannyArgs {
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    low: Option<f64>,
    #[arg(long)]
    high: Option<f64>,
}

#[derive(Args, Debug)]
struct EdgesArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    canny: CannyArgs,
}

#[derive(Args, Debug)]
struct GuidanceArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    /// Largest shift tried; defaults to a quarter of the image width.
    #[arg(long)]
    max_shift: Option<usize>,
    /// left, right or both.
    #[arg(long)]
    shift_dir: Option<String>,
    /// Write the MAS curve as CSV.
    #[arg(long)]
    dump_curve: Option<PathBuf>,
    /// Write the log-magnitude spectrum at the selected shift.
    #[arg(long)]
    dump_spectrum: Option<PathBuf>,
    #[command(flatten)]
    canny: CannyArgs,
}

#[derive(Args, Debug)]
struct DclArgs {
    /// Grayscale mask; intensities are scaled to [0,1].
    #[arg(long)]
    mask: PathBuf,
    /// Write a JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    masks: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    /// Fail when fewer coordinates than this fraction pass.
    #[arg(long)]
    min_pass: Option<f64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// 1 = image only, 2 = image plus guidance mask.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_l1: Option<f64>,
    #[arg(long)]
    lambda_dcl: Option<f64>,
    /// Per-epoch checkpoints and history.csv; defaults to `checkpoints/` next to the model.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, conflicts_with = "manifest")]
    image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    fm: Option<PathBuf>,
    /// Output mask for single-image mode.
    #[arg(long, requires = "image")]
    out: Option<PathBuf>,
    /// Predict every record of `--split` instead of one image.
    #[arg(long, requires = "out_dir")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// train or test.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// CSV report path.
    #[arg(long)]
    report: PathBuf,
    /// Report mean and std over this many contiguous folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Chebyshev tolerance in pixels for near misses.
    #[arg(long)]
    tolerance: Option<usize>,
    /// Prediction pixels above this intensity count as fence.
    #[arg(long)]
    threshold: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

impl FromStr for LogLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <LogLevel as ValueEnum>::from_str(s, true)
    }
}

impl Display for LogLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

/// Line-oriented stdout: `event=name key=value ...` or one JSON object.
struct Out {
    json: bool,
    level: LogLevel,
}

impl Out {
    fn line(&self, event: &str, fields: Vec<(&str, Value)>) {
        if self.json {
            let mut m = Map::new();
            m.insert("event".into(), Value::from(event));
            for (k, v) in fields {
                m.insert(k.into(), v);
            }
            println!("{}", Value::Object(m));
        } else {
            let mut s = format!("event={event}");
            for (k, v) in fields {
                let text = match v {
                    Value::String(t) if t.contains(char::is_whitespace) || t.is_empty() => format!("{t:?}"),
                    Value::String(t) => t,
                    other => other.to_string(),
                };
                s.push_str(&format!(" {k}={text}"));
            }
            println!("{s}");
        }
    }

    /// Results of the command; always printed.
    fn report(&self, event: &str, fields: Vec<(&str, Value)>) {
        self.line(event, fields);
    }

    fn info(&self, event: &str, fields: Vec<(&str, Value)>) {
        if self.level >= LogLevel::Info {
            self.line(event, fields);
        }
    }

    fn config(&self, effective: &[(String, String)]) {
        if self.level < LogLevel::Info {
            return;
        }
        if self.json {
            let m: Map<String, Value> = effective.iter().map(|(k, v)| (k.clone(), Value::from(v.clone()))).collect();
            println!("{}", json!({ "event": "config", "values": m }));
        } else {
            for (k, v) in effective {
                println!("{k}={v}");
            }
        }
    }
}

/// Bad flags or config-file contents; reported with exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Merges flag, config-file and default values and records what was used.
struct Resolver {
    file: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
    effective: Vec<(String, String)>,
}

impl Resolver {
    fn new(path: Option<&Path>) -> anyhow::Result<Self> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| usage(format!("reading config {}: {e}", p.display())))?;
                synth::parse_kv(&text).map_err(|e| usage(e.to_string()))?
            }
            None => BTreeMap::new(),
        };
        Ok(Resolver { file, consumed: BTreeSet::new(), effective: Vec::new() })
    }

    fn read_file_value<T: FromStr>(&mut self, key: &str) -> anyhow::Result<Option<T>> {
        self.consumed.insert(key.to_string());
        match self.file.get(key) {
            Some(v) => v.parse().map(Some).map_err(|_| usage(format!("config {key}: cannot parse {v:?}"))),
            None => Ok(None),
        }
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T> {
        let file = self.read_file_value(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.effective.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> anyhow::Result<Option<T>> {
        let file = self.read_file_value(key)?;
        let v = flag.or(file);
        let shown = v.as_ref().map_or_else(|| "none".to_string(), ToString::to_string);
        self.effective.push((key.to_string(), shown));
        Ok(v)
    }

    fn record(&mut self, key: &str, value: impl Display) {
        self.effective.push((key.to_string(), value.to_string()));
    }

    /// Rejects config-file keys that no resolved setting consumed.
    fn finish(&mut self) -> anyhow::Result<Vec<(String, String)>> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.consumed.contains(*k)).collect();
        if !unknown.is_empty() {
            let keys: Vec<&str> = unknown.iter().map(|k| k.as_str()).collect();
            return Err(usage(format!("unknown config key(s): {}", keys.join(", "))));
        }
        Ok(std::mem::take(&mut self.effective))
    }
}

fn canny_params(res: &mut Resolver, a: &CannyArgs) -> anyhow::Result<CannyParams> {
    let d = CannyParams::default();
    let p = CannyParams {
        gaussian_sigma: res.get("sigma", a.sigma, d.gaussian_sigma)?,
        low_threshold: res.get("low", a.low, d.low_threshold)?,
        high_threshold: res.get("high", a.high, d.high_threshold)?,
    };
    p.validate()?;
    Ok(p)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage error, 2 runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e:#}");
            1
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut res = Resolver::new(cli.global.config.as_deref())?;
    let g = &cli.global;
    let threads = res.get("threads", g.threads, 0usize)?;
    let level = res.get("log_level", g.log_level, LogLevel::Info)?;
    res.record("json", g.json);
    if threads > 0 {
        // a pool may already exist when run in-process more than once
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let out = Out { json: g.json, level };
    match &cli.command {
        Command::Edges(a) => cmd_edges(&mut res, &out, a),
        Command::Guidance(a) => cmd_guidance(&mut res, &out, a),
        Command::Dcl(a) => cmd_dcl(&mut res, &out, a),
        Command::DclGradcheck(a) => cmd_gradcheck(&mut res, &out, g.seed, a),
        Command::Synth(a) => cmd_synth(&mut res, &out, g.seed, a),
        Command::Train(a) => cmd_train(&mut res, &out, g.seed, a),
        Command::Predict(a) => cmd_predict(&mut res, &out, a),
        Command::Eval(a) => cmd_eval(&mut res, &out, a),
    }
}

fn cmd_edges(res: &mut Resolver, out: &Out, a: &EdgesArgs) -> anyhow::Result<()> {
    let params = canny_params(res, &a.canny)?;
    res.record("in", path_str(&a.input));
    res.record("out", path_str(&a.out));
    out.config(&res.finish()?);
    let img = load_image(&a.input)?;
    let edges = canny(&img, &params)?;
    save_mask(&edges, &a.out)?;
    out.report(
        "edges",
        vec![
            ("width", json!(edges.width())),
            ("height", json!(edges.height())),
            ("edge_pixels", json!(edges.count_ones())),
            ("out", json!(path_str(&a.out))),
        ],
    );
    Ok(())
}

fn cmd_guidance(res: &mut Resolver, out: &Out, a: &GuidanceArgs) -> anyhow::Result<()> {
    let cp = canny_params(res, &a.canny)?;
    let defaults = GuidanceParams::default();
    let tau = res.get("tau", a.tau, defaults.tau)?;
    let dir: ShiftDir = res.get("shift_dir", a.shift_dir.clone(), "right".to_string())?.parse()?;
    let max_shift = res.get_opt("max_shift", a.max_shift)?;
    res.record("left", path_str(&a.left));
    res.record("right", path_str(&a.right));
    res.record("out", path_str(&a.out));
    out.config(&res.finish()?);

    let left = load_image(&a.left)?;
    let right = load_image(&a.right)?;
    let max_shift = max_shift.unwrap_or(left.width() / 4);
    let params = GuidanceParams { tau, search_range: Some(ShiftRange::from_direction(dir, max_shift)), ..defaults };
    let (fm, curve) = guidance::guidance_mask(&left, &right, &cp, &params)?;
    save_mask(&fm, &a.out)?;
    if let Some(p) = &a.dump_curve {
        fs::write(p, curve.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.dump_spectrum {
        let cl = canny(&left, &cp)?;
        let cr = canny(&right, &cp)?;
        let ev = guidance::evaluate(&cl, &cr, curve.best_shift, &params)?;
        save_image(&ev.spectrum.to_log_image(), p)?;
    }
    out.report(
        "guidance",
        vec![
            ("best_shift", json!(curve.best_shift)),
            ("max_mas", json!(curve.max_score())),
            ("median_mas", json!(curve.median_score())),
            ("low_confidence", json!(curve.low_confidence)),
            ("shift_min", json!(curve.search_range.min)),
            ("shift_max", json!(curve.search_range.max)),
            ("fm_pixels", json!(fm.count_ones())),
        ],
    );
    if curve.low_confidence {
        out.info("warning", vec![("message", json!("flat MAS curve; the selected shift is unreliable"))]);
    }
    Ok(())
}

fn cmd_dcl(res: &mut Resolver, out: &Out, a: &DclArgs) -> anyhow::Result<()> {
    res.record("mask", path_str(&a.mask));
    out.config(&res.finish()?);
    let img = load_image(&a.mask)?;
    let soft = SoftMask::new(img.width(), img.height(), img.data().iter().map(|&v| v as f64 / 255.0).collect())?;
    let value = dcl::dcl(&soft);
    let map = dcl::connectivity_map(&soft);
    let max_response = map.data.iter().cloned().fold(0.0, f64::max);
    let fields = vec![
        ("dcl", json!(value)),
        ("width", json!(img.width())),
        ("height", json!(img.height())),
        ("max_response", json!(max_response)),
    ];
    if let Some(p) = &a.report {
        let obj: Map<String, Value> = fields.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        fs::write(p, format!("{}\n", Value::Object(obj)))?;
    }
    out.report("dcl", fields);
    Ok(())
}

fn cmd_gradcheck(res: &mut Resolver, out: &Out, seed: Option<u64>, a: &GradcheckArgs) -> anyhow::Result<()> {
    let seed = res.get("seed", seed, 0)?;
    let masks = res.get("masks", a.masks, 20)?;
    let size = res.get("size", a.size, 16)?;
    let eps = res.get("eps", a.eps, 1e-4)?;
    let tol = res.get("tol", a.tol, 1e-5)?;
    let min_pass = res.get("min_pass", a.min_pass, 0.99)?;
    out.config(&res.finish()?);
    let r = dcl::gradcheck(seed, masks, size, eps, tol);
    out.report(
        "dcl_gradcheck",
        vec![
            ("masks", json!(r.masks)),
            ("tested", json!(r.tested)),
            ("passed", json!(r.passed)),
            ("skipped_non_strict", json!(r.skipped_non_strict)),
            ("pass_fraction", json!(r.pass_fraction())),
            ("max_rel_err", json!(r.max_rel_err)),
        ],
    );
    if r.pass_fraction() < min_pass {
        bail!("gradient check passed {:.4} of coordinates, need {min_pass}", r.pass_fraction());
    }
    Ok(())
}

fn synth_effective(c: &SynthConfig) -> Vec<(String, String)> {
    let opt = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "procedural".into(), |p| path_str(p));
    vec![
        ("width", c.width.to_string()),
        ("height", c.height.to_string()),
        ("train", c.train.to_string()),
        ("test", c.test.to_string()),
        ("seed", c.seed.to_string()),
        ("background_dir", opt(&c.background_dir)),
        ("fence_dir", opt(&c.fence_dir)),
        ("fg_shift_min", c.fg_shift_min.to_string()),
        ("fg_shift_max", c.fg_shift_max.to_string()),
        ("rotation_range", c.rotation_range.to_string()),
        ("scale_min", c.scale_min.to_string()),
        ("scale_max", c.scale_max.to_string()),
        ("brightness_range", c.brightness_range.to_string()),
        ("contrast_min", c.contrast_min.to_string()),
        ("contrast_max", c.contrast_max.to_string()),
        ("noise_p_max", c.noise_p_max.to_string()),
        ("cell_min", c.cell_min.to_string()),
        ("cell_max", c.cell_max.to_string()),
        ("wire_min", c.wire_min.to_string()),
        ("wire_max", c.wire_max.to_string()),
        ("fence_rotation_range", c.fence_rotation_range.to_string()),
        ("wobble_max", c.wobble_max.to_string()),
        ("sigma", c.canny.gaussian_sigma.to_string()),
        ("low", c.canny.low_threshold.to_string()),
        ("high", c.canny.high_threshold.to_string()),
        ("tau", c.tau.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn cmd_synth(res: &mut Resolver, out: &Out, seed: Option<u64>, a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = SynthConfig::default();
    let file_keys: BTreeMap<String, String> =
        res.file.iter().filter(|(k, _)| synth::CONFIG_KEYS.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect();
    cfg.apply(&file_keys).map_err(|e| usage(e.to_string()))?;
    res.consumed.extend(file_keys.into_keys());
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = a.train {
        cfg.train = n;
    }
    if let Some(n) = a.test {
        cfg.test = n;
    }
    cfg.validate()?;
    res.effective.extend(synth_effective(&cfg));
    res.record("out", path_str(&a.out));
    out.config(&res.finish()?);
    let manifest = synth::generate_dataset(&cfg, &a.out)?;
    let within_one = manifest
        .records
        .iter()
        .filter(|r| (r.estimated_shift - r.recipe.fg_shift as i64).abs() <= 1)
        .count();
    out.report(
        "synth",
        vec![
            ("records", json!(manifest.records.len())),
            ("train", json!(manifest.count(Split::Train))),
            ("test", json!(manifest.count(Split::Test))),
            ("shift_within_1px", json!(within_one)),
            ("low_confidence", json!(manifest.records.iter().filter(|r| r.low_confidence).count())),
            ("manifest", json!(path_str(&a.out.join(synth::MANIFEST_FILE)))),
        ],
    );
    Ok(())
}

fn cmd_train(res: &mut Resolver, out: &Out, seed: Option<u64>, a: &TrainArgs) -> anyhow::Result<()> {
    let d = TrainConfig::default();
    let checkpoint_dir = a
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| a.out.parent().unwrap_or(Path::new(".")).join("checkpoints"));
    let cfg = TrainConfig {
        seed: res.get("seed", seed, d.seed)?,
        channels: res.get("channels", a.channels, d.channels)?,
        epochs: res.get("epochs", a.epochs, d.epochs)?,
        learning_rate: res.get("lr", a.lr, d.learning_rate)?,
        batch_size: res.get("batch_size", a.batch_size, d.batch_size)?,
        lambda_l1: res.get("lambda_l1", a.lambda_l1, d.lambda_l1)?,
        lambda_dcl: res.get("lambda_dcl", a.lambda_dcl, d.lambda_dcl)?,
        checkpoint_dir: Some(checkpoint_dir.clone()),
        ..d
    };
    cfg.validate()?;
    res.record("manifest", path_str(&a.manifest));
    res.record("out", path_str(&a.out));
    res.record("checkpoint_dir", path_str(&checkpoint_dir));
    out.config(&res.finish()?);
    let manifest = DatasetManifest::load(&a.manifest)?;
    let outcome = segmenter::train(&manifest, &cfg)?;
    for h in &outcome.history {
        out.info(
            "epoch",
            vec![
                ("epoch", json!(h.epoch)),
                ("loss", json!(h.loss.total)),
                ("l1", json!(h.loss.l1)),
                ("dcl", json!(h.loss.dcl)),
                ("val_f_measure", json!(h.val.f_measure)),
            ],
        );
    }
    segmenter::save_model(&outcome.model, &a.out)?;
    let last = outcome.history.last().copied();
    out.report(
        "train",
        vec![
            ("epochs", json!(outcome.history.len())),
            ("batch_size", json!(outcome.batch_size)),
            ("final_loss", json!(last.map(|h| h.loss.total))),
            ("val_precision", json!(last.map(|h| h.val.precision))),
            ("val_recall", json!(last.map(|h| h.val.recall))),
            ("val_f_measure", json!(last.map(|h| h.val.f_measure))),
            ("model", json!(path_str(&a.out))),
        ],
    );
    Ok(())
}

fn cmd_predict(res: &mut Resolver, out: &Out, a: &PredictArgs) -> anyhow::Result<()> {
    let threshold = res.get("threshold", a.threshold, 0.5)?;
    res.record("model", path_str(&a.model));
    let model = segmenter::load_model(&a.model)?;
    if let Some(image) = &a.image {
        let target = a.out.as_ref().ok_or_else(|| anyhow!("--out is required with --image"))?;
        res.record("image", path_str(image));
        res.record("out", path_str(target));
        out.config(&res.finish()?);
        let img = load_image(image)?;
        let fm = a.fm.as_ref().map(load_mask).transpose()?;
        let mask = segmenter::predict(&model, &img, fm.as_ref(), threshold)?;
        save_mask(&mask, target)?;
        out.report("predict", vec![("fence_pixels", json!(mask.count_ones())), ("out", json!(path_str(target)))]);
        return Ok(());
    }
    let manifest_path = a.manifest.as_ref().ok_or_else(|| anyhow!("give either --image or --manifest"))?;
    let out_dir = a.out_dir.as_ref().expect("clap enforces --out-dir");
    let split = match res.get("split", a.split.clone(), "test".to_string())?.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => bail!("--split must be train or test, got {other:?}"),
    };
    res.record("manifest", path_str(manifest_path));
    res.record("out_dir", path_str(out_dir));
    out.config(&res.finish()?);
    let manifest = DatasetManifest::load(manifest_path)?;
    fs::create_dir_all(out_dir)?;
    let mut written = 0;
    for rec in manifest.split(split) {
        let ex = segmenter::load_example(&manifest, rec, model.c_in())?;
        let mask = segmenter::predict_planes(&model, &ex.input, threshold)?;
        let name = Path::new(&rec.gt_mask_path).file_name().ok_or_else(|| anyhow!("bad path {}", rec.gt_mask_path))?;
        save_mask(&mask, out_dir.join(name))?;
        written += 1;
    }
    out.report("predict", vec![("masks", json!(written)), ("out_dir", json!(path_str(out_dir)))]);
    Ok(())
}

fn mask_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "pgm")))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_eval(res: &mut Resolver, out: &Out, a: &EvalArgs) -> anyhow::Result<()> {
    let threshold = res.get("threshold", a.threshold, 127u8)?;
    let tolerance = res.get("tolerance", a.tolerance, 0usize)?;
    let folds = res.get_opt("folds", a.folds)?;
    res.record("pred_dir", path_str(&a.pred_dir));
    res.record("gt_dir", path_str(&a.gt_dir));
    res.record("report", path_str(&a.report));
    out.config(&res.finish()?);

    let preds = mask_files(&a.pred_dir)?;
    if preds.is_empty() {
        bail!("no .png/.pgm predictions in {}", a.pred_dir.display());
    }
    let mut names = Vec::with_capacity(preds.len());
    let mut per_image = Vec::with_capacity(preds.len());
    for p in &preds {
        let name = p.file_name().expect("listed files have names");
        let gt_path = a.gt_dir.join(name);
        let gt = load_mask(&gt_path)?;
        let pred = binarize(&load_image(p)?, threshold);
        let counts = eval::confusion_with_tolerance(&pred, &gt, tolerance)?;
        names.push(name.to_string_lossy().into_owned());
        per_image.push(eval::prf(&counts));
    }
    let mut summary = eval::aggregate(&per_image)?;
    if let Some(k) = folds {
        let f = eval::aggregate_folds(&per_image, k)?;
        summary.precision = f.precision;
        summary.recall = f.recall;
        summary.f_measure = f.f_measure;
    }
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.report, eval::report_csv(&names, &summary))?;
    out.report(
        "eval",
        vec![
            ("images", json!(per_image.len())),
            ("precision", json!(summary.precision.mean)),
            ("precision_std", json!(summary.precision.std)),
            ("recall", json!(summary.recall.mean)),
            ("recall_std", json!(summary.recall.std)),
            ("f_measure", json!(summary.f_measure.mean)),
            ("f_measure_std", json!(summary.f_measure.std)),
            ("degenerate", json!(per_image.iter().filter(|m| m.degenerate).count())),
            ("report", json!(path_str(&a.report))),
        ],
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolver_precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        fs::write(&p, "tau = 50\nlow = 10\n").unwrap();
        let mut r = Resolver::new(Some(&p)).unwrap();
        assert_eq!(r.get("tau", Some(70.0), 100.0).unwrap(), 70.0);
        assert_eq!(r.get("low", None, 30.0).unwrap(), 10.0);
        assert_eq!(r.get("high", None, 90.0).unwrap(), 90.0);
        assert!(r.finish().is_ok());

        fs::write(&p, "bogus = 1\n").unwrap();
        let mut r = Resolver::new(Some(&p)).unwrap();
        r.get("tau", None, 1.0).unwrap();
        assert!(r.finish().is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["fenceguide", "bogus"]), 1);
        assert_eq!(run(["fenceguide", "--help"]), 0);
        assert_eq!(run(["fenceguide", "guidance"]), 1);
    }
}
