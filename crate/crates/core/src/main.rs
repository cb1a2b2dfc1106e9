use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use gns::geometry::{preprocess_drawing, GeometryError};
use gns::harness::{
    grid_image, ingest_drawings, load_checkpoint, overlay_strokes, read_image, save_checkpoint, stream,
    synthesize_toy_corpus, write_image, write_png, export_drawings, HarnessError, Model, RunConfig, SCHEMA,
};
use gns::inference::{build_posterior, InferenceError};
use gns::render::BinaryImage;
use gns::tasks::{
    generate_concepts, generate_exemplars, marginal_log_lik, tempered_weights, ClassificationEpisode, Scorer, TaskError,
};
use gns::token::TokenError;
use gns::type_prior::{train_mle, CharacterType, TypeError, TypePrior};

#[derive(Parser)]
#[command(name = "gns", version, about = "Stroke-based glyph concept learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if needed.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural toy corpus as NDJSON drawings.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        /// Also write each drawing's image as PGM.
        #[arg(long)]
        images: bool,
    },
    /// Fit the type prior to drawings by maximum likelihood.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Held-out drawings scored after every epoch.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sample new concepts from the type prior.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Infer the parses of one image.
    Parse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// One-shot classification of an episode file.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON `{"train": [paths], "test": [paths], "test_labels": [..]}`;
        /// paths are relative to the episode file.
        #[arg(long)]
        episode: PathBuf,
    },
    /// New exemplars of the concept shown in one image.
    Exemplars {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 9)]
        n: usize,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Marginal log-likelihood lower bounds for a set of images.
    Loglik {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// A directory of PGM/PNG files or a text file listing them.
        #[arg(long)]
        images: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TypeError> for Failure {
    fn from(e: TypeError) -> Self {
        match e {
            TypeError::Config(_) => Failure::Usage(e.to_string()),
            TypeError::NonFinite { .. } | TypeError::Autodiff(_) | TypeError::Mdn(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Config(_) => Failure::Usage(e.to_string()),
            InferenceError::Type(t) => t.into(),
            InferenceError::Token(TokenError::InvalidNoise(_)) => Failure::Usage(e.to_string()),
            InferenceError::Token(_) | InferenceError::Autodiff(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TaskError> for Failure {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Inference(i) => i.into(),
            TaskError::Type(t) => t.into(),
            TaskError::NoTerms => Failure::Numeric(e.to_string()),
            TaskError::Invalid(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Res<T> = Result<T, Failure>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Res<T> {
    r.map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn setup(common: &Common) -> Res<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json(&io(p, fs::read_to_string(p))?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    io(&common.out, fs::create_dir_all(&common.out))?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &Value) -> Res<()> {
    let mut text = serde_json::to_string_pretty(v).expect("JSON values serialize");
    text.push('\n');
    io(path, fs::write(path, text))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Res<Model> {
    Ok(load_checkpoint(path, Some(&cfg.arch))?)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn types_of(path: &Path, cfg: &RunConfig) -> Res<(Vec<CharacterType>, usize)> {
    let ingest = ingest_drawings(path, cfg.arch.canvas, false)?;
    for (line, why) in &ingest.skipped {
        eprintln!("{}:{line}: skipped: {why}", path.display());
    }
    let mut out = Vec::new();
    let mut dropped = ingest.skipped.len();
    for r in &ingest.records {
        let fitted = preprocess_drawing(&r.raw_strokes(), &cfg.preprocess)
            .map_err(TypeError::from)
            .and_then(|s| CharacterType::from_splines(&s))
            .and_then(|t| t.validate_for(&cfg.prior).map(|_| t));
        match fitted {
            Ok(t) => out.push(t),
            Err(TypeError::Geometry(GeometryError::AllStrokesFiltered)) | Err(TypeError::Invalid(_)) => {
                eprintln!("{}: drawing {} skipped", path.display(), r.id);
                dropped += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if out.is_empty() {
        return Err(Failure::Data(format!("{}: no usable drawings", path.display())));
    }
    Ok((out, dropped))
}

fn synth(common: Common, classes: usize, per_class: usize, images: bool) -> Res<()> {
    let cfg = setup(&common)?;
    let corpus = synthesize_toy_corpus(classes, per_class, cfg.seed)?;
    let out = &common.out;
    let path = out.join("drawings.ndjson");
    io(&path, fs::write(&path, export_drawings(&corpus.records())))?;
    let programs: Vec<Value> =
        corpus.programs.iter().enumerate().map(|(c, t)| json!({"class": c, "kappa": t.kappa(), "type": t})).collect();
    write_json(&out.join("programs.json"), &json!({"schema": SCHEMA, "seed": cfg.seed, "programs": programs}))?;
    if images {
        let dir = out.join("images");
        io(&dir, fs::create_dir_all(&dir))?;
        for d in &corpus.drawings {
            write_image(&dir.join(format!("{}.pgm", d.record.id)), &d.image)?;
        }
    }
    println!("{} drawings of {classes} classes written to {}", corpus.drawings.len(), path.display());
    Ok(())
}

fn train(common: Common, data: PathBuf, heldout: Option<PathBuf>, epochs: Option<usize>) -> Res<()> {
    let cfg = setup(&common)?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    if let Some(e) = epochs {
        if e == 0 {
            return Err(Failure::Usage("--epochs must be positive".into()));
        }
        tc.epochs = e;
    }
    let (train_types, dropped) = types_of(&data, &cfg)?;
    let (held_types, held_dropped) = match &heldout {
        Some(p) => types_of(p, &cfg)?,
        None => (Vec::new(), 0),
    };
    let mut prior = TypePrior::init(&cfg.arch, cfg.prior, &mut stream(cfg.seed, "train/init"))?;
    let report = train_mle(&mut prior, &train_types, &held_types, &tc, |s| {
        eprintln!("epoch {:>3}  train NLL {:.4}{}", s.epoch, s.train_nll, s.heldout_nll.map_or(String::new(), |h| format!("  held-out NLL {h:.4}")));
    })?;
    let out = &common.out;
    save_checkpoint(&Model { prior, noise: cfg.noise.clone() }, &out.join("model.ckpt"))?;
    let mut csv = String::from("epoch,train_nll,heldout_nll\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    writeln!(csv, "0,{},{}", report.initial_train_nll, cell(report.initial_heldout_nll)).expect("string write");
    for s in &report.epochs {
        writeln!(csv, "{},{},{}", s.epoch, s.train_nll, cell(s.heldout_nll)).expect("string write");
    }
    let p = out.join("nll.csv");
    io(&p, fs::write(&p, csv))?;
    write_json(
        &out.join("train.json"),
        &json!({
            "schema": SCHEMA,
            "seed": cfg.seed,
            "train_types": train_types.len(),
            "heldout_types": held_types.len(),
            "skipped": dropped + held_dropped,
            "report": report,
        }),
    )?;
    println!("checkpoint written to {}", out.join("model.ckpt").display());
    Ok(())
}

fn sample(common: Common, ckpt: PathBuf, n: usize, temperature: Option<f64>) -> Res<()> {
    let cfg = setup(&common)?;
    let model = load_model(&ckpt, &cfg)?;
    let t = temperature.unwrap_or(cfg.tasks.concept_temperature);
    if !(t > 0.0 && t.is_finite()) || n == 0 {
        return Err(Failure::Usage("--n and --temperature must be positive".into()));
    }
    let concepts = generate_concepts(&model.prior, n, t, &mut stream(cfg.seed, "sample"))?;
    let images: Vec<BinaryImage> = concepts.iter().map(|c| c.1.clone()).collect();
    let cols = (n as f64).sqrt().ceil() as usize;
    write_png(&common.out.join("concepts.png"), &grid_image(&images, cols, &[]))?;
    let list: Vec<Value> = concepts
        .iter()
        .map(|(ty, img)| json!({"kappa": ty.kappa(), "ink_fraction": img.ink_fraction(), "type": ty}))
        .collect();
    write_json(&common.out.join("types.json"), &json!({"schema": SCHEMA, "seed": cfg.seed, "temperature": t, "concepts": list}))?;
    println!("{n} concepts written to {}", common.out.display());
    Ok(())
}

fn parse(common: Common, ckpt: PathBuf, image: PathBuf) -> Res<()> {
    let cfg = setup(&common)?;
    let model = load_model(&ckpt, &cfg)?;
    let img = read_image(&image, cfg.arch.canvas)?;
    let post = build_posterior(&img, &model.prior, &model.noise, &cfg.inference, &mut stream(cfg.seed, "parse"))?;
    let map = post.map();
    write_png(&common.out.join("overlay.png"), &overlay_strokes(&img, &map.token.splines()))?;
    write_json(
        &common.out.join("parse.json"),
        &json!({
            "schema": SCHEMA,
            "seed": cfg.seed,
            "image": file_name(&image),
            "proposals": post.proposals,
            "log_evidence": post.log_evidence(),
            "map": map,
            "parses": post.parses,
        }),
    )?;
    println!("MAP parse: {} strokes, weight {:.4}, {} parses", map.ty.kappa(), map.weight, post.parses.len());
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeFile {
    train: Vec<PathBuf>,
    test: Vec<PathBuf>,
    #[serde(default)]
    test_labels: Vec<usize>,
}

fn classify(common: Common, ckpt: PathBuf, episode: PathBuf) -> Res<()> {
    let cfg = setup(&common)?;
    let model = load_model(&ckpt, &cfg)?;
    let text = io(&episode, fs::read_to_string(&episode))?;
    let file: EpisodeFile =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", episode.display())))?;
    let base = episode.parent().unwrap_or(Path::new("."));
    let load = |ps: &[PathBuf]| ps.iter().map(|p| read_image(&base.join(p), cfg.arch.canvas)).collect::<Result<Vec<_>, _>>();
    let ep = ClassificationEpisode { train: load(&file.train)?, test: load(&file.test)?, test_labels: file.test_labels };
    let mut scorer = Scorer::new(&model.prior, &model.noise, cfg.inference.clone(), cfg.seed);
    let r = scorer.classify(&ep)?;
    let mut csv = String::from("test,class,forward,reverse,train_evidence,two_way\n");
    for (i, row) in r.two_way.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            writeln!(csv, "{i},{c},{},{},{},{v}", r.forward[i][c], r.reverse[i][c], r.train_evidence[c]).expect("string write");
        }
    }
    let p = common.out.join("scores.csv");
    io(&p, fs::write(&p, csv))?;
    write_json(
        &common.out.join("predictions.json"),
        &json!({
            "schema": SCHEMA,
            "seed": cfg.seed,
            "train": file.train,
            "test": file.test,
            "predictions": r.predictions,
            "test_labels": ep.test_labels,
            "accuracy": r.accuracy,
            "two_way": r.two_way,
        }),
    )?;
    match r.accuracy {
        Some(a) => println!("accuracy: {a:.4}"),
        None => println!("predictions: {:?}", r.predictions),
    }
    Ok(())
}

fn exemplars(common: Common, ckpt: PathBuf, image: PathBuf, n: usize, temperature: Option<f64>) -> Res<()> {
    let cfg = setup(&common)?;
    let model = load_model(&ckpt, &cfg)?;
    let t = temperature.unwrap_or(cfg.tasks.exemplar_temperature);
    if n == 0 {
        return Err(Failure::Usage("--n must be positive".into()));
    }
    let img = read_image(&image, cfg.arch.canvas)?;
    let post = build_posterior(&img, &model.prior, &model.noise, &cfg.inference, &mut stream(cfg.seed, "exemplars/parse"))?;
    let ex = generate_exemplars(&post, n, t, &model.noise, &mut stream(cfg.seed, "exemplars"))?;
    let weights = tempered_weights(&post.parses.iter().map(|p| p.log_weight).collect::<Vec<_>>(), t)?;
    // The source image leads its row, framed, with the exemplars after it.
    let mut cells = vec![img.clone()];
    cells.extend(ex.iter().map(|e| e.image.clone()));
    let cols = ((n + 1) as f64).sqrt().ceil() as usize;
    write_png(&common.out.join("exemplars.png"), &grid_image(&cells, cols, &[0]))?;
    let list: Vec<Value> = ex.iter().map(|e| json!({"parse": e.parse, "ink_fraction": e.image.ink_fraction(), "token": e.token})).collect();
    write_json(
        &common.out.join("exemplars.json"),
        &json!({"schema": SCHEMA, "seed": cfg.seed, "image": file_name(&image), "temperature": t, "tempered_weights": weights, "exemplars": list}),
    )?;
    println!("{n} exemplars written to {}", common.out.display());
    Ok(())
}

fn image_list(path: &Path) -> Res<Vec<PathBuf>> {
    let meta = io(path, fs::metadata(path))?;
    let mut files: Vec<PathBuf> = if meta.is_dir() {
        io(path, fs::read_dir(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm") || x.eq_ignore_ascii_case("png")))
            .collect()
    } else {
        let base = path.parent().unwrap_or(Path::new("."));
        io(path, fs::read_to_string(path))?.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| base.join(l)).collect()
    };
    if meta.is_dir() {
        files.sort();
    }
    if files.is_empty() {
        return Err(Failure::Data(format!("{}: no images", path.display())));
    }
    Ok(files)
}

/// Full-scale reference values for the same report columns.
const REFERENCE_LL: f64 = -383.2;

fn loglik(common: Common, ckpt: PathBuf, images: PathBuf) -> Res<()> {
    let cfg = setup(&common)?;
    let model = load_model(&ckpt, &cfg)?;
    let files = image_list(&images)?;
    let mut csv = String::from("image,log_lik,ll_per_dim,terms\n");
    let mut rows = Vec::new();
    let (mut sum, mut sum_dim) = (0.0, 0.0);
    for f in &files {
        let img = read_image(f, cfg.arch.canvas)?;
        let name = file_name(f);
        let post = build_posterior(&img, &model.prior, &model.noise, &cfg.inference, &mut stream(cfg.seed, &format!("loglik/{name}")))?;
        let m = marginal_log_lik(&post, &model.prior, &model.noise, &img)?;
        writeln!(csv, "{name},{},{},{}", m.log_lower_bound, m.ll_per_dim, m.terms.len()).expect("string write");
        sum += m.log_lower_bound;
        sum_dim += m.ll_per_dim;
        rows.push(json!({"image": name, "log_lik": m.log_lower_bound, "ll_per_dim": m.ll_per_dim, "terms": m.terms, "dropped": m.dropped}));
    }
    let n = files.len() as f64;
    let p = common.out.join("loglik.csv");
    io(&p, fs::write(&p, csv))?;
    let pixels = cfg.arch.canvas.pixels() as f64;
    write_json(
        &common.out.join("loglik.json"),
        &json!({
            "schema": SCHEMA,
            "seed": cfg.seed,
            "images": rows,
            "mean_log_lik": sum / n,
            "mean_ll_per_dim": sum_dim / n,
            "reference": {"log_lik": REFERENCE_LL, "ll_per_dim": REFERENCE_LL / 11025.0, "pixels": pixels},
        }),
    )?;
    println!("mean LL {:.3}  mean LL/dim {:.5}  over {} images", sum / n, sum_dim / n, files.len());
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::Synth { common, classes, per_class, images } => synth(common, classes, per_class, images),
        Command::Train { common, data, heldout, epochs } => train(common, data, heldout, epochs),
        Command::Sample { common, ckpt, n, temperature } => sample(common, ckpt, n, temperature),
        Command::Parse { common, ckpt, image } => parse(common, ckpt, image),
        Command::Classify { common, ckpt, episode } => classify(common, ckpt, episode),
        Command::Exemplars { common, ckpt, image, n, temperature } => exemplars(common, ckpt, image, n, temperature),
        Command::Loglik { common, ckpt, images } => loglik(common, ckpt, images),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
