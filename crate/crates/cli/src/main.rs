use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use sitedge::descriptor::{DenseSiftConfig, DescriptorConfig, DescriptorTable, GlobalDescriptor, GlobalFeatures};
use sitedge::eval::{EvalConfig, MatchMethod};
use sitedge::forest::{ForestConfig, TreeConfig};
use sitedge::fusion::GateMode;
use sitedge::gating::{GateConfig, Selection};
use sitedge::persist::{atomic_write, ContainerReader, ModelContainer, ModelMeta};
use sitedge::pipeline::{
    build_partition, describe_all, evaluate_indices, fit_encoder, fit_gate, semantic_eval, train_situation_forests,
    Corpus, EvalReport, PartitionSpec, StageSeeds,
};
use sitedge::raster::{load_manifest, BoundaryMap, DatasetManifest, Image, Split};
use sitedge::synth::{generate, SynthSpec};

const DEFAULT_SEED: u64 = 7;
const THREADS_ENV: &str = "SOBD_THREADS";
const SCRATCH_ENV: &str = "SOBD_SCRATCH";

/// Boundary detection with situation-specific edge forests.
#[derive(Parser, Debug)]
#[command(name = "sitedge", version)]
struct Cli {
    /// Master seed; every stochastic stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: $SOBD_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus.
    Synth(SynthArgs),
    /// Fit the descriptor encoder (PCA + GMM) and describe every image.
    Features(FeaturesArgs),
    /// Group the training split into situations.
    Cluster(ClusterArgs),
    /// Train the situation classifier.
    TrainGate(TrainGateArgs),
    /// Train one edge forest per situation.
    TrainForests(TrainForestsArgs),
    /// Write fused boundary maps for images.
    Predict(PredictArgs),
    /// Precision/recall evaluation of predicted maps.
    Evaluate(EvaluateArgs),
    /// Per-class semantic contour evaluation of a class model.
    SbdEval(SbdEvalArgs),
    /// Describe a model container.
    Info(InfoArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON corpus specification; defaults to the built-in four classes.
    #[arg(long, alias = "spec")]
    config: Option<PathBuf>,
    #[arg(long)]
    images_per_class: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Noise standard deviation as a fraction of full scale.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct ManifestArg {
    /// Dataset manifest (TSV).
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
struct DescriptorsArg {
    /// Descriptor cache (default: $SOBD_SCRATCH/descriptors.sed when set).
    #[arg(long)]
    descriptors: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    #[command(flatten)]
    descriptors: DescriptorsArg,
    /// Output model container.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// GMM components.
    #[arg(long, default_value_t = 64)]
    components: usize,
    #[arg(long, default_value_t = 84)]
    pca_dim: usize,
    #[arg(long, default_value_t = 200_000)]
    max_samples: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Monolithic,
    Class,
    Subclass,
    Agnostic,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    #[command(flatten)]
    descriptors: DescriptorsArg,
    /// Container holding the encoder (needed for subclass and agnostic).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Clusters over the whole training split (agnostic).
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Clusters within each class (subclass).
    #[arg(long, default_value_t = 2)]
    per_class: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the partition as text.
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainGateArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    #[command(flatten)]
    descriptors: DescriptorsArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = GateConfig::default().lambdas)]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = GateConfig::default().pos_freqs)]
    pos_freqs: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    /// Fraction of the training split held out to fit the temperature.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// Fixed softmax temperature instead of fitting one.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainForestsArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    /// Container holding the situation partition.
    #[arg(long, alias = "partition")]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training patches per tree.
    #[arg(long, default_value_t = 25_000)]
    budget: usize,
    #[arg(long, default_value_t = 8)]
    trees: usize,
    #[arg(long, default_value_t = 2)]
    stride: usize,
    #[arg(long, default_value_t = 2)]
    shrink: usize,
    #[arg(long, default_value_t = 64)]
    max_depth: usize,
    #[arg(long, default_value_t = 8)]
    min_leaf: usize,
    /// Candidate features per node (0 = square root of the feature count).
    #[arg(long, default_value_t = 0)]
    features_per_node: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn indices(self, m: &DatasetManifest) -> Vec<usize> {
        match self {
            SplitArg::Train => m.indices(Split::Train),
            SplitArg::Test => m.indices(Split::Test),
            SplitArg::All => (0..m.len()).collect(),
        }
    }
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Predict the entries of this manifest.
    #[arg(long, conflicts_with = "image")]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Predict these images instead of a manifest.
    #[arg(long, num_args = 1..)]
    image: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Fuse the n most probable situations.
    #[arg(long, alias = "n", conflicts_with = "mass")]
    top_n: Option<usize>,
    /// Fuse the most probable situations until this much probability is covered.
    #[arg(long)]
    mass: Option<f64>,
    /// `oracle` spreads probability over the situations of each image's true
    /// classes (needs --manifest).
    #[arg(long, value_enum, default_value = "learned")]
    gate: GateArg,
    /// Shorthand for `--gate oracle`.
    #[arg(long, requires = "manifest")]
    oracle: bool,
    /// Refuse to run unless the model's partition is of this kind.
    #[arg(long, value_enum)]
    mode: Option<KindArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GateArg {
    Learned,
    Oracle,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Auto,
    Exact,
    Greedy,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Number of evenly spaced thresholds.
    #[arg(long, default_value_t = 25)]
    thresholds: usize,
    /// Matching tolerance as a fraction of the image diagonal.
    #[arg(long, default_value_t = 0.0075)]
    tol_frac: f64,
    #[arg(long, value_enum, default_value = "auto")]
    method: MethodArg,
}

impl EvalArgs {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            thresholds: sitedge::eval::default_thresholds(self.thresholds),
            tol_frac: self.tol_frac,
            method: match self.method {
                MethodArg::Auto => MatchMethod::Auto,
                MethodArg::Exact => MatchMethod::Exact,
                MethodArg::Greedy => MatchMethod::Greedy,
            },
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    /// Directory of predicted maps named after each image.
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args, Debug)]
struct SbdEvalArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args, Debug)]
struct InfoArgs {
    model: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a number"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Features(a) => features(a, seed),
        Command::Cluster(a) => cluster(a, seed),
        Command::TrainGate(a) => train_gate(a, seed),
        Command::TrainForests(a) => train_forests(a, seed),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SbdEval(a) => sbd(a),
        Command::Info(a) => info_cmd(a),
    }
}

fn synth(a: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => SynthSpec::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = a.images_per_class {
        spec.images_per_class = n;
    }
    if let Some(w) = a.width {
        spec.width = w;
    }
    if let Some(h) = a.height {
        spec.height = h;
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    let m = generate(&spec, &a.out)?;
    println!("{} images written to {}", m.len(), a.out.display());
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let m = load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    Ok(Corpus::load(m)?)
}

fn descriptor_cache(arg: &DescriptorsArg) -> Option<PathBuf> {
    arg.descriptors
        .clone()
        .or_else(|| std::env::var_os(SCRATCH_ENV).map(|d| PathBuf::from(d).join("descriptors.sed")))
}

fn entry_key(m: &DatasetManifest, i: usize) -> String {
    m.entries[i].image_path.display().to_string()
}

/// Cached descriptors when present and matching the manifest, else computed by `encoder`.
fn descriptors_for(
    corpus: &Corpus,
    cache: Option<&Path>,
    encoder: Option<&dyn GlobalFeatures>,
) -> Result<Vec<GlobalDescriptor>> {
    if let Some(p) = cache.filter(|p| p.is_file()) {
        let t = DescriptorTable::load(p)?;
        return (0..corpus.len())
            .map(|i| {
                let key = entry_key(&corpus.manifest, i);
                t.get(&key)
                    .cloned()
                    .with_context(|| format!("descriptor cache {} has no entry for {key}", p.display()))
            })
            .collect();
    }
    let enc = encoder.context("no descriptor cache and no encoder in the model container")?;
    info!("computing descriptors for {} images", corpus.len());
    Ok(describe_all(enc, &corpus.images)?)
}

fn features(a: FeaturesArgs, seed: u64) -> Result<()> {
    let corpus = load_corpus(&a.manifest.manifest)?;
    let cfg = DescriptorConfig {
        sift: DenseSiftConfig {
            stride: a.stride,
            patch: a.patch,
            ..DenseSiftConfig::default()
        },
        pca_dim: a.pca_dim,
        components: a.components,
        max_samples: a.max_samples,
        ..DescriptorConfig::default()
    };
    let s = StageSeeds::from_master(seed).features;
    let enc = fit_encoder(&corpus, &cfg, s)?;
    if let Some(p) = descriptor_cache(&a.descriptors) {
        let d = describe_all(&enc, &corpus.images)?;
        let mut t = DescriptorTable::default();
        for (i, x) in d.into_iter().enumerate() {
            t.push(entry_key(&corpus.manifest, i), x)?;
        }
        atomic_write(&p, &t.to_bytes())?;
        info!("descriptors written to {}", p.display());
    }
    let mut meta = ModelMeta {
        descriptor: Some(cfg),
        ..ModelMeta::default()
    };
    meta.seeds.insert("features".into(), s);
    let mut c = ModelContainer::new(meta);
    c.encoder = Some(enc);
    c.save(&a.out)?;
    println!("encoder: {} dimensions -> {}", c.encoder.as_ref().map_or(0, |e| e.dim()), a.out.display());
    Ok(())
}

fn cluster(a: ClusterArgs, seed: u64) -> Result<()> {
    let corpus = load_corpus(&a.manifest.manifest)?;
    let mut c = match &a.model {
        Some(p) => ModelContainer::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ModelContainer::new(ModelMeta::default()),
    };
    let spec = match a.kind {
        KindArg::Monolithic => PartitionSpec::Monolithic,
        KindArg::Class => PartitionSpec::Class,
        KindArg::Subclass => PartitionSpec::Subclass {
            per_class: a.per_class,
        },
        KindArg::Agnostic => PartitionSpec::Agnostic { k: a.k },
    };
    let descriptors = if spec.needs_descriptors() {
        let enc = c.encoder.as_ref().map(|e| e as &dyn GlobalFeatures);
        Some(descriptors_for(&corpus, descriptor_cache(&a.descriptors).as_deref(), enc)?)
    } else {
        None
    };
    let s = StageSeeds::from_master(seed).cluster;
    let part = build_partition(&corpus.manifest, spec, descriptors.as_deref(), s)?;
    if let Some(t) = &a.text {
        atomic_write(t, part.to_text().as_bytes())?;
    }
    println!("{} {} situation(s)", part.k(), part.kind);
    for st in &part.situations {
        println!("  {}\t{}\t{} images", st.id, st.class_id.map_or("-".into(), |c| c.to_string()), st.members.len());
    }
    c.meta.seeds.insert("cluster".into(), s);
    c.meta.params.insert("partition".into(), serde_json::to_value(spec)?);
    c.partition = Some(part);
    c.gate = None;
    c.forests.clear();
    c.save(&a.out)?;
    Ok(())
}

fn train_gate(a: TrainGateArgs, seed: u64) -> Result<()> {
    let mut c = ModelContainer::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let part = c.partition.clone().context("the model container has no situation partition")?;
    let s = StageSeeds::from_master(seed).gate;
    let cfg = GateConfig {
        lambdas: a.lambdas,
        pos_freqs: a.pos_freqs,
        epochs: a.epochs,
        folds: a.folds,
        holdout: a.holdout,
        temperature: a.temperature,
        seed: s,
    };
    let descriptors = if part.k() > 1 {
        let corpus = load_corpus(&a.manifest.manifest)?;
        let enc = c.encoder.as_ref().map(|e| e as &dyn GlobalFeatures);
        Some(descriptors_for(&corpus, descriptor_cache(&a.descriptors).as_deref(), enc)?)
    } else {
        None
    };
    let gate = fit_gate(&part, descriptors.as_deref(), &cfg)?;
    println!("gate: {} situations, temperature {:.4}", gate.k(), gate.temperature);
    for (j, h) in gate.hyper.iter().enumerate() {
        println!("  {j}\tlambda {:e}\tpos_freq {}\tcv AP {:.4}", h.lambda, h.pos_freq, h.cv_ap);
    }
    c.meta.seeds.insert("gate".into(), s);
    c.meta.params.insert("gate".into(), serde_json::to_value(&cfg)?);
    c.gate = Some(gate);
    c.save(&a.out)?;
    Ok(())
}

fn train_forests(a: TrainForestsArgs, seed: u64) -> Result<()> {
    let mut c = ModelContainer::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let part = c.partition.clone().context("the model container has no situation partition")?;
    let corpus = load_corpus(&a.manifest.manifest)?;
    let s = StageSeeds::from_master(seed).forests;
    let cfg = ForestConfig {
        trees: a.trees,
        tree: TreeConfig {
            max_depth: a.max_depth,
            min_leaf: a.min_leaf,
            features_per_node: a.features_per_node,
        },
        budget: a.budget,
        stride: a.stride,
        shrink: a.shrink,
        seed: s,
    };
    c.forests = train_situation_forests(&corpus, &part, &cfg)?;
    for (j, f) in c.forests.iter().enumerate() {
        let nodes: usize = f.trees.iter().map(|t| t.nodes.len()).sum();
        let depth = f.trees.iter().map(|t| t.depth()).max().unwrap_or(0);
        println!("  forest {j}: {} trees, {nodes} nodes, depth {depth}", f.trees.len());
    }
    c.meta.seeds.insert("forests".into(), s);
    c.meta.params.insert("forest".into(), serde_json::to_value(&cfg)?);
    c.save(&a.out)?;
    Ok(())
}

fn output_name(path: &Path) -> Result<String> {
    let stem = path
        .file_stem()
        .with_context(|| format!("{} has no file name", path.display()))?;
    Ok(format!("{}.png", stem.to_string_lossy()))
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = ModelContainer::load(&a.model)
        .with_context(|| format!("loading {}", a.model.display()))?
        .into_model()?;
    if let Some(mode) = a.mode {
        let want = format!("{mode:?}").to_lowercase();
        if model.partition.kind.to_string() != want {
            bail!("--mode {want} given but {} holds a {} model", a.model.display(), model.partition.kind);
        }
    }
    let oracle = a.oracle || a.gate == GateArg::Oracle;
    if oracle && a.manifest.is_none() {
        bail!("the oracle gate needs --manifest for the true classes");
    }
    let sel = match (a.top_n, a.mass) {
        (Some(n), _) => Selection::Fixed(n),
        (None, Some(m)) => Selection::Mass(m),
        (None, None) => Selection::Fixed(model.k()),
    };
    let (paths, classes): (Vec<PathBuf>, Vec<Option<_>>) = match &a.manifest {
        Some(p) => {
            let m = load_manifest(p)?;
            a.split
                .indices(&m)
                .into_iter()
                .map(|i| (m.image_path(i), Some(m.entries[i].class_labels.clone())))
                .unzip()
        }
        None if a.image.is_empty() => bail!("give --manifest or at least one --image"),
        None => a.image.iter().map(|p| (p.clone(), None)).unzip(),
    };
    let mut names = BTreeMap::new();
    for p in &paths {
        if let Some(prev) = names.insert(output_name(p)?, p) {
            bail!("{} and {} would write the same output file", prev.display(), p.display());
        }
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let records = paths
        .par_iter()
        .zip(&classes)
        .map(|(p, cls)| -> Result<String> {
            let img = Image::load_png(p)?;
            let gate = match (oracle, cls) {
                (true, Some(c)) => GateMode::Oracle(c),
                _ => GateMode::Learned,
            };
            let out = model.predict(&img, sel, gate)?;
            let name = output_name(p)?;
            out.map.save_png(a.out_dir.join(&name))?;
            Ok(serde_json::json!({
                "image": p.display().to_string(),
                "output": name,
                "probabilities": out.probabilities,
                "selected": out.selected,
                "z": out.z,
            })
            .to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    let log = a.out_dir.join("predictions.jsonl");
    let mut text = records.join("\n");
    text.push('\n');
    atomic_write(&log, text.as_bytes())?;
    println!("{} maps written to {}", records.len(), a.out_dir.display());
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let corpus = load_corpus(&a.manifest.manifest)?;
    let idx = a.split.indices(&corpus.manifest);
    let preds = idx
        .par_iter()
        .map(|&i| {
            let p = a.pred_dir.join(output_name(&corpus.manifest.image_path(i))?);
            BoundaryMap::load_png(&p).with_context(|| format!("loading prediction {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let e = evaluate_indices(&preds, &corpus, &idx, &a.eval.config())?;
    let report = EvalReport::from(&e);
    print!("{}", report.table());
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn sbd(a: SbdEvalArgs) -> Result<()> {
    let model = ModelContainer::load(&a.model)
        .with_context(|| format!("loading {}", a.model.display()))?
        .into_model()?;
    let corpus = load_corpus(&a.manifest.manifest)?;
    let idx = a.split.indices(&corpus.manifest);
    let r = semantic_eval(&model, &corpus, &idx, a.oracle, &a.eval.config())?;
    println!("{:>6}  {:>7}  {:>7}  {:>7}", "class", "AP", "P@20", "P@50");
    for (c, curve) in &r.per_class {
        println!("{c:>6}  {:>7.4}  {:>7.4}  {:>7.4}", curve.ap, curve.p_at_20, curve.p_at_50);
    }
    if !r.excluded.is_empty() {
        println!("excluded (no ground truth): {:?}", r.excluded);
    }
    println!("mean AP {:.4}", r.mean_ap);
    if let Some(p) = &a.out {
        write_json(p, &r)?;
    }
    Ok(())
}

fn info_cmd(a: InfoArgs) -> Result<()> {
    let r = ContainerReader::open(&a.model).with_context(|| format!("opening {}", a.model.display()))?;
    let meta = r.meta()?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "stage: {}", meta.stage)?;
    writeln!(out, "producer: {}", meta.producer)?;
    writeln!(
        out,
        "situations: {} ({})",
        meta.k,
        meta.partition_kind.map_or("none".to_string(), |k| k.to_string())
    )?;
    writeln!(out, "descriptor dim: {}", meta.descriptor_dim)?;
    if let Some(d) = &meta.descriptor {
        writeln!(
            out,
            "descriptor: stride {} patch {} K {} d {}",
            d.sift.stride, d.sift.patch, d.components, d.pca_dim
        )?;
    }
    writeln!(out, "feature layout: {}", meta.feature_layout_version)?;
    for (k, v) in &meta.seeds {
        writeln!(out, "seed {k}: {v}")?;
    }
    for (k, v) in &meta.params {
        writeln!(out, "param {k}: {v}")?;
    }
    writeln!(out, "sections:")?;
    for s in r.sections() {
        writeln!(out, "  {:<4}  {:>10} bytes  crc {:08x}", s.name(), s.len, s.crc)?;
    }
    if meta.partition_kind.is_some() {
        let part = r.partition()?;
        for s in &part.situations {
            writeln!(
                out,
                "  situation {}: class {}, {} images",
                s.id,
                s.class_id.map_or("-".into(), |c| c.to_string()),
                s.members.len()
            )?;
        }
    }
    if r.sections().iter().any(|s| s.name() == "GATE") {
        let g = r.gate()?;
        writeln!(out, "gate: {} models, temperature {:.6}", g.k(), g.temperature)?;
    }
    let forests = r.forests()?;
    for (j, f) in forests.iter().enumerate() {
        let nodes: usize = f.trees.iter().map(|t| t.nodes.len()).sum();
        writeln!(
            out,
            "forest {j}: {} trees, {nodes} nodes, shrink {}, stride {}, seed {}",
            f.trees.len(),
            f.config.shrink,
            f.config.stride,
            f.config.seed
        )?;
    }
    Ok(())
}
