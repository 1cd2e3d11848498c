//! `hmar` subcommands. Every command writes plain text to the given writer
//! and reports failures as a [`CliError`] with a short machine-readable kind.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use hmar_core::config::Settings;
use hmar_core::dataset::{generate, load_image, split, LoadedSet, Manifest, SyntheticSpec};
use hmar_core::gradcheck;
use hmar_core::index::{encode_global, encode_set, Index};
use hmar_core::model::{load_checkpoint, save_checkpoint, BackboneConfig, Model, ModelConfig};
use hmar_core::retrieval::{compute_map, one_hot, top_k_global, BoundingBox, MapOptions, PackedCodeSet, RetrievalResult};
use hmar_core::trainer::{
    metrics_tsv, progressive_bit_run, stage1_train, stage2_after_stage1, train_both_stages, EpochMetrics, TrainConfig,
};
use hmar_service::ServiceConfig;

#[derive(Debug)]
pub enum CliError {
    Core(hmar_core::Error),
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let msg = match self {
            CliError::Core(e) => e.detail(),
            CliError::Usage(m) => m.clone(),
        };
        // one line, so callers can split on the first two colons
        write!(f, "error: {}: {}", self.kind(), msg.replace('\n', " "))
    }
}

impl From<hmar_core::Error> for CliError {
    fn from(e: hmar_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "hmar", version, about = "Hashed image retrieval with region-of-interest search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic motif dataset and its manifest.
    GenData(GenDataArgs),
    /// Train one or both stages and write a checkpoint.
    Train(TrainArgs),
    /// Write global codes for a manifest to a code database.
    Encode(EncodeArgs),
    /// Build a searchable index: code database plus cached local feature maps.
    Index(IndexArgs),
    /// Whole-image query against a code database.
    QueryGlobal(QueryGlobalArgs),
    /// Box query: global candidates, then window re-ranking.
    QueryLocal(QueryLocalArgs),
    /// Mean average precision of a code database under given labels.
    EvalMap(EvalMapArgs),
    /// Finite-difference gradient verification of every component.
    Gradcheck(GradcheckArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub images_per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub motif_min: Option<usize>,
    #[arg(long)]
    pub motif_max: Option<usize>,
    #[arg(long)]
    pub motif_amplitude: Option<f64>,
    /// Also write train/val/test manifests with these ratios, e.g. 0.7,0.2,0.1.
    #[arg(long, value_parser = parse_ratios)]
    pub split: Option<(f64, f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Code length; a comma list with `--stage all` trains progressively.
    #[arg(long, value_parser = parse_usize_list)]
    pub bits: Option<List<usize>>,
    /// key = value file of training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Validation manifest for per-epoch mAP.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Stage-1 checkpoint to continue from (required for `--stage 2`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-epoch metrics table here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_stage2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct QuerySource {
    /// Query image file.
    #[arg(long, conflicts_with = "id", required_unless_present = "id")]
    pub image: Option<PathBuf>,
    /// Id of an indexed image to use as the query.
    #[arg(long)]
    pub id: Option<u64>,
}

#[derive(Debug, Args)]
pub struct QueryGlobalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub code_db: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub source: QuerySource,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct QueryLocalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub code_db: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub source: QuerySource,
    /// Pixel box x1,y1,x2,y2 (half-open).
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: BoundingBox,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct EvalMapArgs {
    /// Database codes.
    #[arg(long)]
    pub codes: PathBuf,
    /// Labels for the database: a manifest (.jsonl) or `id label[,label…]` lines.
    #[arg(long)]
    pub labels: PathBuf,
    /// Cut-off rank; the whole database when omitted.
    #[arg(long)]
    pub k: Option<usize>,
    /// Separate query codes; without them every database code queries the rest.
    #[arg(long, requires = "query_labels")]
    pub queries: Option<PathBuf>,
    #[arg(long, requires = "queries")]
    pub query_labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, value_parser = parse_u64_list)]
    pub seeds: Option<List<u64>>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// key = value file of service settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub code_db: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("`{p}` is not a valid number")))
        .collect()
}

/// Comma-separated numbers as one argument value.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

fn parse_usize_list(s: &str) -> Result<List<usize>, String> {
    parse_list(s).map(List)
}

fn parse_u64_list(s: &str) -> Result<List<u64>, String> {
    parse_list(s).map(List)
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64), String> {
    match parse_list::<f64>(s)?[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three ratios train,val,test".into()),
    }
}

fn parse_bbox(s: &str) -> Result<BoundingBox, String> {
    match parse_list::<usize>(s)?[..] {
        [x1, y1, x2, y2] => BoundingBox::new(x1, y1, x2, y2).map_err(|e| e.to_string()),
        _ => Err("expected x1,y1,x2,y2".into()),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Encode(a) => encode(a, out),
        Command::Index(a) => index(a, out),
        Command::QueryGlobal(a) => query_global(a, out),
        Command::QueryLocal(a) => query_local(a, out),
        Command::EvalMap(a) => eval_map(a, out),
        Command::Gradcheck(a) => run_gradcheck(a, out),
        Command::Serve(a) => serve(a),
    }
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        num_classes: a.num_classes.unwrap_or(d.num_classes),
        images_per_class: a.images_per_class.unwrap_or(d.images_per_class),
        image_size: a.image_size.unwrap_or(d.image_size),
        noise_sigma: a.noise_sigma.unwrap_or(d.noise_sigma),
        motif_min: a.motif_min.unwrap_or(d.motif_min),
        motif_max: a.motif_max.unwrap_or(d.motif_max),
        motif_amplitude: a.motif_amplitude.unwrap_or(d.motif_amplitude),
    };
    let manifest = generate(&spec, a.seed, &a.out)?;
    writeln!(out, "{}\t{}", manifest.len(), a.out.join("manifest.jsonl").display())?;
    if let Some(ratios) = a.split {
        let (tr, va, te) = split(&manifest, ratios, a.seed)?;
        for (name, m) in [("train", tr), ("val", va), ("test", te)] {
            let path = a.out.join(format!("{name}.jsonl"));
            m.save(&path)?;
            writeln!(out, "{}\t{}", m.len(), path.display())?;
        }
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut s = match &a.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    if let Some(List(bits)) = &a.bits {
        s.set("bits", bits[0].to_string());
    }
    let flags = [
        ("epochs_per_stage", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("lr_stage2", a.lr_stage2.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("alpha", a.alpha.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, v);
        }
    }
    let config: TrainConfig = s.deserialize()?;
    config.validate()?;
    Ok(config)
}

/// Default backbone sized to the data: image side and class count.
fn backbone_for(manifest: &Manifest, set: &LoadedSet) -> BackboneConfig {
    BackboneConfig {
        input_size: set.side,
        num_classes: manifest.num_classes(),
        ..BackboneConfig::default()
    }
}

/// `model.ckpt` with 64 bits becomes `model.64.ckpt`.
fn bit_suffixed(path: &Path, bits: usize) -> PathBuf {
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into());
    path.with_extension(format!("{bits}.{ext}"))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = train_config(&a)?;
    let manifest = Manifest::load(&a.manifest)?;
    let set = LoadedSet::load(&manifest)?;
    let val = match &a.val {
        Some(p) => Some(LoadedSet::load(&Manifest::load(p)?)?),
        None => None,
    };
    let mut log: Vec<EpochMetrics> = Vec::new();
    let mut print = |m: &EpochMetrics| {
        let _ = writeln!(out, "{}", m.tsv_line());
    };
    let bit_list = a.bits.clone().map_or_else(|| vec![config.bits], |l| l.0);
    if bit_list.len() > 1 && a.stage != Stage::All {
        return usage("several --bits values need --stage all");
    }
    if a.init.is_some() && a.stage != Stage::Two {
        return usage("--init only applies to --stage 2");
    }
    let mut saved = Vec::new();
    match a.stage {
        Stage::One => {
            let mut model = Model::new(ModelConfig::new(backbone_for(&manifest, &set), config.bits), config.seed)?;
            log = stage1_train(&mut model, &config, &set, val.as_ref(), &mut print)?;
            save_checkpoint(&model, &a.out)?;
            saved.push(a.out.clone());
        }
        Stage::Two => {
            let Some(init) = &a.init else {
                return usage("--stage 2 needs --init <stage-1 checkpoint>");
            };
            let mut model = load_checkpoint(init)?;
            log = stage2_after_stage1(&mut model, &config, &set, val.as_ref(), &mut print)?;
            save_checkpoint(&model, &a.out)?;
            saved.push(a.out.clone());
        }
        Stage::All if bit_list.len() == 1 => {
            let (model, l) = train_both_stages(&backbone_for(&manifest, &set), &config, &set, val.as_ref(), &mut print)?;
            log = l;
            save_checkpoint(&model, &a.out)?;
            saved.push(a.out.clone());
        }
        Stage::All => {
            let backbone = backbone_for(&manifest, &set);
            let models = progressive_bit_run(&bit_list, &backbone, &config, &set, val.as_ref(), |_, m| {
                print(m);
                log.push(m.clone());
            })?;
            for (q, model) in models {
                let path = bit_suffixed(&a.out, q);
                save_checkpoint(&model, &path)?;
                saved.push(path);
            }
        }
    }
    if let Some(p) = &a.metrics {
        fs::write(p, metrics_tsv(&log))?;
    }
    for p in saved {
        writeln!(out, "saved\t{}", p.display())?;
    }
    Ok(())
}

fn encode(a: EncodeArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let set = LoadedSet::load(&Manifest::load(&a.manifest)?)?;
    let db = encode_set(&model, &set)?;
    db.save(&a.out)?;
    writeln!(out, "{}\t{}", db.len(), a.out.display())?;
    Ok(())
}

fn index(a: IndexArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let idx = Index::build(&model, &Manifest::load(&a.manifest)?, a.alpha)?;
    idx.save(&a.out)?;
    writeln!(out, "{}\t{}", idx.len(), a.out.display())?;
    Ok(())
}

fn source_image(src: &QuerySource, manifest: &Manifest) -> CliResult<hmar_core::numerics::Tensor> {
    match (&src.image, src.id) {
        (Some(p), _) => Ok(load_image(p)?),
        (None, Some(id)) => {
            let e = manifest
                .get(id)
                .ok_or_else(|| hmar_core::Error::NotFound(format!("image {id} is not in the manifest")))?;
            Ok(load_image(manifest.resolve(e))?)
        }
        (None, None) => usage("give --image or --id"),
    }
}

fn print_results(out: &mut dyn Write, manifest: &Manifest, r: &RetrievalResult) -> CliResult<()> {
    for (rank, hit) in r.results.iter().enumerate() {
        let path = manifest.get(hit.id).map(|e| manifest.resolve(e).display().to_string()).unwrap_or_default();
        match &hit.window {
            Some(w) => {
                let [x1, y1, x2, y2] = w.pixel_box.to_array();
                writeln!(out, "{}\t{}\t{}\t{x1},{y1},{x2},{y2}\t{path}", rank + 1, hit.id, hit.distance)?
            }
            None => writeln!(out, "{}\t{}\t{}\t{path}", rank + 1, hit.id, hit.distance)?,
        }
    }
    Ok(())
}

fn query_global(a: QueryGlobalArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let db = PackedCodeSet::load(&a.code_db)?;
    let image = source_image(&a.source, &manifest)?;
    let s = image.shape().to_vec();
    let batch = image.reshape(&[1, s[0], s[1], s[2]])?;
    let code = encode_global(&model, &batch)?.remove(0);
    print_results(out, &manifest, &top_k_global(&code, &db, a.k)?)
}

fn query_local(a: QueryLocalArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let idx = Index::load(&a.code_db, manifest.clone(), a.alpha)?;
    let result = match (&a.source.image, a.source.id) {
        (None, Some(id)) => idx.query_local_by_id(&model, id, a.bbox, a.k, a.n)?,
        _ => idx.query_local(&model, &source_image(&a.source, &manifest)?, a.bbox, a.k, a.n)?,
    };
    print_results(out, &manifest, &result)
}

/// Labels by id from a manifest or from `id label[,label…]` lines.
fn read_labels(path: &Path) -> CliResult<HashMap<u64, Vec<usize>>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let m = Manifest::load(path)?;
        return Ok(m.entries.iter().map(|e| (e.id, vec![e.label])).collect());
    }
    let mut out = HashMap::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || hmar_core::Error::Format(format!("{}:{}: expected `id label[,label…]`", path.display(), i + 1));
        let mut parts = line.split_whitespace();
        let id: u64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let labels = parts.next().ok_or_else(bad)?;
        let labels = parse_list::<usize>(labels).map_err(|_| bad())?;
        if parts.next().is_some() || out.insert(id, labels).is_some() {
            return Err(bad().into());
        }
    }
    Ok(out)
}

fn label_vectors(db: &PackedCodeSet, labels: &HashMap<u64, Vec<usize>>, classes: usize) -> CliResult<Vec<Vec<f64>>> {
    db.ids()
        .iter()
        .map(|id| {
            let l = labels
                .get(id)
                .ok_or_else(|| hmar_core::Error::NotFound(format!("no label for code id {id}")))?;
            let mut v = vec![0.0; classes];
            for &c in l {
                for (x, y) in v.iter_mut().zip(one_hot(c, classes)) {
                    *x += y;
                }
            }
            Ok(v)
        })
        .collect()
}

fn eval_map(a: EvalMapArgs, out: &mut dyn Write) -> CliResult<()> {
    let db = PackedCodeSet::load(&a.codes)?;
    let db_labels = read_labels(&a.labels)?;
    let (queries, q_labels) = match (&a.queries, &a.query_labels) {
        (Some(q), Some(l)) => (Some(PackedCodeSet::load(q)?), read_labels(l)?),
        _ => (None, HashMap::new()),
    };
    let classes = db_labels.values().chain(q_labels.values()).flatten().max().map_or(1, |m| m + 1);
    let db_vecs = label_vectors(&db, &db_labels, classes)?;
    let value = match &queries {
        Some(q) => {
            let qv = label_vectors(q, &q_labels, classes)?;
            compute_map(q, &qv, &db, &db_vecs, MapOptions { top_k: a.k, exclude_self: false })?
        }
        None => compute_map(&db, &db_vecs, &db, &db_vecs, MapOptions { top_k: a.k, exclude_self: true })?,
    };
    writeln!(out, "mAP\t{value:.6}")?;
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let seeds = a.seeds.map_or_else(|| gradcheck::DEFAULT_SEEDS.to_vec(), |l| l.0);
    let report = gradcheck::run_suite(a.step, &seeds)?;
    let mut failed = Vec::new();
    for r in &report {
        let verdict = if r.passes() { "ok" } else { "FAIL" };
        writeln!(out, "{}\t{:.3e}\t{verdict}", r.component, r.max_rel_err)?;
        if !r.passes() {
            failed.push(r.component);
        }
    }
    if !failed.is_empty() {
        return Err(hmar_core::Error::Numeric(format!(
            "gradient check above {:e} for {}",
            gradcheck::TOLERANCE,
            failed.join(",")
        ))
        .into());
    }
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult<()> {
    let mut s = match &a.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let flags = [
        ("listen", a.listen),
        ("checkpoint", a.checkpoint.map(|p| p.display().to_string())),
        ("code_db", a.code_db.map(|p| p.display().to_string())),
        ("manifest", a.manifest.map(|p| p.display().to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, v);
        }
    }
    let config: ServiceConfig = s.deserialize()?;
    config.validate()?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(hmar_service::serve(config))?;
    Ok(())
}
