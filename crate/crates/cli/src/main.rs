use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use zsseg::clip_adapt::{BackboneShape, DenseClip, Encoder, PlantConfig, Segmenter, DEFAULT_TAU};
use zsseg::corruption::{sweep, CorruptionKind, SeverityTable, SweepConfig, LEVELS};
use zsseg::dataio::{
    gen_dataset, load_manifest, read_labels, write_image, write_labels, BackgroundPolicy, DatasetManifest, SceneSpec,
};
use zsseg::metrics::{export, parse_metrics_csv, ConfusionMatrix, ExportPaths, MetricsReport, SplitSpec};
use zsseg::pipeline::{run, Setting, TargetModel, TrainConfig};
use zsseg::planted::{scene_encoder, DEFAULT_TEXT_DIM};
use zsseg::textbank::{build_bank, ClassifierBank, PromptTemplateSet, ToyTextEncoder};
use zsseg::{seed, ConfidenceMap, LabelMap, Tensor4};

/// Zero-shot dense prediction: data generation, inference, training and evaluation.
#[derive(Parser)]
#[command(name = "zsseg", version)]
struct Cli {
    /// Log progress at info level.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark to image/label files plus a manifest.
    GenData(GenDataArgs),
    /// Build the prompt-ensembled classifier bank for a manifest's classes.
    BuildClassifier(BuildClassifierArgs),
    /// Plant a toy encoder whose prototype colours map onto the bank rows.
    PlantEncoder(PlantEncoderArgs),
    /// Predict label maps and confidence maps for every manifest image.
    Infer(InferArgs),
    /// Guided learning from the dense teacher, then self-training.
    Train(TrainArgs),
    /// Score predictions against manifest labels.
    Eval(EvalArgs),
    /// Evaluate under every corruption kind and severity level.
    Corrupt(CorruptArgs),
    /// Merge several metrics.csv files into one comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Seen class ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    seen: Option<Vec<u8>>,
    /// Unseen class ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    unseen: Option<Vec<u8>>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 48)]
    count: usize,
    /// Label canvas pixels with an extra background id instead of ignoring them.
    #[arg(long)]
    labeled_background: bool,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct BuildClassifierArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prompt template file, one template with a single `{}` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TEXT_DIM)]
    dim: usize,
}

#[derive(Args)]
struct PlantEncoderArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Trained target network; the planted teacher is used when absent.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Training configuration, flat key=value text.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configuration's teacher temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of predicted label maps named like the manifest's label files.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corruption kinds, comma separated; all eight when absent.
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
    /// Severity levels 1..=5, comma separated; all five when absent.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    /// Severity overrides, `kind=c1,..,c5` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// metrics.csv files to merge; each column is named after the file's directory.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// An error caused by how the program was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<zsseg::Error>() {
            return if e.is_usage() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new().filter_level(level).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(a),
        Command::BuildClassifier(a) => cmd_build_classifier(a),
        Command::PlantEncoder(a) => cmd_plant_encoder(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `key=value` lines describing a command's resolved inputs.
struct Snapshot(String);

impl Snapshot {
    fn new(command: &str) -> Self {
        Snapshot(format!("command={}\n", command))
    }

    fn set(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        writeln!(self.0, "{}={}", key, value).unwrap();
        self
    }

    fn path(self, key: &str, value: &Path) -> Self {
        self.set(key, value.display())
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        write_text(&out_dir.join("config.snapshot"), &self.0)
    }
}

fn ids(v: &BTreeSet<usize>) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Split from flags, completing a one-sided flag with the remaining classes;
/// the manifest's flags apply when neither is given.
fn resolve_split(args: &SplitArgs, classes: usize, fallback: Option<SplitSpec>) -> Result<Option<SplitSpec>> {
    let all: BTreeSet<usize> = (0..classes).collect();
    let to_set = |v: &Vec<u8>| -> Result<BTreeSet<usize>> {
        let set: BTreeSet<usize> = v.iter().map(|&c| c as usize).collect();
        if let Some(c) = set.iter().find(|&&c| c >= classes) {
            return Err(usage(format!("class {} outside 0..{}", c, classes)));
        }
        Ok(set)
    };
    let (seen, unseen) = match (&args.seen, &args.unseen) {
        (None, None) => return Ok(fallback),
        (Some(s), None) => {
            let s = to_set(s)?;
            let u = all.difference(&s).copied().collect();
            (s, u)
        }
        (None, Some(u)) => {
            let u = to_set(u)?;
            (all.difference(&u).copied().collect(), u)
        }
        (Some(s), Some(u)) => (to_set(s)?, to_set(u)?),
    };
    if let Some(c) = seen.intersection(&unseen).next() {
        return Err(usage(format!("class {} is both seen and unseen", c)));
    }
    Ok(Some(SplitSpec::new(seen, unseen).map_err(|e| usage(e.to_string()))?))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let mut spec = SceneSpec::benchmark();
    if a.labeled_background {
        spec.background = BackgroundPolicy::Labeled;
    }
    if let Some(split) = resolve_split(&a.split, spec.num_classes(), None)? {
        if split.all().len() != spec.num_classes() {
            return Err(usage("--seen and --unseen must cover every class"));
        }
        spec.unseen = split.unseen.iter().map(|&c| c as u8).collect();
    }
    spec.validate()?;
    create_dir(&a.out)?;
    let m = gen_dataset(&spec, a.count, a.seed, &a.out)?;
    Snapshot::new("gen-data")
        .path("out", &a.out)
        .set("seed", a.seed)
        .set("count", a.count)
        .set("background", if a.labeled_background { "labeled" } else { "ignore" })
        .set("seen", ids(&m.split()?.seen))
        .set("unseen", ids(&m.split()?.unseen))
        .write(&a.out)?;
    log::info!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

fn cmd_build_classifier(a: BuildClassifierArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let templates = match &a.config {
        Some(p) => PromptTemplateSet::read(p)?,
        None => PromptTemplateSet::default(),
    };
    let enc = ToyTextEncoder::new(a.dim, seed::derive(a.seed, "text"))?;
    let bank = build_bank(&m.names(), &templates, &enc, m.background.is_some(), a.seed)?;
    create_dir(&a.out)?;
    bank.write(&a.out.join("bank.bin"))?;
    let mut snap = Snapshot::new("build-classifier")
        .path("manifest", &a.manifest)
        .path("out", &a.out)
        .set("seed", a.seed)
        .set("dim", a.dim)
        .set("templates", templates.len());
    if let Some(p) = &a.config {
        snap = snap.path("config", p);
    }
    snap.write(&a.out)
}

fn cmd_plant_encoder(a: PlantEncoderArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let bank = ClassifierBank::read(&a.bank)?;
    if bank.names() != m.names().as_slice() {
        bail!(zsseg::Error::Data("bank classes differ from the manifest's".into()));
    }
    let mut spec = SceneSpec::benchmark();
    spec.classes = m
        .classes
        .iter()
        .map(|c| zsseg::dataio::ClassSpec {
            id: c.id,
            name: c.name.clone(),
            color: c.color,
            shape: c.shape,
        })
        .collect();
    let plant = PlantConfig {
        seed: seed::derive(a.seed, "plant"),
        ..PlantConfig::default()
    };
    let shape = BackboneShape::default();
    let encoder = scene_encoder(&spec, &bank, &shape, &plant)?;
    create_dir(&a.out)?;
    encoder.write(&a.out.join("encoder.bin"))?;
    Snapshot::new("plant-encoder")
        .path("manifest", &a.manifest)
        .path("bank", &a.bank)
        .path("out", &a.out)
        .set("seed", a.seed)
        .set("d_emb", plant.d_emb)
        .set("jitter", plant.jitter)
        .set("samples_per_class", plant.samples_per_class)
        .set("ridge", plant.ridge)
        .write(&a.out)
}

enum Model {
    Teacher(DenseClip),
    Target(TargetModel),
}

impl Model {
    fn load(a: &ModelArgs) -> Result<Self> {
        if !(a.tau > 0.0 && a.tau.is_finite()) {
            return Err(usage(format!("--tau {} must be > 0", a.tau)));
        }
        let encoder = Encoder::read(&a.encoder)?;
        let bank = ClassifierBank::read(&a.bank)?;
        let teacher = DenseClip::new(&encoder, bank, a.tau)?;
        Ok(match &a.snapshot {
            Some(p) => {
                let target = TargetModel::read(p)?;
                if target.num_labels() != teacher.num_labels() {
                    bail!(zsseg::Error::Data("snapshot and bank disagree on the label count".into()));
                }
                Model::Target(target)
            }
            None => Model::Teacher(teacher),
        })
    }

    fn segmenter(&self) -> &dyn Segmenter {
        match self {
            Model::Teacher(m) => m,
            Model::Target(m) => m,
        }
    }

    fn segment(&self, image: &Tensor4) -> Result<(LabelMap, ConfidenceMap)> {
        let (mut l, mut c) = match self {
            Model::Teacher(m) => m.segment(image)?,
            Model::Target(m) => m.segment(image)?,
        };
        Ok((l.remove(0), c.remove(0)))
    }

    fn snapshot(&self, s: Snapshot, a: &ModelArgs) -> Snapshot {
        let s = s.path("encoder", &a.encoder).path("bank", &a.bank).set("tau", a.tau);
        match &a.snapshot {
            Some(p) => s.path("snapshot", p),
            None => s,
        }
    }
}

fn confidence_image(conf: &ConfidenceMap) -> Result<Tensor4> {
    let plane = conf.data.clone();
    let mut data = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Ok(Tensor4::from_vec([1, 3, conf.height, conf.width], data)?)
}

fn label_file_name(m: &DatasetManifest, i: usize) -> Result<PathBuf> {
    m.entries[i]
        .1
        .file_name()
        .map(PathBuf::from)
        .ok_or_else(|| anyhow!("entry {} has no label file name", i))
}

fn non_empty(m: &DatasetManifest) -> Result<()> {
    if m.entries.is_empty() {
        return Err(usage("manifest lists no images"));
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    non_empty(&m)?;
    let model = Model::load(&a.model)?;
    let labels_dir = a.out.join("labelmaps");
    let conf_dir = a.out.join("confidence");
    create_dir(&labels_dir)?;
    create_dir(&conf_dir)?;
    for i in 0..m.entries.len() {
        let sample = m.load_sample(i)?;
        let (pred, conf) = model.segment(&sample.image)?;
        let name = label_file_name(&m, i)?;
        write_labels(&labels_dir.join(&name), &pred)?;
        write_image(&conf_dir.join(name.with_extension("ppm")), &confidence_image(&conf)?)?;
    }
    let snap = Snapshot::new("infer").path("manifest", &a.manifest).path("out", &a.out);
    model.snapshot(snap, &a.model).write(&a.out)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    non_empty(&m)?;
    let text = match &a.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let labels = m.num_classes() + usize::from(m.background.is_some());
    let split = resolve_split(&a.split, labels, None)?;
    let seen: BTreeSet<u8> = split
        .as_ref()
        .map(|s| s.seen.iter().map(|&c| c as u8).collect())
        .unwrap_or_default();
    let mut cfg = TrainConfig::from_kv(&text, &seen)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if split.is_some() {
        if let Setting::Transductive { seen: s } = &mut cfg.setting {
            *s = seen.clone();
        }
    }
    cfg.validate()?;
    let encoder = Encoder::read(&a.encoder)?;
    let bank = ClassifierBank::read(&a.bank)?;
    let teacher = DenseClip::new(&encoder, bank.clone(), cfg.tau)?;
    let samples = m.load_samples()?;
    let out = run(&cfg, &samples, &teacher, &bank, None)?;
    create_dir(&a.out)?;
    out.model.write(
        &a.out.join("snapshot.bin"),
        serde_json::json!({
            "best_iter": out.best_iter,
            "best_probe_miou": out.best_probe_miou,
            "final_phase": out.final_phase.name(),
        }),
    )?;
    write_text(&a.out.join("log.csv"), &out.log.to_csv())?;
    write_text(&a.out.join("config.snapshot"), &cfg.to_kv())?;
    log::info!(
        "best probe mIoU {:.4} at iteration {}, phase {}",
        out.best_probe_miou,
        out.best_iter,
        out.final_phase.name()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    non_empty(&m)?;
    let classes = m.num_classes() + usize::from(m.background.is_some());
    let split = resolve_split(&a.split, classes, Some(m.split()?))?.expect("fallback supplied");
    let preds: Vec<PathBuf> = (0..m.entries.len())
        .map(|i| Ok(a.pred.join(label_file_name(&m, i)?)))
        .collect::<Result<_>>()?;
    let missing: Vec<String> = preds
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!(zsseg::Error::Data(format!("missing predictions: {}", missing.join(", "))));
    }
    let mut pairs = Vec::with_capacity(preds.len());
    let mut k = classes;
    for (i, p) in preds.iter().enumerate() {
        let pred = read_labels(p)?;
        let gt = read_labels(&m.label_path(i))?;
        if let Some(&max) = pred.data().iter().max() {
            k = k.max(max as usize + 1);
        }
        pairs.push((pred, gt));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (pred, gt) in &pairs {
        cm.accumulate(pred, gt, m.ignore_index)?;
    }
    let report = MetricsReport::compute(&cm, &split)?;
    create_dir(&a.out)?;
    export(&cm, &report, &ExportPaths::in_dir(&a.out))?;
    Snapshot::new("eval")
        .path("manifest", &a.manifest)
        .path("pred", &a.pred)
        .path("out", &a.out)
        .set("seen", ids(&split.seen))
        .set("unseen", ids(&split.unseen))
        .write(&a.out)
}

fn cmd_corrupt(a: CorruptArgs) -> Result<()> {
    let kinds = match &a.kinds {
        Some(ks) => ks
            .iter()
            .map(|k| CorruptionKind::parse(k))
            .collect::<zsseg::Result<Vec<_>>>()?,
        None => CorruptionKind::ALL.to_vec(),
    };
    let levels = a.levels.clone().unwrap_or_else(|| (1..=LEVELS).collect());
    if let Some(l) = levels.iter().find(|l| !(1..=LEVELS).contains(*l)) {
        return Err(usage(format!("--levels: {} outside 1..=5", l)));
    }
    let mut table = SeverityTable::default();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        table.apply_overrides(&text)?;
    }
    let m = load_manifest(&a.manifest)?;
    non_empty(&m)?;
    let classes = m.num_classes() + usize::from(m.background.is_some());
    let split = resolve_split(&a.split, classes, Some(m.split()?))?.expect("fallback supplied");
    let model = Model::load(&a.model)?;
    let samples = m.load_samples()?;
    let cfg = SweepConfig {
        kinds: kinds.clone(),
        levels: levels.clone(),
        table,
        classes: split.all(),
        ignore_index: m.ignore_index,
        seed: a.seed,
    };
    let result = sweep(&samples, model.segmenter(), &cfg)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("sweep.csv"), &result.to_csv())?;
    let kind_list: Vec<&str> = kinds.iter().map(|k| k.key()).collect();
    let level_list: Vec<String> = levels.iter().map(usize::to_string).collect();
    let mut snap = Snapshot::new("corrupt")
        .path("manifest", &a.manifest)
        .path("out", &a.out)
        .set("seed", a.seed)
        .set("kinds", kind_list.join(","))
        .set("levels", level_list.join(","))
        .set("classes", ids(&cfg.classes));
    if let Some(p) = &a.config {
        snap = snap.path("config", p);
    }
    model.snapshot(snap, &a.model).write(&a.out)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut columns = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let rows = parse_metrics_csv(&text)?;
        let name = p
            .parent()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        columns.push((name, rows));
    }
    let mut metrics: Vec<String> = Vec::new();
    for (_, rows) in &columns {
        for (k, _) in rows {
            if !metrics.contains(k) {
                metrics.push(k.clone());
            }
        }
    }
    let mut s = String::from("metric");
    for (name, _) in &columns {
        write!(s, ",{}", name).unwrap();
    }
    s.push('\n');
    for k in &metrics {
        s.push_str(k);
        for (_, rows) in &columns {
            match rows.iter().find(|(n, _)| n == k).and_then(|(_, v)| *v) {
                Some(v) => write!(s, ",{:.1}", v).unwrap(),
                None => s.push_str(",NA"),
            }
        }
        s.push('\n');
    }
    create_dir(&a.out)?;
    write_text(&a.out.join("report.csv"), &s)?;
    let inputs: Vec<String> = a.inputs.iter().map(|p| p.display().to_string()).collect();
    Snapshot::new("report")
        .path("out", &a.out)
        .set("inputs", inputs.join(","))
        .write(&a.out)
}
