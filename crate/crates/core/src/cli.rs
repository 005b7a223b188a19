//! Command-line driver. Every subcommand reads one JSON run spec, applies
//! flag overrides, echoes the merged spec into the output directory and
//! writes its artifacts there.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMethod;
use crate::corpus::{generate_synthetic, load_corpus, Corpus, Label, Split, SyntheticSpec, Vocabulary, DEFAULT_MIN_FREQ};
use crate::eval::{heatmap_page, macro_f1, paired_bootstrap, render_heatmap, ScoreReport, DEFAULT_RESAMPLES};
use crate::extraction::{chi_squared_tokens, explain_corpus, extract_spurious, global_ranking};
use crate::model::{load_checkpoint, predict, save_checkpoint};
use crate::refine::{run_dref, RefineConfig, RefineMode, RunManifest};

pub const VOCAB_FILE: &str = "vocab.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RESULTS_FILE: &str = "results.json";

/// File names written by `synth`, in split order.
pub const SYNTH_FILES: [&str; 4] = ["source_train.jsonl", "source_val.jsonl", "target_val.jsonl", "target_test.jsonl"];

#[derive(Debug, Parser)]
#[command(name = "dref", version, about = "Attribution-driven refinement of a hate-speech classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train plain classifiers without any penalization.
    Train,
    /// Train with per-epoch extraction and penalization.
    Refine,
    /// Extract spurious tokens and chi-squared keywords with saved models.
    Extract,
    /// Score saved models on the target test split.
    Evaluate,
    /// Paired bootstrap between two evaluated run directories.
    Bootstrap,
    /// Render attribution heatmaps for saved models.
    Visualize,
    /// Generate a synthetic corpus pair with planted tokens.
    Synth,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Refine => "refine",
            Command::Extract => "extract",
            Command::Evaluate => "evaluate",
            Command::Bootstrap => "bootstrap",
            Command::Visualize => "visualize",
            Command::Synth => "synth",
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Run spec (JSON). Relative paths inside it resolve against its directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub spec: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replaces the run file's seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<RefineMode>,
    #[arg(long, global = true, value_parser = parse_method)]
    pub method: Option<AttributionMethod>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Local top-k size as a fraction of instance length.
    #[arg(long, global = true)]
    pub k: Option<f64>,
    #[arg(long, global = true)]
    pub topn: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

fn parse_mode(s: &str) -> Result<RefineMode, String> {
    s.parse().map_err(|_| "expected one of vanilla, tok_mask, reg, comb, pre_def_only".to_string())
}

fn parse_method(s: &str) -> Result<AttributionMethod, String> {
    s.parse().map_err(|_| "expected one of scaled_attention, ig, deeplift".to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    pub source_train: Option<PathBuf>,
    pub source_val: Option<PathBuf>,
    pub target_val: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSpec {
    /// Evaluated run directory of the reference system.
    pub baseline: Option<PathBuf>,
    /// Evaluated run directory of the system under test.
    pub system: Option<PathBuf>,
    pub n_resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        BootstrapSpec { baseline: None, system: None, n_resamples: DEFAULT_RESAMPLES, seed: 0 }
    }
}

/// Parsed run-spec file. Only the corpus paths lack defaults; each
/// subcommand checks for the ones it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub corpora: CorpusPaths,
    pub refine: RefineConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub vocab_min_freq: usize,
    /// Directory holding `vocab.json` and per-seed models. Defaults to `out`.
    pub models: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub bootstrap: BootstrapSpec,
    /// How many target instances `visualize` renders.
    pub visualize_limit: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            corpora: CorpusPaths::default(),
            refine: RefineConfig::default(),
            seeds: vec![0],
            out: PathBuf::from("out"),
            vocab_min_freq: DEFAULT_MIN_FREQ,
            models: None,
            synthetic: None,
            bootstrap: BootstrapSpec::default(),
            visualize_limit: 20,
        }
    }
}

impl RunSpec {
    /// Reads a run file and makes its relative paths relative to the file's
    /// own directory.
    pub fn load(path: &Path) -> anyhow::Result<RunSpec> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read spec {}", path.display()))?;
        let mut spec: RunSpec =
            serde_json::from_str(&text).with_context(|| format!("invalid spec {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        spec.rebase(base);
        Ok(spec)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && p.as_os_str() != crate::refine::BUILTIN_LEXICON {
                *p = base.join(&*p);
            }
        };
        let c = &mut self.corpora;
        for p in [&mut c.source_train, &mut c.source_val, &mut c.target_val, &mut c.target_test].into_iter().flatten() {
            fix(p);
        }
        for p in [&mut self.models, &mut self.bootstrap.baseline, &mut self.bootstrap.system, &mut self.refine.lexicon_path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.out);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(mode) = o.mode {
            self.refine.mode = mode;
        }
        if let Some(method) = o.method {
            self.refine.method = method;
        }
        if let Some(lambda) = o.lambda {
            self.refine.lambda = lambda;
        }
        if let Some(k) = o.k {
            self.refine.extraction.k_fraction = k;
        }
        if let Some(n) = o.topn {
            self.refine.extraction.top_n = n;
        }
        if let Some(e) = o.epochs {
            self.refine.epochs = e;
        }
    }

    /// Checks the fields `command` relies on, including that every path it
    /// reads exists.
    pub fn validate(&self, command: Command) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            bail!("seeds contain duplicates");
        }
        let c = &self.corpora;
        let required: Vec<(&str, &Option<PathBuf>)> = match command {
            Command::Synth => vec![],
            Command::Bootstrap => vec![],
            Command::Train | Command::Refine | Command::Extract => {
                vec![("source_train", &c.source_train), ("target_val", &c.target_val)]
            }
            Command::Evaluate | Command::Visualize => {
                vec![("source_train", &c.source_train), ("target_test", &c.target_test)]
            }
        };
        for (name, path) in required {
            if path.is_none() {
                bail!("{} needs corpora.{name}", command.name());
            }
        }
        let mut paths: Vec<&PathBuf> =
            [&c.source_train, &c.source_val, &c.target_val, &c.target_test].into_iter().flatten().collect();
        if let Some(m) = &self.models {
            paths.push(m);
        }
        match command {
            Command::Synth => {
                let synth = self.synthetic.as_ref().ok_or_else(|| anyhow!("synth needs a `synthetic` section"))?;
                synth.validate()?;
            }
            Command::Bootstrap => {
                for (name, p) in [("baseline", &self.bootstrap.baseline), ("system", &self.bootstrap.system)] {
                    paths.push(p.as_ref().ok_or_else(|| anyhow!("bootstrap needs bootstrap.{name}"))?);
                }
            }
            _ => {
                let mut refine = self.refine.clone();
                if command == Command::Train {
                    refine.mode = RefineMode::Vanilla;
                    refine.lexicon_path = None;
                }
                refine.validate()?;
            }
        }
        for p in paths {
            if !p.exists() {
                bail!("{} does not exist", p.display());
            }
        }
        Ok(())
    }

    fn models_dir(&self) -> &Path {
        self.models.as_deref().unwrap_or(&self.out)
    }
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn read_corpus(path: &Path, split: Split) -> anyhow::Result<Corpus> {
    let loaded = load_corpus(path, split).with_context(|| format!("cannot load corpus {}", path.display()))?;
    Ok(loaded.corpus)
}

struct Data {
    source_train: Corpus,
    source_val: Option<Corpus>,
    target_val: Option<Corpus>,
    target_test: Option<Corpus>,
}

fn load_data(spec: &RunSpec) -> anyhow::Result<Data> {
    let c = &spec.corpora;
    let opt = |p: &Option<PathBuf>, s| p.as_deref().map(|p| read_corpus(p, s)).transpose();
    Ok(Data {
        source_train: read_corpus(c.source_train.as_deref().expect("validated"), Split::Train)?,
        source_val: opt(&c.source_val, Split::Val)?,
        target_val: opt(&c.target_val, Split::Val)?,
        target_test: opt(&c.target_test, Split::Test)?,
    })
}

/// Rebuilds the vocabulary from source-train and checks it against the
/// one saved next to the models.
fn load_vocab(spec: &RunSpec, data: &Data) -> anyhow::Result<Vocabulary> {
    let path = spec.models_dir().join(VOCAB_FILE);
    let saved = Vocabulary::load(&path).with_context(|| {
        format!("no trained models in {} (point `models` at a train or refine output)", spec.models_dir().display())
    })?;
    let rebuilt = Vocabulary::build(&data.source_train, saved.min_freq());
    if rebuilt.hash() != saved.hash() {
        bail!("{} was not built from corpora.source_train", path.display());
    }
    Ok(saved)
}

fn cmd_synth(spec: &RunSpec) -> anyhow::Result<()> {
    let synth = generate_synthetic(spec.synthetic.as_ref().expect("validated"))?;
    let splits = [&synth.source_train, &synth.source_val, &synth.target_val, &synth.target_test];
    for (corpus, name) in splits.into_iter().zip(SYNTH_FILES) {
        corpus.save(spec.out.join(name))?;
    }
    Ok(())
}

fn cmd_refine(spec: &RunSpec) -> anyhow::Result<()> {
    let data = load_data(spec)?;
    let target_val = data.target_val.as_ref().expect("validated");
    let vocab = Vocabulary::build(&data.source_train, spec.vocab_min_freq);
    vocab.save(spec.out.join(VOCAB_FILE))?;
    for &seed in &spec.seeds {
        let config = RefineConfig { seed, ..spec.refine.clone() };
        let run = run_dref(&data.source_train, data.source_val.as_ref(), target_val, &config, &vocab)
            .with_context(|| format!("seed {seed}"))?;
        let dir = seed_dir(&spec.out, seed);
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        save_checkpoint(&run.params, &vocab, dir.join(CHECKPOINT_FILE))?;
        run.manifest(Some(PathBuf::from(CHECKPOINT_FILE))).save(dir.join(MANIFEST_FILE))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ExtractionOutput {
    seed: u64,
    spurious: crate::extraction::SpuriousTokenSet,
    global_hate: Vec<(String, f64)>,
    global_non_hate: Vec<(String, f64)>,
    chi_squared: crate::extraction::ChiSquaredTokens,
}

fn cmd_extract(spec: &RunSpec) -> anyhow::Result<()> {
    let data = load_data(spec)?;
    let target_val = data.target_val.as_ref().expect("validated");
    let vocab = load_vocab(spec, &data)?;
    let cfg = &spec.refine.extraction;
    let attributor = spec.refine.attributor();
    let chi = chi_squared_tokens(&data.source_train, target_val, cfg.min_token_freq)?;
    for &seed in &spec.seeds {
        let params = load_checkpoint(seed_dir(spec.models_dir(), seed).join(CHECKPOINT_FILE), &vocab)?;
        let ranking = global_ranking(&params, &vocab, &data.source_train, &attributor, cfg, 0)?;
        let spurious = extract_spurious(&params, &vocab, target_val, &ranking, &attributor, cfg)?;
        let top = |class| ranking.list(class).iter().take(cfg.top_n).cloned().collect();
        let out = ExtractionOutput {
            seed,
            spurious,
            global_hate: top(Label::Hate),
            global_non_hate: top(Label::NonHate),
            chi_squared: chi.clone(),
        };
        let dir = seed_dir(&spec.out, seed);
        std::fs::create_dir_all(&dir)?;
        write_json(&dir.join("extraction.json"), &out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub gold: Label,
    pub predicted: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResults {
    pub mode: RefineMode,
    pub method: AttributionMethod,
    pub lambda: f64,
    pub selected_epochs: Vec<usize>,
    pub report: ScoreReport,
}

fn read_manifest(dir: &Path) -> anyhow::Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("bad manifest {}", path.display()))
}

fn cmd_evaluate(spec: &RunSpec) -> anyhow::Result<()> {
    let data = load_data(spec)?;
    let test = data.target_test.as_ref().expect("validated");
    let vocab = load_vocab(spec, &data)?;
    let mut scores = Vec::with_capacity(spec.seeds.len());
    let mut selected_epochs = Vec::with_capacity(spec.seeds.len());
    let mut trained_with: Option<RefineConfig> = None;
    for &seed in &spec.seeds {
        let manifest = read_manifest(&seed_dir(spec.models_dir(), seed))?;
        selected_epochs.push(manifest.selected_epoch);
        let config = RefineConfig { seed: 0, ..manifest.config };
        match &trained_with {
            Some(c) if *c != config => bail!("seed {seed} was trained with a different configuration"),
            Some(_) => {}
            None => trained_with = Some(config),
        }
        let params = load_checkpoint(seed_dir(spec.models_dir(), seed).join(CHECKPOINT_FILE), &vocab)?;
        let preds = predict(&params, &vocab, test)?;
        let predicted: Vec<Label> = preds.iter().map(|p| p.predicted).collect();
        scores.push(macro_f1(&predicted, &test.labels())?);
        let mut lines = String::new();
        for (p, inst) in preds.iter().zip(&test.instances) {
            let row = PredictionRow { id: p.id.clone(), gold: inst.label, predicted: p.predicted };
            lines.push_str(&serde_json::to_string(&row)?);
            lines.push('\n');
        }
        let dir = seed_dir(&spec.out, seed);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join(PREDICTIONS_FILE), lines)?;
    }
    let config = trained_with.expect("seeds are non-empty");
    let label = format!("{}/{}", config.mode, config.method);
    let results = EvaluationResults {
        mode: config.mode,
        method: config.method,
        lambda: config.lambda,
        selected_epochs,
        report: ScoreReport::new(label, spec.seeds.clone(), scores),
    };
    write_json(&spec.out.join(RESULTS_FILE), &results)
}

fn read_predictions(path: &Path) -> anyhow::Result<Vec<PredictionRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("bad prediction row in {}", path.display())))
        .collect()
}

fn cmd_bootstrap(spec: &RunSpec) -> anyhow::Result<()> {
    let b = &spec.bootstrap;
    let (base_dir, sys_dir) = (b.baseline.as_deref().expect("validated"), b.system.as_deref().expect("validated"));
    // Predictions from all seeds are pooled into one paired sample.
    let (mut base, mut sys, mut gold) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &spec.seeds {
        let a = read_predictions(&seed_dir(sys_dir, seed).join(PREDICTIONS_FILE))?;
        let r = read_predictions(&seed_dir(base_dir, seed).join(PREDICTIONS_FILE))?;
        if a.len() != r.len() || a.iter().zip(&r).any(|(x, y)| x.id != y.id || x.gold != y.gold) {
            bail!("seed {seed}: the two runs were evaluated on different instances");
        }
        sys.extend(a.iter().map(|p| p.predicted));
        base.extend(r.iter().map(|p| p.predicted));
        gold.extend(a.iter().map(|p| p.gold));
    }
    let result = paired_bootstrap(&sys, &base, &gold, b.n_resamples, b.seed)?;
    write_json(&spec.out.join("significance.json"), &result)
}

fn cmd_visualize(spec: &RunSpec) -> anyhow::Result<()> {
    let data = load_data(spec)?;
    let test = data.target_test.as_ref().expect("validated");
    let vocab = load_vocab(spec, &data)?;
    let attributor = spec.refine.attributor();
    let subset = Corpus::new(
        test.name.clone(),
        test.split,
        test.instances.iter().take(spec.visualize_limit).cloned().collect(),
    )?;
    for &seed in &spec.seeds {
        let params = load_checkpoint(seed_dir(spec.models_dir(), seed).join(CHECKPOINT_FILE), &vocab)?;
        let records = explain_corpus(&params, &vocab, &subset, &attributor)?;
        let fragments = subset
            .instances
            .iter()
            .zip(&records)
            .map(|(inst, rec)| render_heatmap(inst, rec))
            .collect::<crate::Result<Vec<_>>>()?;
        let title = format!("{} attributions, seed {seed}", spec.refine.method);
        let dir = seed_dir(&spec.out, seed);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("heatmap.html"), heatmap_page(&title, &fragments))?;
    }
    Ok(())
}

/// Reasons a command stops before producing output.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments. The usage text has already been printed.
    Usage,
    /// The run spec could not be read or is invalid.
    Spec(anyhow::Error),
    /// The run itself failed.
    Run(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage => 2,
            Failure::Spec(_) | Failure::Run(_) => 1,
        }
    }
}

/// Merges the run file with flag overrides and validates it for `command`.
pub fn effective_spec(command: Command, overrides: &Overrides) -> anyhow::Result<RunSpec> {
    let mut spec = match &overrides.spec {
        Some(path) => RunSpec::load(path)?,
        None => RunSpec::default(),
    };
    spec.apply(overrides);
    if command == Command::Train {
        spec.refine.mode = RefineMode::Vanilla;
        spec.refine.lexicon_path = None;
    }
    spec.validate(command).with_context(|| match &overrides.spec {
        Some(p) => format!("invalid spec {}", p.display()),
        None => "invalid spec (no --spec given)".to_string(),
    })?;
    Ok(spec)
}

/// Runs one already-parsed command.
pub fn execute(cli: &Cli) -> Result<(), Failure> {
    let spec = effective_spec(cli.command, &cli.overrides).map_err(Failure::Spec)?;
    let run = || -> anyhow::Result<()> {
        std::fs::create_dir_all(&spec.out).with_context(|| format!("cannot create {}", spec.out.display()))?;
        // Named per command, so evaluating into a refine directory keeps
        // the training spec next to the models.
        write_json(&spec.out.join(format!("{}_spec.json", cli.command.name())), &spec)?;
        match cli.command {
            Command::Synth => cmd_synth(&spec),
            Command::Train | Command::Refine => cmd_refine(&spec),
            Command::Extract => cmd_extract(&spec),
            Command::Evaluate => cmd_evaluate(&spec),
            Command::Bootstrap => cmd_bootstrap(&spec),
            Command::Visualize => cmd_visualize(&spec),
        }
    };
    let result = match cli.overrides.jobs {
        Some(0) => return Err(Failure::Spec(anyhow!("--jobs must be at least 1"))),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Run(e.into()))?
            .install(run),
        None => run(),
    };
    result.map_err(Failure::Run)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr on one line.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Failure::Usage.exit_code() } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Spec(e) | Failure::Run(e) => eprintln!("error: {e:#}"),
                Failure::Usage => {}
            }
            f.exit_code()
        }
    }
}
