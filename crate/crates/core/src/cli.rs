//! The `kgcbm` command-line tool.
//!
//! Dataset directories hold `train.csv`, `val.csv`, `test_in.csv`,
//! `test_ood.csv`, `scheme.json` and `importance.json`. Run directories hold
//! `model.json`, `run_record.jsonl`, `config.json` and, once evaluated,
//! `eval/<domain>.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::align::AlignMode;
use crate::cbm::{CbmModel, ClassifierVariant, ConceptScheme};
use crate::data::{generate, load_dataset_with_scheme, Dataset, DomainTag, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{audit_delta_y, confidence_interval, evaluate, MetricsReport, CI_METHOD};
use crate::io::{read_json, write_json};
use crate::knowledge::ImportanceMatrix;
use crate::trainer::{save_run, train, KnowledgeSource, Regime, RunRecord, TrainConfig};
use crate::FORMAT_VERSION;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "KGCBM_OUT";

const TRAIN_FILE: &str = "train.csv";
const VAL_FILE: &str = "val.csv";
const TEST_IN_FILE: &str = "test_in.csv";
const TEST_OOD_FILE: &str = "test_ood.csv";
const SCHEME_FILE: &str = "scheme.json";
const IMPORTANCE_FILE: &str = "importance.json";

#[derive(Debug, Parser)]
#[command(name = "kgcbm", version, about = "Concept bottleneck models aligned with expert concept importance")]
pub struct Cli {
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic domain-shift benchmark.
    Synth(SynthArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Macro F1 and concept accuracy of a model on a dataset.
    Eval(EvalArgs),
    /// Mean ΔY heatmap and alignment score against an importance matrix.
    Audit(AuditArgs),
    /// Aggregate evaluated runs into mean ± 95% CI per group and domain.
    Compare(CompareArgs),
    /// Train and evaluate every run in a manifest, then compare.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// SynthConfig JSON; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: $KGCBM_OUT/synth].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// TrainConfig JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `none`, a matrix path, or `random:<seed>`.
    #[arg(long)]
    pub knowledge: Option<KnowledgeSource>,
    /// Matrix permuted by `random:<seed>` [default: <data>/importance.json].
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    /// Label smoothing.
    #[arg(long)]
    pub ls: Option<f64>,
    /// linear, mlp20 or mlp128.
    #[arg(long)]
    pub classifier: Option<ClassifierVariant>,
    /// pairwise or column.
    #[arg(long)]
    pub align_mode: Option<AlignMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Concept predictor hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// joint or sequential.
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Apply label smoothing to the concept loss too.
    #[arg(long)]
    pub smooth_concepts: bool,
    /// Run directory [default: $KGCBM_OUT/<variant>-<classifier>-lambda<λ>-seed<seed>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// model.json or a run directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Scheme JSON [default: the model's own scheme].
    #[arg(long)]
    pub scheme: Option<PathBuf>,
    /// Report path [default: <run>/eval/<domain>.json].
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Importance matrix to compare against.
    #[arg(long)]
    pub knowledge: PathBuf,
    /// Directory for heatmap.json and heatmap.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories.
    pub runs: Vec<PathBuf>,
    /// Compare the runs of a manifest instead.
    #[arg(long, conflicts_with = "runs")]
    pub manifest: Option<PathBuf>,
    /// Also write the table as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn run(cli: Cli) -> Result<()> {
    let json = cli.json;
    match cli.command {
        Command::Synth(a) => {
            let out = a.out.unwrap_or_else(|| out_root().join("synth"));
            let config = match &a.config {
                Some(p) => SynthConfig::load(p)?,
                None => SynthConfig::default(),
            };
            let config = SynthConfig {
                seed: a.seed.unwrap_or(config.seed),
                ..config
            };
            let counts = cmd_synth(&config, &out)?;
            emit(json, &json!({"out": out, "rows": counts}), || {
                let mut s = format!("wrote {}\n", out.display());
                for (name, n) in &counts {
                    s.push_str(&format!("  {name:<14}{n:>7} rows\n"));
                }
                s
            })
        }
        Command::Train(a) => {
            let (dir, record) = cmd_train(&a)?;
            let s = &record.summary;
            emit(json, &json!({"out": dir, "best_epoch": s.best_epoch, "best_val_macro_f1": s.best_val_macro_f1}), || {
                format!(
                    "wrote {}\nbest epoch {} of {} (validation macro F1 {:.4})\n",
                    dir.display(),
                    s.best_epoch,
                    record.epochs.len(),
                    s.best_val_macro_f1
                )
            })
        }
        Command::Eval(a) => {
            let (path, r) = cmd_eval(&a.model, &a.data, a.scheme.as_deref(), a.report.as_deref())?;
            emit(json, &r, || {
                format!(
                    "{} ({}, n={}): macro F1 {:.4}, accuracy {:.4}\nreport: {}\n",
                    a.data.display(),
                    r.domain.as_str(),
                    r.n,
                    r.macro_f1,
                    r.accuracy,
                    path.display()
                )
            })
        }
        Command::Audit(a) => {
            let out = a.out.unwrap_or_else(|| run_dir_of(&a.model).join("audit"));
            let h = cmd_audit(&a.model, &a.data, &a.knowledge, &out)?;
            emit(json, &h, || {
                format!(
                    "mean ΔY High {:.4}, Low {:.4}, alignment score {:.4}\nwrote {}\n",
                    h.mean_high,
                    h.mean_low,
                    h.alignment_score,
                    out.display()
                )
            })
        }
        Command::Compare(a) => {
            let runs = match &a.manifest {
                Some(p) => Manifest::load(p)?.run_dirs(),
                None => a.runs.clone(),
            };
            let table = cmd_compare(&runs)?;
            if let Some(p) = &a.out {
                write_json(p, &table)?;
            }
            emit(json, &table, || table.render())
        }
        Command::Experiment(a) => {
            let manifest = Manifest::load(&a.manifest)?;
            let table = cmd_experiment(&manifest, |line| {
                if !json {
                    eprintln!("{line}");
                }
            })?;
            emit(json, &table, || table.render())
        }
    }
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    use std::io::Write;
    let s = if json {
        serde_json::to_string_pretty(value)? + "\n"
    } else {
        text()
    };
    match std::io::stdout().lock().write_all(s.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

/// Writes the four splits, scheme, importance matrix and resolved config.
/// Returns `(file name, row count)` pairs.
pub fn cmd_synth(config: &SynthConfig, out: &Path) -> Result<Vec<(String, usize)>> {
    config.validate()?;
    let mut counts = Vec::new();
    for (file, domain, split) in [
        (TRAIN_FILE, DomainTag::InDomain, Split::Train),
        (VAL_FILE, DomainTag::InDomain, Split::Val),
        (TEST_IN_FILE, DomainTag::InDomain, Split::Test),
        (TEST_OOD_FILE, DomainTag::OutOfDomain, Split::Test),
    ] {
        let d = generate(config, domain, split)?;
        d.save(&out.join(file))?;
        counts.push((file.to_string(), d.len()));
    }
    config.scheme().save(&out.join(SCHEME_FILE))?;
    config.importance().save_with_note(
        &out.join(IMPORTANCE_FILE),
        Some("synthetic ground truth: High concepts determine the class, Low concepts are spurious"),
    )?;
    write_json(&out.join("synth_config.json"), config)?;
    Ok(counts)
}

/// Flag values layered over an optional config file over the defaults.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident <- $flag:expr),* $(,)?) => {
            $(if let Some(v) = $flag.clone() { c.$field = v; })*
        };
    }
    set!(
        knowledge <- a.knowledge,
        lambda <- a.lambda,
        phi <- a.phi,
        label_smoothing <- a.ls,
        classifier <- a.classifier,
        align_mode <- a.align_mode,
        seed <- a.seed,
        epochs <- a.epochs,
        batch_size <- a.batch_size,
        lr <- a.lr,
        weight_decay <- a.weight_decay,
        hidden <- a.hidden,
        regime <- a.regime,
    );
    c.smooth_concepts |= a.smooth_concepts;
    c.validate()?;
    Ok(c)
}

/// `baseline`, `aligned` or `random`, from the knowledge source.
pub fn variant_name(k: &KnowledgeSource) -> &'static str {
    match k {
        KnowledgeSource::None => "baseline",
        KnowledgeSource::Path(_) => "aligned",
        KnowledgeSource::Random(_) => "random",
    }
}

fn default_run_name(c: &TrainConfig) -> String {
    format!(
        "{}-{}-lambda{}-seed{}",
        variant_name(&c.knowledge),
        c.classifier.key(),
        c.effective_lambda(),
        c.seed
    )
}

fn load_split(dir: &Path, file: &str, scheme: &ConceptScheme) -> Result<Dataset> {
    load_dataset_with_scheme(&dir.join(file), scheme)
}

pub fn cmd_train(a: &TrainArgs) -> Result<(PathBuf, RunRecord)> {
    let config = resolve_train_config(a)?;
    let out = a.out.clone().unwrap_or_else(|| out_root().join(default_run_name(&config)));
    train_into(&config, &a.data, a.reference.as_deref(), &out)
}

fn train_into(config: &TrainConfig, data: &Path, reference: Option<&Path>, out: &Path) -> Result<(PathBuf, RunRecord)> {
    let scheme = ConceptScheme::load(&data.join(SCHEME_FILE))?;
    let train_set = load_split(data, TRAIN_FILE, &scheme)?;
    let val_set = load_split(data, VAL_FILE, &scheme)?;
    let reference = match &config.knowledge {
        KnowledgeSource::Random(_) => {
            let p = reference.map_or_else(|| data.join(IMPORTANCE_FILE), Path::to_path_buf);
            Some(ImportanceMatrix::load(&p, &scheme)?)
        }
        _ => None,
    };
    let knowledge = config.knowledge.resolve(reference.as_ref(), &scheme)?;
    let output = train(config, &train_set, &val_set, knowledge.as_ref())?;
    save_run(out, &output)?;
    Ok((out.to_path_buf(), output.record))
}

/// The run directory a model path belongs to.
fn run_dir_of(model: &Path) -> PathBuf {
    if model.is_dir() {
        model.to_path_buf()
    } else {
        model.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    }
}

fn model_file(model: &Path) -> PathBuf {
    if model.is_dir() {
        model.join("model.json")
    } else {
        model.to_path_buf()
    }
}

fn run_seed(run_dir: &Path) -> Option<u64> {
    read_json::<TrainConfig>(&run_dir.join("config.json")).ok().map(|c| c.seed)
}

pub fn cmd_eval(model: &Path, data: &Path, scheme: Option<&Path>, report: Option<&Path>) -> Result<(PathBuf, MetricsReport)> {
    let m = CbmModel::load(&model_file(model))?;
    let scheme = match scheme {
        Some(p) => ConceptScheme::load(p)?,
        None => m.scheme.clone(),
    };
    if scheme != m.scheme {
        return Err(Error::config("the given scheme differs from the model's scheme"));
    }
    let d = load_dataset_with_scheme(data, &scheme)?;
    let run = run_dir_of(model);
    let r = evaluate(
        &m,
        &d,
        run_seed(&run),
        json!({"command": "eval", "model": model, "data": data, "ci_method": CI_METHOD}),
    )?;
    let path = report.map_or_else(|| run.join("eval").join(format!("{}.json", d.domain.as_str())), Path::to_path_buf);
    write_json(&path, &r)?;
    Ok((path, r))
}

pub fn cmd_audit(model: &Path, data: &Path, knowledge: &Path, out: &Path) -> Result<crate::eval::HeatmapReport> {
    let m = CbmModel::load(&model_file(model))?;
    let d = load_dataset_with_scheme(data, &m.scheme)?;
    let matrix = ImportanceMatrix::load(knowledge, &m.scheme)?;
    let mut h = audit_delta_y(&m, &d, &matrix)?;
    h.config = json!({"command": "audit", "model": model, "data": data, "knowledge": knowledge});
    h.save_json(&out.join("heatmap.json"))?;
    h.save_csv(&out.join("heatmap.csv"))?;
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub classifier: ClassifierVariant,
    pub lambda: f64,
    pub domain: DomainTag,
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    pub macro_f1_mean: f64,
    pub macro_f1_ci: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub format_version: u32,
    pub ci_method: String,
    pub runs: Vec<PathBuf>,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<10} {:<10} {:>8} {:<14} {:>5}  {}\n",
            "variant", "classifier", "lambda", "domain", "runs", "macro F1 (mean ± 95% CI)"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:<10} {:>8} {:<14} {:>5}  {:.2} ± {:.2}\n",
                r.variant,
                r.classifier.to_string(),
                r.lambda,
                r.domain.as_str(),
                r.n_runs,
                100.0 * r.macro_f1_mean,
                100.0 * r.macro_f1_ci
            ));
        }
        s
    }

    pub fn row(&self, variant: &str, domain: DomainTag) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.variant == variant && r.domain == domain)
    }
}

/// Groups evaluated runs by (variant, classifier, λ) and domain.
pub fn cmd_compare(runs: &[PathBuf]) -> Result<CompareTable> {
    if runs.is_empty() {
        return Err(Error::usage("compare needs at least one run directory"));
    }
    type Key = (String, ClassifierVariant, u64, DomainTag);
    let mut groups: BTreeMap<Key, Vec<(u64, f64)>> = BTreeMap::new();
    let mut scheme: Option<ConceptScheme> = None;
    for dir in runs {
        let config: TrainConfig = read_json(&dir.join("config.json"))?;
        let model = CbmModel::load(&dir.join("model.json"))?;
        match &scheme {
            None => scheme = Some(model.scheme),
            Some(s) if *s != model.scheme => {
                return Err(Error::config(format!("{} uses a different concept scheme", dir.display())));
            }
            Some(_) => {}
        }
        let eval_dir = dir.join("eval");
        let entries = std::fs::read_dir(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
        let mut reports: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        reports.sort();
        if reports.is_empty() {
            return Err(Error::usage(format!("{} has no evaluation reports", eval_dir.display())));
        }
        for p in reports {
            let r: MetricsReport = read_json(&p)?;
            let key = (
                variant_name(&config.knowledge).to_string(),
                config.classifier,
                config.effective_lambda().to_bits(),
                r.domain,
            );
            groups.entry(key).or_default().push((config.seed, r.macro_f1));
        }
    }
    let mut rows = Vec::new();
    for ((variant, classifier, lambda, domain), vals) in groups {
        let f1: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let ci = confidence_interval(&f1).map_err(|_| {
            Error::usage(format!(
                "group {variant}/{classifier}/λ={}/{} has {} run(s); a confidence interval needs at least 2 seeds",
                f64::from_bits(lambda),
                domain.as_str(),
                f1.len()
            ))
        })?;
        let seeds: BTreeSet<u64> = vals.iter().map(|v| v.0).collect();
        rows.push(CompareRow {
            variant,
            classifier,
            lambda: f64::from_bits(lambda),
            domain,
            n_runs: f1.len(),
            seeds: seeds.into_iter().collect(),
            macro_f1_mean: ci.mean,
            macro_f1_ci: ci.half_width,
        });
    }
    Ok(CompareTable {
        format_version: FORMAT_VERSION,
        ci_method: CI_METHOD.to_string(),
        runs: runs.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRun {
    pub name: String,
    #[serde(default)]
    pub config: TrainConfig,
    /// Dataset directory; the manifest's `data` when omitted.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

/// A list of named training runs sharing an output directory. Relative
/// paths are resolved against the manifest's own directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub out_dir: PathBuf,
    pub data: PathBuf,
    pub runs: Vec<ManifestRun>,
    #[serde(skip)]
    base: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Manifest = read_json(path)?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::config(format!("unsupported manifest format_version {}", self.format_version)));
        }
        if self.runs.is_empty() {
            return Err(Error::config("manifest lists no runs"));
        }
        let mut seen = BTreeSet::new();
        for r in &self.runs {
            if r.name.is_empty() || r.name.contains(['/', '\\']) {
                return Err(Error::config(format!("invalid run name {:?}", r.name)));
            }
            if !seen.insert(&r.name) {
                return Err(Error::config(format!("duplicate run name {:?}", r.name)));
            }
            r.config.validate()?;
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn run_dirs(&self) -> Vec<PathBuf> {
        self.runs.iter().map(|r| self.out_dir().join(&r.name)).collect()
    }

    fn data_dir(&self, run: &ManifestRun) -> PathBuf {
        self.resolve(run.data.as_deref().unwrap_or(&self.data))
    }

    /// Knowledge paths in run configs are relative to the manifest too.
    fn run_config(&self, run: &ManifestRun) -> TrainConfig {
        let mut c = run.config.clone();
        if let KnowledgeSource::Path(p) = &c.knowledge {
            c.knowledge = KnowledgeSource::Path(self.resolve(Path::new(p)).to_string_lossy().into_owned());
        }
        c
    }

    /// Every referenced file must exist before anything runs.
    fn check_inputs(&self) -> Result<()> {
        for r in &self.runs {
            let data = self.data_dir(r);
            let mut needed = vec![data.join(SCHEME_FILE), data.join(TRAIN_FILE), data.join(VAL_FILE)];
            match self.run_config(r).knowledge {
                KnowledgeSource::Path(p) => needed.push(PathBuf::from(p)),
                KnowledgeSource::Random(_) => needed.push(data.join(IMPORTANCE_FILE)),
                KnowledgeSource::None => {}
            }
            for p in needed {
                if !p.is_file() {
                    return Err(Error::config(format!("run {:?}: missing input {}", r.name, p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Trains each run, evaluates it on whichever test splits exist, then
/// compares. `log` receives one progress line per finished run.
pub fn cmd_experiment(manifest: &Manifest, mut log: impl FnMut(&str)) -> Result<CompareTable> {
    manifest.check_inputs()?;
    let dirs = manifest.run_dirs();
    for (run, dir) in manifest.runs.iter().zip(&dirs) {
        let data = manifest.data_dir(run);
        let config = manifest.run_config(run);
        let (_, record) = train_into(&config, &data, None, dir)?;
        let mut line = format!("{}: best epoch {}", run.name, record.summary.best_epoch);
        for file in [TEST_IN_FILE, TEST_OOD_FILE] {
            let p = data.join(file);
            if p.is_file() {
                let (_, r) = cmd_eval(dir, &p, None, None)?;
                line.push_str(&format!(", {} F1 {:.4}", r.domain.as_str(), r.macro_f1));
            }
        }
        log(&line);
    }
    let table = cmd_compare(&dirs)?;
    write_json(&manifest.out_dir().join("comparison.json"), &table)?;
    Ok(table)
}
