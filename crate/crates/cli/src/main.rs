mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use nopvis::detector::{Optimizer, TrainConfig};
use nopvis::harness::{
    evaluate, generate_corpus, load_corpus, run_attack_experiment, run_sweep, spearman, split,
    train_detector, write_corpus, AttackConfig, CorpusSpec, LabeledApp, MetricsRow,
};
use nopvis::inject::{apply_attack, InjectionPlan, MethodSelector};
use nopvis::interp::check_equivalence;
use nopvis::opcodes::DEFAULT_MAX_LEN;
use nopvis::smali::{load_app, write_app};
use nopvis::{
    ccc, extract_opcode_sequence, manifest_from_diff, parse_class, AttackKind, AttackVariant,
    CccWeights, DetectorConfig, DetectorModel, InjectError, InjectionManifest, OpcodeTable,
    Verdict,
};

use output::{Format, Table};

#[derive(Parser)]
#[command(
    name = "nopvis",
    version,
    about = "NOP-style Smali attacks, their visibility and their evasion rate"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Output file or directory; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Malware iff p_malware >= threshold.
    #[arg(long, global = true, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Nop,
    Sio,
    Imi,
}

impl From<Variant> for AttackKind {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Nop => AttackKind::SimpleNop,
            Variant::Sio => AttackKind::Sio,
            Variant::Imi => AttackKind::Imi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum SplitPart {
    All,
    Train,
    Test,
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// Corpus root with `benign/` and `malware/` app directories.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, value_enum, default_value_t = SplitPart::Test)]
    split: SplitPart,
}

#[derive(Subcommand)]
enum Command {
    /// Parse one `.smali` file and summarize its methods.
    Parse { file: PathBuf },
    /// Extract the opcode-id sequence of an app directory.
    Extract {
        app: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Inject an attack into every method of an app directory.
    Inject {
        app: PathBuf,
        #[arg(long, value_enum)]
        variant: Variant,
        /// Comma-separated payload opcodes for sio/imi.
        #[arg(long, value_delimiter = ',', default_values_t = ["add-int".to_string(), "add-int".to_string()])]
        payload: Vec<String>,
        #[arg(long, default_value_t = nopvis::inject::DEFAULT_NOP_COUNT)]
        nop_count: usize,
        /// Only inject methods starting within this many opcodes.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Compute CCC from an injection manifest, or from an original and a
    /// modified class file.
    Ccc {
        #[arg(
            long,
            required_unless_present = "original",
            conflicts_with = "original"
        )]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "modified")]
        original: Option<PathBuf>,
        #[arg(long, requires = "original")]
        modified: Option<PathBuf>,
        /// Comma-separated clarity, complexity and connection weights.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        weights: Option<Vec<f64>>,
    },
    /// Generate a synthetic labelled corpus.
    GenCorpus {
        #[arg(long, default_value_t = 100)]
        apps_per_class: usize,
        #[arg(long, default_value_t = 20)]
        methods_per_app: usize,
    },
    /// Train the detector on the training split of a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 512)]
        max_len: usize,
        #[arg(long)]
        sgd: bool,
    },
    /// Score a trained model on a corpus split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: CorpusArgs,
    },
    /// Attack every malware app of a split and report metrics and CCC.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: CorpusArgs,
        #[arg(long, value_enum)]
        variant: Variant,
        #[arg(long, default_value_t = 2)]
        payload_len: usize,
        #[arg(long, default_value_t = 2)]
        sweeps: usize,
        /// Also write one JSON line per attacked app here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// SIO with increasing payload lengths.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: CorpusArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        sweeps: usize,
    },
    /// Check that methods with the same name compute the same function.
    Verify {
        original: PathBuf,
        modified: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Input(anyhow::Error),
    Degenerate(String),
    NotEquivalent(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

impl From<nopvis::SmaliError> for Failure {
    fn from(e: nopvis::SmaliError) -> Self {
        Failure::Input(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Degenerate(msg)) => {
            eprintln!("degenerate: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::NotEquivalent(msg)) => {
            eprintln!("not equivalent: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let g = cli.global;
    if !(0.0..=1.0).contains(&g.threshold) {
        return Err(anyhow::anyhow!("--threshold must lie in [0, 1]").into());
    }
    match cli.command {
        Command::Parse { file } => parse(&g, &file),
        Command::Extract { app, max_len } => extract(&g, &app, max_len),
        Command::Inject {
            app,
            variant,
            payload,
            nop_count,
            horizon,
        } => inject(&g, &app, variant.into(), &payload, nop_count, horizon),
        Command::Ccc {
            manifest,
            original,
            modified,
            weights,
        } => {
            let manifest = match (manifest, original, modified) {
                (Some(path), _, _) => serde_json::from_str(&read(&path)?)
                    .with_context(|| format!("decoding {}", path.display()))?,
                (None, Some(a), Some(b)) => {
                    let (a, b) = (parse_class(&read(&a)?)?, parse_class(&read(&b)?)?);
                    manifest_from_diff(b.class_name.clone(), &a, &b)
                }
                _ => unreachable!("clap enforces one manifest source"),
            };
            ccc_cmd(&g, &manifest, weights)
        }
        Command::GenCorpus {
            apps_per_class,
            methods_per_app,
        } => gen_corpus(&g, apps_per_class, methods_per_app),
        Command::Train {
            corpus,
            train_fraction,
            epochs,
            learning_rate,
            batch_size,
            max_len,
            sgd,
        } => {
            let cfg = TrainConfig {
                epochs,
                learning_rate,
                batch_size,
                optimizer: if sgd {
                    Optimizer::Sgd
                } else {
                    Optimizer::adam()
                },
                seed: g.seed,
            };
            train(&g, &corpus, train_fraction, max_len, &cfg)
        }
        Command::Eval { model, data } => eval(&g, &model, &data),
        Command::Attack {
            model,
            data,
            variant,
            payload_len,
            sweeps,
            trace,
        } => attack(
            &g,
            &model,
            &data,
            variant.into(),
            payload_len,
            sweeps,
            trace.as_deref(),
        ),
        Command::Sweep {
            model,
            data,
            lengths,
            sweeps,
        } => sweep(&g, &model, &data, &lengths, sweeps),
        Command::Verify {
            original,
            modified,
            method,
            trials,
        } => verify(&g, &original, &modified, method.as_deref(), trials),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn parse(g: &Global, file: &Path) -> Outcome {
    let class = parse_class(&read(file)?).with_context(|| format!("parsing {}", file.display()))?;
    let mut table = Table::new(
        "methods",
        &["class", "method", "descriptor", "registers", "instructions"],
    );
    for m in &class.methods {
        table.row(vec![
            class.class_name.clone(),
            m.name.clone(),
            m.descriptor.clone(),
            m.registers_declared
                .map(|r| r.to_string())
                .unwrap_or_default(),
            m.instruction_count().to_string(),
        ]);
    }
    let doc = json!({
        "class": class.class_name,
        "super": class.super_name,
        "lines": class.line_count(),
        "methods": class.methods.iter().map(|m| json!({
            "name": m.name,
            "descriptor": m.descriptor,
            "registers": m.registers_declared,
            "instruction_count": m.instruction_count(),
        })).collect::<Vec<_>>(),
    });
    output::emit(g, &doc, &table)
}

fn extract(g: &Global, app: &Path, max_len: usize) -> Outcome {
    if max_len == 0 {
        return Err(anyhow::anyhow!("--max-len must be positive").into());
    }
    let app = load_app(app)?;
    let table = OpcodeTable::dalvik();
    let seq = extract_opcode_sequence(&app, &table, max_len);
    let mut t = Table::new("opcodes", &["position", "id", "mnemonic"]);
    for (i, &id) in seq.ids.iter().enumerate() {
        let name = match id {
            nopvis::opcodes::PADDING_ID => "<pad>",
            nopvis::opcodes::UNKNOWN_ID => "<unknown>",
            _ => table.mnemonic(id).unwrap_or("<unknown>"),
        };
        t.row(vec![i.to_string(), id.to_string(), name.to_string()]);
    }
    output::emit(g, &serde_json::to_value(&seq).expect("serializable"), &t)
}

fn inject(
    g: &Global,
    app_dir: &Path,
    kind: AttackKind,
    payload: &[String],
    nop_count: usize,
    horizon: Option<usize>,
) -> Outcome {
    let Some(out) = &g.out else {
        return Err(anyhow::anyhow!("inject writes a directory; pass --out").into());
    };
    let app = load_app(app_dir)?;
    let variant = match kind {
        AttackKind::SimpleNop => AttackVariant::simple_nop(nop_count),
        _ => AttackVariant {
            kind,
            payload_opcodes: payload.to_vec(),
            nop_count: 0,
        },
    };
    let plan = InjectionPlan {
        method_selector: MethodSelector {
            horizon,
            ..MethodSelector::all()
        },
        ..InjectionPlan::new(variant, g.seed)
    };
    let outcome = match apply_attack(&app, &plan) {
        Ok(o) => o,
        Err(InjectError::EmptyManifest { skipped }) => {
            return Err(Failure::Degenerate(format!(
                "empty manifest: all {} methods were skipped",
                skipped.len()
            )))
        }
        Err(e) => return Err(anyhow::Error::from(e).into()),
    };
    write_app(&outcome.app, out)?;
    let manifest_path = out.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&outcome.manifest).expect("serializable"),
    )
    .with_context(|| format!("writing {}", manifest_path.display()))?;
    let skipped: String = outcome
        .skipped
        .iter()
        .map(|s| serde_json::to_string(s).expect("serializable") + "\n")
        .collect();
    fs::write(out.join("skipped.jsonl"), skipped).context("writing skip report")?;
    println!(
        "{}",
        json!({"sites": outcome.manifest.sites.len(), "skipped": outcome.skipped.len(), "out": out})
    );
    Ok(())
}

fn ccc_cmd(g: &Global, manifest: &InjectionManifest, weights: Option<Vec<f64>>) -> Outcome {
    let weights = match weights.as_deref() {
        None => CccWeights::default(),
        Some(&[a, b, c]) => CccWeights::new(a, b, c).map_err(anyhow::Error::from)?,
        Some(_) => return Err(anyhow::anyhow!("--weights takes three values").into()),
    };
    let report = match ccc(manifest, weights) {
        Ok(r) => r,
        Err(e @ nopvis::MetricError::InvalidWeights(..)) => {
            return Err(anyhow::Error::from(e).into())
        }
        Err(e) => return Err(Failure::Degenerate(e.to_string())),
    };
    let mut t = Table::new("ccc", &["app_id", "sites", "c1", "c2", "c3", "ccc"]);
    t.row(vec![
        manifest.app_id.clone(),
        manifest.sites.len().to_string(),
        report.c1.to_string(),
        report.c2.to_string(),
        report.c3.to_string(),
        report.ccc.to_string(),
    ]);
    output::emit(g, &serde_json::to_value(report).expect("serializable"), &t)
}

fn gen_corpus(g: &Global, apps_per_class: usize, methods_per_app: usize) -> Outcome {
    let Some(out) = &g.out else {
        return Err(anyhow::anyhow!("gen-corpus writes a directory; pass --out").into());
    };
    let corpus = generate_corpus(&CorpusSpec::new(g.seed, apps_per_class, methods_per_app))
        .map_err(anyhow::Error::from)?;
    write_corpus(&corpus, out).map_err(anyhow::Error::from)?;
    println!("{}", json!({"apps": corpus.len(), "out": out}));
    Ok(())
}

fn load_split(g: &Global, data: &CorpusArgs) -> anyhow::Result<Vec<LabeledApp>> {
    let corpus = load_corpus(&data.corpus)?;
    if !(0.0..=1.0).contains(&data.train_fraction) {
        bail!("--train-fraction must lie in [0, 1]");
    }
    let (train, test) = split(&corpus, data.train_fraction, g.seed);
    let part = match data.split {
        SplitPart::All => corpus,
        SplitPart::Train => train,
        SplitPart::Test => test,
    };
    if part.is_empty() {
        bail!("the selected split is empty");
    }
    Ok(part)
}

fn load_model(path: &Path) -> anyhow::Result<DetectorModel> {
    DetectorModel::from_checkpoint_json(&read(path)?)
        .with_context(|| format!("loading {}", path.display()))
}

const METRIC_COLUMNS: [&str; 10] = [
    "set",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "tp",
    "fp",
    "tn",
    "fn",
    "degenerate",
];

fn metric_row(name: &str, m: &MetricsRow) -> Vec<String> {
    vec![
        name.to_string(),
        m.accuracy.to_string(),
        m.precision.to_string(),
        m.recall.to_string(),
        m.f1.to_string(),
        m.tp.to_string(),
        m.fp.to_string(),
        m.tn.to_string(),
        m.fn_.to_string(),
        m.degenerate.to_string(),
    ]
}

fn degenerate_check(rows: &[(&str, &MetricsRow)]) -> Outcome {
    let bad: Vec<&str> = rows
        .iter()
        .filter(|(_, m)| m.degenerate)
        .map(|(n, _)| *n)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Degenerate(format!(
            "zero denominator in metrics for {}",
            bad.join(", ")
        )))
    }
}

fn train(
    g: &Global,
    corpus: &Path,
    train_fraction: f64,
    max_len: usize,
    cfg: &TrainConfig,
) -> Outcome {
    let Some(out) = &g.out else {
        return Err(anyhow::anyhow!("train writes a checkpoint; pass --out").into());
    };
    let all = load_corpus(corpus).map_err(anyhow::Error::from)?;
    let (train_set, test_set) = split(&all, train_fraction, g.seed);
    let config = DetectorConfig {
        max_len,
        ..DetectorConfig::desk(g.seed)
    };
    let (model, losses) = train_detector(&train_set, config, cfg).map_err(anyhow::Error::from)?;
    fs::write(out, model.checkpoint_json())
        .with_context(|| format!("writing {}", out.display()))?;
    let train_m = evaluate(&model, &train_set, g.threshold).map_err(anyhow::Error::from)?;
    let test_m = if test_set.is_empty() {
        None
    } else {
        Some(evaluate(&model, &test_set, g.threshold).map_err(anyhow::Error::from)?)
    };
    println!(
        "{}",
        json!({
            "checkpoint": out,
            "train": train_m,
            "test": test_m,
            "final_loss": losses.last(),
        })
    );
    Ok(())
}

fn eval(g: &Global, model: &Path, data: &CorpusArgs) -> Outcome {
    let model = load_model(model)?;
    let part = load_split(g, data)?;
    let m = evaluate(&model, &part, g.threshold).map_err(anyhow::Error::from)?;
    let mut t = Table::new("metrics", &METRIC_COLUMNS);
    t.row(metric_row("clean", &m));
    output::emit(g, &json!({"clean": m}), &t)?;
    degenerate_check(&[("clean", &m)])
}

fn attack(
    g: &Global,
    model: &Path,
    data: &CorpusArgs,
    kind: AttackKind,
    payload_len: usize,
    sweeps: usize,
    trace: Option<&Path>,
) -> Outcome {
    let model = load_model(model)?;
    let part = load_split(g, data)?;
    let clean = evaluate(&model, &part, g.threshold).map_err(anyhow::Error::from)?;
    let cfg = AttackConfig {
        payload_len,
        sweeps,
        ..AttackConfig::new(kind, g.threshold, g.seed)
    };
    let report = match run_attack_experiment(&model, &part, &cfg) {
        Ok(r) => r,
        Err(nopvis::HarnessError::EmptyManifest) => {
            return Err(Failure::Degenerate("no method could be injected".into()))
        }
        Err(e) => return Err(anyhow::Error::from(e).into()),
    };
    if let Some(path) = trace {
        let lines: String = report
            .apps
            .iter()
            .map(|a| serde_json::to_string(a).expect("serializable") + "\n")
            .collect();
        fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?;
    }
    let mut t = Table::new(
        "attack",
        &[&METRIC_COLUMNS[..], &["c1", "c2", "c3", "ccc"]].concat(),
    );
    let mut clean_row = metric_row("clean", &clean);
    clean_row.extend(["", "", "", ""].map(String::from));
    t.row(clean_row);
    let mut row = metric_row(kind.name(), &report.metrics);
    let c = report.mean_ccc;
    row.extend([c.c1, c.c2, c.c3, c.ccc].map(|x| x.to_string()));
    t.row(row);
    let doc = json!({
        "clean": clean,
        "attacked": report.metrics,
        "variant": kind.name(),
        "mean_ccc": report.mean_ccc,
        "evaded": report.apps.iter().filter(|a| a.evaded).count(),
        "attacked_apps": report.apps.len(),
        "inconsistencies": report.apps.iter().map(|a| a.inconsistencies).sum::<usize>(),
    });
    output::emit(g, &doc, &t)?;
    degenerate_check(&[("clean", &clean), (kind.name(), &report.metrics)])
}

fn sweep(g: &Global, model: &Path, data: &CorpusArgs, lengths: &[usize], sweeps: usize) -> Outcome {
    let model = load_model(model)?;
    let part = load_split(g, data)?;
    let base = AttackConfig {
        sweeps,
        ..AttackConfig::new(AttackKind::Sio, g.threshold, g.seed)
    };
    let rows = run_sweep(&model, &part, lengths, &base).map_err(anyhow::Error::from)?;
    let xs: Vec<f64> = rows.iter().map(|r| r.injected_length as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.recall).collect();
    let rho = spearman(&xs, &ys);
    let mut t = Table::new("sweep", &["injected_length", "mean_ccc", "recall"]);
    for r in &rows {
        t.row(vec![
            r.injected_length.to_string(),
            r.mean_ccc.to_string(),
            r.recall.to_string(),
        ]);
    }
    t.note(format!(
        "seed={} spearman={}",
        g.seed,
        rho.map_or("undefined".to_string(), |r| r.to_string())
    ));
    let doc = json!({"seed": g.seed, "rows": rows, "spearman": rho});
    output::emit(g, &doc, &t)?;
    match rho {
        Some(_) => Ok(()),
        None if rows.len() < 2 => Ok(()),
        None => Err(Failure::Degenerate(
            "spearman undefined: recall is constant".into(),
        )),
    }
}

fn verify(
    g: &Global,
    original: &Path,
    modified: &Path,
    method: Option<&str>,
    trials: usize,
) -> Outcome {
    let a =
        parse_class(&read(original)?).with_context(|| format!("parsing {}", original.display()))?;
    let b =
        parse_class(&read(modified)?).with_context(|| format!("parsing {}", modified.display()))?;
    let mut t = Table::new("verify", &["method", "verdict", "cases", "witness"]);
    let mut verdicts = Vec::new();
    let mut failed = Vec::new();
    for m in &a.methods {
        if method.is_some_and(|n| n != m.name) {
            continue;
        }
        let Some(other) = b
            .methods
            .iter()
            .find(|o| o.name == m.name && o.descriptor == m.descriptor)
        else {
            return Err(anyhow::anyhow!(
                "{} has no method {}{}",
                modified.display(),
                m.name,
                m.descriptor
            )
            .into());
        };
        let v = check_equivalence(m, other, trials, g.seed);
        let (name, cases, witness) = match &v {
            Verdict::Equal { cases } => ("equal", cases.to_string(), String::new()),
            Verdict::NotEqual {
                args,
                original,
                modified,
            } => {
                failed.push(m.name.clone());
                (
                    "not_equal",
                    String::new(),
                    format!("args={args:?} original={original:?} modified={modified:?}"),
                )
            }
            Verdict::Abstain { reason } => ("abstain", String::new(), reason.clone()),
        };
        t.row(vec![
            m.name.clone(),
            name.into(),
            cases.clone(),
            witness.clone(),
        ]);
        verdicts
            .push(json!({"method": m.name, "verdict": name, "cases": cases, "detail": witness}));
    }
    if verdicts.is_empty() {
        return Err(anyhow::anyhow!("no matching methods").into());
    }
    output::emit(g, &json!(verdicts), &t)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::NotEquivalent(failed.join(", ")))
    }
}
