//! Synthetic corpus, experiment drivers and evaluation metrics.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ccc::{ccc, CccReport, CccWeights};
use crate::detector::{
    init_model, label_for, train_with, DetectorConfig, DetectorModel, TrainConfig, MALWARE,
};
use crate::error::{HarnessError, SmaliError};
use crate::inject::{
    apply_attack, AttackKind, AttackVariant, InjectError, InjectionPlan, MethodSelector,
};
use crate::opcodes::{extract_opcode_sequence, OpcodeSequence, OpcodeTable};
use crate::optimizer::{
    build_attack_template, consistency_mismatches, optimize_placeholders, realize, whitelist_ids,
};
use crate::smali::{load_app, parse_class, write_app, App};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledApp {
    pub app: App,
    pub label: u8,
}

/// Opcode motifs planted by the generator.
///
/// Every app carries between one and `max_types` distinct motifs of its own
/// class, each in its own method. Apps with at least two own motifs get one
/// motif of the other class with probability `confounder_rate`, so neither
/// kind of evidence is decisive on its own. Benign motifs overlap the
/// injectable vocabulary; malware motifs do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub benign: Vec<Vec<String>>,
    pub malware: Vec<Vec<String>>,
    pub max_types: usize,
    pub confounder_rate: f64,
}

fn owned(rows: &[&[&str]]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| r.iter().map(|s| s.to_string()).collect())
        .collect()
}

impl Default for MotifSpec {
    fn default() -> Self {
        MotifSpec {
            benign: owned(&[
                &["const", "const", "mul-int", "add-int"],
                &["const", "if-eqz", "and-int", "or-int"],
                &["nop", "nop", "nop"],
                &["xor-int", "and-int", "or-int", "mul-int"],
            ]),
            malware: owned(&[
                &["invoke-static", "move-result", "xor-int/lit8", "aput-byte"],
                &[
                    "const-string",
                    "invoke-static",
                    "move-result-object",
                    "check-cast",
                ],
                &["rem-int", "shl-int/lit8", "ushr-int", "new-array"],
                &["sget", "if-nez", "aput-byte", "sput"],
            ]),
            max_types: 3,
            confounder_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub apps_per_class: usize,
    pub methods_per_app: usize,
    pub motifs: MotifSpec,
}

impl CorpusSpec {
    pub fn new(seed: u64, apps_per_class: usize, methods_per_app: usize) -> Self {
        CorpusSpec {
            seed,
            apps_per_class,
            methods_per_app,
            motifs: MotifSpec::default(),
        }
    }
}

/// Filler opcodes shared by both classes. Every motif opcode appears here
/// too, so only motif order carries class evidence.
const BACKGROUND: &[&str] = &[
    "add-int",
    "sub-int",
    "mul-int",
    "and-int",
    "or-int",
    "xor-int",
    "mul-int/lit8",
    "add-int/2addr",
    "add-int/lit8",
    "xor-int/lit8",
    "shl-int/lit8",
    "rem-int",
    "ushr-int",
    "move",
    "const/4",
    "const/16",
    "const",
    "neg-int",
    "nop",
    "sget",
    "sput",
    "invoke-static",
    "move-result",
    "if-gez",
    "if-eqz",
    "if-nez",
];

/// Instruction counts per generated method.
pub const METHOD_SIZE: std::ops::RangeInclusive<usize> = 10..=14;

struct MethodGen<'a> {
    rng: &'a mut ChaCha8Rng,
    locals: u32,
    uses_label: bool,
}

impl MethodGen<'_> {
    fn local(&mut self) -> String {
        format!("v{}", self.rng.gen_range(0..self.locals))
    }

    fn source(&mut self) -> String {
        match self.rng.gen_range(0..self.locals + 2) {
            n if n < self.locals => format!("v{n}"),
            n => format!("p{}", n - self.locals),
        }
    }

    fn lit(&mut self, max: u32) -> String {
        format!("0x{:x}", self.rng.gen_range(1..max))
    }

    /// Renders `op` with plausible operands.
    fn render(&mut self, op: &str) -> String {
        match op {
            "nop" => "nop".to_string(),
            "const/4" => format!("const/4 {}, {}", self.local(), self.lit(8)),
            "const/16" => format!("const/16 {}, {}", self.local(), self.lit(0x100)),
            "const" => format!("const {}, {}", self.local(), self.lit(0x10000)),
            "const-string" => format!(
                "const-string {}, \"k{}\"",
                self.local(),
                self.rng.gen_range(0..100)
            ),
            "move" | "neg-int" => format!("{op} {}, {}", self.local(), self.source()),
            "move-result" | "move-result-object" => format!("{op} {}", self.local()),
            "sget" | "sput" => format!("{op} {}, Lcom/synth/State;->counter:I", self.local()),
            "check-cast" => format!("check-cast {}, Ljava/lang/String;", self.local()),
            "new-array" => format!("new-array {}, {}, [B", self.local(), self.source()),
            "invoke-static" => format!(
                "invoke-static {{{}, {}}}, Lcom/synth/Util;->mix(II)I",
                self.source(),
                self.source()
            ),
            "aput-byte" => format!(
                "aput-byte {}, {}, {}",
                self.local(),
                self.local(),
                self.source()
            ),
            _ if op.starts_with("if-") => {
                self.uses_label = true;
                format!("{op} {}, :cond_0", self.source())
            }
            _ if op.ends_with("/2addr") => format!("{op} {}, {}", self.local(), self.source()),
            _ if op.contains("/lit") => format!(
                "{op} {}, {}, {}",
                self.local(),
                self.source(),
                self.lit(0x40)
            ),
            _ => format!(
                "{op} {}, {}, {}",
                self.local(),
                self.source(),
                self.source()
            ),
        }
    }
}

fn generate_method(rng: &mut ChaCha8Rng, index: usize, motif: Option<&[String]>, out: &mut String) {
    let locals = rng.gen_range(2..=4u32);
    let size = rng.gen_range(METHOD_SIZE);
    let mut g = MethodGen {
        rng,
        locals,
        uses_label: false,
    };
    let mut body: Vec<String> = (0..locals)
        .map(|r| {
            if r < 2 {
                format!("move v{r}, p{r}")
            } else {
                format!("const/4 v{r}, 0x0")
            }
        })
        .collect();
    let motif_len = motif.map_or(0, <[String]>::len);
    let filler = size - 1 - body.len() - motif_len;
    let insert_at = g.rng.gen_range(0..=filler);
    for i in 0..=filler {
        if i == insert_at {
            for op in motif.unwrap_or_default() {
                body.push(g.render(op));
            }
        }
        if i < filler {
            let op = BACKGROUND[g.rng.gen_range(0..BACKGROUND.len())];
            body.push(g.render(op));
        }
    }
    let ret = format!("v{}", g.rng.gen_range(0..locals));
    let _ = writeln!(out, ".method public static m{index}(II)I");
    let _ = writeln!(out, "    .registers {}", locals + 2);
    let _ = writeln!(out);
    let _ = writeln!(out, "    .line {}", 10 + index * 20);
    for line in body {
        let _ = writeln!(out, "    {line}");
    }
    if g.uses_label {
        let _ = writeln!(out);
        let _ = writeln!(out, "    :cond_0");
    }
    let _ = writeln!(out, "    return {ret}");
    let _ = writeln!(out, ".end method");
}

fn generate_app(spec: &CorpusSpec, label: u8, index: usize) -> Result<App, SmaliError> {
    let kind = if label == MALWARE {
        "malware"
    } else {
        "benign"
    };
    let app_seed = spec
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64) << 1 | u64::from(label));
    let mut rng = ChaCha8Rng::seed_from_u64(app_seed);
    let motifs = if label == MALWARE {
        &spec.motifs.malware
    } else {
        &spec.motifs.benign
    };
    let other = if label == MALWARE {
        &spec.motifs.benign
    } else {
        &spec.motifs.malware
    };
    let n = spec.methods_per_app;
    let mut own: Vec<usize> = (0..motifs.len()).collect();
    own.shuffle(&mut rng);
    own.truncate(rng.gen_range(1..=spec.motifs.max_types.clamp(1, motifs.len().max(1))));
    let mut planted: Vec<&[String]> = own.iter().map(|&k| motifs[k].as_slice()).collect();
    if planted.len() >= 2 && !other.is_empty() && rng.gen_bool(spec.motifs.confounder_rate) {
        planted.push(&other[rng.gen_range(0..other.len())]);
    }
    let mut carriers: Vec<usize> = (0..n).collect();
    carriers.shuffle(&mut rng);
    planted.truncate(n);

    let classes = n.div_ceil(8).max(1);
    let mut parsed = Vec::with_capacity(classes);
    for c in 0..classes {
        let name = format!("Lcom/synth/{kind}{index:04}/C{c};");
        let mut text = String::new();
        let _ = writeln!(text, ".class public {name}");
        let _ = writeln!(text, ".super Ljava/lang/Object;");
        let _ = writeln!(text, ".source \"C{c}.java\"");
        let _ = writeln!(text);
        let _ = writeln!(text);
        let _ = writeln!(text, "# direct methods");
        for m in (c * 8..(c + 1) * 8).filter(|&m| m < n) {
            let motif = carriers[..planted.len()]
                .iter()
                .position(|&c| c == m)
                .map(|k| planted[k]);
            generate_method(&mut rng, m, motif, &mut text);
            let _ = writeln!(text);
        }
        parsed.push(parse_class(&text)?);
    }
    Ok(App::new(format!("{kind}-{index:04}"), parsed))
}

/// Benign apps first, then malware; deterministic per seed.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<LabeledApp>, HarnessError> {
    if spec.apps_per_class == 0 {
        return Err(HarnessError::EmptyCorpus);
    }
    if spec.methods_per_app == 0 {
        return Err(HarnessError::InvalidArgument(
            "methods_per_app must be positive".into(),
        ));
    }
    let mut out = Vec::with_capacity(2 * spec.apps_per_class);
    for label in [0u8, 1] {
        for i in 0..spec.apps_per_class {
            out.push(LabeledApp {
                app: generate_app(spec, label, i)?,
                label,
            });
        }
    }
    Ok(out)
}

fn label_dir(label: u8) -> &'static str {
    if label == MALWARE {
        "malware"
    } else {
        "benign"
    }
}

/// Writes `<root>/{benign,malware}/<app id>/...`.
pub fn write_corpus(corpus: &[LabeledApp], root: &Path) -> Result<(), HarnessError> {
    for la in corpus {
        write_app(&la.app, &root.join(label_dir(la.label)).join(&la.app.id))?;
    }
    Ok(())
}

/// Reads a tree written by [`write_corpus`]. Apps are sorted by id within
/// each label.
pub fn load_corpus(root: &Path) -> Result<Vec<LabeledApp>, HarnessError> {
    let mut out = Vec::new();
    for label in [0u8, 1] {
        let dir = root.join(label_dir(label));
        if !dir.is_dir() {
            continue;
        }
        let mut entries: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|source| HarnessError::Io {
                path: dir.clone(),
                source,
            })?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for path in entries {
            out.push(LabeledApp {
                app: load_app(&path)?,
                label,
            });
        }
    }
    if out.is_empty() {
        return Err(HarnessError::EmptyCorpus);
    }
    Ok(out)
}

/// Seeded shuffle, then the first `train_fraction` goes to training.
pub fn split(
    corpus: &[LabeledApp],
    train_fraction: f64,
    seed: u64,
) -> (Vec<LabeledApp>, Vec<LabeledApp>) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((corpus.len() as f64) * train_fraction).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    (pick(&idx[..cut]), pick(&idx[cut..]))
}

pub fn sequences(corpus: &[LabeledApp], max_len: usize) -> Vec<(OpcodeSequence, u8)> {
    let table = OpcodeTable::dalvik();
    corpus
        .iter()
        .map(|la| (extract_opcode_sequence(&la.app, &table, max_len), la.label))
        .collect()
}

/// Initializes a model from `config` and trains it on `train`. Returns the
/// per-epoch training loss alongside.
pub fn train_detector(
    train: &[LabeledApp],
    config: DetectorConfig,
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<f64>), HarnessError> {
    if train.is_empty() {
        return Err(HarnessError::EmptyCorpus);
    }
    let data = sequences(train, config.max_len);
    let model = init_model(config)?;
    Ok(train_with(&model, &data, cfg)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl MetricsRow {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: usize, den: usize| {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let accuracy = ratio(tp + tn, tp + fp + tn + fn_);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            degenerate = true;
            0.0
        };
        MetricsRow {
            accuracy,
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
            degenerate,
        }
    }

    pub fn from_predictions(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (truth, predicted) in pairs {
            match (truth == MALWARE, predicted == MALWARE) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
                (true, false) => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }
}

pub fn evaluate_sequences(
    model: &DetectorModel,
    data: &[(OpcodeSequence, u8)],
    threshold: f64,
) -> Result<MetricsRow, HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::EmptyCorpus);
    }
    let scorer = model.scorer();
    let mut pairs = Vec::with_capacity(data.len());
    for (seq, label) in data {
        pairs.push((*label, label_for(&scorer.score(seq)?, threshold)));
    }
    Ok(MetricsRow::from_predictions(pairs))
}

pub fn evaluate(
    model: &DetectorModel,
    corpus: &[LabeledApp],
    threshold: f64,
) -> Result<MetricsRow, HarnessError> {
    evaluate_sequences(model, &sequences(corpus, model.config.max_len), threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// `x` slots per site (SIO/IMI).
    pub payload_len: usize,
    pub nop_count: usize,
    pub threshold: f64,
    /// Greedy sweeps over the placeholders.
    pub sweeps: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, threshold: f64, seed: u64) -> Self {
        AttackConfig {
            kind,
            payload_len: 2,
            nop_count: crate::inject::DEFAULT_NOP_COUNT,
            threshold,
            sweeps: 2,
            seed,
        }
    }

    pub fn variant(&self) -> AttackVariant {
        match self.kind {
            AttackKind::SimpleNop => AttackVariant::simple_nop(self.nop_count),
            kind => {
                let payload = vec![crate::inject::PAYLOAD_WHITELIST[0]; self.payload_len];
                AttackVariant {
                    kind,
                    payload_opcodes: payload.iter().map(|s| s.to_string()).collect(),
                    nop_count: 0,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppAttack {
    pub app_id: String,
    pub sites: usize,
    pub skipped: usize,
    pub p_malware_before: f64,
    pub p_malware_after: f64,
    pub evaded: bool,
    /// Positions where the realized app's sequence departs from the
    /// optimized one.
    pub inconsistencies: usize,
    pub ccc: CccReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub variant: AttackKind,
    pub metrics: MetricsRow,
    pub mean_ccc: CccReport,
    pub apps: Vec<AppAttack>,
}

/// Attacks one malware app and returns the modified app with its record.
pub fn attack_app(
    model: &DetectorModel,
    app: &App,
    cfg: &AttackConfig,
) -> Result<(App, AppAttack), HarnessError> {
    let table = OpcodeTable::dalvik();
    let max_len = model.config.max_len;
    let scorer = model.scorer();
    let before = scorer
        .score(&extract_opcode_sequence(app, &table, max_len))?
        .p_malware;
    let variant = cfg.variant();
    let (modified, manifest, skipped, inconsistencies) = match cfg.kind {
        AttackKind::SimpleNop => {
            let plan = InjectionPlan {
                method_selector: MethodSelector {
                    horizon: Some(max_len),
                    ..MethodSelector::all()
                },
                ..InjectionPlan::new(variant, cfg.seed)
            };
            let out = apply_attack(app, &plan).map_err(|e| match e {
                InjectError::EmptyManifest { .. } => HarnessError::EmptyManifest,
                InjectError::InvalidVariant(s) => HarnessError::InvalidArgument(s),
            })?;
            (out.app, out.manifest, out.skipped.len(), 0)
        }
        _ => {
            let template = build_attack_template(app, &variant, max_len)?;
            let cands = whitelist_ids(&table);
            let (assignment, _) =
                optimize_placeholders(model, &template, &cands, cfg.threshold, cfg.sweeps)?;
            let r = realize(app, &template, &assignment, cfg.seed)?;
            let bad = consistency_mismatches(&template, &assignment, &r)?.len();
            let skipped = template.skipped.len() + r.skipped.len();
            (r.app, r.manifest, skipped, bad)
        }
    };
    let after = scorer
        .score(&extract_opcode_sequence(&modified, &table, max_len))?
        .p_malware;
    let report = ccc(&manifest, CccWeights::default())?;
    let record = AppAttack {
        app_id: app.id.clone(),
        sites: manifest.sites.len(),
        skipped,
        p_malware_before: before,
        p_malware_after: after,
        evaded: after < cfg.threshold,
        inconsistencies,
        ccc: report,
    };
    Ok((modified, record))
}

/// Attacks every malware app of `corpus`, leaves benign apps unchanged, and
/// scores the result with the same model.
pub fn run_attack_experiment(
    model: &DetectorModel,
    corpus: &[LabeledApp],
    cfg: &AttackConfig,
) -> Result<AttackReport, HarnessError> {
    if corpus.is_empty() {
        return Err(HarnessError::EmptyCorpus);
    }
    let table = OpcodeTable::dalvik();
    let max_len = model.config.max_len;
    let malware: Vec<&LabeledApp> = corpus.iter().filter(|la| la.label == MALWARE).collect();
    let results = parallel_map(&malware, |la| attack_app(model, &la.app, cfg));
    let mut attacked = Vec::with_capacity(malware.len());
    let mut apps = Vec::with_capacity(malware.len());
    for r in results {
        let (app, rec) = r?;
        attacked.push(app);
        apps.push(rec);
    }
    let mut data = Vec::with_capacity(corpus.len());
    let mut attacked_iter = attacked.iter();
    for la in corpus {
        let app = if la.label == MALWARE {
            attacked_iter
                .next()
                .expect("one attacked app per malware app")
        } else {
            &la.app
        };
        data.push((extract_opcode_sequence(app, &table, max_len), la.label));
    }
    let metrics = evaluate_sequences(model, &data, cfg.threshold)?;
    let reports: Vec<CccReport> = apps.iter().map(|a| a.ccc).collect();
    let mean_ccc = CccReport::mean(&reports).ok_or(HarnessError::EmptyManifest)?;
    Ok(AttackReport {
        variant: cfg.kind,
        metrics,
        mean_ccc,
        apps,
    })
}

/// Order-preserving map over scoped threads.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub injected_length: usize,
    pub mean_ccc: f64,
    pub recall: f64,
}

/// SIO with `length` payload instructions per method, for each length.
pub fn run_sweep(
    model: &DetectorModel,
    corpus: &[LabeledApp],
    lengths: &[usize],
    base: &AttackConfig,
) -> Result<Vec<SweepRow>, HarnessError> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(HarnessError::InvalidArgument(
            "lengths must be non-empty and positive".into(),
        ));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::InvalidArgument(
            "lengths must be strictly increasing".into(),
        ));
    }
    lengths
        .iter()
        .map(|&n| {
            let cfg = AttackConfig {
                kind: AttackKind::Sio,
                payload_len: n,
                ..base.clone()
            };
            let r = run_attack_experiment(model, corpus, &cfg)?;
            Ok(SweepRow {
                injected_length: n,
                mean_ccc: r.mean_ccc.ccc,
                recall: r.metrics.recall,
            })
        })
        .collect()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
