//! Acceptance checks. Prints one PASS/FAIL line per check.
//!
//! Checks listed in `KNOWN_UNATTAINABLE` print FAIL like any other but do not
//! change the exit status; every other FAIL exits with status 1.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nopvis::ccc::{manifest_from_diff, CccReport, CccWeights};
use nopvis::detector::{gradient_check, init_model, DetectorConfig, TrainConfig};
use nopvis::harness::{
    evaluate, generate_corpus, run_attack_experiment, run_sweep, sequences, spearman, split,
    train_detector, AttackConfig, CorpusSpec,
};
use nopvis::inject::{inject_method, AttackKind, AttackVariant, PAYLOAD_WHITELIST};
use nopvis::interp::{check_equivalence, Verdict};
use nopvis::optimizer::{
    build_attack_template, consistency_mismatches, optimize_placeholders, realize, whitelist_ids,
};
use nopvis::{ccc, parse_class, serialize_class, OpcodeTable, SmaliClass, SmaliMethod};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

const GOLDEN_TOL: f64 = 0.01;
const COMPONENT_TOL: f64 = 0.005;
const ROUND_TRIP_FILES: usize = 1000;
const SEMANTIC_TRIALS: usize = 1000;
const GRAD_PER_GROUP: usize = 25;
const GRAD_STEP: f64 = 1e-4;
const GRAD_MAX_REL: f64 = 1e-4;
const PROPERTY_CASES: u32 = 256;
const SEED: u64 = 7;
const APPS_PER_CLASS: usize = 250;
const METHODS_PER_APP: usize = 20;
const TRAIN_ACC: f64 = 0.95;
const TEST_ACC: f64 = 0.90;
const TIME_BUDGET: Duration = Duration::from_secs(300);
const SWEEP_LENGTHS: [usize; 5] = [1, 2, 4, 8, 16];

/// The EX2 listing has 5 injected instructions over a 2-instruction host, so
/// C1 = e^5 / (e^5 + 2) = 0.9867, outside 0.98 ± 0.005.
const KNOWN_UNATTAINABLE: &[&str] = &["golden.ex2.c1"];

struct Report {
    lines: Vec<(String, bool, String)>,
}

impl Report {
    fn check(&mut self, id: &str, ok: bool, detail: impl Into<String>) {
        let detail = detail.into();
        println!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((id.to_string(), ok, detail));
    }

    fn close(&mut self, id: &str, got: f64, want: f64, tol: f64) {
        let ok = (got - want).abs() <= tol;
        self.check(id, ok, format!("got {got:.4}, want {want} ± {tol}"));
    }

    fn info(&self, id: &str, detail: impl std::fmt::Display) {
        println!("INFO {id}: {detail}");
    }
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fixture(name: &str) -> SmaliClass {
    let text = std::fs::read_to_string(fixture_dir().join(format!("{name}.smali"))).unwrap();
    parse_class(&text).unwrap()
}

fn golden(r: &mut Report) {
    let original = fixture("demo_original");
    let w = CccWeights::default();
    let cases = [
        ("ex1", "demo_nops", 1.0, [1.0, 0.0, 0.0]),
        ("ex2", "demo_loop", 0.46, [0.98, 0.66, 1.0]),
        ("ex3", "demo_condition", 0.65, [0.79, 0.33, 0.5]),
    ];
    for (id, file, want, comps) in cases {
        let manifest = manifest_from_diff(id, &original, &fixture(file));
        let rep = match ccc(&manifest, w) {
            Ok(rep) => rep,
            Err(e) => {
                r.check(&format!("golden.{id}.ccc"), false, e.to_string());
                continue;
            }
        };
        r.close(&format!("golden.{id}.ccc"), rep.ccc, want, GOLDEN_TOL);
        r.close(&format!("golden.{id}.c1"), rep.c1, comps[0], COMPONENT_TOL);
        r.close(&format!("golden.{id}.c2"), rep.c2, comps[1], COMPONENT_TOL);
        r.close(&format!("golden.{id}.c3"), rep.c3, comps[2], COMPONENT_TOL);
    }
    let sio = CccReport::from_components(0.82, 0.0, 1.0, w);
    let imi = CccReport::from_components(0.82, 0.33, 1.0, w);
    r.close("golden.sio_components", sio.ccc, 0.53, GOLDEN_TOL);
    r.close("golden.imi_components", imi.ccc, 0.46, GOLDEN_TOL);
}

fn reparse_is_fixpoint(text: &str) -> Result<(), String> {
    let a = parse_class(text).map_err(|e| e.to_string())?;
    let out = serialize_class(&a);
    let b = parse_class(&out).map_err(|e| e.to_string())?;
    if a != b {
        return Err("structure changed".into());
    }
    if serialize_class(&b) != out {
        return Err("serialization not a fixpoint".into());
    }
    let trim = |s: &str| s.lines().map(str::trim_end).collect::<Vec<_>>().join("\n");
    if trim(&out) != trim(text) {
        return Err("text differs beyond trailing whitespace".into());
    }
    Ok(())
}

fn round_trip(r: &mut Report) {
    let mut texts: Vec<(String, String)> = Vec::new();
    let mut apps = 1;
    while texts.len() < ROUND_TRIP_FILES {
        texts.clear();
        apps *= 2;
        let corpus = generate_corpus(&CorpusSpec::new(SEED, apps, METHODS_PER_APP)).unwrap();
        for la in &corpus {
            for c in &la.app.classes {
                texts.push((
                    format!("{}:{}", la.app.id, c.class_name),
                    serialize_class(c),
                ));
            }
        }
    }
    texts.truncate(ROUND_TRIP_FILES);
    let generated = texts.len();
    let mut entries: Vec<_> = std::fs::read_dir(fixture_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    for p in entries {
        texts.push((
            p.display().to_string(),
            std::fs::read_to_string(&p).unwrap(),
        ));
    }
    let failures: Vec<String> = texts
        .iter()
        .filter_map(|(name, t)| reparse_is_fixpoint(t).err().map(|e| format!("{name}: {e}")))
        .collect();
    r.check(
        "round_trip",
        failures.is_empty() && generated == ROUND_TRIP_FILES,
        format!(
            "{} files ({generated} generated + {} listings), {} failures {:?}",
            texts.len(),
            texts.len() - generated,
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

fn edge_methods() -> SmaliClass {
    parse_class(
        r#".class public LEdge;
.super Ljava/lang/Object;

.method public static loopSum(I)I
    .registers 3
    and-int/lit16 p0, p0, 0xff
    const/4 v0, 0
    :loop
    if-lez p0, :done
    add-int v0, v0, p0
    add-int/lit8 p0, p0, -1
    goto :loop
    :done
    return v0
.end method

.method public static branchy(III)I
    .registers 5
    if-ge p0, p1, :other
    sub-int v0, p1, p0
    goto :out
    :other
    mul-int v0, p0, p2
    :out
    xor-int/2addr v0, p2
    return v0
.end method

.method public static noLocals(II)I
    .registers 2
    add-int/2addr p0, p1
    return p0
.end method

.method public static constOnly()I
    .registers 1
    const/16 v0, 0x7fff
    return v0
.end method

.method public static overflow(I)I
    .registers 2
    mul-int v0, p0, p0
    rsub-int/lit8 v0, v0, 0x7f
    div-int/lit8 v0, v0, 3
    return v0
.end method
"#,
    )
    .unwrap()
}

fn variants() -> Vec<AttackVariant> {
    let mut out = vec![AttackVariant::simple_nop(1), AttackVariant::simple_nop(3)];
    for &x in PAYLOAD_WHITELIST {
        let mixed = [x, PAYLOAD_WHITELIST[0], "xor-int", x];
        out.push(AttackVariant::sio(&[x, x]));
        out.push(AttackVariant::sio(&mixed));
        out.push(AttackVariant::imi(&[x, x]));
        out.push(AttackVariant::imi(&mixed));
    }
    out
}

fn semantics(r: &mut Report) {
    let hosts: Vec<(String, SmaliMethod)> = [fixture("demo_original"), edge_methods()]
        .into_iter()
        .flat_map(|c| {
            let name = c.class_name.clone();
            c.methods.into_iter().map(move |m| (name.clone(), m))
        })
        .collect();
    let mut per_kind: BTreeMap<&str, (usize, usize, Vec<String>)> = BTreeMap::new();
    for (k, variant) in variants().iter().enumerate() {
        for (class_name, host) in &hosts {
            let entry = per_kind.entry(variant.kind.name()).or_default();
            let constants = [k as i32 * 7 - 20, i32::MAX - k as i32];
            let injected = match inject_method(class_name, host, variant, constants) {
                Ok(i) => i,
                Err(e) => {
                    entry.2.push(format!("{}: skipped ({e})", host.name));
                    continue;
                }
            };
            match check_equivalence(host, &injected.method, SEMANTIC_TRIALS, SEED + k as u64) {
                Verdict::Equal { cases } => {
                    entry.0 += 1;
                    entry.1 += cases;
                }
                other => entry.2.push(format!("{}: {other:?}", host.name)),
            }
        }
    }
    for (kind, (methods, cases, bad)) in per_kind {
        r.check(
            &format!("semantics.{kind}"),
            bad.is_empty() && methods > 0,
            format!(
                "{methods} injected methods, {cases} argument tuples, {} mismatches/abstentions {:?}",
                bad.len(),
                bad.iter().take(3).collect::<Vec<_>>()
            ),
        );
    }
}

fn gradients(r: &mut Report) {
    let corpus = generate_corpus(&CorpusSpec::new(SEED, 4, METHODS_PER_APP)).unwrap();
    let config = DetectorConfig::desk(SEED);
    let data = sequences(&corpus, config.max_len);
    let batch: Vec<_> = data.iter().map(|(s, l)| (s, *l)).collect();
    let model = init_model(config).unwrap();
    let checks = gradient_check(&model, &batch, GRAD_PER_GROUP, GRAD_STEP, SEED).unwrap();
    for c in checks {
        r.check(
            &format!("gradient.{}", c.group),
            c.max_relative_error < GRAD_MAX_REL && c.sampled >= 20,
            format!(
                "{} coordinates ({} kink draws skipped), max relative error {:.2e} (< {GRAD_MAX_REL:e})",
                c.sampled, c.kinks_skipped, c.max_relative_error
            ),
        );
    }
}

fn run_property<S: Strategy>(
    r: &mut Report,
    id: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) {
    let mut runner = TestRunner::new(Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    match runner.run(&strategy, test) {
        Ok(()) => r.check(id, true, format!("{PROPERTY_CASES} cases")),
        Err(e) => r.check(id, false, e.to_string()),
    }
}

fn site_strategy() -> impl Strategy<Value = nopvis::InjectionSite> + Clone {
    use nopvis::{ComplexityClass as K, ConnectionClass as C};
    (
        1usize..60,
        0usize..300,
        any::<bool>(),
        prop::sample::select(vec![
            K::StraightLine,
            K::FunctionOrConditional,
            K::LoopOrNestedCondition,
            K::RecursionOrComplex,
        ]),
        prop::sample::select(vec![
            C::NoAttachment,
            C::OneOriginalVariable,
            C::MultipleOriginalVariables,
        ]),
    )
        .prop_map(|(l, s, nop, k, c)| nopvis::InjectionSite {
            host_method_ref: "LP;->f()V".into(),
            injected_instruction_count: l,
            original_instruction_count: s,
            contains_explicit_nop: nop,
            complexity: k,
            connection: c,
            injected_line_spans: vec![],
        })
}

fn manifest_of(sites: Vec<nopvis::InjectionSite>) -> nopvis::InjectionManifest {
    nopvis::InjectionManifest {
        app_id: "p".into(),
        sites,
        assignment: None,
    }
}

fn properties(r: &mut Report) {
    let sites = prop::collection::vec(site_strategy(), 1..8);
    run_property(r, "property.ccc_range", sites.clone(), |s| {
        let rep = ccc(&manifest_of(s), CccWeights::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&rep.ccc), "{}", rep.ccc);
        Ok(())
    });
    run_property(
        r,
        "property.explicit_nop_clarity",
        (sites.clone(), any::<prop::sample::Index>()),
        |(mut s, i)| {
            let k = i.index(s.len());
            s[k].contains_explicit_nop = true;
            prop_assert_eq!(nopvis::clarity(&manifest_of(s)).unwrap(), 1.0);
            Ok(())
        },
    );
    run_property(
        r,
        "property.clarity_monotone",
        (1usize..30, 1usize..30, 1usize..1000),
        |(a, b, s)| {
            prop_assume!(a != b);
            let (lo, hi) = (a.min(b), a.max(b));
            let c = |l| {
                let site = nopvis::InjectionSite {
                    injected_instruction_count: l,
                    original_instruction_count: s,
                    ..manifest_site()
                };
                nopvis::clarity(&manifest_of(vec![site])).unwrap()
            };
            prop_assert!(c(lo) < c(hi), "C1({lo})={} C1({hi})={}", c(lo), c(hi));
            Ok(())
        },
    );
    run_property(
        r,
        "property.weights_validation",
        (-0.5f64..1.5, -0.5f64..1.5, -0.5f64..1.5, any::<bool>()),
        |(a, b, c, normalize)| {
            let (a, b, c) = if normalize && a >= 0.0 && b >= 0.0 && c >= 0.0 && a + b + c > 0.0 {
                let t = a + b + c;
                (a / t, b / t, c / t)
            } else {
                (a, b, c)
            };
            let valid = [a, b, c].iter().all(|w| (0.0..=1.0).contains(w))
                && (a + b + c - 1.0).abs() <= 1e-9;
            prop_assert_eq!(CccWeights::new(a, b, c).is_ok(), valid);
            Ok(())
        },
    );

    let corpus = generate_corpus(&CorpusSpec::new(SEED, 8, METHODS_PER_APP)).unwrap();
    let malware: Vec<_> = corpus.into_iter().filter(|la| la.label == 1).collect();
    let config = DetectorConfig {
        max_len: 256,
        conv_filters: 8,
        ..DetectorConfig::desk(SEED)
    };
    let cands = whitelist_ids(&OpcodeTable::dalvik());
    let pick = (
        0..malware.len(),
        prop::sample::select(vec![AttackKind::Sio, AttackKind::Imi]),
        1usize..4,
        any::<u64>(),
    );
    run_property(
        r,
        "property.greedy_monotone",
        pick.clone(),
        |(i, kind, n, seed)| {
            let model = init_model(DetectorConfig { seed, ..config }).unwrap();
            let variant = AttackVariant::sio(&vec!["add-int"; n]);
            let variant = AttackVariant { kind, ..variant };
            let t = build_attack_template(&malware[i].app, &variant, config.max_len).unwrap();
            let (_, trace) = optimize_placeholders(&model, &t, &cands, 0.0, 2).unwrap();
            prop_assert!(trace.is_monotone(), "{trace:?}");
            Ok(())
        },
    );
    run_property(
        r,
        "property.feature_problem_consistency",
        pick,
        |(i, kind, n, seed)| {
            let model = init_model(DetectorConfig { seed, ..config }).unwrap();
            let variant = AttackVariant::sio(&vec!["add-int"; n]);
            let variant = AttackVariant { kind, ..variant };
            let t = build_attack_template(&malware[i].app, &variant, config.max_len).unwrap();
            let (assignment, _) = optimize_placeholders(&model, &t, &cands, 0.5, 1).unwrap();
            let realized = realize(&malware[i].app, &t, &assignment, seed).unwrap();
            let bad = consistency_mismatches(&t, &assignment, &realized).unwrap();
            prop_assert!(bad.is_empty(), "mismatches at {bad:?}");
            Ok(())
        },
    );
}

fn manifest_site() -> nopvis::InjectionSite {
    nopvis::InjectionSite {
        host_method_ref: "LP;->f()V".into(),
        injected_instruction_count: 1,
        original_instruction_count: 1,
        contains_explicit_nop: false,
        complexity: nopvis::ComplexityClass::StraightLine,
        connection: nopvis::ConnectionClass::NoAttachment,
        injected_line_spans: vec![],
    }
}

fn synthetic(r: &mut Report) {
    let started = Instant::now();
    let corpus = generate_corpus(&CorpusSpec::new(SEED, APPS_PER_CLASS, METHODS_PER_APP)).unwrap();
    let (train, test) = split(&corpus, 0.8, SEED);
    let cfg = TrainConfig {
        seed: SEED,
        ..TrainConfig::new(30, 0.01)
    };
    let (model, _) = train_detector(&train, DetectorConfig::desk(SEED), &cfg).unwrap();
    let train_m = evaluate(&model, &train, 0.5).unwrap();
    let test_m = evaluate(&model, &test, 0.5).unwrap();
    let elapsed = started.elapsed();
    r.check(
        "synthetic.train_accuracy",
        train_m.accuracy >= TRAIN_ACC,
        format!(
            "{:.4} >= {TRAIN_ACC} (seed {SEED}, {} apps)",
            train_m.accuracy,
            corpus.len()
        ),
    );
    r.check(
        "synthetic.test_accuracy",
        test_m.accuracy >= TEST_ACC,
        format!("{:.4} >= {TEST_ACC}", test_m.accuracy),
    );
    r.check(
        "synthetic.time_budget",
        elapsed < TIME_BUDGET && (200..=1000).contains(&corpus.len()),
        format!("generate+train {elapsed:.1?} < {TIME_BUDGET:?}"),
    );

    let mut recalls = Vec::new();
    for kind in [AttackKind::SimpleNop, AttackKind::Sio, AttackKind::Imi] {
        let rep =
            run_attack_experiment(&model, &test, &AttackConfig::new(kind, 0.5, SEED)).unwrap();
        r.check(
            &format!("synthetic.recall_drop.{}", kind.name()),
            rep.metrics.recall < test_m.recall,
            format!(
                "attacked {:.4} < clean {:.4}",
                rep.metrics.recall, test_m.recall
            ),
        );
        r.info(
            &format!("synthetic.mean_ccc.{}", kind.name()),
            format!(
                "c1 {:.4} c2 {:.4} c3 {:.4} ccc {:.4}",
                rep.mean_ccc.c1, rep.mean_ccc.c2, rep.mean_ccc.c3, rep.mean_ccc.ccc
            ),
        );
        recalls.push(rep.metrics.recall);
    }
    let (nop, sio, imi) = (recalls[0], recalls[1], recalls[2]);
    r.info(
        "synthetic.ordering",
        format!(
            "SIO {sio:.4} <= IMI {imi:.4} <= SimpleNop {nop:.4}: {}",
            if sio <= imi && imi <= nop {
                "holds"
            } else {
                "does not hold"
            }
        ),
    );

    let rows = run_sweep(
        &model,
        &test,
        &SWEEP_LENGTHS,
        &AttackConfig::new(AttackKind::Sio, 0.5, SEED),
    )
    .unwrap();
    let cccs: Vec<f64> = rows.iter().map(|row| row.mean_ccc).collect();
    let recall: Vec<f64> = rows.iter().map(|row| row.recall).collect();
    let lengths: Vec<f64> = rows.iter().map(|row| row.injected_length as f64).collect();
    r.check(
        "sweep.ccc_monotone",
        cccs.windows(2).all(|w| w[0] < w[1]),
        format!("mean CCC {cccs:.4?} over lengths {SWEEP_LENGTHS:?}"),
    );
    let rho = spearman(&lengths, &recall);
    r.check(
        "sweep.spearman_negative",
        rho.is_some_and(|x| x < 0.0),
        format!("rho {rho:?}, recall {recall:.4?}, seed {SEED}"),
    );
}

fn main() -> ExitCode {
    let mut r = Report { lines: Vec::new() };
    golden(&mut r);
    round_trip(&mut r);
    semantics(&mut r);
    gradients(&mut r);
    properties(&mut r);
    synthetic(&mut r);
    let failed: Vec<&str> = r
        .lines
        .iter()
        .filter(|(_, ok, _)| !ok)
        .map(|(id, _, _)| id.as_str())
        .collect();
    let unexpected: Vec<&&str> = failed
        .iter()
        .filter(|id| !KNOWN_UNATTAINABLE.contains(id))
        .collect();
    println!(
        "acceptance: {} checks, {} passed, {} failed ({} known unattainable)",
        r.lines.len(),
        r.lines.len() - failed.len(),
        failed.len(),
        failed.len() - unexpected.len()
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
