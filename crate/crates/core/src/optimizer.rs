//! Feature-space placeholder optimization.
//!
//! An [`AttackTemplate`] is the app's opcode sequence after opcode shifting:
//! the attack pattern (`const, const, x, x` or `const, if-eqz, x, x`) is
//! spliced at the entry of every injectable method and each `x` slot holds
//! [`PLACEHOLDER_ID`]. [`optimize_placeholders`] fills the slots greedily to
//! lower the detector's malware score, and [`realize`] writes the winning
//! opcodes back into Smali through the injector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ccc::InjectionManifest;
use crate::detector::DetectorModel;
use crate::error::AttackError;
use crate::inject::{inject_method, AttackKind, AttackVariant, SkipRecord, PAYLOAD_WHITELIST};
use crate::opcodes::{extract_opcode_sequence, method_layout, OpcodeSequence, OpcodeTable};
use crate::smali::App;

/// Marks an unassigned `x` slot. Lies outside every vocabulary.
pub const PLACEHOLDER_ID: u32 = u32::MAX;

/// One injectable method and the template positions of its `x` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSite {
    pub class_index: usize,
    pub method_index: usize,
    pub method: String,
    /// Position of the pattern's first opcode in the untruncated sequence.
    pub start: usize,
    /// Indices into [`AttackTemplate::placeholder_positions`]; slots cut off by
    /// truncation are absent.
    pub placeholders: Vec<usize>,
    /// Registers the injector adds to this method's frame.
    pub scratch_registers: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackTemplate {
    /// Shifted sequence with [`PLACEHOLDER_ID`] at every surviving `x` slot.
    pub base: OpcodeSequence,
    pub placeholder_positions: Vec<usize>,
    pub pattern: AttackKind,
    /// Number of `x` slots per site.
    pub payload_len: usize,
    pub sites: Vec<TemplateSite>,
    pub skipped: Vec<SkipRecord>,
}

impl AttackTemplate {
    pub fn len(&self) -> usize {
        self.placeholder_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placeholder_positions.is_empty()
    }

    /// The base sequence with `assignment` written into the slots.
    pub fn substitute(&self, assignment: &[u32]) -> Result<OpcodeSequence, AttackError> {
        if assignment.len() != self.len() {
            return Err(AttackError::AssignmentLength {
                expected: self.len(),
                got: assignment.len(),
            });
        }
        let mut seq = self.base.clone();
        for (&pos, &id) in self.placeholder_positions.iter().zip(assignment) {
            seq.ids[pos] = id;
        }
        Ok(seq)
    }
}

/// Ids of the injector's payload whitelist, ascending.
pub fn whitelist_ids(table: &OpcodeTable) -> Vec<u32> {
    let mut ids: Vec<u32> = PAYLOAD_WHITELIST.iter().map(|m| table.id(m)).collect();
    ids.sort_unstable();
    ids
}

fn pattern_prefix(kind: AttackKind, table: &OpcodeTable) -> Result<[u32; 2], AttackError> {
    match kind {
        AttackKind::Sio => Ok([table.id("const"), table.id("const")]),
        AttackKind::Imi => Ok([table.id("const"), table.id("if-eqz")]),
        AttackKind::SimpleNop => Err(AttackError::UnsupportedVariant(kind.name().into())),
    }
}

/// Splices the variant's pattern at the entry of every method that starts
/// within `max_len` and that the injector accepts, then truncates to
/// `max_len`.
pub fn build_attack_template(
    app: &App,
    variant: &AttackVariant,
    max_len: usize,
) -> Result<AttackTemplate, AttackError> {
    let table = OpcodeTable::dalvik();
    let prefix = pattern_prefix(variant.kind, &table)?;
    variant
        .validate()
        .map_err(AttackError::UnsupportedVariant)?;
    let payload_len = variant.payload_opcodes.len();
    let (ids, spans) = method_layout(app, &table);

    let mut out = Vec::with_capacity(ids.len() + spans.len() * (2 + payload_len));
    let mut slots = Vec::new();
    let mut sites = Vec::new();
    let mut skipped = Vec::new();
    let mut cursor = 0;
    for span in &spans {
        if span.start >= max_len {
            break;
        }
        let class = &app.classes[span.class_index];
        let method = &class.methods[span.method_index];
        let name = method.ref_id(&class.class_name);
        let inj = match inject_method(&class.class_name, method, variant, [1, 1]) {
            Ok(inj) => inj,
            Err(reason) => {
                skipped.push(SkipRecord {
                    method: name,
                    reason,
                });
                continue;
            }
        };
        out.extend_from_slice(&ids[cursor..span.start]);
        cursor = span.start;
        let start = out.len();
        out.extend_from_slice(&prefix);
        let mut placeholders = Vec::new();
        for _ in 0..payload_len {
            if out.len() < max_len {
                placeholders.push(slots.len());
                slots.push(out.len());
            }
            out.push(PLACEHOLDER_ID);
        }
        sites.push(TemplateSite {
            class_index: span.class_index,
            method_index: span.method_index,
            method: name,
            start,
            placeholders,
            scratch_registers: inj.added_registers,
        });
        if out.len() >= max_len {
            break;
        }
    }
    if sites.is_empty() {
        return Err(AttackError::EmptyTemplate);
    }
    out.extend_from_slice(&ids[cursor..]);
    out.truncate(max_len);
    Ok(AttackTemplate {
        base: OpcodeSequence {
            app_id: app.id.clone(),
            ids: out,
            max_len,
        },
        placeholder_positions: slots,
        pattern: variant.kind,
        payload_len,
        sites,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub sweep: usize,
    /// Index into the template's placeholders.
    pub placeholder: usize,
    pub opcode_id: u32,
    pub p_malware: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub initial_p_malware: f64,
    pub final_p_malware: f64,
    pub steps: Vec<TraceStep>,
    pub evaluations: usize,
    pub evaded: bool,
}

impl OptimizationTrace {
    /// Scores never increase along the trace.
    pub fn is_monotone(&self) -> bool {
        let mut prev = self.initial_p_malware;
        for s in &self.steps {
            if s.p_malware > prev {
                return false;
            }
            prev = s.p_malware;
        }
        self.final_p_malware <= self.initial_p_malware
    }
}

/// Greedy coordinate descent over the placeholders.
///
/// Slots start at the smallest candidate id. Each sweep visits slots in
/// sequence order and tries every candidate; the lowest-scoring one (lowest id
/// on ties) is kept when it does not raise the score. Stops as soon as
/// `p_malware < threshold`, after a sweep without changes, or after `sweeps`
/// sweeps.
pub fn optimize_placeholders(
    model: &DetectorModel,
    template: &AttackTemplate,
    candidate_ids: &[u32],
    threshold: f64,
    sweeps: usize,
) -> Result<(Vec<u32>, OptimizationTrace), AttackError> {
    let allowed = whitelist_ids(&OpcodeTable::dalvik());
    if let Some(&bad) = candidate_ids.iter().find(|id| !allowed.contains(id)) {
        return Err(AttackError::NotInjectable(bad));
    }
    let mut candidates = candidate_ids.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let first = *candidates.first().ok_or(AttackError::NoCandidates)?;

    let scorer = model.scorer();
    let mut assignment = vec![first; template.len()];
    let mut seq = template.substitute(&assignment)?;
    let initial = scorer.score(&seq)?.p_malware;
    let mut current = initial;
    let mut evaluations = 1;
    let mut steps = Vec::new();

    'outer: for sweep in 0..sweeps.max(1) {
        let mut changed = false;
        for (slot, &pos) in template.placeholder_positions.iter().enumerate() {
            if current < threshold {
                break 'outer;
            }
            let mut best = (current, assignment[slot]);
            for &cand in &candidates {
                if cand == assignment[slot] {
                    continue;
                }
                seq.ids[pos] = cand;
                let p = scorer.score(&seq)?.p_malware;
                evaluations += 1;
                if p < best.0 || (p == best.0 && cand < best.1) {
                    best = (p, cand);
                }
            }
            seq.ids[pos] = best.1;
            if best.1 != assignment[slot] {
                assignment[slot] = best.1;
                current = best.0;
                changed = true;
                steps.push(TraceStep {
                    sweep,
                    placeholder: slot,
                    opcode_id: best.1,
                    p_malware: current,
                });
            }
        }
        if !changed {
            break;
        }
    }
    Ok((
        assignment,
        OptimizationTrace {
            initial_p_malware: initial,
            final_p_malware: current,
            steps,
            evaluations,
            evaded: current < threshold,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Realized {
    pub app: App,
    pub manifest: InjectionManifest,
    /// Sites the injector refused; their slots are excluded from the
    /// consistency check.
    pub skipped: Vec<SkipRecord>,
}

/// Writes the assignment into Smali. Slots lost to truncation get the first
/// whitelist opcode.
pub fn realize(
    app: &App,
    template: &AttackTemplate,
    assignment: &[u32],
    seed: u64,
) -> Result<Realized, AttackError> {
    if assignment.len() != template.len() {
        return Err(AttackError::AssignmentLength {
            expected: template.len(),
            got: assignment.len(),
        });
    }
    let table = OpcodeTable::dalvik();
    let mut mnemonics = Vec::with_capacity(assignment.len());
    for &id in assignment {
        match table.mnemonic(id).filter(|m| PAYLOAD_WHITELIST.contains(m)) {
            Some(m) => mnemonics.push(m),
            None => return Err(AttackError::NotInjectable(id)),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = app.clone();
    let mut manifest = InjectionManifest::new(app.id.clone());
    let mut skipped = Vec::new();
    for site in &template.sites {
        let payload: Vec<&str> = (0..template.payload_len)
            .map(|j| {
                site.placeholders
                    .get(j)
                    .map_or(PAYLOAD_WHITELIST[0], |&slot| mnemonics[slot])
            })
            .collect();
        let variant = match template.pattern {
            AttackKind::Sio => AttackVariant::sio(&payload),
            _ => AttackVariant::imi(&payload),
        };
        let constants = [rng.gen_range(1..0x80), rng.gen_range(1..0x80)];
        let class = &app.classes[site.class_index];
        let method = &class.methods[site.method_index];
        match inject_method(&class.class_name, method, &variant, constants) {
            Ok(inj) => {
                out.classes[site.class_index].methods[site.method_index] = inj.method;
                manifest.sites.push(inj.site);
            }
            Err(reason) => skipped.push(SkipRecord {
                method: site.method.clone(),
                reason,
            }),
        }
    }
    manifest.assignment = Some(mnemonics.iter().map(|m| m.to_string()).collect());
    Ok(Realized {
        app: out,
        manifest,
        skipped,
    })
}

/// Positions where re-extracting the realized app disagrees with the
/// substituted template, ignoring sites the injector skipped.
pub fn consistency_mismatches(
    template: &AttackTemplate,
    assignment: &[u32],
    realized: &Realized,
) -> Result<Vec<usize>, AttackError> {
    let expected = template.substitute(assignment)?;
    if !realized.skipped.is_empty() {
        // Skipped sites shift everything after them; only the prefix before
        // the first skipped site is comparable.
        let first = template
            .sites
            .iter()
            .filter(|s| realized.skipped.iter().any(|k| k.method == s.method))
            .map(|s| s.start)
            .min()
            .unwrap_or(expected.len());
        let got =
            extract_opcode_sequence(&realized.app, &OpcodeTable::dalvik(), template.base.max_len);
        return Ok(diff(
            &expected.ids[..first.min(expected.len())],
            &got.ids[..first.min(got.len())],
        ));
    }
    let got = extract_opcode_sequence(&realized.app, &OpcodeTable::dalvik(), template.base.max_len);
    let mut d = diff(&expected.ids, &got.ids);
    if expected.len() != got.len() {
        d.push(expected.len().min(got.len()));
    }
    Ok(d)
}

fn diff(a: &[u32], b: &[u32]) -> Vec<usize> {
    a.iter()
        .zip(b)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{init_model, DetectorConfig};
    use crate::interp::{check_equivalence, Verdict};
    use crate::opcodes::PADDING_ID;
    use crate::smali::parse_class;

    const TOY: &str = "\
.class public LDemo;
.super Ljava/lang/Object;

.method public static addTwoIntegers(II)I
    .registers 3
    add-int v0, v1, v2
    return v0
.end method

.method public static subtractTwoIntegers(II)I
    .registers 3
    sub-int v0, v1, v2
    return v0
.end method
";

    fn toy() -> App {
        App {
            id: "toy".into(),
            classes: vec![parse_class(TOY).unwrap()],
        }
    }

    fn small_model(seed: u64) -> DetectorModel {
        init_model(DetectorConfig {
            embedding_dim: 4,
            conv_filters: 6,
            kernel_width: 3,
            hidden_dim: 5,
            max_len: 64,
            ..DetectorConfig::desk(seed)
        })
        .unwrap()
    }

    fn sio() -> AttackVariant {
        AttackVariant::default_for(AttackKind::Sio)
    }

    #[test]
    fn toy_template_has_two_slots_per_method() {
        let t = build_attack_template(&toy(), &sio(), 64).unwrap();
        assert_eq!(t.len(), 4);
        let table = OpcodeTable::dalvik();
        let c = table.id("const");
        let (add, sub, ret) = (table.id("add-int"), table.id("sub-int"), table.id("return"));
        let p = PLACEHOLDER_ID;
        assert_eq!(
            t.base.ids,
            [c, c, p, p, add, ret, PADDING_ID, c, c, p, p, sub, ret]
        );
        assert_eq!(t.placeholder_positions, [2, 3, 9, 10]);
        assert_eq!(t.sites[1].placeholders, [2, 3]);
    }

    #[test]
    fn imi_template_carries_if_eqz() {
        let t = build_attack_template(&toy(), &AttackVariant::default_for(AttackKind::Imi), 64)
            .unwrap();
        let table = OpcodeTable::dalvik();
        assert_eq!(t.base.ids[..2], [table.id("const"), table.id("if-eqz")]);
        assert_eq!(t.base.ids[7..9], [table.id("const"), table.id("if-eqz")]);
    }

    #[test]
    fn simple_nop_and_empty_apps_are_rejected() {
        assert!(matches!(
            build_attack_template(&toy(), &AttackVariant::simple_nop(2), 64),
            Err(AttackError::UnsupportedVariant(_))
        ));
        let empty = App {
            id: "e".into(),
            classes: vec![parse_class(".class LE;\n").unwrap()],
        };
        assert!(matches!(
            build_attack_template(&empty, &sio(), 64),
            Err(AttackError::EmptyTemplate)
        ));
    }

    #[test]
    fn truncation_keeps_max_len() {
        let t = build_attack_template(&toy(), &sio(), 9).unwrap();
        assert_eq!(t.base.len(), 9);
        assert_eq!(t.placeholder_positions, [2, 3]);
        assert_eq!(t.sites.len(), 2);
        assert!(t.sites[1].placeholders.is_empty());
        let t = build_attack_template(&toy(), &sio(), 10).unwrap();
        assert_eq!(t.placeholder_positions, [2, 3, 9]);
    }

    #[test]
    fn zero_model_keeps_first_candidates() {
        let m = DetectorModel::zeros(small_model(0).config).unwrap();
        let t = build_attack_template(&toy(), &sio(), 64).unwrap();
        let cands = whitelist_ids(&OpcodeTable::dalvik());
        let (a, trace) = optimize_placeholders(&m, &t, &cands, 0.5, 3).unwrap();
        assert_eq!(a, vec![cands[0]; 4]);
        assert!(trace.steps.is_empty());
        assert!(!trace.evaded);
        let (_, trace) = optimize_placeholders(&m, &t, &cands, 0.6, 3).unwrap();
        assert!(trace.evaded);
    }

    #[test]
    fn candidates_are_validated() {
        let m = small_model(1);
        let t = build_attack_template(&toy(), &sio(), 64).unwrap();
        assert!(matches!(
            optimize_placeholders(&m, &t, &[], 0.5, 1),
            Err(AttackError::NoCandidates)
        ));
        assert!(matches!(
            optimize_placeholders(&m, &t, &[22], 0.5, 1),
            Err(AttackError::NotInjectable(22))
        ));
    }

    #[test]
    fn greedy_trace_is_monotone_and_deterministic() {
        let cands = whitelist_ids(&OpcodeTable::dalvik());
        let t = build_attack_template(&toy(), &sio(), 64).unwrap();
        for seed in 0..10 {
            let m = small_model(seed);
            let (a, trace) = optimize_placeholders(&m, &t, &cands, 0.0, 4).unwrap();
            assert!(trace.is_monotone(), "{trace:?}");
            let p = m
                .scorer()
                .score(&t.substitute(&a).unwrap())
                .unwrap()
                .p_malware;
            assert_eq!(p, trace.final_p_malware);
            assert_eq!(
                (a, trace.clone()),
                optimize_placeholders(&m, &t, &cands, 0.0, 4).unwrap()
            );
        }
    }

    #[test]
    fn greedy_matches_per_coordinate_optimum_on_two_slots() {
        // Brute force over the full product space on a single-method app.
        let app = App {
            id: "one".into(),
            classes: vec![
                parse_class(&TOY[..TOY.find(".method public static sub").unwrap()]).unwrap(),
            ],
        };
        let t = build_attack_template(&app, &sio(), 64).unwrap();
        assert_eq!(t.len(), 2);
        let cands = whitelist_ids(&OpcodeTable::dalvik());
        for seed in 0..8 {
            let m = small_model(seed);
            let s = m.scorer();
            let score = |a: &[u32]| s.score(&t.substitute(a).unwrap()).unwrap().p_malware;
            let (a, trace) = optimize_placeholders(&m, &t, &cands, 0.0, 10).unwrap();
            let exhaustive = cands
                .iter()
                .flat_map(|&x| cands.iter().map(move |&y| [x, y]))
                .map(|a| score(&a))
                .fold(f64::INFINITY, f64::min);
            assert!(exhaustive <= trace.final_p_malware);
            // No single-coordinate change improves the greedy result.
            for slot in 0..2 {
                for &c in &cands {
                    let mut b = a.clone();
                    b[slot] = c;
                    assert!(score(&b) >= trace.final_p_malware);
                }
            }
        }
    }

    #[test]
    fn realized_app_matches_template_and_preserves_semantics() {
        let app = toy();
        let table = OpcodeTable::dalvik();
        let t = build_attack_template(&app, &sio(), 64).unwrap();
        let a = vec![
            table.id("sub-int"),
            table.id("xor-int"),
            table.id("mul-int"),
            table.id("or-int"),
        ];
        let r = realize(&app, &t, &a, 3).unwrap();
        assert!(consistency_mismatches(&t, &a, &r).unwrap().is_empty());
        assert_eq!(
            r.manifest.assignment.as_deref().unwrap(),
            ["sub-int", "xor-int", "mul-int", "or-int"]
        );
        let ops: Vec<&str> = r.app.classes[0].methods[0]
            .instructions()
            .filter_map(|l| l.opcode())
            .collect();
        assert_eq!(
            ops,
            ["const", "const", "sub-int", "xor-int", "add-int", "return"]
        );
        for (orig, modified) in app.classes[0].methods.iter().zip(&r.app.classes[0].methods) {
            assert!(matches!(
                check_equivalence(orig, modified, 200, 1),
                Verdict::Equal { .. }
            ));
        }
    }

    #[test]
    fn realize_rejects_bad_assignments() {
        let t = build_attack_template(&toy(), &sio(), 64).unwrap();
        assert!(matches!(
            realize(&toy(), &t, &[0; 3], 0),
            Err(AttackError::AssignmentLength {
                expected: 4,
                got: 3
            })
        ));
        assert!(matches!(
            realize(&toy(), &t, &[2; 4], 0),
            Err(AttackError::NotInjectable(2))
        ));
    }
}
