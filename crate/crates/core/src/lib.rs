//! NOP-style evasion attacks on Smali code and their visibility to a human
//! analyst.
//!
//! The crate parses Smali, injects three families of semantically inert code
//! (explicit `nop`s, the `const, const, x, x` simple-opcode pattern and the
//! `const, if-eqz, x, x` impossible-if pattern), scores each injection with the
//! Clarity/Complexity/Connection (CCC) visibility metric, and measures how well
//! the injections evade an opcode-sequence convolutional detector.

pub mod ccc;
pub mod detector;
pub mod error;
pub mod harness;
pub mod inject;
pub mod interp;
pub mod opcodes;
pub mod optimizer;
pub mod smali;

pub use ccc::{
    ccc, clarity, classify_complexity, classify_connection, complexity, connection,
    manifest_from_diff, CccReport, CccWeights, ComplexityClass, ConnectionClass, InjectionManifest,
    InjectionSite,
};

pub use detector::{DetectorConfig, DetectorModel, Scores};
pub use error::{AttackError, DetectorError, HarnessError, MetricError, SmaliError};
pub use inject::{apply_attack, AttackKind, AttackVariant, InjectError, InjectionPlan, SkipReason};
pub use interp::{check_equivalence, eval_method, EvalError, Verdict};
pub use opcodes::{extract_opcode_sequence, OpcodeSequence, OpcodeTable};
pub use smali::{parse_class, serialize_class, App, LineKind, SmaliClass, SmaliLine, SmaliMethod};
