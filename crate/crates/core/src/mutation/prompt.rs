use crate::kb::{render_context, RetrievalResult};
use crate::protocol::{encode_frame, ProtocolSpec};
use crate::seed::Seed;

use super::MutationKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    /// The context block was cut at the budget (it then ends with the truncation marker).
    pub context_truncated: bool,
}

/// Prompt for the remote backend: retrieved rules, the three ordered steps
/// and the seed as JSON and hex. `budget` bounds the context block in characters.
pub fn build_prompt(
    seed: &Seed,
    spec: &ProtocolSpec,
    context: &[RetrievalResult],
    focus: MutationKind,
    n: usize,
    budget: usize,
) -> Prompt {
    let (ctx, context_truncated) = render_context(context, budget);
    let seed_hex = seed.frame(spec).ok().and_then(|f| encode_frame(&f, spec).ok()).map(hex::encode).unwrap_or_default();
    let fields = serde_json::to_string(&seed.fields).expect("field maps serialize");
    let mut text = String::new();
    text.push_str("### Context\n");
    text.push_str(&ctx);
    if !ctx.is_empty() && !ctx.ends_with('\n') {
        text.push('\n');
    }
    text.push_str("\n### Task\n");
    text.push_str(&format!("Generate {n} {} test cases from the seed below.\n", spec.protocol_id));
    text.push_str("Step 1: Field mutation. Change integer field values, favouring boundaries and small offsets.\n");
    text.push_str("Step 2: Structural mutation. Insert extra byte blobs at field boundaries or drop mandatory fields.\n");
    text.push_str("Step 3: Semantic mutation. Break exactly one relation between fields, such as a length or count.\n");
    text.push_str(&format!("Emphasis: {focus}.\n"));
    text.push_str("Answer with one test case per line as lowercase hex, nothing else.\n");
    text.push_str("\n### Seed\n");
    text.push_str(&format!("{fields}\nhex: {seed_hex}\n"));
    Prompt { text, context_truncated }
}
