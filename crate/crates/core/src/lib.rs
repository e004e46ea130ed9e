//! Data side of the multimodal reasoning recipe: corpus model, answer
//! verification, teacher distillation, near-duplicate removal, curation and
//! packing, and the evaluation runner.

pub mod client;
pub mod corpus;
pub mod curate;
pub mod dedup;
pub mod distill;
pub mod evalrun;
pub mod hashing;
pub mod tokenizer;
pub mod verify;

/// Format instruction appended to questions sent to the teacher.
pub const FORMAT_INSTRUCTION: &str = include_str!("../assets/format_instruction.txt");
