//! The text half: prompt serialization, tokenizer, the sequence model, its
//! training on ground-truth goal sentences, and decoding back to coordinates.
//!
//! Nothing in here reads goal-module outputs; the goal sentence used for
//! training always states the true final position.

mod generate;
mod model;
mod prompt;
mod tokenizer;
mod train;

pub use generate::{
    decode_batch, generate_batch, generate_trajectory, parse_decoded, DecodedText, GeneratedTrajectory,
    GenerationRequest, GenerationStatus,
};
pub use model::{
    decoder_input, DecodeConfig, DecodeState, DecodeStrategy, Seq2Seq, SeqModelConfig, SeqScale, LLM_CHECKPOINT_FORMAT,
};
pub use prompt::{
    answer_text, cot_point, cot_point_to_world, format_number, format_pair, format_pairs, listed_neighbors,
    make_cot_sentence, parse_answer, parse_cot_sentence, parse_pairs, parse_question, quantize, serialize_observation,
    source_text, CoordFrame, ParsedQuestion, PromptConfig, PromptDocument,
};
pub use tokenizer::{TokenSequence, Tokenizer, BOS, EOS, PAD};
pub use train::{
    build_corpus, encode_corpus, sequence_loss, train_llm, train_seq_model, Batch, EncodedExample, LlmTrainConfig,
    LlmTrainOutput,
};
