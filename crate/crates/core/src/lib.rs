//! Desk-scale audio-language model toolkit.
//!
//! A from-scratch CPU stack for training and evaluating a small
//! audio-conditioned language model: a 128-channel log-mel front-end, a
//! tape-based reverse-mode autodiff engine, a Whisper-style toy audio
//! encoder feeding a decoder-only LM, synthetic audio task corpora, a
//! three-stage training pipeline (pretrain, SFT, DPO), and a multi-metric
//! evaluation harness (WER, BLEU, accuracy, judge scoring).

pub mod audio;
pub mod data;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use audio::{AudioClip, MelFilterbank, MelSpectrogram};
pub use data::{Conversation, Manifest, PreferenceTriple, TaskSpec, Tokenizer};
pub use model::{EncoderConfig, LmConfig, TokenSequence};
pub use tensor::{Array, ParameterStore, Tape};
pub use train::StageConfig;
