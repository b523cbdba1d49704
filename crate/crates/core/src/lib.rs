//! Joint dialog sentiment classification and dialog act recognition.
//!
//! The model encodes each utterance with a BiLSTM, splits the encoding into
//! sentiment- and act-specific streams with a gated feature selection
//! network, refines both with bidirectional multi-hop attention over the
//! dialog, and classifies against a shared table of label embeddings. Three
//! output architectures are supported: parallel heads with a label
//! contrastive loss ([`Arch::Parallel`]), and two conditioned variants tied
//! together with a probabilistic duality penalty.
//!
//! Everything runs on a small reverse-mode autodiff in 64-bit floats, so
//! gradients can be checked against finite differences end to end.
//!
//! ```no_run
//! use bmim::{generate_synthetic, train, evaluate, EvalOptions, SyntheticSpec, TrainConfig};
//!
//! let data = generate_synthetic(&SyntheticSpec::high_signal(40), 1)?;
//! let ckpt = train(&TrainConfig::default(), &data, &data)?;
//! let report = evaluate(&ckpt.model, &data, &EvalOptions::protocol(ckpt.model.config.train.protocol))?;
//! println!("{}", report.to_text());
//! # Ok::<(), bmim::BmimError>(())
//! ```

pub mod autograd;
pub mod bmin;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fsn;
pub mod heads;
pub mod io;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use config::{Ablation, Arch, Protocol, TrainConfig};
pub use corpus::{
    generate_synthetic, load_dialogs, parse_dialogs, Dialog, DialogSet, LabelSource, LabelSpace, SyntheticSpec,
    Utterance, Vocab,
};
pub use error::{BmimError, Result};
pub use evaluation::{ablate, evaluate, AverageMode, EvalOptions, MetricsReport};
pub use heads::PredictionBundle;
pub use model::Model;
pub use training::{gradcheck, load_checkpoint, save_checkpoint, train, Checkpoint, GradcheckReport, History};
