//! Checkpoint diffing with per-row two-sample Kolmogorov-Smirnov tests.
//!
//! Compare an embedding matrix before and after fine-tuning row by row, keep
//! the rows whose value distribution changed significantly (the "winning
//! tickets"), then either train only those rows, splice them into the
//! original checkpoint, or certify that predictions survive leaving the rest
//! untouched.
//!
//! Modules:
//!
//! - [`ks`]: statistic, critical values, p-values
//! - [`checkpoint`]: the `KSLT` tensor container
//! - [`selection`]: row scores and ticket selection
//! - [`transfer`]: row splicing and trainable-row masks
//! - [`certify`]: certified accuracy from prediction logs
//! - [`toytrain`]: a tiny trainable model for end-to-end runs
//! - [`formats`]: CSV and text files shared with the CLI

pub mod certify;
pub mod checkpoint;
pub mod error;
pub mod formats;
pub mod ks;
pub mod selection;
pub mod toytrain;
pub mod transfer;

pub use certify::{
    alpha_sweep, certification_report, certify_record, filter_first_k, CertificationReport,
    PredictionRecord, ProbSource,
};
pub use checkpoint::{
    get_embedding, import_csv_matrix, read_checkpoint, validate_pair, write_checkpoint, Checkpoint,
    EmbeddingView, TensorRecord,
};
pub use error::{Error, Result};
pub use ks::{
    empirical_cdf_at, ks_critical_value, ks_pvalue_asymptotic, ks_pvalue_permutation, ks_statistic,
    ks_two_sample_test, tau_from_pvalue_inversion, KsResult, Sample,
};
pub use selection::{
    analyze_pair, compare_ticket_distributions, count_frequencies, normalized_rank, score_row,
    select_by_alpha, select_by_frequency, select_top_k, Method, TokenScore, WinningTicketSet,
};
pub use toytrain::{
    emit_prediction_log, evaluate, forward, generate_task, grad_check, init_model, train,
    SyntheticTask, ToyModel, TrainConfig, TrainMode,
};
pub use transfer::{diff_rows, emit_mask, splice_partial_transfer, RowMask};
