//! Interrater studies: session protocol, label storage, rating matrices and
//! Fleiss' kappa.

mod compare;
mod kappa;
mod session;
pub mod store;

pub use compare::{agreement_table, build_rating_matrix, compare_agreements, AgreementComparison, AgreementRow};
pub use kappa::{fleiss_kappa, interpret_kappa, AgreementLevel, KappaResult, RatingMatrix, Z_95};
pub use session::{
    create_session, export_labels_csv, run_model_rater, select_study_images, BatchPlan, ImageSource, LabelAck, LabelEntry, NextBatch,
    RaterId, RaterKind, RaterProgress, StudySession, DEFAULT_BATCH_SIZE, DEFAULT_STUDY_IMAGES,
};
pub use store::{list_sessions, StoredSession};
