//! Core library for the land-cover classification pipeline.
//!
//! The pipeline trains multi-label classifiers on a labeled aerial-image
//! corpus, fetches satellite tiles for property addresses, classifies each
//! tile into co-occurring land-cover classes, and aggregates the predictions
//! into distribution reports.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`dataset`] — corpus loading, label vocabulary, splits, augmentation
//! * [`fetch`] — address records, tile service clients, fetch campaigns
//! * [`nn`] — the small CPU tensor/layer framework backing the model zoo
//! * [`zoo`] — backbone profiles, model construction, checkpoints
//! * [`training`] — fine-tuning loop, loss, loss-curve export
//! * [`eval`] — thresholded multi-label metrics, ROC-AUC, threshold sweeps
//! * [`inference`] — batch classification of fetched tiles
//! * [`report`] — detection-distribution aggregation and chart data
//! * [`synthetic`] — deterministic fixture generators for tests and demos

pub mod dataset;
pub mod eval;
pub mod fetch;
pub mod inference;
pub mod nn;
pub mod report;
pub mod synthetic;
pub mod training;
pub mod zoo;

pub use dataset::{
    augment, class_distribution, load_corpus, resize_image, split_corpus, AugmentationConfig,
    DatasetSplit, LabelVocabulary, LabeledImage, Transform,
};
pub use eval::{
    binarize, compute_metrics, compute_roc_auc, default_sweep_grid, render_comparison_table,
    sweep_thresholds, MetricsReport, PredictionSet, TableFormat, ThresholdSweepResult,
};
pub use fetch::{
    ledger_summary, load_property_records, run_fetch_campaign, CampaignConfig, FailureReason,
    FetchLedger, FetchResult, FetchStatus, Fetcher, PropertyRecord,
};
pub use inference::{predict_tiles, write_predictions, PredictionRecord};
pub use report::{aggregate, emit_chart_data, AggregateDistribution};
pub use training::{
    compute_loss, detect_overfitting, export_loss_curves, train, EpochLog, TrainingConfig,
    TrainingHistory,
};
pub use zoo::{
    build_model, build_model_with_seed, list_profiles, load_checkpoint, save_checkpoint,
    BackboneProfile, CheckpointManifest, ModelHandle, ProfileName,
};
