//! Streaming forecasting for panel time-series with personalized online
//! ensembling.
//!
//! The crate maintains pooled (historical) and per-subject (individual)
//! candidate learners over a panel of time-series, scores them with online
//! time-series cross-validation, and produces per-subject forecasts through a
//! discrete selector or a convex ensemble. Subjects may enter and exit the
//! panel dynamically.

pub mod cv;
pub mod engine;
pub mod learners;
pub mod panel;
pub mod risk;
pub mod selector;
pub mod simgen;

pub use engine::{Engine, EngineConfig, StepOutput};
pub use panel::{Panel, PanelRecord, SummarySpec};
