//! Evaluation harness: oracle detector, erasure metrics, K ablation,
//! prototype interpretation and report files.

pub mod ablation;
pub mod detector;
pub mod interpret;
pub mod metrics;
pub mod report;

pub use ablation::{ablation_k, AblationResult, AblationRow};
pub use detector::{calibrate_detector, detector_score, flagged, DetectorCalibration, DetectorConfig, DetectorRates};
pub use interpret::{nearest_images, nearest_tokens};
pub use metrics::{context_alignment, flagged_rate, rescore, EvalGrid, EvalReport, ModeBreakdown, ReportConfig};
pub use report::{emit_report, render_report, Report, ReportFormat};
