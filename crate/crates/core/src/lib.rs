//! Keypoint-based lesion detection from RECIST measurements.
//!
//! Lesions are described by five keypoints (four extreme points and a
//! center) derived from their two RECIST diameters. The crate renders
//! training targets and losses for those keypoints, groups keypoint
//! heatmaps back into detections, fuses flip test-time views with Soft-NMS,
//! and scores detections with FROC sensitivity. [`oracle`] stands in for a
//! trained network so the whole loop can run on synthetic data.
//!
//! ```
//! use recist_core::geometry::{extremes_from_recist, Point2, RecistDiameters};
//! use recist_core::grouping::{detect, GroupingConfig};
//! use recist_core::targets::{render_targets, TargetConfig};
//!
//! let d = RecistDiameters::from_segments(
//!     (Point2::new(12.0, 31.0), Point2::new(47.0, 29.0)),
//!     (Point2::new(30.0, 10.0), Point2::new(30.0, 50.0)),
//! );
//! let e = extremes_from_recist(&d);
//! let t = render_targets(&[e], 16, 16, 4, &TargetConfig::default()).unwrap();
//! let dets = detect(&t.bundle, &GroupingConfig::default()).unwrap();
//! assert_eq!(dets[0].extremes, e);
//! assert_eq!(dets[0].score, 6.0);
//! ```

pub mod dataio;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod grouping;
pub mod loss;
pub mod oracle;
pub mod targets;

pub use error::{Error, ErrorClass, Result};
pub use geometry::{BBox, ExtremePoints, Point2, RecistDiameters, Role};
pub use grid::Grid2;
pub use grouping::{Detection, Source};
pub use targets::HeatmapBundle;
