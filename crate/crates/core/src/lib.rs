//! Full-waveform LiDAR (FWL) toolkit.
//!
//! A full-waveform sensor records, for every pixel of its raster, the whole
//! temporal intensity histogram of the returned pulse instead of a handful of
//! discrete range returns. Glass and other specular surfaces fold multi-path
//! echoes into these histograms; after peak extraction those echoes become
//! "ghost" points that sit behind the glass at the mirror image of a real
//! object.
//!
//! This crate covers everything around the learned classifier:
//!
//! * [`sensor`], [`geometry`], [`frame`]: sensor model and the shared data types,
//! * [`io`]: the binary frame/label formats, PLY clouds, TUM trajectories, CSV peaks,
//! * [`synth`]: a two-bounce ray caster that renders labelled histograms with ghosts,
//! * [`scenes`]: procedural glass rooms and the toy sensor used for training,
//! * [`signal`]: peak detection, accumulation, preprocessing, tiling and upsampling,
//! * [`annotate`]: GT-map based peak labelling and FWHM label expansion,
//! * [`baselines`]: point-cloud filters and classical ghost detectors,
//! * [`metrics`]: recall, ghost removal rate, false-positive rate, ATE and RTE.

pub mod annotate;
pub mod baselines;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod scenes;
pub mod sensor;
pub mod signal;
pub mod spatial;
pub mod synth;

pub use error::{FwlError, Result};
pub use frame::{Dims, FwlFrame, LabelVolume, Peak, PeakClass, Point3, PointCloud};
pub use geometry::{Pose, Trajectory};
pub use sensor::SensorConfig;
