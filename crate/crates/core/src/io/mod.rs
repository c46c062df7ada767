//! File formats: the record log, the experiment configuration and the
//! calibration result file.

pub mod calibration_file;
pub mod config;
pub mod frames;
pub mod log;

pub use calibration_file::{read_calibration, write_calibration};
pub use config::ExperimentConfig;
pub use frames::{collect_frames, LoggedFrame};
pub use log::{parse_log, LogReader, LogRecord, LogWriter, Quantity, RecordKind};
