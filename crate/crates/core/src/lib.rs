//! Multi-resolution coherent spatio-temporal scale separation.
//!
//! A record is fitted with constrained optimized DMD over sliding windows at
//! several window lengths. Each level clusters its eigenvalues into local
//! frequency bands and hands its slowest band to the next, longer-window
//! level. The fast bands of all levels are finally clustered together into
//! global bands whose contributions can be reconstructed one by one.
//!
//! ```no_run
//! use mrcosts::{fit, global_separation, reconstruct_full, BandCount, LevelConfig, SnapshotMatrix};
//! # fn run(data: SnapshotMatrix) -> mrcosts::Result<()> {
//! let configs: Vec<LevelConfig> = [16, 64, 256]
//!     .iter()
//!     .map(|&w| LevelConfig::new(w, 8, data.dt()))
//!     .collect();
//! let mut model = fit(&data, &configs, 0)?;
//! global_separation(&mut model, BandCount::Auto, (2, 16), 0)?;
//! let recon = reconstruct_full(&model)?;
//! # Ok(()) }
//! ```

pub mod archive;
pub mod cluster;
pub mod config;
pub mod error;
pub mod level;
pub mod model;
pub mod snapshot;
pub mod synth;
pub mod varpro;
pub mod window;

pub use archive::{load_model, save_model, save_model_with_config};
pub use cluster::{BandCount, ClusterResult, ModeIndex, OmegaFeatures, OmegaTransform};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use level::{fit_level, lowpass_handoff, reconstruct_local_band, LevelDecomposition};
pub use model::{
    aggregate_bands, fit, global_separation, reconstruct_full, reconstruct_global_band,
    relative_error, BandInfo, GlobalBands, MrCostsModel,
};
pub use snapshot::{load_matrix, save_matrix, write_atomic, MatrixFormat, SnapshotMatrix};
pub use varpro::{EigConstraint, VarproFit, VarproSettings, C64};
pub use window::{LevelConfig, WindowFit, WindowSpec};
