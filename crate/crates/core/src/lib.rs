pub mod applik;
pub mod atlas;
pub mod error;
pub mod lbfgs;
pub mod longit;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod volio;
pub mod xsect;

pub use applik::{BiasField, GaussianParams};
pub use atlas::{MeshPositions, TetrahedralMesh};
pub use error::{Error, Result};
pub use longit::{LesionConfig, LesionPriorSource, LongConfig, LongFitResult};
pub use volio::{LabelVolume, MultiContrastVolume, VolumeTimeSeries, VoxelGrid};
pub use xsect::{CrossFitResult, FitConfig};
