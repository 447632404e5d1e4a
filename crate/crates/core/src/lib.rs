//! SPECT simulation and reconstruction: NEMA-style phantom, attenuated
//! depth-dependent-PSF projector, Poisson noise, MLEM/OSEM/MAP-Ent
//! reconstruction, Butterworth post-filtering and recovery analysis.

pub mod analysis;
pub mod error;
pub mod grid;
pub mod io;
pub mod noise;
pub mod phantom;
pub mod postfilter;
pub mod projector;
pub mod recon;
pub mod svg;

pub use error::{Error, Result};
pub use grid::{Grid3, ProjectionSet, Volume};
pub use phantom::PhantomSpec;
pub use projector::{AcquisitionGeometry, Projector, PsfModel};
pub use recon::{Algorithm, Gamma, ReconContext, ReconParams, ReconResult};
