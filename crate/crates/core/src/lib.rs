//! Image-side building blocks for text removal: text polygons and soft
//! stroke masks, RTV structure smoothing, image quality metrics, and paired
//! dataset handling.

pub mod data;
pub mod exec;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod rtv;

pub use exec::Exec;
pub use geometry::{MaskMode, SoftMask, TextPolygon};
pub use image::{Image, StructureImage};
pub use rtv::RtvParams;
