//! Tri-plane radiance and semantic feature fields with layered, toggleable residual
//! edits.
//!
//! The crate covers the whole pipeline: the scene model ([`field`]), differentiable
//! volume rendering ([`render`]), training with hand-written gradients ([`train`]),
//! feature-space selection ([`select`]), multi-view context grids ([`context`]), the
//! edit layer stack ([`stack`]), edit workflows ([`edit`]) and on-disk formats ([`io`]).

pub mod context;
pub mod edit;
pub mod error;
pub mod field;
pub mod io;
pub mod math;
pub mod pipeline;
pub mod render;
pub mod select;
pub mod stack;
pub mod train;

pub use error::{Error, Result};
pub use field::{BlockId, CombineMode, EditKind, FieldConfig, TriPlaneField};
pub use math::{Aabb, RigidTransform, Vec3};
pub use render::{Camera, Ray, RenderOptions, RenderedImage};
pub use select::{Patch, SelectionMask};
pub use stack::{EditStack, EditToken};
