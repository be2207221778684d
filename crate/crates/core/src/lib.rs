//! Core building blocks of the Digital Twin Descriptor Service.
//!
//! Everything in this crate is synchronous and transport-free: the entity
//! model and descriptor ontology, the tenant-scoped context store with its
//! change log, subscription matching, federation merge rules, the
//! content-addressed asset repository, scene resolution, local geometry and
//! the traffic micro-simulator used by the live demo loop. The HTTP and MQTT
//! surfaces live in `dtds-service`.

pub mod assets;
pub mod federation;
pub mod geo;
pub mod model;
pub mod notify;
pub mod par;
pub mod resolve;
pub mod sim;
pub mod store;
pub mod time;

pub use model::{Attribute, AttrKind, AttrValue, Entity, EntityId, GeoPoint, ModelError};
pub use time::Timestamp;
