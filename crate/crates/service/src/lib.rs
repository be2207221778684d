//! HTTP and MQTT surfaces of the Digital Twin Descriptor Service, plus the
//! client and the live demo harness built on them.

pub mod api;
pub mod client;
pub mod dispatch;
pub mod error;
pub mod federate;
pub mod mqtt;
pub mod poc;
pub mod server;
