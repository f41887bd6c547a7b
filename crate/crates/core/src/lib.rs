//! Core of a small system for migrating long-running computations between
//! nodes through a shared blob store.
//!
//! A job is a [`runtime::StageMachine`]. At stage boundaries it may publish a
//! checkpoint image ([`cmi`]) through the scheduler's job [`registry`] and keep
//! going, or hop to another node, which resumes it from the same image.

pub mod cmi;
pub mod colocation;
pub mod events;
pub mod kvdoc;
pub mod layout;
pub mod registry;
pub mod runtime;
pub mod sim;
pub mod state;
pub mod store;
