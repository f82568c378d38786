//! Facilitation engine for structured expert elicitation.
//!
//! Monitoring, feedback, output and action modules are declared in a
//! [`registry::Catalogue`] and wired into a validated [`registry::Pipeline`].
//! A [`session::ElicitationSession`] records everything that happens as an
//! append-only event log; the analytics in [`feedback`] and the renderers in
//! [`reporting`] are pure functions of the replayed state.

pub mod actions;
pub mod feedback;
pub mod gateway;
pub mod monitoring;
pub mod registry;
pub mod reporting;
pub mod session;
pub mod simulation;
