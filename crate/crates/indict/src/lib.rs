//! Dual-critic code generation loop with tool-grounded critiques, sandboxed
//! execution, and an evaluation harness.
//!
//! An actor model drafts a response; a safety-driven critic and a
//! helpfulness-driven critic analyse it in dialogue, grounding their
//! critiques with external knowledge tools; a summarizer condenses the
//! dialogue and the actor revises. The loop runs preemptively and again
//! after the candidate code has been executed in a sandbox. Scripted
//! backends make whole runs deterministic and testable offline.

pub mod cli;
pub mod config;
pub mod critic;
pub mod eval;
pub mod gateway;
pub mod model;
pub mod orchestrator;
pub mod prompts;
pub mod runlog;
pub mod sandbox;
pub mod tools;
