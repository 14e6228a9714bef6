//! Inverse procedural modeling of facades.
//!
//! The crate covers the full neuro-symbolic loop: a split grammar and its
//! heuristic generator produce (segmentation, procedure) pairs, a tokenizer
//! turns both sides into sequences, an encoder-decoder transformer learns the
//! mapping, a grammar automaton keeps every decoded procedure valid, and a
//! differentiable rasterizer fits the continuous sizing parameters.

pub mod decoder;
pub mod eval;
pub mod generator;
pub mod grammar;
pub mod layout;
pub mod noise;
pub mod sizing;
pub mod tokenizer;
pub mod transformer;

pub use grammar::{
    default_sizing, execute, validate_tree, DerivationTree, Grammar, GrammarError, Node, ProductionId,
    ProductionSpec, Symbol, ValidityReport,
};
pub use layout::{Extent, Rect, RectLayout, TerminalLabel};
