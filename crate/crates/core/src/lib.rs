//! Heterogeneous judge analysis: a low-rank extension of the Bradley-Terry-Luce
//! model where each judge scores items as `gamma_k mu + U_k V^T`.

pub mod data;
pub mod decomposition;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod likelihood;
pub mod linalg;
pub mod optim;
pub mod selection;
pub mod simulation;
pub mod solver;

pub use data::{aggregate, AggregatedCounts, ComparisonRecord, IdMap, InputFormat};
pub use decomposition::{compose, decompose, reanchor, HjaParams, RankChoice, ScoreMatrix};
pub use error::{HjaError, Result};
