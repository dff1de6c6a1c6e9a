//! Infinite Self-Attention: attention as path summation over a token graph.
//!
//! The crate builds Frobenius-normalized affinity operators, sums their
//! discounted walks (truncated or in closed form), reads the same kernel as
//! an absorbing Markov chain, and provides Pure and Linear InfSA layers with
//! hand-written backward passes, plus verification and benchmark helpers.

pub mod bench;
pub mod error;
pub mod format;
pub mod graph;
pub mod layers;
pub mod markov;
pub mod path;
pub mod tensor;
pub mod validation;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use graph::{
    assert_contractive, build_affinity, build_affinity_with, diffuse, Activation, AffinityMatrix, Contractivity,
    TokenFeatures, DEFAULT_EPSILON,
};
pub use markov::{
    build_absorbing_chain, fig3_fixture, fundamental_matrix, one_hop_vs_multihop_ranking, simulate_walks,
    walk_centralities, AbsorbingChain, FundamentalMatrix, Ranking, VisitEstimate, WalkCentralities,
};
pub use path::{
    centrality_report, closed_form_kernel, depth_score, layerwise_accumulate, matrix_power, path_sum_bruteforce,
    token_centrality, truncated_neumann, CentralityReport, DecayFactor,
};
pub use tensor::{matmul, power_iteration, power_iteration_default, solve_linear, Matrix, PowerIteration, Vector};
