//! Cost model, planner and message-level simulator for context parallelism
//! over sparse attention: head-parallel groups rebalance uneven per-head
//! work, sequence-parallel groups gather only the key/value rows that their
//! queries select.

pub mod balance;
pub mod error;
pub mod model;
pub mod sim;

pub use balance::{balance_heads, HcpPlan, HeadLoadVector};
pub use error::{Constraint, CpError, Result};
pub use model::{
    alpha_from_indices, choose_placement, hcp_comm, hcp_mem, scp_comm, scp_mem, solve_hybrid, AlphaMatrix, AlphaSource,
    AttnShape, CPConfig, Candidate, ClusterSpec, CpLayout, Placement,
};
pub use sim::{run_hybrid_sparse_cp, verify_equivalence, MessageLog, Phase, SimDevice};
