//! Hand-built DeltaProduct models for permutation groups, modular counting
//! and dihedral groups, plus brute-force verification against oracles.

mod model;
mod permutation;
mod verify;

#[cfg(test)]
mod tests;

pub use model::{
    build_dihedral_two_layer, build_mod_counter, build_sn_one_layer, ConstructedModel, ConstructionKind, InputTrace,
    StateTrace, MARGIN_FACTOR, STATE_TOL,
};
pub use permutation::{perm_to_swaps, Permutation};
pub use verify::{
    counter_oracle, dihedral_oracle, dihedral_running_oracle, oracle_for, symmetric_oracle, verify_construction,
    Oracle, VerifyReport,
};
