//! Complexity accounting, reference oracles and gradient checking.

pub mod flops;
pub mod gradcheck;
pub mod oracle;
pub mod suite;
