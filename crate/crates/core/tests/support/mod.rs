pub mod fixtures;
pub mod gradcases;
pub mod identities;
pub mod oracles;
