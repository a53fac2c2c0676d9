pub mod analyzer;
pub mod cgmodel;
pub mod domains;
pub mod engine;
pub mod intent;
pub mod policy;
pub mod trace;
pub mod units;
