pub mod ops;
pub mod policy;
pub mod resample;
