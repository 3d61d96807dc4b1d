pub mod detector;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod ingest;
pub mod ldconv;
pub mod losses;
pub mod metrics;
pub mod postprocess;
pub mod refine;
pub mod ssff;
pub mod tensor;
