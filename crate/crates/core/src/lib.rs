pub mod arch;
pub mod autodiff;
pub mod latency;
pub mod nn;
pub mod superkernel;
pub mod synth;
pub mod network;
pub mod search;
pub mod scale;
pub mod postprocess;
