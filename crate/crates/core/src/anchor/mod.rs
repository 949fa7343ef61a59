//! Two-stage synthesis: a low-resolution anchor guides a high-resolution
//! flow through a gated feature injector.

mod degrade;
mod hr;
mod injector;

pub use degrade::{degrade, gaussian_blur, gaussian_kernel, DegradeConfig};
pub use hr::{sample_hr, train_stage2, two_stage_sample, HrConfig, HrNet, HrSource, InjectAt};
pub use injector::{
    gate_graph, inject, inject_graph, injector_gate, refine_anchor, refine_graph, scale_factor, InjectorParams,
    InjectorVars,
};
