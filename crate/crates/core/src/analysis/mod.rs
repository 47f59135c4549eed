//! Attention density, FLOP counts, latency benchmarks and ablation grids.

pub mod ablation;
pub mod bench;
pub mod density;
pub mod flops;
pub mod svg;

pub use ablation::{grid, run_ablation, AblationAxis, AblationBudget, AblationCell, AblationResult, AblationSetup, StageSet};
pub use bench::{bench_latency, bench_prompt, BenchReport, BenchSpec};
pub use density::{density_profile, text_to_image_density, DensityProfile};
pub use flops::{flops_estimate, flops_report, FlopsBreakdown, FlopsReport, Workload};
