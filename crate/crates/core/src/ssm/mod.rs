//! State-space sequence modelling: recurrence kernels, value-level scans and
//! differentiable bidirectional blocks.

pub mod block;
pub mod kernels;
pub mod scan;

pub use block::{
    run_stack, BidirectionalBlock, BlockOptions, DirectionParams, FixedDirection,
    SelectiveDirection, SsmMode, SsmStack,
};
pub use kernels::ScanKernel;
pub use scan::{
    scan_parallel, scan_sequential, selective_parameters, selective_scan_reference,
    SelectiveProjections, SelectiveStep, SsmDirectionParams, StateMatrix,
};
