//! Offset grids, deformable sampling and AdaSTN alignment.

mod adastn;
mod deform;
mod grid;

pub use adastn::{draw_zero_mask, AdaStn, AdaStnConfig, AlignMode, AlignmentStack};
pub use deform::{
    deform_conv, deform_im2col, deform_im2col_backward, deformable_sample, deformable_sample_backward_generic,
    deformable_sample_generic, AffineOffsets, DeformIm2col, DeformableKernel, SampleGrads,
};
pub use grid::{affine_offsets, affine_offsets_backward, regular_grid, OffsetField, RegularGrid, GRID, TAPS};
