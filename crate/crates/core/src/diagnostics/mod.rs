//! Gradient checking and attention-diffusion measurements.

mod entropy;
mod gradcheck;

pub use entropy::{
    attention_entropy, DiffusionReport, EntropySummary, HeadDiffusion, DIFFUSION_CSV_HEADER,
};
pub use gradcheck::{
    attention_gradcheck, gradcheck, relative_error, scheme_matrix, supported_matrix,
    GradCheckOptions, GradCheckReport, ParamCheck,
};
