//! Optimization: loss terms, gradients, Adam and the training loop.

mod adam;
mod check;
mod grad;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{gradient_check, random_check_problem, relative_error, CheckProblem, GradCheckReport};
pub use grad::{
    backward, evaluate, smoothness_signature, Batch, BatchRay, BlockSet, DensityProbe, DepthTarget, GradientSet, LossBreakdown, Objective,
};
pub use loss::{image_psnr, loss_density_preserve, loss_depth, loss_feature, loss_l1, loss_photometric, loss_tv, psnr, LossWeights};
pub use trainer::{
    run_training, IterationMetrics, MetricsLog, ProgressSink, Regime, Schedule, Tee, TrainConfig, TrainInputs, TrainOutcome, TrainView,
};
