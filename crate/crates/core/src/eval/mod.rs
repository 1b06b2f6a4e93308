//! Metrics and the validation studies of the feature loss.

mod metrics;
mod studies;

pub use metrics::{nrmse, ssim, ssim_real, MetricsRow, SSIM_WINDOW};
pub use studies::{
    blur_band, correlation_map, deblur_descent, line_search_alpha, perturb_blur, perturb_noise, perturbation_study,
    retrieve_neighbors, second_differences, spearman, ssim_correlation_map, CorrelationMap, Deblurred, Perturbation,
    StudyCurve, Summary,
};
