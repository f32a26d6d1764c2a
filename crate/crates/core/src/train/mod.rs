//! Optimisation: Adam, augmentation, per-image fitting and the regressor.

pub mod adam;
pub mod augment;
pub mod fit;
pub mod regressor;

pub use adam::Adam;
pub use augment::{augment_sample, AugmentConfig, Augmentation};
pub use fit::{fit_single, fit_to_points, initial_placement, FitConfig, FitResult, TraceEntry};
pub use regressor::{
    init_regressor, train_regressor, validate_regressor, validation_split, EpochRecord, InputSpec,
    RegressorModel, TrainConfig, TrainReport, TrainSample,
};
