pub mod assembly;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod estimation;
pub mod families;
pub mod inference;
pub mod model_spec;
pub mod simulate;
pub mod sparse;
pub mod splines;
