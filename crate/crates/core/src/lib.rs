pub mod autodiff;
pub mod geometry;
pub mod harness;
pub mod inference;
pub mod mdn;
pub mod optim;
pub mod render;
pub mod tasks;
pub mod token;
pub mod type_prior;
