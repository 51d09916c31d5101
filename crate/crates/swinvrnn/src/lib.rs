pub mod autodiff;
pub mod error;
pub mod layout;
pub mod nn;
