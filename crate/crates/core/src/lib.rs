pub mod autodiff;
pub mod features;
pub mod text;
pub mod layers;
pub mod attention;
pub mod config;
pub mod model;
pub mod eval;
pub mod lm;
pub mod search;
pub mod trainer;
pub mod datagen;
pub mod pipeline;
