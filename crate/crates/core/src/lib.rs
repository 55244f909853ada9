pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod labels;
pub mod layers;
pub mod losses;
pub mod model;
pub mod seeds;
pub mod stats;
