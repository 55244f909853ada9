//! Network building blocks. Deterministic layers keep point-estimate
//! weights; [`BayesLinear`] keeps a Gaussian posterior per weight and
//! samples it once per window of frames.

mod bayes;
mod deterministic;
mod params;

pub use bayes::{
    gaussian_log_density, BayesLinear, BayesParams, Prior, WeightDraw, WeightSchedule, DEGENERATE_RHO,
};
pub use deterministic::{ConvBlock, Dense, LstmLayer, LstmState};
pub use params::{dropout_mask, uniform, Bindings, ParamId, ParamStore};
