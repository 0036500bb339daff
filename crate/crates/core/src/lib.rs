//! Risk-aware real-time bidding.
//!
//! A Bayesian logistic-regression CTR model exposes a full predictive
//! distribution per bid request; the strategies in [`strategies`] turn that
//! distribution and a market-price model into bids, and [`simulator`] and
//! [`evaluation`] replay logged second-price auctions to compare them.

pub mod ctr_distribution;
pub mod ctr_model;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod market;
pub mod rng;
pub mod simulator;
pub mod strategies;

pub use ctr_distribution::{CtrMoments, CtrPosterior, Grid, MomentMethod, MomentTable};
pub use ctr_model::{FeatureVector, GaussianWeightModel, TrainConfig};
pub use error::{Error, Result};
pub use market::MarketPriceModel;
pub use simulator::{Dataset, LogRecord, ReplayConfig, ReplayMetrics};
pub use strategies::{BidGrid, Bidder, StrategyConfig, StrategyKind};

use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub(crate) fn digest(bytes: &[u8]) -> String {
    let h = Sha256::digest(bytes);
    hex::encode(&h[..8])
}
