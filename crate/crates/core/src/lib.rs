//! Pseudo-market assignment without money.
//!
//! * [`assignment`]: exact max-weight assignment, VCG item prices, lotteries.
//! * [`regularized`]: the `-beta/x` regularized mechanism and its payments.
//! * [`hz`]: Hylland–Zeckhauser equilibria from a smoothed fixed-point map.
//! * [`sim`]: repeated token auctions with budgets and regret audits.

pub mod assignment;
mod error;
pub mod hz;
pub mod regularized;
pub mod sim;

pub use error::{ApexError, Result};
