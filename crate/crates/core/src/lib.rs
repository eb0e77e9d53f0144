//! Core library for `synthgym`: schema-driven synthesis of mixed-type
//! clinical time series with a recurrent WGAN-GP, plus the statistical
//! validation battery and disclosure-risk metrics used to audit the
//! generated data.
//!
//! The pipeline is: declare a [`schema::DatasetSchema`], load real data into
//! a [`panel::Panel`] ([`ingest`]), fit invertible per-variable transforms
//! and one-hot encode ([`preprocess`]), train the generator/discriminator
//! pair ([`net`], [`train`]), decode generated tensors back to panels, then
//! audit with [`validate`] (three-stage realisticness checks) and
//! [`privacy`] (minimum distances and re-identification risk).

pub mod autodiff;
pub mod ingest;
pub mod net;
pub mod panel;
pub mod preprocess;
pub mod privacy;
pub mod report;
pub mod schema;
pub mod seed;
pub mod train;
pub mod validate;
