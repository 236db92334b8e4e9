//! Privacy-preserving certification of test and vaccination results.
//!
//! Holders keep their certificates in a personal data pod; only a digest of
//! each certificate's canonical form is anchored on a consortium
//! proof-of-authority ledger. Verifiers check a QR-carried presentation
//! against that anchor without any central database.

pub mod credential;
pub mod crypto;
pub mod encoding;
pub mod flows;
pub mod ledger;
pub mod pod;
pub mod qrcodec;
