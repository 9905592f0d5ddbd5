//! Desk-scale training and evaluation kit for dual-head reward models.
//!
//! One transformer backbone feeds two linear heads: a reward head scoring
//! whole responses and a policy head producing next-token logits. Training
//! combines the Bradley-Terry pairwise reward loss with a DPO policy loss
//! against a frozen reference snapshot, weighted by a policy ratio `alpha`,
//! so both heads supervise the shared backbone. The eval side covers
//! pairwise accuracy, cross-dataset accuracy matrices with relevant-group
//! averages, best-of-N reranking with top-k recall against a judge, and
//! implicit rewards from a DPO-trained policy.

pub mod data;
pub mod eval;
pub mod fingerprint;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
