//! The attack suite: ten algorithms spanning white-, gray-, and black-box
//! oracle tiers, each returning a uniform [`AdversarialResult`].

mod autoattack;
mod boundary;
mod common;
mod config;
mod cw;
mod deepfool;
mod ead;
mod fgsm;
mod geoda;
mod jsma;
mod pgd;
mod square;
mod zoo;

pub use autoattack::{apgd, autoattack, step_halving_trace, ApgdLoss};
pub use boundary::{boundary_attack, boundary_attack_traced};
pub use common::{clip01, per_sample_seed, AdversarialResult, Norm};
pub use config::*;
pub use cw::cw;
pub use deepfool::deepfool;
pub use ead::{ead, soft_threshold};
pub use fgsm::fgsm;
pub use geoda::geoda;
pub use jsma::{jsma, saliency};
pub use pgd::pgd;
pub use square::{square_attack, square_attack_traced};
pub use zoo::zoo;
