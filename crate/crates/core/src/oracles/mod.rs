//! Ground truth the fitted flows are judged against.

mod dirichlet;
mod gibbs;
mod special;

pub use dirichlet::{
    dirichlet_entropy, dirichlet_kl, dirichlet_log_pdf, dirichlet_sample, kappa_from_alpha,
    DirichletParams,
};
pub use gibbs::{
    gibbs_cdf, gibbs_option_fit, gibbs_pdf, gibbs_price, gibbs_sample, GibbsOptionModel,
};
pub use special::{digamma, ln_gamma};
