//! Synthetic data with known generative parameters.

mod images;
mod mixture;
mod sliced;

pub use images::{glyph_atlas, render_domain_image, Domain, DomainMix, IMAGE_SIZE};
pub use mixture::{Component, MixtureSpec};
pub use sliced::{sliced_wasserstein, wasserstein_1d};
