// `!(x > 0.0)` is used on purpose throughout so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cqlf;
pub mod des;
pub mod diffusion;
pub mod fluid;
pub mod harris;
pub mod interarrival;
pub mod linalg;
pub mod lyapunov;
pub mod phasetype;
pub mod psi;
pub mod stats;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` of the generator seeded by `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
    #[doc = include_str!("../../../book/src/psi.md")]
    mod psi {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/interchange.md")]
    mod interchange {}
    #[doc = include_str!("../../../book/src/harris.md")]
    mod harris {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
