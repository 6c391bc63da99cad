//! Unsupervised camouflaged-object detection at desk scale.
//!
//! The pipeline discovers camouflaged foreground objects without any
//! pixel-level supervision:
//!
//! 1. **backbone** — frozen patch-level features (a deterministic toy
//!    extractor for tests, plus an adapter that loads precomputed features
//!    from disk).
//! 2. **fixed_strategy** — rule-based pseudo-labels over those features
//!    (background-seed similarity voting, plus null/Perlin ablation
//!    generators).
//! 3. **dba_decoder** — a dual-branch decoder with learnable foreground and
//!    background query embeddings and multiplicative attention, trained as a
//!    student with an EMA teacher copy.
//! 4. **apm** — adaptive pseudo-label mixing: a small mask discriminator and
//!    a temporally constrained cosine score blend the fixed-strategy label
//!    with the teacher's prediction.
//! 5. **losses** — inverted-background segmentation BCE, query orthogonality
//!    penalty, discriminator BCE, and the phase-masked total.
//! 6. **look_twice** — connected-component analysis and zoom-in re-inference
//!    for small foreground regions.
//! 7. **metrics** — MAE, S-measure, weighted/mean F-measure, mean E-measure,
//!    and foreground-size bucket reports.
//! 8. **trainer** — the alternating generator/discriminator loop with seeded
//!    reproducibility and checkpointing.
//!
//! Supporting modules: [`config`] (run configuration), [`dataset`] (image and
//! mask I/O), [`synthetic`] (the procedural camouflage corpus used by the
//! test suite and the `synth` CLI subcommand).

pub mod apm;
pub mod backbone;
pub mod config;
pub mod dataset;
pub mod dba_decoder;
mod error;
pub mod fixed_strategy;
pub mod look_twice;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod synthetic;
pub mod trainer;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
