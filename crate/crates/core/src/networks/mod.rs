//! The two generators, the coarse/fine patch discriminators and the frozen
//! perception network.

pub mod discriminator;
pub mod generator;
pub mod params;
pub mod perception;

pub use discriminator::{
    build_discriminator, receptive_field, DiscriminatorKind, DiscriminatorScale, PatchDiscriminator, PatchGrid,
};
pub use generator::{build_generator, Generator, GeneratorConfig};
pub use params::{derive_rng, NamedParam, ParamSet, INIT_STD};
pub use perception::{
    build_perception_net, perception_features, ConvClassifier, PerceptionNet, PerceptionSource,
};
