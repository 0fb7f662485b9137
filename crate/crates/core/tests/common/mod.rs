#![allow(dead_code)]

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use layoutpaint::backends::{toy::toy_backends, BackendSet, ToySettings, ToyWorld};
use layoutpaint::diffusion::Schedule;
use layoutpaint::layout::{BinaryMask, Layout, ObjectSpec};
use layoutpaint::tensor::Latent;

pub fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |(r, c)| (r0..r1).contains(&r) && (c0..c1).contains(&c)).unwrap()
}

pub fn object(id: &str, prompt: &str, seed: u64, mask: BinaryMask) -> ObjectSpec {
    ObjectSpec {
        id: id.into(),
        prompt: prompt.into(),
        seed,
        mask,
    }
}

pub fn layout(h: usize, w: usize, global: &str, objects: Vec<ObjectSpec>) -> Layout {
    Layout::new(h, w, global, objects).unwrap()
}

/// Registers a seeded random target for every prompt; "" maps to zeros.
pub fn random_world(prompts: &[&str], shape: (usize, usize, usize), seed: u64) -> ToyWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = ToyWorld::new();
    world.register("", Latent::zeros(shape.0, shape.1, shape.2));
    for p in prompts {
        world.register(*p, Latent::randn(shape.0, shape.1, shape.2, &mut rng));
    }
    world
}

pub fn backends(world: ToyWorld, codec_factor: usize) -> BackendSet {
    let settings = ToySettings {
        codec_factor,
        ..ToySettings::default()
    };
    toy_backends(Arc::new(world), Schedule::default(), &settings)
}

pub mod checks;
