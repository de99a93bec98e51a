//! Shared fixtures for the integration suites.

#![allow(dead_code)]

use nuseg::config::RunConfig;
use nuseg::data::{make_registry, ColorStats, Dataset, DomainSpec, GenOptions};
use nuseg::types::DomainRegistry;

/// Central-difference gradient of a scalar function at one coordinate.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Small-but-complete run config used by the fast integration tests.
pub fn tiny_config() -> RunConfig {
    RunConfig::from_text(
        "image_size: 32\npatch_size: 8\nencoder.dim: 16\nencoder.heads: 2\nencoder.depth: 3\nencoder.mlp_ratio: 2\nadapter.rank: 4\noptim.epochs: 2\noptim.batch_size: 2\n",
    )
    .unwrap()
}

pub fn tiny_spec(name: &str) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        count: (1, 2),
        radius: (3.0, 5.0),
        eccentricity: (1.0, 1.3),
        fg: ColorStats {
            mean: [0.85, 0.75, 0.88],
            std: 0.02,
        },
        bg: ColorStats {
            mean: [0.10, 0.12, 0.16],
            std: 0.02,
        },
        texture_noise: 0.02,
        allow_overlap: false,
    }
}

pub fn tiny_domains(k: usize, images: usize, seed: u64) -> (DomainRegistry, Vec<Dataset>) {
    let specs: Vec<DomainSpec> = (0..k).map(|i| tiny_spec(&format!("dom{i}"))).collect();
    let opts = GenOptions {
        images_per_domain: images,
        image_size: 32,
        seed,
        test_fraction: 0.25,
    };
    make_registry(&specs, &opts).unwrap()
}
