#![allow(dead_code)]

use std::sync::OnceLock;

use kedit_core::lm::{train_lm, LmArch, LmTrainConfig, TransformerLm};
use kedit_core::world::{gen_world, Taxonomy, World, WorldParams};

pub const SUBJECT_LAYER: usize = 1;
pub const RELATION_LAYER: usize = 2;

pub fn arch() -> LmArch {
    LmArch {
        n_layers: 3,
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        local_layers: 1,
        max_len: 12,
        ln_eps: 1e-5,
    }
}

pub fn world() -> World {
    let params = WorldParams {
        seed: 5,
        n_subjects: 8,
        n_krd_subjects: 8,
        n_relations: 12,
        n_objects_per_relation: 4,
    };
    gen_world(&params, &Taxonomy::default_taxonomy()).unwrap()
}

/// Small model trained on `world()`, shared across the tests of one binary.
pub fn trained() -> &'static (World, TransformerLm) {
    static CELL: OnceLock<(World, TransformerLm)> = OnceLock::new();
    CELL.get_or_init(|| {
        let w = world();
        let mut m = TransformerLm::new(arch(), w.vocab.len(), 3).unwrap();
        let cfg = LmTrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 3e-3,
            ..Default::default()
        };
        train_lm(&mut m, &w, &cfg).unwrap();
        (w, m)
    })
}
