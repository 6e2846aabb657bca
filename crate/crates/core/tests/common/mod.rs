#![allow(dead_code)]

use poss_core::draft::{SpecialistBank, Span};
use poss_core::model::{ModelConfig, TargetModel};

pub fn tiny_config(vocab: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len,
        ..Default::default()
    }
}

pub fn tiny_target(seed: u64) -> TargetModel<f32> {
    TargetModel::init(tiny_config(258, 96), seed).unwrap()
}

pub fn bank(target: &TargetModel<f32>, span: Span, depth: usize, seed: u64) -> SpecialistBank<f32> {
    SpecialistBank::init(&target.config, span, depth, seed).unwrap()
}

/// Banks for single-draft and PosS-1/2/3 at training depth 6.
pub fn method_banks(target: &TargetModel<f32>, seed: u64) -> Vec<(&'static str, SpecialistBank<f32>)> {
    vec![
        ("single-draft", bank(target, Span::Infinite, 6, seed)),
        ("poss-1", bank(target, Span::Finite(1), 6, seed + 1)),
        ("poss-2", bank(target, Span::Finite(2), 6, seed + 2)),
        ("poss-3", bank(target, Span::Finite(3), 6, seed + 3)),
    ]
}

pub fn prompt(i: usize, len: usize) -> Vec<u32> {
    let mut p = vec![0u32];
    p.extend((0..len - 1).map(|k| ((i * 131 + k * 17) % 256) as u32 + 2));
    p
}
pub mod desk;
pub mod grad;
