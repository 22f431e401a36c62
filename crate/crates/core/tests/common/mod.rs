#![allow(dead_code)]

use figgen_core::corpus::{
    aspect_ratio_filter, prepare_samples, synthesize_corpus, PreparedSample, Tokenizer,
};
use figgen_core::presets;
use figgen_core::FigureRecord;

/// Synthetic records that pass the default aspect-ratio rule.
pub fn records(n: usize, seed: u64) -> Vec<FigureRecord> {
    let c = presets::micro_corpus();
    let mut out = Vec::new();
    let mut batch = 0;
    while out.len() < n {
        let more = synthesize_corpus(n * 2, seed.wrapping_add(batch));
        out.extend(aspect_ratio_filter(more, c.min_aspect, c.max_aspect));
        batch += 1;
    }
    out.truncate(n);
    out
}

pub fn tokenizer(records: &[FigureRecord]) -> Tokenizer {
    let captions: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
    Tokenizer::train(&captions, presets::micro_corpus().tokenizer()).unwrap()
}

pub fn prepared(n: usize, seed: u64) -> (Tokenizer, Vec<PreparedSample>) {
    let recs = records(n, seed);
    let tok = tokenizer(&recs);
    let samples = prepare_samples(&recs, &tok, presets::micro_corpus().resolution);
    (tok, samples)
}

pub mod gradcheck;
pub mod micro;
