//! Figure/caption ingestion: aspect-ratio filtering, white padding, tokenization,
//! train/val splitting and the synthetic desk-scale corpus.

mod manifest;
mod synth;
mod tokenizer;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, write_manifest, ManifestEntry, MANIFEST_FILE};
pub use synth::{synthesize_corpus, TemplateClass};
pub use tokenizer::{
    TokenizedCaption, Tokenizer, TokenizerConfig, BOS_ID, EOS_ID, NUM_SPECIALS, PAD_ID, UNK_ID,
};

use crate::imaging::Image;
use crate::rng::SeedStream;
use crate::{Error, Result};

/// One figure with its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct FigureRecord {
    pub id: String,
    pub image: Image,
    pub caption: String,
    pub source_width: usize,
    pub source_height: usize,
}

impl FigureRecord {
    pub fn new(id: impl Into<String>, image: Image, caption: impl Into<String>) -> Result<Self> {
        let caption = caption.into();
        let id = id.into();
        if caption.trim().is_empty() {
            return Err(Error::Invalid(format!("record {id} has an empty caption")));
        }
        Ok(Self {
            source_width: image.width(),
            source_height: image.height(),
            id,
            image,
            caption,
        })
    }

    /// width / height
    pub fn aspect_ratio(&self) -> f64 {
        self.source_width as f64 / self.source_height as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub resolution: usize,
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub val_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            resolution: 512,
            min_aspect: 0.5,
            max_aspect: 2.0,
            vocab_size: 16384,
            max_tokens: 256,
            val_fraction: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_aspect > 0.0 && self.max_aspect >= self.min_aspect) {
            return Err(Error::Config("aspect bounds need 0 < min <= max".into()));
        }
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        self.tokenizer().validate()
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            vocab_size: self.vocab_size,
            max_len: self.max_tokens,
        }
    }
}

/// Keeps the records with `lo <= width / height <= hi`, in input order.
pub fn aspect_ratio_filter(records: Vec<FigureRecord>, lo: f64, hi: f64) -> Vec<FigureRecord> {
    records
        .into_iter()
        .filter(|r| {
            let ratio = r.aspect_ratio();
            lo <= ratio && ratio <= hi
        })
        .collect()
}

/// Centers the image on a white `max(H, W)` square canvas.
pub fn pad_to_square(image: &Image) -> Image {
    let side = image.width().max(image.height());
    let mut canvas = Image::white(side, side);
    canvas.blit(
        image,
        (side - image.width()) / 2,
        (side - image.height()) / 2,
    );
    canvas
}

/// White-pads to a square, then resamples to `target x target`.
pub fn pad_and_resize(image: &Image, target: usize) -> Image {
    pad_to_square(image).resize(target, target)
}

/// A record ready for training: square image plus fixed-length token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub caption: String,
    pub image: Image,
    pub tokens: TokenizedCaption,
}

pub fn prepare_samples(
    records: &[FigureRecord],
    tokenizer: &Tokenizer,
    resolution: usize,
) -> Vec<PreparedSample> {
    records
        .par_iter()
        .map(|r| PreparedSample {
            id: r.id.clone(),
            caption: r.caption.clone(),
            image: pad_and_resize(&r.image, resolution),
            tokens: tokenizer.encode(&r.caption),
        })
        .collect()
}

/// Seeded split; both halves keep corpus order.
pub fn split_train_val(ids: &[String], val_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    SeedStream::derive(seed, 0x5917).shuffle(&mut order);
    let n_val = ((ids.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(ids.len().saturating_sub(1));
    let mut is_val = vec![false; ids.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (id, v) in ids.iter().zip(is_val) {
        if v {
            val.push(id.clone());
        } else {
            train.push(id.clone());
        }
    }
    (train, val)
}

/// Counts of the aspect ratios falling into `[edges[i], edges[i+1])`; values outside the
/// edge range go to the first or last bin.
pub fn ratio_histogram(records: &[FigureRecord], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len().saturating_sub(1).max(1);
    let mut counts = vec![0; bins];
    for r in records {
        let ratio = r.aspect_ratio();
        let idx = edges
            .windows(2)
            .position(|w| ratio >= w[0] && ratio < w[1])
            .unwrap_or(if ratio < edges[0] { 0 } else { bins - 1 });
        counts[idx] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(w: usize, h: usize) -> FigureRecord {
        FigureRecord::new(format!("{w}x{h}"), Image::filled(w, h, [0.0; 3]), "cap").unwrap()
    }

    #[test]
    fn boundary_ratio_is_kept() {
        let kept = aspect_ratio_filter(vec![record(800, 400)], 0.5, 2.0);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn wide_record_is_dropped() {
        assert!(aspect_ratio_filter(vec![record(900, 300)], 0.5, 2.0).is_empty());
    }

    #[test]
    fn filter_keeps_exactly_in_range_records_in_order() {
        // 300x900 has ratio 1/3 and 1000x450 has ratio 2.22; both fall outside [0.5, 2]
        let kept = aspect_ratio_filter(
            vec![record(512, 512), record(300, 900), record(1000, 450)],
            0.5,
            2.0,
        );
        let ids: Vec<_> = kept.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["512x512"]);
    }

    #[test]
    fn blank_caption_is_rejected() {
        assert!(FigureRecord::new("x", Image::white(2, 2), "  \n ").is_err());
    }

    #[test]
    fn wide_image_is_vertically_centered() {
        let img = Image::filled(600, 300, [0.0; 3]);
        let canvas = pad_to_square(&img);
        assert_eq!((canvas.width(), canvas.height()), (600, 600));
        assert_eq!(canvas.pixel(0, 149), [1.0; 3]);
        assert_eq!(canvas.pixel(0, 150), [0.0; 3]);
        assert_eq!(canvas.pixel(599, 449), [0.0; 3]);
        assert_eq!(canvas.pixel(599, 450), [1.0; 3]);
        let out = pad_and_resize(&img, 512);
        assert_eq!((out.width(), out.height()), (512, 512));
    }

    #[test]
    fn square_input_at_target_size_is_unchanged() {
        let img = Image::filled(512, 512, [0.0; 3]);
        assert_eq!(pad_and_resize(&img, 512), img);
    }

    #[test]
    fn checkerboard_corners_survive_and_padding_is_white() {
        // 4 wide, 2 tall: one white row above and below on the 4x4 canvas.
        let mut img = Image::white(4, 2);
        for y in 0..2 {
            for x in 0..4 {
                let v = ((x + y) % 2) as f32;
                img.put(x, y, [v; 3]);
            }
        }
        let out = pad_and_resize(&img, 4);
        for x in 0..4 {
            assert_eq!(out.pixel(x, 0), [1.0; 3]);
            assert_eq!(out.pixel(x, 3), [1.0; 3]);
        }
        assert_eq!(out.pixel(0, 1), img.pixel(0, 0));
        assert_eq!(out.pixel(3, 1), img.pixel(3, 0));
        assert_eq!(out.pixel(0, 2), img.pixel(0, 1));
        assert_eq!(out.pixel(3, 2), img.pixel(3, 1));
    }

    #[test]
    fn one_pixel_input_gives_uniform_output() {
        let img = Image::filled(1, 1, [0.2, 0.4, 0.6]);
        let out = pad_and_resize(&img, 8);
        for y in 0..8 {
            for x in 0..8 {
                let p = out.pixel(x, y);
                assert!((p[0] - 0.2).abs() < 1e-6 && (p[2] - 0.6).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let ids: Vec<String> = (0..50).map(|i| format!("r{i}")).collect();
        let (t1, v1) = split_train_val(&ids, 0.2, 9);
        let (t2, v2) = split_train_val(&ids, 0.2, 9);
        assert_eq!((t1.clone(), v1.clone()), (t2, v2));
        assert_eq!(v1.len(), 10);
        assert_eq!(t1.len() + v1.len(), 50);
        assert!(v1.iter().all(|v| !t1.contains(v)));
        let (_, v3) = split_train_val(&ids, 0.2, 10);
        assert_ne!(v1, v3);
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(dims in prop::collection::vec((1usize..400, 1usize..400), 0..30)) {
            let records: Vec<_> = dims.iter().map(|&(w, h)| record(w, h)).collect();
            let once = aspect_ratio_filter(records, 0.5, 2.0);
            let twice = aspect_ratio_filter(once.clone(), 0.5, 2.0);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn padding_conserves_content_and_output_is_square(
            w in 1usize..24, h in 1usize..24, target in 1usize..20, seed in 0u64..1000
        ) {
            let mut rng = SeedStream::new(seed);
            let data: Vec<f32> = (0..w * h * 3).map(|_| rng.uniform() as f32).collect();
            let img = Image::from_raw(w, h, data.clone()).unwrap();
            let canvas = pad_to_square(&img);
            let side = w.max(h);
            let (ox, oy) = ((side - w) / 2, (side - h) / 2);
            let mut content = Vec::new();
            for y in 0..side {
                for x in 0..side {
                    let p = canvas.pixel(x, y);
                    if x >= ox && x < ox + w && y >= oy && y < oy + h {
                        content.extend_from_slice(&p);
                    } else {
                        prop_assert_eq!(p, [1.0; 3]);
                    }
                }
            }
            let mut expected = data;
            expected.sort_by(f32::total_cmp);
            content.sort_by(f32::total_cmp);
            prop_assert_eq!(content, expected);

            let out = pad_and_resize(&img, target);
            prop_assert_eq!((out.width(), out.height()), (target, target));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
