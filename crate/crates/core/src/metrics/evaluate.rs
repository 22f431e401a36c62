use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{fid, inception_score, kid, FeatureSet};
use crate::autoencoder::{ConvFeatureExtractor, ExtractorKind, FeatureExtractor};
use crate::corpus::{load_manifest, pad_and_resize, FigureRecord, MANIFEST_FILE};
use crate::imaging::{batch_tensor, Image};
use crate::rng::SeedStream;
use crate::{Error, Result};

const CHUNK: usize = 16;

/// Pooled conv features with a fixed random classifier head, standing in for a pretrained
/// image classifier.
pub struct MetricExtractor {
    conv: ConvFeatureExtractor,
    head: Tensor,
    identity: String,
}

impl MetricExtractor {
    pub const NUM_CLASSES: usize = 16;

    pub fn new(seed: u64, device: &Device) -> Result<Self> {
        let conv = ConvFeatureExtractor::new(ExtractorKind::Vgg, seed, DType::F32, device)?;
        let probe = Tensor::zeros((1, 3, 16, 16), DType::F32, device)?;
        let dim: usize = conv
            .features(&probe)?
            .iter()
            .map(|f| f.dim(1))
            .sum::<Result<_, _>>()?;
        let mut rng = SeedStream::derive(seed, 0x4ead);
        let head = (rng.normal_tensor((Self::NUM_CLASSES, dim), DType::F32, device)?
            / (dim as f64).sqrt())?;
        let identity = format!("pooled-{}:head{}", conv.identity(), Self::NUM_CLASSES);
        Ok(Self {
            conv,
            head,
            identity,
        })
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    /// Spatially averaged activations of every layer, concatenated, plus head logits.
    pub fn feature_set(&self, images: &[&Image]) -> Result<FeatureSet> {
        let dev = self.head.device();
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        let mut dim = 0;
        for chunk in images.chunks(CHUNK) {
            let x = batch_tensor(chunk, DType::F32, dev)?;
            let pooled = self
                .conv
                .features(&x)?
                .iter()
                .map(|f| Ok(f.mean((2, 3))?))
                .collect::<Result<Vec<_>>>()?;
            let f = Tensor::cat(&pooled, 1)?;
            let l = f.matmul(&self.head.t()?)?;
            dim = f.dim(1)?;
            feats.extend(f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
            logits.extend(l.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        }
        let n = images.len();
        FeatureSet::new(
            DMatrix::from_row_slice(n, dim, &feats),
            DMatrix::from_row_slice(n, Self::NUM_CLASSES, &logits),
            self.identity.clone(),
        )
    }
}

/// Mean over pairs of `sum_l w_l * mean_position ||phi_l(gen) - phi_l(ref)||_2`, the norm taken
/// over channels.
pub fn ocr_sim(extractor: &dyn FeatureExtractor, pairs: &[(&Image, &Image)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("ocr_sim needs at least one image pair".into()));
    }
    if let Some((g, _)) = pairs
        .iter()
        .find(|(g, r)| (g.width(), g.height()) != (r.width(), r.height()))
    {
        return Err(Error::Shape(format!(
            "paired images differ in size ({}x{})",
            g.width(),
            g.height()
        )));
    }
    let dev = Device::Cpu;
    let weights = extractor.layer_weights();
    let mut total = 0.0;
    for chunk in pairs.chunks(CHUNK) {
        let gen: Vec<&Image> = chunk.iter().map(|p| p.0).collect();
        let refs: Vec<&Image> = chunk.iter().map(|p| p.1).collect();
        let fg = extractor.features(&batch_tensor(&gen, DType::F32, &dev)?)?;
        let fr = extractor.features(&batch_tensor(&refs, DType::F32, &dev)?)?;
        for ((a, b), w) in fg.iter().zip(&fr).zip(weights) {
            let dist = (a - b)?
                .to_dtype(DType::F64)?
                .sqr()?
                .sum(1)?
                .sqrt()?
                .mean((1, 2))?
                .sum_all()?
                .to_scalar::<f64>()?;
            total += w * dist;
        }
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub is_mean: f64,
    pub kid: f64,
    pub ocr_sim: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub extractor_identity: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricReport {
    /// Scores from different extractors live on different scales.
    pub fn comparable_with(&self, other: &MetricReport) -> bool {
        self.extractor_identity == other.extractor_identity
    }

    pub fn is_finite(&self) -> bool {
        [self.fid, self.is_mean, self.kid, self.ocr_sim]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Aligned two-line table of the four scores.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>12} {:>12} {:>12} {:>12} {:>6}",
            "FID (lower)", "IS (higher)", "KID (lower)", "OCR-SIM (lower)", "n"
        );
        let _ = write!(
            s,
            "{:>12.4} {:>12.4} {:>12.6} {:>15.4} {:>6}",
            self.fid, self.is_mean, self.kid, self.ocr_sim, self.n_generated
        );
        s
    }
}

/// Pairs each generated record with an unused reference record of the same caption.
fn pair_by_caption<'a>(
    generated: &'a [FigureRecord],
    reference: &'a [FigureRecord],
) -> Result<Vec<(&'a FigureRecord, &'a FigureRecord)>> {
    let mut pool: HashMap<&str, Vec<&FigureRecord>> = HashMap::new();
    for r in reference.iter().rev() {
        pool.entry(r.caption.as_str()).or_default().push(r);
    }
    let mut pairs = Vec::with_capacity(generated.len());
    let mut unpaired = Vec::new();
    for g in generated {
        match pool.get_mut(g.caption.as_str()).and_then(Vec::pop) {
            Some(r) => pairs.push((g, r)),
            None => unpaired.push(g.id.clone()),
        }
    }
    if !unpaired.is_empty() {
        return Err(Error::Unpaired { ids: unpaired });
    }
    Ok(pairs)
}

/// Scores the first `n` generated records against caption-matched reference records.
///
/// Both sides are white-padded and resized to the side of the first generated image.
pub fn evaluate_records(
    generated: &[FigureRecord],
    reference: &[FigureRecord],
    extractor: &MetricExtractor,
    ocr: &dyn FeatureExtractor,
    n: usize,
) -> Result<MetricReport> {
    if n < 2 {
        return Err(Error::Invalid(
            "evaluation needs at least two samples".into(),
        ));
    }
    if n > generated.len() {
        return Err(Error::Invalid(format!(
            "requested {n} samples but only {} were generated",
            generated.len()
        )));
    }
    let pairs = pair_by_caption(&generated[..n], reference)?;
    let side = generated[0].image.width().max(generated[0].image.height());
    let prep = |r: &FigureRecord| pad_and_resize(&r.image, side);
    let gen: Vec<Image> = pairs.iter().map(|(g, _)| prep(g)).collect();
    let refs: Vec<Image> = pairs.iter().map(|(_, r)| prep(r)).collect();
    let gen_refs: Vec<&Image> = gen.iter().collect();
    let ref_refs: Vec<&Image> = refs.iter().collect();

    let fg = extractor.feature_set(&gen_refs)?;
    let fr = extractor.feature_set(&ref_refs)?;
    let image_pairs: Vec<(&Image, &Image)> = gen.iter().zip(&refs).collect();
    Ok(MetricReport {
        fid: fid(&fr, &fg)?,
        is_mean: inception_score(&fg.logits)?,
        kid: kid(&fr, &fg)?,
        ocr_sim: ocr_sim(ocr, &image_pairs)?,
        n_generated: n,
        n_reference: n,
        extractor_identity: format!("{}+{}", extractor.identity(), ocr.identity()),
        config: serde_json::Value::Null,
    })
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// [`evaluate_records`] over two manifests (or directories holding one).
pub fn evaluate(
    generated: &Path,
    reference: &Path,
    extractor: &MetricExtractor,
    ocr: &dyn FeatureExtractor,
    n: usize,
) -> Result<MetricReport> {
    let gen = load_manifest(&manifest_path(generated))?;
    let refs = load_manifest(&manifest_path(reference))?;
    evaluate_records(&gen, &refs, extractor, ocr, n)
}
