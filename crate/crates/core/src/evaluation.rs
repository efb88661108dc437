//! CLIP-style similarity scores of transfer outputs.
//!
//! Scores are raw cosines in `[-1, 1]` between embeddings from an
//! [`Embedder`]. [`MockEmbedder`] is a fixed random projection that lets the
//! harness run without model weights; its values carry no semantic meaning.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::image::RgbImage;
use crate::{rng, Error, Result};

/// Joint text/image embedding model.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

/// Cosine similarity computed in `f64`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape(&[a.len()], &[b.len()]));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Domain("cosine of a zero embedding".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0) as f32)
}

pub fn clip_t2i(image: &RgbImage, prompt: &str, e: &dyn Embedder) -> Result<f32> {
    cosine(&e.embed_image(image)?, &e.embed_text(prompt)?)
}

pub fn clip_i2i(a: &RgbImage, b: &RgbImage, e: &dyn Embedder) -> Result<f32> {
    cosine(&e.embed_image(a)?, &e.embed_image(b)?)
}

const THUMB: usize = 8;

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    image_proj: Array2<f32>,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let inputs = THUMB * THUMB * 3;
        let mut r = rng::stream(seed, "embedder:image");
        let image_proj = Array2::from_shape_vec((dim, inputs), rng::normals(&mut r, dim * inputs, 1.0))
            .expect("sized");
        Self { seed, dim, image_proj }
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(0, 64)
    }
}

impl Embedder for MockEmbedder {
    fn name(&self) -> &str {
        "mock"
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let thumb = image.resized(THUMB, THUMB);
        let v = thumb.data.iter().map(|&x| x - 0.5).collect::<ndarray::Array1<f32>>();
        Ok(self.image_proj.dot(&v).to_vec())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let mut out = vec![0.0f32; self.dim];
        let words = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase);
        for w in words {
            let mut r = rng::stream(self.seed, &format!("embedder:word:{w}"));
            for (o, v) in out.iter_mut().zip(rng::normals(&mut r, self.dim, 1.0)) {
                *o += v;
            }
        }
        if out.iter().all(|&v| v == 0.0) {
            return Err(Error::Domain(format!("prompt `{text}` has no words to embed")));
        }
        Ok(out)
    }
}

/// One row of an evaluation manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub output: PathBuf,
    pub source_prompt: String,
    pub source_image: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub output: PathBuf,
    pub source_prompt: String,
    pub source_image: PathBuf,
    pub clip_t2i: f32,
    pub clip_i2i: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingPair {
    pub output: PathBuf,
    pub source_image: PathBuf,
    pub missing: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub embedder: String,
    pub count: usize,
    pub mean_clip_t2i: f32,
    pub mean_clip_i2i: f32,
    pub pairs: Vec<PairScore>,
    pub missing: Vec<MissingPair>,
}

impl EvalReport {
    /// Builds a report whose aggregates are the means of `pairs`.
    pub fn from_pairs(embedder: &str, pairs: Vec<PairScore>, missing: Vec<MissingPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("no valid pairs to evaluate".into()));
        }
        let n = pairs.len() as f64;
        let mean = |f: fn(&PairScore) -> f32| (pairs.iter().map(|p| f64::from(f(p))).sum::<f64>() / n) as f32;
        Ok(Self {
            embedder: embedder.to_string(),
            count: pairs.len(),
            mean_clip_t2i: mean(|p| p.clip_t2i),
            mean_clip_i2i: mean(|p| p.clip_i2i),
            pairs,
            missing,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// One row per scored pair, followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let to_err = |e: csv::Error| Error::Archive(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        w.write_record(["output", "source_prompt", "source_image", "clip_t2i", "clip_i2i"])
            .map_err(to_err)?;
        for p in &self.pairs {
            w.write_record([
                p.output.display().to_string(),
                p.source_prompt.clone(),
                p.source_image.display().to_string(),
                p.clip_t2i.to_string(),
                p.clip_i2i.to_string(),
            ])
            .map_err(to_err)?;
        }
        w.write_record([
            "mean".to_string(),
            String::new(),
            String::new(),
            self.mean_clip_t2i.to_string(),
            self.mean_clip_i2i.to_string(),
        ])
        .map_err(to_err)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<PairSpec>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Scores every pair whose files exist; the rest are listed as missing.
pub fn evaluate_pairs(pairs: &[PairSpec], base: &Path, e: &dyn Embedder, exec: Exec) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Config("evaluation manifest is empty".into()));
    }
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let outcomes = exec.try_map_range(pairs.len(), |i| -> Result<std::result::Result<PairScore, MissingPair>> {
        let spec = &pairs[i];
        let (out, src) = (resolve(&spec.output), resolve(&spec.source_image));
        let missing: Vec<PathBuf> = [&out, &src].into_iter().filter(|p| !p.exists()).cloned().collect();
        if !missing.is_empty() {
            return Ok(Err(MissingPair {
                output: spec.output.clone(),
                source_image: spec.source_image.clone(),
                missing,
            }));
        }
        let out_img = RgbImage::load(&out)?;
        let src_img = RgbImage::load(&src)?;
        Ok(Ok(PairScore {
            output: spec.output.clone(),
            source_prompt: spec.source_prompt.clone(),
            source_image: spec.source_image.clone(),
            clip_t2i: clip_t2i(&out_img, &spec.source_prompt, e)?,
            clip_i2i: clip_i2i(&out_img, &src_img, e)?,
        }))
    })?;
    let mut scored = Vec::new();
    let mut missing = Vec::new();
    for o in outcomes {
        match o {
            Ok(p) => scored.push(p),
            Err(m) => {
                log::warn!("skipping pair {}: missing {:?}", m.output.display(), m.missing);
                missing.push(m);
            }
        }
    }
    EvalReport::from_pairs(e.name(), scored, missing)
}

pub fn evaluate_directory(manifest: &Path, e: &dyn Embedder) -> Result<EvalReport> {
    let pairs = load_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    evaluate_pairs(&pairs, base, e, Exec::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Fixed(Vec<f32>, Vec<f32>);

    impl Embedder for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn embed_image(&self, _: &RgbImage) -> Result<Vec<f32>> {
            Ok(self.0.clone())
        }
        fn embed_text(&self, _: &str) -> Result<Vec<f32>> {
            Ok(self.1.clone())
        }
    }

    fn img(seed: u32) -> RgbImage {
        RgbImage::from_rgb8(&image::RgbImage::from_fn(16, 16, |x, y| {
            let v = |k: u32| ((x * 31 + y * 17 + seed * 13 + k * 7) % 256) as u8;
            image::Rgb([v(0), v(1), v(2)])
        }))
    }

    #[test]
    fn reference_cosines() {
        let same = Fixed(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]);
        assert!((clip_t2i(&img(0), "x", &same).unwrap() - 1.0).abs() < 1e-7);
        let orth = Fixed(vec![1.0, 0.0], vec![0.0, 5.0]);
        assert_eq!(clip_t2i(&img(0), "x", &orth).unwrap(), 0.0);
        let e = MockEmbedder::default();
        assert!((clip_i2i(&img(3), &img(3), &e).unwrap() - 1.0).abs() < 1e-6);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_matches_direct_formula(
            a in proptest::collection::vec(-1.0f32..1.0, 16),
            b in proptest::collection::vec(-1.0f32..1.0, 16),
        ) {
            let na: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
            let nb: f32 = b.iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assume!(na > 1e-3 && nb > 1e-3);
            let direct = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f32>() / (na * nb);
            prop_assert!((cosine(&a, &b).unwrap() - direct).abs() < 1e-6);
        }
    }

    fn write_pngs(dir: &Path) {
        img(1).save_png(&dir.join("out.png")).unwrap();
        img(2).save_png(&dir.join("src.png")).unwrap();
    }

    fn spec(output: &str) -> PairSpec {
        PairSpec {
            output: output.into(),
            source_prompt: "a cat on grass".into(),
            source_image: "src.png".into(),
        }
    }

    #[test]
    fn aggregates_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        write_pngs(dir.path());
        let e = MockEmbedder::default();
        let one = evaluate_pairs(&[spec("out.png")], dir.path(), &e, Exec::Sequential).unwrap();
        assert_eq!(one.count, 1);
        assert_eq!(one.mean_clip_t2i, one.pairs[0].clip_t2i);
        assert_eq!(one.mean_clip_i2i, one.pairs[0].clip_i2i);
        let two = evaluate_pairs(&[spec("out.png"), spec("out.png")], dir.path(), &e, Exec::Parallel).unwrap();
        assert_eq!(two.mean_clip_t2i, one.mean_clip_t2i);
        let gap = evaluate_pairs(&[spec("out.png"), spec("gone.png")], dir.path(), &e, Exec::Parallel).unwrap();
        assert_eq!(gap.count, 1);
        assert_eq!(gap.missing.len(), 1);
        assert_eq!(gap.mean_clip_i2i, one.mean_clip_i2i);
        assert!(evaluate_pairs(&[spec("gone.png")], dir.path(), &e, Exec::Sequential).is_err());
        assert!(matches!(
            evaluate_pairs(&[], dir.path(), &e, Exec::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reencoding_keeps_scores() {
        let dir = tempfile::tempdir().unwrap();
        write_pngs(dir.path());
        let e = MockEmbedder::default();
        let a = evaluate_pairs(&[spec("out.png")], dir.path(), &e, Exec::Sequential).unwrap();
        let again = RgbImage::load(&dir.path().join("out.png")).unwrap();
        again.save_png(&dir.path().join("out2.png")).unwrap();
        let b = evaluate_pairs(&[spec("out2.png")], dir.path(), &e, Exec::Sequential).unwrap();
        assert_eq!(a.pairs[0].clip_t2i, b.pairs[0].clip_t2i);
        assert_eq!(a.pairs[0].clip_i2i, b.pairs[0].clip_i2i);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        write_pngs(dir.path());
        let manifest = dir.path().join("pairs.json");
        std::fs::write(&manifest, serde_json::to_vec(&[spec("out.png")]).unwrap()).unwrap();
        let r = evaluate_directory(&manifest, &MockEmbedder::default()).unwrap();
        r.write_json(&dir.path().join("r.json")).unwrap();
        r.write_csv(&dir.path().join("r.csv")).unwrap();
        let back: EvalReport = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }
}
