//! Semantic correspondence between source and target by cosine ranking of
//! DIFT features.

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, FeatureMap};
use crate::exec::Exec;
use crate::latent::Latent;
use crate::schedule::Timestep;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    /// Recompute the correspondence at every deviated step from that step's
    /// predicted-x0 pair.
    Progressive,
    /// Compute once from the clean encodings and reuse.
    Initial,
}

impl std::str::FromStr for MatchingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(Self::Progressive),
            "initial" => Ok(Self::Initial),
            other => Err(Error::Config(format!("unknown matching mode `{other}`"))),
        }
    }
}

/// Total map from every source location to its best target location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMap {
    /// Source grid `(h, w)`.
    pub grid: (usize, usize),
    /// Target grid `(h', w')`.
    pub target_grid: (usize, usize),
    /// Row-major over the source grid.
    pub mapping: Vec<(usize, usize)>,
    /// Cosine similarity of each matched pair.
    pub score: Array2<f32>,
    pub mode: MatchingMode,
}

impl CorrelationMap {
    pub fn target_of(&self, i: usize, j: usize) -> (usize, usize) {
        self.mapping[i * self.grid.1 + j]
    }

    pub fn is_identity(&self) -> bool {
        self.grid == self.target_grid
            && self
                .mapping
                .iter()
                .enumerate()
                .all(|(k, &(i, j))| k == i * self.grid.1 + j)
    }

    pub fn mean_score(&self) -> f32 {
        self.score.mean().unwrap_or(0.0)
    }

    /// Nearest-neighbor up-sampling onto finer source/target grids.
    ///
    /// Each fine location follows its coarse cell's match and keeps its
    /// offset inside the cell, so an identity map stays an identity.
    pub fn upsample(&self, grid: (usize, usize), target_grid: (usize, usize)) -> Result<Self> {
        if (grid, target_grid) == (self.grid, self.target_grid) {
            return Ok(self.clone());
        }
        let (h, w) = grid;
        let (th, tw) = target_grid;
        let (ch, cw) = self.grid;
        let (cth, ctw) = self.target_grid;
        if h < ch || w < cw || th < cth || tw < ctw {
            return Err(Error::Contract("correlation maps can only be up-sampled".into()));
        }
        let (sy, sx) = (h / ch, w / cw);
        let (ty, tx) = (th / cth, tw / ctw);
        let mut mapping = Vec::with_capacity(h * w);
        let mut score = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let (ci, cj) = ((i * ch / h).min(ch - 1), (j * cw / w).min(cw - 1));
                let (p, q) = self.target_of(ci, cj);
                let (oy, ox) = (i.saturating_sub(ci * sy), j.saturating_sub(cj * sx));
                let ti = (p * ty + oy.min(ty.saturating_sub(1))).min(th - 1);
                let tj = (q * tx + ox.min(tx.saturating_sub(1))).min(tw - 1);
                mapping.push((ti, tj));
                score[[i, j]] = self.score[[ci, cj]];
            }
        }
        Ok(Self {
            grid,
            target_grid,
            mapping,
            score,
            mode: self.mode,
        })
    }
}

// Location-major unit vectors (zero vectors stay zero).
fn unit_vectors(f: &FeatureMap, exec: Exec) -> Vec<f64> {
    let (d, h, w) = f.data.dim();
    let rows = exec.map_range(h * w, |loc| {
        let (i, j) = (loc / w, loc % w);
        let v: Vec<f64> = (0..d).map(|k| f64::from(f.data[[k, i, j]])).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.into_iter().map(|x| x / norm).collect()
        } else {
            v
        }
    });
    rows.into_iter().flatten().collect()
}

fn check_dims(f_src: &FeatureMap, f_tar: &FeatureMap) -> Result<()> {
    if f_src.dim() != f_tar.dim() {
        return Err(Error::shape(&[f_src.dim()], &[f_tar.dim()]));
    }
    Ok(())
}

/// Cosine similarity of every source/target location pair, indexed
/// `[i, j, i', j']`.
pub fn cosine_similarity_field(f_src: &FeatureMap, f_tar: &FeatureMap) -> Result<Array4<f32>> {
    cosine_similarity_field_with(f_src, f_tar, Exec::default())
}

pub fn cosine_similarity_field_with(f_src: &FeatureMap, f_tar: &FeatureMap, exec: Exec) -> Result<Array4<f32>> {
    check_dims(f_src, f_tar)?;
    let d = f_src.dim();
    let (h, w) = f_src.grid();
    let (th, tw) = f_tar.grid();
    let src = unit_vectors(f_src, exec);
    let tar = unit_vectors(f_tar, exec);
    let n_tar = th * tw;
    let mut flat = vec![0.0f32; h * w * n_tar];
    if n_tar > 0 {
        exec.fill_chunks(&mut flat, n_tar, |s, row| {
            let a = &src[s * d..(s + 1) * d];
            for (t, out) in row.iter_mut().enumerate() {
                let b = &tar[t * d..(t + 1) * d];
                *out = dot(a, b).clamp(-1.0, 1.0) as f32;
            }
        });
    }
    Ok(Array4::from_shape_vec((h, w, th, tw), flat).expect("sized"))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-source argmax of cosine similarity; ties go to the lowest row-major
/// target index.
pub fn build_correlation_map(f_src: &FeatureMap, f_tar: &FeatureMap) -> Result<CorrelationMap> {
    build_correlation_map_with(f_src, f_tar, Exec::default())
}

pub fn build_correlation_map_with(f_src: &FeatureMap, f_tar: &FeatureMap, exec: Exec) -> Result<CorrelationMap> {
    check_dims(f_src, f_tar)?;
    let d = f_src.dim();
    let (h, w) = f_src.grid();
    let (th, tw) = f_tar.grid();
    if th * tw == 0 {
        return Err(Error::Contract("target feature grid is empty".into()));
    }
    let src = unit_vectors(f_src, exec);
    let tar = unit_vectors(f_tar, exec);
    let best = exec.map_range(h * w, |s| {
        let a = &src[s * d..(s + 1) * d];
        let mut best = (0usize, f64::NEG_INFINITY);
        for t in 0..th * tw {
            let sim = dot(a, &tar[t * d..(t + 1) * d]);
            if sim > best.1 {
                best = (t, sim);
            }
        }
        best
    });
    let mapping = best.iter().map(|&(t, _)| (t / tw, t % tw)).collect();
    let score = Array2::from_shape_fn((h, w), |(i, j)| best[i * w + j].1.clamp(-1.0, 1.0) as f32);
    Ok(CorrelationMap {
        grid: (h, w),
        target_grid: (th, tw),
        mapping,
        score,
        mode: MatchingMode::Progressive,
    })
}

/// Gathers target features into source positions: `out[·, i, j] = x0_tar[·, C(i, j)]`.
pub fn apply_correlation(c: &CorrelationMap, x0_tar: &Latent) -> Result<Latent> {
    if x0_tar.grid() != c.target_grid {
        let (th, tw) = c.target_grid;
        let (h, w) = x0_tar.grid();
        return Err(Error::shape(&[x0_tar.channels(), th, tw], &[x0_tar.channels(), h, w]));
    }
    let (h, w) = c.grid;
    let data = Array3::from_shape_fn((x0_tar.channels(), h, w), |(k, i, j)| {
        let (p, q) = c.target_of(i, j);
        x0_tar.data[[k, p, q]]
    });
    Ok(Latent::new(data))
}

/// Matching state for one run.
#[derive(Debug, Clone)]
pub struct Matcher {
    pub mode: MatchingMode,
    pub layer: String,
    pub dift_timestep: Timestep,
    initial: Option<CorrelationMap>,
}

impl Matcher {
    pub fn new(mode: MatchingMode, layer: impl Into<String>, dift_timestep: Timestep) -> Self {
        Self {
            mode,
            layer: layer.into(),
            dift_timestep,
            initial: None,
        }
    }

    /// Computes the reusable map from the clean encodings (initial mode).
    pub fn prepare(&mut self, src_clean: &Latent, tar_clean: &Latent, b: &dyn Backend) -> Result<()> {
        if self.mode == MatchingMode::Initial {
            let mut c = self.correlate(src_clean, tar_clean, b)?;
            c.mode = MatchingMode::Initial;
            self.initial = Some(c);
        }
        Ok(())
    }

    /// Correspondence for one denoising step.
    pub fn match_step(&mut self, x0_src: &Latent, x0_tar: &Latent, b: &dyn Backend) -> Result<CorrelationMap> {
        match self.mode {
            MatchingMode::Progressive => self.correlate(x0_src, x0_tar, b),
            MatchingMode::Initial => self
                .initial
                .clone()
                .ok_or_else(|| Error::Contract("initial matching used before prepare()".into())),
        }
    }

    fn correlate(&self, x0_src: &Latent, x0_tar: &Latent, b: &dyn Backend) -> Result<CorrelationMap> {
        let fs = b.extract_dift_features(x0_src, self.dift_timestep, &self.layer)?;
        let ft = b.extract_dift_features(x0_tar, self.dift_timestep, &self.layer)?;
        let coarse = build_correlation_map(&fs, &ft)?;
        let mut c = coarse.upsample(x0_src.grid(), x0_tar.grid())?;
        c.mode = self.mode;
        Ok(c)
    }
}

/// One-shot correspondence between two x0-space latents.
pub fn match_step(
    x0_src: &Latent,
    x0_tar: &Latent,
    mode: MatchingMode,
    b: &dyn Backend,
    layer: &str,
    dift_timestep: Timestep,
) -> Result<CorrelationMap> {
    let mut m = Matcher::new(mode, layer, dift_timestep);
    m.prepare(x0_src, x0_tar, b)?;
    m.match_step(x0_src, x0_tar, b)
}
