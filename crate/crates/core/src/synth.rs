//! Synthetic data with known truth. A config plus a seed pins every byte of
//! the output: the model comes from RNG stream 0 and segment `k` from stream
//! `k + 1`, so segments can be drawn in parallel (or re-drawn individually)
//! with results identical to a sequential pass.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Backend, Dims, FactorLoadings, Ubm};
use crate::stats::{accumulate, responsibilities, FrameBlock, SegmentStats, StatsSet};

/// Number of frames per segment: fixed, or uniform over an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameCount {
    Fixed(usize),
    Range(usize, usize),
}

impl FrameCount {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FrameCount::Fixed(n) if n >= 1 => Ok(()),
            FrameCount::Range(lo, hi) if lo >= 1 && lo <= hi => Ok(()),
            FrameCount::Fixed(_) => {
                Err(Error::InvalidArgument("frame count must be >= 1".into()))
            }
            FrameCount::Range(lo, hi) => Err(Error::InvalidArgument(format!(
                "bad frame range {lo}..{hi}: need 1 <= lo <= hi"
            ))),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            FrameCount::Fixed(n) => n,
            FrameCount::Range(lo, hi) => rng.random_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub dims: Dims,
    pub segments_per_language: usize,
    pub frames_per_segment: FrameCount,
    /// Scales the spread of the language means in i-vector space.
    pub class_separation: f64,
    /// Scales the backend precision (larger = tighter classes).
    pub precision_scale: f64,
    /// Analytically tractable setup: one component, identity covariance,
    /// identity loadings (requires `num_components = 1` and
    /// `feature_dim = ivector_dim`).
    pub tractable: bool,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.segments_per_language == 0 {
            return Err(Error::InvalidArgument("segments_per_language must be >= 1".into()));
        }
        self.frames_per_segment.validate()?;
        if !self.class_separation.is_finite() || self.class_separation < 0.0 {
            return Err(Error::InvalidArgument("class_separation must be finite and >= 0".into()));
        }
        if !self.precision_scale.is_finite() || self.precision_scale <= 0.0 {
            return Err(Error::InvalidArgument("precision_scale must be finite and > 0".into()));
        }
        if self.tractable
            && (self.dims.num_components != 1 || self.dims.feature_dim != self.dims.ivector_dim)
        {
            return Err(Error::InvalidArgument(
                "tractable configs need num_components = 1 and feature_dim = ivector_dim".into(),
            ));
        }
        Ok(())
    }

    pub fn num_segments(&self) -> usize {
        self.dims.num_languages * self.segments_per_language
    }

    /// Language of segment `index`; segments are grouped by language.
    pub fn label_of(&self, index: usize) -> usize {
        index / self.segments_per_language
    }
}

/// Everything the generator invented: the fixed front end and the true backend.
#[derive(Debug, Clone)]
pub struct SynthModels {
    pub ubm: Ubm,
    pub loadings: FactorLoadings,
    pub backend: Backend,
}

/// A complete sampled dataset: models, labeled statistics, and the true
/// latent vector of every segment.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub models: SynthModels,
    pub stats: StatsSet,
    pub latents: Vec<DVector<f64>>,
}

/// A random rotation from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Random symmetric positive definite matrix with eigenvalues uniform in
/// `[eig_lo, eig_hi]`.
pub fn random_spd(rng: &mut impl Rng, n: usize, eig_lo: f64, eig_hi: f64) -> DMatrix<f64> {
    let q = random_orthogonal(rng, n);
    let eigs = DVector::from_fn(n, |_, _| rng.random_range(eig_lo..=eig_hi));
    let mut m = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
    crate::linalg::symmetrize(&mut m);
    m
}

/// Random loadings with `N(0, 1/D)` entries (test/plumbing scale).
pub fn random_loadings(
    rng: &mut impl Rng,
    feature_dim: usize,
    ivector_dim: usize,
    num_components: usize,
) -> FactorLoadings {
    let scale = 1.0 / (feature_dim as f64).sqrt();
    let blocks = (0..num_components)
        .map(|_| {
            DMatrix::from_fn(feature_dim, ivector_dim, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
        })
        .collect();
    FactorLoadings::new(blocks).expect("generated blocks are well formed")
}

/// Random backend with well-conditioned precision and `lang0..` names.
pub fn random_backend(
    rng: &mut impl Rng,
    num_languages: usize,
    ivector_dim: usize,
    class_separation: f64,
) -> Backend {
    let means = DMatrix::from_fn(num_languages, ivector_dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * class_separation
    });
    let precision = random_spd(rng, ivector_dim, 0.5, 2.0);
    let names = (0..num_languages).map(|l| format!("lang{l}")).collect();
    Backend::new(means, precision, names).expect("generated backend is well formed")
}

/// Random segment statistics with positive occupancies of the given scale.
/// Magnitudes are test plumbing, not tied to any generative story.
pub fn random_stats(
    rng: &mut impl Rng,
    loadings: &FactorLoadings,
    count_scale: f64,
) -> SegmentStats {
    let counts = DVector::from_fn(loadings.num_components(), |_, _| {
        rng.random_range(0.2..1.2) * count_scale
    });
    let sd = count_scale.max(1.0).sqrt();
    let projected = DVector::from_fn(loadings.ivector_dim(), |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * sd
    });
    SegmentStats::new(counts, projected, None).expect("generated stats are well formed")
}

/// Draws the model from RNG stream 0 of `config.seed`. Draw order is fixed:
/// backend means, backend precision, then UBM (weights, means, covariance
/// factors), then loading blocks.
pub fn sample_model(config: &SynthConfig) -> Result<SynthModels> {
    config.validate()?;
    let d = &config.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let means = DMatrix::from_fn(d.num_languages, d.ivector_dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * config.class_separation
    });
    let precision = random_spd(
        &mut rng,
        d.ivector_dim,
        0.5 * config.precision_scale,
        2.0 * config.precision_scale,
    );
    let names = (0..d.num_languages).map(|l| format!("lang{l}")).collect();
    let backend = Backend::new(means, precision, names)?;

    let (ubm, loadings) = if config.tractable {
        let ubm = Ubm::new(
            DVector::from_element(1, 1.0),
            DMatrix::zeros(1, d.feature_dim),
            vec![DMatrix::identity(d.feature_dim, d.feature_dim)],
        )?;
        let loadings =
            FactorLoadings::new(vec![DMatrix::identity(d.feature_dim, d.ivector_dim)])?;
        (ubm, loadings)
    } else {
        let raw = DVector::from_fn(d.num_components, |_, _| rng.random_range(0.5..1.5));
        let weights = &raw / raw.sum();
        // Components far apart relative to both the frame noise and the
        // latent signal keep responsibilities nearly crisp, so the sampled
        // stats follow the linearized model a | x ~ N(Bx, B) that the
        // extractor assumes: soft assignments corrupted by the signal itself
        // would bias the first-order stats and break parameter recovery.
        let comp_means = DMatrix::from_fn(d.num_components, d.feature_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * 8.0
        });
        let cov_factors = (0..d.num_components)
            .map(|_| {
                let sigma = random_spd(&mut rng, d.feature_dim, 0.5, 2.0);
                nalgebra::Cholesky::new(sigma)
                    .expect("random SPD matrix factors")
                    .l()
            })
            .collect();
        let ubm = Ubm::new(weights, comp_means, cov_factors)?;
        let loadings = random_loadings(
            &mut rng,
            d.feature_dim,
            d.ivector_dim,
            d.num_components,
        );
        (ubm, loadings)
    };
    Ok(SynthModels {
        ubm,
        loadings,
        backend,
    })
}

/// Samples one segment: latent `x ~ N(m_lang, W^{-1})`, then per frame a
/// component `i` and `phi = mean_i + L_i (T_i x + eps)`, `eps ~ N(0, I)`.
pub fn sample_segment(
    models: &SynthModels,
    lang: usize,
    num_frames: usize,
    rng: &mut impl Rng,
) -> Result<(FrameBlock, DVector<f64>)> {
    let backend = &models.backend;
    if lang >= backend.num_languages() {
        return Err(Error::LabelOutOfRange {
            label: lang as i64,
            num_languages: backend.num_languages(),
        });
    }
    let r = backend.ivector_dim();
    let d = models.ubm.feature_dim();
    let chol = crate::linalg::cholesky("backend precision", backend.precision().clone())?;
    let z = DVector::from_fn(r, |_, _| StandardNormal.sample(rng));
    // W = L L'  =>  solving L' y = z gives y ~ N(0, W^{-1}).
    let y = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    let x = backend.mean(lang) + y;

    let weights = models.ubm.weights();
    let mut frames = DMatrix::zeros(num_frames, d);
    for t in 0..num_frames {
        let u: f64 = rng.random();
        let mut component = weights.len() - 1;
        let mut cum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            cum += w;
            if u < cum {
                component = i;
                break;
            }
        }
        let eps = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let clean = models.loadings.block(component) * &x + eps;
        let phi = models.ubm.mean(component) + models.ubm.cov_factor(component) * clean;
        frames.row_mut(t).copy_from(&phi.transpose());
    }
    Ok((FrameBlock::new(frames)?, x))
}

/// Deterministically samples segment `index` (frames, responsibilities,
/// accumulation) from RNG stream `index + 1` of `segment_seed`.
pub fn sample_indexed_segment(
    models: &SynthModels,
    config: &SynthConfig,
    segment_seed: u64,
    index: usize,
) -> Result<(SegmentStats, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(segment_seed);
    rng.set_stream(index as u64 + 1);
    let lang = config.label_of(index);
    let num_frames = config.frames_per_segment.sample(&mut rng);
    let (frames, x) = sample_segment(models, lang, num_frames, &mut rng)?;
    let q = responsibilities(&frames, &models.ubm)?;
    let mut stats = accumulate(&frames, &q, &models.ubm, &models.loadings)?;
    stats.label = Some(lang);
    Ok((stats, x))
}

/// Samples a full labeled stats set from existing models, in parallel.
/// Passing a different `segment_seed` draws fresh segments (for example a
/// held-out split) from the same models.
pub fn sample_stats(
    models: &SynthModels,
    config: &SynthConfig,
    segment_seed: u64,
) -> Result<(StatsSet, Vec<DVector<f64>>)> {
    config.validate()?;
    let pairs: Vec<(SegmentStats, DVector<f64>)> = (0..config.num_segments())
        .into_par_iter()
        .map(|index| sample_indexed_segment(models, config, segment_seed, index))
        .collect::<Result<_>>()?;
    let (segments, latents): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let set = StatsSet::new(
        segments,
        config.dims.num_languages,
        Some(models.backend.languages().to_vec()),
    )?;
    Ok((set, latents))
}

/// Model plus dataset from a single seed.
pub fn make_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    let models = sample_model(config)?;
    let (stats, latents) = sample_stats(&models, config, config.seed)?;
    Ok(SynthDataset {
        models,
        stats,
        latents,
    })
}
