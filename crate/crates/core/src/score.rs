//! Language scores. Every scoring rule lives behind the `Scorer` trait and
//! is looked up by name in a fixed registry, so callers (and the CLI) select
//! the rule at runtime.
//!
//! All three rules share the same contract: given one segment's statistics
//! they return one score per language, where only differences across
//! languages are meaningful (segment-constant terms are dropped).

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{self, ArrayData, Kind, Manifest};
use crate::linalg;
use crate::model::{Backend, FactorLoadings};
use crate::posterior::{classical_ivector, recover_natural_mean, ClassicalIvector};
use crate::stats::{precision_term, SegmentStats, StatsSet};

/// A scoring rule: one score per language for one segment.
pub trait Scorer: Send + Sync {
    /// Registry key, also used in manifests and on the command line.
    fn name(&self) -> &'static str;
    /// One-line human description.
    fn describe(&self) -> &'static str;
    fn score_segment(
        &self,
        stats: &SegmentStats,
        backend: &Backend,
        loadings: &FactorLoadings,
    ) -> Result<DVector<f64>>;
}

/// Language-dependent marginal-likelihood score
/// `sigma_l = -1/2 m_l' W C B m_l + m_l' W C a` with `C = (W + B)^{-1}`.
///
/// This is the exact log-marginal of the segment under language `l` with all
/// language-independent terms dropped; the form above (rather than
/// `-1/2 m'(W - WCW)m + ...`) avoids catastrophic cancellation and returns
/// an exact zero for zero-duration segments.
pub struct LdScorer;

/// Classical-posterior score: the i-vector is integrated out under the
/// standard-prior posterior `N(mu~, E^{-1})`, `E = I + B`, giving
/// `sigma~_l = -1/2 m_l' W C~ E m_l + m_l' W C~ a` with `C~ = (W + E)^{-1}`.
pub struct CpfScorer;

/// Point-estimate backend score on the classical i-vector:
/// `sigma_l = -1/2 m_l' W m_l + m_l' W mu~`, the large-count limit of the
/// other two rules.
pub struct LgbeScorer;

impl Scorer for LdScorer {
    fn name(&self) -> &'static str {
        "ld"
    }

    fn describe(&self) -> &'static str {
        "language-dependent posterior score (exact marginal likelihood)"
    }

    fn score_segment(
        &self,
        stats: &SegmentStats,
        backend: &Backend,
        loadings: &FactorLoadings,
    ) -> Result<DVector<f64>> {
        ld_score(stats, backend, loadings)
    }
}

impl Scorer for CpfScorer {
    fn name(&self) -> &'static str {
        "cpf"
    }

    fn describe(&self) -> &'static str {
        "classical-posterior score (uncertainty kept, standard prior)"
    }

    fn score_segment(
        &self,
        stats: &SegmentStats,
        backend: &Backend,
        loadings: &FactorLoadings,
    ) -> Result<DVector<f64>> {
        cpf_score(stats, backend, loadings)
    }
}

impl Scorer for LgbeScorer {
    fn name(&self) -> &'static str {
        "lgbe"
    }

    fn describe(&self) -> &'static str {
        "linear Gaussian backend on point-estimate i-vectors"
    }

    fn score_segment(
        &self,
        stats: &SegmentStats,
        backend: &Backend,
        loadings: &FactorLoadings,
    ) -> Result<DVector<f64>> {
        let ivector = classical_ivector(stats, loadings)?;
        lgbe_score(&ivector, backend)
    }
}

static LD: LdScorer = LdScorer;
static CPF: CpfScorer = CpfScorer;
static LGBE: LgbeScorer = LgbeScorer;
static REGISTRY: [&dyn Scorer; 3] = [&LD, &CPF, &LGBE];

/// All registered scoring rules, in a fixed order.
pub fn registry() -> &'static [&'static dyn Scorer] {
    &REGISTRY
}

/// Looks a scoring rule up by its registry key.
pub fn resolve(name: &str) -> Result<&'static dyn Scorer> {
    registry()
        .iter()
        .copied()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::UnknownScorer(name.to_string()))
}

fn check_compat(
    stats: &SegmentStats,
    backend: &Backend,
    loadings: &FactorLoadings,
) -> Result<()> {
    let r = backend.ivector_dim();
    if loadings.ivector_dim() != r {
        return Err(Error::dims("loadings i-vector dim", r, loadings.ivector_dim()));
    }
    if stats.ivector_dim() != r {
        return Err(Error::dims("stats projection length", r, stats.ivector_dim()));
    }
    Ok(())
}

/// See [`LdScorer`].
pub fn ld_score(
    stats: &SegmentStats,
    backend: &Backend,
    loadings: &FactorLoadings,
) -> Result<DVector<f64>> {
    check_compat(stats, backend, loadings)?;
    let w = backend.precision();
    let b = precision_term(&stats.counts, loadings)?;
    let chol = linalg::cholesky("score precision", w + &b)?;
    let x = chol.solve(&stats.projected); // C a
    let mut out = DVector::zeros(backend.num_languages());
    for l in 0..backend.num_languages() {
        let m = backend.mean(l);
        let u = w * &m; // W m
        let y = chol.solve(&u); // C W m
        out[l] = -0.5 * y.dot(&(&b * &m)) + u.dot(&x);
    }
    Ok(out)
}

/// See [`CpfScorer`].
pub fn cpf_score(
    stats: &SegmentStats,
    backend: &Backend,
    loadings: &FactorLoadings,
) -> Result<DVector<f64>> {
    check_compat(stats, backend, loadings)?;
    let r = backend.ivector_dim();
    let w = backend.precision();
    let e = DMatrix::identity(r, r) + precision_term(&stats.counts, loadings)?;
    let chol = linalg::cholesky("score precision", w + &e)?;
    let x = chol.solve(&stats.projected); // C~ a
    let mut out = DVector::zeros(backend.num_languages());
    for l in 0..backend.num_languages() {
        let m = backend.mean(l);
        let u = w * &m; // W m
        let v = chol.solve(&(&e * &m)); // C~ E m
        out[l] = -0.5 * u.dot(&v) + u.dot(&x);
    }
    Ok(out)
}

/// See [`LgbeScorer`].
pub fn lgbe_score(ivector: &ClassicalIvector, backend: &Backend) -> Result<DVector<f64>> {
    let r = backend.ivector_dim();
    if ivector.mean.len() != r {
        return Err(Error::dims("i-vector length", r, ivector.mean.len()));
    }
    let w = backend.precision();
    let mut out = DVector::zeros(backend.num_languages());
    for l in 0..backend.num_languages() {
        let m = backend.mean(l);
        let u = w * &m;
        out[l] = u.dot(&ivector.mean) - 0.5 * u.dot(&m);
    }
    Ok(out)
}

/// A scored dataset: one row per segment, one column per language.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub scores: DMatrix<f64>,
    pub scorer: String,
    pub labels: Vec<Option<usize>>,
    pub languages: Vec<String>,
}

/// Named datasets must name exactly the backend's languages. Unnamed ones
/// (feature-derived stats, possibly unlabeled) only need their labels to fit
/// inside the backend's language range.
fn check_languages(
    num_languages: usize,
    names: Option<&[String]>,
    backend: &Backend,
) -> Result<()> {
    if let Some(names) = names {
        if names != backend.languages() {
            return Err(Error::InvalidArgument(format!(
                "dataset languages {names:?} do not match backend languages {:?}",
                backend.languages()
            )));
        }
        return Ok(());
    }
    if num_languages > backend.num_languages() {
        return Err(Error::dims(
            "language count",
            backend.num_languages(),
            num_languages,
        ));
    }
    Ok(())
}

/// Scores every segment of a stats set with the named rule. Segments are
/// scored in parallel; row order always matches the input order.
pub fn score_dataset(
    set: &StatsSet,
    backend: &Backend,
    loadings: &FactorLoadings,
    scorer_name: &str,
) -> Result<ScoreMatrix> {
    let scorer = resolve(scorer_name)?;
    check_languages(set.num_languages, set.languages.as_deref(), backend)?;
    let rows = set
        .segments
        .par_iter()
        .map(|s| scorer.score_segment(s, backend, loadings))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = DMatrix::zeros(set.len(), backend.num_languages());
    for (i, row) in rows.iter().enumerate() {
        scores.row_mut(i).copy_from(&row.transpose());
    }
    Ok(ScoreMatrix {
        scores,
        scorer: scorer_name.to_string(),
        labels: set.labels(),
        languages: backend.languages().to_vec(),
    })
}

/// Scores stored i-vectors by first recovering each segment's natural
/// statistics, then running the named rule through the same path as
/// [`score_dataset`].
pub fn score_from_ivectors(
    set: &crate::posterior::IvectorSet,
    backend: &Backend,
    loadings: &FactorLoadings,
    scorer_name: &str,
) -> Result<ScoreMatrix> {
    let segments = set
        .ivectors
        .iter()
        .zip(&set.counts)
        .zip(&set.labels)
        .map(|((mean, counts), &label)| {
            let ivector = ClassicalIvector { mean: mean.clone() };
            let a = recover_natural_mean(&ivector, counts, loadings)?;
            SegmentStats::new(counts.clone(), a, label)
        })
        .collect::<Result<Vec<_>>>()?;
    let stats_set = StatsSet::new(segments, set.num_languages, set.languages.clone())?;
    score_dataset(&stats_set, backend, loadings, scorer_name)
}

pub fn save_scores(matrix: &ScoreMatrix, manifest_path: &Path) -> Result<PathBuf> {
    let stem = io::manifest_stem(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut man = Manifest::new(Kind::Scores);
    man.set_dim("S", matrix.scores.nrows());
    man.set_dim("L", matrix.scores.ncols());
    man.set_text("scorer", &matrix.scorer);
    man.set_languages(&matrix.languages)?;
    for (name, array) in [
        ("scores", ArrayData::from_matrix(&matrix.scores)),
        ("labels", io::labels_to_array(&matrix.labels)?),
    ] {
        let file_name = io::array_file_name(&stem, name);
        io::write_array(&dir.join(&file_name), &array)?;
        man.set_array(name, &file_name);
    }
    man.save(manifest_path)?;
    Ok(manifest_path.to_path_buf())
}

pub fn load_scores(manifest_path: &Path) -> Result<ScoreMatrix> {
    let man = Manifest::load(manifest_path)?;
    man.expect_kind(Kind::Scores)?;
    let s = man.dim("S")?;
    let l = man.dim("L")?;
    let scorer = man.text("scorer")?.to_string();
    if scorer.is_empty() {
        return Err(Error::manifest(manifest_path, "empty scorer name"));
    }
    let languages = man
        .languages()?
        .ok_or_else(|| Error::manifest(manifest_path, "missing key 'languages'"))?;
    if languages.len() != l {
        return Err(Error::dims("language count", l, languages.len()));
    }
    let scores = man.read_array("scores", &[s, l])?.to_matrix()?;
    let labels = io::labels_from_array(&man.read_array("labels", &[s])?, l)?;
    Ok(ScoreMatrix {
        scores,
        scorer,
        labels,
        languages,
    })
}
