//! Hidden-variable posteriors: the language-dependent Gaussian posterior of
//! the latent vector given a segment's statistics, the classical
//! standard-prior i-vector, and the map back from i-vectors to natural
//! statistics.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::{self, ArrayData, Kind, Manifest};
use crate::linalg;
use crate::model::{Backend, FactorLoadings};
use crate::stats::{precision_term, SegmentStats};

/// Posterior of the latent vector for one segment: a covariance shared by
/// all languages and one mean per language (rows of `means`).
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub cov: DMatrix<f64>,
    pub means: DMatrix<f64>,
}

impl Posterior {
    /// Posterior mean under language `l` as a column vector.
    pub fn mean(&self, l: usize) -> DVector<f64> {
        self.means.row(l).transpose()
    }

    pub fn num_languages(&self) -> usize {
        self.means.nrows()
    }

    pub fn ivector_dim(&self) -> usize {
        self.means.ncols()
    }
}

/// Language-dependent posterior `N(mu_l, C)` with `C = (W + B)^{-1}` and
/// `mu_l = C (W m_l + a)`. The covariance depends on the occupancies only,
/// never on `a` or the prior means, so it is computed once per segment.
pub fn posterior(
    stats: &SegmentStats,
    backend: &Backend,
    loadings: &FactorLoadings,
) -> Result<Posterior> {
    let r = backend.ivector_dim();
    if stats.ivector_dim() != r {
        return Err(Error::dims("stats projection length", r, stats.ivector_dim()));
    }
    if loadings.ivector_dim() != r {
        return Err(Error::dims("loadings i-vector dim", r, loadings.ivector_dim()));
    }
    let b = precision_term(&stats.counts, loadings)?;
    let chol = linalg::cholesky("posterior precision", backend.precision() + &b)?;
    let mut cov = chol.inverse();
    linalg::symmetrize(&mut cov);

    let l = backend.num_languages();
    let mut means = DMatrix::zeros(l, r);
    for lang in 0..l {
        let h = backend.precision() * backend.mean(lang) + &stats.projected;
        means.row_mut(lang).copy_from(&chol.solve(&h).transpose());
    }
    Ok(Posterior { cov, means })
}

/// Point-estimate i-vector under the standard-normal prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalIvector {
    pub mean: DVector<f64>,
}

/// `mu = (I + B)^{-1} a`, the classical i-vector of one segment.
pub fn classical_ivector(
    stats: &SegmentStats,
    loadings: &FactorLoadings,
) -> Result<ClassicalIvector> {
    if stats.ivector_dim() != loadings.ivector_dim() {
        return Err(Error::dims(
            "stats projection length",
            loadings.ivector_dim(),
            stats.ivector_dim(),
        ));
    }
    let r = loadings.ivector_dim();
    let b = precision_term(&stats.counts, loadings)?;
    let chol = linalg::cholesky("classical posterior precision", DMatrix::identity(r, r) + b)?;
    Ok(ClassicalIvector {
        mean: chol.solve(&stats.projected),
    })
}

/// Inverts the classical extractor: `a = (I + B) mu`, so stored i-vectors
/// plus occupancies reproduce the natural statistics exactly.
pub fn recover_natural_mean(
    ivector: &ClassicalIvector,
    counts: &DVector<f64>,
    loadings: &FactorLoadings,
) -> Result<DVector<f64>> {
    if ivector.mean.len() != loadings.ivector_dim() {
        return Err(Error::dims(
            "i-vector length",
            loadings.ivector_dim(),
            ivector.mean.len(),
        ));
    }
    let b = precision_term(counts, loadings)?;
    Ok(&ivector.mean + b * &ivector.mean)
}

/// `E[x' M x] = trace[(C + mu mu') M]` under the language-`l` posterior,
/// for symmetric `M`.
pub fn expected_quadratic(pp: &Posterior, lang: usize, m: &DMatrix<f64>) -> Result<f64> {
    if lang >= pp.num_languages() {
        return Err(Error::LabelOutOfRange {
            label: lang as i64,
            num_languages: pp.num_languages(),
        });
    }
    let r = pp.ivector_dim();
    if m.shape() != (r, r) {
        return Err(Error::dims(
            "quadratic form",
            format!("{r}x{r}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    linalg::check_symmetric("quadratic form", m, 1e-10)?;
    let mu = pp.mean(lang);
    Ok(linalg::trace_prod(&pp.cov, m) + (m * &mu).dot(&mu))
}

/// A dataset of classical i-vectors with the occupancies needed to undo the
/// extraction, mirroring the layout of a stats set.
#[derive(Debug, Clone)]
pub struct IvectorSet {
    pub ivectors: Vec<DVector<f64>>,
    pub counts: Vec<DVector<f64>>,
    pub labels: Vec<Option<usize>>,
    pub num_languages: usize,
    pub languages: Option<Vec<String>>,
}

impl IvectorSet {
    pub fn new(
        ivectors: Vec<DVector<f64>>,
        counts: Vec<DVector<f64>>,
        labels: Vec<Option<usize>>,
        num_languages: usize,
        languages: Option<Vec<String>>,
    ) -> Result<Self> {
        let s = ivectors.len();
        if s == 0 {
            return Err(Error::InvalidArgument("i-vector set needs at least one row".into()));
        }
        if counts.len() != s || labels.len() != s {
            return Err(Error::dims("i-vector set rows", s, counts.len().min(labels.len())));
        }
        if num_languages == 0 {
            return Err(Error::InvalidArgument("num_languages must be >= 1".into()));
        }
        let r = ivectors[0].len();
        let nc = counts[0].len();
        for i in 0..s {
            if ivectors[i].len() != r || counts[i].len() != nc {
                return Err(Error::dims(
                    format!("i-vector row {i}"),
                    format!("R={r}, Nc={nc}"),
                    format!("R={}, Nc={}", ivectors[i].len(), counts[i].len()),
                ));
            }
            if let Some(label) = labels[i] {
                if label >= num_languages {
                    return Err(Error::LabelOutOfRange {
                        label: label as i64,
                        num_languages,
                    });
                }
            }
        }
        if let Some(names) = &languages {
            if names.len() != num_languages {
                return Err(Error::dims("language name count", num_languages, names.len()));
            }
        }
        Ok(IvectorSet {
            ivectors,
            counts,
            labels,
            num_languages,
            languages,
        })
    }

    pub fn len(&self) -> usize {
        self.ivectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ivectors.is_empty()
    }

    pub fn ivector_dim(&self) -> usize {
        self.ivectors[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.counts[0].len()
    }
}

pub fn save_ivectors(set: &IvectorSet, manifest_path: &Path) -> Result<PathBuf> {
    let stem = io::manifest_stem(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let s = set.len();
    let (r, nc) = (set.ivector_dim(), set.num_components());

    let mut ivec = DMatrix::zeros(s, r);
    let mut n = DMatrix::zeros(s, nc);
    for row in 0..s {
        ivec.row_mut(row).copy_from(&set.ivectors[row].transpose());
        n.row_mut(row).copy_from(&set.counts[row].transpose());
    }

    let mut man = Manifest::new(Kind::Ivectors);
    man.set_dim("S", s);
    man.set_dim("R", r);
    man.set_dim("Nc", nc);
    man.set_dim("L", set.num_languages);
    if let Some(names) = &set.languages {
        man.set_languages(names)?;
    }
    for (name, array) in [
        ("ivectors", ArrayData::from_matrix(&ivec)),
        ("n", ArrayData::from_matrix(&n)),
        ("labels", io::labels_to_array(&set.labels)?),
    ] {
        let file_name = io::array_file_name(&stem, name);
        io::write_array(&dir.join(&file_name), &array)?;
        man.set_array(name, &file_name);
    }
    man.save(manifest_path)?;
    Ok(manifest_path.to_path_buf())
}

pub fn load_ivectors(manifest_path: &Path) -> Result<IvectorSet> {
    let man = Manifest::load(manifest_path)?;
    man.expect_kind(Kind::Ivectors)?;
    let s = man.dim("S")?;
    let r = man.dim("R")?;
    let nc = man.dim("Nc")?;
    let l = man.dim("L")?;
    let languages = man.languages()?;
    let ivec = man.read_array("ivectors", &[s, r])?.to_matrix()?;
    let n = man.read_array("n", &[s, nc])?.to_matrix()?;
    let labels = io::labels_from_array(&man.read_array("labels", &[s])?, l)?;
    IvectorSet::new(
        (0..s).map(|i| ivec.row(i).transpose()).collect(),
        (0..s).map(|i| n.row(i).transpose()).collect(),
        labels,
        l,
        languages,
    )
}
