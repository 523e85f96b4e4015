//! Model containers: frozen UBM, per-component factor loadings, and the
//! trainable language backend, each with manifest-backed persistence.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::{self, ArrayData, Kind, Manifest};
use crate::linalg;

/// The four sizes that define a model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub feature_dim: usize,
    pub ivector_dim: usize,
    pub num_components: usize,
    pub num_languages: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("ivector_dim", self.ivector_dim),
            ("num_components", self.num_components),
            ("num_languages", self.num_languages),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Frozen mixture front end. Covariances are stored as lower-triangular
/// Cholesky factors `L_i` (so diagonal models are just diagonal factors), and
/// whitening a feature means solving `L_i y = x - mean_i`.
#[derive(Debug, Clone)]
pub struct Ubm {
    weights: DVector<f64>,
    means: DMatrix<f64>,
    cov_factors: Vec<DMatrix<f64>>,
}

impl Ubm {
    pub fn new(
        weights: DVector<f64>,
        means: DMatrix<f64>,
        cov_factors: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let nc = weights.len();
        let d = means.ncols();
        if means.nrows() != nc {
            return Err(Error::dims("ubm means rows", nc, means.nrows()));
        }
        if cov_factors.len() != nc {
            return Err(Error::dims("ubm covariance factors", nc, cov_factors.len()));
        }
        linalg::check_finite("ubm weights", weights.iter().copied())?;
        linalg::check_finite("ubm means", means.iter().copied())?;
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidWeights("weights must be strictly positive".into()));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWeights(format!("weights sum to {total}, not 1")));
        }
        for (i, l) in cov_factors.iter().enumerate() {
            if l.shape() != (d, d) {
                return Err(Error::dims(
                    format!("covariance factor {i}"),
                    format!("{d}x{d}"),
                    format!("{}x{}", l.nrows(), l.ncols()),
                ));
            }
            linalg::check_finite(&format!("covariance factor {i}"), l.iter().copied())?;
            for r in 0..d {
                if l[(r, r)] <= 0.0 {
                    return Err(Error::NotSpd(format!("covariance factor {i}")));
                }
                for c in (r + 1)..d {
                    if l[(r, c)] != 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "covariance factor {i} is not lower triangular"
                        )));
                    }
                }
            }
        }
        Ok(Ubm {
            weights,
            means,
            cov_factors,
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn mean(&self, i: usize) -> DVector<f64> {
        self.means.row(i).transpose()
    }

    pub fn cov_factor(&self, i: usize) -> &DMatrix<f64> {
        &self.cov_factors[i]
    }

    /// `log |Sigma_i|` from the stored factor.
    pub fn log_det_cov(&self, i: usize) -> f64 {
        2.0 * self.cov_factors[i]
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }

    /// `L_i^{-1} (x - mean_i)`, the whitened residual of one frame.
    pub fn whiten(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        let resid = x - self.mean(i);
        self.cov_factors[i]
            .solve_lower_triangular(&resid)
            .expect("factor diagonal validated strictly positive")
    }

    pub fn save(&self, manifest_path: &Path) -> Result<PathBuf> {
        let stem = io::manifest_stem(manifest_path)?;
        let dir = parent_dir(manifest_path);
        let mut man = Manifest::new(Kind::Ubm);
        man.set_dim("D", self.feature_dim());
        man.set_dim("Nc", self.num_components());
        write_sibling(&mut man, &dir, &stem, "weights", ArrayData::from_vector(&self.weights))?;
        write_sibling(&mut man, &dir, &stem, "means", ArrayData::from_matrix(&self.means))?;
        write_sibling(
            &mut man,
            &dir,
            &stem,
            "cov_factors",
            ArrayData::from_blocks(&self.cov_factors)?,
        )?;
        man.save(manifest_path)?;
        Ok(manifest_path.to_path_buf())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let man = Manifest::load(manifest_path)?;
        man.expect_kind(Kind::Ubm)?;
        let d = man.dim("D")?;
        let nc = man.dim("Nc")?;
        let weights = man.read_array("weights", &[nc])?.to_vector()?;
        let means = man.read_array("means", &[nc, d])?.to_matrix()?;
        let cov_factors = man.read_array("cov_factors", &[nc, d, d])?.to_blocks()?;
        Ubm::new(weights, means, cov_factors)
    }
}

/// Per-component loading blocks `T_i` (`D x R`) with their precomputed Gram
/// matrices `G_i = T_i' T_i` (`R x R`).
#[derive(Debug, Clone)]
pub struct FactorLoadings {
    blocks: Vec<DMatrix<f64>>,
    grams: Vec<DMatrix<f64>>,
}

impl FactorLoadings {
    /// Builds loadings from the blocks alone, computing the Grams.
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let grams = blocks.iter().map(|t| t.tr_mul(t)).collect();
        FactorLoadings::with_grams(blocks, grams)
    }

    /// Builds loadings from stored blocks and Grams, validating consistency.
    pub fn with_grams(blocks: Vec<DMatrix<f64>>, grams: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("loadings need at least one block".into()))?;
        let (d, r) = first.shape();
        if grams.len() != blocks.len() {
            return Err(Error::dims("gram count", blocks.len(), grams.len()));
        }
        for (i, (t, g)) in blocks.iter().zip(&grams).enumerate() {
            if t.shape() != (d, r) {
                return Err(Error::dims(
                    format!("loading block {i}"),
                    format!("{d}x{r}"),
                    format!("{}x{}", t.nrows(), t.ncols()),
                ));
            }
            linalg::check_finite(&format!("loading block {i}"), t.iter().copied())?;
            let fresh = t.tr_mul(t);
            let scale = g.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
            let gap = (&fresh - g).amax();
            if g.shape() != (r, r) || gap > 1e-12 * scale {
                return Err(Error::InvalidArgument(format!(
                    "gram {i} disagrees with its loading block (max gap {gap:.3e})"
                )));
            }
        }
        Ok(FactorLoadings { blocks, grams })
    }

    pub fn num_components(&self) -> usize {
        self.blocks.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn ivector_dim(&self) -> usize {
        self.blocks[0].ncols()
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    pub fn gram(&self, i: usize) -> &DMatrix<f64> {
        &self.grams[i]
    }

    pub fn save(&self, manifest_path: &Path) -> Result<PathBuf> {
        let stem = io::manifest_stem(manifest_path)?;
        let dir = parent_dir(manifest_path);
        let mut man = Manifest::new(Kind::TMatrix);
        man.set_dim("D", self.feature_dim());
        man.set_dim("R", self.ivector_dim());
        man.set_dim("Nc", self.num_components());
        write_sibling(&mut man, &dir, &stem, "blocks", ArrayData::from_blocks(&self.blocks)?)?;
        write_sibling(&mut man, &dir, &stem, "grams", ArrayData::from_blocks(&self.grams)?)?;
        man.save(manifest_path)?;
        Ok(manifest_path.to_path_buf())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let man = Manifest::load(manifest_path)?;
        man.expect_kind(Kind::TMatrix)?;
        let d = man.dim("D")?;
        let r = man.dim("R")?;
        let nc = man.dim("Nc")?;
        let blocks = man.read_array("blocks", &[nc, d, r])?.to_blocks()?;
        let grams = man.read_array("grams", &[nc, r, r])?.to_blocks()?;
        FactorLoadings::with_grams(blocks, grams)
    }
}

/// The trainable part of the model: one prior mean per language (rows of
/// `means`) and a shared prior precision.
#[derive(Debug, Clone)]
pub struct Backend {
    means: DMatrix<f64>,
    precision: DMatrix<f64>,
    languages: Vec<String>,
}

impl Backend {
    pub fn new(
        means: DMatrix<f64>,
        precision: DMatrix<f64>,
        languages: Vec<String>,
    ) -> Result<Self> {
        if means.nrows() != languages.len() {
            return Err(Error::dims("backend mean rows", languages.len(), means.nrows()));
        }
        if languages.is_empty() {
            return Err(Error::InvalidArgument("backend needs at least one language".into()));
        }
        for (i, name) in languages.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidArgument(format!("language {i} has an empty name")));
            }
            if languages[..i].contains(name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate language name '{name}'"
                )));
            }
        }
        linalg::check_finite("backend means", means.iter().copied())?;
        linalg::check_finite("backend precision", precision.iter().copied())?;
        let r = means.ncols();
        if precision.shape() != (r, r) {
            return Err(Error::dims(
                "backend precision",
                format!("{r}x{r}"),
                format!("{}x{}", precision.nrows(), precision.ncols()),
            ));
        }
        linalg::check_symmetric("backend precision", &precision, 1e-10)?;
        linalg::cholesky("backend precision", precision.clone())?;
        Ok(Backend {
            means,
            precision,
            languages,
        })
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn ivector_dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    /// Prior mean of language `l` as a column vector.
    pub fn mean(&self, l: usize) -> DVector<f64> {
        self.means.row(l).transpose()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn save(&self, manifest_path: &Path) -> Result<PathBuf> {
        let stem = io::manifest_stem(manifest_path)?;
        let dir = parent_dir(manifest_path);
        let mut man = Manifest::new(Kind::Backend);
        man.set_dim("R", self.ivector_dim());
        man.set_dim("L", self.num_languages());
        man.set_languages(&self.languages)?;
        write_sibling(&mut man, &dir, &stem, "means", ArrayData::from_matrix(&self.means))?;
        write_sibling(
            &mut man,
            &dir,
            &stem,
            "precision",
            ArrayData::from_matrix(&self.precision),
        )?;
        man.save(manifest_path)?;
        Ok(manifest_path.to_path_buf())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let man = Manifest::load(manifest_path)?;
        man.expect_kind(Kind::Backend)?;
        let r = man.dim("R")?;
        let l = man.dim("L")?;
        let languages = man
            .languages()?
            .ok_or_else(|| Error::manifest(manifest_path, "missing key 'languages'"))?;
        if languages.len() != l {
            return Err(Error::dims("language count", l, languages.len()));
        }
        let means = man.read_array("means", &[l, r])?.to_matrix()?;
        let precision = man.read_array("precision", &[r, r])?.to_matrix()?;
        Backend::new(means, precision, languages)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_sibling(
    man: &mut Manifest,
    dir: &Path,
    stem: &str,
    name: &str,
    array: ArrayData,
) -> Result<()> {
    let file_name = io::array_file_name(stem, name);
    io::write_array(&dir.join(&file_name), &array)?;
    man.set_array(name, &file_name);
    Ok(())
}
