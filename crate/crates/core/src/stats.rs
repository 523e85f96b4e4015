//! Sufficient statistics: frame responsibilities under the frozen mixture,
//! the per-segment accumulators `(n_s, a_s)`, and the data precision term
//! `B_s` they induce.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::{self, ArrayData, Kind, Manifest};
use crate::linalg;
use crate::model::{FactorLoadings, Ubm};

/// One segment's feature frames, one row per frame.
#[derive(Debug, Clone)]
pub struct FrameBlock {
    frames: DMatrix<f64>,
}

impl FrameBlock {
    pub fn new(frames: DMatrix<f64>) -> Result<Self> {
        linalg::check_finite("frames", frames.iter().copied())?;
        if frames.ncols() == 0 {
            return Err(Error::InvalidArgument("frames need at least one column".into()));
        }
        Ok(FrameBlock { frames })
    }

    /// A zero-duration segment with `feature_dim` columns.
    pub fn empty(feature_dim: usize) -> Self {
        FrameBlock {
            frames: DMatrix::zeros(0, feature_dim),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frames(&self) -> &DMatrix<f64> {
        &self.frames
    }
}

/// Frame-level mixture responsibilities, computed in log space and
/// normalized so every row sums to one. Returns a `T x Nc` matrix.
pub fn responsibilities(frames: &FrameBlock, ubm: &Ubm) -> Result<DMatrix<f64>> {
    let d = ubm.feature_dim();
    if frames.feature_dim() != d {
        return Err(Error::dims("frame feature dim", d, frames.feature_dim()));
    }
    let t = frames.num_frames();
    let nc = ubm.num_components();
    let half_log_two_pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let log_norm: Vec<f64> = (0..nc)
        .map(|i| ubm.weights()[i].ln() - 0.5 * ubm.log_det_cov(i) - d as f64 * half_log_two_pi)
        .collect();

    let mut q = DMatrix::zeros(t, nc);
    let mut log_row = vec![0.0f64; nc];
    for s in 0..t {
        let x = frames.frames().row(s).transpose();
        for (i, slot) in log_row.iter_mut().enumerate() {
            let white = ubm.whiten(i, &x);
            *slot = log_norm[i] - 0.5 * white.norm_squared();
        }
        let max = log_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = log_row.iter().map(|v| (v - max).exp()).sum();
        for i in 0..nc {
            q[(s, i)] = (log_row[i] - max).exp() / total;
        }
    }
    Ok(q)
}

/// Zeroes responsibilities below `threshold` and renormalizes each row.
/// A row that would vanish entirely keeps its single largest entry.
pub fn prune_responsibilities(q: &mut DMatrix<f64>, threshold: f64) {
    for mut row in q.row_iter_mut() {
        let mut best = 0;
        for i in 1..row.len() {
            if row[i] > row[best] {
                best = i;
            }
        }
        for v in row.iter_mut() {
            if *v < threshold {
                *v = 0.0;
            }
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row.iter_mut() {
                *v /= total;
            }
        } else {
            row[best] = 1.0;
        }
    }
}

/// Per-segment sufficient statistics: occupancies `n` (per component) and
/// the projected first-order vector `a` in i-vector space.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStats {
    pub counts: DVector<f64>,
    pub projected: DVector<f64>,
    pub label: Option<usize>,
}

impl SegmentStats {
    pub fn new(counts: DVector<f64>, projected: DVector<f64>, label: Option<usize>) -> Result<Self> {
        linalg::check_finite("stats counts", counts.iter().copied())?;
        linalg::check_finite("stats projection", projected.iter().copied())?;
        for (i, &n) in counts.iter().enumerate() {
            if n < 0.0 {
                return Err(Error::NegativeCount { index: i, value: n });
            }
        }
        Ok(SegmentStats {
            counts,
            projected,
            label,
        })
    }

    pub fn num_components(&self) -> usize {
        self.counts.len()
    }

    pub fn ivector_dim(&self) -> usize {
        self.projected.len()
    }

    /// Total frame mass `sum_i n_i`.
    pub fn total_count(&self) -> f64 {
        self.counts.sum()
    }
}

/// Collapses one segment's frames into `(n, a)` given frozen
/// responsibilities: `n_i = sum_t q_ti` and
/// `a = sum_i T_i' (sum_t q_ti L_i^{-1}(x_t - mean_i))`.
pub fn accumulate(
    frames: &FrameBlock,
    q: &DMatrix<f64>,
    ubm: &Ubm,
    loadings: &FactorLoadings,
) -> Result<SegmentStats> {
    let d = ubm.feature_dim();
    let nc = ubm.num_components();
    if frames.feature_dim() != d {
        return Err(Error::dims("frame feature dim", d, frames.feature_dim()));
    }
    if loadings.num_components() != nc || loadings.feature_dim() != d {
        return Err(Error::dims(
            "loadings shape",
            format!("{nc} blocks of {d} rows"),
            format!(
                "{} blocks of {} rows",
                loadings.num_components(),
                loadings.feature_dim()
            ),
        ));
    }
    let t = frames.num_frames();
    if q.shape() != (t, nc) {
        return Err(Error::dims(
            "responsibility matrix",
            format!("{t}x{nc}"),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }

    let r = loadings.ivector_dim();
    let mut counts = DVector::zeros(nc);
    let mut projected = DVector::zeros(r);
    if t > 0 {
        // One batched whitening per component: columns are frames.
        let x_t = frames.frames().transpose();
        for i in 0..nc {
            counts[i] = q.column(i).sum();
            let mut resid = x_t.clone();
            let mean = ubm.mean(i);
            for mut col in resid.column_iter_mut() {
                col -= &mean;
            }
            let white = ubm
                .cov_factor(i)
                .solve_lower_triangular(&resid)
                .expect("factor diagonal validated strictly positive");
            let f_i = &white * q.column(i);
            projected += loadings.block(i).tr_mul(&f_i);
        }
    }
    SegmentStats::new(counts, projected, None)
}

/// The data precision contribution `B = sum_i n_i G_i`.
pub fn precision_term(counts: &DVector<f64>, loadings: &FactorLoadings) -> Result<DMatrix<f64>> {
    if counts.len() != loadings.num_components() {
        return Err(Error::dims(
            "occupancy count length",
            loadings.num_components(),
            counts.len(),
        ));
    }
    let r = loadings.ivector_dim();
    let mut b = DMatrix::zeros(r, r);
    for (i, &n) in counts.iter().enumerate() {
        if n < 0.0 {
            return Err(Error::NegativeCount { index: i, value: n });
        }
        if !n.is_finite() {
            return Err(Error::NonFinite("occupancy counts".into()));
        }
        b += loadings.gram(i) * n;
    }
    Ok(b)
}

/// A full dataset of segment statistics plus its language bookkeeping.
#[derive(Debug, Clone)]
pub struct StatsSet {
    pub segments: Vec<SegmentStats>,
    pub num_languages: usize,
    pub languages: Option<Vec<String>>,
}

impl StatsSet {
    pub fn new(
        segments: Vec<SegmentStats>,
        num_languages: usize,
        languages: Option<Vec<String>>,
    ) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::InvalidArgument("stats set needs at least one segment".into()))?;
        if num_languages == 0 {
            return Err(Error::InvalidArgument("num_languages must be >= 1".into()));
        }
        let (nc, r) = (first.num_components(), first.ivector_dim());
        for (s, seg) in segments.iter().enumerate() {
            if seg.num_components() != nc || seg.ivector_dim() != r {
                return Err(Error::dims(
                    format!("segment {s} stats"),
                    format!("Nc={nc}, R={r}"),
                    format!("Nc={}, R={}", seg.num_components(), seg.ivector_dim()),
                ));
            }
            if let Some(label) = seg.label {
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
        Ok(StatsSet {
            segments,
            num_languages,
            languages,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn num_components(&self) -> usize {
        self.segments[0].num_components()
    }

    pub fn ivector_dim(&self) -> usize {
        self.segments[0].ivector_dim()
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.segments.iter().map(|s| s.label).collect()
    }
}

pub fn save_stats(set: &StatsSet, manifest_path: &Path) -> Result<PathBuf> {
    let stem = io::manifest_stem(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let s = set.len();
    let (nc, r) = (set.num_components(), set.ivector_dim());

    let mut n = DMatrix::zeros(s, nc);
    let mut a = DMatrix::zeros(s, r);
    for (row, seg) in set.segments.iter().enumerate() {
        n.row_mut(row).copy_from(&seg.counts.transpose());
        a.row_mut(row).copy_from(&seg.projected.transpose());
    }

    let mut man = Manifest::new(Kind::Stats);
    man.set_dim("S", s);
    man.set_dim("Nc", nc);
    man.set_dim("R", r);
    man.set_dim("L", set.num_languages);
    if let Some(names) = &set.languages {
        man.set_languages(names)?;
    }
    for (name, array) in [
        ("n", ArrayData::from_matrix(&n)),
        ("a", ArrayData::from_matrix(&a)),
        ("labels", io::labels_to_array(&set.labels())?),
    ] {
        let file_name = io::array_file_name(&stem, name);
        io::write_array(&dir.join(&file_name), &array)?;
        man.set_array(name, &file_name);
    }
    man.save(manifest_path)?;
    Ok(manifest_path.to_path_buf())
}

pub fn load_stats(manifest_path: &Path) -> Result<StatsSet> {
    let man = Manifest::load(manifest_path)?;
    man.expect_kind(Kind::Stats)?;
    let s = man.dim("S")?;
    let nc = man.dim("Nc")?;
    let r = man.dim("R")?;
    let l = man.dim("L")?;
    let languages = man.languages()?;
    let n = man.read_array("n", &[s, nc])?.to_matrix()?;
    let a = man.read_array("a", &[s, r])?.to_matrix()?;
    let labels = io::labels_from_array(&man.read_array("labels", &[s])?, l)?;
    let segments = (0..s)
        .map(|row| {
            SegmentStats::new(
                n.row(row).transpose(),
                a.row(row).transpose(),
                labels[row],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    StatsSet::new(segments, l, languages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    fn toy_ubm() -> Ubm {
        let weights = DVector::from_vec(vec![0.3, 0.7]);
        let means = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, -1.0, 1.5]);
        let factors = vec![
            DMatrix::from_row_slice(2, 2, &[1.2, 0.0, -0.3, 0.8]),
            DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.4, 1.1]),
        ];
        Ubm::new(weights, means, factors).unwrap()
    }

    fn toy_loadings() -> FactorLoadings {
        FactorLoadings::new(vec![
            DMatrix::from_row_slice(2, 3, &[0.5, -0.2, 0.1, 0.3, 0.9, -0.4]),
            DMatrix::from_row_slice(2, 3, &[-0.7, 0.2, 0.6, 0.1, -0.5, 0.8]),
        ])
        .unwrap()
    }

    fn toy_frames() -> FrameBlock {
        FrameBlock::new(DMatrix::from_row_slice(
            4,
            2,
            &[0.3, 0.9, -1.2, 1.1, 0.0, 0.0, 2.1, -0.7],
        ))
        .unwrap()
    }

    /// Densities computed the slow explicit way, no log-space tricks.
    fn naive_responsibilities(frames: &FrameBlock, ubm: &Ubm) -> DMatrix<f64> {
        let (t, nc) = (frames.num_frames(), ubm.num_components());
        let d = ubm.feature_dim() as f64;
        let mut q = DMatrix::zeros(t, nc);
        for s in 0..t {
            let x = frames.frames().row(s).transpose();
            let mut dens = vec![0.0; nc];
            for (i, den) in dens.iter_mut().enumerate() {
                let l = ubm.cov_factor(i);
                let sigma = l * l.transpose();
                let inv = sigma.clone().try_inverse().unwrap();
                let r = &x - ubm.mean(i);
                let quad = (inv * &r).dot(&r);
                *den = ubm.weights()[i]
                    * (2.0 * std::f64::consts::PI).powf(-d / 2.0)
                    * sigma.determinant().powf(-0.5)
                    * (-0.5 * quad).exp();
            }
            let total: f64 = dens.iter().sum();
            for i in 0..nc {
                q[(s, i)] = dens[i] / total;
            }
        }
        q
    }

    #[test]
    fn responsibilities_match_naive_densities_and_sum_to_one() {
        let frames = toy_frames();
        let ubm = toy_ubm();
        let q = responsibilities(&frames, &ubm).unwrap();
        let naive = naive_responsibilities(&frames, &ubm);
        assert_abs_diff_eq!(q, naive, epsilon = 1e-12);
        for row in q.row_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_component_gets_full_responsibility() {
        let ubm = Ubm::new(
            DVector::from_vec(vec![1.0]),
            DMatrix::zeros(1, 2),
            vec![DMatrix::identity(2, 2)],
        )
        .unwrap();
        let q = responsibilities(&toy_frames(), &ubm).unwrap();
        assert!(q.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_segment_yields_zero_stats() {
        let ubm = toy_ubm();
        let loadings = toy_loadings();
        let frames = FrameBlock::empty(2);
        let q = responsibilities(&frames, &ubm).unwrap();
        assert_eq!(q.nrows(), 0);
        let stats = accumulate(&frames, &q, &ubm, &loadings).unwrap();
        assert_eq!(stats.counts, DVector::zeros(2));
        assert_eq!(stats.projected, DVector::zeros(3));
        assert_eq!(stats.total_count(), 0.0);
    }

    #[test]
    fn accumulate_matches_brute_force_double_loop() {
        let frames = toy_frames();
        let ubm = toy_ubm();
        let loadings = toy_loadings();
        let q = responsibilities(&frames, &ubm).unwrap();
        let stats = accumulate(&frames, &q, &ubm, &loadings).unwrap();

        let mut counts = DVector::zeros(2);
        let mut a = DVector::zeros(3);
        for t in 0..frames.num_frames() {
            let x = frames.frames().row(t).transpose();
            for i in 0..2 {
                counts[i] += q[(t, i)];
                let l_inv = ubm.cov_factor(i).clone().try_inverse().unwrap();
                let white = l_inv * (&x - ubm.mean(i));
                a += loadings.block(i).transpose() * white * q[(t, i)];
            }
        }
        assert_abs_diff_eq!(stats.counts, counts, epsilon = 1e-10);
        assert_abs_diff_eq!(stats.projected, a, epsilon = 1e-10);
    }

    #[test]
    fn total_mass_equals_frame_count() {
        let frames = toy_frames();
        let ubm = toy_ubm();
        let q = responsibilities(&frames, &ubm).unwrap();
        let stats = accumulate(&frames, &q, &ubm, &toy_loadings()).unwrap();
        let t = frames.num_frames() as f64;
        assert!((stats.total_count() - t).abs() <= 1e-8 * t);
    }

    #[test]
    fn accumulation_is_additive_over_concatenated_blocks() {
        let ubm = toy_ubm();
        let loadings = toy_loadings();
        let all = toy_frames();
        let top = FrameBlock::new(all.frames().rows(0, 2).into_owned()).unwrap();
        let bottom = FrameBlock::new(all.frames().rows(2, 2).into_owned()).unwrap();

        let q_all = responsibilities(&all, &ubm).unwrap();
        let q_top = responsibilities(&top, &ubm).unwrap();
        let q_bottom = responsibilities(&bottom, &ubm).unwrap();

        let whole = accumulate(&all, &q_all, &ubm, &loadings).unwrap();
        let a_part = accumulate(&top, &q_top, &ubm, &loadings).unwrap();
        let b_part = accumulate(&bottom, &q_bottom, &ubm, &loadings).unwrap();

        assert_abs_diff_eq!(
            whole.counts,
            &a_part.counts + &b_part.counts,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            whole.projected,
            &a_part.projected + &b_part.projected,
            epsilon = 1e-10
        );
    }

    #[test]
    fn precision_term_matches_fresh_grams() {
        let loadings = toy_loadings();
        let counts = DVector::from_vec(vec![2.5, 0.5]);
        let b = precision_term(&counts, &loadings).unwrap();
        let mut expect = DMatrix::zeros(3, 3);
        for i in 0..2 {
            expect += loadings.block(i).tr_mul(loadings.block(i)) * counts[i];
        }
        assert_abs_diff_eq!(b, expect, epsilon = 1e-12);
        assert_eq!(b, b.transpose());
    }

    #[test]
    fn precision_term_rejects_negative_counts() {
        let counts = DVector::from_vec(vec![1.0, -0.1]);
        assert!(matches!(
            precision_term(&counts, &toy_loadings()),
            Err(Error::NegativeCount { index: 1, .. })
        ));
        assert!(SegmentStats::new(counts, DVector::zeros(3), None).is_err());
    }

    #[test]
    fn adding_frames_preserves_positive_definiteness() {
        let loadings = toy_loadings();
        let w = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.5, -0.2, 0.0, -0.2, 1.0]);
        let mut counts = DVector::zeros(2);
        for step in 0..6 {
            counts[step % 2] += 0.7 * (step + 1) as f64;
            let b = precision_term(&counts, &loadings).unwrap();
            assert!(
                nalgebra::Cholesky::new(&w + b).is_some(),
                "W + B lost positive definiteness at step {step}"
            );
        }
    }

    #[test]
    fn pruning_renormalizes_and_keeps_degenerate_rows_valid() {
        let mut q = DMatrix::from_row_slice(2, 3, &[0.9999, 1e-12, 9.99e-5, 0.2, 0.5, 0.3]);
        prune_responsibilities(&mut q, 1e-10);
        assert_eq!(q[(0, 1)], 0.0);
        for row in q.row_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        // Every entry below threshold: the argmax survives alone.
        let mut degenerate = DMatrix::from_row_slice(1, 3, &[0.2, 0.5, 0.3]);
        prune_responsibilities(&mut degenerate, 0.9);
        assert_eq!(degenerate, DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]));
    }

    #[test]
    fn stats_set_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.manifest");
        let segments = vec![
            SegmentStats::new(
                DVector::from_vec(vec![1.5, 0.5]),
                DVector::from_vec(vec![0.2, -0.3, 0.4]),
                Some(1),
            )
            .unwrap(),
            SegmentStats::new(
                DVector::from_vec(vec![0.0, 0.0]),
                DVector::zeros(3),
                None,
            )
            .unwrap(),
        ];
        let set = StatsSet::new(
            segments.clone(),
            2,
            Some(vec!["aa".to_string(), "bb".to_string()]),
        )
        .unwrap();
        save_stats(&set, &path).unwrap();
        let back = load_stats(&path).unwrap();
        assert_eq!(back.num_languages, 2);
        assert_eq!(back.languages.as_deref().unwrap().len(), 2);
        assert_eq!(back.segments, segments);

        // Tampering a label out of range must fail on load.
        let labels_path = dir.path().join("stats.labels.ldiv");
        io::write_array(
            &labels_path,
            &ArrayData::new(vec![2], vec![5.0, -1.0]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            load_stats(&path),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn stats_set_rejects_ragged_segments_and_bad_labels() {
        let a = SegmentStats::new(DVector::zeros(2), DVector::zeros(3), Some(0)).unwrap();
        let ragged = SegmentStats::new(DVector::zeros(3), DVector::zeros(3), None).unwrap();
        assert!(StatsSet::new(vec![a.clone(), ragged], 2, None).is_err());
        let high = SegmentStats::new(DVector::zeros(2), DVector::zeros(3), Some(7)).unwrap();
        assert!(matches!(
            StatsSet::new(vec![high], 2, None),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(StatsSet::new(vec![a], 2, Some(vec!["only".to_string()])).is_err());
    }
}
