//! EM training of the backend `(m_l, W)` against the variational lower
//! bound. The E-step is exact for this model (the posterior family is
//! Gaussian), so the recorded bound must never decrease; a decrease beyond
//! roundoff tolerance is reported as an error.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Backend, FactorLoadings};
use crate::posterior::{classical_ivector, posterior, Posterior};
use crate::stats::{precision_term, SegmentStats, StatsSet};

/// Tolerance scale for the monotonicity guard: a decrease larger than
/// `MONOTONE_TOL * (1 + |bound|)` is treated as an internal error.
pub const MONOTONE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub max_iters: usize,
    /// Stop once the bound gain falls below `rel_tol * (1 + |bound|)`.
    pub rel_tol: f64,
    /// Eigenvalue floor applied to the pooled covariance before inversion.
    pub eig_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 20,
            rel_tol: 1e-6,
            eig_floor: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !self.rel_tol.is_finite() || self.rel_tol < 0.0 {
            return Err(Error::InvalidArgument("rel_tol must be finite and >= 0".into()));
        }
        if !self.eig_floor.is_finite() || self.eig_floor <= 0.0 {
            return Err(Error::InvalidArgument("eig_floor must be finite and > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Total bound recorded after each M-step.
    pub bounds: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Posterior for every segment under the current backend, in input order.
pub fn e_step(
    segments: &[SegmentStats],
    backend: &Backend,
    loadings: &FactorLoadings,
) -> Result<Vec<Posterior>> {
    segments
        .par_iter()
        .map(|s| posterior(s, backend, loadings))
        .collect()
}

/// New prior means: the per-language average of posterior means.
pub fn m_step_means(
    posteriors: &[Posterior],
    labels: &[usize],
    num_languages: usize,
) -> Result<DMatrix<f64>> {
    let first = posteriors
        .first()
        .ok_or_else(|| Error::InvalidArgument("no posteriors to average".into()))?;
    if labels.len() != posteriors.len() {
        return Err(Error::dims("label count", posteriors.len(), labels.len()));
    }
    let r = first.ivector_dim();
    let mut sums = DMatrix::zeros(num_languages, r);
    let mut counts = vec![0usize; num_languages];
    for (pp, &l) in posteriors.iter().zip(labels) {
        if l >= num_languages {
            return Err(Error::LabelOutOfRange {
                label: l as i64,
                num_languages,
            });
        }
        let mu = pp.mean(l);
        let mut row = sums.row_mut(l);
        row += mu.transpose();
        counts[l] += 1;
    }
    for (l, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass(l));
        }
        let mut row = sums.row_mut(l);
        row /= count as f64;
    }
    Ok(sums)
}

/// New shared precision: invert the pooled within-class second moment
/// `(1/S) sum_s [C_s + (mu_s - mean_l(s))(mu_s - mean_l(s))']`, flooring its
/// eigenvalues at `eig_floor` first so the inverse always exists.
pub fn m_step_precision(
    posteriors: &[Posterior],
    labels: &[usize],
    class_means: &DMatrix<f64>,
    eig_floor: f64,
) -> Result<DMatrix<f64>> {
    let first = posteriors
        .first()
        .ok_or_else(|| Error::InvalidArgument("no posteriors to pool".into()))?;
    if labels.len() != posteriors.len() {
        return Err(Error::dims("label count", posteriors.len(), labels.len()));
    }
    let r = first.ivector_dim();
    let mut pooled = DMatrix::zeros(r, r);
    for (pp, &l) in posteriors.iter().zip(labels) {
        let d = pp.mean(l) - class_means.row(l).transpose();
        pooled += &pp.cov;
        pooled += &d * d.transpose();
    }
    pooled /= posteriors.len() as f64;
    linalg::symmetrize(&mut pooled);

    let eig = SymmetricEigen::new(pooled.clone());
    let floored = if eig.eigenvalues.iter().all(|&v| v >= eig_floor) {
        pooled
    } else {
        let clamped = eig.eigenvalues.map(|v| v.max(eig_floor));
        let mut m = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        linalg::symmetrize(&mut m);
        m
    };
    let mut precision = linalg::cholesky("pooled covariance", floored)?.inverse();
    linalg::symmetrize(&mut precision);
    Ok(precision)
}

/// Variational lower bound for one segment under language `lang` and the
/// posterior `pp`:
///
/// ```text
/// 1/2 log|W| + 1/2 log|C| + R/2
///   - 1/2 [trace(W C) + (mu - m_l)' W (mu - m_l)]
///   + a' mu - 1/2 [trace(B C) + mu' B mu]
/// ```
///
/// The `R/2` entropy constant makes this the exact log of the segment's
/// marginal likelihood whenever `pp` is the exact posterior, so an empty
/// segment under `W = I, m_l = 0` gives exactly zero.
pub fn lower_bound(
    stats: &SegmentStats,
    pp: &Posterior,
    lang: usize,
    backend: &Backend,
    loadings: &FactorLoadings,
) -> Result<f64> {
    let r = backend.ivector_dim();
    if lang >= backend.num_languages() {
        return Err(Error::LabelOutOfRange {
            label: lang as i64,
            num_languages: backend.num_languages(),
        });
    }
    if pp.ivector_dim() != r || pp.num_languages() != backend.num_languages() {
        return Err(Error::dims(
            "posterior shape",
            format!("{}x{r}", backend.num_languages()),
            format!("{}x{}", pp.num_languages(), pp.ivector_dim()),
        ));
    }
    if stats.ivector_dim() != r {
        return Err(Error::dims("stats projection length", r, stats.ivector_dim()));
    }
    let w = backend.precision();
    let b = precision_term(&stats.counts, loadings)?;
    let chol_w = linalg::cholesky("backend precision", w.clone())?;
    let chol_c = linalg::cholesky("posterior covariance", pp.cov.clone())?;
    let mu = pp.mean(lang);
    let d = &mu - backend.mean(lang);
    let prior_term = linalg::trace_prod(w, &pp.cov) + (w * &d).dot(&d);
    let data_term = linalg::trace_prod(&b, &pp.cov) + (&b * &mu).dot(&mu);
    Ok(0.5 * linalg::log_det(&chol_w) + 0.5 * linalg::log_det(&chol_c) + 0.5 * r as f64
        - 0.5 * prior_term
        + stats.projected.dot(&mu)
        - 0.5 * data_term)
}

/// Sum of [`lower_bound`] over a labeled dataset.
pub fn total_lower_bound(
    segments: &[SegmentStats],
    posteriors: &[Posterior],
    labels: &[usize],
    backend: &Backend,
    loadings: &FactorLoadings,
) -> Result<f64> {
    if segments.len() != posteriors.len() || segments.len() != labels.len() {
        return Err(Error::dims(
            "dataset rows",
            segments.len(),
            posteriors.len().min(labels.len()),
        ));
    }
    let mut total = 0.0;
    for ((s, pp), &l) in segments.iter().zip(posteriors).zip(labels) {
        total += lower_bound(s, pp, l, backend, loadings)?;
    }
    Ok(total)
}

/// Runs EM from the classical-i-vector initialization until the bound gain
/// drops below tolerance or `max_iters` is reached. Language names come
/// from the stats set when present, otherwise `lang0..langL-1`.
pub fn train(
    set: &StatsSet,
    loadings: &FactorLoadings,
    config: &TrainConfig,
) -> Result<(Backend, TrainReport)> {
    config.validate()?;
    let num_languages = set.num_languages;
    let labels: Vec<usize> = set
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or(Error::UnlabeledSegment(i)))
        .collect::<Result<_>>()?;
    for l in 0..num_languages {
        if !labels.contains(&l) {
            return Err(Error::EmptyClass(l));
        }
    }
    let names: Vec<String> = match &set.languages {
        Some(names) => names.clone(),
        None => (0..num_languages).map(|l| format!("lang{l}")).collect(),
    };

    // Initialization: class means of classical i-vectors, identity precision.
    let r = loadings.ivector_dim();
    let ivectors: Vec<DVector<f64>> = set
        .segments
        .par_iter()
        .map(|s| classical_ivector(s, loadings).map(|iv| iv.mean))
        .collect::<Result<_>>()?;
    let mut init_means = DMatrix::zeros(num_languages, r);
    let mut counts = vec![0usize; num_languages];
    for (iv, &l) in ivectors.iter().zip(&labels) {
        let mut row = init_means.row_mut(l);
        row += iv.transpose();
        counts[l] += 1;
    }
    for (l, &count) in counts.iter().enumerate() {
        let mut row = init_means.row_mut(l);
        row /= count as f64;
    }
    let mut backend = Backend::new(init_means, DMatrix::identity(r, r), names.clone())?;

    let mut bounds = Vec::with_capacity(config.max_iters);
    let mut converged = false;
    for iter in 0..config.max_iters {
        let posteriors = e_step(&set.segments, &backend, loadings)?;
        let means = m_step_means(&posteriors, &labels, num_languages)?;
        let precision = m_step_precision(&posteriors, &labels, &means, config.eig_floor)?;
        backend = Backend::new(means, precision, names.clone())?;
        let total = total_lower_bound(&set.segments, &posteriors, &labels, &backend, loadings)?;
        if !total.is_finite() {
            return Err(Error::Numeric(format!("bound became non-finite at iteration {iter}")));
        }
        if let Some(&prev) = bounds.last() {
            if total < prev - MONOTONE_TOL * (1.0 + total.abs()) {
                return Err(Error::BoundDecreased {
                    iter,
                    previous: prev,
                    current: total,
                });
            }
            bounds.push(total);
            if total - prev < config.rel_tol * (1.0 + total.abs()) {
                converged = true;
                break;
            }
        } else {
            bounds.push(total);
        }
    }
    let report = TrainReport {
        iterations: bounds.len(),
        bounds,
        converged,
    };
    Ok((backend, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(
        seed: u64,
        s: usize,
        num_languages: usize,
    ) -> (Vec<SegmentStats>, Vec<usize>, Backend, FactorLoadings) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backend = synth::random_backend(&mut rng, num_languages, 2, 1.5);
        let loadings = synth::random_loadings(&mut rng, 3, 2, 2);
        let mut segments = Vec::new();
        let mut labels = Vec::new();
        for i in 0..s {
            let mut seg = synth::random_stats(&mut rng, &loadings, 5.0);
            let l = i % num_languages;
            seg.label = Some(l);
            segments.push(seg);
            labels.push(l);
        }
        (segments, labels, backend, loadings)
    }

    #[test]
    fn mean_update_matches_naive_class_average() {
        let (segments, labels, backend, loadings) = toy_dataset(1, 9, 3);
        let posteriors = e_step(&segments, &backend, &loadings).unwrap();
        let means = m_step_means(&posteriors, &labels, 3).unwrap();
        for l in 0..3 {
            let members: Vec<_> = posteriors
                .iter()
                .zip(&labels)
                .filter(|(_, &lab)| lab == l)
                .map(|(pp, _)| pp.mean(l))
                .collect();
            let mut avg = DVector::zeros(2);
            for m in &members {
                avg += m;
            }
            avg /= members.len() as f64;
            assert_abs_diff_eq!(means.row(l).transpose(), avg, epsilon = 1e-10);
        }
    }

    #[test]
    fn precision_update_matches_naive_two_loop_accumulation() {
        let (segments, labels, backend, loadings) = toy_dataset(2, 12, 3);
        let posteriors = e_step(&segments, &backend, &loadings).unwrap();
        let means = m_step_means(&posteriors, &labels, 3).unwrap();
        let precision = m_step_precision(&posteriors, &labels, &means, 1e-8).unwrap();

        let mut naive = DMatrix::zeros(2, 2);
        for l in 0..3usize {
            for (pp, _) in posteriors.iter().zip(&labels).filter(|(_, &lab)| lab == l) {
                let d = pp.mean(l) - means.row(l).transpose();
                naive += &pp.cov + &d * d.transpose();
            }
        }
        naive /= posteriors.len() as f64;
        let w_naive = naive.try_inverse().unwrap();
        assert!(
            (&precision - &w_naive).amax() <= 1e-10 * w_naive.amax(),
            "precision disagrees with naive accumulation"
        );
    }

    #[test]
    fn grouped_and_per_segment_covariance_accumulations_agree() {
        // Per-segment form: sum of C + (mu - mean)(mu - mean)'.
        // Grouped form: sum of (C + mu mu') minus n_l * mean_l mean_l'.
        let (segments, labels, backend, loadings) = toy_dataset(3, 10, 2);
        let posteriors = e_step(&segments, &backend, &loadings).unwrap();
        let means = m_step_means(&posteriors, &labels, 2).unwrap();

        let mut per_segment = DMatrix::zeros(2, 2);
        let mut grouped = DMatrix::zeros(2, 2);
        let mut class_counts = [0.0f64; 2];
        for (pp, &l) in posteriors.iter().zip(&labels) {
            let mu = pp.mean(l);
            let d = &mu - means.row(l).transpose();
            per_segment += &pp.cov + &d * d.transpose();
            grouped += &pp.cov + &mu * mu.transpose();
            class_counts[l] += 1.0;
        }
        for (l, &count) in class_counts.iter().enumerate() {
            let m = means.row(l).transpose();
            grouped -= &m * m.transpose() * count;
        }
        assert!(
            (&per_segment - &grouped).amax() <= 1e-12 * per_segment.amax().max(1.0),
            "the two covariance accumulations disagree"
        );
    }

    #[test]
    fn accumulator_order_does_not_change_the_update() {
        let (segments, labels, backend, loadings) = toy_dataset(4, 14, 2);
        let posteriors = e_step(&segments, &backend, &loadings).unwrap();
        let means = m_step_means(&posteriors, &labels, 2).unwrap();

        // Two-level chunked reduction, the shape a parallel fold would take.
        let mid = posteriors.len() / 2;
        let partial = |lo: usize, hi: usize| {
            let mut acc = DMatrix::zeros(2, 2);
            for i in lo..hi {
                let d = posteriors[i].mean(labels[i]) - means.row(labels[i]).transpose();
                acc += &posteriors[i].cov + &d * d.transpose();
            }
            acc
        };
        let chunked = (partial(0, mid) + partial(mid, posteriors.len())) / posteriors.len() as f64;
        let mut sequential = partial(0, posteriors.len()) / posteriors.len() as f64;
        linalg::symmetrize(&mut sequential);
        let mut chunked_s = chunked;
        linalg::symmetrize(&mut chunked_s);
        assert!((&sequential - &chunked_s).amax() <= 1e-12);
    }

    #[test]
    fn scalar_bound_at_the_exact_posterior_is_the_exact_log_marginal() {
        // m = 1, W = 1, a = 2, B = 3: log marginal = 5/8 - ln 2.
        let loadings =
            FactorLoadings::new(vec![DMatrix::from_element(1, 1, 3.0f64.sqrt())]).unwrap();
        let stats = SegmentStats::new(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 2.0),
            None,
        )
        .unwrap();
        let backend = Backend::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            vec!["aa".to_string()],
        )
        .unwrap();
        let pp = posterior(&stats, &backend, &loadings).unwrap();
        let bound = lower_bound(&stats, &pp, 0, &backend, &loadings).unwrap();
        assert_abs_diff_eq!(bound, 0.625 - 2.0f64.ln(), epsilon = 1e-12);

        // Moving the posterior mean off the stationary point lowers the bound.
        let mut worse = pp.clone();
        worse.means[(0, 0)] += 0.05;
        let perturbed = lower_bound(&stats, &worse, 0, &backend, &loadings).unwrap();
        assert!(perturbed < bound, "{perturbed} should be below {bound}");
    }

    #[test]
    fn empty_segment_bound_is_zero_under_the_standard_prior() {
        let loadings = synth::random_loadings(&mut ChaCha8Rng::seed_from_u64(5), 3, 2, 2);
        let backend = Backend::new(
            DMatrix::zeros(1, 2),
            DMatrix::identity(2, 2),
            vec!["aa".to_string()],
        )
        .unwrap();
        let stats = SegmentStats::new(DVector::zeros(2), DVector::zeros(2), None).unwrap();
        let pp = posterior(&stats, &backend, &loadings).unwrap();
        let bound = lower_bound(&stats, &pp, 0, &backend, &loadings).unwrap();
        assert_abs_diff_eq!(bound, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bound_never_decreases_and_one_step_improves_the_initialization() {
        for seed in 0..5u64 {
            let (segments, labels, _, loadings) = toy_dataset(100 + seed, 18, 3);
            let set = StatsSet::new(segments.clone(), 3, None).unwrap();
            let config = TrainConfig {
                max_iters: 8,
                rel_tol: 0.0,
                ..TrainConfig::default()
            };
            let (_, report) = train(&set, &loadings, &config).unwrap();
            for pair in report.bounds.windows(2) {
                assert!(
                    pair[1] >= pair[0] - MONOTONE_TOL * (1.0 + pair[1].abs()),
                    "seed {seed}: bound decreased {} -> {}",
                    pair[0],
                    pair[1]
                );
            }

            // The first M-step must already beat the initialization.
            let r = loadings.ivector_dim();
            let mut init_means = DMatrix::zeros(3, r);
            let mut counts = [0usize; 3];
            for (s, &l) in segments.iter().zip(&labels) {
                let iv = classical_ivector(s, &loadings).unwrap().mean;
                let mut row = init_means.row_mut(l);
                row += iv.transpose();
                counts[l] += 1;
            }
            for (l, &count) in counts.iter().enumerate() {
                let mut row = init_means.row_mut(l);
                row /= count as f64;
            }
            let names: Vec<String> = (0..3).map(|l| format!("lang{l}")).collect();
            let init = Backend::new(init_means, DMatrix::identity(r, r), names).unwrap();
            let posteriors = e_step(&segments, &init, &loadings).unwrap();
            let before =
                total_lower_bound(&segments, &posteriors, &labels, &init, &loadings).unwrap();
            assert!(
                report.bounds[0] >= before - MONOTONE_TOL * (1.0 + before.abs()),
                "seed {seed}: first M-step went backwards: {before} -> {}",
                report.bounds[0]
            );
        }
    }

    #[test]
    fn training_recovers_the_generating_class_means() {
        let cfg = synth::SynthConfig {
            dims: crate::model::Dims {
                feature_dim: 4,
                ivector_dim: 2,
                num_components: 2,
                num_languages: 3,
            },
            segments_per_language: 100,
            frames_per_segment: synth::FrameCount::Fixed(2000),
            class_separation: 3.0,
            precision_scale: 1.0,
            tractable: false,
            seed: 1,
        };
        let data = synth::make_dataset(&cfg).unwrap();
        let (backend, report) =
            train(&data.stats, &data.models.loadings, &TrainConfig::default()).unwrap();
        assert!(report.iterations <= TrainConfig::default().max_iters);

        // Long segments pin each posterior near its true latent, so the
        // recovered class means should sit within class-mean sampling noise
        // of the generating ones, measured in the true precision metric.
        let truth = &data.models.backend;
        for l in 0..3 {
            let d = backend.mean(l) - truth.mean(l);
            let dist = (d.transpose() * truth.precision() * &d)[(0, 0)].sqrt();
            assert!(
                dist <= 0.1,
                "language {l}: recovered mean is {dist:.4} from truth in the W-metric"
            );
        }
    }

    // Identical segments make the within-class scatter vanish exactly, so the
    // pooled covariance collapses to the (floored) shared posterior covariance.
    // No finite optimum exists in that regime: every update adds B to W, the
    // precision grows without bound, and the objective only creeps toward its
    // supremum, so training is required to stay monotone rather than to stop.
    #[test]
    fn identical_segments_collapse_the_precision_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let loadings = synth::random_loadings(&mut rng, 3, 2, 2);
        let seg = synth::random_stats(&mut rng, &loadings, 10.0);
        let segments: Vec<SegmentStats> = (0..6)
            .map(|i| {
                let mut s = seg.clone();
                s.label = Some(i % 2);
                s
            })
            .collect();
        let labels = vec![0usize, 1, 0, 1, 0, 1];

        let names = vec!["a".to_string(), "b".to_string()];
        let start = Backend::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), names).unwrap();
        let posteriors = e_step(&segments, &start, &loadings).unwrap();
        let means = m_step_means(&posteriors, &labels, 2).unwrap();
        let precision = m_step_precision(&posteriors, &labels, &means, 1e-8).unwrap();
        let product = &precision * &posteriors[0].cov;
        assert_abs_diff_eq!(product, DMatrix::identity(2, 2), epsilon = 1e-9);

        let set = StatsSet::new(segments, 2, None).unwrap();
        let (_, report) = train(&set, &loadings, &TrainConfig::default()).unwrap();
        assert_eq!(report.bounds.len(), report.iterations);
        for pair in report.bounds.windows(2) {
            assert!(
                pair[1] >= pair[0] - MONOTONE_TOL * (1.0 + pair[0].abs()),
                "bound decreased on identical segments: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    // Empty segments are the identical-segment dataset with a genuine fixed
    // point: B = 0 keeps every posterior equal to the prior, both updates
    // return the parameters unchanged, and the zero gain stops training at
    // iteration two with the prior untouched.
    #[test]
    fn identical_empty_segments_converge_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let loadings = synth::random_loadings(&mut rng, 3, 2, 2);
        let segments: Vec<SegmentStats> = (0..6)
            .map(|i| {
                SegmentStats::new(DVector::zeros(2), DVector::zeros(2), Some(i % 2)).unwrap()
            })
            .collect();
        let set = StatsSet::new(segments, 2, None).unwrap();
        let (backend, report) = train(&set, &loadings, &TrainConfig::default()).unwrap();
        assert!(report.converged);
        assert!(
            report.iterations <= 2,
            "took {} iterations on empty segments",
            report.iterations
        );
        assert_abs_diff_eq!(
            backend.precision().clone_owned(),
            DMatrix::identity(2, 2),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(backend.means().clone_owned(), DMatrix::zeros(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn finite_difference_gradients_vanish_at_the_update_point() {
        let (segments, labels, start, loadings) = toy_dataset(6, 12, 2);
        let posteriors = e_step(&segments, &start, &loadings).unwrap();
        let means = m_step_means(&posteriors, &labels, 2).unwrap();
        let precision = m_step_precision(&posteriors, &labels, &means, 1e-8).unwrap();
        let names = vec!["aa".to_string(), "bb".to_string()];
        let bound_at = |means: &DMatrix<f64>, precision: &DMatrix<f64>| {
            let backend = Backend::new(means.clone(), precision.clone(), names.clone()).unwrap();
            total_lower_bound(&segments, &posteriors, &labels, &backend, &loadings).unwrap()
        };
        let h = 1e-5;
        for l in 0..2 {
            for j in 0..2 {
                let mut plus = means.clone();
                plus[(l, j)] += h;
                let mut minus = means.clone();
                minus[(l, j)] -= h;
                let grad = (bound_at(&plus, &precision) - bound_at(&minus, &precision)) / (2.0 * h);
                assert!(
                    grad.abs() <= 1e-6,
                    "mean gradient ({l},{j}) = {grad} at the update point"
                );
            }
        }
        for i in 0..2 {
            for j in i..2 {
                let mut plus = precision.clone();
                let mut minus = precision.clone();
                plus[(i, j)] += h;
                minus[(i, j)] -= h;
                if i != j {
                    plus[(j, i)] += h;
                    minus[(j, i)] -= h;
                }
                let grad = (bound_at(&means, &plus) - bound_at(&means, &minus)) / (2.0 * h);
                assert!(
                    grad.abs() <= 1e-6,
                    "precision gradient ({i},{j}) = {grad} at the update point"
                );
            }
        }
    }

    #[test]
    fn training_requires_labels_on_every_segment_and_class() {
        let (mut segments, _, _, loadings) = toy_dataset(7, 6, 2);
        segments[3].label = None;
        let set = StatsSet::new(segments.clone(), 2, None).unwrap();
        assert!(matches!(
            train(&set, &loadings, &TrainConfig::default()),
            Err(Error::UnlabeledSegment(3))
        ));

        for s in segments.iter_mut() {
            s.label = Some(0);
        }
        let set = StatsSet::new(segments, 2, None).unwrap();
        assert!(matches!(
            train(&set, &loadings, &TrainConfig::default()),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn eigenvalue_floor_rescues_a_degenerate_pooled_covariance() {
        // All segments share one posterior mean per class, so the pooled
        // between-segment scatter is exactly zero in some directions and the
        // raw pooled matrix is singular without the floor... except the
        // posterior covariance keeps it positive. Force near-singularity by
        // shrinking covariances with huge counts instead.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let loadings = synth::random_loadings(&mut rng, 3, 2, 2);
        let seg = {
            let base = synth::random_stats(&mut rng, &loadings, 1.0);
            SegmentStats::new(&base.counts * 1e12, &base.projected * 1e12, Some(0)).unwrap()
        };
        let segments = vec![seg.clone(), seg.clone()];
        let labels = vec![0usize, 0usize];
        let backend = synth::random_backend(&mut rng, 1, 2, 1.0);
        let posteriors = e_step(&segments, &backend, &loadings).unwrap();
        let means = m_step_means(&posteriors, &labels, 1).unwrap();
        let precision = m_step_precision(&posteriors, &labels, &means, 1e-8).unwrap();
        // Every eigenvalue of the inverse is capped by the floor.
        let eig = SymmetricEigen::new(precision.clone());
        assert!(eig.eigenvalues.iter().all(|&v| v <= 1.0 / 1e-8 * (1.0 + 1e-6)));
        assert!(eig.eigenvalues.iter().all(|&v| v > 0.0));
    }
}
