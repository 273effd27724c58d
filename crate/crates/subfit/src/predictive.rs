//! Bayesian model averaging, entropy-based uncertainty decomposition, and
//! evaluation metrics (accuracy, ECE, NLL, AUROC, Wasserstein-1).

use crate::error::{Error, Result};
use crate::net::{softmax, unflatten, Network};
use crate::numerics::{Matrix, SeededRng};

/// Source of posterior weight samples over the flattened cores.
pub trait ThetaSampler {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut SeededRng) -> Vec<f64>;
}

/// Degenerate point-mass posterior at the MAP estimate.
#[derive(Debug, Clone)]
pub struct MapPoint(pub Vec<f64>);

impl ThetaSampler for MapPoint {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, _rng: &mut SeededRng) -> Vec<f64> {
        self.0.clone()
    }
}

/// Per-input posterior predictive samples: one S x C probability matrix per
/// input row.
#[derive(Debug, Clone)]
pub struct PredictiveSamples {
    pub per_input: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct BmaResult {
    pub samples: PredictiveSamples,
    /// N x C model-averaged probabilities.
    pub mean_probs: Matrix,
}

/// Bayesian model averaging: draw `s` theta samples, run forward + softmax
/// for each, and average. Sample `j` uses the deterministic sub-seed
/// `seed ^ j`, so the result does not depend on evaluation order.
pub fn bma_predict(
    net: &Network,
    sampler: &dyn ThetaSampler,
    x: &Matrix,
    s: usize,
    seed: u64,
) -> Result<BmaResult> {
    if s == 0 {
        return Err(Error::invalid_arg("bma_predict needs at least one sample"));
    }
    let n = x.rows();
    let classes = net.classes;
    let mut work = net.clone();
    let mut per_input = vec![Matrix::zeros(s, classes); n];
    let mut mean_probs = Matrix::zeros(n, classes);

    for j in 0..s {
        let mut rng = SeededRng::new(seed ^ j as u64);
        let theta = sampler.sample(&mut rng);
        unflatten(&mut work, &theta)?;
        let probs = softmax(&work.forward(x)?);
        // Incremental mean: exact when every sample coincides (degenerate
        // posteriors reproduce the MAP prediction bit for bit).
        let inv = 1.0 / (j + 1) as f64;
        for i in 0..n {
            for c in 0..classes {
                per_input[i][(j, c)] = probs[(i, c)];
                let m = &mut mean_probs[(i, c)];
                *m += (probs[(i, c)] - *m) * inv;
            }
        }
    }
    Ok(BmaResult {
        samples: PredictiveSamples { per_input },
        mean_probs,
    })
}

/// Shannon entropy in nats with the `0 ln 0 = 0` convention.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

/// Total/aleatoric/epistemic decomposition of predictive uncertainty.
///
/// `total = H(mean of rows)`, `aleatoric = mean of H(row)`, and
/// `epistemic = total - aleatoric`, so the law-of-total-entropy identity
/// holds exactly by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyTriple {
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

pub fn decompose(samples: &Matrix) -> UncertaintyTriple {
    let s = samples.rows();
    let c = samples.cols();
    let mut mean = vec![0.0; c];
    let mut aleatoric = 0.0;
    for i in 0..s {
        let row = samples.row(i);
        aleatoric += entropy(row);
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= s as f64;
    }
    aleatoric /= s as f64;
    let total = entropy(&mean);
    UncertaintyTriple {
        total,
        aleatoric,
        epistemic: total - aleatoric,
    }
}

/// Expected calibration error with equal-width confidence bins on the
/// maximum class probability; empty bins contribute zero.
pub fn ece(mean_probs: &Matrix, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::invalid_arg("ece needs at least one bin"));
    }
    check_labels(mean_probs, labels, "ece")?;
    let n = labels.len();
    let mut bin_count = vec![0usize; bins];
    let mut bin_conf = vec![0.0; bins];
    let mut bin_acc = vec![0.0; bins];
    for (i, &label) in labels.iter().enumerate() {
        let row = mean_probs.row(i);
        let (pred, conf) = argmax(row);
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        bin_count[b] += 1;
        bin_conf[b] += conf;
        bin_acc[b] += (pred == label) as usize as f64;
    }
    let mut total = 0.0;
    for b in 0..bins {
        if bin_count[b] == 0 {
            continue;
        }
        let k = bin_count[b] as f64;
        total += (k / n as f64) * (bin_acc[b] / k - bin_conf[b] / k).abs();
    }
    Ok(total)
}

/// Negative log-likelihood of the labels under the mean probabilities,
/// floored at 1e-12.
pub fn nll(mean_probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(mean_probs, labels, "nll")?;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        total -= mean_probs[(i, label)].max(1e-12).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Fraction of rows whose argmax (ties toward the lowest class index)
/// matches the label.
pub fn accuracy(mean_probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(mean_probs, labels, "accuracy")?;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let (pred, _) = argmax(mean_probs.row(i));
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    (best, row[best])
}

fn check_labels(probs: &Matrix, labels: &[usize], op: &'static str) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{} labels", probs.rows()),
            got: format!("{}", labels.len()),
        });
    }
    if labels.iter().any(|&l| l >= probs.cols()) {
        return Err(Error::invalid_arg("label out of range"));
    }
    if labels.is_empty() {
        return Err(Error::invalid_arg("empty metric input"));
    }
    Ok(())
}

/// Area under the ROC curve for separating OOD (positive, higher scores)
/// from in-distribution scores: the Mann-Whitney U statistic normalized by
/// `n_ood * n_id`, ties counted one half.
pub fn auroc(scores_ood: &[f64], scores_id: &[f64]) -> Result<f64> {
    if scores_ood.is_empty() || scores_id.is_empty() {
        return Err(Error::invalid_arg("auroc needs nonempty score lists"));
    }
    let n_o = scores_ood.len();
    let n_i = scores_id.len();
    let mut combined: Vec<(f64, bool)> = scores_ood
        .iter()
        .map(|&s| (s, true))
        .chain(scores_id.iter().map(|&s| (s, false)))
        .collect();
    combined.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Twice the U statistic stays integral, so ties at one half are exact.
    let mut twice_u: u64 = 0;
    let mut start = 0usize;
    let mut seen_id: u64 = 0;
    while start < combined.len() {
        let mut end = start;
        while end < combined.len() && combined[end].0 == combined[start].0 {
            end += 1;
        }
        let group_ood = combined[start..end].iter().filter(|(_, o)| *o).count() as u64;
        let group_id = (end - start) as u64 - group_ood;
        // Each OOD in the tie group beats all lower IDs and half-ties the
        // equal IDs.
        twice_u += group_ood * (2 * seen_id + group_id);
        seen_id += group_id;
        start = end;
    }
    Ok(twice_u as f64 / (2 * n_o as u64 * n_i as u64) as f64)
}

/// Wasserstein-1 distance between empirical distributions via the
/// sorted-merge CDF integral.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid_arg("wasserstein1 needs nonempty samples"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len() as f64, sb.len() as f64);

    let mut dist = 0.0;
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut prev = f64::NAN;
    while ia < sa.len() || ib < sb.len() {
        let x = match (sa.get(ia), sb.get(ib)) {
            (Some(&va), Some(&vb)) => va.min(vb),
            (Some(&va), None) => va,
            (None, Some(&vb)) => vb,
            (None, None) => break,
        };
        if !prev.is_nan() && x > prev {
            let fa = ia as f64 / na;
            let fb = ib as f64 / nb;
            dist += (fa - fb).abs() * (x - prev);
        }
        while ia < sa.len() && sa[ia] == x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] == x {
            ib += 1;
        }
        prev = x;
    }
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{adapt_network, Activation, Layer, Network};
    use crate::numerics::standard_normal;
    use crate::projections::build_svd;

    fn small_adapted_net(seed: u64) -> Network {
        let base = Network::mlp(&[2, 6, 2], Activation::Tanh, seed).unwrap();
        let mut pairs = vec![None, None, None];
        if let Layer::Plain(l) = &base.layers[0] {
            pairs[0] = Some(build_svd(&l.weight, 2).unwrap());
        }
        adapt_network(&base, pairs, 16.0, false).unwrap()
    }

    fn random_simplex_rows(rng: &mut SeededRng, s: usize, c: usize) -> Matrix {
        let mut m = Matrix::zeros(s, c);
        for i in 0..s {
            let mut total = 0.0;
            for j in 0..c {
                let v = -rng.next_f64().max(1e-12).ln();
                m[(i, j)] = v;
                total += v;
            }
            for j in 0..c {
                m[(i, j)] /= total;
            }
        }
        m
    }

    #[test]
    fn bma_degenerate_posterior_is_map() {
        let net = small_adapted_net(1);
        let x = standard_normal(&mut SeededRng::new(2), 4, 2);
        let theta = crate::net::flatten(&net).values;
        let sampler = MapPoint(theta);
        let map_probs = softmax(&net.forward(&x).unwrap());
        for s in [1usize, 7] {
            let out = bma_predict(&net, &sampler, &x, s, 3).unwrap();
            assert_eq!(out.mean_probs, map_probs, "S={s}");
        }
    }

    #[test]
    fn bma_single_sample_equals_that_sample() {
        let net = small_adapted_net(4);
        let x = standard_normal(&mut SeededRng::new(5), 3, 2);
        // A sampler with genuine spread.
        struct Jitter(usize);
        impl ThetaSampler for Jitter {
            fn dim(&self) -> usize {
                self.0
            }
            fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
                (0..self.0).map(|_| 0.5 * rng.next_normal()).collect()
            }
        }
        let sampler = Jitter(crate::net::flatten(&net).values.len());
        let out = bma_predict(&net, &sampler, &x, 1, 9).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                assert_eq!(out.mean_probs[(i, c)], out.samples.per_input[i][(0, c)]);
            }
        }
        // Monte-Carlo self-consistency: S=1000 vs S=15 agree within 3/sqrt(S).
        let big = bma_predict(&net, &sampler, &x, 1000, 9).unwrap();
        let small = bma_predict(&net, &sampler, &x, 15, 9).unwrap();
        let tol = 3.0 / (15.0f64).sqrt();
        assert!(big.mean_probs.max_abs_diff(&small.mean_probs) < tol);
        // Mean probabilities stay on the simplex.
        for i in 0..3 {
            let sum: f64 = big.mean_probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(big.mean_probs.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn decompose_single_sample_has_zero_epistemic() {
        let row = Matrix::from_vec(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let u = decompose(&row);
        assert_eq!(u.epistemic, 0.0, "exactly zero for S = 1");
        assert_eq!(u.total, u.aleatoric);
    }

    #[test]
    fn decompose_maximal_disagreement() {
        let rows = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let u = decompose(&rows);
        assert!((u.total - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(u.aleatoric, 0.0);
        assert!((u.epistemic - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn decompose_identity_and_nonnegativity() {
        let mut rng = SeededRng::new(11);
        for case in 0..100 {
            let c = 2 + case % 5;
            let rows = random_simplex_rows(&mut rng, 10, c);
            let u = decompose(&rows);
            assert!((u.total - u.aleatoric - u.epistemic).abs() <= 1e-12);
            assert!(u.epistemic >= -1e-12, "Jensen violated: {}", u.epistemic);
            assert!(u.total <= (c as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn ece_confident_and_single_bin_cases() {
        let mut probs = Matrix::zeros(3, 2);
        for i in 0..3 {
            probs[(i, 1)] = 1.0;
        }
        assert_eq!(ece(&probs, &[1, 1, 1], 15).unwrap(), 0.0);

        // Four predictions at confidence 0.6, three of them correct.
        let mut p = Matrix::zeros(4, 2);
        for i in 0..4 {
            p[(i, 0)] = 0.6;
            p[(i, 1)] = 0.4;
        }
        let labels = [0usize, 0, 0, 1];
        let e = ece(&p, &labels, 15).unwrap();
        assert!((e - 0.15).abs() < 1e-12, "ece {e}");
    }

    #[test]
    fn ece_near_zero_for_calibrated_predictions() {
        // Labels sampled from the predicted distribution itself.
        let mut rng = SeededRng::new(21);
        let n = 100_000;
        let mut probs = Matrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let p1 = rng.next_f64();
            probs[(i, 0)] = 1.0 - p1;
            probs[(i, 1)] = p1;
            labels.push((rng.next_f64() < p1) as usize);
        }
        let e = ece(&probs, &labels, 15).unwrap();
        assert!(e <= 0.01, "calibrated ECE {e}");
    }

    #[test]
    fn nll_and_accuracy_examples() {
        let uniform = Matrix::from_vec(4, 2, vec![0.5; 8]).unwrap();
        let labels = [0usize, 1, 0, 1];
        assert!((nll(&uniform, &labels).unwrap() - 2.0f64.ln()).abs() < 1e-12);
        // Ties resolve to class 0: accuracy = fraction of label 0.
        assert_eq!(accuracy(&uniform, &labels).unwrap(), 0.5);

        let mut onehot = Matrix::zeros(2, 3);
        onehot[(0, 2)] = 1.0;
        onehot[(1, 0)] = 1.0;
        assert!(nll(&onehot, &[2, 0]).unwrap() < 1e-12);
        assert_eq!(accuracy(&onehot, &[2, 0]).unwrap(), 1.0);

        // Direct-formula oracle on random probabilities.
        let mut rng = SeededRng::new(31);
        let probs = random_simplex_rows(&mut rng, 20, 4);
        let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let direct = -(0..20)
            .map(|i| probs[(i, labels[i])].max(1e-12).ln())
            .sum::<f64>()
            / 20.0;
        assert!((nll(&probs, &labels).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn auroc_extremes_and_oracle() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());

        let mut rng = SeededRng::new(41);
        for trial in 0..20 {
            let n1 = 5 + trial % 7;
            let n2 = 4 + trial % 5;
            // Quantize so ties actually occur.
            let a: Vec<f64> = (0..n1)
                .map(|_| (rng.next_f64() * 8.0).floor() / 8.0)
                .collect();
            let b: Vec<f64> = (0..n2)
                .map(|_| (rng.next_f64() * 8.0).floor() / 8.0)
                .collect();
            let fast = auroc(&a, &b).unwrap();
            // O(n^2) pairwise oracle.
            let mut twice: u64 = 0;
            for &x in &a {
                for &y in &b {
                    if x > y {
                        twice += 2;
                    } else if x == y {
                        twice += 1;
                    }
                }
            }
            let oracle = twice as f64 / (2 * n1 * n2) as f64;
            assert!((fast - oracle).abs() < 1e-12, "trial {trial}");
            // Antisymmetry.
            let flipped = auroc(&b, &a).unwrap();
            assert!(
                (fast + flipped - 1.0).abs() < 1e-15,
                "auroc(x,y)+auroc(y,x) = {}",
                fast + flipped
            );
        }
    }

    #[test]
    fn wasserstein_basics_and_sorted_pairing() {
        assert_eq!(wasserstein1(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!(wasserstein1(&[], &[0.0]).is_err());

        let mut rng = SeededRng::new(51);
        for _ in 0..10 {
            let n = 64;
            let a: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
            let b: Vec<f64> = (0..n).map(|_| 0.5 + rng.next_normal()).collect();
            let w = wasserstein1(&a, &b).unwrap();
            // Equal sizes: mean absolute difference of sorted samples.
            let mut sa = a.clone();
            let mut sb = b.clone();
            sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
            sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let paired: f64 = sa
                .iter()
                .zip(&sb)
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n as f64;
            assert!((w - paired).abs() < 1e-12, "{w} vs {paired}");
            // Symmetry.
            assert!((w - wasserstein1(&b, &a).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn wasserstein_triangle_inequality() {
        let mut rng = SeededRng::new(61);
        for _ in 0..10 {
            let a: Vec<f64> = (0..20).map(|_| rng.next_normal()).collect();
            let b: Vec<f64> = (0..32).map(|_| rng.next_normal() * 2.0).collect();
            let c: Vec<f64> = (0..25).map(|_| rng.next_normal() - 1.0).collect();
            let ab = wasserstein1(&a, &b).unwrap();
            let bc = wasserstein1(&b, &c).unwrap();
            let ac = wasserstein1(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }
}
