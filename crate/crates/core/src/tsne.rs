//! Exact t-SNE over vectorized lung masks, k-NN outlier scoring in the
//! embedding, and the outlier exclusion list.
//!
//! Cost is O(n²) per iteration, which is fine for a few hundred masks.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{mask_block_means, BinaryMask};
use crate::preprocess::exclusion_count;

/// Floor applied to joint probabilities before they enter the cost or gradient.
pub const P_FLOOR: f64 = 1e-12;

const SIGMA_MIN: f64 = 1e-20;
const SIGMA_MAX: f64 = 1e20;
pub const CALIBRATION_MAX_ITER: usize = 200;
pub const CALIBRATION_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub case_id: String,
    pub values: Vec<f64>,
}

/// Downscales a mask to `side x side` block coverage fractions, row-major.
pub fn mask_to_vector(case_id: impl Into<String>, mask: &BinaryMask, side: usize) -> Result<FeatureVector> {
    Ok(FeatureVector {
        case_id: case_id.into(),
        values: mask_block_means(mask, side)?,
    })
}

/// Outcome of the per-point bandwidth search.
#[derive(Debug, Clone, PartialEq)]
pub struct RowCalibration {
    pub sigma: f64,
    /// Conditional probabilities p(j|i), summing to 1.
    pub probs: Vec<f64>,
    /// Shannon entropy of `probs` in bits.
    pub entropy: f64,
    pub iterations: usize,
}

impl RowCalibration {
    pub fn perplexity(&self) -> f64 {
        self.entropy.exp2()
    }
}

/// Gaussian conditional probabilities for `sq_dists` at bandwidth `sigma`,
/// with their entropy in bits.
fn gaussian_row(sq_dists: &[f64], d_min: f64, sigma: f64) -> (Vec<f64>, f64) {
    let beta = 1.0 / (2.0 * sigma * sigma);
    let mut probs: Vec<f64> = sq_dists
        .iter()
        .map(|&d| {
            let diff = d - d_min;
            if diff == 0.0 {
                1.0
            } else {
                (-diff * beta).exp()
            }
        })
        .collect();
    let total: f64 = probs.iter().sum();
    let mut entropy = 0.0;
    for p in &mut probs {
        *p /= total;
        if *p > 0.0 {
            entropy -= *p * p.ln();
        }
    }
    (probs, entropy / std::f64::consts::LN_2)
}

/// Bisection (in log sigma) for the bandwidth whose row entropy equals
/// `log2(perplexity)` within `tol` bits.
pub fn calibrate_row(sq_dists: &[f64], perplexity: f64, tol: f64, max_iter: usize) -> Result<RowCalibration> {
    if sq_dists.is_empty() {
        return Err(Error::Empty("distance row"));
    }
    if !(perplexity >= 1.0) {
        return Err(Error::InvalidArgument(format!("perplexity {perplexity} must be at least 1")));
    }
    if sq_dists.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::InvalidArgument("squared distances must be non-negative".into()));
    }
    let target = perplexity.log2();
    let d_min = sq_dists.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for it in 1..=max_iter.min(CALIBRATION_MAX_ITER) {
        let sigma = (lo * hi).sqrt();
        let (probs, entropy) = gaussian_row(sq_dists, d_min, sigma);
        let gap = entropy - target;
        let closer = best.as_ref().is_none_or(|(_, _, h)| gap.abs() < (h - target).abs());
        if gap.abs() <= tol {
            return Ok(RowCalibration {
                sigma,
                probs,
                entropy,
                iterations: it,
            });
        }
        if closer {
            best = Some((sigma, probs, entropy));
        }
        if gap > 0.0 {
            hi = sigma;
        } else {
            lo = sigma;
        }
    }
    let (sigma, _, entropy) = best.expect("at least one iteration");
    Err(Error::PerplexityUnreachable {
        target: perplexity,
        sigma,
        entropy,
    })
}

/// Dense symmetric `n x n` matrix of pairwise probabilities with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    n: usize,
    p: Vec<f64>,
}

impl AffinityMatrix {
    pub fn from_entries(n: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != n * n {
            return Err(Error::InvalidArgument(format!("{} entries for an {n}x{n} matrix", p.len())));
        }
        Ok(Self { n, p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.p
    }

    pub fn sum(&self) -> f64 {
        self.p.iter().sum()
    }

    /// Every entry multiplied by `factor` (early exaggeration).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n: self.n,
            p: self.p.iter().map(|v| v * factor).collect(),
        }
    }

    /// Off-diagonal entries raised to at least `floor`.
    pub fn floored(&self, floor: f64) -> Self {
        let mut p = self.p.clone();
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    p[i * self.n + j] = p[i * self.n + j].max(floor);
                }
            }
        }
        Self { n: self.n, p }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Symmetrized joint probabilities `(p(j|i) + p(i|j)) / 2n`.
pub fn joint_affinities(vectors: &[Vec<f64>], perplexity: f64, tol: f64) -> Result<AffinityMatrix> {
    let n = vectors.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::InvalidArgument("feature vectors differ in length".into()));
    }
    if perplexity >= (n - 1) as f64 {
        return Err(Error::InvalidArgument(format!("perplexity {perplexity} must be below n-1 = {}", n - 1)));
    }
    let mut cond = vec![0.0; n * n];
    let mut row = Vec::with_capacity(n - 1);
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| sq_dist(&vectors[i], &vectors[j])));
        let cal = calibrate_row(&row, perplexity, tol, CALIBRATION_MAX_ITER)?;
        for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
            cond[i * n + j] = cal.probs[k];
        }
    }
    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / denom;
            }
        }
    }
    Ok(AffinityMatrix { n, p })
}

/// Student-t kernel `1 / (1 + |yi - yj|^2)` for every pair, diagonal zero.
fn student_kernel(coords: &[f64], dims: usize) -> Vec<f64> {
    let n = coords.len() / dims;
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let k = 1.0 / (1.0 + sq_dist(&coords[i * dims..(i + 1) * dims], &coords[j * dims..(j + 1) * dims]));
            w[i * n + j] = k;
            w[j * n + i] = k;
        }
    }
    w
}

/// Low-dimensional affinities Q for flat `coords` (point-major, `dims` per point).
pub fn low_dim_affinities(coords: &[f64], dims: usize) -> Result<AffinityMatrix> {
    if dims == 0 || coords.len() % dims != 0 || coords.len() / dims < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let n = coords.len() / dims;
    let mut p = student_kernel(coords, dims);
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    Ok(AffinityMatrix { n, p })
}

/// `KL(P || Q)` over off-diagonal pairs; zero entries of P contribute nothing.
pub fn kl_divergence(p: &AffinityMatrix, q: &AffinityMatrix) -> Result<f64> {
    if p.n != q.n {
        return Err(Error::DimensionMismatch {
            left: (p.n, p.n),
            right: (q.n, q.n),
        });
    }
    let n = p.n;
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p.get(i, j);
            if i == j || pij == 0.0 {
                continue;
            }
            let qij = q.get(i, j);
            if qij <= 0.0 {
                return Err(Error::ZeroQ(i, j));
            }
            kl += pij * (pij / qij).ln();
        }
    }
    Ok(kl)
}

/// `dC/dy_i = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)`, flat like `coords`.
pub fn tsne_gradient(p: &AffinityMatrix, q: &AffinityMatrix, coords: &[f64], dims: usize) -> Vec<f64> {
    let n = p.n;
    let w = student_kernel(coords, dims);
    let mut grad = vec![0.0; n * dims];
    for i in 0..n {
        let gi = &mut grad[i * dims..(i + 1) * dims];
        for j in 0..n {
            if i == j {
                continue;
            }
            let mult = 4.0 * (p.get(i, j) - q.get(i, j)) * w[i * n + j];
            for d in 0..dims {
                gi[d] += mult * (coords[i * dims + d] - coords[j * dims + d]);
            }
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum_early: f64,
    pub momentum_late: f64,
    pub momentum_switch_iter: usize,
    pub exaggeration_factor: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 100.0,
            momentum_early: 0.5,
            momentum_late: 0.8,
            momentum_switch_iter: 250,
            exaggeration_factor: 4.0,
            exaggeration_iters: 100,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("t-SNE config: {m}")));
        if !(self.perplexity > 1.0) {
            return bad("perplexity must exceed 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.exaggeration_factor >= 1.0) {
            return bad("exaggeration factor must be at least 1");
        }
        if self.exaggeration_iters > self.iterations {
            return bad("exaggeration iterations exceed total iterations");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub case_id: String,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub dims: usize,
    pub points: Vec<EmbeddingPoint>,
    /// Cost of the random initial layout.
    pub kl_initial: f64,
    pub kl_final: f64,
}

impl Embedding {
    pub fn flat_coords(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.coords.iter().copied()).collect()
    }
}

pub fn run_tsne(vectors: &[FeatureVector], dims: usize, config: &TsneConfig) -> Result<Embedding> {
    config.validate()?;
    if !(dims == 2 || dims == 3) {
        return Err(Error::InvalidArgument(format!("embedding dims must be 2 or 3, got {dims}")));
    }
    let n = vectors.len();
    if (n as f64) <= config.perplexity + 1.0 {
        return Err(Error::InvalidArgument(format!(
            "{n} points are too few for perplexity {}",
            config.perplexity
        )));
    }
    let raw: Vec<Vec<f64>> = vectors.iter().map(|v| v.values.clone()).collect();
    let p = joint_affinities(&raw, config.perplexity, CALIBRATION_TOL)?.floored(P_FLOOR);
    let p_exaggerated = p.scaled(config.exaggeration_factor);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid stddev");
    let mut y: Vec<f64> = (0..n * dims).map(|_| normal.sample(&mut rng)).collect();
    let mut velocity = vec![0.0; n * dims];

    let kl_initial = kl_divergence(&p, &low_dim_affinities(&y, dims)?)?;
    for it in 0..config.iterations {
        let q = low_dim_affinities(&y, dims)?;
        let target = if it < config.exaggeration_iters { &p_exaggerated } else { &p };
        let grad = tsne_gradient(target, &q, &y, dims);
        let momentum = if it < config.momentum_switch_iter {
            config.momentum_early
        } else {
            config.momentum_late
        };
        for ((yv, v), g) in y.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = momentum * *v - config.learning_rate * g;
            *yv += *v;
        }
        center(&mut y, dims);
    }
    let kl_final = kl_divergence(&p, &low_dim_affinities(&y, dims)?)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("t-SNE diverged; lower the learning rate".into()));
    }

    let points = vectors
        .iter()
        .zip(y.chunks_exact(dims))
        .map(|(v, c)| EmbeddingPoint {
            case_id: v.case_id.clone(),
            coords: c.to_vec(),
        })
        .collect();
    Ok(Embedding {
        dims,
        points,
        kl_initial,
        kl_final,
    })
}

fn center(y: &mut [f64], dims: usize) {
    let n = (y.len() / dims) as f64;
    for d in 0..dims {
        let mean = y.iter().skip(d).step_by(dims).sum::<f64>() / n;
        for v in y.iter_mut().skip(d).step_by(dims) {
            *v -= mean;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub case_id: String,
    pub score: f64,
}

/// Mean Euclidean distance to the `k` nearest other points; equal distances
/// are resolved by case id.
pub fn outlier_scores(embedding: &Embedding, k: usize) -> Result<Vec<ScoredCase>> {
    let pts = &embedding.points;
    if k == 0 || k >= pts.len() {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..{}", pts.len())));
    }
    let mut neighbours: Vec<(f64, &str)> = Vec::with_capacity(pts.len() - 1);
    Ok(pts
        .iter()
        .enumerate()
        .map(|(i, a)| {
            neighbours.clear();
            neighbours.extend(
                pts.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, b)| (sq_dist(&a.coords, &b.coords).sqrt(), b.case_id.as_str())),
            );
            neighbours.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(y.1)));
            let score = neighbours[..k].iter().map(|(d, _)| d).sum::<f64>() / k as f64;
            ScoredCase {
                case_id: a.case_id.clone(),
                score,
            }
        })
        .collect())
}

/// The `floor(fraction * n)` highest-scoring case ids, sorted by id.
pub fn exclusion_list(scores: &[ScoredCase], fraction: f64) -> Result<Vec<String>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside [0, 1)")));
    }
    let mut ranked: Vec<&ScoredCase> = scores.iter().collect();
    ranked.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.case_id.cmp(&b.case_id),
        other => other,
    });
    let mut ids: Vec<String> = ranked
        .into_iter()
        .take(exclusion_count(scores.len(), fraction))
        .map(|s| s.case_id.clone())
        .collect();
    ids.sort();
    Ok(ids)
}

/// Writes `case_id,y1,y2[,y3],score`.
pub fn write_embedding_csv<W: Write>(embedding: &Embedding, scores: &[ScoredCase], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["case_id".to_string()];
    header.extend((1..=embedding.dims).map(|d| format!("y{d}")));
    header.push("score".into());
    w.write_record(&header)?;
    for (p, s) in embedding.points.iter().zip(scores) {
        let mut row = vec![p.case_id.clone()];
        row.extend(p.coords.iter().map(f64::to_string));
        row.push(s.score.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads the `case_id` and `score` columns of an embedding CSV.
pub fn read_embedding_scores<R: Read>(reader: R) -> Result<Vec<ScoredCase>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::malformed("embedding csv", format!("missing column {name}")))
    };
    let (id_col, score_col) = (col("case_id")?, col("score")?);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let score = row[score_col]
            .parse()
            .map_err(|_| Error::malformed("embedding csv", format!("bad score {:?}", &row[score_col])))?;
        out.push(ScoredCase {
            case_id: row[id_col].to_string(),
            score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn vectorize_masks() {
        let ones = BinaryMask::filled(8, 8, true).unwrap();
        assert!(mask_to_vector("a", &ones, 4).unwrap().values.iter().all(|&v| v == 1.0));
        let m = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert_eq!(mask_to_vector("a", &m, 1).unwrap().values, vec![0.25]);
        let big = BinaryMask::filled(2048, 2048, false).unwrap();
        assert_eq!(mask_to_vector("a", &big, 64).unwrap().values.len(), 4096);
        assert!(mask_to_vector("a", &ones, 3).is_err());
    }

    #[test]
    fn equidistant_row_is_uniform() {
        let cal = calibrate_row(&[2.0, 2.0, 2.0], 3.0, 1e-5, 200).unwrap();
        for p in cal.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    /// Plain bisection on sigma over a linear bracket; shares nothing with
    /// the log-space search under test.
    fn oracle_row(d: &[f64], perplexity: f64) -> Vec<f64> {
        let entropy_bits = |sigma: f64| {
            let w: Vec<f64> = d.iter().map(|x| (-x / (2.0 * sigma * sigma)).exp()).collect();
            let z: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|v| v / z).collect();
            let h = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>();
            (p, h)
        };
        let (mut lo, mut hi) = (1e-3, 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if entropy_bits(mid).1 > perplexity.log2() {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        entropy_bits(0.5 * (lo + hi)).0
    }

    #[test]
    fn calibration_matches_bisection_oracle() {
        let cal = calibrate_row(&[1.0, 4.0], 1.5, 1e-12, 200).unwrap();
        let expected = oracle_row(&[1.0, 4.0], 1.5);
        for (a, b) in cal.probs.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!((cal.perplexity() - 1.5).abs() < 1e-9);
    }

    #[test]
    fn calibration_tolerance_and_unreachable() {
        let d = [0.3, 1.2, 2.5, 0.9, 4.0, 0.1];
        let cal = calibrate_row(&d, 4.0, 1e-5, 200).unwrap();
        assert!((cal.entropy - 2.0).abs() <= 1e-5);
        assert!((cal.probs.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        match calibrate_row(&d, 7.0, 1e-5, 200) {
            Err(Error::PerplexityUnreachable { entropy, .. }) => assert!((entropy - 6f64.log2()).abs() < 1e-6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn joint_affinity_invariants_and_mirror_symmetry() {
        // two mirrored pairs in the plane: (-1,0),(-1,1) and (1,0),(1,1)
        let v = vec![vec![-1.0, 0.0], vec![-1.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let p = joint_affinities(&v, 2.0, 1e-10).unwrap();
        let mirror = [2, 3, 0, 1];
        for i in 0..4 {
            assert_eq!(p.get(i, i), 0.0);
            for j in 0..4 {
                assert!((p.get(i, j) - p.get(mirror[i], mirror[j])).abs() < 1e-12);
                assert_eq!(p.get(i, j), p.get(j, i));
            }
        }
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_affinities_compose_row_calibrations() {
        let v = random_vectors(5, 3, 11);
        let p = joint_affinities(&v, 2.5, 1e-10).unwrap();
        let mut cond = [[0.0; 5]; 5];
        for i in 0..5 {
            let others: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            let d: Vec<f64> = others.iter().map(|&j| v[i].iter().zip(&v[j]).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let cal = calibrate_row(&d, 2.5, 1e-10, 200).unwrap();
            for (k, &j) in others.iter().enumerate() {
                cond[i][j] = cal.probs[k];
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == j { 0.0 } else { (cond[i][j] + cond[j][i]) / 10.0 };
                assert!((p.get(i, j) - expected).abs() < 1e-15);
            }
        }
        assert!(joint_affinities(&v[..3], 1.5, 1e-5).is_err());
        assert!(joint_affinities(&v, 4.0, 1e-5).is_err());
    }

    #[test]
    fn duplicate_vectors_are_allowed() {
        let mut v = random_vectors(6, 2, 3);
        v[1] = v[0].clone();
        let p = joint_affinities(&v, 2.0, 1e-5).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.entries().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn low_dim_affinity_cases() {
        let q = low_dim_affinities(&[0.0, 0.0, 37.0, -4.0], 2).unwrap();
        assert_eq!((q.get(0, 1), q.get(1, 0), q.get(0, 0)), (0.5, 0.5, 0.0));
        let h = 3f64.sqrt() / 2.0;
        let tri = low_dim_affinities(&[0.0, 0.0, 1.0, 0.0, 0.5, h], 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((tri.get(i, j) - 1.0 / 6.0).abs() < 1e-15);
                }
            }
        }
        let coincident = low_dim_affinities(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert!((coincident.get(0, 1) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn low_dim_affinities_match_direct_sum() {
        let y = random_vectors(4, 2, 5);
        let flat: Vec<f64> = y.concat();
        let q = low_dim_affinities(&flat, 2).unwrap();
        let kernel = |i: usize, j: usize| 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2));
        let mut z = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    z += kernel(i, j);
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 0.0 } else { kernel(i, j) / z };
                assert!((q.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_cases() {
        let p = joint_affinities(&random_vectors(6, 3, 1), 2.0, 1e-8).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let y: Vec<f64> = random_vectors(6, 2, 2).concat();
        let q = low_dim_affinities(&y, 2).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!(kl >= 0.0);
        let mut oracle = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    oracle += p.get(i, j) * p.get(i, j).ln() - p.get(i, j) * q.get(i, j).ln();
                }
            }
        }
        assert!((kl - oracle).abs() < 1e-12);

        let zero_q = AffinityMatrix::from_entries(2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let half = AffinityMatrix::from_entries(2, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        assert!(matches!(kl_divergence(&half, &zero_q), Err(Error::ZeroQ(0, 1))));
    }

    #[test]
    fn gradient_vanishes_when_p_equals_q() {
        let y: Vec<f64> = random_vectors(5, 2, 9).concat();
        let q = low_dim_affinities(&y, 2).unwrap();
        assert!(tsne_gradient(&q, &q, &y, 2).iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn gradient_respects_pair_swap() {
        // points 0<->1 and 2<->3 swapped by a reflection through the origin
        let y = vec![1.0, 0.5, -1.0, -0.5, 0.2, 2.0, -0.2, -2.0];
        let p = AffinityMatrix::from_entries(
            4,
            vec![0.0, 0.2, 0.05, 0.05, 0.2, 0.0, 0.05, 0.05, 0.05, 0.05, 0.0, 0.1, 0.05, 0.05, 0.1, 0.0],
        )
        .unwrap();
        let g = tsne_gradient(&p, &low_dim_affinities(&y, 2).unwrap(), &y, 2);
        for (a, b) in [(0, 1), (2, 3)] {
            for d in 0..2 {
                assert!((g[a * 2 + d] + g[b * 2 + d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = joint_affinities(&random_vectors(6, 4, 21), 2.0, 1e-10).unwrap();
        let y: Vec<f64> = random_vectors(6, 2, 22).concat();
        let cost = |y: &[f64]| kl_divergence(&p, &low_dim_affinities(y, 2).unwrap()).unwrap();
        let grad = tsne_gradient(&p, &low_dim_affinities(&y, 2).unwrap(), &y, 2);
        let h = 1e-6;
        for k in 0..y.len() {
            let (mut plus, mut minus) = (y.clone(), y.clone());
            plus[k] += h;
            minus[k] -= h;
            let fd = (cost(&plus) - cost(&minus)) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs());
            assert!(rel < 1e-5, "component {k}: {fd} vs {}", grad[k]);
        }
    }

    fn clustered(seed: u64) -> Vec<FeatureVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..24)
            .map(|i| FeatureVector {
                case_id: format!("p{i:02}"),
                values: (0..5).map(|d| if d == i % 3 { 5.0 } else { 0.0 } + rng.gen_range(-0.5..0.5)).collect(),
            })
            .collect()
    }

    #[test]
    fn run_is_seed_deterministic() {
        let cfg = TsneConfig { perplexity: 5.0, iterations: 200, seed: 7, ..Default::default() };
        let a = run_tsne(&clustered(1), 3, &cfg).unwrap();
        let b = run_tsne(&clustered(1), 3, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.points.iter().all(|p| p.coords.len() == 3 && p.coords.iter().all(|c| c.is_finite())));
        assert!(a.kl_final < a.kl_initial);
        let c = run_tsne(&clustered(1), 2, &TsneConfig { seed: 8, ..cfg.clone() }).unwrap();
        assert_ne!(a.flat_coords()[..2], c.flat_coords()[..2]);
    }

    #[test]
    fn run_rejects_bad_inputs() {
        let cfg = TsneConfig { perplexity: 30.0, ..Default::default() };
        assert!(run_tsne(&clustered(1), 2, &cfg).is_err());
        let cfg = TsneConfig { perplexity: 5.0, ..Default::default() };
        assert!(run_tsne(&clustered(1), 4, &cfg).is_err());
        let cfg = TsneConfig { exaggeration_iters: 2000, ..cfg };
        assert!(run_tsne(&clustered(1), 2, &cfg).is_err());
    }

    fn embedding_of(coords: &[(f64, f64)]) -> Embedding {
        Embedding {
            dims: 2,
            points: coords
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| EmbeddingPoint { case_id: format!("c{i:02}"), coords: vec![x, y] })
                .collect(),
            kl_initial: 0.0,
            kl_final: 0.0,
        }
    }

    #[test]
    fn far_point_scores_highest() {
        let mut pts = vec![(0.0, 0.0); 10];
        pts.push((50.0, 50.0));
        let scores = outlier_scores(&embedding_of(&pts), 3).unwrap();
        let max = scores.iter().map(|s| s.score).fold(f64::MIN, f64::max);
        assert_eq!(scores[10].score, max);
        assert!(scores[..10].iter().all(|s| s.score < max));
        let same = outlier_scores(&embedding_of(&[(1.0, 1.0); 6]), 2).unwrap();
        assert!(same.iter().all(|s| s.score == 0.0));
        assert!(outlier_scores(&embedding_of(&[(1.0, 1.0); 6]), 6).is_err());
    }

    fn scored(n: usize) -> Vec<ScoredCase> {
        (0..n).map(|i| ScoredCase { case_id: format!("id{i:03}"), score: (i * 37 % 101) as f64 }).collect()
    }

    #[test]
    fn exclusion_counts() {
        assert_eq!(exclusion_list(&scored(100), 0.05).unwrap().len(), 5);
        assert_eq!(exclusion_list(&scored(247), 0.05).unwrap().len(), 12);
        assert!(exclusion_list(&scored(100), 0.0).unwrap().is_empty());
        assert!(exclusion_list(&scored(10), 1.0).is_err());
    }

    #[test]
    fn exclusion_ties_break_by_id() {
        let s: Vec<_> = ["b", "a", "c"].iter().map(|id| ScoredCase { case_id: id.to_string(), score: 1.0 }).collect();
        assert_eq!(exclusion_list(&s, 0.5).unwrap(), vec!["a".to_string()]);
    }

    #[test]
    fn embedding_csv_columns() {
        let e = embedding_of(&[(1.0, 2.0), (3.0, 4.5)]);
        let s = vec![ScoredCase { case_id: "c00".into(), score: 0.5 }, ScoredCase { case_id: "c01".into(), score: 0.25 }];
        let mut buf = Vec::new();
        write_embedding_csv(&e, &s, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "case_id,y1,y2,score\nc00,1,2,0.5\nc01,3,4.5,0.25\n");
        assert_eq!(read_embedding_scores(buf.as_slice()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn affinity_invariants(seed in any::<u64>(), n in 6usize..14) {
            let p = joint_affinities(&random_vectors(n, 4, seed), 3.0, 1e-5).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            for i in 0..n {
                prop_assert_eq!(p.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert!(p.get(i, j) >= 0.0);
                    prop_assert_eq!(p.get(i, j), p.get(j, i));
                }
            }
        }

        #[test]
        fn exclusion_ignores_input_order(seed in any::<u64>(), n in 0usize..60) {
            use rand::seq::SliceRandom;
            let mut s = scored(n);
            let before = exclusion_list(&s, 0.1).unwrap();
            s.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(exclusion_list(&s, 0.1).unwrap(), before);
        }
    }
}
