//! k-means codebooks, quantization of features to discrete units and
//! run-length helpers.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::FeatureSequence;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"UCBK";
pub const CODEBOOK_VERSION: u8 = 1;

/// Frame-rate unit ids. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct UnitSequence(Vec<u32>);

impl UnitSequence {
    pub fn new(units: Vec<u32>) -> Result<Self> {
        if units.is_empty() {
            return Err(invalid!("unit sequence is empty"));
        }
        Ok(Self(units))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.0
    }

    /// Error unless every id is below `k`.
    pub fn check_range(&self, k: usize) -> Result<()> {
        match self.0.iter().find(|&&u| u as usize >= k) {
            Some(u) => Err(invalid!("unit id {u} is outside a {k}-unit codebook")),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<u32>> for UnitSequence {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UnitSequence> for Vec<u32> {
    fn from(u: UnitSequence) -> Self {
        u.0
    }
}

/// `(unit, duration)` runs with no two neighbours sharing a unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLengthUnits(pub Vec<(u32, u32)>);

pub fn run_length(u: &UnitSequence) -> RunLengthUnits {
    let mut runs: Vec<(u32, u32)> = Vec::new();
    for &unit in u.as_slice() {
        match runs.last_mut() {
            Some((last, n)) if *last == unit => *n += 1,
            _ => runs.push((unit, 1)),
        }
    }
    RunLengthUnits(runs)
}

pub fn expand(r: &RunLengthUnits) -> Result<UnitSequence> {
    let mut out = Vec::new();
    for (i, &(unit, n)) in r.0.iter().enumerate() {
        if n == 0 {
            return Err(invalid!("run {i} has zero duration"));
        }
        if i > 0 && r.0[i - 1].0 == unit {
            return Err(invalid!("runs {} and {i} share unit {unit}", i - 1));
        }
        out.extend(std::iter::repeat_n(unit, n as usize));
    }
    UnitSequence::new(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `K × n_bands`.
    pub centroids: Array2<f32>,
    /// Fingerprint of the feature config the codebook was trained on.
    pub fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ starts; the run with the lowest final objective wins.
    #[serde(default = "one")]
    pub restarts: usize,
}

fn one() -> usize {
    1
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            tol: 1e-6,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after each assignment step.
    pub objective_history: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids`, lowest index on ties.
fn nearest(x: ArrayView1<f64>, centroids: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Greedy k-means++: each step draws `2 + ln k` candidates with probability
/// proportional to squared distance and keeps the one that lowers the
/// potential most.
fn kmeans_pp(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, points.row(first))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (i, &d) in d2.iter().enumerate() {
                    acc += d;
                    if acc > target && d > 0.0 {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let cand: Vec<f64> = points
                .rows()
                .into_iter()
                .zip(&d2)
                .map(|(p, &d)| d.min(sq_dist(p, points.row(pick))))
                .collect();
            let potential: f64 = cand.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, cand));
            }
        }
        let (_, pick, cand) = best.expect("at least one trial");
        centroids.row_mut(j).assign(&points.row(pick));
        d2 = cand;
    }
    centroids
}

/// Seeded k-means++ followed by Lloyd iterations, repeated `restarts` times
/// from one random stream. Empty clusters are moved to the point currently
/// farthest from its centroid.
pub fn kmeans(points: ArrayView2<f64>, opts: &KMeansOptions) -> Result<KMeansResult> {
    let (n, _) = points.dim();
    if opts.k < 2 {
        return Err(invalid!("k-means needs K ≥ 2, got {}", opts.k));
    }
    if n < opts.k {
        return Err(invalid!("k-means needs at least K = {} frames, got {n}", opts.k));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature value".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..opts.restarts.max(1) {
        let run = lloyd(points, kmeans_pp(points, opts.k, &mut rng), opts)?;
        let better = best
            .as_ref()
            .is_none_or(|b| run.objective_history.last() < b.objective_history.last());
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

fn lloyd(points: ArrayView2<f64>, mut centroids: Array2<f64>, opts: &KMeansOptions) -> Result<KMeansResult> {
    let n = points.nrows();
    let mut assignments = vec![0; n];
    let mut dist = vec![0.0; n];
    let mut history: Vec<f64> = Vec::new();
    for iter in 0..opts.max_iters.max(1) {
        for (i, p) in points.rows().into_iter().enumerate() {
            let (j, d) = nearest(p, centroids.view());
            assignments[i] = j;
            dist[i] = d;
        }
        let objective: f64 = dist.iter().sum();
        if let Some(&prev) = history.last() {
            if objective > prev * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::Numerical(format!(
                    "k-means objective rose from {prev} to {objective} at iteration {iter}"
                )));
            }
            history.push(objective);
            if objective == 0.0 || (prev - objective) / prev < opts.tol {
                break;
            }
        } else {
            history.push(objective);
            if objective == 0.0 {
                break;
            }
        }
        if iter + 1 == opts.max_iters {
            break;
        }

        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; opts.k];
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(assignments[i]);
            row += &p;
            counts[assignments[i]] += 1;
        }
        for j in 0..opts.k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centroids.row_mut(j).assign(&mean);
            }
        }
        // Distances under the updated centroids decide which point is farthest.
        for i in 0..n {
            dist[i] = sq_dist(points.row(i), centroids.row(assignments[i]));
        }
        for j in 0..opts.k {
            if counts[j] == 0 {
                let far = (0..n).fold(0, |best, i| if dist[i] > dist[best] { i } else { best });
                centroids.row_mut(j).assign(&points.row(far));
                dist[far] = 0.0;
            }
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        objective_history: history,
    })
}

fn check_features(f: &FeatureSequence) -> Result<()> {
    if f.normalized != f.config.normalize {
        return Err(invalid!(
            "features are {} but their config says normalize = {}",
            if f.normalized { "normalized" } else { "raw" },
            f.config.normalize
        ));
    }
    Ok(())
}

/// Stack every frame of `features` and cluster them.
pub fn train_codebook(features: &[FeatureSequence], opts: &KMeansOptions) -> Result<(Codebook, KMeansResult)> {
    let first = features.first().ok_or_else(|| invalid!("no features to train a codebook on"))?;
    let fingerprint = first.fingerprint();
    let dim = first.n_bands();
    let total: usize = features.iter().map(FeatureSequence::len).sum();
    let mut points = Array2::<f64>::zeros((total, dim));
    let mut row = 0;
    for f in features {
        check_features(f)?;
        if f.fingerprint() != fingerprint {
            return Err(Error::Fingerprint {
                expected: fingerprint,
                found: f.fingerprint(),
            });
        }
        for frame in f.frames.rows() {
            points.row_mut(row).assign(&frame.mapv(f64::from));
            row += 1;
        }
    }
    let result = kmeans(points.view(), opts)?;
    let codebook = Codebook {
        centroids: result.centroids.mapv(|v| v as f32),
        fingerprint,
    };
    Ok((codebook, result))
}

/// Nearest centroid per frame, lowest index on ties.
pub fn quantize(f: &FeatureSequence, cb: &Codebook) -> Result<UnitSequence> {
    if f.fingerprint() != cb.fingerprint {
        return Err(Error::Fingerprint {
            expected: cb.fingerprint.clone(),
            found: f.fingerprint(),
        });
    }
    check_features(f)?;
    cb.quantize_frames(f.frames.view())
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.centroids.ncols()
    }

    /// Quantize raw frames without a fingerprint check.
    pub fn quantize_frames(&self, frames: ArrayView2<f32>) -> Result<UnitSequence> {
        if frames.ncols() != self.n_bands() {
            return Err(invalid!(
                "frames have {} bands, codebook has {}",
                frames.ncols(),
                self.n_bands()
            ));
        }
        let c = self.centroids.mapv(f64::from);
        let units = frames
            .rows()
            .into_iter()
            .map(|r| nearest(r.mapv(f64::from).view(), c.view()).0 as u32)
            .collect();
        UnitSequence::new(units)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.centroids.len() * 4 + self.fingerprint.len());
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.push(CODEBOOK_VERSION);
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_bands() as u32).to_le_bytes());
        for v in self.centroids.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(self.fingerprint.as_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |msg: &str| invalid!("codebook: {msg}");
        if buf.len() < 13 || &buf[..4] != CODEBOOK_MAGIC {
            return Err(bad("bad magic"));
        }
        if buf[4] != CODEBOOK_VERSION {
            return Err(bad(&format!("unsupported version {}", buf[4])));
        }
        let u32_at = |pos: usize| -> Result<usize> {
            buf.get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or_else(|| bad("truncated"))
        };
        let (k, d) = (u32_at(5)?, u32_at(9)?);
        let body_end = 13 + k * d * 4;
        let body = buf.get(13..body_end).ok_or_else(|| bad("truncated centroids"))?;
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let centroids = Array2::from_shape_vec((k, d), data).map_err(|e| bad(&e.to_string()))?;
        let flen = u32_at(body_end)?;
        let fp = buf
            .get(body_end + 4..body_end + 4 + flen)
            .ok_or_else(|| bad("truncated fingerprint"))?;
        if body_end + 4 + flen != buf.len() {
            return Err(bad("trailing bytes"));
        }
        let fingerprint = String::from_utf8(fp.to_vec()).map_err(|e| bad(&e.to_string()))?;
        if k < 2 || centroids.iter().any(|v| !v.is_finite()) {
            return Err(bad("need K ≥ 2 finite centroids"));
        }
        Ok(Self { centroids, fingerprint })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// One line of a unit dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub id: String,
    pub units: UnitSequence,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use ndarray::array;
    use proptest::prelude::*;

    fn seq(frames: Array2<f32>) -> FeatureSequence {
        FeatureSequence {
            frames,
            config: FeatureConfig {
                normalize: false,
                ..Default::default()
            },
            normalized: false,
        }
    }

    fn codebook(c: Array2<f32>) -> Codebook {
        Codebook {
            centroids: c,
            fingerprint: seq(array![[0.0f32]]).fingerprint(),
        }
    }

    /// Exhaustive oracle: every labelling of the points into at most `k`
    /// clusters, scored by within-cluster SSE.
    fn brute_force_sse(points: &[Vec<f64>], k: usize) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        let mut labels = vec![0usize; n];
        loop {
            let mut sse = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = (0..n).filter(|&i| labels[i] == c).map(|i| &points[i]).collect();
                if members.is_empty() {
                    continue;
                }
                for d in 0..points[0].len() {
                    let m = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                    sse += members.iter().map(|p| (p[d] - m).powi(2)).sum::<f64>();
                }
            }
            best = best.min(sse);
            let mut i = 0;
            loop {
                if i == n {
                    return best;
                }
                labels[i] += 1;
                if labels[i] < k {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn four_points_two_clusters() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
        assert_eq!(brute_force_sse(&pts, 2), 1.0);
        let x = array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let r = kmeans(x.view(), &KMeansOptions::new(2, 0)).unwrap();
        let mut c: Vec<(f64, f64)> = r.centroids.rows().into_iter().map(|r| (r[0], r[1])).collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(c, [(0.0, 0.5), (10.0, 0.5)]);
        assert_eq!(*r.objective_history.last().unwrap(), 1.0);
    }

    #[test]
    fn one_centroid_per_distinct_point() {
        let x = array![[1.0, 2.0], [3.0, -1.0], [0.0, 7.0], [1.0, 2.0], [3.0, -1.0]];
        let r = kmeans(x.view(), &KMeansOptions::new(3, 5)).unwrap();
        assert_eq!(*r.objective_history.last().unwrap(), 0.0);
        let mut rows: Vec<Vec<f64>> = r.centroids.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(rows, [vec![0.0, 7.0], vec![1.0, 2.0], vec![3.0, -1.0]]);
    }

    #[test]
    fn too_few_frames() {
        let f = seq(array![[0.0f32, 1.0]]);
        assert!(train_codebook(&[f], &KMeansOptions::new(2, 0)).is_err());
    }

    #[test]
    fn quantize_nearest_and_ties() {
        let cb = codebook(array![[0.0f32, 0.0], [10.0, 10.0]]);
        let q = |frames: Array2<f32>| quantize(&seq(frames), &cb).unwrap().into_vec();
        assert_eq!(q(array![[1.0, 1.0]]), [0]);
        assert_eq!(q(array![[5.0, 5.0]]), [0]);
        assert_eq!(q(array![[9.0, 9.0], [0.0, 1.0]]), [1, 0]);
    }

    #[test]
    fn fingerprint_mismatch_is_refused() {
        let mut cb = codebook(array![[0.0f32, 0.0], [10.0, 10.0]]);
        cb.fingerprint = "elsewhere".into();
        assert!(matches!(
            quantize(&seq(array![[1.0, 1.0]]), &cb),
            Err(Error::Fingerprint { .. })
        ));
    }

    #[test]
    fn run_length_examples() {
        let u = UnitSequence::new(vec![5, 5, 5, 2, 2, 9]).unwrap();
        assert_eq!(run_length(&u).0, [(5, 3), (2, 2), (9, 1)]);
        assert_eq!(run_length(&UnitSequence::new(vec![7, 7]).unwrap()).0, [(7, 2)]);
        assert!(UnitSequence::new(vec![]).is_err());
        assert!(expand(&RunLengthUnits(vec![(1, 1), (1, 2)])).is_err());
    }

    #[test]
    fn codebook_file_round_trips() {
        let cb = codebook(array![[0.5f32, -1.0, 2.0], [3.0, 4.0, 5.0]]);
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..4], b"UCBK");
        assert_eq!(Codebook::from_bytes(&bytes).unwrap(), cb);
        assert!(Codebook::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn unit_record_json_shape() {
        let r = UnitRecord {
            id: "u1".into(),
            units: UnitSequence::new(vec![3, 1]).unwrap(),
        };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"id":"u1","units":[3,1]}"#);
        assert!(serde_json::from_str::<UnitRecord>(r#"{"id":"u","units":[]}"#).is_err());
    }

    fn point_cloud() -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-5i32..5, 2), 4..7)
            .prop_map(|v| v.into_iter().map(|p| p.into_iter().map(f64::from).collect()).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn run_length_round_trip(units in proptest::collection::vec(0u32..4, 1..40)) {
            let u = UnitSequence::new(units).unwrap();
            let r = run_length(&u);
            prop_assert_eq!(r.0.iter().map(|&(_, n)| n as usize).sum::<usize>(), u.len());
            prop_assert!(r.0.windows(2).all(|w| w[0].0 != w[1].0));
            prop_assert_eq!(expand(&r).unwrap(), u);
        }

        #[test]
        fn objective_never_rises_and_is_reproducible(pts in point_cloud(), k in 2usize..4, seed in 0u64..100) {
            let n = pts.len();
            let x = Array2::from_shape_fn((n, 2), |(i, j)| pts[i][j]);
            let opts = KMeansOptions::new(k, seed);
            let a = kmeans(x.view(), &opts).unwrap();
            for w in a.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            // Lloyd finds a local optimum, never better than the global one.
            prop_assert!(*a.objective_history.last().unwrap() >= brute_force_sse(&pts, k) - 1e-9);
            let b = kmeans(x.view(), &opts).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn quantize_is_permutation_equivariant(
            frames in proptest::collection::vec(proptest::collection::vec(-3.0f32..3.0, 3), 1..12),
            cents in proptest::collection::vec(proptest::collection::vec(-3.0f32..3.0, 3), 4),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let f = seq(Array2::from_shape_fn((frames.len(), 3), |(i, j)| frames[i][j]));
            let c = Array2::from_shape_fn((4, 3), |(i, j)| cents[i][j]);
            // Row perm[i] of the relabelled codebook is old centroid i.
            let mut pc = Array2::zeros((4, 3));
            for i in 0..4 {
                pc.row_mut(perm[i]).assign(&c.row(i));
            }
            // Ties could break differently after relabelling; skip those draws.
            let distinct = f.frames.rows().into_iter().all(|r| {
                let mut d: Vec<f32> = c.rows().into_iter().map(|cr| (&r - &cr).mapv(|v| v * v).sum()).collect();
                d.sort_by(f32::total_cmp);
                d[1] - d[0] > 1e-4
            });
            prop_assume!(distinct);
            let a = quantize(&f, &codebook(c)).unwrap();
            let b = quantize(&f, &codebook(pc)).unwrap();
            let relabelled: Vec<u32> = a.as_slice().iter().map(|&u| perm[u as usize] as u32).collect();
            prop_assert_eq!(b.as_slice(), relabelled.as_slice());
        }
    }
}
