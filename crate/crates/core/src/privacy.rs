//! Local perturbation of interaction sets.
//!
//! Before the first round each client replaces every item in its positive
//! set with a draw from an exponential mechanism: item j replaces item i
//! with probability proportional to exp(epsilon * sim(i, j) / (2 * delta)).
//! Similar items are therefore likely stand-ins, which preserves enough
//! taste signal for the server's auxiliary model while the randomized
//! response keeps any single item deniable. Each replacement satisfies the
//! epsilon bound on its own; the sensitivity delta defaults to the observed
//! similarity range over the catalog.

use crate::data::{ItemCatalog, WordVectorTable};
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Item-item similarity backend.
#[derive(Clone, Debug)]
pub enum SimilarityModel {
    /// Mean title-token word vector per item, L2-normalized. Items whose
    /// titles yield no known vector are flagged absent.
    TitleVectors {
        vectors: Array2<f64>,
        present: Vec<bool>,
    },
    /// Full precomputed matrix, values already validated to [-1, 1].
    Precomputed(Array2<f64>),
}

impl SimilarityModel {
    /// Build the title-vector backend from a catalog and word-vector table.
    pub fn from_word_vectors(catalog: &ItemCatalog, table: &WordVectorTable) -> SimilarityModel {
        let n = catalog.len();
        let d = table.dim();
        let mut vectors = Array2::zeros((n, d));
        let mut present = vec![false; n];
        for i in 0..n {
            let mut acc = vec![0.0; d];
            let mut count = 0usize;
            for token in catalog.tokens(i) {
                if let Some(v) = table.get(token) {
                    for (a, x) in acc.iter_mut().zip(v) {
                        *a += x;
                    }
                    count += 1;
                }
            }
            if count == 0 {
                continue;
            }
            // Normalizing the token sum and the token mean give the same
            // direction, and only the direction matters for cosine.
            let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            for (c, a) in acc.iter().enumerate() {
                vectors[[i, c]] = a / norm;
            }
            present[i] = true;
        }
        SimilarityModel::TitleVectors { vectors, present }
    }

    pub fn from_matrix(matrix: Array2<f64>) -> Result<SimilarityModel> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Shape(format!(
                "similarity matrix is {}x{}, expected square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Invalid(
                "similarity values must lie in [-1, 1]".into(),
            ));
        }
        Ok(SimilarityModel::Precomputed(matrix))
    }

    pub fn num_items(&self) -> usize {
        match self {
            SimilarityModel::TitleVectors { vectors, .. } => vectors.nrows(),
            SimilarityModel::Precomputed(m) => m.nrows(),
        }
    }

    /// The item's normalized title vector, when one exists.
    pub fn item_vector(&self, item: usize) -> Option<ArrayView1<'_, f64>> {
        match self {
            SimilarityModel::TitleVectors { vectors, present } => {
                present[item].then(|| vectors.row(item))
            }
            SimilarityModel::Precomputed(_) => None,
        }
    }

    /// Similarity in [-1, 1]. For the title backend an item is always
    /// similarity 1 to itself, and items without vectors are similarity 0
    /// to everything else.
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        match self {
            SimilarityModel::TitleVectors { vectors, present } => {
                if i == j {
                    1.0
                } else if !present[i] || !present[j] {
                    0.0
                } else {
                    vectors.row(i).dot(&vectors.row(j)).clamp(-1.0, 1.0)
                }
            }
            SimilarityModel::Precomputed(m) => m[[i, j]],
        }
    }
}

/// Mechanism settings. `delta` overrides the sensitivity; when absent the
/// observed similarity range over the catalog is used.
#[derive(Clone, Copy, Debug)]
pub struct PrivacyConfig {
    pub epsilon: f64,
    pub delta: Option<f64>,
}

impl PrivacyConfig {
    pub fn new(epsilon: f64) -> Self {
        PrivacyConfig {
            epsilon,
            delta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "privacy.epsilon {} must be a finite non-negative number",
                self.epsilon
            )));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Config(format!(
                    "privacy.delta_override {d} must be a finite positive number"
                )));
            }
        }
        Ok(())
    }
}

/// Precomputed replacement distributions, one per source item.
///
/// Rows hold both the probabilities (for inspection and the closed-form
/// tests) and their cumulative sums (for O(log n) inverse-CDF sampling).
#[derive(Clone, Debug)]
pub struct PerturbationKernel {
    probs: Array2<f64>,
    cdf: Array2<f64>,
    epsilon: f64,
    delta: f64,
}

impl PerturbationKernel {
    pub fn new(sim: &SimilarityModel, cfg: &PrivacyConfig) -> Result<PerturbationKernel> {
        cfg.validate()?;
        let n = sim.num_items();
        if n == 0 {
            return Err(Error::Invalid("similarity model over zero items".into()));
        }

        let mut sims = Array2::zeros((n, n));
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                let s = sim.similarity(i, j);
                if !s.is_finite() {
                    return Err(Error::Numeric(format!(
                        "similarity({i}, {j}) is not finite"
                    )));
                }
                sims[[i, j]] = s;
                lo = lo.min(s);
                hi = hi.max(s);
            }
        }
        // A flat similarity landscape makes the mechanism uniform for any
        // sensitivity; 1.0 stands in to keep the exponent well-defined.
        let observed = hi - lo;
        let delta = cfg.delta.unwrap_or(if observed > 0.0 { observed } else { 1.0 });

        let mut probs = Array2::zeros((n, n));
        let mut cdf = Array2::zeros((n, n));
        for i in 0..n {
            let mut max_score = f64::NEG_INFINITY;
            for j in 0..n {
                let score = cfg.epsilon * sims[[i, j]] / (2.0 * delta);
                sims[[i, j]] = score;
                max_score = max_score.max(score);
            }
            let mut total = 0.0;
            for j in 0..n {
                let e = (sims[[i, j]] - max_score).exp();
                probs[[i, j]] = e;
                total += e;
            }
            let mut acc = 0.0;
            for j in 0..n {
                probs[[i, j]] /= total;
                acc += probs[[i, j]];
                cdf[[i, j]] = acc;
            }
        }
        Ok(PerturbationKernel {
            probs,
            cdf,
            epsilon: cfg.epsilon,
            delta,
        })
    }

    pub fn num_items(&self) -> usize {
        self.probs.nrows()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// The sensitivity actually used (override or observed range).
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Replacement distribution for one source item.
    pub fn replacement_distribution(&self, source: usize) -> ArrayView1<'_, f64> {
        self.probs.row(source)
    }

    /// Draw a replacement for `source`.
    pub fn sample(&self, source: usize, rng: &mut impl Rng) -> usize {
        let row = self.cdf.row(source);
        let r: f64 = rng.random();
        let slice = row.as_slice().expect("contiguous");
        slice.partition_point(|&c| c <= r).min(slice.len() - 1)
    }
}

/// A client's one-shot upload: independently perturbed copies of its
/// positive items, in input order (duplicates allowed).
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedContribution {
    pub user: usize,
    pub items: Vec<usize>,
}

/// Perturb a positive item set. Each element is replaced independently, so
/// the output is a multiset of the same size.
pub fn perturb_user_set(
    kernel: &PerturbationKernel,
    user: usize,
    positive_items: &[usize],
    rng: &mut impl Rng,
) -> Result<PerturbedContribution> {
    if positive_items.is_empty() {
        return Err(Error::Invalid(format!(
            "user {user} has no positive items to perturb"
        )));
    }
    let n = kernel.num_items();
    let mut items = Vec::with_capacity(positive_items.len());
    for &item in positive_items {
        if item >= n {
            return Err(Error::Invalid(format!(
                "item {item} out of range for {n}-item kernel"
            )));
        }
        items.push(kernel.sample(item, rng));
    }
    Ok(PerturbedContribution { user, items })
}

/// Exhaustively measure the privacy bound actually achieved: the maximum
/// over outputs y and source pairs (x1, x2) of log(P[x1 -> y] / P[x2 -> y]).
/// Quadratic in the catalog; meant for small test catalogs.
pub fn verify_ldp_bound(kernel: &PerturbationKernel) -> f64 {
    let n = kernel.num_items();
    let mut worst = 0.0f64;
    for y in 0..n {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for x in 0..n {
            let p = kernel.probs[[x, y]];
            let lp = p.ln();
            lo = lo.min(lp);
            hi = hi.max(lp);
        }
        worst = worst.max(hi - lo);
    }
    worst
}

/// Write contributions as `user_id<TAB>item_id,item_id,...` lines, using
/// raw dataset ids.
pub fn write_contribution_dump(
    path: &Path,
    contributions: &[PerturbedContribution],
    user_ids: &[String],
    item_ids: &[String],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in contributions {
        let items: Vec<&str> = c.items.iter().map(|&i| item_ids[i].as_str()).collect();
        writeln!(w, "{}\t{}", user_ids[c.user], items.join(","))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn three_item_model() -> SimilarityModel {
        // sim(0, .) = (1.0, 0.5, 0.0), symmetric, self-similarity 1.
        SimilarityModel::from_matrix(array![
            [1.0, 0.5, 0.0],
            [0.5, 1.0, 0.5],
            [0.0, 0.5, 1.0]
        ])
        .unwrap()
    }

    #[test]
    fn replacement_distribution_matches_softmax_oracle() {
        let sim = three_item_model();
        let cfg = PrivacyConfig {
            epsilon: 2.0,
            delta: Some(1.0),
        };
        let kernel = PerturbationKernel::new(&sim, &cfg).unwrap();
        let probs = kernel.replacement_distribution(0);

        // Independent arithmetic: weights exp(eps * sim / (2 * delta)).
        let w = [(1.0f64).exp(), (0.5f64).exp(), (0.0f64).exp()];
        let total: f64 = w.iter().sum();
        for j in 0..3 {
            assert!(
                (probs[j] - w[j] / total).abs() < 1e-12,
                "item {j}: {} vs {}",
                probs[j],
                w[j] / total
            );
        }
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn epsilon_zero_is_exactly_uniform() {
        let sim = three_item_model();
        let kernel = PerturbationKernel::new(&sim, &PrivacyConfig::new(0.0)).unwrap();
        for i in 0..3 {
            for &p in kernel.replacement_distribution(i) {
                assert_eq!(p, 1.0 / 3.0);
            }
        }
    }

    #[test]
    fn default_sensitivity_is_observed_range() {
        let sim = three_item_model();
        let kernel = PerturbationKernel::new(&sim, &PrivacyConfig::new(1.0)).unwrap();
        assert_eq!(kernel.delta(), 1.0); // max 1.0, min 0.0
        let override_kernel = PerturbationKernel::new(
            &sim,
            &PrivacyConfig {
                epsilon: 1.0,
                delta: Some(0.25),
            },
        )
        .unwrap();
        assert_eq!(override_kernel.delta(), 0.25);
    }

    #[test]
    fn privacy_bound_holds_with_observed_range() {
        let sim = three_item_model();
        for epsilon in [0.1, 1.0, 5.0, 20.0] {
            let kernel = PerturbationKernel::new(&sim, &PrivacyConfig::new(epsilon)).unwrap();
            let bound = verify_ldp_bound(&kernel);
            assert!(
                bound <= epsilon + 1e-9,
                "epsilon {epsilon}: measured {bound}"
            );
        }
    }

    #[test]
    fn higher_epsilon_concentrates_on_the_most_similar_item() {
        let sim = three_item_model();
        let mut last = 0.0;
        for epsilon in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let kernel = PerturbationKernel::new(&sim, &PrivacyConfig::new(epsilon)).unwrap();
            let p_self = kernel.replacement_distribution(0)[0];
            assert!(
                p_self >= last - 1e-15,
                "epsilon {epsilon}: {p_self} < {last}"
            );
            last = p_self;
        }
    }

    #[test]
    fn sampling_follows_the_distribution() {
        let sim = three_item_model();
        let kernel = PerturbationKernel::new(
            &sim,
            &PrivacyConfig {
                epsilon: 2.0,
                delta: Some(1.0),
            },
        )
        .unwrap();
        let mut rng = crate::rng::stream(99, "test/sampling");
        let draws = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[kernel.sample(0, &mut rng)] += 1;
        }
        let probs = kernel.replacement_distribution(0);
        let tv: f64 = (0..3)
            .map(|j| (counts[j] as f64 / draws as f64 - probs[j]).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn perturbation_preserves_multiset_size_and_order_independence() {
        let sim = three_item_model();
        let kernel = PerturbationKernel::new(&sim, &PrivacyConfig::new(1.0)).unwrap();
        let mut rng = crate::rng::stream(5, "test/perturb");
        let c = perturb_user_set(&kernel, 3, &[0, 2, 2, 1], &mut rng).unwrap();
        assert_eq!(c.user, 3);
        assert_eq!(c.items.len(), 4);
        assert!(c.items.iter().all(|&i| i < 3));
        assert!(perturb_user_set(&kernel, 0, &[], &mut rng).is_err());
    }

    #[test]
    fn title_backend_flags_items_without_vectors() {
        let catalog = ItemCatalog::from_tokens(vec![
            vec!["alpha".into()],
            vec!["unknown".into()],
            vec!["alpha".into(), "beta".into()],
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        std::fs::write(&path, "alpha 1.0 0.0\nbeta 0.0 1.0\n").unwrap();
        let table = WordVectorTable::load(&path).unwrap();
        let sim = SimilarityModel::from_word_vectors(&catalog, &table);

        assert!(sim.item_vector(0).is_some());
        assert!(sim.item_vector(1).is_none());
        assert_eq!(sim.similarity(1, 1), 1.0);
        assert_eq!(sim.similarity(0, 1), 0.0);
        // cos between (1,0) and the normalized mean of (1,0),(0,1).
        assert!((sim.similarity(0, 2) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn contribution_dump_uses_raw_ids() {
        let contributions = vec![
            PerturbedContribution {
                user: 0,
                items: vec![1, 1, 0],
            },
            PerturbedContribution {
                user: 1,
                items: vec![2],
            },
        ];
        let users = vec!["u9".to_string(), "u4".to_string()];
        let items = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.tsv");
        write_contribution_dump(&path, &contributions, &users, &items).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "u9\tb,b,a\nu4\tc\n");
    }

    use proptest::prelude::*;

    /// Symmetric matrix with unit diagonal and off-diagonal values in [-1, 1].
    fn any_similarity_matrix() -> impl Strategy<Value = Array2<f64>> {
        (2usize..=6).prop_flat_map(|n| {
            prop::collection::vec(-1.0f64..1.0, n * (n - 1) / 2).prop_map(move |upper| {
                let mut m = Array2::eye(n);
                let mut values = upper.into_iter();
                for i in 0..n {
                    for j in (i + 1)..n {
                        let v = values.next().unwrap();
                        m[[i, j]] = v;
                        m[[j, i]] = v;
                    }
                }
                m
            })
        })
    }

    proptest! {
        #[test]
        fn privacy_bound_holds_for_random_catalogs(
            matrix in any_similarity_matrix(),
            epsilon in 0.0f64..20.0,
        ) {
            let sim = SimilarityModel::from_matrix(matrix).unwrap();
            let kernel = PerturbationKernel::new(&sim, &PrivacyConfig::new(epsilon)).unwrap();
            prop_assert!(verify_ldp_bound(&kernel) <= epsilon + 1e-9);
        }

        #[test]
        fn replacement_rows_are_probability_distributions(
            matrix in any_similarity_matrix(),
            epsilon in 0.0f64..20.0,
        ) {
            let n = matrix.nrows();
            let sim = SimilarityModel::from_matrix(matrix).unwrap();
            let kernel = PerturbationKernel::new(&sim, &PrivacyConfig::new(epsilon)).unwrap();
            for i in 0..n {
                let row = kernel.replacement_distribution(i);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
