//! Dataset ingest.
//!
//! Ratings files use one `user::item::rating::timestamp` line per
//! interaction (separator configurable). All ratings are treated as implicit
//! positive feedback. Building a dataset deduplicates interactions, splits
//! each user's items into train/test, and samples train negatives from the
//! items the user never touched. Every random choice draws from a stream
//! derived from the master seed and the user index, so datasets are a pure
//! function of (file, config, seed).

mod synth;

pub use synth::{generate_dataset_files, SynthConfig, SynthFiles};

use crate::error::{Error, Result};
use crate::rng;
use ndarray::Array2;
use rand::seq::SliceRandom;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// One ratings-file line.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRating {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// Parse a ratings file. Malformed lines are hard errors that name the file
/// and line number; blank lines are ignored.
pub fn parse_ratings(path: &Path, separator: &str) -> Result<Vec<RawRating>> {
    if separator.is_empty() {
        return Err(Error::Config("data.separator must not be empty".into()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(separator).collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected 4 fields separated by {separator:?}, found {}", fields.len()),
            ));
        }
        let rating: f64 = fields[2].parse().map_err(|_| {
            Error::parse(path, lineno + 1, format!("rating {:?} is not a number", fields[2]))
        })?;
        let timestamp: i64 = fields[3].trim().parse().map_err(|_| {
            Error::parse(path, lineno + 1, format!("timestamp {:?} is not an integer", fields[3]))
        })?;
        out.push(RawRating {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    Ok(out)
}

/// Split and negative-sampling knobs.
#[derive(Clone, Copy, Debug)]
pub struct SplitConfig {
    /// Fraction of each user's interactions kept for training.
    pub train_frac: f64,
    /// Train negatives sampled per train positive.
    pub neg_ratio: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_frac: 0.8,
            neg_ratio: 4,
        }
    }
}

/// An ingested implicit-feedback dataset with contiguous user/item indices.
#[derive(Clone, Debug)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Raw id for each user index (bijective).
    pub user_ids: Vec<String>,
    /// Raw id for each item index (bijective).
    pub item_ids: Vec<String>,
    /// All train examples, grouped by user: positives then sampled
    /// negatives, labels in {0, 1}.
    pub train: Vec<(usize, usize, u8)>,
    /// Per-user span of `train`.
    pub user_train_ranges: Vec<(usize, usize)>,
    /// Per-user train-interacted items, sorted.
    pub user_positive_sets: Vec<Vec<usize>>,
    /// Per-user held-out positives, sorted. Empty for users with a single
    /// interaction.
    pub test_positives: Vec<Vec<usize>>,
    /// Users dropped because deduplication left them with no interactions.
    pub excluded_users: usize,
}

impl InteractionDataset {
    /// The user's train slice (positives and negatives).
    pub fn user_train(&self, user: usize) -> &[(usize, usize, u8)] {
        let (start, end) = self.user_train_ranges[user];
        &self.train[start..end]
    }

    /// Whether the user interacted with the item in either split.
    pub fn interacted(&self, user: usize, item: usize) -> bool {
        self.user_positive_sets[user].binary_search(&item).is_ok()
            || self.test_positives[user].binary_search(&item).is_ok()
    }
}

fn split_count(n: usize, train_frac: f64) -> usize {
    if n <= 1 {
        return n;
    }
    let raw = ((n as f64) * train_frac + 1e-9).floor() as usize;
    raw.clamp(1, n - 1)
}

/// Deduplicate, split, and negative-sample a rating list into a dataset.
pub fn build_dataset(
    ratings: &[RawRating],
    cfg: &SplitConfig,
    seed: u64,
) -> Result<InteractionDataset> {
    if ratings.is_empty() {
        return Err(Error::Invalid("no ratings to build a dataset from".into()));
    }
    if !(cfg.train_frac > 0.0 && cfg.train_frac < 1.0) {
        return Err(Error::Config(format!(
            "data.train_frac {} must be in (0, 1)",
            cfg.train_frac
        )));
    }

    // Index assignment by first appearance, then per-user deduplicated item
    // lists in appearance order.
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut per_user: Vec<Vec<usize>> = Vec::new();
    let mut seen: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();
    for r in ratings {
        let u = *user_index.entry(r.user.as_str()).or_insert_with(|| {
            user_ids.push(r.user.clone());
            per_user.push(Vec::new());
            user_ids.len() - 1
        });
        let i = *item_index.entry(r.item.as_str()).or_insert_with(|| {
            item_ids.push(r.item.clone());
            item_ids.len() - 1
        });
        if seen.insert((u, i)) {
            per_user[u].push(i);
        }
    }
    let num_users = user_ids.len();
    let num_items = item_ids.len();
    let excluded_users = per_user.iter().filter(|v| v.is_empty()).count();
    if excluded_users == num_users {
        return Err(Error::Invalid("every user was excluded during ingest".into()));
    }

    let mut train = Vec::new();
    let mut user_train_ranges = Vec::with_capacity(num_users);
    let mut user_positive_sets = Vec::with_capacity(num_users);
    let mut test_positives = Vec::with_capacity(num_users);

    for (u, items) in per_user.iter().enumerate() {
        let start = train.len();
        if items.is_empty() {
            user_train_ranges.push((start, start));
            user_positive_sets.push(Vec::new());
            test_positives.push(Vec::new());
            continue;
        }

        let mut shuffled = items.clone();
        let mut split_rng = rng::indexed_stream(seed, "split", u as u64);
        shuffled.shuffle(&mut split_rng);
        let n_train = split_count(shuffled.len(), cfg.train_frac);
        let (train_pos, test_pos) = shuffled.split_at(n_train);

        let mut pos_sorted = train_pos.to_vec();
        pos_sorted.sort_unstable();
        let mut test_sorted = test_pos.to_vec();
        test_sorted.sort_unstable();

        for &i in train_pos {
            train.push((u, i, 1u8));
        }

        // Negatives come from items this user never touched in either
        // split, uniformly without replacement.
        let mut all_sorted = items.clone();
        all_sorted.sort_unstable();
        let mut pool: Vec<usize> = (0..num_items)
            .filter(|i| all_sorted.binary_search(i).is_err())
            .collect();
        let want = (cfg.neg_ratio * train_pos.len()).min(pool.len());
        let mut neg_rng = rng::indexed_stream(seed, "negatives", u as u64);
        let (negs, _) = pool.partial_shuffle(&mut neg_rng, want);
        for &i in negs.iter() {
            train.push((u, i, 0u8));
        }

        user_train_ranges.push((start, train.len()));
        user_positive_sets.push(pos_sorted);
        test_positives.push(test_sorted);
    }

    Ok(InteractionDataset {
        num_users,
        num_items,
        user_ids,
        item_ids,
        train,
        user_train_ranges,
        user_positive_sets,
        test_positives,
        excluded_users,
    })
}

/// Title token lists per item index.
#[derive(Clone, Debug)]
pub struct ItemCatalog {
    tokens: Vec<Vec<String>>,
}

impl ItemCatalog {
    /// Parse a `item::Title::genres` file and align it with the dataset's
    /// item indices. Catalog entries for unknown items are ignored; dataset
    /// items missing from the file get an empty token list.
    pub fn from_title_file(
        path: &Path,
        separator: &str,
        item_ids: &[String],
    ) -> Result<ItemCatalog> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let index: HashMap<&str, usize> = item_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut tokens = vec![Vec::new(); item_ids.len()];
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, separator);
            let id = fields.next().unwrap_or_default();
            let title = fields.next().ok_or_else(|| {
                Error::parse(path, lineno + 1, "missing title field".to_string())
            })?;
            if let Some(&i) = index.get(id) {
                tokens[i] = tokenize_title(title);
            }
        }
        Ok(ItemCatalog { tokens })
    }

    pub fn from_tokens(tokens: Vec<Vec<String>>) -> ItemCatalog {
        ItemCatalog { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self, item: usize) -> &[String] {
        &self.tokens[item]
    }
}

/// Lowercase a title, drop a trailing `(yyyy)` year marker, and split on
/// non-alphanumeric characters.
pub fn tokenize_title(title: &str) -> Vec<String> {
    let trimmed = title.trim();
    let without_year = match trimmed.rfind('(') {
        Some(start) if trimmed.ends_with(')') => {
            let inner = &trimmed[start + 1..trimmed.len() - 1];
            if inner.len() == 4 && inner.chars().all(|c| c.is_ascii_digit()) {
                &trimmed[..start]
            } else {
                trimmed
            }
        }
        _ => trimmed,
    };
    without_year
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token to embedding map loaded from a `token v1 v2 ... vd` text file.
#[derive(Clone, Debug)]
pub struct WordVectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectorTable {
    pub fn load(path: &Path) -> Result<WordVectorTable> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or_else(|| Error::parse(path, lineno + 1, "empty line".to_string()))?
                .to_string();
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse().map_err(|_| {
                        Error::parse(
                            path,
                            lineno + 1,
                            format!("token {token:?} has non-numeric component {p:?}"),
                        )
                    })
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("token {token:?} has no vector components"),
                ));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::parse(
                        path,
                        lineno + 1,
                        format!(
                            "token {token:?} has dimension {} but previous lines had {d}",
                            values.len()
                        ),
                    ));
                }
                _ => {}
            }
            vectors.insert(token, values);
        }
        let dim = dim.ok_or_else(|| Error::Invalid(format!("{}: no vectors", path.display())))?;
        Ok(WordVectorTable { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }
}

/// Load a precomputed item-item similarity matrix from CSV with a header
/// row and column of raw item ids. Every dataset item must be present;
/// values outside [-1, 1] are rejected.
pub fn load_similarity_matrix(path: &Path, item_ids: &[String]) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Invalid(format!("{}: empty file", path.display())))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let col_ids: Vec<String> = header
        .split(',')
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    let col_of: HashMap<&str, usize> = col_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let n = item_ids.len();
    let mut matrix = Array2::zeros((n, n));
    let mut seen_rows = vec![false; n];
    let index: HashMap<&str, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    // Columns the dataset needs must all exist in the header.
    for (id, &i) in &index {
        if !col_of.contains_key(id) {
            return Err(Error::Invalid(format!(
                "{}: similarity matrix is missing a column for item {id:?} (index {i})",
                path.display()
            )));
        }
    }

    for (lineno, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let row_id = fields.next().unwrap_or_default().trim();
        let Some(&row) = index.get(row_id) else {
            continue;
        };
        seen_rows[row] = true;
        let values: Vec<&str> = fields.map(str::trim).collect();
        if values.len() != col_ids.len() {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("row has {} values but header has {} columns", values.len(), col_ids.len()),
            ));
        }
        for (id, &i) in &index {
            let raw = values[col_of[id]];
            let v: f64 = raw.parse().map_err(|_| {
                Error::parse(path, lineno + 1, format!("similarity {raw:?} is not a number"))
            })?;
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("similarity {v} outside [-1, 1]"),
                ));
            }
            matrix[[row, i]] = v;
        }
    }

    if let Some(missing) = seen_rows.iter().position(|&s| !s) {
        return Err(Error::Invalid(format!(
            "{}: similarity matrix is missing a row for item {:?}",
            path.display(),
            item_ids[missing]
        )));
    }
    Ok(matrix)
}
