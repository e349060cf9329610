//! Synthetic dataset generator.
//!
//! Produces the same three files a real corpus provides (ratings, titles,
//! word vectors) so everything downstream runs through the ordinary ingest
//! path. Items are planted into clusters with near-orthogonal cluster
//! vocabularies; each user prefers one cluster and has a power-law activity
//! level. Title-vector similarity therefore carries real signal about the
//! planted structure, which is what the perturbation mechanism and the
//! auxiliary model need to have something to learn.

use crate::error::{Error, Result};
use crate::rng;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub seed: u64,
    /// Minimum interactions per user (power-law scale).
    pub min_interactions: usize,
    /// Hard cap on interactions per user.
    pub max_interactions: usize,
    /// Pareto shape; smaller means heavier tail.
    pub pareto_shape: f64,
    /// Probability that a draw comes from the user's preferred cluster.
    pub main_cluster_prob: f64,
    /// Dimension of generated word vectors.
    pub word_dim: usize,
    /// Vocabulary size per cluster.
    pub tokens_per_cluster: usize,
    /// Tokens per item title.
    pub title_tokens: usize,
    /// Gaussian noise added to each token vector around its cluster axis.
    pub token_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 400,
            items: 120,
            clusters: 6,
            seed: 7,
            min_interactions: 10,
            max_interactions: 40,
            pareto_shape: 1.6,
            main_cluster_prob: 0.9,
            word_dim: 16,
            tokens_per_cluster: 12,
            title_tokens: 3,
            token_noise: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 {
            return Err(Error::Config("synthetic users/items must be positive".into()));
        }
        if self.clusters == 0 || self.clusters > self.items {
            return Err(Error::Config(
                "synthetic clusters must be in 1..=items".into(),
            ));
        }
        if self.word_dim < self.clusters {
            return Err(Error::Config(
                "word_dim must be at least the cluster count for distinct cluster axes".into(),
            ));
        }
        if self.min_interactions == 0 || self.min_interactions > self.max_interactions {
            return Err(Error::Config(
                "min_interactions must be in 1..=max_interactions".into(),
            ));
        }
        if !(self.pareto_shape > 0.0) {
            return Err(Error::Config("pareto_shape must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.main_cluster_prob) {
            return Err(Error::Config("main_cluster_prob must be in [0, 1]".into()));
        }
        if self.title_tokens == 0 || self.title_tokens > self.tokens_per_cluster {
            return Err(Error::Config(
                "title_tokens must be in 1..=tokens_per_cluster".into(),
            ));
        }
        Ok(())
    }
}

/// Paths of the generated files.
#[derive(Clone, Debug)]
pub struct SynthFiles {
    pub ratings: PathBuf,
    pub titles: PathBuf,
    pub word_vectors: PathBuf,
}

/// Generate `ratings.dat`, `movies.dat`, and `vectors.txt` under `dir`.
/// Output is byte-identical for identical configs.
pub fn generate_dataset_files(cfg: &SynthConfig, dir: &Path) -> Result<SynthFiles> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    // Orthonormal cluster axes: random Gaussian directions, Gram-Schmidt.
    let normal = Normal::<f64>::new(0.0, 1.0).expect("valid std");
    let mut axis_rng = rng::stream(cfg.seed, "synth/axes");
    let mut axes = Array2::zeros((cfg.clusters, cfg.word_dim));
    for c in 0..cfg.clusters {
        loop {
            let mut v = Array1::from_shape_fn(cfg.word_dim, |_| normal.sample(&mut axis_rng));
            for prev in 0..c {
                let p = axes.row(prev);
                let proj = v.dot(&p);
                v.scaled_add(-proj, &p);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                v.mapv_inplace(|x| x / norm);
                axes.row_mut(c).assign(&v);
                break;
            }
        }
    }

    // Cluster vocabularies around each axis.
    let mut token_rng = rng::stream(cfg.seed, "synth/tokens");
    let mut vocab: Vec<Vec<String>> = Vec::with_capacity(cfg.clusters);
    let mut vector_lines = String::new();
    for c in 0..cfg.clusters {
        let mut words = Vec::with_capacity(cfg.tokens_per_cluster);
        for k in 0..cfg.tokens_per_cluster {
            let token = format!("c{c}t{k}");
            let mut v = axes.row(c).to_owned();
            for x in v.iter_mut() {
                *x += cfg.token_noise * normal.sample(&mut token_rng);
            }
            vector_lines.push_str(&token);
            for x in v.iter() {
                vector_lines.push(' ');
                vector_lines.push_str(&format!("{x:.6}"));
            }
            vector_lines.push('\n');
            words.push(token);
        }
        vocab.push(words);
    }

    // Items: evenly striped over clusters, titled from the cluster vocab.
    let cluster_of = |item: usize| item % cfg.clusters;
    let mut title_rng = rng::stream(cfg.seed, "synth/titles");
    let mut title_lines = String::new();
    for i in 0..cfg.items {
        let c = cluster_of(i);
        let mut picks: Vec<usize> = (0..cfg.tokens_per_cluster).collect();
        let (chosen, _) = picks.partial_shuffle(&mut title_rng, cfg.title_tokens);
        let words: Vec<String> = chosen
            .iter()
            .map(|&k| {
                let mut w = vocab[c][k].clone();
                w.replace_range(0..1, &w[0..1].to_uppercase());
                w
            })
            .collect();
        let year = 1980 + (i % 40);
        title_lines.push_str(&format!(
            "{}::{} ({year})::Synthetic\n",
            i + 1,
            words.join(" ")
        ));
    }

    // Users: preferred cluster plus power-law activity.
    let mut rating_lines = String::new();
    let mut timestamp: u64 = 978_300_000;
    for u in 0..cfg.users {
        let mut user_rng = rng::indexed_stream(cfg.seed, "synth/user", u as u64);
        let main = user_rng.random_range(0..cfg.clusters);
        let shape = cfg.pareto_shape;
        let unif: f64 = user_rng.random();
        let raw = cfg.min_interactions as f64 * (1.0 - unif).powf(-1.0 / shape);
        let target = (raw.floor() as usize)
            .clamp(cfg.min_interactions, cfg.max_interactions)
            .min(cfg.items);

        let mut chosen: Vec<usize> = Vec::with_capacity(target);
        let mut tried = 0usize;
        while chosen.len() < target && tried < target * 60 {
            tried += 1;
            let item = if user_rng.random::<f64>() < cfg.main_cluster_prob {
                // Uniform item of the preferred cluster.
                let per = cfg.items.div_ceil(cfg.clusters);
                let k = user_rng.random_range(0..per);
                let candidate = k * cfg.clusters + main;
                if candidate >= cfg.items {
                    continue;
                }
                candidate
            } else {
                user_rng.random_range(0..cfg.items)
            };
            if !chosen.contains(&item) {
                chosen.push(item);
            }
        }
        for item in chosen {
            rating_lines.push_str(&format!("{}::{}::5::{timestamp}\n", u + 1, item + 1));
            timestamp += 1;
        }
    }

    let files = SynthFiles {
        ratings: dir.join("ratings.dat"),
        titles: dir.join("movies.dat"),
        word_vectors: dir.join("vectors.txt"),
    };
    write_all(&files.ratings, &rating_lines)?;
    write_all(&files.titles, &title_lines)?;
    write_all(&files.word_vectors, &vector_lines)?;
    Ok(files)
}

fn write_all(path: &Path, content: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(content.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}
