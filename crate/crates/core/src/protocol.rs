//! The federated training loop.
//!
//! One experiment runs in a single process but keeps the client/server
//! boundary explicit. Before the first round every client perturbs its
//! training positives once and uploads the result; the server builds a
//! store from those uploads plus sampled negatives and never sees a raw
//! interaction. Each round the server retrains its auxiliary model on the
//! store, then walks the shuffled clients in batches: clients receive the
//! shared parameters (and, when augmentation is on, auxiliary-ranked extra
//! positives), train locally with their private user embedding, and return
//! only the shared part for averaging. When the item-level contrastive
//! term is on, the server follows each aggregation with an optimizer step
//! (one by default) aligning the shared item embeddings to the auxiliary
//! ones. The round ends with a ranking evaluation over held-out positives.
//!
//! Every random choice draws from a stream derived from the experiment
//! seed and a purpose label, so a run is a pure function of its config.

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{
    build_dataset, generate_dataset_files, load_similarity_matrix, parse_ratings,
    InteractionDataset, ItemCatalog, SplitConfig, SynthConfig, WordVectorTable,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, topk_candidates, RankingMetrics};
use crate::model::{
    bce_backward, grad_item_cl, grad_total_client_loss, init_params, AdamConfig, AdamState,
    ClientClConfig, ItemScoreCache, ModelParams, PublicParams, Triple, UserContrast,
};
use crate::output::RoundRecord;
use crate::privacy::{perturb_user_set, PerturbationKernel, PerturbedContribution, SimilarityModel};
use crate::rng;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

/// Hooks at the client/server boundary. Default implementations do
/// nothing; tests install observers to check what actually crosses.
pub trait ProtocolObserver {
    /// A client's one-shot upload: the raw training positives it holds and
    /// the perturbed multiset that leaves the device.
    fn on_upload(&mut self, _user: usize, _raw_positives: &[usize], _uploaded: &[usize]) {}

    /// The examples a client is about to train on, augmented items
    /// included.
    fn on_local_batch(&mut self, _round: usize, _user: usize, _triples: &[Triple]) {}

    /// A locally trained copy of the shared parameters handed back for
    /// aggregation.
    fn on_client_update(&mut self, _round: usize, _user: usize, _public: &PublicParams) {}

    /// Aggregated shared parameters after a client batch.
    fn on_aggregate(&mut self, _round: usize, _public: &PublicParams) {}
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl ProtocolObserver for NoopObserver {}

/// A loaded dataset plus the similarity backend the mechanism needs.
pub struct ExperimentInputs {
    pub dataset: InteractionDataset,
    /// Present when the feature set requires the auxiliary pipeline.
    pub similarity: Option<SimilarityModel>,
}

fn scratch_dir() -> PathBuf {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    std::env::temp_dir().join(format!("fedrec-data-{}-{n}-{nanos}", std::process::id()))
}

/// Resolve the config's data source into a dataset and similarity model.
/// The split and negative sampling use the experiment seed, so different
/// seeds rerun the whole pipeline, not just the training.
pub fn load_inputs(config: &ExperimentConfig) -> Result<ExperimentInputs> {
    config.validate()?;
    let split = SplitConfig {
        train_frac: config.data.train_frac,
        neg_ratio: config.data.neg_ratio,
    };
    let need_sim = config.features.needs_aux();
    match &config.data.source {
        DataSource::Synthetic {
            users,
            items,
            clusters,
            seed,
        } => {
            let synth = SynthConfig {
                users: *users,
                items: *items,
                clusters: *clusters,
                seed: *seed,
                ..SynthConfig::default()
            };
            let dir = scratch_dir();
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let built = (|| {
                let files = generate_dataset_files(&synth, &dir)?;
                let ratings = parse_ratings(&files.ratings, "::")?;
                let dataset = build_dataset(&ratings, &split, config.seed)?;
                let similarity = if need_sim {
                    let catalog =
                        ItemCatalog::from_title_file(&files.titles, "::", &dataset.item_ids)?;
                    let table = WordVectorTable::load(&files.word_vectors)?;
                    Some(SimilarityModel::from_word_vectors(&catalog, &table))
                } else {
                    None
                };
                Ok(ExperimentInputs {
                    dataset,
                    similarity,
                })
            })();
            let _ = std::fs::remove_dir_all(&dir);
            built
        }
        DataSource::Files {
            ratings,
            titles,
            word_vectors,
            separator,
        } => {
            let raw = parse_ratings(Path::new(ratings), separator)?;
            let dataset = build_dataset(&raw, &split, config.seed)?;
            let similarity = if need_sim {
                let catalog =
                    ItemCatalog::from_title_file(Path::new(titles), separator, &dataset.item_ids)?;
                let table = WordVectorTable::load(Path::new(word_vectors))?;
                Some(SimilarityModel::from_word_vectors(&catalog, &table))
            } else {
                None
            };
            Ok(ExperimentInputs {
                dataset,
                similarity,
            })
        }
        DataSource::FilesWithSimilarity {
            ratings,
            similarity,
            separator,
        } => {
            let raw = parse_ratings(Path::new(ratings), separator)?;
            let dataset = build_dataset(&raw, &split, config.seed)?;
            let sim = if need_sim {
                let matrix = load_similarity_matrix(Path::new(similarity), &dataset.item_ids)?;
                Some(SimilarityModel::from_matrix(matrix)?)
            } else {
                None
            };
            Ok(ExperimentInputs {
                dataset,
                similarity: sim,
            })
        }
    }
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct RunResult {
    /// One record per round (or a single round-0 record for zero-round
    /// runs).
    pub rounds: Vec<RoundRecord>,
    /// Metrics of the last evaluation.
    pub final_metrics: RankingMetrics,
    pub model: ModelParams,
    /// The one-shot uploads; empty when no feature needed them.
    pub contributions: Vec<PerturbedContribution>,
}

struct AuxServer {
    params: ModelParams,
    store: Vec<Triple>,
    adam: AdamState,
}

fn collect_uploads(
    dataset: &InteractionDataset,
    kernel: &PerturbationKernel,
    config: &ExperimentConfig,
    observer: &mut dyn ProtocolObserver,
) -> Result<(Vec<Triple>, Vec<PerturbedContribution>)> {
    let mut store = Vec::new();
    let mut contributions = Vec::with_capacity(dataset.num_users);
    for user in 0..dataset.num_users {
        let raw: Vec<usize> = dataset
            .user_train(user)
            .iter()
            .filter(|&&(_, _, label)| label == 1)
            .map(|&(_, item, _)| item)
            .collect();
        if raw.is_empty() {
            continue;
        }
        let mut prng = rng::indexed_stream(config.seed, "perturb", user as u64);
        let contribution = perturb_user_set(kernel, user, &raw, &mut prng)?;
        observer.on_upload(user, &raw, &contribution.items);

        // The server works from the upload alone: distinct uploaded items
        // become positives, negatives come from the rest of the catalog.
        let mut uploaded = vec![false; dataset.num_items];
        let mut distinct = Vec::new();
        for &item in &contribution.items {
            if !uploaded[item] {
                uploaded[item] = true;
                distinct.push(item);
            }
        }
        for &item in &distinct {
            store.push(Triple::new(user, item, 1.0));
        }
        let mut pool: Vec<usize> = (0..dataset.num_items).filter(|&i| !uploaded[i]).collect();
        let want = (config.data.neg_ratio * distinct.len()).min(pool.len());
        let mut nrng = rng::indexed_stream(config.seed, "aux-negatives", user as u64);
        let (sampled, _) = pool.partial_shuffle(&mut nrng, want);
        for &item in sampled.iter() {
            store.push(Triple::new(user, item, 0.0));
        }
        contributions.push(contribution);
    }
    if store.is_empty() {
        return Err(Error::Invalid("no client produced an upload".into()));
    }
    Ok((store, contributions))
}

fn train_aux_round(aux: &mut AuxServer, config: &ExperimentConfig, round: usize) -> Result<f64> {
    let epochs = config.train.local_epochs;
    let mut order: Vec<usize> = (0..aux.store.len()).collect();
    let mut final_epoch_loss = 0.0;
    for epoch in 0..epochs {
        let mut shuffle_rng =
            rng::indexed_stream(config.seed, "aux-shuffle", (round * epochs + epoch) as u64);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.train.aux_batch_size) {
            let batch: Vec<Triple> = chunk.iter().map(|&i| aux.store[i]).collect();
            let (loss, du, pg) = bce_backward(&aux.params.user_emb.view(), &aux.params.public, &batch)?;
            let mut grads: Vec<&[f64]> = Vec::new();
            grads.push(du.as_slice().expect("contiguous"));
            grads.extend(pg.tensors());
            aux.adam.step(&mut aux.params.tensors_mut(), &grads)?;
            total += loss;
        }
        final_epoch_loss = total;
    }
    Ok(final_epoch_loss / aux.store.len() as f64)
}

fn train_client(
    u_row: &mut Array1<f64>,
    mut public: PublicParams,
    triples: &[Triple],
    u_aux: Option<UserContrast<'_, '_>>,
    cl: &ClientClConfig,
    adam_cfg: AdamConfig,
    epochs: usize,
    local_batch: Option<usize>,
    shuffle: &mut ChaCha8Rng,
) -> Result<(PublicParams, f64)> {
    let mut adam = AdamState::new(adam_cfg);
    let mut last_epoch_loss = 0.0;
    let mut index: Vec<usize> = (0..triples.len()).collect();
    let batch = local_batch.unwrap_or(triples.len()).max(1);
    let mut scratch: Vec<Triple> = Vec::with_capacity(batch.min(triples.len()));
    for _ in 0..epochs {
        if local_batch.is_some() {
            index.shuffle(shuffle);
        }
        last_epoch_loss = 0.0;
        for chunk in index.chunks(batch) {
            scratch.clear();
            scratch.extend(chunk.iter().map(|&i| triples[i]));
            // Spread the contrastive term across the epoch's minibatches so
            // the epoch total stays the full-batch objective.
            let chunk_cl = ClientClConfig {
                lambda: cl.lambda * chunk.len() as f64 / triples.len() as f64,
                tau: cl.tau,
            };
            let (loss, grad) =
                grad_total_client_loss(u_row.view(), &public, &scratch, u_aux, &chunk_cl)?;
            last_epoch_loss += loss;
            let mut params: Vec<&mut [f64]> = Vec::new();
            params.push(u_row.as_slice_mut().expect("contiguous"));
            params.extend(public.tensors_mut());
            let mut grads: Vec<&[f64]> = Vec::new();
            grads.push(grad.u.as_slice().expect("contiguous"));
            grads.extend(grad.public.tensors());
            adam.step(&mut params, &grads)?;
        }
    }
    Ok((public, last_epoch_loss))
}

/// Run one experiment to completion.
pub fn run_experiment(
    config: &ExperimentConfig,
    inputs: &ExperimentInputs,
    observer: &mut dyn ProtocolObserver,
) -> Result<RunResult> {
    config.validate()?;
    let dataset = &inputs.dataset;
    let dims = config.model.dims();
    let mut global = init_params(dataset.num_users, dataset.num_items, &dims, config.seed)?;
    let cl_cfg = ClientClConfig {
        lambda: config.contrastive.lambda,
        tau: config.contrastive.tau,
    };

    let mut contributions = Vec::new();
    let mut aux: Option<AuxServer> = None;
    if config.features.needs_aux() {
        let sim = inputs.similarity.as_ref().ok_or_else(|| {
            Error::Config(
                "augmentation or contrastive learning needs an item similarity source".into(),
            )
        })?;
        if sim.num_items() != dataset.num_items {
            return Err(Error::Shape(format!(
                "similarity covers {} items but the dataset has {}",
                sim.num_items(),
                dataset.num_items
            )));
        }
        let kernel = PerturbationKernel::new(sim, &config.privacy.mechanism())?;
        let (store, uploads) = collect_uploads(dataset, &kernel, config, observer)?;
        contributions = uploads;
        // The auxiliary model starts from the same weights as the global
        // model. The contrastive terms compare rows across the two models,
        // which only carries signal when both live in the same coordinate
        // system; an independent init is an arbitrary rotation of it.
        let aux_params = global.clone();
        aux = Some(AuxServer {
            params: aux_params,
            store,
            adam: AdamState::new(config.train.adam()),
        });
    }
    let mut cl_adam = if config.features.item_cl {
        Some(AdamState::new(config.train.adam()))
    } else {
        None
    };

    let participants: Vec<usize> = (0..dataset.num_users)
        .filter(|&u| !dataset.user_train(u).is_empty())
        .collect();
    if participants.is_empty() {
        return Err(Error::Invalid("no user has training data".into()));
    }

    let mut rounds = Vec::with_capacity(config.train.rounds.max(1));
    let mut last_metrics: Option<RankingMetrics> = None;
    let mut cl_step: u64 = 0;

    for round in 0..config.train.rounds {
        let start = Instant::now();
        let aux_loss = match aux.as_mut() {
            Some(server) => Some(train_aux_round(server, config, round)?),
            None => None,
        };
        let aux_ctx = aux
            .as_ref()
            .map(|server| (ItemScoreCache::new(&server.params.public), &server.params));

        let mut order = participants.clone();
        order.shuffle(&mut rng::indexed_stream(config.seed, "order", round as u64));

        let user_rows = if config.features.user_cl {
            config.contrastive.user_sample.map(|m| {
                let mut users: Vec<usize> = (0..dataset.num_users).collect();
                let take = m.min(users.len());
                let mut srng = rng::indexed_stream(config.seed, "user-cl-sample", round as u64);
                let (chosen, _) = users.partial_shuffle(&mut srng, take);
                chosen.to_vec()
            })
        } else {
            None
        };

        let mut loss_sum = 0.0;
        let mut clients = 0usize;
        for batch in order.chunks(config.train.clients_per_batch) {
            let mut updates = Vec::with_capacity(batch.len());
            let mut sizes = Vec::with_capacity(batch.len());
            for &user in batch {
                let mut triples: Vec<Triple> = dataset
                    .user_train(user)
                    .iter()
                    .map(|&(_, item, label)| Triple::new(0, item, label as f64))
                    .collect();
                if config.features.augmentation && config.augment.top_alpha > 0 {
                    let (cache, aux_params) = aux_ctx.as_ref().expect("aux state present");
                    let scores = cache.score_all(&aux_params.public, aux_params.user_emb.row(user));
                    let ranked = topk_candidates(
                        scores.as_slice().expect("contiguous"),
                        &dataset.user_positive_sets[user],
                        config.augment.top_alpha,
                    )?;
                    for item in ranked {
                        triples.push(Triple::new(0, item, 1.0));
                    }
                }
                observer.on_local_batch(round, user, &triples);

                let aux_users = aux_ctx
                    .as_ref()
                    .map(|(_, aux_params)| aux_params.user_emb.view());
                let u_aux = if config.features.user_cl {
                    aux_users.as_ref().map(|view| UserContrast {
                        table: view,
                        self_row: user,
                        rows: user_rows.as_deref(),
                    })
                } else {
                    None
                };

                let mut u_row = global.user_emb.row(user).to_owned();
                let mut local_rng = rng::indexed_stream(
                    config.seed,
                    "local-shuffle",
                    (round * dataset.num_users + user) as u64,
                );
                let (updated, last_loss) = train_client(
                    &mut u_row,
                    global.public.clone(),
                    &triples,
                    u_aux,
                    &cl_cfg,
                    config.train.adam(),
                    config.train.local_epochs,
                    config.train.local_batch,
                    &mut local_rng,
                )?;
                global.user_emb.row_mut(user).assign(&u_row);
                observer.on_client_update(round, user, &updated);
                loss_sum += last_loss / triples.len() as f64;
                clients += 1;
                sizes.push(triples.len() as f64);
                updates.push(updated);
            }
            global.public = if config.train.weighted_aggregation {
                PublicParams::weighted_mean(&updates, Some(&sizes))?
            } else {
                PublicParams::mean(&updates)?
            };
            observer.on_aggregate(round, &global.public);

            if let (Some(adam), Some((_, aux_params))) = (cl_adam.as_mut(), aux_ctx.as_ref()) {
                for _ in 0..config.contrastive.item_cl_steps {
                    let sample = config.contrastive.item_sample.map(|m| {
                        let mut items: Vec<usize> = (0..dataset.num_items).collect();
                        let take = m.min(items.len());
                        let mut srng = rng::indexed_stream(config.seed, "cl-sample", cl_step);
                        let (chosen, _) = items.partial_shuffle(&mut srng, take);
                        chosen.to_vec()
                    });
                    let (_, grad) = grad_item_cl(
                        &global.public.item_emb.view(),
                        &aux_params.public.item_emb.view(),
                        config.contrastive.beta,
                        config.contrastive.tau,
                        sample.as_deref(),
                    )?;
                    adam.step(
                        &mut [global.public.item_emb.as_slice_mut().expect("contiguous")],
                        &[grad.as_slice().expect("contiguous")],
                    )?;
                    cl_step += 1;
                }
            }
        }

        let metrics = evaluate_all(&global, dataset, config.eval.k)?;
        last_metrics = Some(metrics);
        rounds.push(RoundRecord {
            round: round + 1,
            recall: metrics.recall,
            ndcg: metrics.ndcg,
            mean_client_loss: (clients > 0).then(|| loss_sum / clients as f64),
            aux_loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }

    if config.train.rounds == 0 {
        let start = Instant::now();
        let metrics = evaluate_all(&global, dataset, config.eval.k)?;
        last_metrics = Some(metrics);
        rounds.push(RoundRecord {
            round: 0,
            recall: metrics.recall,
            ndcg: metrics.ndcg,
            mean_client_loss: None,
            aux_loss: None,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }

    Ok(RunResult {
        rounds,
        final_metrics: last_metrics.expect("at least one evaluation"),
        model: global,
        contributions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataSource, FeatureFlags};
    use crate::data::RawRating;
    use ndarray::Array2;

    fn rating(user: &str, item: &str) -> RawRating {
        RawRating {
            user: user.into(),
            item: item.into(),
            rating: 5.0,
            timestamp: 0,
        }
    }

    /// Every user rates a personal slice of a small catalog, enough for a
    /// train/test split everywhere.
    fn toy_dataset(users: usize, items: usize, per_user: usize, seed: u64) -> InteractionDataset {
        let mut ratings = Vec::new();
        for u in 0..users {
            for n in 0..per_user {
                let item = (u * 3 + n * 2) % items;
                ratings.push(rating(&format!("u{u}"), &format!("i{item}")));
            }
        }
        build_dataset(
            &ratings,
            &SplitConfig {
                train_frac: 0.8,
                neg_ratio: 2,
            },
            seed,
        )
        .unwrap()
    }

    fn uniform_similarity(n: usize) -> SimilarityModel {
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                m[[i, j]] = if i == j {
                    1.0
                } else {
                    0.4 + 0.2 * ((i + j) % 3) as f64 / 2.0
                };
            }
        }
        SimilarityModel::from_matrix(m).unwrap()
    }

    fn small_config(dataset_users: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            seed: 11,
            ..ExperimentConfig::default()
        };
        cfg.model.embedding_dim = 4;
        cfg.model.hidden = vec![4, 2];
        cfg.train.rounds = 2;
        cfg.train.clients_per_batch = dataset_users.div_ceil(2);
        cfg.train.local_epochs = 2;
        cfg.augment.top_alpha = 2;
        cfg.eval.k = 5;
        cfg
    }

    #[test]
    fn one_client_round_matches_centralized_training() {
        let ratings: Vec<RawRating> = (0..6).map(|i| rating("u0", &format!("i{i}"))).collect();
        let dataset = build_dataset(
            &ratings,
            &SplitConfig {
                train_frac: 0.8,
                neg_ratio: 1,
            },
            3,
        )
        .unwrap();
        assert_eq!(dataset.num_users, 1);

        let mut cfg = ExperimentConfig {
            seed: 3,
            ..ExperimentConfig::default()
        };
        cfg.model.embedding_dim = 4;
        cfg.model.hidden = vec![4, 2];
        cfg.train.rounds = 3;
        cfg.train.clients_per_batch = 1;
        cfg.train.local_epochs = 2;
        cfg.train.local_batch = None;
        cfg.features = FeatureFlags {
            augmentation: false,
            item_cl: false,
            user_cl: false,
        };
        cfg.augment.top_alpha = 0;
        cfg.contrastive.beta = 0.0;
        cfg.contrastive.lambda = 0.0;
        cfg.eval.k = 3;

        let inputs = ExperimentInputs {
            dataset: dataset.clone(),
            similarity: None,
        };
        let result = run_experiment(&cfg, &inputs, &mut NoopObserver).unwrap();

        // Centralized reference: same init, fresh optimizer per round, the
        // same examples, direct full-model steps.
        let mut central =
            init_params(dataset.num_users, dataset.num_items, &cfg.model.dims(), 3).unwrap();
        let triples: Vec<Triple> = dataset
            .user_train(0)
            .iter()
            .map(|&(_, item, label)| Triple::new(0, item, label as f64))
            .collect();
        for _ in 0..cfg.train.rounds {
            let mut adam = AdamState::new(cfg.train.adam());
            for _ in 0..cfg.train.local_epochs {
                let (_, du, pg) =
                    bce_backward(&central.user_emb.view(), &central.public, &triples).unwrap();
                let mut grads: Vec<&[f64]> = vec![du.as_slice().unwrap()];
                grads.extend(pg.tensors());
                adam.step(&mut central.tensors_mut(), &grads).unwrap();
            }
        }

        let fed = &result.model;
        assert_eq!(fed.user_emb, central.user_emb);
        assert_eq!(fed.public.item_emb, central.public.item_emb);
        for (a, b) in fed.public.layers.iter().zip(&central.public.layers) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
        assert_eq!(fed.public.out, central.public.out);
        let bits_equal = fed
            .user_emb
            .iter()
            .zip(central.user_emb.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(bits_equal);
    }

    #[test]
    fn disabled_features_match_plain_baseline_regardless_of_knobs() {
        let dataset = toy_dataset(8, 12, 6, 5);
        let inputs = ExperimentInputs {
            dataset,
            similarity: None,
        };
        let mut a = small_config(8);
        a.features = FeatureFlags {
            augmentation: false,
            item_cl: false,
            user_cl: false,
        };
        let mut b = a.clone();
        b.augment.top_alpha = 0;
        b.contrastive.beta = 0.0;
        b.contrastive.lambda = 0.0;

        let ra = run_experiment(&a, &inputs, &mut NoopObserver).unwrap();
        let rb = run_experiment(&b, &inputs, &mut NoopObserver).unwrap();
        for (x, y) in ra.rounds.iter().zip(&rb.rounds) {
            assert_eq!(x.recall, y.recall);
            assert_eq!(x.ndcg, y.ndcg);
            assert_eq!(x.mean_client_loss, y.mean_client_loss);
        }
        assert_eq!(ra.model.user_emb, rb.model.user_emb);
        assert_eq!(ra.model.public.item_emb, rb.model.public.item_emb);
        assert!(ra.contributions.is_empty());
    }

    struct BoundaryProbe {
        uploads: Vec<(usize, Vec<usize>, Vec<usize>)>,
        batch_sizes: Vec<usize>,
        augmented: Vec<(usize, Vec<Triple>)>,
    }

    impl ProtocolObserver for BoundaryProbe {
        fn on_upload(&mut self, user: usize, raw: &[usize], uploaded: &[usize]) {
            self.uploads.push((user, raw.to_vec(), uploaded.to_vec()));
        }
        fn on_local_batch(&mut self, _round: usize, user: usize, triples: &[Triple]) {
            self.augmented.push((user, triples.to_vec()));
        }
        fn on_aggregate(&mut self, _round: usize, public: &PublicParams) {
            self.batch_sizes.push(public.num_items());
        }
    }

    #[test]
    fn uploads_happen_once_and_carry_only_perturbed_items() {
        let dataset = toy_dataset(10, 15, 6, 9);
        let expected_raw: Vec<Vec<usize>> = (0..10)
            .map(|u| {
                dataset
                    .user_train(u)
                    .iter()
                    .filter(|&&(_, _, y)| y == 1)
                    .map(|&(_, i, _)| i)
                    .collect()
            })
            .collect();
        let inputs = ExperimentInputs {
            similarity: Some(uniform_similarity(dataset.num_items)),
            dataset,
        };
        let mut cfg = small_config(10);
        cfg.privacy.epsilon = 0.1;
        cfg.train.rounds = 1;
        let mut probe = BoundaryProbe {
            uploads: Vec::new(),
            batch_sizes: Vec::new(),
            augmented: Vec::new(),
        };
        let result = run_experiment(&cfg, &inputs, &mut probe).unwrap();

        assert_eq!(probe.uploads.len(), 10, "one upload per client");
        let mut seen = vec![false; 10];
        for (user, raw, uploaded) in &probe.uploads {
            assert!(!seen[*user], "client {user} uploaded twice");
            seen[*user] = true;
            assert_eq!(raw, &expected_raw[*user]);
            assert_eq!(uploaded.len(), raw.len());
        }
        assert_eq!(result.contributions.len(), 10);
        // At epsilon 0.1 replacements are near-uniform over 15 items; all
        // ~40 positives surviving unchanged is out of the question.
        assert!(
            probe
                .uploads
                .iter()
                .any(|(_, raw, uploaded)| raw != uploaded),
            "perturbation left every upload untouched"
        );
    }

    #[test]
    fn augmentation_appends_alpha_new_positives() {
        let dataset = toy_dataset(6, 12, 6, 13);
        let train_sizes: Vec<usize> = (0..6).map(|u| dataset.user_train(u).len()).collect();
        let positive_sets = dataset.user_positive_sets.clone();
        let inputs = ExperimentInputs {
            similarity: Some(uniform_similarity(dataset.num_items)),
            dataset,
        };
        let mut cfg = small_config(6);
        cfg.train.rounds = 1;
        cfg.augment.top_alpha = 3;
        let mut probe = BoundaryProbe {
            uploads: Vec::new(),
            batch_sizes: Vec::new(),
            augmented: Vec::new(),
        };
        run_experiment(&cfg, &inputs, &mut probe).unwrap();

        assert_eq!(probe.augmented.len(), 6);
        for (user, triples) in &probe.augmented {
            assert_eq!(triples.len(), train_sizes[*user] + 3);
            for extra in &triples[train_sizes[*user]..] {
                assert_eq!(extra.label, 1.0);
                assert!(
                    positive_sets[*user].binary_search(&extra.item).is_err(),
                    "augmented item {} was already a train positive",
                    extra.item
                );
            }
        }
    }

    #[test]
    fn same_seed_runs_are_identical_and_seeds_differ() {
        let dataset = toy_dataset(8, 12, 6, 21);
        let inputs = ExperimentInputs {
            similarity: Some(uniform_similarity(dataset.num_items)),
            dataset,
        };
        let cfg = small_config(8);
        let r1 = run_experiment(&cfg, &inputs, &mut NoopObserver).unwrap();
        let r2 = run_experiment(&cfg, &inputs, &mut NoopObserver).unwrap();
        assert_eq!(r1.model.user_emb, r2.model.user_emb);
        assert_eq!(r1.model.public.item_emb, r2.model.public.item_emb);
        assert_eq!(r1.contributions, r2.contributions);
        for (a, b) in r1.rounds.iter().zip(&r2.rounds) {
            assert_eq!(a.recall, b.recall);
            assert_eq!(a.ndcg, b.ndcg);
            assert_eq!(a.mean_client_loss, b.mean_client_loss);
            assert_eq!(a.aux_loss, b.aux_loss);
        }

        let mut other = cfg.clone();
        other.seed = 12;
        let r3 = run_experiment(&other, &inputs, &mut NoopObserver).unwrap();
        assert_ne!(r1.model.public.item_emb, r3.model.public.item_emb);
    }

    #[test]
    fn zero_rounds_evaluates_the_initial_model_once() {
        let dataset = toy_dataset(5, 10, 6, 2);
        let inputs = ExperimentInputs {
            dataset,
            similarity: None,
        };
        let mut cfg = small_config(5);
        cfg.train.rounds = 0;
        cfg.features = FeatureFlags {
            augmentation: false,
            item_cl: false,
            user_cl: false,
        };
        let result = run_experiment(&cfg, &inputs, &mut NoopObserver).unwrap();
        assert_eq!(result.rounds.len(), 1);
        let record = &result.rounds[0];
        assert_eq!(record.round, 0);
        assert_eq!(record.mean_client_loss, None);
        assert_eq!(record.aux_loss, None);
    }

    #[test]
    fn missing_similarity_is_a_config_error() {
        let dataset = toy_dataset(5, 10, 6, 2);
        let inputs = ExperimentInputs {
            dataset,
            similarity: None,
        };
        let cfg = small_config(5);
        let err = run_experiment(&cfg, &inputs, &mut NoopObserver).unwrap_err();
        assert!(err.to_string().contains("similarity"), "{err}");
    }

    #[test]
    fn synthetic_inputs_load_end_to_end() {
        let mut cfg = ExperimentConfig {
            seed: 2,
            ..ExperimentConfig::default()
        };
        cfg.data.source = DataSource::Synthetic {
            users: 20,
            items: 30,
            clusters: 3,
            seed: 4,
        };
        let inputs = load_inputs(&cfg).unwrap();
        assert_eq!(inputs.dataset.num_users, 20);
        assert_eq!(inputs.dataset.num_items, 30);
        assert!(inputs.similarity.is_some());
        let sim = inputs.similarity.as_ref().unwrap();
        assert_eq!(sim.num_items(), 30);

        cfg.features = FeatureFlags {
            augmentation: false,
            item_cl: false,
            user_cl: false,
        };
        let bare = load_inputs(&cfg).unwrap();
        assert!(bare.similarity.is_none());
    }

    #[test]
    fn local_objective_is_non_increasing_over_epochs() {
        let dims = crate::model::ModelDims {
            embedding_dim: 4,
            hidden: vec![4, 2],
            activation: crate::model::Activation::Relu,
        };
        let model = init_params(1, 6, &dims, 29).unwrap();
        let aux = init_params(3, 6, &dims, 30).unwrap();
        let triples = vec![
            Triple::new(0, 0, 1.0),
            Triple::new(0, 2, 1.0),
            Triple::new(0, 3, 0.0),
            Triple::new(0, 5, 0.0),
        ];
        let cl = ClientClConfig {
            lambda: 0.5,
            tau: 0.2,
        };
        let view = aux.user_emb.view();
        let contrast = UserContrast {
            table: &view,
            self_row: 1,
            rows: None,
        };

        let mut u_row = model.user_emb.row(0).to_owned();
        let mut public = model.public.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.001));
        let mut losses = Vec::new();
        for _ in 0..5 {
            let (loss, grad) =
                grad_total_client_loss(u_row.view(), &public, &triples, Some(contrast), &cl)
                    .unwrap();
            losses.push(loss);
            let mut params: Vec<&mut [f64]> = vec![u_row.as_slice_mut().unwrap()];
            params.extend(public.tensors_mut());
            let mut grads: Vec<&[f64]> = vec![grad.u.as_slice().unwrap()];
            grads.extend(grad.public.tensors());
            adam.step(&mut params, &grads).unwrap();
        }
        for pair in losses.windows(2) {
            assert!(
                pair[1] <= pair[0],
                "objective rose between epochs: {losses:?}"
            );
        }
    }

    #[test]
    fn weighted_aggregation_tracks_local_set_sizes() {
        let dataset = toy_dataset(4, 12, 3, 5);
        let mut cfg = small_config(4);
        cfg.features = FeatureFlags {
            augmentation: false,
            item_cl: false,
            user_cl: false,
        };
        let inputs = ExperimentInputs {
            dataset,
            similarity: None,
        };
        let uniform = run_experiment(&cfg, &inputs, &mut NoopObserver).unwrap();

        cfg.train.weighted_aggregation = true;
        let weighted = run_experiment(&cfg, &inputs, &mut NoopObserver).unwrap();

        // Equal per-user set sizes make the weighting a no-op.
        assert_eq!(
            uniform.model.public.item_emb,
            weighted.model.public.item_emb
        );
    }
}
