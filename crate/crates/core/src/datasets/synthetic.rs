//! Seeded synthetic interaction logs with known structure.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::table::{IdMap, InteractionTable};
use crate::seed::rng_for;

/// Users and items split into `clusters` groups (`id % clusters`); each of a
/// user's interactions comes from the user's own cluster with probability
/// `in_cluster`, otherwise from the whole catalogue.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedClusters {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub min_per_user: usize,
    pub max_per_user: usize,
    pub in_cluster: f64,
    pub seed: u64,
}

impl PlantedClusters {
    /// 200 users, 100 items, four clusters.
    pub fn small(seed: u64) -> Self {
        PlantedClusters {
            users: 200,
            items: 100,
            clusters: 4,
            min_per_user: 12,
            max_per_user: 20,
            in_cluster: 0.85,
            seed,
        }
    }

    pub fn generate(&self) -> InteractionTable {
        let mut rng = rng_for(self.seed, "planted", 0);
        let by_cluster: Vec<Vec<usize>> = (0..self.clusters)
            .map(|c| (0..self.items).filter(|i| i % self.clusters == c).collect())
            .collect();
        let lists = (0..self.users)
            .map(|u| {
                let own = &by_cluster[u % self.clusters];
                let want = rng
                    .gen_range(self.min_per_user..=self.max_per_user)
                    .min(self.items);
                let mut chosen = Vec::with_capacity(want);
                while chosen.len() < want {
                    let i = if rng.gen_bool(self.in_cluster) {
                        *own.choose(&mut rng).expect("non-empty cluster")
                    } else {
                        rng.gen_range(0..self.items)
                    };
                    if !chosen.contains(&i) {
                        chosen.push(i);
                    }
                }
                chosen
            })
            .collect();
        table(self.users, self.items, lists)
    }
}

/// Latent-factor generator with popularity skew, shaped like a small
/// movie-rating log (users with long-tailed activity, Zipf-like item
/// popularity).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPreferences {
    pub users: usize,
    pub items: usize,
    pub factors: usize,
    pub min_per_user: usize,
    pub mean_extra_per_user: f64,
    pub max_per_user: usize,
    pub popularity_exponent: f64,
    pub sharpness: f64,
    pub seed: u64,
}

impl LatentPreferences {
    /// Roughly 943 users × 1682 items with ~100k interactions.
    pub fn movielens_100k_shape(seed: u64) -> Self {
        LatentPreferences {
            users: 943,
            items: 1682,
            factors: 8,
            min_per_user: 20,
            mean_extra_per_user: 86.0,
            max_per_user: 700,
            popularity_exponent: 0.9,
            sharpness: 3.0,
            seed,
        }
    }

    pub fn generate(&self) -> InteractionTable {
        let mut rng = rng_for(self.seed, "latent", 0);
        let gauss = |rng: &mut crate::seed::Rng| -> f64 { rng.sample(StandardNormal) };
        let scale = 1.0 / (self.factors as f64).sqrt();
        let user_f: Vec<Vec<f64>> = (0..self.users)
            .map(|_| (0..self.factors).map(|_| gauss(&mut rng) * scale).collect())
            .collect();
        let item_f: Vec<Vec<f64>> = (0..self.items)
            .map(|_| (0..self.factors).map(|_| gauss(&mut rng) * scale).collect())
            .collect();
        let mut ranks: Vec<usize> = (0..self.items).collect();
        ranks.shuffle(&mut rng);
        let log_pop: Vec<f64> = ranks
            .iter()
            .map(|&r| -self.popularity_exponent * ((r + 1) as f64).ln())
            .collect();

        let lists = (0..self.users)
            .map(|u| {
                // exponential extra activity gives a long tail
                let e: f64 = rng.gen_range(f64::EPSILON..1.0);
                let extra = (-e.ln() * self.mean_extra_per_user) as usize;
                let want = (self.min_per_user + extra).min(self.max_per_user).min(self.items);
                // weighted sampling without replacement (exponential keys)
                let mut keyed: Vec<(f64, usize)> = (0..self.items)
                    .map(|i| {
                        let affinity: f64 = user_f[u]
                            .iter()
                            .zip(&item_f[i])
                            .map(|(a, b)| a * b)
                            .sum();
                        let log_w = self.sharpness * affinity + log_pop[i];
                        let r: f64 = rng.gen_range(f64::EPSILON..1.0);
                        (r.ln() / log_w.exp(), i)
                    })
                    .collect();
                keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                keyed.into_iter().take(want).map(|(_, i)| i).collect()
            })
            .collect();
        table(self.users, self.items, lists)
    }
}

fn table(users: usize, items: usize, lists: Vec<Vec<usize>>) -> InteractionTable {
    let users = IdMap::from_raw((0..users).map(|u| format!("u{u}")).collect()).expect("unique");
    let items = IdMap::from_raw((0..items).map(|i| format!("i{i}")).collect()).expect("unique");
    InteractionTable::new(users, items, lists).expect("valid synthetic table")
}
