//! Seeded synthetic benchmark with controllable per-modality signal.
//!
//! Users and items get standard-Gaussian latent vectors. Each modality's
//! features are `signal · latent + N(0, 1)` noise, so a modality with zero
//! signal carries no information about interactions. Each user interacts
//! with their top-scoring items by latent dot product.

use std::collections::HashSet;

use rand_distr::{Distribution, StandardNormal};

use super::features::ModalityFeatureTable;
use super::interactions::InteractionSet;
use crate::numerics::dot;
use crate::{rng, Error, Exec, Result};

pub const IMAGE: &str = "image";
pub const TEXT: &str = "text";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub text_signal: f64,
    pub image_signal: f64,
    pub interactions_per_user: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 200,
            n_items: 500,
            dim: 32,
            text_signal: 1.0,
            image_signal: 0.0,
            interactions_per_user: 10,
            seed: 0,
        }
    }
}

pub fn user_id(u: usize) -> String {
    format!("u{u:05}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

/// Latent factors behind a synthetic dataset, kept for tests and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLatents {
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(InteractionSet, ModalityFeatureTable)> {
    generate_synthetic_with_latents(spec).map(|(i, f, _)| (i, f))
}

pub fn generate_synthetic_with_latents(
    spec: &SyntheticSpec,
) -> Result<(InteractionSet, ModalityFeatureTable, SyntheticLatents)> {
    if spec.dim < 1 {
        return Err(Error::Parameter("synthetic dim must be at least 1".into()));
    }
    if spec.n_users < 1 || spec.n_items < 1 {
        return Err(Error::Parameter(format!(
            "synthetic data needs at least one user and one item (got {} users, {} items)",
            spec.n_users, spec.n_items
        )));
    }
    if !(spec.text_signal >= 0.0 && spec.image_signal >= 0.0)
        || !spec.text_signal.is_finite()
        || !spec.image_signal.is_finite()
    {
        return Err(Error::Parameter(
            "signal weights must be finite and non-negative".into(),
        ));
    }
    if spec.interactions_per_user > spec.n_items {
        return Err(Error::Parameter(format!(
            "{} interactions per user exceeds {} items",
            spec.interactions_per_user, spec.n_items
        )));
    }

    let mut rng = rng::stream(spec.seed, "synthetic");
    let mut gaussian_rows = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    };
    let users = gaussian_rows(spec.n_users);
    let items = gaussian_rows(spec.n_items);
    let text_noise = gaussian_rows(spec.n_items);
    let image_noise = gaussian_rows(spec.n_items);

    let mut table = ModalityFeatureTable::new();
    for (name, signal, noise) in [
        (IMAGE, spec.image_signal, &image_noise),
        (TEXT, spec.text_signal, &text_noise),
    ] {
        for (i, (latent, eps)) in items.iter().zip(noise).enumerate() {
            let v = latent.iter().zip(eps).map(|(l, e)| signal * l + e).collect();
            table.insert(name, &item_id(i), v)?;
        }
    }

    let k = spec.interactions_per_user;
    let tops = Exec::default().map(&users, |u| {
        let scores: Vec<f64> = items.iter().map(|it| dot(u, it).expect("equal dims")).collect();
        crate::numerics::top_k_indices(&scores, k)
            .into_iter()
            .collect::<Vec<_>>()
    });

    let mut set = InteractionSet::new();
    for u in 0..spec.n_users {
        set.intern_user(&user_id(u));
    }
    for i in 0..spec.n_items {
        set.intern_item(&item_id(i));
    }
    let mut seen = HashSet::new();
    for (u, top) in tops.iter().enumerate() {
        for &i in top {
            set.insert(&user_id(u), &item_id(i), &mut seen);
        }
    }
    Ok((set, table, SyntheticLatents { users, items }))
}
