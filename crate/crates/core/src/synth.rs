//! Synthetic corpora with planted goal/image structure.
//!
//! Each cluster is a latent point `z`. Clusters are organized into groups
//! (which become the article categories): `z = group_center + spread·ε`.
//! Fixed random projections map `z` to a text center and an image center,
//! both scaled to unit norm. Every text of the cluster's article (goal, method
//! title, step texts) is the text center plus noise; every step image is the
//! image center plus noise. Noise vectors have expected norm `noise_scale`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{text_key, Article, Corpus, Method, PromptLevel, Step};
use crate::embed_store::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub clusters: usize,
    pub dim_image: usize,
    pub dim_text: usize,
    pub noise_scale: f64,
    pub seed: u64,
    pub steps_per_article: usize,
    /// Number of category groups; clusters are assigned round-robin.
    pub groups: usize,
    /// Latent distance of a cluster from its group center (group centers are
    /// standard normal).
    pub group_spread: f64,
    pub latent_dim: usize,
    /// Seed for the noise draws. Defaults to `seed`; changing it regenerates
    /// the same cluster centers with fresh noise.
    pub noise_seed: Option<u64>,
    /// Prepended to every generated id.
    pub id_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            clusters: 20,
            dim_image: 32,
            dim_text: 32,
            noise_scale: 0.1,
            seed: 1,
            steps_per_article: 5,
            groups: 4,
            group_spread: 1.0,
            latent_dim: 8,
            noise_seed: None,
            id_prefix: String::new(),
        }
    }
}

pub struct SynthData {
    pub corpus: Corpus,
    pub images: EmbeddingMatrix,
    pub texts: EmbeddingMatrix,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn project_unit(z: &[f64], proj: &[f64], out_dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; out_dim];
    for (i, zi) in z.iter().enumerate() {
        for (vj, pij) in v.iter_mut().zip(&proj[i * out_dim..(i + 1) * out_dim]) {
            *vj += zi * pij;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter().map(|x| x / n).collect()
}

fn noisy(center: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if scale == 0.0 {
        return center.iter().map(|&c| c as f32).collect();
    }
    let s = scale / (center.len() as f64).sqrt();
    center
        .iter()
        .map(|&c| (c + s * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    if spec.clusters < 2 {
        return Err(Error::InvalidArgument("clusters must be >= 2".into()));
    }
    if !(spec.noise_scale >= 0.0) || !(spec.group_spread >= 0.0) {
        return Err(Error::InvalidArgument("noise_scale and group_spread must be >= 0".into()));
    }
    if spec.dim_image == 0 || spec.dim_text == 0 || spec.latent_dim == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    if spec.steps_per_article == 0 {
        return Err(Error::InvalidArgument("steps_per_article must be >= 1".into()));
    }
    let groups = spec.groups.clamp(1, spec.clusters);

    let mut rng = seed::rng_for(spec.seed, "synth/centers");
    let proj_text = gaussian(&mut rng, spec.latent_dim * spec.dim_text);
    let proj_image = gaussian(&mut rng, spec.latent_dim * spec.dim_image);
    let group_centers: Vec<Vec<f64>> = (0..groups).map(|_| gaussian(&mut rng, spec.latent_dim)).collect();

    let mut noise_rng = seed::rng_for(spec.noise_seed.unwrap_or(spec.seed), "synth/noise");
    let p = &spec.id_prefix;
    let mut articles = Vec::with_capacity(spec.clusters);
    let mut image_rows = Vec::new();
    let mut text_rows = Vec::new();

    for c in 0..spec.clusters {
        let g = c % groups;
        let z: Vec<f64> = group_centers[g]
            .iter()
            .zip(gaussian(&mut rng, spec.latent_dim))
            .map(|(gc, e)| gc + spec.group_spread * e)
            .collect();
        let text_center = project_unit(&z, &proj_text, spec.dim_text);
        let image_center = project_unit(&z, &proj_image, spec.dim_image);

        let article_id = format!("{p}a{c:05}");
        let method_id = format!("{article_id}-m0");
        let steps: Vec<Step> = (0..spec.steps_per_article)
            .map(|s| Step {
                step_id: format!("{method_id}-s{s}"),
                text: format!("step {s} of synthetic goal {c}"),
                image_id: format!("{p}img-{c:05}-{s}"),
            })
            .collect();

        text_rows.push((text_key(PromptLevel::Goal, &article_id), noisy(&text_center, spec.noise_scale, &mut noise_rng)));
        text_rows.push((text_key(PromptLevel::Method, &method_id), noisy(&text_center, spec.noise_scale, &mut noise_rng)));
        for step in &steps {
            text_rows.push((text_key(PromptLevel::Step, &step.step_id), noisy(&text_center, spec.noise_scale, &mut noise_rng)));
            image_rows.push((step.image_id.clone(), noisy(&image_center, spec.noise_scale, &mut noise_rng)));
        }

        articles.push(Article {
            article_id,
            goal_title: format!("synthetic goal {c}"),
            category: format!("group-{g}"),
            methods: vec![Method {
                method_id,
                title: format!("method 0 of synthetic goal {c}"),
                steps,
            }],
        });
    }

    Ok(SynthData {
        corpus: Corpus::from_articles(articles)?,
        images: EmbeddingMatrix::from_rows(spec.dim_image, image_rows)?,
        texts: EmbeddingMatrix::from_rows(spec.dim_text, text_rows)?,
    })
}
