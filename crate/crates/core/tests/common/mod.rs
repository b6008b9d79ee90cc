#![allow(dead_code)]

use std::path::PathBuf;

use ecsp_core::model::{AnnotationRecord, EmotionClass, JointEmbedding, LanguageTag, Split};
use rand::Rng;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn record(id: &str, lang: &str, label: Option<EmotionClass>, split: Split) -> AnnotationRecord {
    AnnotationRecord {
        id: id.to_string(),
        art_style: "Baroque".to_string(),
        language: LanguageTag::new(lang).unwrap(),
        utterance: format!("utterance for {id}"),
        gold_emotion: label,
        image_ref: format!("img/{id}.jpg"),
        split,
    }
}

/// Gaussian-ish components (sum of uniforms), never the zero vector.
pub fn random_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0f32..1.0)).sum::<f32>())
            .collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

pub fn random_embedding<R: Rng>(rng: &mut R, id: &str, d_v: usize, d_t: usize) -> JointEmbedding {
    JointEmbedding::new(id, random_vec(rng, d_v), random_vec(rng, d_t)).unwrap()
}

pub fn random_class<R: Rng>(rng: &mut R) -> EmotionClass {
    EmotionClass::from_index(rng.random_range(0..9)).unwrap()
}

pub const LANGS: [&str; 3] = ["english", "arabic", "chinese"];

/// Train pool spread over three languages.
pub fn random_pool<R: Rng>(
    rng: &mut R,
    n: usize,
    d_v: usize,
    d_t: usize,
) -> Vec<(AnnotationRecord, JointEmbedding)> {
    (0..n)
        .map(|i| {
            let id = format!("p{i:05}");
            let lang = LANGS[rng.random_range(0..LANGS.len())];
            let label = random_class(rng);
            (
                record(&id, lang, Some(label), Split::Train),
                random_embedding(rng, &id, d_v, d_t),
            )
        })
        .collect()
}

/// Direct cosine of two f32 slices, accumulated in f64.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let na: f64 = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Exhaustive scan: every same-language pool member except `exclude`,
/// sorted by descending similarity, then ascending id.
pub fn brute_force(
    pool: &[(AnnotationRecord, JointEmbedding)],
    query: &JointEmbedding,
    lang: &str,
    exclude: Option<&str>,
    k: usize,
) -> Vec<(String, f64, EmotionClass)> {
    let mut all: Vec<(String, f64, EmotionClass)> = pool
        .iter()
        .filter(|(r, _)| r.language.as_str() == lang && Some(r.id.as_str()) != exclude)
        .map(|(r, e)| (r.id.clone(), cosine(query.joint(), e.joint()), r.gold_emotion.unwrap()))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}
