//! Synthetic scene-graph data: scenes, a symbolic oracle, question
//! templates, dataset generation, and the JSONL format.
//!
//! Scenes live on a 4×4 grid. Object features are built from frozen
//! per-word embeddings: v_j = normalize(E[name] + E[color] + E[size] +
//! E[material] + P·pos) + noise, where P is a fixed random projection of
//! the position encoding (x, y, -x, -y) / 3. The same embedding table
//! supplies the text-argument vectors stored with each example.

mod generate;
mod io;
mod oracle;
mod scene;
mod templates;

pub use generate::{generate, Dataset, GenConfig, GenError, SceneExample};
pub use io::{export, load, DataIoError};
pub use oracle::{oracle_execute, OracleReject, OracleRun, SymValue};
pub use scene::{SceneGraph, SceneObject, GRID};
pub use templates::{templates, Template};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::modules::AnswerSlots;
use crate::tensor::{Matrix, Vector};

pub const NAMES: [&str; 10] = [
    "cat", "dog", "horse", "car", "tree", "chair", "ball", "bird", "fish", "lamp",
];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const MATERIALS: [&str; 4] = ["wood", "metal", "plastic", "glass"];
pub const POSITIONS: [&str; 4] = ["left", "right", "top", "bottom"];
pub const RELATIONS: [&str; 4] = ["left of", "right of", "above", "below"];
pub const COMPARISONS: [&str; 2] = ["larger", "smaller"];
pub const CATEGORIES: [&str; 3] = ["color", "size", "material"];

/// The fixed answer vocabulary: names, attribute values, position words,
/// relation phrases, then yes and no. The order is part of the dataset
/// format.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl AnswerVocab {
    pub fn standard() -> Self {
        let mut words: Vec<String> = Vec::new();
        for group in [
            &NAMES[..],
            &COLORS[..],
            &SIZES[..],
            &MATERIALS[..],
            &POSITIONS[..],
            &RELATIONS[..],
        ] {
            words.extend(group.iter().map(|w| w.to_string()));
        }
        words.push("yes".into());
        words.push("no".into());
        Self::from_words(words).expect("the standard vocabulary is well formed")
    }

    /// Builds a vocabulary from an explicit word order (as read from a
    /// dataset header). Words must be distinct and include yes and no.
    pub fn from_words(words: Vec<String>) -> Result<Self, String> {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(format!("duplicate answer word `{w}`"));
            }
        }
        for required in ["yes", "no"] {
            if !index.contains_key(required) {
                return Err(format!("answer vocabulary lacks `{required}`"));
            }
        }
        Ok(Self { words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn yes(&self) -> usize {
        self.index["yes"]
    }

    pub fn no(&self) -> usize {
        self.index["no"]
    }

    pub fn slots(&self) -> AnswerSlots {
        AnswerSlots {
            len: self.words.len(),
            yes: self.yes(),
            no: self.no(),
        }
    }
}

/// Frozen word embeddings plus the positional projection.
#[derive(Debug, Clone)]
pub struct FeatureSpace {
    d: usize,
    embeddings: BTreeMap<String, Vector>,
    pos_proj: Matrix,
}

/// Standard normal sample via the Box-Muller transform.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl FeatureSpace {
    /// Samples every word embedding and the positional projection from a
    /// seeded stream. Axes are drawn without replacement: four of them
    /// carry the position encoding (mixed by a random 4x4 block) and each
    /// remaining axis is the unit vector of one word, so an object column
    /// reads as a sparse bag of its attribute words plus a position
    /// block. Words beyond the axis budget fall back to dense Gaussian
    /// unit vectors. The group order below puts the feature-composing
    /// words first.
    pub fn new(d: usize, seed: u64) -> Self {
        assert!(d > 0, "embedding dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut axes: Vec<usize> = (0..d).collect();
        for i in (1..axes.len()).rev() {
            axes.swap(i, rng.gen_range(0..=i));
        }
        let mut proj = vec![0.0; d * 4];
        if d >= 8 {
            for _ in 0..4 {
                let axis = axes.pop().expect("d >= 8 leaves axes for position");
                for c in 0..4 {
                    proj[axis * 4 + c] = normal(&mut rng);
                }
            }
        } else {
            for value in proj.iter_mut() {
                *value = normal(&mut rng) * scale;
            }
        }
        let pos_proj = Matrix::new(d, 4, proj).expect("normal samples are finite");
        let mut axes = axes.into_iter();
        let mut embeddings = BTreeMap::new();
        for group in [
            &NAMES[..],
            &COLORS[..],
            &SIZES[..],
            &MATERIALS[..],
            &POSITIONS[..],
            &RELATIONS[..],
            &COMPARISONS[..],
            &CATEGORIES[..],
        ] {
            for word in group {
                let v = match axes.next() {
                    Some(axis) => {
                        let mut v = vec![0.0; d];
                        v[axis] = 1.0;
                        v
                    }
                    None => loop {
                        let mut v: Vec<f64> =
                            (0..d).map(|_| normal(&mut rng) * scale).collect();
                        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                        if norm > 1e-6 {
                            for a in &mut v {
                                *a /= norm;
                            }
                            break v;
                        }
                    },
                };
                embeddings.insert(
                    word.to_string(),
                    Vector::new(v).expect("normal samples are finite"),
                );
            }
        }
        Self {
            d,
            embeddings,
            pos_proj,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn embedding(&self, word: &str) -> Option<&Vector> {
        self.embeddings.get(word)
    }

    /// One object's feature column, before noise.
    fn object_feature(&self, obj: &SceneObject) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        for word in [&obj.name, &obj.color, &obj.size, &obj.material] {
            let e = &self.embeddings[word.as_str()];
            for (acc, x) in v.iter_mut().zip(e.as_slice()) {
                *acc += x;
            }
        }
        let x = obj.x as f64;
        let y = obj.y as f64;
        let top = (GRID - 1) as f64;
        let pos = [x / top, y / top, -x / top, -y / top];
        let projected = self
            .pos_proj
            .matvec(&pos)
            .expect("projection matches encoding length");
        for (acc, p) in v.iter_mut().zip(&projected) {
            *acc += p;
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in &mut v {
            *a /= norm;
        }
        v
    }

    /// d×k feature matrix for a scene, with N(0, noise²) added per entry.
    pub fn scene_features(
        &self,
        scene: &SceneGraph,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Matrix {
        let k = scene.len();
        let mut data = vec![0.0; self.d * k];
        for (j, obj) in scene.objects().iter().enumerate() {
            let col = self.object_feature(obj);
            for (r, value) in col.into_iter().enumerate() {
                data[r * k + j] = value + noise * normal(rng);
            }
        }
        Matrix::new(self.d, k, data).expect("features are finite")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocabulary_has_the_documented_shape() {
        let vocab = AnswerVocab::standard();
        assert_eq!(vocab.len(), 32);
        assert_eq!(vocab.word(0), Some("cat"));
        assert_eq!(vocab.word(vocab.yes()), Some("yes"));
        assert_eq!(vocab.word(vocab.no()), Some("no"));
        assert_eq!(vocab.yes(), 30);
        assert_eq!(vocab.no(), 31);
        assert_eq!(vocab.index_of("left of"), Some(26));
        assert_eq!(vocab.index_of("unicorn"), None);
        let slots = vocab.slots();
        assert_eq!(slots.len, 32);
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_missing_logic_words() {
        assert!(AnswerVocab::from_words(vec!["yes".into(), "yes".into(), "no".into()]).is_err());
        assert!(AnswerVocab::from_words(vec!["cat".into(), "yes".into()]).is_err());
    }

    #[test]
    fn feature_space_is_deterministic_and_words_are_distinct() {
        let a = FeatureSpace::new(16, 9);
        let b = FeatureSpace::new(16, 9);
        let words: Vec<&String> = a.embeddings.keys().collect();
        for w in &words {
            assert_eq!(
                a.embedding(w).unwrap().as_slice(),
                b.embedding(w).unwrap().as_slice()
            );
        }
        for (i, w1) in words.iter().enumerate() {
            for w2 in &words[i + 1..] {
                assert_ne!(
                    a.embedding(w1).unwrap().as_slice(),
                    b.embedding(w2).unwrap().as_slice(),
                    "{w1} and {w2} must have distinct embeddings"
                );
            }
        }
    }

    #[test]
    fn object_features_are_unit_norm_before_noise() {
        let fs = FeatureSpace::new(24, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = SceneGraph::sample(&mut rng, 8);
        let clean = fs.scene_features(&scene, 0.0, &mut rng);
        for j in 0..scene.len() {
            let col = clean.col(j).unwrap();
            let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "column {j} has norm {norm}");
        }
        let noisy = fs.scene_features(&scene, 0.05, &mut rng);
        assert_ne!(noisy.as_slice(), clean.as_slice());
    }
}
