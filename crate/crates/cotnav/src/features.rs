//! Semantic labels and their fixed feature embeddings.
//!
//! Patch features are a seeded random projection of the one-hot semantic
//! label, so categories are separable without any vision model and the
//! label is exactly recoverable from a clean feature vector.

use std::sync::OnceLock;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Feature dimension of patch points and memory tokens.
pub const FEATURE_DIM: usize = 32;

/// Seed of the fixed label-embedding dictionary. A constant of the artifact:
/// every component derives the same dictionary from it.
pub const FEATURE_SEED: u64 = 0xC07_3D17;

pub const CATEGORIES: [&str; 44] = [
    "chair", "table", "lamp", "sofa", "bed", "desk", "shelf", "cabinet", "sink", "toilet",
    "shower", "towel", "mirror", "plant", "vase", "television", "refrigerator", "oven",
    "microwave", "bookshelf", "rug", "pillow", "curtain", "painting", "clock", "printer",
    "monitor", "keyboard", "laptop", "telephone", "fireplace", "wardrobe", "bench", "stool",
    "dresser", "nightstand", "bathtub", "counter", "cup", "bottle", "basket", "fan", "heater",
    "radiator",
];

pub const ZONE_NAMES: [&str; 8] =
    ["bedroom", "kitchen", "office", "bathroom", "lounge", "hallway", "studio", "pantry"];

pub const ADJECTIVES: [&str; 10] =
    ["red", "blue", "green", "white", "black", "wooden", "metal", "small", "large", "round"];

/// Semantic label of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemLabel {
    Free,
    Wall,
    Category(usize),
}

impl SemLabel {
    pub fn index(&self) -> usize {
        match self {
            SemLabel::Free => 0,
            SemLabel::Wall => 1,
            SemLabel::Category(i) => 2 + i,
        }
    }

    pub fn from_index(i: usize) -> SemLabel {
        match i {
            0 => SemLabel::Free,
            1 => SemLabel::Wall,
            n => SemLabel::Category(n - 2),
        }
    }

    pub fn category_index(category: &str) -> SemLabel {
        match CATEGORIES.iter().position(|c| *c == category) {
            Some(i) => SemLabel::Category(i),
            // categories outside the built-in list hash onto it deterministically
            None => {
                let mut h = 0usize;
                for b in category.bytes() {
                    h = h.wrapping_mul(31).wrapping_add(b as usize);
                }
                SemLabel::Category(h % CATEGORIES.len())
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            SemLabel::Free => "free".into(),
            SemLabel::Wall => "wall".into(),
            SemLabel::Category(i) => CATEGORIES[*i % CATEGORIES.len()].into(),
        }
    }
}

pub const LABEL_COUNT: usize = 2 + CATEGORIES.len();

/// Fixed dictionary mapping labels to feature vectors.
pub struct EmbeddingDict {
    rows: Vec<Vec<f64>>,
}

impl EmbeddingDict {
    fn build() -> EmbeddingDict {
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let scale = 1.0 / (FEATURE_DIM as f64).sqrt();
        let rows = (0..LABEL_COUNT)
            .map(|_| (0..FEATURE_DIM).map(|_| gaussian(&mut rng) * scale).collect())
            .collect();
        EmbeddingDict { rows }
    }

    pub fn embed(&self, label: SemLabel) -> Vec<f64> {
        self.rows[label.index()].clone()
    }

    pub fn row(&self, label: SemLabel) -> &[f64] {
        &self.rows[label.index()]
    }

    /// Exact inverse for clean features, nearest row otherwise.
    pub fn nearest_label(&self, feature: &[f64]) -> SemLabel {
        let mut best = (f64::INFINITY, 0usize);
        for (i, row) in self.rows.iter().enumerate() {
            let d: f64 = row.iter().zip(feature).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        SemLabel::from_index(best.1)
    }
}

static DICT: OnceLock<EmbeddingDict> = OnceLock::new();

pub fn embedding_dict() -> &'static EmbeddingDict {
    DICT.get_or_init(EmbeddingDict::build)
}

/// Standard normal draw via Box-Muller.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_recoverable() {
        let dict = embedding_dict();
        for i in 0..LABEL_COUNT {
            let label = SemLabel::from_index(i);
            assert_eq!(dict.nearest_label(&dict.embed(label)), label);
        }
    }

    #[test]
    fn dictionary_is_fixed() {
        let a = EmbeddingDict::build();
        let b = EmbeddingDict::build();
        assert_eq!(a.rows, b.rows);
    }
}
