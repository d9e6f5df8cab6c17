//! Seeded synthetic Polyvore-style catalogs for tests, demos and oracle
//! experiments.
//!
//! Each outfit gets two theme tokens that appear in the title of every one of
//! its items, and its items take distinct categories. Under a token-overlap
//! embedder an outfit's own items are therefore the closest ones to the rest
//! of the outfit, which makes FITB answerable by nearest-centroid search.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Item, Outfit, Split, SplitAssignment, SplitMode};

pub const CATEGORIES: [(&str, &str); 7] = [
    ("tops", "blouse"),
    ("bottoms", "jeans"),
    ("shoes", "sneakers"),
    ("bags", "tote"),
    ("accessories", "scarf"),
    ("outerwear", "jacket"),
    ("jewellery", "necklace"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_outfits: usize,
    pub min_items: usize,
    pub max_items: usize,
    /// Chance that an item slot reuses an existing item of the same category
    /// instead of minting a new one (creates cross-outfit sharing).
    pub reuse_probability: f64,
    /// Train/valid/test fractions used for the initial split assignment.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_outfits: 100,
            min_items: 3,
            max_items: 5,
            reuse_probability: 0.0,
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

fn theme_tokens(outfit: usize) -> (String, String) {
    (format!("theme{outfit}a"), format!("theme{outfit}b"))
}

pub fn generate_catalog(spec: &SyntheticSpec) -> Catalog {
    assert!(spec.min_items >= 2 && spec.min_items <= spec.max_items);
    assert!(spec.max_items <= CATEGORIES.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items: BTreeMap<String, Item> = BTreeMap::new();
    let mut by_category: Vec<Vec<String>> = vec![Vec::new(); CATEGORIES.len()];
    let mut outfits = Vec::with_capacity(spec.n_outfits);
    let mut splits = SplitAssignment {
        mode: if spec.reuse_probability > 0.0 {
            SplitMode::Joint
        } else {
            SplitMode::Disjoint
        },
        ..Default::default()
    };

    for o in 0..spec.n_outfits {
        let n_items = rng.gen_range(spec.min_items..=spec.max_items);
        let cats = rand::seq::index::sample(&mut rng, CATEGORIES.len(), n_items).into_vec();
        let (ta, tb) = theme_tokens(o);
        let mut ids = Vec::with_capacity(n_items);
        for (slot, &c) in cats.iter().enumerate() {
            let pool = &by_category[c];
            let reuse = !pool.is_empty() && rng.gen_bool(spec.reuse_probability.clamp(0.0, 1.0));
            let id = if reuse {
                pool[rng.gen_range(0..pool.len())].clone()
            } else {
                let (category, noun) = CATEGORIES[c];
                let id = format!("i{o:06}{slot}");
                items.insert(
                    id.clone(),
                    Item {
                        item_id: id.clone(),
                        title: format!("{ta} {tb} {noun}"),
                        description: String::new(),
                        semantic_category: category.to_string(),
                        fine_category_id: Some(c.to_string()),
                        image_ref: None,
                    },
                );
                by_category[c].push(id.clone());
                id
            };
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        if ids.len() < 2 {
            continue;
        }
        let outfit_id = format!("o{o:06}");
        let u: f64 = rng.gen();
        let split = if u < spec.ratios[0] {
            Split::Train
        } else if u < spec.ratios[0] + spec.ratios[1] {
            Split::Valid
        } else {
            Split::Test
        };
        match split {
            Split::Train => splits.train.insert(outfit_id.clone()),
            Split::Valid => splits.valid.insert(outfit_id.clone()),
            Split::Test => splits.test.insert(outfit_id.clone()),
        };
        outfits.push(Outfit {
            outfit_id,
            item_ids: ids,
            source_split: Some(split),
        });
    }
    Catalog {
        items,
        outfits,
        splits,
        official_fitb: BTreeMap::new(),
    }
}

/// Catalog whose outfits all sit in `split`.
pub fn single_split_catalog(spec: &SyntheticSpec, split: Split) -> Catalog {
    let mut catalog = generate_catalog(spec);
    let ids: std::collections::BTreeSet<String> =
        catalog.outfits.iter().map(|o| o.outfit_id.clone()).collect();
    let mut splits = SplitAssignment {
        mode: catalog.splits.mode,
        ..Default::default()
    };
    match split {
        Split::Train => splits.train = ids,
        Split::Valid => splits.valid = ids,
        Split::Test => splits.test = ids,
    }
    for o in &mut catalog.outfits {
        o.source_split = Some(split);
    }
    catalog.splits = splits;
    catalog
}
