//! Seeded synthetic bundles for pipeline validation.
//!
//! Values within a document are pairwise distinct, so any sibling swap or
//! garble is guaranteed to grade as a mismatch.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    DatasetBundle, DocumentRecord, FieldKind, FieldSpec, ImageRef, NumericProfile,
};

/// A bundle of `n_docs` documents, each labeled with every field in
/// `field_ids` and distinct numeric values.
pub fn numeric_bundle(name: &str, n_docs: usize, field_ids: &[&str], seed: u64) -> DatasetBundle {
    let fields: Vec<FieldSpec> = field_ids
        .iter()
        .map(|id| FieldSpec::new(*id, display_of(id), FieldKind::Numeric))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let documents = (0..n_docs)
        .map(|i| document(&format!("doc{i:05}"), field_ids, &mut rng))
        .collect();
    DatasetBundle {
        name: name.to_string(),
        numeric_profile: NumericProfile::GroupingDot,
        fields,
        documents,
    }
}

/// A bundle whose documents are spread over labeled-field counts 2..=6,
/// `docs_per_bucket` documents per count, drawing the first `k` fields of a
/// six-field pool.
pub fn bucketed_bundle(name: &str, docs_per_bucket: usize, seed: u64) -> DatasetBundle {
    const POOL: [&str; 6] = ["subtotal", "tax", "service", "total", "cash", "change"];
    let fields: Vec<FieldSpec> = POOL
        .iter()
        .map(|id| FieldSpec::new(*id, display_of(id), FieldKind::Numeric))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut documents = Vec::new();
    for k in 2..=6usize {
        for i in 0..docs_per_bucket {
            documents.push(document(&format!("doc_k{k}_{i:05}"), &POOL[..k], &mut rng));
        }
    }
    DatasetBundle {
        name: name.to_string(),
        numeric_profile: NumericProfile::GroupingDot,
        fields,
        documents,
    }
}

fn document(id: &str, field_ids: &[&str], rng: &mut ChaCha8Rng) -> DocumentRecord {
    let mut taken: Vec<u64> = Vec::new();
    let truth: BTreeMap<String, String> = field_ids
        .iter()
        .map(|fid| {
            let value = loop {
                let candidate = rng.gen_range(100u64..1_000_000);
                if !taken.contains(&candidate) {
                    taken.push(candidate);
                    break candidate;
                }
            };
            ((*fid).to_string(), value.to_string())
        })
        .collect();
    DocumentRecord {
        id: id.to_string(),
        image: ImageRef::Inline {
            mime: "image/png".to_string(),
            data: Vec::new(),
        },
        truth,
    }
}

fn display_of(id: &str) -> String {
    let mut chars = id.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}
