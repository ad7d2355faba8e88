//! Fixtures shared by the benchmarks.

use mgrank_core::grpo::{sample_group, ScoreGrid, TabularPolicy};
use mgrank_core::simlab::{generate_corpus, SyntheticSpec};
use mgrank_core::{Dataset, ResponseGroup};

/// Synthetic corpus of `num_images` images in two domains.
pub fn corpus(num_images: usize) -> Dataset {
    generate_corpus(&SyntheticSpec {
        num_images,
        ..SyntheticSpec::default()
    })
    .expect("default spec is valid")
}

/// Jittered policy over every image of `dataset`.
pub fn policy(dataset: &Dataset) -> TabularPolicy {
    TabularPolicy::jittered(
        dataset.image_ids(),
        dataset.schema().num_dimensions(),
        ScoreGrid::default(),
        0.5,
        7,
    )
    .expect("positive std")
}

/// One sampled group of size `k` for each of the first `b` images.
pub fn groups(dataset: &Dataset, policy: &TabularPolicy, b: usize, k: usize) -> Vec<ResponseGroup> {
    dataset
        .records()
        .iter()
        .take(b)
        .enumerate()
        .map(|(i, r)| sample_group(policy, &r.image_id, k, i as u64).expect("image is in the policy"))
        .collect()
}
