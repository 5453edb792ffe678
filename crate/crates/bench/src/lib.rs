//! Shared fixtures for the criterion benches: random assignment instances and
//! a trained-shape model over a synthetic catalog.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dirrec_core::allocation::{random_allocation, Allocation, AttributeSpace, ExplicitAxisKind};
use dirrec_core::catalog::Catalog;
use dirrec_core::embedding::{CategoryMode, ScoreNormalization};
use dirrec_core::lstm::CellKind;
use dirrec_core::models::{Model, ModelKind};
use dirrec_core::synthetic::{make_synthetic_catalog, SyntheticSpec};

/// Dense weight matrix with entries in [-4, 4), the shape the R-step hands to
/// the solver for one explicit group.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-4.0..4.0)).collect())
        .collect()
}

pub struct Fixture {
    pub catalog: Catalog,
    pub space: AttributeSpace,
    pub alloc: Allocation,
    pub model: Model,
}

/// A mid-sized factored model: 300 users over 200 items in 10 categories,
/// with vectors of the given width.
pub fn fixture(kind: ModelKind, dim: usize) -> Fixture {
    let spec = SyntheticSpec {
        num_users: 300,
        group_sizes: vec![20; 10],
        interactions_per_user: 12,
        beta: 2.0,
        seed: 17,
        ..SyntheticSpec::default()
    };
    let syn = make_synthetic_catalog(&spec).expect("synthetic catalog");
    let space = AttributeSpace::build(&syn.catalog, &[ExplicitAxisKind::Category], 1, 1.0)
        .expect("attribute space");
    let alloc = random_allocation(&syn.catalog, &space, 23).expect("allocation");
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let model = Model::init(
        kind,
        &syn.catalog,
        &space,
        dim,
        CategoryMode::Hierarchical,
        ScoreNormalization::Softmax,
        CellKind::Lstm,
        &mut rng,
    );
    Fixture {
        catalog: syn.catalog,
        space,
        alloc,
        model,
    }
}
