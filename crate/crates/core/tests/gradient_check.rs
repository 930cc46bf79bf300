//! Finite-difference oracle for every trainable parameter group on the
//! micro model. The oracle perturbs the flattened parameter vector along
//! random unit directions and compares central differences of the actual
//! mean loss against the analytic directional derivative.

mod common;

use common::{
    directional_check, micro_base, random_adapter_set, random_batch, random_head, OverlayParams,
    Scenario,
};
use lora_compose::compose::CompositionWeights;
use lora_compose::math::RngStream;
use lora_compose::model::TrainableMask;

const TOL: f64 = 1e-5;

fn adapter_scenario(mask: TrainableMask) -> Scenario {
    let base = micro_base(100);
    let mut rng = RngStream::from_seed(101);
    let head = random_head(&base.config, &mut rng);
    let (xs, labels) = random_batch(&base.config, 6, &mut rng);
    let set = random_adapter_set(&base, 2, 1.3, "up", &mut rng);
    Scenario {
        base,
        head,
        overlay: OverlayParams::Adapter(set),
        mask,
        xs,
        labels,
    }
}

fn learned_scenario(mask: TrainableMask) -> Scenario {
    let base = micro_base(102);
    let mut rng = RngStream::from_seed(103);
    let head = random_head(&base.config, &mut rng);
    let (xs, labels) = random_batch(&base.config, 6, &mut rng);
    let sets = vec![
        random_adapter_set(&base, 2, 1.0, "up-0", &mut rng),
        random_adapter_set(&base, 3, 0.7, "up-1", &mut rng),
    ];
    let mut weights = CompositionWeights::zeros(
        &base.sites(),
        sets.iter().map(|s| s.provenance.clone()).collect(),
    )
    .unwrap();
    let sites: Vec<_> = weights.sites().collect();
    for site in sites {
        for x in weights.logits_mut(site).unwrap() {
            *x = rng.normal(0.6);
        }
    }
    Scenario {
        base,
        head,
        overlay: OverlayParams::Learned { sets, weights },
        mask,
        xs,
        labels,
    }
}

#[test]
fn head_group_matches_finite_differences() {
    let worst = directional_check(&adapter_scenario(TrainableMask::HEAD_ONLY), 20, 1);
    assert!(worst <= TOL, "max rel err {worst}");
}

#[test]
fn base_group_matches_finite_differences() {
    let mask = TrainableMask {
        base: true,
        ..TrainableMask::NONE
    };
    let worst = directional_check(&adapter_scenario(mask), 20, 2);
    assert!(worst <= TOL, "max rel err {worst}");
}

#[test]
fn adapter_group_matches_finite_differences() {
    let mask = TrainableMask {
        adapters: true,
        ..TrainableMask::NONE
    };
    let worst = directional_check(&adapter_scenario(mask), 20, 3);
    assert!(worst <= TOL, "max rel err {worst}");
}

#[test]
fn composition_group_matches_finite_differences() {
    let mask = TrainableMask {
        composition_v: true,
        ..TrainableMask::NONE
    };
    let worst = directional_check(&learned_scenario(mask), 20, 4);
    assert!(worst <= TOL, "max rel err {worst}");
}

#[test]
fn all_groups_with_adapters_match_finite_differences() {
    let mask = TrainableMask {
        base: true,
        head: true,
        adapters: true,
        composition_v: false,
    };
    let worst = directional_check(&adapter_scenario(mask), 30, 5);
    assert!(worst <= TOL, "max rel err {worst}");
}

#[test]
fn all_groups_with_composition_match_finite_differences() {
    let mask = TrainableMask {
        base: true,
        head: true,
        adapters: false,
        composition_v: true,
    };
    let worst = directional_check(&learned_scenario(mask), 30, 6);
    assert!(worst <= TOL, "max rel err {worst}");
}
