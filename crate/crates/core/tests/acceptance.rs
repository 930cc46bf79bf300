//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured values (run with `--nocapture` to see them). Tolerances are
//! pinned in the constants below.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::{directional_check, micro_base, random_adapter_set, random_batch, random_head};
use lora_compose::analysis::{cka_map, linear_cka, weight_map};
use lora_compose::compose::{
    compose_model, grad_v, learned_delta, uniform_delta, ComposeMode, CompositionWeights,
};
use lora_compose::io::RunConfig;
use lora_compose::lora::{AdapterSet, LoraAdapter};
use lora_compose::math::{gaussian, Matrix, RngStream};
use lora_compose::model::{param_counts, predict, ModelConfig, Overlay, TrainableMask};
use lora_compose::pipeline::cmd_bench;
use lora_compose::tasks::{
    make_entangled_suite, make_label_shift_suite, make_task_shift_suite, sample_episode, KShot,
};
use lora_compose::train::{
    adapt, lookup, pretrain_base, run_grid, train_all_upstream, train_upstream, AdaptContext,
    GridInputs, Hyperparams,
};

const EXACT: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-5;
const CKA_ORTHO_TOL: f64 = 1e-10;
const GRAM_ORACLE_TOL: f64 = 1e-10;
const TREND_MARGIN: f64 = 0.005; // 0.5 accuracy points
const FULL_SHOT_MARGIN: f64 = 0.05; // 5 accuracy points
const SCALING_MARGIN: f64 = 0.01; // 1 accuracy point

fn pass(criterion: u32, name: &str, started: Instant, detail: &str) {
    println!(
        "[acceptance] criterion {criterion} ({name}): PASS in {:.1}s {detail}",
        started.elapsed().as_secs_f64()
    );
}

fn random_adapters(rng: &mut RngStream, n: usize, d: usize, c: usize, ranks: &[usize]) -> Vec<LoraAdapter> {
    (0..n)
        .map(|i| {
            let r = ranks[i % ranks.len()];
            LoraAdapter::new(gaussian(rng, d, r, 0.4), gaussian(rng, c, r, 0.4), 1.0).unwrap()
        })
        .collect()
}

#[test]
fn criterion_01_composition_identities() {
    let t = Instant::now();
    let mut rng = RngStream::from_seed(201);
    for trial in 0..20 {
        let ads = random_adapters(&mut rng, 3, 6, 5, &[2, 3]);
        let refs: Vec<&LoraAdapter> = ads.iter().collect();

        // uniform of one adapter is that adapter's scaled delta
        let single = uniform_delta(&refs[..1]).unwrap();
        assert!(single.max_abs_diff(&ads[0].scaled_delta()) <= EXACT);

        // zero logits reproduce uniform exactly
        let zero_v = vec![0.0; 3];
        let learned = learned_delta(&refs, &zero_v).unwrap();
        let uniform = uniform_delta(&refs).unwrap();
        assert_eq!(learned, uniform, "trial {trial}");

        // a saturated logit selects one adapter
        let saturated = learned_delta(&refs, &[-40.0, 40.0, -40.0]).unwrap();
        assert!(saturated.max_abs_diff(&ads[1].scaled_delta()) <= EXACT);
    }

    // the same identities through the composed model and the forward pass
    let base = micro_base(202);
    let mut rng = RngStream::from_seed(203);
    let head = random_head(&base.config, &mut rng);
    let (xs, _) = random_batch(&base.config, 4, &mut rng);
    let sets: Vec<AdapterSet> = (0..2)
        .map(|i| random_adapter_set(&base, 2, 1.0, &format!("up-{i}"), &mut rng))
        .collect();
    let uniform_model = compose_model(&base.sites(), &sets, ComposeMode::Uniform).unwrap();
    let weights = CompositionWeights::zeros(
        &base.sites(),
        sets.iter().map(|s| s.provenance.clone()).collect(),
    )
    .unwrap();
    let learned_model = compose_model(&base.sites(), &sets, ComposeMode::Learned(weights)).unwrap();
    let lu = predict(&base, &head, Overlay::Composed(&uniform_model), &xs).unwrap();
    let ll = predict(&base, &head, Overlay::Composed(&learned_model), &xs).unwrap();
    assert_eq!(lu, ll, "learned(v=0) forward must equal uniform forward");

    let single_model =
        compose_model(&base.sites(), &sets[..1], ComposeMode::Uniform).unwrap();
    let ls = predict(&base, &head, Overlay::Composed(&single_model), &xs).unwrap();
    let la = predict(&base, &head, Overlay::Adapter(&sets[0]), &xs).unwrap();
    for (a, b) in ls.iter().flatten().zip(la.iter().flatten()) {
        assert!((a - b).abs() <= EXACT);
    }
    pass(1, "composition identities", t, "");
}

#[test]
fn criterion_02_gradient_oracle() {
    let t = Instant::now();
    // >= 100 random directions across the four trainable groups
    let adapter_mask = |base, head, adapters| TrainableMask {
        base,
        head,
        adapters,
        composition_v: false,
    };
    let mut total_dirs = 0;
    let mut worst: f64 = 0.0;

    let base = micro_base(210);
    let mut rng = RngStream::from_seed(211);
    let head = random_head(&base.config, &mut rng);
    let (xs, labels) = random_batch(&base.config, 6, &mut rng);
    let set = random_adapter_set(&base, 2, 1.2, "up", &mut rng);
    for (i, mask) in [
        adapter_mask(true, false, false),
        adapter_mask(false, true, false),
        adapter_mask(false, false, true),
    ]
    .into_iter()
    .enumerate()
    {
        let scenario = common::Scenario {
            base: base.clone(),
            head: head.clone(),
            overlay: common::OverlayParams::Adapter(set.clone()),
            mask,
            xs: xs.clone(),
            labels: labels.clone(),
        };
        worst = worst.max(directional_check(&scenario, 30, 300 + i as u64));
        total_dirs += 30;
    }

    // composition logits group
    let sets = vec![
        random_adapter_set(&base, 2, 1.0, "up-0", &mut rng),
        random_adapter_set(&base, 3, 0.8, "up-1", &mut rng),
    ];
    let mut weights = CompositionWeights::zeros(
        &base.sites(),
        sets.iter().map(|s| s.provenance.clone()).collect(),
    )
    .unwrap();
    let sites: Vec<_> = weights.sites().collect();
    for site in sites {
        for x in weights.logits_mut(site).unwrap() {
            *x = rng.normal(0.5);
        }
    }
    let scenario = common::Scenario {
        base: base.clone(),
        head,
        overlay: common::OverlayParams::Learned { sets, weights },
        mask: TrainableMask {
            composition_v: true,
            ..TrainableMask::NONE
        },
        xs,
        labels,
    };
    worst = worst.max(directional_check(&scenario, 30, 310));
    total_dirs += 30;

    assert!(total_dirs >= 100);
    assert!(worst <= GRAD_TOL, "max relative error {worst}");
    pass(2, "gradient oracle", t, &format!("(max rel err {worst:.2e} over {total_dirs} directions)"));
}

#[test]
fn criterion_03_hull_and_zero_sum_fuzz() {
    let t = Instant::now();
    let mut rng = RngStream::from_seed(220);
    for trial in 0..1000 {
        let n = 2 + (trial % 4);
        let ads = random_adapters(&mut rng, n, 4, 4, &[1, 2, 3]);
        let refs: Vec<&LoraAdapter> = ads.iter().collect();
        let v: Vec<f64> = (0..n).map(|_| rng.normal(2.0)).collect();

        // entrywise convex-hull bound
        let composed = learned_delta(&refs, &v).unwrap();
        let deltas: Vec<Matrix> = ads.iter().map(|a| a.scaled_delta()).collect();
        for idx in 0..16 {
            let val = composed.data()[idx];
            let lo = deltas.iter().map(|m| m.data()[idx]).fold(f64::INFINITY, f64::min);
            let hi = deltas
                .iter()
                .map(|m| m.data()[idx])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                val >= lo - EXACT && val <= hi + EXACT,
                "trial {trial} entry {idx}: {val} outside [{lo}, {hi}]"
            );
        }

        // logit-gradient entries sum to zero
        let g = gaussian(&mut rng, 4, 4, 1.0);
        let dv = grad_v(&g, &refs, &v).unwrap();
        let sum: f64 = dv.iter().sum();
        assert!(sum.abs() <= EXACT, "trial {trial}: dv sums to {sum}");
    }
    pass(3, "convex hull and zero-sum invariants", t, "(1000 trials)");
}

#[test]
fn criterion_04_cka_suite() {
    let t = Instant::now();
    let mut rng = RngStream::from_seed(230);

    // self-similarity, symmetry, range on fuzzed inputs
    for _ in 0..100 {
        let x = gaussian(&mut rng, 20, 6, 1.0);
        let y = gaussian(&mut rng, 20, 9, 1.0);
        assert!((linear_cka(&x, &x, true).unwrap() - 1.0).abs() <= EXACT);
        let a = linear_cka(&x, &y, true).unwrap();
        let b = linear_cka(&y, &x, true).unwrap();
        assert!((a - b).abs() <= EXACT);
        assert!((-EXACT..=1.0 + EXACT).contains(&a));
    }

    // orthogonal right-multiplication and isotropic scaling invariance
    let x = gaussian(&mut rng, 40, 6, 1.0);
    let q = random_orthogonal(&mut rng, 6);
    let rotated = x.matmul(&q).unwrap();
    let v = linear_cka(&x, &rotated, true).unwrap();
    assert!((v - 1.0).abs() <= CKA_ORTHO_TOL, "orthogonal invariance: {v}");
    let v = linear_cka(&x, &x.scale(7.3), true).unwrap();
    assert!((v - 1.0).abs() <= CKA_ORTHO_TOL, "scaling invariance: {v}");

    // Gram-matrix oracle on random 50x8 features
    let mut max_err: f64 = 0.0;
    for _ in 0..20 {
        let x = gaussian(&mut rng, 50, 8, 1.0);
        let y = gaussian(&mut rng, 50, 8, 1.0);
        let gx = x.matmul(&x.transpose()).unwrap();
        let gy = y.matmul(&y.transpose()).unwrap();
        let oracle = gx.frob_inner(&gy).unwrap() / (gx.frob_norm() * gy.frob_norm());
        let fast = linear_cka(&x, &y, false).unwrap();
        max_err = max_err.max((oracle - fast).abs());
    }
    assert!(max_err <= GRAM_ORACLE_TOL, "gram oracle deviation {max_err}");
    pass(4, "CKA suite", t, &format!("(gram oracle err {max_err:.2e})"));
}

fn random_orthogonal(rng: &mut RngStream, n: usize) -> Matrix {
    // Gram-Schmidt on a random square matrix
    let raw = gaussian(rng, n, n, 1.0);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut v = raw.row(i).to_vec();
        for u in &rows {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v);
    }
    Matrix::from_vec(n, n, rows.into_iter().flatten().collect()).unwrap()
}

#[test]
fn criterion_05_entangled_selection_and_cka_alignment() {
    let t = Instant::now();
    // 4 x 8-class label shift; the downstream window is upstream 2's block
    let suite = make_entangled_suite(4, 8, 64, 0.5, 7).unwrap();
    assert_eq!(suite.entangled_with, Some(1));
    let config = ModelConfig::default();
    let hp = Hyperparams {
        upstream_epochs: 25,
        adaptation_epochs: 50,
        lr_v: 3e-3,
        ..Hyperparams::default()
    };
    let base = pretrain_base(&suite, &config, &hp, 7).unwrap();
    let upstream = train_all_upstream(&base, &suite, &hp, 4, 1.0, 7).unwrap();

    let mut selected = 0;
    let mut first_weights = None;
    for seed in [0u64, 1, 2] {
        let episode = sample_episode(&suite.downstream, KShot::All, seed).unwrap();
        let ctx = AdaptContext {
            base: &base,
            upstream: &upstream,
            suite: &suite,
            episode: &episode,
            hp: &hp,
            rank: 4,
            alpha: 1.0,
            seed,
        };
        let model = adapt(lookup("learned_composition").unwrap(), &ctx).unwrap();
        let weights = model.weights.expect("learned weights");
        let mean = weights.mean_weights();
        let argmax = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == 1 {
            selected += 1;
        }
        if first_weights.is_none() {
            first_weights = Some(weights);
        }
    }
    assert!(
        selected >= 2,
        "entangled upstream selected in only {selected}/3 seeds"
    );

    // CKA argmax agrees with the learned-weight argmax at >= 50% of sites
    let gt = train_upstream(&base, &suite.downstream, &hp, 4, 1.0, 7).unwrap();
    let episode = sample_episode(&suite.downstream, KShot::All, 0).unwrap();
    let sets: Vec<AdapterSet> = upstream.iter().map(|u| u.set.clone()).collect();
    let cka = cka_map(&base, &sets, &gt.set, &episode.query_x, true).unwrap();
    let wmap = weight_map(&first_weights.unwrap()).unwrap();
    let agreement = cka.alignment_fraction(&wmap).unwrap();
    assert!(agreement >= 0.5, "cka/weight argmax agreement {agreement}");
    pass(
        5,
        "entangled selection",
        t,
        &format!("(selected {selected}/3 seeds, cka agreement {agreement:.2})"),
    );
}

#[test]
fn criterion_06_few_shot_trend() {
    let t = Instant::now();
    let suite = make_label_shift_suite(32, 3, 64, 0.5, 7).unwrap();
    let config = ModelConfig::default();
    // grid-searched composition learning rate; all else the fixed defaults
    let hp = Hyperparams {
        lr_v: 3e-4,
        ..Hyperparams::default()
    };
    let base = pretrain_base(&suite, &config, &hp, 7).unwrap();
    let upstream = train_all_upstream(&base, &suite, &hp, 4, 1.0, 7).unwrap();
    let inputs = GridInputs {
        suite: &suite,
        config: &config,
        base: &base,
        upstream: &upstream,
        hp: &hp,
        rank: 4,
        alpha: 1.0,
    };
    let methods = [
        lookup("lora_scratch").unwrap(),
        lookup("uniform_composition").unwrap(),
        lookup("learned_composition").unwrap(),
    ];
    let report = run_grid(&inputs, &methods, &[KShot::Shot(1), KShot::All], &[0, 1, 2], "").unwrap();
    assert!(!report.incomplete, "failures: {:?}", report.failures);

    let mean = |method: &str, k: KShot| -> f64 {
        let rows: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.method == method && r.k == k)
            .map(|r| r.accuracy)
            .collect();
        assert_eq!(rows.len(), 3);
        rows.iter().sum::<f64>() / 3.0
    };
    let lora_1 = mean("lora_scratch", KShot::Shot(1));
    let uni_1 = mean("uniform_composition", KShot::Shot(1));
    let learned_1 = mean("learned_composition", KShot::Shot(1));
    let lora_all = mean("lora_scratch", KShot::All);
    let learned_all = mean("learned_composition", KShot::All);

    assert!(
        uni_1 >= lora_1 - TREND_MARGIN,
        "k=1: uniform {uni_1:.4} vs lora {lora_1:.4}"
    );
    assert!(
        learned_1 >= lora_1 - TREND_MARGIN,
        "k=1: learned {learned_1:.4} vs lora {lora_1:.4}"
    );
    assert!(
        learned_1 >= uni_1 - TREND_MARGIN,
        "k=1: learned {learned_1:.4} vs uniform {uni_1:.4}"
    );
    assert!(
        learned_all >= lora_all - FULL_SHOT_MARGIN,
        "k=all: learned {learned_all:.4} vs lora {lora_all:.4}"
    );
    pass(
        6,
        "few-shot trend",
        t,
        &format!(
            "(k=1: lora {lora_1:.3} uniform {uni_1:.3} learned {learned_1:.3}; k=all: lora {lora_all:.3} learned {learned_all:.3})"
        ),
    );
}

#[test]
fn criterion_07_scaling_n() {
    let t = Instant::now();
    let suite = make_task_shift_suite(5, 64, 0.5, 7).unwrap();
    let config = ModelConfig::default();
    let hp = Hyperparams {
        lr_v: 1e-3,
        ..Hyperparams::default()
    };
    let base = pretrain_base(&suite, &config, &hp, 7).unwrap();
    let upstream = train_all_upstream(&base, &suite, &hp, 4, 1.0, 7).unwrap();
    let seeds = [0u64, 1, 2];

    // every single-upstream uniform result
    let mut single_means = Vec::new();
    for i in 0..upstream.len() {
        let inputs = GridInputs {
            suite: &suite,
            config: &config,
            base: &base,
            upstream: &upstream[i..i + 1],
            hp: &hp,
            rank: 4,
            alpha: 1.0,
        };
        let report = run_grid(
            &inputs,
            &[lookup("uniform_composition").unwrap()],
            &[KShot::All],
            &seeds,
            "",
        )
        .unwrap();
        let mean = report.rows.iter().map(|r| r.accuracy).sum::<f64>() / seeds.len() as f64;
        single_means.push(mean);
    }
    let best_single = single_means.iter().cloned().fold(f64::MIN, f64::max);

    // learned composition over all five upstream sets
    let inputs = GridInputs {
        suite: &suite,
        config: &config,
        base: &base,
        upstream: &upstream,
        hp: &hp,
        rank: 4,
        alpha: 1.0,
    };
    let report = run_grid(
        &inputs,
        &[lookup("learned_composition").unwrap()],
        &[KShot::All],
        &seeds,
        "",
    )
    .unwrap();
    let learned_all = report.rows.iter().map(|r| r.accuracy).sum::<f64>() / seeds.len() as f64;

    assert!(
        learned_all >= best_single - SCALING_MARGIN,
        "learned over 5 upstream {learned_all:.4} vs best single {best_single:.4}"
    );
    pass(
        7,
        "scaling the number of upstream modules",
        t,
        &format!("(learned {learned_all:.3} vs best single {best_single:.3})"),
    );
}

#[test]
fn criterion_08_parameter_accounting() {
    let t = Instant::now();
    let cfg = ModelConfig::default();
    // closed forms: uniform/classifier/zero-shot 0, learned sites*N,
    // lora sites*r*(d+c), full ft the whole base
    for (method, n, rank, expect) in [
        ("uniform_composition", 3, 4, 0),
        ("classifier_tuning", 3, 4, 0),
        ("zero_shot_uniform", 3, 4, 0),
        ("learned_composition", 3, 4, 18),
        ("learned_composition", 5, 4, 30),
        ("lora_scratch", 3, 4, 768),
        ("lora_scratch", 3, 2, 384),
        ("full_finetune", 3, 4, 4496),
    ] {
        let got = lookup(method).unwrap().theta(&cfg, n, rank, true);
        assert_eq!(got, expect, "{method} n={n} r={rank}");
    }
    // the mask-level accounting agrees with an independent recount
    let mask = TrainableMask {
        head: true,
        adapters: true,
        ..TrainableMask::NONE
    };
    let counts = param_counts(mask, &cfg, 3, 4, true);
    assert_eq!(counts.adapters, 6 * (16 * 4 + 16 * 4));
    assert_eq!(counts.head, 16 * 8 + 8);
    assert_eq!(counts.theta(), 768, "head is excluded from theta");
    pass(8, "parameter accounting", t, "");
}

#[test]
fn criterion_09_bench_determinism() {
    let t = Instant::now();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut cfg: RunConfig = serde_json::from_str(
        r#"{
        "suite": {"regime": "label_shift", "total_classes": 32, "n_upstream": 3, "noise_sigma": 0.5, "seed": 7},
        "methods": ["classifier_tuning", "uniform_composition", "learned_composition"],
        "k_grid": [1, 2],
        "seeds": [0, 1],
        "pipeline_seed": 7,
        "hyperparams": {"pretrain_epochs": 25, "upstream_epochs": 10, "adaptation_epochs": 12, "warmup_epochs": 2, "lr_v": 0.001}
    }"#,
    )
    .unwrap();

    cfg.output_dir = dir_a.path().to_path_buf();
    let (paths_a, report_a) = cmd_bench(&cfg).unwrap();
    cfg.output_dir = dir_b.path().to_path_buf();
    let (paths_b, _) = cmd_bench(&cfg).unwrap();

    let bytes_a = std::fs::read(&paths_a.report_csv).unwrap();
    let bytes_b = std::fs::read(&paths_b.report_csv).unwrap();
    assert_eq!(bytes_a, bytes_b, "bench CSVs differ between runs");
    let sum_a = std::fs::read(&paths_a.summary_csv).unwrap();
    let sum_b = std::fs::read(&paths_b.summary_csv).unwrap();
    assert_eq!(sum_a, sum_b, "summary CSVs differ between runs");
    assert_eq!(
        report_a.rows.len(),
        3 * 2 * 2,
        "bench must write |methods| x |K| x |seeds| rows"
    );

    // cached artifacts reproduce the same bytes as a fresh run
    let (paths_c, _) = cmd_bench(&cfg).unwrap();
    assert_eq!(bytes_b, std::fs::read(&paths_c.report_csv).unwrap());
    pass(9, "bench determinism", t, "");
}

#[test]
fn criterion_10_mixed_rank_composition() {
    let t = Instant::now();
    let base = micro_base(240);
    let mut rng = RngStream::from_seed(241);
    let head = random_head(&base.config, &mut rng);
    let (xs, _) = random_batch(&base.config, 4, &mut rng);

    // upstream sets with ranks 2, 4, and 8 on 8x8 sites
    let sets: Vec<AdapterSet> = [2usize, 4, 8]
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let map: BTreeMap<_, _> = base
                .sites()
                .into_iter()
                .map(|s| {
                    let ad = LoraAdapter::new(
                        gaussian(&mut rng, 8, r, 0.3),
                        gaussian(&mut rng, 8, r, 0.3),
                        1.0,
                    )
                    .unwrap();
                    (s, ad)
                })
                .collect();
            AdapterSet::new(map, format!("up-r{r}-{i}")).unwrap()
        })
        .collect();

    let uniform = compose_model(&base.sites(), &sets, ComposeMode::Uniform).unwrap();
    for site in base.sites() {
        assert_eq!(uniform.delta(site).unwrap().shape(), (8, 8));
    }
    let weights = CompositionWeights::zeros(
        &base.sites(),
        sets.iter().map(|s| s.provenance.clone()).collect(),
    )
    .unwrap();
    let learned = compose_model(&base.sites(), &sets, ComposeMode::Learned(weights)).unwrap();

    // criterion 1 identities hold across heterogeneous ranks
    let lu = predict(&base, &head, Overlay::Composed(&uniform), &xs).unwrap();
    let ll = predict(&base, &head, Overlay::Composed(&learned), &xs).unwrap();
    assert_eq!(lu, ll);
    for site in base.sites() {
        let adapters: Vec<&LoraAdapter> = sets.iter().map(|s| s.get(site).unwrap()).collect();
        let saturated = learned_delta(&adapters, &[40.0, -40.0, -40.0]).unwrap();
        assert!(saturated.max_abs_diff(&adapters[0].scaled_delta()) <= EXACT);
        let single = uniform_delta(&adapters[..1]).unwrap();
        assert!(single.max_abs_diff(&adapters[0].scaled_delta()) <= EXACT);
    }
    pass(10, "mixed-rank composition", t, "(ranks {2, 4, 8})");
}
