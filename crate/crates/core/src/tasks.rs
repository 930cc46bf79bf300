//! Synthetic classification tasks for the three disentanglement regimes.
//!
//! Every task draws samples as `transform(prototype[class] + sigma * noise)`
//! from class prototypes in R^dim. The three regimes are realized by
//! construction: label shift gives tasks disjoint label blocks from one
//! prototype bank, covariate shift gives tasks one shared label set but
//! per-task input transforms, and task shift gives each task its own
//! prototype family (scale and sparsity) plus its own labels.
//!
//! Generation is pure given `(spec, seed)`: each task carries a `data_seed`
//! and every pool/episode is drawn from labeled substreams of it, so a
//! query set never depends on the episode seed and support sets never
//! collide with query samples.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RngStream;

pub const TRAIN_POOL_PER_CLASS: usize = 500;
pub const QUERY_PER_CLASS: usize = 200;

/// Deterministic input transforms; all are cheap and label-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InputTransform {
    Identity,
    /// Fixed pixel shuffle derived from the embedded seed.
    PixelPermutation { seed: u64 },
    SignFlip,
    /// Sliding 2x2 mean over the square image layout, edges clamped.
    MeanBlur2x2,
    /// `out = mean + gamma * (x - mean)`.
    Contrast { gamma: f64 },
}

impl InputTransform {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            InputTransform::Identity => x.to_vec(),
            InputTransform::PixelPermutation { seed } => {
                let perm = RngStream::from_seed(*seed)
                    .substream("pixel-permutation")
                    .permutation(x.len());
                perm.iter().map(|&i| x[i]).collect()
            }
            InputTransform::SignFlip => x.iter().map(|v| -v).collect(),
            InputTransform::MeanBlur2x2 => {
                let side = (x.len() as f64).sqrt().round() as usize;
                assert_eq!(side * side, x.len(), "blur needs a square layout");
                let at = |r: usize, c: usize| x[r.min(side - 1) * side + c.min(side - 1)];
                let mut out = Vec::with_capacity(x.len());
                for r in 0..side {
                    for c in 0..side {
                        out.push(
                            (at(r, c) + at(r, c + 1) + at(r + 1, c) + at(r + 1, c + 1)) / 4.0,
                        );
                    }
                }
                out
            }
            InputTransform::Contrast { gamma } => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                x.iter().map(|v| mean + gamma * (v - mean)).collect()
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            InputTransform::Identity => "identity".into(),
            InputTransform::PixelPermutation { seed } => format!("pixel-permutation({seed})"),
            InputTransform::SignFlip => "sign-flip".into(),
            InputTransform::MeanBlur2x2 => "mean-blur-2x2".into(),
            InputTransform::Contrast { gamma } => format!("contrast({gamma})"),
        }
    }
}

/// Number of adaptation samples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KShot {
    Shot(usize),
    All,
}

impl fmt::Display for KShot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KShot::Shot(k) => write!(f, "{k}"),
            KShot::All => write!(f, "all"),
        }
    }
}

impl Serialize for KShot {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KShot::Shot(k) => s.serialize_u64(*k as u64),
            KShot::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for KShot {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(usize),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(k) => Ok(KShot::Shot(k)),
            Repr::Str(s) if s == "all" => Ok(KShot::All),
            Repr::Str(s) => Err(serde::de::Error::custom(format!(
                "k must be a positive integer or \"all\", got {s:?}"
            ))),
        }
    }
}

/// One synthetic classification task. `labels` are global class ids; data
/// always uses local indices `0..classes()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub prototypes: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub transform: InputTransform,
    pub labels: Vec<usize>,
    pub family: String,
    pub data_seed: u64,
}

impl TaskSpec {
    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    fn validate(&self) -> Result<()> {
        if self.prototypes.len() != self.labels.len() {
            return Err(Error::Config(format!(
                "task {}: {} prototypes for {} labels",
                self.id,
                self.prototypes.len(),
                self.labels.len()
            )));
        }
        for (i, a) in self.prototypes.iter().enumerate() {
            for b in &self.prototypes[i + 1..] {
                if a == b {
                    return Err(Error::Config(format!(
                        "task {}: duplicate prototypes",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    fn stream(&self) -> RngStream {
        RngStream::from_seed(self.data_seed)
    }

    fn draw_class(&self, class: usize, count: usize, stream: &mut RngStream) -> Vec<Vec<f64>> {
        let proto = &self.prototypes[class];
        (0..count)
            .map(|_| {
                let raw: Vec<f64> = proto
                    .iter()
                    .map(|&p| p + self.noise_sigma * stream.standard_normal())
                    .collect();
                self.transform.apply(&raw)
            })
            .collect()
    }

    /// Full training pool, class-major: 500 samples per class.
    pub fn train_pool(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        self.pool("train", TRAIN_POOL_PER_CLASS)
    }

    /// Fixed held-out query set, class-major: 200 samples per class.
    /// Independent of any episode seed.
    pub fn query_set(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        self.pool("query", QUERY_PER_CLASS)
    }

    fn pool(&self, tag: &str, per_class: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::with_capacity(self.classes() * per_class);
        let mut ys = Vec::with_capacity(self.classes() * per_class);
        for class in 0..self.classes() {
            let mut stream = self.stream().substream(&format!("{tag}.class{class}"));
            xs.extend(self.draw_class(class, per_class, &mut stream));
            ys.extend(std::iter::repeat(class).take(per_class));
        }
        (xs, ys)
    }
}

/// A K-shot support set and the task's fixed query set. Support indices are
/// drawn from the train pool, so support and query are disjoint by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_x: Vec<Vec<f64>>,
    pub support_y: Vec<usize>,
    pub query_x: Vec<Vec<f64>>,
    pub query_y: Vec<usize>,
    pub k: KShot,
    pub seed: u64,
}

/// Samples a K-shot episode. `K = all` uses the entire train pool.
pub fn sample_episode(task: &TaskSpec, k: KShot, seed: u64) -> Result<Episode> {
    let (pool_x, pool_y) = task.train_pool();
    let (support_x, support_y) = match k {
        KShot::All => (pool_x, pool_y),
        KShot::Shot(per_class) => {
            if per_class < 1 {
                return Err(Error::Argument("k must be >= 1".into()));
            }
            if per_class > TRAIN_POOL_PER_CLASS {
                return Err(Error::Argument(format!(
                    "k = {per_class} exceeds the pool of {TRAIN_POOL_PER_CLASS} per class"
                )));
            }
            let mut stream = task
                .stream()
                .substream(&format!("episode.k{per_class}.s{seed}"));
            let mut xs = Vec::with_capacity(task.classes() * per_class);
            let mut ys = Vec::with_capacity(task.classes() * per_class);
            for class in 0..task.classes() {
                let picks = stream.sample_distinct(TRAIN_POOL_PER_CLASS, per_class);
                for idx in picks {
                    xs.push(pool_x[class * TRAIN_POOL_PER_CLASS + idx].clone());
                    ys.push(class);
                }
            }
            (xs, ys)
        }
    };
    let (query_x, query_y) = task.query_set();
    Ok(Episode {
        support_x,
        support_y,
        query_x,
        query_y,
        k,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    LabelShift,
    CovariateShift,
    TaskShift,
}

impl Regime {
    pub fn tag(&self) -> &'static str {
        match self {
            Regime::LabelShift => "label_shift",
            Regime::CovariateShift => "covariate_shift",
            Regime::TaskShift => "task_shift",
        }
    }
}

/// One experiment suite: the upstream tasks, the downstream task, and the
/// task the base model pretrains on.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    pub id: String,
    pub regime: Regime,
    pub upstream: Vec<TaskSpec>,
    pub downstream: TaskSpec,
    pub base_task: TaskSpec,
    /// `Some(i)` when the downstream deliberately reuses upstream `i`'s
    /// label window (the entangled ablation); disjointness checks relax to
    /// match.
    pub entangled_with: Option<usize>,
}

impl SuiteSpec {
    pub fn n_upstream(&self) -> usize {
        self.upstream.len()
    }

    /// Checks the regime's construction rules.
    pub fn validate(&self) -> Result<()> {
        for t in self.all_tasks() {
            t.validate()?;
        }
        match self.regime {
            Regime::LabelShift => {
                self.check_disjoint_labels()?;
                // one family and transform across upstream + downstream;
                // the base pretraining task is domain-independent
                let family = &self.upstream[0].family;
                let transform = self.upstream[0].transform.name();
                for t in self.upstream.iter().chain([&self.downstream]) {
                    if &t.family != family || t.transform.name() != transform {
                        return Err(Error::Config(format!(
                            "label shift requires one family and transform, task {} differs",
                            t.id
                        )));
                    }
                }
            }
            Regime::CovariateShift => {
                let labels = &self.downstream.labels;
                for t in &self.upstream {
                    if &t.labels != labels {
                        return Err(Error::Config(
                            "covariate shift requires one shared label set".into(),
                        ));
                    }
                }
                let mut names = BTreeSet::new();
                for t in self.upstream.iter().chain([&self.downstream]) {
                    if !names.insert(t.transform.name()) {
                        return Err(Error::Config(format!(
                            "covariate shift requires distinct transforms, {} repeats",
                            t.transform.name()
                        )));
                    }
                }
            }
            Regime::TaskShift => {
                self.check_disjoint_labels()?;
                let mut families = BTreeSet::new();
                for t in self.upstream.iter().chain([&self.downstream]) {
                    if !families.insert(t.family.clone()) {
                        return Err(Error::Config(format!(
                            "task shift requires distinct families, {} repeats",
                            t.family
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_disjoint_labels(&self) -> Result<()> {
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for (i, t) in self.upstream.iter().enumerate() {
            for &l in &t.labels {
                if !seen.insert(l) {
                    return Err(Error::Config(format!(
                        "upstream task {i} reuses global label {l}"
                    )));
                }
            }
        }
        if self.entangled_with.is_none() {
            for &l in &self.downstream.labels {
                if seen.contains(&l) {
                    return Err(Error::Config(format!(
                        "downstream reuses global label {l} without entangled_with"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.upstream
            .iter()
            .chain([&self.downstream, &self.base_task])
    }
}

fn task_data_seed(root: &RngStream, id: &str) -> u64 {
    root.substream(&format!("task-data.{id}")).next_u64()
}

fn bank_prototypes(root: &RngStream, classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut stream = root.substream("prototypes");
    (0..classes)
        .map(|_| (0..dim).map(|_| stream.standard_normal()).collect())
        .collect()
}

fn slice_bank(bank: &[Vec<f64>], labels: &[usize]) -> Vec<Vec<f64>> {
    labels.iter().map(|&l| bank[l].clone()).collect()
}

/// Disjoint label blocks from one prototype bank, identical transform and
/// family everywhere. `total_classes` splits evenly into `n_upstream + 1`
/// tasks; the base task pretrains on a held-out block after `total_classes`
/// so downstream labels are unseen by the base model.
pub fn make_label_shift_suite(
    total_classes: usize,
    n_upstream: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<SuiteSpec> {
    if n_upstream == 0 {
        return Err(Error::Argument("need at least one upstream task".into()));
    }
    if total_classes % (n_upstream + 1) != 0 {
        return Err(Error::Argument(format!(
            "total_classes {total_classes} not divisible by {} tasks",
            n_upstream + 1
        )));
    }
    let per_task = total_classes / (n_upstream + 1);
    label_shift_with_sizes(per_task, per_task * n_upstream, n_upstream, dim, sigma, seed)
}

/// Label-shift variant with independent downstream size and upstream label
/// pool; the split-size ablation splits one fixed pool into more, smaller
/// upstream tasks.
///
/// All upstream and downstream tasks share one pixel-permutation domain the
/// base pretraining task does not use: upstream adapters then carry domain
/// structure that transfers to the unseen downstream labels, while the base
/// task (held-out classes, identity inputs) mirrors generic pretraining.
pub fn label_shift_with_sizes(
    downstream_classes: usize,
    upstream_pool: usize,
    n_upstream: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<SuiteSpec> {
    if n_upstream == 0 || downstream_classes == 0 {
        return Err(Error::Argument("need upstream tasks and classes".into()));
    }
    if upstream_pool % n_upstream != 0 {
        return Err(Error::Argument(format!(
            "upstream pool {upstream_pool} not divisible by {n_upstream} tasks"
        )));
    }
    let per_upstream = upstream_pool / n_upstream;
    let root = RngStream::from_seed(seed).substream("label-shift");
    let total = upstream_pool + downstream_classes;
    let bank = bank_prototypes(&root, total + downstream_classes, dim);
    let domain = InputTransform::PixelPermutation {
        seed: root.substream("domain").next_u64(),
    };

    let make = |id: &str, labels: Vec<usize>, transform: InputTransform| TaskSpec {
        id: id.to_string(),
        prototypes: slice_bank(&bank, &labels),
        noise_sigma: sigma,
        transform,
        labels,
        family: "gaussian-unit".into(),
        data_seed: task_data_seed(&root, id),
    };

    let upstream: Vec<TaskSpec> = (0..n_upstream)
        .map(|i| {
            let labels = (i * per_upstream..(i + 1) * per_upstream).collect();
            make(&format!("up-{i}"), labels, domain.clone())
        })
        .collect();
    let downstream = make("down", (upstream_pool..total).collect(), domain.clone());
    let base_task = make(
        "base",
        (total..total + downstream_classes).collect(),
        InputTransform::Identity,
    );

    let suite = SuiteSpec {
        id: format!("label-shift-n{n_upstream}-c{total}-seed{seed}"),
        regime: Regime::LabelShift,
        upstream,
        downstream,
        base_task,
        entangled_with: None,
    };
    suite.validate()?;
    Ok(suite)
}

/// Entangled label-shift: `n_upstream` disjoint 8-label tasks, and a
/// downstream whose 8-label window starts at `window_start` — possibly
/// coinciding or overlapping with an upstream block (same prototypes, fresh
/// data seed).
pub fn make_entangled_suite(
    n_upstream: usize,
    window_start: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<SuiteSpec> {
    const PER_TASK: usize = 8;
    if n_upstream == 0 {
        return Err(Error::Argument("need at least one upstream task".into()));
    }
    let total = n_upstream * PER_TASK;
    if window_start + PER_TASK > total {
        return Err(Error::Argument(format!(
            "window {window_start}..{} exceeds {total} upstream labels",
            window_start + PER_TASK
        )));
    }
    let root = RngStream::from_seed(seed).substream("label-shift-entangled");
    let bank = bank_prototypes(&root, total + PER_TASK, dim);
    let domain = InputTransform::PixelPermutation {
        seed: root.substream("domain").next_u64(),
    };
    let make = |id: &str, labels: Vec<usize>, transform: InputTransform| TaskSpec {
        id: id.to_string(),
        prototypes: slice_bank(&bank, &labels),
        noise_sigma: sigma,
        transform,
        labels,
        family: "gaussian-unit".into(),
        data_seed: task_data_seed(&root, id),
    };
    let upstream: Vec<TaskSpec> = (0..n_upstream)
        .map(|i| {
            make(
                &format!("up-{i}"),
                (i * PER_TASK..(i + 1) * PER_TASK).collect(),
                domain.clone(),
            )
        })
        .collect();
    let downstream = make(
        "down",
        (window_start..window_start + PER_TASK).collect(),
        domain.clone(),
    );
    let base_task = make(
        "base",
        (total..total + PER_TASK).collect(),
        InputTransform::Identity,
    );
    // the overlapped upstream: the one whose block contains the window start
    let entangled_with = Some(window_start / PER_TASK);

    let suite = SuiteSpec {
        id: format!("entangled-n{n_upstream}-w{window_start}-seed{seed}"),
        regime: Regime::LabelShift,
        upstream,
        downstream,
        base_task,
        entangled_with,
    };
    suite.validate()?;
    Ok(suite)
}

/// One shared 8-class label set; every task gets its own input transform.
/// The domains form a related rendering family (contrast variants and a
/// blur) so upstream artifacts carry over, the downstream transform is
/// unused by any upstream, and the base task uses the identity transform.
pub fn make_covariate_shift_suite(
    n_upstream: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<SuiteSpec> {
    const CLASSES: usize = 8;
    let root = RngStream::from_seed(seed).substream("covariate-shift");
    let upstream_transforms = [
        InputTransform::Contrast { gamma: 0.6 },
        InputTransform::Contrast { gamma: 2.2 },
        InputTransform::MeanBlur2x2,
    ];
    if n_upstream == 0 {
        return Err(Error::Argument("need at least one upstream task".into()));
    }
    if n_upstream > upstream_transforms.len() {
        return Err(Error::Config(format!(
            "transform pool exhausted: {} upstream transforms available, {n_upstream} requested",
            upstream_transforms.len()
        )));
    }
    let bank = bank_prototypes(&root, CLASSES, dim);
    let labels: Vec<usize> = (0..CLASSES).collect();
    let make = |id: &str, transform: InputTransform| TaskSpec {
        id: id.to_string(),
        prototypes: slice_bank(&bank, &labels),
        noise_sigma: sigma,
        transform,
        labels: labels.clone(),
        family: "gaussian-unit".into(),
        data_seed: task_data_seed(&root, id),
    };

    let upstream: Vec<TaskSpec> = upstream_transforms
        .iter()
        .take(n_upstream)
        .enumerate()
        .map(|(i, t)| make(&format!("up-{i}"), t.clone()))
        .collect();
    let downstream = make("down", InputTransform::Contrast { gamma: 1.4 });
    let base_task = make("base", InputTransform::Identity);

    let suite = SuiteSpec {
        id: format!("covariate-shift-n{n_upstream}-seed{seed}"),
        regime: Regime::CovariateShift,
        upstream,
        downstream,
        base_task,
        entangled_with: None,
    };
    suite.validate()?;
    Ok(suite)
}

/// Per-family prototype parameters: spread scale and the fraction of
/// dimensions a prototype is supported on.
fn family_params(index: usize) -> (f64, f64) {
    let scale = 0.6 * 1.35_f64.powi(index as i32);
    let keep = (0.8_f64.powi(index as i32)).max(0.15);
    (scale, keep)
}

fn family_prototypes(
    root: &RngStream,
    id: &str,
    classes: usize,
    dim: usize,
    family_index: usize,
) -> Vec<Vec<f64>> {
    let (scale, keep) = family_params(family_index);
    let kept = ((dim as f64 * keep).ceil() as usize).max(1);
    let mut stream = root.substream(&format!("prototypes.{id}"));
    (0..classes)
        .map(|_| {
            let support = stream.sample_distinct(dim, kept);
            let mut proto = vec![0.0; dim];
            for idx in support {
                proto[idx] = scale * stream.standard_normal();
            }
            proto
        })
        .collect()
}

/// Fully distinct tasks: each draws prototypes from its own family
/// (different scale and sparsity) and its own label block. Task 0 is the
/// downstream by convention; use [`task_shift_rotation`] for all rotations.
pub fn make_task_shift_suite(
    n_upstream: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<SuiteSpec> {
    let mut rotation = task_shift_rotation(n_upstream + 1, dim, sigma, seed)?;
    Ok(rotation.remove(0))
}

/// All `(downstream = i, upstream = rest)` configurations over `n_tasks`
/// family-distinct tasks.
pub fn task_shift_rotation(
    n_tasks: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<SuiteSpec>> {
    const CLASSES: usize = 8;
    if n_tasks < 2 {
        return Err(Error::Argument(
            "task shift needs at least two tasks (one upstream, one downstream)".into(),
        ));
    }
    let root = RngStream::from_seed(seed).substream("task-shift");
    let tasks: Vec<TaskSpec> = (0..n_tasks)
        .map(|i| {
            let id = format!("task-{i}");
            let labels: Vec<usize> = (i * CLASSES..(i + 1) * CLASSES).collect();
            TaskSpec {
                prototypes: family_prototypes(&root, &id, CLASSES, dim, i),
                noise_sigma: sigma,
                transform: InputTransform::Identity,
                labels,
                family: format!("family-{i}"),
                data_seed: task_data_seed(&root, &id),
                id,
            }
        })
        .collect();
    let base_task = {
        let id = "base".to_string();
        let labels: Vec<usize> = (n_tasks * CLASSES..(n_tasks + 1) * CLASSES).collect();
        TaskSpec {
            prototypes: family_prototypes(&root, &id, CLASSES, dim, 0),
            noise_sigma: sigma,
            transform: InputTransform::Identity,
            labels,
            family: "family-base".into(),
            data_seed: task_data_seed(&root, &id),
            id,
        }
    };

    (0..n_tasks)
        .map(|down| {
            let downstream = tasks[down].clone();
            let upstream: Vec<TaskSpec> = tasks
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != down)
                .map(|(_, t)| t.clone())
                .collect();
            let suite = SuiteSpec {
                id: format!("task-shift-down{down}-n{}-seed{seed}", n_tasks - 1),
                regime: Regime::TaskShift,
                upstream,
                downstream,
                base_task: base_task.clone(),
                entangled_with: None,
            };
            suite.validate()?;
            Ok(suite)
        })
        .collect()
}
