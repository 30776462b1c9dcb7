//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use debias_core::compute::{Graph, Tensor};
use debias_core::dataset::{
    amplify_bias, compute_reweights, dominant_filter, downsample_balance, synth_generate, Dataset,
    EmotionLabel, FeatureBlock, Gender, RatioSpec, ReweightMode, Sample, Split, SynthConfig,
};
use debias_core::harness::{
    run_experiment, seed_means, DataSource, ExperimentSpec, MethodEntry, ReportRow, Scores,
    SweepPlan, SynthSource,
};
use debias_core::losses::{ce_soft, gce_multilabel, ClassBalanceWeights};
use debias_core::metrics::{binarize, dp_gap, eo_gaps, hamming_acc, macro_f1};
use debias_core::model::Widths;
use debias_core::seed::rng_from;
use debias_core::trainers::gradcheck::{loss_checks, step_checks};
use debias_core::trainers::{
    train_with, GenderGuard, GenderTags, MethodKind, MethodSpec, TrainConfig, TrainOptions, Trainer,
};
use debias_core::Error;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

// ---------------------------------------------------------------------------
// 1. Metrics against brute-force enumeration

struct Oracle {
    pred: Vec<Vec<bool>>,
    truth: Vec<Vec<bool>>,
    genders: Vec<Gender>,
    c: usize,
}

impl Oracle {
    fn count(
        &self,
        class: usize,
        gender: Option<Gender>,
        pred: Option<bool>,
        truth: Option<bool>,
    ) -> f64 {
        (0..self.pred.len())
            .filter(|&i| gender.is_none_or(|g| self.genders[i] == g))
            .filter(|&i| pred.is_none_or(|p| self.pred[i][class] == p))
            .filter(|&i| truth.is_none_or(|t| self.truth[i][class] == t))
            .count() as f64
    }

    fn hamming(&self) -> f64 {
        let mut agree = 0.0;
        for j in 0..self.c {
            agree += self.count(j, None, Some(true), Some(true))
                + self.count(j, None, Some(false), Some(false));
        }
        agree / (self.pred.len() * self.c) as f64
    }

    fn f1(&self, class: usize, gender: Option<Gender>) -> Option<f64> {
        let tp = self.count(class, gender, Some(true), Some(true));
        let fp = self.count(class, gender, Some(true), Some(false));
        let fn_ = self.count(class, gender, Some(false), Some(true));
        (2.0 * tp + fp + fn_ > 0.0).then(|| 2.0 * tp / (2.0 * tp + fp + fn_))
    }

    fn macro_f1(&self) -> f64 {
        (0..self.c)
            .map(|j| self.f1(j, None).unwrap_or(0.0))
            .sum::<f64>()
            / self.c as f64
    }

    fn rate(&self, class: usize, g: Gender, truth: bool) -> Option<f64> {
        let den = self.count(class, Some(g), None, Some(truth));
        (den > 0.0).then(|| self.count(class, Some(g), Some(true), Some(truth)) / den)
    }

    fn rms_gap(&self, per_gender: impl Fn(usize, Gender) -> Option<f64>) -> f64 {
        let gaps: Vec<f64> = (0..self.c)
            .filter_map(
                |j| match (per_gender(j, Gender::F), per_gender(j, Gender::M)) {
                    (Some(a), Some(b)) => Some((a - b).abs()),
                    _ => None,
                },
            )
            .collect();
        if gaps.is_empty() {
            0.0
        } else {
            (gaps.iter().map(|x| x * x).sum::<f64>() / gaps.len() as f64).sqrt()
        }
    }

    fn dp(&self) -> f64 {
        let n = self.pred.len() as f64;
        let mut total = 0.0;
        for j in 0..self.c {
            let overall = self.count(j, None, Some(true), None) / n;
            let mut worst: f64 = 0.0;
            for g in Gender::ALL {
                let n_g = self.genders.iter().filter(|&&x| x == g).count() as f64;
                worst = worst.max((self.count(j, Some(g), Some(true), None) / n_g - overall).abs());
            }
            total += worst * worst;
        }
        total.sqrt()
    }
}

fn random_rows(rng: &mut impl Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                // Exactly on the threshold, which must binarize to 0.
                return vec![1.0 / c as f64; c];
            }
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>().powi(3)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from(2024);
    let trials = 250;
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let n = rng.random_range(2..=64);
        let c = rng.random_range(2..=8);
        let pred_p = random_rows(&mut rng, n, c);
        let truth_p = random_rows(&mut rng, n, c);
        let mut genders: Vec<Gender> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    Gender::F
                } else {
                    Gender::M
                }
            })
            .collect();
        genders[0] = Gender::F;
        genders[1] = Gender::M;

        let manual =
            |row: &[f64]| -> Vec<bool> { row.iter().map(|&p| p > 1.0 / c as f64).collect() };
        let pred: Vec<Vec<bool>> = pred_p.iter().map(|r| binarize(r)).collect();
        let truth: Vec<Vec<bool>> = truth_p.iter().map(|r| binarize(r)).collect();
        for (row, bits) in pred_p.iter().chain(&truth_p).zip(pred.iter().chain(&truth)) {
            ensure(manual(row) == *bits, || {
                format!("trial {t}: binarize mismatch on {row:?}")
            })?;
        }

        let o = Oracle {
            pred: pred.clone(),
            truth: truth.clone(),
            genders: genders.clone(),
            c,
        };
        let eo = eo_gaps(&pred, &truth, &genders).map_err(|e| e.to_string())?;
        let pairs = [
            (
                "hamming_acc",
                hamming_acc(&pred, &truth).map_err(|e| e.to_string())?,
                o.hamming(),
            ),
            (
                "macro_f1",
                macro_f1(&pred, &truth).map_err(|e| e.to_string())?,
                o.macro_f1(),
            ),
            ("tpr_gap", eo.tpr_gap, o.rms_gap(|j, g| o.rate(j, g, true))),
            ("fpr_gap", eo.fpr_gap, o.rms_gap(|j, g| o.rate(j, g, false))),
            ("f1_gap", eo.f1_gap, o.rms_gap(|j, g| o.f1(j, Some(g)))),
            (
                "dp_gap",
                dp_gap(&pred, &genders).map_err(|e| e.to_string())?,
                o.dp(),
            ),
        ];
        for (name, got, want) in pairs {
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure(err <= 1e-12, || {
                format!("trial {t}: {name} {got} vs oracle {want}")
            })?;
        }
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!(
        "{trials} instances, max abs diff {worst:.1e}, {:.2?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 2. Finite-difference gradients

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0_f64);
    let mut count = 0;
    for seed in [0, 1] {
        for c in loss_checks(seed)
            .and_then(|mut l| {
                l.extend(step_checks(seed)?);
                Ok(l)
            })
            .map_err(|e| e.to_string())?
        {
            count += 1;
            ensure(c.error <= 1e-4, || {
                format!("{} relative error {:.3e}", c.name, c.error)
            })?;
            if c.error > worst.1 {
                worst = (c.name.clone(), c.error);
            }
        }
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{count} checks, worst {} at {:.2e}, {:.2?}",
        worst.0,
        worst.1,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 3. GCE gradient identity and small-q limit

fn gce_identity() -> Outcome {
    let mut rng = rng_from(7);
    let (n, d, c) = (6, 5, 4);
    let x = Tensor::from_vec(
        n,
        d,
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let w = Tensor::from_vec(
        d,
        c,
        (0..d * c).map(|_| rng.random_range(-0.8..0.8)).collect(),
    )
    .unwrap();
    let uniform = ClassBalanceWeights::uniform(c);
    let mut worst_identity: f64 = 0.0;
    let mut worst_limit: f64 = 0.0;
    for i in 0..n {
        let class = rng.random_range(0..c);
        let mut onehot = vec![0.0; c];
        onehot[class] = 1.0;
        let xi = Tensor::row(x.row_slice(i));
        let grad_of = |use_gce: bool, q: f64| -> (f64, Tensor, f64) {
            let mut g = Graph::new();
            let wv = g.param(&w).unwrap();
            let xv = g.constant(xi.clone()).unwrap();
            let logits = g.matmul(xv, wv).unwrap();
            let p = g.softmax_rows(logits).unwrap();
            let y = g.constant(Tensor::row(&onehot)).unwrap();
            let loss = if use_gce {
                gce_multilabel(&mut g, y, p, q).unwrap()
            } else {
                ce_soft(&mut g, y, p, &uniform).unwrap()
            };
            let l = g.sum(loss).unwrap();
            let p_j = g.value(p).get(0, class);
            (g.value(l).item(), g.backward(l).unwrap().wrt(wv), p_j)
        };
        let (_, d_gce, p_j) = grad_of(true, 0.7);
        let (ce, d_ce, _) = grad_of(false, 0.7);
        let scale = p_j.powf(0.7);
        for (a, b) in d_gce.data().iter().zip(d_ce.data()) {
            let want = scale * b;
            worst_identity = worst_identity.max((a - want).abs() / want.abs().max(1e-12));
        }
        let (gce_small, _, _) = grad_of(true, 1e-6);
        worst_limit = worst_limit.max((gce_small - ce).abs());
    }
    ensure(worst_identity <= 1e-4, || {
        format!("gradient identity relative error {worst_identity:.3e}")
    })?;
    ensure(worst_limit <= 1e-4, || {
        format!("|GCE(q=1e-6) - CE| = {worst_limit:.3e}")
    })?;
    Ok(format!(
        "identity rel err {worst_identity:.1e} at q=0.7, small-q abs err {worst_limit:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4-6. Trends on the synthetic family

fn synthetic_sweep(out: &Path) -> Result<(Vec<ReportRow>, Duration), String> {
    let start = Instant::now();
    let spec = ExperimentSpec {
        source: DataSource::Synth(SynthSource {
            n: 4000,
            classes: 6,
            dims: 16,
            layers: 4,
            ratio: 1,
            bias_strength: 0.8,
            label_noise: 0.0,
            category_skew: 2.0,
            gender_amplitude: None,
            expression_shift: None,
            seed: 0,
        }),
        ratios: vec![1, 5, 10, 20, 40],
        methods: [
            MethodKind::Erm,
            MethodKind::Adv,
            MethodKind::Ds,
            MethodKind::Rw,
            MethodKind::Gadro,
        ]
        .into_iter()
        .map(MethodEntry::Name)
        .collect(),
        seeds: vec![0, 1, 2],
        output_dir: out.to_path_buf(),
        plan: SweepPlan::Standard,
        train: trend_config(),
        seed: 0,
        workers: 0,
    };
    let rows = run_experiment(&spec).map_err(|e| e.to_string())?;
    if let Some(bad) = rows.iter().find(|r| r.error.is_some()) {
        return Err(format!(
            "{} 1:{} seed {} failed: {:?}",
            bad.method, bad.ratio, bad.seed, bad.error
        ));
    }
    Ok((seed_means(&rows), start.elapsed()))
}

fn trend_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        widths: Widths {
            hidden: 64,
            adv_hidden: 64,
            dual_hidden: 32,
        },
        ..TrainConfig::default()
    }
}

fn mean_of(means: &[ReportRow], method: MethodKind, ratio: u32) -> Result<Scores, String> {
    means
        .iter()
        .find(|r| r.method == method && r.ratio == ratio)
        .and_then(|r| r.scores)
        .ok_or_else(|| format!("no {method} result at 1:{ratio}"))
}

fn bias_trend(means: &[ReportRow], elapsed: Duration) -> Outcome {
    ensure(elapsed < Duration::from_secs(600), || {
        format!("sweep took {elapsed:.1?}")
    })?;
    let ratios = [1, 5, 10, 20, 40];
    let gaps = ratios
        .iter()
        .map(|&r| mean_of(means, MethodKind::Erm, r).map(|s| s.tpr_gap))
        .collect::<Result<Vec<_>, _>>()?;
    let drops: Vec<f64> = gaps
        .windows(2)
        .map(|w| w[0] - w[1])
        .filter(|d| *d > 0.0)
        .collect();
    let shown = gaps
        .iter()
        .map(|g| format!("{g:.3}"))
        .collect::<Vec<_>>()
        .join(" -> ");
    ensure(drops.len() <= 1 && drops.iter().all(|d| *d <= 0.01), || {
        format!("ERM TPR gap not nondecreasing: {shown}")
    })?;
    ensure(gaps[4] - gaps[0] >= 0.05, || {
        format!("1:40 minus 1:1 below 0.05: {shown}")
    })?;
    Ok(format!("ERM TPR gap {shown}"))
}

fn debias_efficacy(means: &[ReportRow], elapsed: Duration) -> Outcome {
    ensure(elapsed < Duration::from_secs(900), || {
        format!("sweep took {elapsed:.1?}")
    })?;
    let erm = mean_of(means, MethodKind::Erm, 20)?;
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    for kind in [MethodKind::Ds, MethodKind::Rw] {
        let s = mean_of(means, kind, 20)?;
        for (name, got, base) in [
            ("TPR", s.tpr_gap, erm.tpr_gap),
            ("FPR", s.fpr_gap, erm.fpr_gap),
            ("DP", s.dp_gap, erm.dp_gap),
        ] {
            let cut = 1.0 - got / base;
            notes.push(format!("{kind} {name} -{:.0}%", 100.0 * cut));
            if cut < 0.3 {
                failures.push(format!(
                    "{kind} cuts {name} gap by only {:.1}%",
                    100.0 * cut
                ));
            }
        }
    }
    let g = mean_of(means, MethodKind::Gadro, 20)?;
    for (name, got, base) in [
        ("TPR", g.tpr_gap, erm.tpr_gap),
        ("FPR", g.fpr_gap, erm.fpr_gap),
        ("F1", g.f1_gap, erm.f1_gap),
        ("DP", g.dp_gap, erm.dp_gap),
    ] {
        notes.push(format!("GADRO {name} {got:.3} vs {base:.3}"));
        if got >= base {
            failures.push(format!("GADRO {name} gap {got:.4} not below ERM {base:.4}"));
        }
    }
    let drop = erm.f1 - g.f1;
    notes.push(format!("GADRO F1 drop {drop:.3}"));
    if drop > 0.05 {
        failures.push(format!("GADRO macro-F1 drop {drop:.4} > 0.05"));
    }
    if failures.is_empty() {
        Ok(notes.join(", "))
    } else {
        Err(format!("{} [{}]", failures.join("; "), notes.join(", ")))
    }
}

fn adversarial_signature(means: &[ReportRow]) -> Outcome {
    let erm = mean_of(means, MethodKind::Erm, 20)?;
    let adv = mean_of(means, MethodKind::Adv, 20)?;
    let cut = 1.0 - adv.dp_gap / erm.dp_gap;
    ensure(cut >= 0.3, || {
        format!(
            "ADV DP gap {:.4} vs ERM {:.4}, reduction {:.1}%",
            adv.dp_gap,
            erm.dp_gap,
            100.0 * cut
        )
    })?;
    Ok(format!(
        "DP gap {:.3} vs ERM {:.3} (-{:.0}%), TPR gap {:.3} vs {:.3}",
        adv.dp_gap,
        erm.dp_gap,
        100.0 * cut,
        adv.tpr_gap,
        erm.tpr_gap
    ))
}

// ---------------------------------------------------------------------------
// 7. Resampling

const TABLE_CATEGORIES: [&str; 8] = [
    "angry", "disgust", "neutral", "fear", "happy", "sad", "surprise", "contempt",
];
/// Per category: majority gender, then (minority, majority) counts after 1:20
/// amplification for train and dev.
const TABLE_COUNTS: [(Gender, [usize; 2], [usize; 2]); 8] = [
    (Gender::M, [167, 3357], [142, 2845]),
    (Gender::M, [11, 235], [5, 110]),
    (Gender::M, [688, 13771], [149, 2980]),
    (Gender::F, [10, 218], [7, 158]),
    (Gender::M, [357, 7142], [154, 3083]),
    (Gender::F, [102, 2051], [48, 963]),
    (Gender::F, [28, 576], [11, 230]),
    (Gender::F, [14, 296], [24, 490]),
];

fn table_dataset() -> Dataset {
    let c = TABLE_CATEGORIES.len();
    let mut samples = Vec::new();
    for (cat, (major, train, dev)) in TABLE_COUNTS.iter().enumerate() {
        let mut probs = vec![0.2 / (c - 1) as f64; c];
        probs[cat] = 0.8;
        let label = EmotionLabel::new(probs).unwrap();
        for (split, [_, maj]) in [(Split::Train, train), (Split::Dev, dev)] {
            // A generous minority pool so the subsample is the binding step.
            for (gender, n) in [(*major, *maj), (major.other(), maj / 3 + 5)] {
                for i in 0..n {
                    samples.push(Sample {
                        id: format!("{cat}-{split}-{gender}-{i}"),
                        features: FeatureBlock::new(1, 1, vec![i as f32]).unwrap(),
                        label: label.clone(),
                        gender,
                        split,
                    });
                }
            }
        }
        samples.push(Sample {
            id: format!("{cat}-test"),
            features: FeatureBlock::new(1, 1, vec![0.0]).unwrap(),
            label: label.clone(),
            gender: Gender::F,
            split: Split::Test,
        });
    }
    Dataset::new(
        TABLE_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        1,
        1,
        samples,
    )
    .unwrap()
}

fn resampler_exactness() -> Outcome {
    // Worked example: the 1:20 train/dev counts of the real corpus.
    let ds = table_dataset();
    let direction: Vec<Gender> = TABLE_COUNTS.iter().map(|t| t.0).collect();
    let amp = amplify_bias(&ds, &RatioSpec::new(20, direction.clone()).unwrap(), 1)
        .map_err(|e| e.to_string())?;
    for (split, pick) in [(Split::Train, 1usize), (Split::Dev, 2)] {
        let counts = amp.dominant_counts(split);
        for (cat, row) in TABLE_COUNTS.iter().enumerate() {
            let (major, want) = (row.0, if pick == 1 { row.1 } else { row.2 });
            let got = [
                counts[cat][major.other().index()],
                counts[cat][major.index()],
            ];
            ensure(got == want, || {
                format!(
                    "{} {split}: got minority/majority {got:?}, expected {want:?}",
                    TABLE_CATEGORIES[cat]
                )
            })?;
        }
    }
    ensure(
        amp.split_len(Split::Test) == ds.split_len(Split::Test),
        || "test split changed".into(),
    )?;

    // Synthetic data with the same per-category direction.
    let mut cfg = SynthConfig::new(6000, 8, 12, 2, 0.8, 5).unwrap();
    cfg.ratio = RatioSpec::new(2, direction.clone()).unwrap();
    let base = dominant_filter(&synth_generate(&cfg).map_err(|e| e.to_string())?);
    let amp = amplify_bias(&base, &RatioSpec::new(20, direction.clone()).unwrap(), 3)
        .map_err(|e| e.to_string())?;
    for split in [Split::Train, Split::Dev] {
        for (cat, cnt) in amp.dominant_counts(split).iter().enumerate() {
            let major = direction[cat];
            let (maj, min) = (cnt[major.index()] as f64, cnt[major.other().index()] as f64);
            ensure(maj > min, || {
                format!("category {cat} {split}: majority flipped {cnt:?}")
            })?;
            ensure((min - maj / 20.0).abs() <= 1.0, || {
                format!("category {cat} {split}: {maj}:{min} is not within one sample of 20:1")
            })?;
        }
    }

    let balanced = downsample_balance(&amp, 9).map_err(|e| e.to_string())?;
    for (cat, cnt) in balanced.dominant_counts(Split::Train).iter().enumerate() {
        ensure(cnt[0] == cnt[1], || {
            format!("downsampled category {cat} has {cnt:?}")
        })?;
    }

    let weights = compute_reweights(&amp, ReweightMode::Joint).map_err(|e| e.to_string())?;
    let counts = amp.dominant_counts(Split::Train);
    let n: usize = counts.iter().map(|c| c[0] + c[1]).sum();
    let mut mass: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (s, w) in amp.samples().iter().zip(&weights) {
        if s.split == Split::Train {
            *mass
                .entry((s.dominant().unwrap(), s.gender.index()))
                .or_default() += w;
        }
    }
    let mut worst: f64 = 0.0;
    for ((cat, g), total) in &mass {
        let n_g: usize = counts.iter().map(|c| c[*g]).sum();
        let n_c = counts[*cat][0] + counts[*cat][1];
        let want = (n_g * n_c) as f64 / n as f64;
        worst = worst.max((total - want).abs());
    }
    ensure(worst <= 1e-9, || {
        format!("reweighted mass off by {worst:.3e}")
    })?;
    Ok(format!(
        "table counts exact, synthetic within 1 sample, reweight err {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 8. Bias-supervision guard

fn small_data() -> Dataset {
    let cfg = SynthConfig::new(500, 4, 8, 1, 0.8, 11).unwrap();
    let base = dominant_filter(&synth_generate(&cfg).unwrap());
    amplify_bias(&base, &RatioSpec::alternating(5, 4).unwrap(), 2).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 2,
        widths: Widths {
            hidden: 12,
            adv_hidden: 8,
            dual_hidden: 6,
        },
        ..TrainConfig::default()
    }
}

fn guard() -> Outcome {
    let ds = small_data();
    let cfg = small_config();
    let armed = GenderGuard::new(Some(vec![Gender::F, Gender::M]), true);
    ensure(
        matches!(armed.read(&[0]), Err(Error::GenderAccess(_))),
        || "armed guard allowed a read".into(),
    )?;
    for kind in MethodKind::ALL {
        let m = MethodSpec::new(kind);
        if kind.bias_supervised() {
            let opts = TrainOptions {
                gender_tags: GenderTags::Withheld,
            };
            match train_with(&m, &cfg, &ds, &opts) {
                Err(Error::Config(_)) => {}
                other => {
                    return Err(format!(
                        "{kind} without gender tags: {:?}",
                        other.map(|_| ())
                    ))
                }
            }
        } else {
            let (t, tds) =
                Trainer::new(&m, &cfg, &ds, &TrainOptions::default()).map_err(|e| e.to_string())?;
            ensure(t.guard().is_armed(), || {
                format!("{kind} runs with the guard disarmed")
            })?;
            t.run(&tds)
                .map_err(|e| format!("{kind} under armed guard: {e}"))?;
        }
    }
    Ok("8 bias-supervised methods refused, 6 others trained under an armed guard".into())
}

// ---------------------------------------------------------------------------
// 9. Sweep determinism

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = |dir: &str, workers: usize| ExperimentSpec {
        source: DataSource::Synth(SynthSource {
            n: 600,
            classes: 4,
            dims: 8,
            layers: 3,
            ratio: 1,
            bias_strength: 0.8,
            label_noise: 0.05,
            category_skew: 2.0,
            gender_amplitude: None,
            expression_shift: None,
            seed: 4,
        }),
        ratios: vec![1, 20],
        methods: [
            MethodKind::Erm,
            MethodKind::Madv,
            MethodKind::Gadro,
            MethodKind::Lff,
            MethodKind::Disent,
        ]
        .into_iter()
        .map(MethodEntry::Name)
        .collect(),
        seeds: vec![0, 1],
        output_dir: tmp.path().join(dir),
        plan: SweepPlan::Grid,
        train: small_config(),
        seed: 17,
        workers,
    };
    run_experiment(&spec("a", 1)).map_err(|e| e.to_string())?;
    run_experiment(&spec("b", 4)).map_err(|e| e.to_string())?;
    for name in ["report.csv", "report.md"] {
        let a = std::fs::read(tmp.path().join("a").join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(tmp.path().join("b").join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs between executions"))?;
    }
    Ok("report.csv and report.md byte-identical across two executions".into())
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let sweep_dir = tempfile::tempdir().expect("temp dir");
    let sweep = match panic::catch_unwind(AssertUnwindSafe(|| synthetic_sweep(sweep_dir.path()))) {
        Ok(r) => r,
        Err(_) => Err("panicked".into()),
    };
    let on_sweep = |f: &dyn Fn(&[ReportRow], Duration) -> Outcome| match &sweep {
        Ok((rows, t)) => guarded(|| f(rows, *t)),
        Err(e) => Err(format!("synthetic sweep failed: {e}")),
    };

    let results: Vec<(&str, Outcome)> = vec![
        ("metric oracle equivalence", guarded(metric_oracle)),
        ("gradient correctness", guarded(gradient_correctness)),
        ("GCE identity and small-q limit", guarded(gce_identity)),
        ("bias trend over ratios", on_sweep(&bias_trend)),
        ("debias efficacy at 1:20", on_sweep(&debias_efficacy)),
        (
            "adversarial DP signature",
            on_sweep(&|m, _| adversarial_signature(m)),
        ),
        ("resampler exactness", guarded(resampler_exactness)),
        ("bias-supervision guard", guarded(guard)),
        ("sweep determinism", guarded(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
