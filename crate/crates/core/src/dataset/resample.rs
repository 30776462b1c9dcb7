use log::warn;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{Dataset, Gender, RatioSpec, Split};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

/// Keeps samples whose largest label entry strictly exceeds 0.5.
pub fn dominant_filter(ds: &Dataset) -> Dataset {
    let kept = ds
        .samples()
        .iter()
        .filter(|s| s.dominant().is_some())
        .cloned()
        .collect();
    ds.with_samples(kept)
}

/// Positions (into `ds.samples()`) grouped by split, dominant category and
/// gender, in dataset order.
fn group_positions(ds: &Dataset, split: Split) -> Result<Vec<[Vec<usize>; 2]>> {
    let mut groups = vec![[Vec::new(), Vec::new()]; ds.num_categories()];
    for (i, s) in ds.samples().iter().enumerate() {
        if s.split != split {
            continue;
        }
        let c = s.dominant().ok_or_else(|| {
            Error::Validation(format!(
                "sample {:?} has no dominant category; apply dominant_filter first",
                s.id
            ))
        })?;
        groups[c][s.gender.index()].push(i);
    }
    Ok(groups)
}

/// Marks `k` of `positions` as kept, chosen uniformly without replacement.
fn keep_subset(keep: &mut [bool], positions: &[usize], k: usize, seed: u64) {
    if k >= positions.len() {
        for &p in positions {
            keep[p] = true;
        }
        return;
    }
    let mut rng = rng_from(seed);
    for j in index::sample(&mut rng, positions.len(), k) {
        keep[positions[j]] = true;
    }
}

fn filter_kept(ds: &Dataset, keep: &[bool]) -> Dataset {
    let samples = ds
        .samples()
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    ds.with_samples(samples)
}

/// Per dominant category in the train and dev splits, keeps the designated
/// majority gender whole and subsamples the minority to
/// `max(1, floor(majority / r))`. When the minority is already smaller than
/// that, the majority is subsampled to `minority · r` instead. The test split
/// is untouched.
pub fn amplify_bias(ds: &Dataset, spec: &RatioSpec, seed: u64) -> Result<Dataset> {
    if spec.ratio == 0 {
        return Err(Error::Config("ratio must be a positive integer".into()));
    }
    if spec.direction.len() != ds.num_categories() {
        return Err(Error::Config(format!(
            "ratio direction covers {} categories, dataset has {}",
            spec.direction.len(),
            ds.num_categories()
        )));
    }
    let r = spec.ratio as usize;
    let mut keep = vec![false; ds.len()];
    for (i, s) in ds.samples().iter().enumerate() {
        if s.split == Split::Test {
            keep[i] = true;
        }
    }
    for split in [Split::Train, Split::Dev] {
        let groups = group_positions(ds, split)?;
        for (c, by_gender) in groups.iter().enumerate() {
            let major = spec.direction[c];
            let minor = major.other();
            let maj = &by_gender[major.index()];
            let min = &by_gender[minor.index()];
            if maj.is_empty() && min.is_empty() {
                continue;
            }
            if maj.is_empty() {
                return Err(Error::Config(format!(
                    "category {:?} has no {major} samples in the {split} split",
                    ds.categories()[c]
                )));
            }
            let target_min = (maj.len() / r).max(1);
            let (keep_maj, keep_min) = if min.len() >= target_min {
                (maj.len(), target_min)
            } else if min.is_empty() {
                warn!(
                    "category {:?} has no {minor} samples in the {split} split; ratio not enforced",
                    ds.categories()[c]
                );
                (maj.len(), 0)
            } else {
                (min.len() * r, min.len())
            };
            let base = [seed, split.index() as u64, c as u64];
            keep_subset(
                &mut keep,
                maj,
                keep_maj,
                derive_seed(&[base[0], base[1], base[2], major.index() as u64]),
            );
            keep_subset(
                &mut keep,
                min,
                keep_min,
                derive_seed(&[base[0], base[1], base[2], minor.index() as u64]),
            );
        }
    }
    Ok(filter_kept(ds, &keep))
}

/// Within each dominant category of the train split, subsamples the larger
/// gender group to the size of the smaller. Dev and test are untouched.
pub fn downsample_balance(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let groups = group_positions(ds, Split::Train)?;
    let mut keep: Vec<bool> = ds
        .samples()
        .iter()
        .map(|s| s.split != Split::Train)
        .collect();
    for (c, by_gender) in groups.iter().enumerate() {
        let [f, m] = by_gender;
        if f.is_empty() && m.is_empty() {
            continue;
        }
        if f.is_empty() || m.is_empty() {
            let missing = if f.is_empty() { Gender::F } else { Gender::M };
            return Err(Error::Config(format!(
                "category {:?} has no {missing} training samples to balance against",
                ds.categories()[c]
            )));
        }
        let k = f.len().min(m.len());
        keep_subset(&mut keep, f, k, derive_seed(&[seed, c as u64, 0]));
        keep_subset(&mut keep, m, k, derive_seed(&[seed, c as u64, 1]));
    }
    Ok(filter_kept(ds, &keep))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightMode {
    /// `w(g, c) = N_g · N_c / (N · N_{g,c})`.
    #[default]
    Joint,
    /// `w(g) = N / (G · N_g)` with `G` the number of genders present.
    GenderOnly,
}

/// Per-sample weights over the whole dataset (dev/test samples get 1).
pub fn compute_reweights(ds: &Dataset, mode: ReweightMode) -> Result<Vec<f64>> {
    let counts = ds.dominant_counts(Split::Train);
    let n: usize = counts.iter().map(|c| c[0] + c[1]).sum();
    if n == 0 {
        return Err(Error::Config(
            "reweighting needs a nonempty train split".into(),
        ));
    }
    let n = n as f64;
    let n_g = [0, 1].map(|g| counts.iter().map(|c| c[g]).sum::<usize>() as f64);
    let genders_present = n_g.iter().filter(|&&x| x > 0.0).count() as f64;

    ds.samples()
        .iter()
        .map(|s| {
            if s.split != Split::Train {
                return Ok(1.0);
            }
            let c = s.dominant().ok_or_else(|| {
                Error::Validation(format!("sample {:?} has no dominant category", s.id))
            })?;
            let g = s.gender.index();
            match mode {
                ReweightMode::Joint => {
                    let n_gc = counts[c][g] as f64;
                    if n_gc == 0.0 {
                        return Err(Error::Internal(format!(
                            "empty (gender, category) cell for sample {:?}",
                            s.id
                        )));
                    }
                    let n_c = (counts[c][0] + counts[c][1]) as f64;
                    Ok(n_g[g] * n_c / (n * n_gc))
                }
                ReweightMode::GenderOnly => Ok(n / (genders_present * n_g[g])),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EmotionLabel, FeatureBlock, Sample};

    fn label(c: usize, k: usize) -> EmotionLabel {
        let mut p = vec![0.0; k];
        p[c] = 0.8;
        p[(c + 1) % k] = 0.2;
        EmotionLabel::new(p).unwrap()
    }

    /// `cells[c][g][split]` samples per category, gender, split.
    fn build(k: usize, cells: &[[[usize; 3]; 2]]) -> Dataset {
        let mut samples = Vec::new();
        for (c, by_g) in cells.iter().enumerate() {
            for (gi, by_s) in by_g.iter().enumerate() {
                for (si, &n) in by_s.iter().enumerate() {
                    for i in 0..n {
                        samples.push(Sample {
                            id: format!("c{c}g{gi}s{si}n{i}"),
                            features: FeatureBlock::new(1, 1, vec![i as f32]).unwrap(),
                            label: label(c, k),
                            gender: Gender::ALL[gi],
                            split: Split::ALL[si],
                        });
                    }
                }
            }
        }
        let cats = (0..k).map(|c| format!("e{c}")).collect();
        Dataset::new(cats, 1, 1, samples).unwrap()
    }

    #[test]
    fn filter_is_strict() {
        let mk = |id: &str, p: Vec<f64>| Sample {
            id: id.into(),
            features: FeatureBlock::new(1, 1, vec![0.0]).unwrap(),
            label: EmotionLabel::new(p).unwrap(),
            gender: Gender::F,
            split: Split::Train,
        };
        let ds = Dataset::new(
            vec!["a".into(), "b".into(), "c".into()],
            1,
            1,
            vec![
                mk("tie", vec![0.5, 0.5, 0.0]),
                mk("flat", vec![0.34, 0.33, 0.33]),
                mk("kept", vec![0.51, 0.49, 0.0]),
                mk("also", vec![0.6, 0.4, 0.0]),
            ],
        )
        .unwrap();
        let out = dominant_filter(&ds);
        let ids: Vec<_> = out.samples().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["kept", "also"]);
        assert_eq!(dominant_filter(&out), out);
    }

    #[test]
    fn ratio_one_equalizes_to_min() {
        let ds = build(2, &[[[7, 3, 4], [12, 2, 9]], [[30, 5, 1], [4, 8, 2]]]);
        let spec = RatioSpec::alternating(1, 2).unwrap();
        let out = amplify_bias(&ds, &spec, 3).unwrap();
        let tr = out.dominant_counts(Split::Train);
        assert_eq!(tr, vec![[7, 7], [4, 4]]);
        let dv = out.dominant_counts(Split::Dev);
        assert_eq!(dv, vec![[2, 2], [5, 5]]);
        // test untouched
        assert_eq!(
            out.dominant_counts(Split::Test),
            ds.dominant_counts(Split::Test)
        );
    }

    /// Majority counts from the 1:20 MSP-PODCAST train column; the minority
    /// side starts large and must land on the published minority count.
    #[test]
    fn reproduces_published_one_to_twenty_counts() {
        // (majority gender, majority count, expected minority count)
        let rows = [
            (Gender::M, 3357, 167),  // angry
            (Gender::M, 235, 11),    // disgust
            (Gender::M, 13771, 688), // neutral
            (Gender::F, 218, 10),    // fear
            (Gender::M, 7142, 357),  // happy
            (Gender::F, 2051, 102),  // sad
            (Gender::F, 576, 28),    // surprise
            (Gender::F, 296, 14),    // contempt
        ];
        let cells: Vec<[[usize; 3]; 2]> = rows
            .iter()
            .map(|&(g, maj, _)| {
                let min = maj; // plenty of minority samples available
                match g {
                    Gender::F => [[maj, 0, 0], [min, 0, 0]],
                    Gender::M => [[min, 0, 0], [maj, 0, 0]],
                }
            })
            .collect();
        let ds = build(8, &cells);
        let direction = rows.iter().map(|r| r.0).collect();
        let spec = RatioSpec::new(20, direction).unwrap();
        let out = amplify_bias(&ds, &spec, 42).unwrap();
        let counts = out.dominant_counts(Split::Train);
        for (c, &(g, maj, min)) in rows.iter().enumerate() {
            assert_eq!(counts[c][g.index()], maj, "category {c}");
            assert_eq!(counts[c][g.other().index()], min, "category {c}");
        }
    }

    #[test]
    fn small_minority_subsamples_majority() {
        let ds = build(2, &[[[2, 0, 0], [100, 0, 0]], [[10, 0, 0], [1, 0, 0]]]);
        let spec = RatioSpec::alternating(20, 2).unwrap();
        let out = amplify_bias(&ds, &spec, 0).unwrap();
        assert_eq!(out.dominant_counts(Split::Train), vec![[2, 40], [10, 1]]);
    }

    #[test]
    fn missing_majority_is_config_error() {
        let ds = build(2, &[[[5, 0, 0], [0, 0, 0]], [[5, 0, 0], [5, 0, 0]]]);
        let spec = RatioSpec::alternating(5, 2).unwrap();
        let err = amplify_bias(&ds, &spec, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("e0"));
    }

    #[test]
    fn amplify_is_seeded_subset() {
        let ds = build(
            2,
            &[
                [[40, 20, 10], [300, 100, 10]],
                [[200, 90, 10], [50, 30, 10]],
            ],
        );
        let spec = RatioSpec::alternating(10, 2).unwrap();
        let a = amplify_bias(&ds, &spec, 9).unwrap();
        let b = amplify_bias(&ds, &spec, 9).unwrap();
        let c = amplify_bias(&ds, &spec, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let ids: std::collections::HashSet<_> = ds.samples().iter().map(|s| &s.id).collect();
        assert!(a.samples().iter().all(|s| ids.contains(&s.id)));
        let test_in: Vec<_> = ds.split(Split::Test).cloned().collect();
        let test_out: Vec<_> = a.split(Split::Test).cloned().collect();
        assert_eq!(test_in, test_out);
    }

    #[test]
    fn downsample_examples() {
        let ds = build(2, &[[[10, 3, 2], [200, 4, 2]], [[50, 1, 1], [50, 1, 1]]]);
        let out = downsample_balance(&ds, 1).unwrap();
        assert_eq!(out.dominant_counts(Split::Train), vec![[10, 10], [50, 50]]);
        assert_eq!(
            out.dominant_counts(Split::Dev),
            ds.dominant_counts(Split::Dev)
        );

        let ds = build(2, &[[[4, 0, 0], [40, 0, 0]], [[30, 0, 0], [3, 0, 0]]]);
        let out = downsample_balance(&ds, 1).unwrap();
        assert_eq!(out.dominant_counts(Split::Train), vec![[4, 4], [3, 3]]);

        let ds = build(2, &[[[4, 0, 0], [0, 0, 0]], [[30, 0, 0], [3, 0, 0]]]);
        assert!(matches!(downsample_balance(&ds, 1), Err(Error::Config(_))));
    }

    #[test]
    fn reweights_balanced_are_one() {
        let ds = build(2, &[[[10, 1, 1], [10, 1, 1]], [[5, 0, 0], [5, 0, 0]]]);
        let w = compute_reweights(&ds, ReweightMode::Joint).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gender_only_single_category() {
        let ds = build(2, &[[[20, 0, 0], [80, 0, 0]], [[0, 0, 0], [0, 0, 0]]]);
        let w = compute_reweights(&ds, ReweightMode::GenderOnly).unwrap();
        for (s, &x) in ds.samples().iter().zip(&w) {
            let want = if s.gender == Gender::F { 2.5 } else { 0.625 };
            assert!((x - want).abs() < 1e-12);
        }
        // the joint formula is neutral when there is only one category
        let w = compute_reweights(&ds, ReweightMode::Joint).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn joint_group_mass_identity() {
        let ds = build(
            3,
            &[
                [[7, 2, 0], [40, 0, 3]],
                [[31, 0, 0], [3, 1, 0]],
                [[9, 0, 0], [11, 0, 0]],
            ],
        );
        let w = compute_reweights(&ds, ReweightMode::Joint).unwrap();
        let counts = ds.dominant_counts(Split::Train);
        let n: usize = counts.iter().map(|c| c[0] + c[1]).sum();
        let mut total = 0.0;
        for c in 0..3 {
            for g in Gender::ALL {
                let mass: f64 = ds
                    .samples()
                    .iter()
                    .zip(&w)
                    .filter(|(s, _)| {
                        s.split == Split::Train && s.gender == g && s.dominant() == Some(c)
                    })
                    .map(|(_, &x)| x)
                    .sum();
                let n_g: usize = counts.iter().map(|k| k[g.index()]).sum();
                let n_c = counts[c][0] + counts[c][1];
                let want = (n_g * n_c) as f64 / n as f64;
                assert!((mass - want).abs() < 1e-9);
                total += mass;
            }
        }
        assert!((total - n as f64).abs() < 1e-9);
        for (s, &x) in ds.samples().iter().zip(&w) {
            if s.split != Split::Train {
                assert_eq!(x, 1.0);
            }
        }
    }
}
