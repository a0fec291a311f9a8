//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each, and
//! exits non-zero if any failed. Everything runs offline on the mock backend.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use sdad_core::augment::{augment_dataset, balance_targets, AugmentPaths, AugmentationPlan};
use sdad_core::backend::MockBackend;
use sdad_core::embeddings::EmbeddingVector;
use sdad_core::manifest::{Dimension, Subgroup, SubgroupTaxonomy};
use sdad_core::metrics::{
    aggregate_driving, frechet_distance, infraction_score, matrix_sqrt_psd, mf1, miou,
    parse_route_log, ConfusionMatrix, EmptyClass, FeatureStats, InfractionEvent, PenaltyTable,
};
use sdad_core::report::{render_subgroup_report, ReportFormat, SubgroupReport};
use sdad_core::rng::SplitMix64;
use sdad_core::subgroup::{
    identify_subgroup, BankEntry, Similarity, SubgroupDistribution, SubgroupTextBank,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- FD

fn random_samples(rng: &mut SplitMix64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| shift + (1.0 + j as f64 * 0.1) * rng.next_signed_unit())
                .collect()
        })
        .collect()
}

fn stats_of(rows: &[Vec<f64>]) -> FeatureStats {
    let mut s = FeatureStats::new(rows[0].len());
    for r in rows {
        s.push(r).unwrap();
    }
    s
}

fn fd_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = SplitMix64::new(0xfd);

    let mut worst_self = 0.0f64;
    let mut worst_sym = 0.0f64;
    for &d in &[1usize, 4, 16, 64] {
        let x = stats_of(&random_samples(&mut rng, 3 * d + 10, d, 0.0));
        let y = stats_of(&random_samples(&mut rng, 2 * d + 10, d, 0.5));
        worst_self = worst_self.max(frechet_distance(&x, &x).unwrap().abs());
        let (xy, yx) = (
            frechet_distance(&x, &y).unwrap(),
            frechet_distance(&y, &x).unwrap(),
        );
        worst_sym = worst_sym.max((xy - yx).abs());
    }
    ensure!(worst_self < 1e-8, "FD(X,X) = {worst_self:e}");
    ensure!(worst_sym < 1e-8, "|FD(X,Y) - FD(Y,X)| = {worst_sym:e}");

    // Diagonal Gaussians: sum of (m1 - m2)^2 + (s1 - s2)^2 with s the std devs.
    let mut worst_diag = 0.0f64;
    for case in 0..100 {
        let d = 1 + (case * 7) % 64;
        let mut mean = |scale: f64| DVector::from_fn(d, |_, _| scale * rng.next_signed_unit());
        let (m1, m2) = (mean(3.0), mean(3.0));
        let var1: Vec<f64> = (0..d).map(|_| 0.01 + 4.0 * rng.next_f64()).collect();
        let var2: Vec<f64> = (0..d).map(|_| 0.01 + 4.0 * rng.next_f64()).collect();
        let expected: f64 = (0..d)
            .map(|i| (m1[i] - m2[i]).powi(2) + (var1[i].sqrt() - var2[i].sqrt()).powi(2))
            .sum();
        let a =
            FeatureStats::from_moments(m1, DMatrix::from_diagonal(&DVector::from_vec(var1)), 100)
                .unwrap();
        let b =
            FeatureStats::from_moments(m2, DMatrix::from_diagonal(&DVector::from_vec(var2)), 100)
                .unwrap();
        let got = frechet_distance(&a, &b).unwrap();
        worst_diag = worst_diag.max((got - expected).abs() / expected);
    }
    ensure!(
        worst_diag < 1e-6,
        "diagonal closed form rel err {worst_diag:e}"
    );

    let mut worst_sqrt = 0.0f64;
    for &d in &[1usize, 2, 3, 8, 17, 32, 64, 100, 128] {
        for rank in [d, d.div_ceil(2)] {
            let b = DMatrix::from_fn(d, rank, |_, _| rng.next_signed_unit());
            let a = &b * b.transpose();
            let s = matrix_sqrt_psd(&a).unwrap();
            let rel = (&s * &s - &a).norm() / a.norm();
            worst_sqrt = worst_sqrt.max(rel);
        }
    }
    ensure!(
        worst_sqrt < 1e-6,
        "sqrt reconstruction rel err {worst_sqrt:e}"
    );
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!(
        "self {worst_self:.1e}, sym {worst_sym:.1e}, diag rel {worst_diag:.1e}, sqrt rel {worst_sqrt:.1e}, {secs:.2} s"
    ))
}

// ---------------------------------------------------------------- identification

fn random_bank(
    rng: &mut SplitMix64,
    t: &SubgroupTaxonomy,
    d: usize,
    sim: Similarity,
) -> SubgroupTextBank {
    let entries = t
        .enumerate()
        .into_iter()
        .map(|sg| BankEntry {
            subgroup: sg,
            text: String::new(),
            embedding: EmbeddingVector::new((0..d).map(|_| rng.next_signed_unit()).collect())
                .unwrap(),
        })
        .collect();
    SubgroupTextBank::new(t, String::new(), sim, entries).unwrap()
}

fn brute_argmax(img: &[f64], bank: &SubgroupTextBank) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, e) in bank.entries.iter().enumerate() {
        let mut s = 0.0;
        for (a, b) in e.embedding.as_slice().iter().zip(img) {
            s += a * b;
        }
        if bank.similarity == Similarity::Cosine {
            s /= norm(e.embedding.as_slice()) * norm(img);
        }
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

fn identification() -> Outcome {
    let t = SubgroupTaxonomy::weather_time();
    let mut rng = SplitMix64::new(0x1d);
    let (mut agree, mut invariant) = (0, 0);
    for case in 0..1000 {
        let d = 2 + (rng.next_below(63) as usize);
        let sim = if case % 4 == 3 {
            Similarity::Cosine
        } else {
            Similarity::Dot
        };
        let bank = random_bank(&mut rng, &t, d, sim);
        let img: Vec<f64> = (0..d).map(|_| rng.next_signed_unit()).collect();
        let v = EmbeddingVector::new(img.clone()).unwrap();
        let got = identify_subgroup(&v, &bank).unwrap().subgroup;
        if got == bank.entries[brute_argmax(&img, &bank)].subgroup {
            agree += 1;
        }
        let k = (10f64).powf(6.0 * rng.next_f64() - 3.0);
        if identify_subgroup(&v.scaled(k), &bank).unwrap().subgroup == got {
            invariant += 1;
        }
    }
    ensure!(
        agree == 1000 && invariant == 1000,
        "agreement {agree}/1000, scale invariance {invariant}/1000"
    );
    Ok("argmax agreement 1000/1000, positive-scalar invariance 1000/1000".into())
}

// ---------------------------------------------------------------- augmentation

fn augmentation_end_to_end() -> Outcome {
    let started = Instant::now();
    let d = tempfile::tempdir().unwrap();
    let f = common::build_fixture(d.path(), 10, true);
    ensure!(
        f.manifest.samples.len() == 90,
        "fixture has {} samples",
        f.manifest.samples.len()
    );
    let plan = AugmentationPlan::new(900, 20240601);
    let backend = MockBackend::new(common::FIXTURE_DIM, 0).with_max_in_flight(8);
    let run = |out: &str| {
        let out_dir = d.path().join(out);
        let paths = AugmentPaths {
            input_dir: &f.dir,
            out_dir: &out_dir,
            palette: &f.palette,
            store: None,
        };
        augment_dataset(&f.manifest, &plan, &backend, &f.bank, &paths).unwrap()
    };
    let first = run("run1");
    let second = run("run2");

    let t = &first.manifest.taxonomy;
    let synthetic: Vec<_> = first
        .manifest
        .samples
        .iter()
        .filter(|s| !s.is_original())
        .collect();
    ensure!(
        synthetic.len() == 900,
        "{} synthetic records",
        synthetic.len()
    );
    let mut table = vec![vec![0u64; t.len()]; t.len()];
    for s in &synthetic {
        let parent = first.manifest.get(s.parent_id.as_deref().unwrap()).unwrap();
        ensure!(
            s.mask_uri == parent.mask_uri,
            "{} does not reuse its parent's mask",
            s.id
        );
        let (z, zs) = (
            parent.subgroup.as_ref().unwrap(),
            s.subgroup.as_ref().unwrap(),
        );
        ensure!(z != zs, "{}: z* == z", s.id);
        table[t.index_of(z)][t.index_of(zs)] += 1;
    }

    let bytes1 = first.manifest.to_bytes().unwrap();
    ensure!(
        bytes1 == second.manifest.to_bytes().unwrap(),
        "manifests differ between runs"
    );
    std::fs::write(d.path().join("run1/manifest.jsonl"), &bytes1).unwrap();
    std::fs::write(
        d.path().join("run2/manifest.jsonl"),
        second.manifest.to_bytes().unwrap(),
    )
    .unwrap();
    let (a, b) = (
        common::snapshot(&d.path().join("run1/images")),
        common::snapshot(&d.path().join("run2/images")),
    );
    ensure!(a.len() == 900 && a == b, "images differ between runs");

    // Pooled Pearson statistic over the 9 conditionals z* | z, each uniform on
    // the 8 other subgroups: 9 * 7 = 63 degrees of freedom.
    let k = t.len();
    let mut stat = 0.0;
    for (z, row) in table.iter().enumerate() {
        let n: u64 = row.iter().sum();
        let expected = n as f64 / (k - 1) as f64;
        for (zs, &obs) in row.iter().enumerate() {
            if zs != z {
                stat += (obs as f64 - expected).powi(2) / expected;
            }
        }
    }
    let dof = (k * (k - 2)) as f64;
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    ensure!(p > 0.01, "chi-square {stat:.2} on {dof} dof, p = {p:.4}");
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "900 records, z* != z, masks reused, byte-identical rerun, chi2 = {stat:.2} ({dof} dof) p = {p:.3}, {secs:.2} s"
    ))
}

// ---------------------------------------------------------------- balance

fn three_way() -> SubgroupTaxonomy {
    SubgroupTaxonomy::new(vec![Dimension::new("group", &["a", "b", "c"])]).unwrap()
}

fn distribution(t: &SubgroupTaxonomy, counts: &[u64]) -> SubgroupDistribution {
    let m: BTreeMap<Subgroup, u64> = t
        .enumerate()
        .into_iter()
        .zip(counts.iter().copied())
        .collect();
    SubgroupDistribution::from_counts(t, &m)
}

/// Exhaustive minimizer of the max deviation from uniform; ties broken by the
/// sum of squared deviations, then by the lexicographically largest allocation.
fn oracle_allocation(c: [i64; 3], n: i64) -> [i64; 3] {
    let total = c.iter().sum::<i64>() + n;
    let mut best: Option<((i64, i64), [i64; 3])> = None;
    for a0 in 0..=n {
        for a1 in 0..=n - a0 {
            let a = [a0, a1, n - a0 - a1];
            // deviations scaled by 3 so they stay integral
            let dev: Vec<i64> = (0..3).map(|i| 3 * (c[i] + a[i]) - total).collect();
            let key = (
                dev.iter().map(|x| x.abs()).max().unwrap(),
                dev.iter().map(|x| x * x).sum(),
            );
            let better = match &best {
                None => true,
                Some((k, b)) => key < *k || (key == *k && a > *b),
            };
            if better {
                best = Some((key, a));
            }
        }
    }
    best.unwrap().1
}

fn balance() -> Outcome {
    let t = three_way();
    let before = distribution(&t, &[80, 10, 10]);
    let alloc = balance_targets(&before, 60);
    let finals: Vec<u64> = t
        .enumerate()
        .iter()
        .zip([80, 10, 10])
        .map(|(sg, c)| c + alloc[sg])
        .collect();
    let after = distribution(&t, &finals);
    ensure!(
        after.entropy() > before.entropy(),
        "entropy {} -> {}",
        before.entropy(),
        after.entropy()
    );

    let mut checked = 0;
    for c0 in 0..=12 {
        for c1 in 0..=12 {
            for c2 in 0..=12 {
                let d = distribution(&t, &[c0, c1, c2]);
                for n in 0..=30u64 {
                    let got = balance_targets(&d, n);
                    let got: Vec<i64> = t.enumerate().iter().map(|sg| got[sg] as i64).collect();
                    let want = oracle_allocation([c0 as i64, c1 as i64, c2 as i64], n as i64);
                    ensure!(
                        got == want,
                        "counts ({c0},{c1},{c2}) n={n}: got {got:?}, oracle {want:?}"
                    );
                    checked += 1;
                }
            }
        }
    }
    Ok(format!(
        "(80,10,10)+60 -> {finals:?}, entropy {:.4} -> {:.4}; {checked} instances match exhaustive search",
        before.entropy(),
        after.entropy()
    ))
}

// ---------------------------------------------------------------- segmentation

struct Oracle {
    iou: Vec<Option<f64>>,
    f1: Vec<Option<f64>>,
}

fn count_oracle(g: &[u32], p: &[u32], k: usize) -> Oracle {
    let mut iou = Vec::new();
    let mut f1 = Vec::new();
    for c in 0..k as u32 {
        let tp = g
            .iter()
            .zip(p)
            .filter(|(a, b)| **a == c && **b == c)
            .count() as u64;
        let fp = g
            .iter()
            .zip(p)
            .filter(|(a, b)| **a != c && **b == c)
            .count() as u64;
        let fn_ = g
            .iter()
            .zip(p)
            .filter(|(a, b)| **a == c && **b != c)
            .count() as u64;
        iou.push((tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64));
        f1.push((2 * tp + fp + fn_ > 0).then(|| (2 * tp) as f64 / (2 * tp + fp + fn_) as f64));
    }
    Oracle { iou, f1 }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

fn segmentation() -> Outcome {
    let mut rng = SplitMix64::new(0x5e6);
    for case in 0..500 {
        let k = 1 + rng.next_below(5) as usize;
        let g: Vec<u32> = (0..256).map(|_| rng.next_below(k as u64) as u32).collect();
        // Half the pixels copied from the truth so scores spread over (0, 1].
        let p: Vec<u32> = g
            .iter()
            .map(|&v| {
                if rng.next_below(2) == 0 {
                    v
                } else {
                    rng.next_below(k as u64) as u32
                }
            })
            .collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&g, &p, None).unwrap();
        let o = count_oracle(&g, &p, k);
        ensure!(
            cm.per_class_iou() == o.iou,
            "case {case}: IoU {:?} vs {:?}",
            cm.per_class_iou(),
            o.iou
        );
        ensure!(
            cm.per_class_f1() == o.f1,
            "case {case}: F1 {:?} vs {:?}",
            cm.per_class_f1(),
            o.f1
        );
        let (mi, mf) = (
            miou(&cm, EmptyClass::Exclude).unwrap(),
            mf1(&cm, EmptyClass::Exclude).unwrap(),
        );
        ensure!(
            mi == mean_present(&o.iou),
            "case {case}: mIoU {mi} vs {}",
            mean_present(&o.iou)
        );
        ensure!(
            mf == mean_present(&o.f1),
            "case {case}: mF1 {mf} vs {}",
            mean_present(&o.f1)
        );

        let mut perfect = ConfusionMatrix::new(k);
        perfect.accumulate(&g, &g, None).unwrap();
        ensure!(
            miou(&perfect, EmptyClass::Exclude).unwrap() == 1.0
                && mf1(&perfect, EmptyClass::Exclude).unwrap() == 1.0,
            "case {case}: perfect prediction below 1"
        );
    }
    Ok("500 random 16x16 pairs exact, perfect prediction mIoU = mF1 = 1.0".into())
}

// ---------------------------------------------------------------- driving

fn driving() -> Outcome {
    let penalties = PenaltyTable::default();
    let kinds = [
        "collision_pedestrian",
        "collision_vehicle",
        "collision_static",
        "red_light",
        "stop_sign",
    ];
    let factor = |k: &str| match k {
        "collision_pedestrian" => 0.50,
        "collision_vehicle" => 0.60,
        "collision_static" => 0.65,
        "red_light" => 0.70,
        "stop_sign" => 0.80,
        _ => unreachable!(),
    };
    let mut rng = SplitMix64::new(0xd5);

    let mut log = String::new();
    let mut expected = Vec::new();
    for r in 0..12 {
        let rc = rng.next_f64();
        let events: Vec<&str> = (0..rng.next_below(5))
            .map(|_| kinds[rng.next_below(5) as usize])
            .collect();
        let is: f64 = events.iter().map(|k| factor(k)).product();
        expected.push(rc * is);
        let ev: Vec<_> = events
            .iter()
            .map(|k| serde_json::json!({"kind": k}))
            .collect();
        log.push_str(
            &serde_json::json!({"route_id": format!("r{r}"), "rc": rc, "events": ev}).to_string(),
        );
        log.push('\n');
    }
    let routes = parse_route_log(&log, &penalties, None).unwrap();
    let ds = aggregate_driving(&routes).unwrap().overall.ds;
    let want = expected.iter().sum::<f64>() / expected.len() as f64;
    ensure!(
        (ds - want).abs() <= 1e-12,
        "mean DS {ds} vs hand-computed {want}"
    );

    for case in 0..100 {
        let mut events: Vec<InfractionEvent> = (0..1 + rng.next_below(12))
            .map(|_| InfractionEvent {
                kind: kinds[rng.next_below(5) as usize].to_string(),
                count: 1 + rng.next_below(3) as u32,
            })
            .collect();
        let base = infraction_score(&events, &penalties).unwrap();
        for i in (1..events.len()).rev() {
            let j = rng.next_below(i as u64 + 1) as usize;
            events.swap(i, j);
        }
        ensure!(
            infraction_score(&events, &penalties).unwrap() == base,
            "case {case}: order changed IS"
        );
    }

    let table = concat!(
        r#"{"route_id":"a","rc":0.3461,"is":0.5023}"#,
        "\n",
        r#"{"route_id":"b","rc":0.9461,"is":0.2737}"#,
        "\n"
    );
    let rendered = aggregate_driving(&parse_route_log(table, &penalties, None).unwrap())
        .unwrap()
        .overall
        .render();
    ensure!(rendered == "64.61 / 0.388 / 21.64", "rendered {rendered:?}");
    Ok(format!(
        "mean DS matches to 1e-12, 100 shuffles order-free, renders \"{rendered}\""
    ))
}

// ---------------------------------------------------------------- report

fn report() -> Outcome {
    let t = SubgroupTaxonomy::weather_time();
    // FD per subgroup on DeepDrive, with and without caption generation.
    let rows = [
        ("Clear, Day", 162.16, 202.02),
        ("Clear, Dawn/Dusk", 66.47, 67.05),
        ("Clear, Night", 211.45, 273.28),
        ("Cloudy, Day", 134.24, 148.49),
        ("Cloudy, Dawn/Dusk", 144.94, 199.48),
        ("Cloudy, Night", 152.65, 246.72),
        ("Rain, Day", 133.96, 154.72),
        ("Rain, Dawn/Dusk", 199.83, 229.45),
        ("Rain, Night", 291.66, 349.22),
    ];
    let mut values = BTreeMap::new();
    let mut base = BTreeMap::new();
    for (phrase, cag, no_cag) in rows {
        let sg = t.parse_phrase(phrase).unwrap();
        values.insert(sg.clone(), cag);
        base.insert(sg, no_cag);
    }
    let r = SubgroupReport::new("FD (CaG)", values).with_baseline(base);
    let text =
        String::from_utf8(render_subgroup_report(&t, &r, ReportFormat::Text).unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    ensure!(lines.len() == 2 + 9, "unexpected table:\n{text}");
    for (i, (phrase, cag, no_cag)) in rows.iter().enumerate() {
        let line = lines[2 + i];
        ensure!(
            line.starts_with(&t.phrase(&t.parse_phrase(phrase).unwrap())),
            "row {i}: {line:?}"
        );
        let cells: Vec<&str> = line.split_whitespace().rev().take(3).collect();
        let want = [
            format!("{:.2}", cag - no_cag),
            format!("{no_cag:.2}"),
            format!("{cag:.2}"),
        ];
        ensure!(cells == want, "row {phrase}: {cells:?} vs {want:?}");
    }
    let night = lines.iter().find(|l| l.starts_with("Rain, Night")).unwrap();
    let cells: Vec<&str> = night.split_whitespace().collect();
    ensure!(
        cells == ["Rain,", "Night", "291.66", "349.22", "-57.56"],
        "Rain, Night row: {night:?}"
    );
    Ok(format!(
        "9 rows with deltas, {:?}",
        night.split_whitespace().collect::<Vec<_>>().join(" ")
    ))
}

// ---------------------------------------------------------------- offline

fn offline() -> Outcome {
    let crates = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap();
    let members: Vec<String> = std::fs::read_dir(crates)
        .unwrap()
        .filter_map(Result::ok)
        .filter(|e| e.path().join("Cargo.toml").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ensure!(members == ["core"], "workspace builds {members:?}");
    Ok(format!(
        "criteria above use the in-process mock backend; workspace members {members:?}"
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("FD oracle suite", fd_suite),
        ("subgroup identification", identification),
        ("augmentation end-to-end", augmentation_end_to_end),
        ("balance policy", balance),
        ("segmentation metrics", segmentation),
        ("driving metrics", driving),
        ("report fixture", report),
        ("offline, primary only", offline),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
