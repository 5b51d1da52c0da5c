//! Acceptance suite. Each test prints one `[criterion N] PASS|FAIL ...` line
//! to stderr (bypassing the test harness capture) and asserts the criterion.
//!
//! Criteria 6 to 9 share one set of pipeline runs, computed once: the four
//! arms for seeds 0..3, the annotation-budget sweep, the sampling ablation
//! and a repeated run. Later runs start from copies of earlier output
//! directories so that identical upstream stages are reused.

use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidnarr_core::autograd::Mat;
use vidnarr_core::decoding::{beam_search, nucleus_step};
use vidnarr_core::evaluation::{caption_metrics, retrieval_map, retrieval_ndcg, CiderVariant, MetricReport};
use vidnarr_core::experiments::{
    arms_csv, run_pipeline, run_sampling_ablation, run_semi_sup_sweep, AblationRow, Check, ExperimentConfig, SweepRow,
};
use vidnarr_core::grammar::{Grammar, Vocab, SOS_ID};
use vidnarr_core::losses::{dual_temperature_loss, max_margin_loss, symmetric_infonce};
use vidnarr_core::narrator::{CaptionExample, LanguageModel, LmConfig, Narrator, NarratorConfig};
use vidnarr_core::training::{pretrain_lm, train_narrator, Arm, LmTrainConfig, NarratorTrainConfig};

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(n: usize, pass: bool, what: &str, detail: &str) {
    let line = format!("[criterion {n}] {} {what}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_mat(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Mat {
    Mat::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn lm(config: LmConfig, seed: u64) -> LanguageModel {
    LanguageModel::new(config, Vocab::from_grammar(&Grammar::standard()), seed).unwrap()
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_gate_zero_equivalence() {
    let start = Instant::now();
    let base = lm(LmConfig::default(), 1);
    let narrator = Narrator::new(&base, NarratorConfig::default(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let tokens = rng.random_range(4..40);
        let feats = random_mat(&mut rng, (tokens, narrator.config.visual_dim));
        let pooled = narrator.attention_pool(&feats).unwrap();
        let len = rng.random_range(0..base.config.max_len - 1);
        let prefix: Vec<usize> = std::iter::once(SOS_ID)
            .chain((0..len).map(|_| rng.random_range(3..base.vocab.len())))
            .collect();
        let a = narrator.next_token_distribution(&pooled, &prefix).unwrap();
        let b = base.next_token_distribution(&prefix).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-5 && secs < 60.0;
    report(1, pass, "gate-zero equivalence", &format!("max |diff| {worst:.3e} over 100 pairs in {secs:.2}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

/// Relative error with a floor for gradients that are zero up to rounding.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs() / 1e-7
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn check_fd(params: &mut [f64], f: &dyn Fn(&[f64]) -> f64, grad: &[f64], h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let x = params[i];
        params[i] = x + h;
        let up = f(params);
        params[i] = x - h;
        let down = f(params);
        params[i] = x;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * h)));
    }
    worst
}

fn dual_temperature_fd(rng: &mut ChaCha8Rng) -> (f64, usize) {
    let (n, d) = (5, 4);
    let v = random_mat(rng, (n, d));
    let u = random_mat(rng, (n, d));
    let tau: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let out = dual_temperature_loss(&v, &u, &tau).unwrap();
    let mut flat: Vec<f64> = v.iter().chain(u.iter()).copied().chain(tau.iter().copied()).collect();
    let grad: Vec<f64> = out.d_v.iter().chain(out.d_u.iter()).copied().chain(out.d_tau.iter().copied()).collect();
    let f = |p: &[f64]| {
        let v = Mat::from_shape_vec((n, d), p[..n * d].to_vec()).unwrap();
        let u = Mat::from_shape_vec((n, d), p[n * d..2 * n * d].to_vec()).unwrap();
        dual_temperature_loss(&v, &u, &p[2 * n * d..]).unwrap().loss
    };
    (check_fd(&mut flat, &f, &grad, 1e-6), flat.len())
}

fn max_margin_fd(rng: &mut ChaCha8Rng) -> (f64, usize) {
    let n = 6;
    let s = random_mat(rng, (n, n));
    let r = Mat::from_shape_fn((n, n), |(i, j)| if i == j || rng.random_bool(0.2) { 1.0 } else { 0.0 });
    let (_, ds) = max_margin_loss(&s, &r, 0.2).unwrap();
    let mut flat: Vec<f64> = s.iter().copied().collect();
    let grad: Vec<f64> = ds.iter().copied().collect();
    let f = |p: &[f64]| max_margin_loss(&Mat::from_shape_vec((n, n), p.to_vec()).unwrap(), &r, 0.2).unwrap().0;
    (check_fd(&mut flat, &f, &grad, 1e-7), flat.len())
}

fn captioning_fd(rng: &mut ChaCha8Rng) -> (f64, usize) {
    let base = lm(
        LmConfig {
            width: 4,
            layers: 1,
            heads: 1,
            mlp_ratio: 1,
            max_len: 8,
        },
        4,
    );
    let cfg = NarratorConfig {
        visual_dim: 3,
        num_queries: 2,
        pool_heads: 1,
        pool_head_dim: 2,
        insertion_period: 1,
        cross_heads: 1,
    };
    let mut narrator = Narrator::new(&base, cfg, 5).unwrap();
    let trainable: Vec<_> = narrator.store.ids().filter(|&id| narrator.store.is_trainable(id)).collect();
    for &id in &trainable {
        let shape = narrator.store.value(id).dim();
        *narrator.store.value_mut(id) = random_mat(rng, shape);
    }
    // Open gates so the visual path carries gradients well above rounding.
    for id in narrator.gate_ids() {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        narrator.store.value_mut(id).fill(sign * rng.random_range(1.0..2.0));
    }
    let vocab = narrator.vocab.clone();
    let examples: Vec<CaptionExample> = ["O flashes the blue disc", "C moves the red square left"]
        .iter()
        .map(|s| CaptionExample {
            feats: std::sync::Arc::new(random_mat(rng, (5, 3))),
            body: vocab.encode_str(s).unwrap(),
        })
        .collect();
    let refs: Vec<&CaptionExample> = examples.iter().collect();
    let (_, _, grads) = narrator.captioning_loss(&refs).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for &id in &trainable {
        let shape = narrator.store.value(id).dim();
        let g = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(shape));
        for idx in ndarray::indices(shape) {
            let x = narrator.store.value(id)[idx];
            narrator.store.value_mut(id)[idx] = x + h;
            let up = narrator.captioning_loss(&refs).unwrap().0;
            narrator.store.value_mut(id)[idx] = x - h;
            let down = narrator.captioning_loss(&refs).unwrap().0;
            narrator.store.value_mut(id)[idx] = x;
            worst = worst.max(rel_err(g[idx], (up - down) / (2.0 * h)));
            count += 1;
        }
    }
    (worst, count)
}

#[test]
fn criterion_02_gradient_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (a, na) = dual_temperature_fd(&mut rng);
    let (b, nb) = max_margin_fd(&mut rng);
    let (c, nc) = captioning_fd(&mut rng);
    let secs = start.elapsed().as_secs_f64();
    let sizes_ok = na <= 200 && nb <= 200 && nc <= 200;
    let pass = a < 1e-4 && b < 1e-4 && c < 1e-4 && sizes_ok && secs < 120.0;
    report(
        2,
        pass,
        "gradient fidelity",
        &format!(
            "max rel err dual-temperature {a:.2e} ({na} params), max-margin {b:.2e} ({nb}), captioning {c:.2e} ({nc}); {secs:.2}s"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut single_ok = true;
    let mut worst_log_n: f64 = 0.0;
    let mut worst_collapse: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(2..8);
        let v = random_mat(&mut rng, (1, d));
        let u = random_mat(&mut rng, (1, d));
        let t = rng.random_range(0.01..1.0);
        single_ok &= dual_temperature_loss(&v, &u, &[t]).unwrap().loss == 0.0;

        let n = rng.random_range(2..10);
        let row = random_mat(&mut rng, (1, d));
        let same = Mat::from_shape_fn((n, d), |(_, j)| row[[0, j]]);
        let got = dual_temperature_loss(&same, &same, &vec![t; n]).unwrap().loss;
        worst_log_n = worst_log_n.max((got - (n as f64).ln()).abs());

        let v = random_mat(&mut rng, (n, d));
        let u = random_mat(&mut rng, (n, d));
        let dual = dual_temperature_loss(&v, &u, &vec![t; n]).unwrap().loss;
        let plain = symmetric_infonce(&v, &u, t).unwrap();
        worst_collapse = worst_collapse.max((dual - plain).abs());
    }
    let pass = single_ok && worst_log_n < 1e-6 && worst_collapse < 1e-10;
    report(
        3,
        pass,
        "loss identities",
        &format!(
            "single pair exactly 0: {single_ok}; |loss - log N| {worst_log_n:.2e}; |dual - InfoNCE| at equal tau {worst_collapse:.2e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

const EOS: usize = 0;

/// Every finished sequence up to `max_len` with its probability.
fn exhaustive(table: &[Vec<f64>], vocab: usize, max_len: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 1.0)];
    while let Some((prefix, p)) = stack.pop() {
        let d = &table[prefix.len()];
        for tok in 0..vocab {
            let q = p * d[tok];
            if tok == EOS {
                out.push((prefix.clone(), q));
            } else {
                let mut next = prefix.clone();
                next.push(tok);
                if next.len() == max_len {
                    out.push((next, q));
                } else {
                    stack.push((next, q));
                }
            }
        }
    }
    out
}

#[test]
fn criterion_04_decoding_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let draws = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[nucleus_step(&[0.5, 0.3, 0.2], 0.7, &mut rng).unwrap()] += 1;
    }
    let target = [0.625, 0.375, 0.0];
    let mut nucleus_ok = true;
    let mut freqs = [0.0; 3];
    for k in 0..3 {
        freqs[k] = counts[k] as f64 / draws as f64;
        let sigma = (target[k] * (1.0 - target[k]) / draws as f64).sqrt();
        nucleus_ok &= (freqs[k] - target[k]).abs() <= 3.0 * sigma;
    }

    let mut beam_ok = true;
    let mut cases = 0;
    for vocab in 3..=4 {
        for max_len in 2..=4 {
            for _ in 0..20 {
                let table: Vec<Vec<f64>> = (0..max_len)
                    .map(|_| {
                        let raw: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.05..1.0)).collect();
                        let s: f64 = raw.iter().sum();
                        raw.iter().map(|r| r / s).collect()
                    })
                    .collect();
                let mut exact = exhaustive(&table, vocab, max_len);
                exact.sort_by(|a, b| b.1.total_cmp(&a.1));
                // Width one is greedy by contract; exhaustive agreement is for B >= 2.
                let width = rng.random_range(2..=exact.len().min(4));
                let step = |ps: &[Vec<usize>]| ps.iter().map(|p| table[p.len()].clone()).collect::<Vec<_>>();
                let got = beam_search(step, width, max_len, EOS).unwrap();
                beam_ok &= got.len() == width;
                for (h, (seq, p)) in got.iter().zip(&exact) {
                    beam_ok &= &h.tokens == seq && (h.log_prob - p.ln()).abs() < 1e-12;
                }
                cases += 1;
            }
        }
    }
    let pass = nucleus_ok && beam_ok;
    report(
        4,
        pass,
        "decoding statistics",
        &format!(
            "nucleus frequencies ({:.4}, {:.4}, {:.4}) over {draws} draws; beam equals exhaustive top-B on {cases} tables: {beam_ok}",
            freqs[0], freqs[1], freqs[2]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

/// Average precision from explicit rank counting.
fn brute_ap(scores: &[f64], rel: &[f64]) -> Option<f64> {
    let rank = |j: usize| 1 + (0..scores.len()).filter(|&i| scores[i] > scores[j] || (scores[i] == scores[j] && i < j)).count();
    let pos: Vec<usize> = (0..scores.len()).filter(|&j| rel[j] > 0.0).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&j| {
            let rj = rank(j);
            pos.iter().filter(|&&k| rank(k) <= rj).count() as f64 / rj as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

fn brute_ndcg(scores: &[f64], rel: &[f64]) -> f64 {
    let rank = |j: usize| 1 + (0..scores.len()).filter(|&i| scores[i] > scores[j] || (scores[i] == scores[j] && i < j)).count();
    let dcg: f64 = (0..scores.len()).map(|j| rel[j] / ((rank(j) + 1) as f64).log2()).sum();
    // Ideal: the largest remaining gain at each position.
    let mut left = rel.to_vec();
    let mut idcg = 0.0;
    for pos in 1..=rel.len() {
        let (k, g) = left.iter().copied().enumerate().fold((0, f64::MIN), |b, (i, x)| if x > b.1 { (i, x) } else { b });
        idcg += g / ((pos + 1) as f64).log2();
        left[k] = f64::MIN / 2.0;
        if g <= 0.0 {
            break;
        }
    }
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

fn brute_directional(s: &Mat, r: &Mat) -> (f64, f64, f64, f64) {
    let dir = |s: &Mat, r: &Mat| {
        let mut aps = Vec::new();
        let mut nd = 0.0;
        for q in 0..s.nrows() {
            let (sr, rr) = (s.row(q).to_vec(), r.row(q).to_vec());
            if let Some(ap) = brute_ap(&sr, &rr) {
                aps.push(ap);
            }
            nd += brute_ndcg(&sr, &rr);
        }
        let m = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        (m, nd / s.nrows() as f64)
    };
    let (m1, n1) = dir(s, r);
    let (m2, n2) = dir(&s.t().to_owned(), &r.t().to_owned());
    (m1, m2, n1, n2)
}

#[test]
fn criterion_05_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst_map: f64 = 0.0;
    let mut worst_ndcg: f64 = 0.0;
    for _ in 0..200 {
        let q = rng.random_range(1..=8);
        let c = rng.random_range(1..=8);
        // Coarse scores force ties; graded relevance exercises nDCG.
        let s = Mat::from_shape_fn((q, c), |_| rng.random_range(0..5) as f64 / 4.0);
        let r = Mat::from_shape_fn((q, c), |_| [0.0, 0.0, 0.5, 1.0][rng.random_range(0..4)]);
        let m = retrieval_map(&s, &r).unwrap();
        let n = retrieval_ndcg(&s, &r).unwrap();
        let (bm1, bm2, bn1, bn2) = brute_directional(&s, &r);
        worst_map = worst_map.max((m.v2t - bm1).abs()).max((m.t2v - bm2).abs());
        worst_ndcg = worst_ndcg.max((n.v2t - bn1).abs()).max((n.t2v - bn2).abs());
    }

    let same = ["C moves the red square left", "O flashes the blue disc"];
    let refs = vec![vec![same[0]], vec![same[1]]];
    let id = caption_metrics(&same, &refs, CiderVariant::Plain).unwrap();
    let identity_ok = id.bleu.iter().all(|b| (b - 1.0).abs() < 1e-12) && (id.rouge_l - 1.0).abs() < 1e-12;

    // Reference values come from tests/oracles/caption_oracle.py.
    let cands = ["C moves the red square left", "O flashes the blue disc twice", "C shakes the green wedge"];
    let refs = vec![
        vec!["C moves the red square to the left", "C slides the red block left"],
        vec!["O flashes the blue disc"],
        vec!["O shakes the green wedge", "the green wedge is shaken by C"],
    ];
    let got = caption_metrics(&cands, &refs, CiderVariant::Plain).unwrap();
    let cider_err = (got.cider - 0.59942140941071698).abs();

    let pass = worst_map < 1e-12 && worst_ndcg < 1e-12 && identity_ok && cider_err < 1e-6;
    report(
        5,
        pass,
        "metric oracles",
        &format!(
            "mAP max diff {worst_map:.1e}, nDCG max diff {worst_ndcg:.1e} over 200 instances; BLEU/ROUGE-L identity {identity_ok}; CIDEr {:.8} vs oracle (diff {cider_err:.1e})",
            got.cider
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- shared runs

struct SeedRun {
    seed: u64,
    reports: Vec<(Arm, MetricReport)>,
    checks: Vec<Check>,
}

struct Heavy {
    _root: tempfile::TempDir,
    runs: Vec<SeedRun>,
    runs_secs: f64,
    sweep: Vec<SweepRow>,
    sweep_secs: f64,
    sampling: Vec<AblationRow>,
    repeat_identical: Vec<(String, bool)>,
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

fn heavy() -> &'static Heavy {
    static HEAVY: OnceLock<Heavy> = OnceLock::new();
    HEAVY.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let base = ExperimentConfig::default();
        let seed_dir = |s: u64| root.path().join(format!("arms-s{s}"));

        let start = Instant::now();
        let runs: Vec<SeedRun> = SEEDS
            .iter()
            .map(|&seed| {
                let cfg = ExperimentConfig {
                    seed,
                    output_dir: Some(seed_dir(seed)),
                    ..base.clone()
                };
                let out = run_pipeline(&cfg).unwrap();
                SeedRun {
                    seed,
                    reports: out.reports,
                    checks: out.checks,
                }
            })
            .collect();
        let runs_secs = start.elapsed().as_secs_f64();

        // The full-data sweep runs share every stage with the four-arm runs.
        for &s in &SEEDS {
            copy_dir(&seed_dir(s), &root.path().join(format!("sweep/sweep-n1-s{s}")));
            for setting in ["nucleus", "beam"] {
                copy_dir(&seed_dir(s), &root.path().join(format!("sampling/sampling-{setting}-s{s}")));
            }
        }
        let start = Instant::now();
        let sweep_cfg = ExperimentConfig {
            output_dir: Some(root.path().join("sweep")),
            ..base.clone()
        };
        let sweep = run_semi_sup_sweep(&sweep_cfg, &[1, 2], &SEEDS).unwrap();
        let sweep_secs = start.elapsed().as_secs_f64();

        let sampling_cfg = ExperimentConfig {
            output_dir: Some(root.path().join("sampling")),
            ..base.clone()
        };
        let sampling = run_sampling_ablation(&sampling_cfg, &SEEDS).unwrap();

        let repeat = root.path().join("repeat-s0");
        run_pipeline(&ExperimentConfig {
            seed: 0,
            output_dir: Some(repeat.clone()),
            ..base
        })
        .unwrap();
        let repeat_identical = ["metrics/arms.csv", "metrics/arms.json"]
            .iter()
            .map(|rel| {
                let a = std::fs::read(seed_dir(0).join(rel)).unwrap();
                let b = std::fs::read(repeat.join(rel)).unwrap();
                (rel.to_string(), a == b)
            })
            .collect();

        Heavy {
            _root: root,
            runs,
            runs_secs,
            sweep,
            sweep_secs,
            sampling,
            repeat_identical,
        }
    })
}

fn arm_map(reports: &[(Arm, MetricReport)], arm: Arm) -> f64 {
    reports
        .iter()
        .find(|(a, _)| *a == arm)
        .and_then(|(_, r)| r.get("map_avg", "test"))
        .unwrap()
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_augmentation_helps_trend() {
    let h = heavy();
    let at = |fraction: f64, arm: Arm| {
        mean(h.sweep.iter().filter(|r| r.fraction == fraction && r.arm == arm).map(|r| r.map))
    };
    let rows_ok = h.sweep.len() == 2 * SEEDS.len() * 2;
    let (b1, l1) = (at(1.0, Arm::Baseline), at(1.0, Arm::All));
    let (b2, l2) = (at(0.5, Arm::Baseline), at(0.5, Arm::All));
    // The full-data points reuse the four-arm runs, so their time counts too.
    let secs = h.sweep_secs + h.runs_secs;
    let pass = rows_ok && l1 >= b1 && l2 > b2 && secs <= 30.0 * 60.0;
    let per_seed: Vec<String> = h
        .sweep
        .chunks(2)
        .map(|c| format!("f={:.1} s{}: {:.4}/{:.4}", c[0].fraction, c[0].seed, c[0].map, c[1].map))
        .collect();
    report(
        6,
        pass,
        "augmentation-helps trend",
        &format!(
            "mean mAP N=1 all {l1:.4} vs baseline {b1:.4}; N=2 all {l2:.4} vs baseline {b2:.4}; sweep {secs:.0}s; per seed baseline/all [{}]",
            per_seed.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_four_arm_rows() {
    let h = heavy();
    let mut layout_ok = true;
    for run in &h.runs {
        let csv = arms_csv(&run.reports);
        let arms: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        for arm in Arm::EVERY {
            layout_ok &= arms.contains(&arm.name());
        }
        layout_ok &= csv.starts_with("arm,metric,split,value,seed\n");
        layout_ok &= run.reports.iter().all(|(_, r)| r.rows.iter().all(|x| x.value.is_finite()));
    }
    let mean_of = |arm| mean(h.runs.iter().map(|r| arm_map(&r.reports, arm)));
    let (base, all) = (mean_of(Arm::Baseline), mean_of(Arm::All));
    let pass = layout_ok && all >= base;
    let per_seed: Vec<String> = h
        .runs
        .iter()
        .map(|r| {
            let m: Vec<String> = Arm::EVERY.iter().map(|&a| format!("{} {:.4}", a.name(), arm_map(&r.reports, a))).collect();
            format!("s{}: {}", r.seed, m.join(" "))
        })
        .collect();
    report(
        7,
        pass,
        "four-arm table",
        &format!("mean mAP all {all:.4} vs baseline {base:.4}; [{}]", per_seed.join("; ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_sampling_ablation() {
    let h = heavy();
    let by = |k: &str| mean(h.sampling.iter().filter(|r| r.setting == k).map(|r| r.map));
    let (nucleus, beam) = (by("nucleus"), by("beam"));
    let complete = h.sampling.len() == 2 * SEEDS.len() && h.sampling.iter().all(|r| r.map.is_finite());
    // The nucleus arm uses the default decoding and must match the four-arm runs.
    let consistent = h.runs.iter().all(|run| {
        let n = h.sampling.iter().find(|r| r.setting == "nucleus" && r.seed == run.seed).unwrap();
        n.map == arm_map(&run.reports, Arm::All)
    });
    let reproduced = nucleus >= beam;
    let per_seed: Vec<String> = h.sampling.iter().map(|r| format!("{} s{} {:.4}", r.setting, r.seed, r.map)).collect();
    let verdict = if reproduced {
        "nucleus >= beam reproduced".to_string()
    } else {
        format!("NOT REPRODUCED: beam beats nucleus by {:.4} mean mAP", beam - nucleus)
    };
    let pass = complete && consistent && reproduced;
    report(
        8,
        pass,
        "sampling ablation",
        &format!("mean mAP nucleus {nucleus:.4} vs beam {beam:.4}; {verdict}; [{}]", per_seed.join(", ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_determinism() {
    let h = heavy();
    let pass = h.repeat_identical.iter().all(|(_, same)| *same);
    let detail: Vec<String> = h.repeat_identical.iter().map(|(f, s)| format!("{f} identical: {s}")).collect();
    report(9, pass, "determinism", &detail.join(", "));
    assert!(pass);
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_frozen_language_model() {
    let mut base = lm(LmConfig::default(), 6);
    let grammar = Grammar::standard();
    let bodies = vidnarr_core::training::grammar_corpus(&grammar, &base.vocab).unwrap();
    pretrain_lm(
        &mut base,
        &bodies,
        &LmTrainConfig {
            epochs: 1,
            ..LmTrainConfig::default()
        },
    )
    .unwrap();
    let lm_hash = base.store.digest(|_, _| true);
    let narrator = Narrator::new(&base, NarratorConfig::default(), 7).unwrap();
    let before = narrator.store.frozen_digest();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let examples: Vec<CaptionExample> = bodies
        .iter()
        .take(120)
        .map(|b| CaptionExample {
            feats: std::sync::Arc::new(random_mat(&mut rng, (16, 32))),
            body: b.clone(),
        })
        .collect();
    let (held, train) = examples.split_at(20);
    let run = train_narrator(
        narrator,
        train,
        held,
        &NarratorTrainConfig {
            epochs: 2,
            ..NarratorTrainConfig::default()
        },
    )
    .unwrap();
    let after = run.narrator.store.frozen_digest();
    let gates_moved = run.narrator.gate_ids().iter().any(|&id| run.narrator.store.value(id)[[0, 0]] != 0.0);
    let direct = before == lm_hash && after == lm_hash;
    // The pipeline runs carry the same check for their own narrators.
    let pipeline = heavy_started()
        .then(|| heavy().runs.iter().all(|r| r.checks.iter().any(|c| c.name == "narrator-lm-frozen" && c.passed)));
    let pass = direct && pipeline != Some(false) && gates_moved;
    report(
        10,
        pass,
        "frozen-parameter immutability",
        &format!(
            "LM hash {}.. unchanged by narrator training: {direct}; gates trained: {gates_moved}; pipeline checks: {}",
            &lm_hash[..12],
            pipeline.map_or("skipped".to_string(), |p| p.to_string())
        ),
    );
    assert!(pass);
}

/// Whether the shared runs are part of this test invocation; a filtered run
/// of criterion 10 alone should not pay for them.
fn heavy_started() -> bool {
    std::env::args().skip(1).all(|a| a.starts_with('-') || !a.contains("criterion_10"))
}
