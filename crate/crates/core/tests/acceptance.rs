//! Acceptance run: one pass/fail line per criterion, nonzero exit if any fails.
//!
//! The MNIST criteria need `data/mnist` (see `scripts/fetch-mnist.sh`) and are
//! reported as skipped without it. Set `GDML_SKIP_MNIST=1` to skip them anyway.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use guided_dml::data::{blobs, BlobSpec, Dataset, LabeledSample};
use guided_dml::embedding::EmbeddingSet;
use guided_dml::gemini::{gemini_loss, gemini_loss_constrained, train_from, GeminiConfig, GeminiModel, Repel};
use guided_dml::metrics::{evaluate, NmiSource};
use guided_dml::numerics::{Dense, Mlp, Tape, Tensor};
use guided_dml::pipeline::{cmd_baseline_triplet, cmd_run_all, DataConfig, DataSource, PipelineConfig};
use guided_dml::seed;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// ---------------------------------------------------------------- 1

fn random_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Tensor {
    let v = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![n, d], v).unwrap()
}

struct Instance {
    model: GeminiModel,
    k: usize,
    l: usize,
    xa: Tensor,
    xp: Tensor,
    xn: Tensor,
}

impl Instance {
    fn loss(&self, model: &GeminiModel) -> f64 {
        let tape = Tape::new();
        let vars = model.bind(&tape, &[0, 1, 2]);
        let xa = tape.constant(self.xa.clone());
        let xp = tape.constant(self.xp.clone());
        let xn = tape.constant(self.xn.clone());
        let repel = Repel {
            negatives: Some((self.l, xn)),
            vectors: &[],
        };
        let out = model.batch_loss(&tape, &vars, self.k, xa, xp, repel).unwrap();
        tape.scalar(out.loss)
    }

    fn autodiff(&self) -> Vec<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.model.bind(&tape, &[0, 1, 2]);
        let xa = tape.constant(self.xa.clone());
        let xp = tape.constant(self.xp.clone());
        let xn = tape.constant(self.xn.clone());
        let repel = Repel {
            negatives: Some((self.l, xn)),
            vectors: &[],
        };
        let out = self.model.batch_loss(&tape, &vars, self.k, xa, xp, repel).unwrap();
        let grads = tape.backward(out.loss).unwrap();
        vars.iter()
            .zip(self.model.parameters())
            .map(|(v, p)| {
                let v = v.expect("all streams bound");
                grads.get(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
            })
            .collect()
    }
}

fn gradient_check() -> Outcome {
    const STEP: f64 = 1e-5;
    let start = Instant::now();
    let (mut checked, mut kinks, mut worst) = (0usize, 0usize, 0.0f64);
    let mut gating_ok = true;
    for case in 0..50u64 {
        let mut rng = seed::rng(case, seed::stream::DIAGNOSTIC, 0);
        let beta = rng.random_range(0.05..0.95);
        let margin = rng.random_range(0.5..3.0);
        let model = GeminiModel::new(&mut rng, 8, 3, &[6, 5], &[4, 2], beta, margin).unwrap();
        let k = rng.random_range(0..3);
        let l = (k + rng.random_range(1..3)) % 3;
        let n = rng.random_range(2..6);
        let inst = Instance {
            model,
            k,
            l,
            xa: random_rows(&mut rng, n, 8),
            xp: random_rows(&mut rng, n, 8),
            xn: random_rows(&mut rng, n, 8),
        };
        let analytic = inst.autodiff();
        let idle = 3 - k - l;
        for i in inst.model.stream_param_range(idle) {
            gating_ok &= analytic[i].iter().all(|&g| g == 0.0);
        }
        let f0 = inst.loss(&inst.model);
        for (pi, grad) in analytic.iter().enumerate() {
            for (j, &a) in grad.iter().enumerate() {
                let mut m = inst.model.clone();
                m.parameters_mut()[pi].values_mut()[j] += STEP;
                let fp = inst.loss(&m);
                m.parameters_mut()[pi].values_mut()[j] -= 2.0 * STEP;
                let fm = inst.loss(&m);
                // A kink inside the stencil shows up as unequal one-sided slopes.
                if ((fp - f0) / STEP - (f0 - fm) / STEP).abs() > 1e-3 {
                    kinks += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * STEP);
                let scale = a.abs().max(numeric.abs());
                let err = if scale < 1e-7 { 0.0 } else { (a - numeric).abs() / scale };
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && gating_ok && secs < 60.0,
        format!("{checked} entries, {kinks} kink-adjacent skipped, max rel err {worst:.2e}, gating {gating_ok}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

/// Identity streams on R^2 and a head that scales the first coordinate by 1/3.
fn toy(beta: f64, margin: f64) -> GeminiModel {
    let stream = Mlp {
        layers: vec![Dense::identity(2)],
        relu_output: false,
    };
    let head = Mlp {
        layers: vec![Dense {
            weight: Tensor::new(vec![2, 2], vec![1.0 / 3.0, 0.0, 0.0, 0.0]).unwrap(),
            bias: Tensor::zeros(vec![2]),
        }],
        relu_output: false,
    };
    GeminiModel::from_parts(vec![stream.clone(), stream], head, beta, margin).unwrap()
}

fn s(features: &[f64], label: usize) -> LabeledSample<'_> {
    LabeledSample { features, label }
}

fn loss_oracles() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if !close(got, want) {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };
    let half = toy(0.5, 1.0);
    let o = [0.0, 0.0];
    let p = [3.0, 4.0];

    let t = gemini_loss(&half, s(&o, 0), s(&p, 0), s(&[9.0, 0.0], 1)).unwrap();
    expect("intra", t.intra, 2.5);
    expect("M", t.margin_m, 2.0);
    expect("inter", t.inter, 0.0);
    expect("total", t.total, 2.5);

    let t = gemini_loss(&half, s(&o, 0), s(&p, 0), s(&[4.5, 0.0], 1)).unwrap();
    expect("inter near negative", t.inter, 0.5 * (2.0 - 1.5));
    expect("total near negative", t.total, 2.75);

    let t = gemini_loss(&half, s(&o, 0), s(&o, 0), s(&[6.0, 0.0], 1)).unwrap();
    expect("identical pair, far negative", t.total, 0.0);

    for (beta, margin) in [(0.5, 1.0), (0.005, 3.0), (0.9, 0.25)] {
        let one = [1.0, 1.0];
        let t = gemini_loss(&toy(beta, margin), s(&one, 0), s(&one, 0), s(&one, 1)).unwrap();
        expect("single point", t.total, (1.0 - beta) * margin);
    }

    let t = gemini_loss_constrained(&half, s(&o, 0), s(&o, 0), &[5.0, 0.0]).unwrap();
    expect("far constraint", t.inter, 0.0);
    let t = gemini_loss_constrained(&half, s(&o, 0), s(&p, 0), &[0.0, 0.0]).unwrap();
    expect("constraint at anchor", t.inter, 0.5 * 2.0);
    let t = gemini_loss_constrained(&toy(0.0, 1.0), s(&o, 0), s(&[6.0, 0.0], 0), &[1.0, 0.0]).unwrap();
    expect("constrained M", t.margin_m, 3.0);
    expect("constrained inter", t.inter, 2.0);
    expect("constrained total", t.total, 2.0);

    // A constraint equal to g(x-) must give the same loss as that negative.
    let neg = [4.5, 0.0];
    let a = gemini_loss(&half, s(&o, 0), s(&p, 0), s(&neg, 1)).unwrap();
    let b = gemini_loss_constrained(&half, s(&o, 0), s(&p, 0), &[1.5, 0.0]).unwrap();
    expect("constraint matches negative", b.total, a.total);

    let rejected = gemini_loss(&half, s(&o, 0), s(&p, 0), s(&neg, 0)).is_err()
        && gemini_loss_constrained(&half, s(&o, 0), s(&p, 0), &[1.0, 0.0, 0.0]).is_err();
    if !rejected {
        failures.push("invalid triplets accepted".into());
    }
    check(failures.is_empty(), if failures.is_empty() { "all hand values within 1e-12".into() } else { failures.join("; ") })
}

// ---------------------------------------------------------------- 3

struct Oracle {
    recall: BTreeMap<usize, f64>,
    f1: f64,
    nmi: f64,
    rp: Option<f64>,
    map: Option<f64>,
}

fn brute_force(points: &[Vec<f64>], labels: &[usize], ks: &[usize]) -> Oracle {
    let n = points.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let d: Vec<Vec<f64>> = points.iter().map(|a| points.iter().map(|b| dist(a, b)).collect()).collect();
    let rankings: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| d[i][a].partial_cmp(&d[i][b]).unwrap().then(a.cmp(&b)));
            others
        })
        .collect();
    let recall = ks
        .iter()
        .map(|&k| {
            let hits = (0..n).filter(|&i| rankings[i][..k].iter().any(|&j| labels[j] == labels[i])).count();
            (k, hits as f64 / n as f64)
        })
        .collect();
    let pred: Vec<usize> = (0..n).map(|i| labels[rankings[i][0]]).collect();

    let classes: Vec<usize> = {
        let mut c: Vec<usize> = labels.iter().chain(&pred).copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for &c in &classes {
        tp += (0..n).filter(|&i| pred[i] == c && labels[i] == c).count();
        fp += (0..n).filter(|&i| pred[i] == c && labels[i] != c).count();
        fneg += (0..n).filter(|&i| pred[i] != c && labels[i] == c).count();
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let rec = tp as f64 / (tp + fneg) as f64;
    let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * rec / (precision + rec) };

    let nf = n as f64;
    let count = |f: &dyn Fn(usize) -> bool| (0..n).filter(|&i| f(i)).count() as f64 / nf;
    let h = |ps: Vec<f64>| -ps.into_iter().filter(|&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>();
    let ht = h(classes.iter().map(|&c| count(&|i| labels[i] == c)).collect());
    let hp = h(classes.iter().map(|&c| count(&|i| pred[i] == c)).collect());
    let mut mi = 0.0;
    for &a in &classes {
        for &b in &classes {
            let pj = count(&|i| labels[i] == a && pred[i] == b);
            if pj > 0.0 {
                mi += pj * (pj / (count(&|i| labels[i] == a) * count(&|i| pred[i] == b))).log2();
            }
        }
    }
    let nmi = if ht == 0.0 || hp == 0.0 {
        if ht == hp {
            1.0
        } else {
            0.0
        }
    } else {
        mi / (ht * hp).sqrt()
    };

    let size = |c: usize| labels.iter().filter(|&&l| l == c).count();
    let (rp, map) = if labels.iter().all(|&c| size(c) >= 2) {
        let (mut rp, mut map) = (0.0, 0.0);
        for i in 0..n {
            let r = size(labels[i]) - 1;
            let rel: Vec<bool> = rankings[i][..r].iter().map(|&j| labels[j] == labels[i]).collect();
            rp += rel.iter().filter(|&&x| x).count() as f64 / r as f64;
            let mut ap = 0.0;
            for pos in 0..r {
                if rel[pos] {
                    let hits_so_far = rel[..=pos].iter().filter(|&&x| x).count();
                    ap += hits_so_far as f64 / (pos + 1) as f64;
                }
            }
            map += ap / r as f64;
        }
        (Some(rp / nf), Some(map / nf))
    } else {
        (None, None)
    };
    Oracle {
        recall,
        f1,
        nmi,
        rp,
        map,
    }
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    for case in 0..100u64 {
        let mut rng = seed::rng(case, seed::stream::DIAGNOSTIC, 1);
        let n = rng.random_range(4..=200);
        let classes = rng.random_range(2..=6.min(n / 2));
        let dim = rng.random_range(1..=4);
        // Coarse integer grids force exact distance ties.
        let grid = case % 3 == 0;
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| if grid { rng.random_range(0..4) as f64 } else { rng.random_range(-1.0..1.0) })
                    .collect()
            })
            .collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        if case % 10 == 7 {
            labels[0] = classes;
        }
        let ks: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&k| k < n).collect();
        let e = EmbeddingSet::from_rows(&points, labels.clone()).unwrap();
        let got = evaluate(&e, &ks, NmiSource::Knn, 0).unwrap();
        let want = brute_force(&points, &labels, &ks);
        // Ranking-derived values must match bit for bit; F1 and NMI go through
        // different float formulas in the oracle.
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        let ok = got.recall_at_k == want.recall
            && near(got.f1, want.f1)
            && near(got.nmi, want.nmi)
            && got.r_precision.is_some() == want.rp.is_some()
            && got.r_precision.zip(want.rp).is_none_or(|(a, b)| a == b)
            && got.map_at_r.zip(want.map).is_none_or(|(a, b)| a == b);
        if !ok {
            mismatches.push(case);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches.is_empty() && secs < 60.0,
        format!("100 sets, mismatches {mismatches:?}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 4

fn mean_triplet_loss(model: &GeminiModel, ds: &Dataset, triplets: &[(usize, usize, usize)]) -> f64 {
    let total: f64 = triplets
        .iter()
        .map(|&(a, p, n)| gemini_loss(model, ds.sample(a), ds.sample(p), ds.sample(n)).unwrap().total)
        .sum();
    total / triplets.len() as f64
}

fn anti_collapse() -> Outcome {
    let spec = BlobSpec {
        classes: 3,
        per_class: 40,
        dim: 8,
        spread: 0.05,
        seed: 3,
    };
    let ds = blobs(&spec, 0).unwrap();
    let cfg = GeminiConfig {
        epochs: 1,
        ..GeminiConfig::default()
    };
    let mut model = cfg.build_model(ds.dim(), ds.class_count(), 0).unwrap();
    model.collapse_outputs();
    let z = model.embed_dataset(&ds).unwrap();
    let coincide = (0..z.len()).all(|i| z.row(i) == z.row(0));

    let triplets: Vec<(usize, usize, usize)> = cfg
        .sampler(&ds, 99)
        .epoch(&ds, 0)
        .unwrap()
        .iter()
        .flat_map(|b| (0..b.len()).map(move |i| (b.anchors[i], b.positives[i], b.negatives[i])))
        .collect();
    let floor = (1.0 - cfg.beta) * cfg.margin;
    let before = mean_triplet_loss(&model, &ds, &triplets);
    let run = train_from(model, &ds, &cfg, 0).unwrap();
    let after = mean_triplet_loss(&run.model, &ds, &triplets);
    check(
        coincide && (before - floor).abs() <= 1e-9 && after < before,
        format!("coincident {coincide}, loss {before:.12} (floor {floor}), after one epoch {after:.6}"),
    )
}

// ---------------------------------------------------------------- 5-7

fn mnist_dir() -> Option<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let files = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
    files.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}

fn mnist_config(dir: &Path, out: &Path, seed: u64) -> PipelineConfig {
    PipelineConfig {
        data: DataConfig {
            source: DataSource::Idx {
                train_images: dir.join("train-images-idx3-ubyte"),
                train_labels: dir.join("train-labels-idx1-ubyte"),
                test_images: dir.join("t10k-images-idx3-ubyte"),
                test_labels: dir.join("t10k-labels-idx1-ubyte"),
            },
            train_per_class: Some(1000),
            test_per_class: Some(200),
        },
        gemini: Default::default(),
        distill: Default::default(),
        baseline: Default::default(),
        metrics: Default::default(),
        seed,
        out_dir: out.to_path_buf(),
    }
}

struct SeedResult {
    seed: u64,
    recall: f64,
    f1: f64,
    baseline: f64,
    guided_time: Duration,
}

fn mnist_runs(dir: &Path) -> Vec<SeedResult> {
    (0..3)
        .map(|seed| {
            let tmp = tempfile::tempdir().unwrap();
            let cfg = mnist_config(dir, tmp.path(), seed);
            let start = Instant::now();
            let guided = cmd_run_all(&cfg, false).unwrap_or_else(|e| panic!("{e}"));
            let guided_time = start.elapsed();
            let test = &guided.metrics["test"];
            let base = cmd_baseline_triplet(&cfg).unwrap_or_else(|e| panic!("{e}"));
            let r = SeedResult {
                seed,
                recall: test.recall_at_1().unwrap(),
                f1: test.f1,
                baseline: base.metrics["baseline_test"].recall_at_1().unwrap(),
                guided_time,
            };
            println!(
                "    seed {}: guided R@1 {:.4} F1 {:.4} ({:.0}s), triplet baseline R@1 {:.4}",
                r.seed,
                r.recall,
                r.f1,
                r.guided_time.as_secs_f64(),
                r.baseline
            );
            r
        })
        .collect()
}

fn pipeline_result(runs: &[SeedResult]) -> Outcome {
    let ok = runs.iter().all(|r| r.recall >= 0.90 && r.f1 >= 0.90 && r.guided_time <= Duration::from_secs(1800));
    let detail: Vec<String> = runs.iter().map(|r| format!("{:.4}/{:.4}", r.recall, r.f1)).collect();
    check(ok, format!("test R@1/F1 per seed {}", detail.join(", ")))
}

fn comparative(runs: &[SeedResult]) -> Outcome {
    let ok = runs.iter().all(|r| r.recall >= r.baseline - 0.01);
    let detail: Vec<String> = runs.iter().map(|r| format!("{:+.4}", r.recall - r.baseline)).collect();
    check(ok, format!("guided minus baseline R@1 per seed {}", detail.join(", ")))
}

fn stability(runs: &[SeedResult]) -> Outcome {
    let n = runs.len() as f64;
    let mean = runs.iter().map(|r| r.recall).sum::<f64>() / n;
    let var = runs.iter().map(|r| (r.recall - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    check(sd <= 0.02, format!("R@1 mean {mean:.4}, sample std {:.2} pp", sd * 100.0))
}

// ---------------------------------------------------------------- 8

fn blob_config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        data: DataConfig {
            source: DataSource::Blobs(BlobSpec {
                classes: 3,
                per_class: 30,
                dim: 8,
                spread: 0.05,
                seed: 1,
            }),
            train_per_class: None,
            test_per_class: None,
        },
        gemini: GeminiConfig {
            epochs: 5,
            ..Default::default()
        },
        distill: Default::default(),
        baseline: Default::default(),
        metrics: Default::default(),
        seed: 11,
        out_dir: out.to_path_buf(),
    }
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = cmd_run_all(&blob_config(a.path()), false).unwrap();
    let mb = cmd_run_all(&blob_config(b.path()), false).unwrap();
    let files = ["z_hat_train.csv", "z_train.csv", "z_test.csv", "gemini.bin", "student.bin"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    let reports_equal = ma.metrics.len() == 3
        && ma.metrics.keys().eq(mb.metrics.keys())
        && ma.metrics.iter().all(|(k, r)| r.to_json_untimed() == mb.metrics[k].to_json_untimed());
    let integrity = ma.verify(a.path()).is_ok() && mb.verify(b.path()).is_ok();
    check(
        differing.is_empty() && reports_equal && integrity,
        format!("differing files {differing:?}, reports equal {reports_equal}, manifests verify {integrity}"),
    )
}

fn main() -> ExitCode {
    let mut outcomes: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_check()),
        (2, "loss oracle", loss_oracles()),
        (3, "metric oracle equivalence", metric_oracle()),
        (4, "anti-collapse", anti_collapse()),
    ];
    let skip_mnist = std::env::var_os("GDML_SKIP_MNIST").is_some();
    match mnist_dir().filter(|_| !skip_mnist) {
        Some(dir) => {
            let runs = mnist_runs(&dir);
            outcomes.push((5, "MNIST-subset pipeline", pipeline_result(&runs)));
            outcomes.push((6, "guided vs triplet baseline", comparative(&runs)));
            outcomes.push((7, "seed stability", stability(&runs)));
        }
        None => {
            let why = if skip_mnist { "GDML_SKIP_MNIST set" } else { "data/mnist not found" };
            for (id, name) in [(5, "MNIST-subset pipeline"), (6, "guided vs triplet baseline"), (7, "seed stability")] {
                outcomes.push((id, name, Outcome::Skip(why.into())));
            }
        }
    }
    outcomes.push((8, "determinism", determinism()));

    let mut failed = 0;
    for (id, name, outcome) in &outcomes {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {id} [{tag}] {name}: {detail}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

