//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use editlab::corpus::Corpus;
use editlab::editor::{estimate_key_covariance, rome_edit, EditContext, EditedLayerWeights, Ridge};
use editlab::evaluator::signal_stats;
use editlab::interventions::{apply_selection, prune, select, PruneCriterion, PruneMode, PruneSpec};
use editlab::lens::{decompose, Convention};
use editlab::maskforge::{
    build_samples, combined_loss, kl_loss, restoration_loss, sparsity_loss, LossComponents, MaskObjective,
    MaskSample, MaskTrainerConfig,
};
use editlab::nanomodel::{Intervention, TransformerModel};
use editlab::runner::pipeline::{EditRequests, EvalMetrics, MaskMetrics, MASK, MODEL, REQUESTS};
use editlab::runner::{run_cli, sha256_file, Pipeline, RunConfig, RunDir};

const DESK_CONFIG: &str = include_str!("../../../configs/desk.json");
const SEED: u64 = 7;
const REPETITIONS: u64 = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Two independent `reproduce --seed 7` runs of the desk configuration.
struct Fixture {
    _tmp: tempfile::TempDir,
    config_path: PathBuf,
    a: PathBuf,
    b: PathBuf,
    cfg: RunConfig,
}

impl Fixture {
    fn build() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config_path = tmp.path().join("desk.json");
        fs::write(&config_path, DESK_CONFIG).unwrap();
        let a = tmp.path().join("run_a");
        let b = tmp.path().join("run_b");
        for out in [&a, &b] {
            let code = run_cli([
                "editlab",
                "--quiet",
                "--config",
                config_path.to_str().unwrap(),
                "--seed",
                &SEED.to_string(),
                "--out",
                out.to_str().unwrap(),
                "reproduce",
            ]);
            assert_eq!(code, 0, "reproduce failed for {}", out.display());
        }
        let cfg = RunConfig::from_json(DESK_CONFIG).unwrap().with_seed(SEED);
        Self {
            _tmp: tmp,
            config_path,
            a,
            b,
            cfg,
        }
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_slice(&fs::read(self.a.join(rel)).unwrap()).unwrap()
    }

    fn typed<T: serde::de::DeserializeOwned>(&self, rel: &str) -> T {
        serde_json::from_slice(&fs::read(self.a.join(rel)).unwrap()).unwrap()
    }

    fn model(&self) -> TransformerModel {
        TransformerModel::load(&self.a.join(MODEL)).unwrap()
    }

    fn corpus(&self) -> Corpus {
        Corpus::load(&self.a.join("corpus/corpus.json")).unwrap()
    }

    fn requests(&self) -> EditRequests {
        self.typed(REQUESTS)
    }

    fn edit(&self, id: &str) -> EditedLayerWeights {
        EditedLayerWeights::load(&self.a.join(format!("edits/rome/{id}.bin"))).unwrap()
    }

    fn reproduce_seconds(&self) -> f64 {
        let log = self.json("manifest.json");
        log["runs"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["command"] == "reproduce")
            .unwrap()["wall_clock_seconds"]
            .as_f64()
            .unwrap()
    }
}

fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &to);
        } else {
            fs::copy(entry.path(), &to).unwrap();
        }
    }
}

fn criterion_1(fx: &Fixture) -> Outcome {
    let t0 = Instant::now();
    let model = fx.model();
    let corpus = fx.corpus();
    let reqs = fx.requests();
    let edits: Vec<EditedLayerWeights> = reqs.train[..3].iter().map(|r| fx.edit(&r.edit_id())).collect();
    let samples = build_samples(&model, &edits, &corpus.vocab, &corpus.neutral_train).unwrap();
    // A wide margin keeps the restoration hinge away from its kink.
    let cfg = MaskTrainerConfig {
        delta: 50.0,
        ..MaskTrainerConfig::default()
    };
    let layer = fx.cfg.editor.rome_layer;
    let obj = MaskObjective {
        model: &model,
        layer,
        cfg: &cfg,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = edits[0].edited.dim();
    let theta = Array2::from_shape_fn(dim, |_| 0.85 + 0.1 * (rng.random::<f64>() - 0.5));
    let batch: Vec<&MaskSample> = samples.iter().collect();
    let (tau, temp) = (2.0, 1.9);
    let grad = obj.evaluate(&theta, tau, temp, &batch, true).unwrap().grad.unwrap();
    let h = 1e-4;
    let n_coords = 120;
    let mut worst: f64 = 0.0;
    for _ in 0..n_coords {
        let (a, b) = (rng.random_range(0..dim.0), rng.random_range(0..dim.1));
        let mut tp = theta.clone();
        tp[[a, b]] += h;
        let mut tm = theta.clone();
        tm[[a, b]] -= h;
        let fp = obj.evaluate(&tp, tau, temp, &batch, false).unwrap().loss;
        let fm = obj.evaluate(&tm, tau, temp, &batch, false).unwrap().loss;
        let num = (fp - fm) / (2.0 * h);
        let an = grad[[a, b]];
        worst = worst.max((an - num).abs() / an.abs().max(num.abs()).max(1e-8));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} over {n_coords} coordinates in {secs:.1}s"),
    )
}

fn criterion_2(fx: &Fixture) -> Outcome {
    let model = fx.model();
    let v = model.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut raw, mut frozen): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let len = rng.random_range(1..=model.config.max_seq_len);
        let prompt: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
        let target = rng.random_range(0..v);
        raw = raw.max(decompose(&model, &prompt, target, Convention::RawAdditive).unwrap().residue());
        frozen = frozen.max(decompose(&model, &prompt, target, Convention::FrozenLn).unwrap().residue());
    }
    outcome(
        raw <= 1e-5 && frozen <= 1e-3,
        format!("max residue raw-additive {raw:.2e}, frozen-ln {frozen:.2e} over 100 prompts"),
    )
}

fn criterion_3(fx: &Fixture) -> Outcome {
    let model = fx.model();
    let corpus = fx.corpus();
    let reqs = fx.requests();
    let layer = fx.cfg.editor.rome_layer;
    let n = fx.cfg.editor.covariance_tokens.min(corpus.neutral_train.len());
    let cov = estimate_key_covariance(
        &model,
        layer,
        &corpus.neutral_train[..n],
        Ridge::MeanDiagonal(fx.cfg.editor.ridge_scale),
    )
    .unwrap();
    let ctx = EditContext {
        vocab: &corpus.vocab,
        templates: &corpus.templates,
    };
    let (mut worst_id, mut worst_rank): (f64, f64) = (0.0, 0.0);
    let mut accepted = 0;
    for r in &reqs.train {
        let Ok(e) = rome_edit(&model, r, &cov, ctx, &fx.cfg.editor.value) else {
            continue;
        };
        accepted += 1;
        worst_id = worst_id.max(e.identity_residual);
        let d = e.weights.delta();
        let m = DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| d[[i, j]]);
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        worst_rank = worst_rank.max(sv[1] / sv[0]);
    }
    outcome(
        accepted > 0 && worst_id <= 1e-4 && worst_rank <= 1e-6,
        format!(
            "{accepted}/{} accepted; max identity residual {worst_id:.2e}, max sigma2/sigma1 {worst_rank:.2e}",
            reqs.train.len()
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut errs = Vec::new();
    let e = std::f64::consts::E;
    errs.push((restoration_loss(0.3, 0.3).unwrap() - 0.0).abs());
    errs.push((restoration_loss(e * 0.1, 0.1).unwrap() + 1.0).abs());
    errs.push((restoration_loss(e.powi(3) * 0.01, 0.01).unwrap() + 3.0).abs());
    errs.push((restoration_loss(0.2, 0.5).unwrap() - 0.9162907318741551).abs());
    errs.push((sparsity_loss(Array2::ones((3, 4)).view()) - 0.0).abs());
    errs.push((sparsity_loss(Array2::zeros((3, 4)).view()) - 1.0).abs());
    errs.push((sparsity_loss(array![[1.0, 0.0], [0.0, 1.0]].view()) - 0.5).abs());
    errs.push((sparsity_loss(array![[0.9, 0.2], [0.5, 1.0]].view()) - 0.35).abs());
    let a = array![[1.0, 2.0, 3.0]];
    let b = array![[3.0, 2.0, 1.0]];
    errs.push((kl_loss(a.view(), b.view(), 1.0).unwrap() - 1.1504207652088825).abs());
    errs.push((kl_loss(a.view(), b.view(), 2.0).unwrap() - 0.32015666782980645).abs());
    let a2 = array![[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]];
    let b2 = array![[3.0, 2.0, 1.0], [0.0, 0.0, 0.0]];
    errs.push((kl_loss(a2.view(), b2.view(), 2.0).unwrap() - 0.24222011251251507).abs());
    errs.push(kl_loss(a.view(), a.view(), 1.3).unwrap().abs());
    let cfg = MaskTrainerConfig::default();
    let c = |kl, sparsity, restoration| LossComponents {
        kl,
        sparsity,
        restoration,
    };
    errs.push((combined_loss(&c(0.2, 0.05, -5.0), &cfg) - 3.26 * 0.2).abs());
    errs.push((combined_loss(&c(0.0, 0.05, -3.0), &cfg) - 0.0).abs());
    errs.push((combined_loss(&c(0.0, 0.12, -5.0), &cfg) - 0.02).abs());
    errs.push((combined_loss(&c(0.2, 0.12, -2.5), &cfg) - 1.172).abs());
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(worst <= 1e-9, format!("{} hand values, max abs error {worst:.2e}", errs.len()))
}

fn criterion_5(fx: &Fixture) -> Outcome {
    let reqs = fx.requests();
    let mut ok = true;
    let mut checked = 0;
    for r in &reqs.train[..5] {
        let e = fx.edit(&r.edit_id());
        for criterion in [
            PruneCriterion::UnstructuredDelta,
            PruneCriterion::UnstructuredEdited,
            PruneCriterion::StructuredColumnNorm,
        ] {
            for mode in [PruneMode::Zero, PruneMode::Original] {
                let spec = |pct| PruneSpec { criterion, pct, mode };
                ok &= prune(&e, &spec(0.0), None).unwrap() == e.edited;
                if mode == PruneMode::Original {
                    ok &= prune(&e, &spec(1.0), None).unwrap() == e.original;
                }
                let sel = select(&e, criterion, 0.1, None).unwrap();
                let once = apply_selection(&e, &sel, mode).unwrap();
                let again = EditedLayerWeights::new(e.layer, e.original.clone(), once.clone(), vec![]).unwrap();
                ok &= apply_selection(&again, &sel, mode).unwrap() == once;
                checked += 1;
            }
        }
    }
    outcome(ok, format!("{checked} edit/criterion/mode combinations bit-exact"))
}

fn criterion_6(fx: &Fixture) -> Outcome {
    let pre = fx.json("metrics/pretrain.json");
    let corpus = fx.json("metrics/corpus.json");
    let rome = fx.json("metrics/edit_rome.json");
    let recall = pre["recall"].as_f64().unwrap();
    let facts = corpus["facts"].as_u64().unwrap();
    let success = rome["success_by_group"]["train"].as_f64().unwrap();
    let secs = fx.reproduce_seconds();
    outcome(
        recall == 1.0 && facts >= 50 && success >= 0.9 && secs < 300.0,
        format!(
            "recall {recall} over {facts} facts; edit success {success:.2} (edited-model RSR {:.2}); full run {secs:.0}s",
            1.0 - success
        ),
    )
}

struct MaskRun {
    train_rsr: f64,
    test_rsr: f64,
    pruned: f64,
    ppl_me: f64,
    ppl_mp: f64,
}

impl MaskRun {
    fn passes_7(&self) -> bool {
        self.train_rsr >= 0.7 && self.test_rsr >= 0.5 && self.pruned <= 0.15
    }
}

fn mask_run(mask: &MaskMetrics, eval: &EvalMetrics) -> MaskRun {
    MaskRun {
        train_rsr: eval.train_rsr,
        test_rsr: eval.test_rsr,
        pruned: mask.shared.pruned_fraction,
        ppl_me: eval.perplexity.ppl_me,
        ppl_mp: eval.perplexity.ppl_mp,
    }
}

fn criterion_7(fx: &Fixture) -> Outcome {
    let mask: MaskMetrics = fx.typed("metrics/mask.json");
    let eval: EvalMetrics = fx.typed("metrics/evaluate.json");
    let run = mask_run(&mask, &eval);
    let secs = fx.reproduce_seconds();
    let disjoint = eval
        .disjoint_test_rsr
        .map(|v| format!("{v:.2}"))
        .unwrap_or_else(|| "n/a".into());
    let sparsest = mask
        .shared
        .sweep
        .iter()
        .min_by(|a, b| a.pruned_fraction.total_cmp(&b.pruned_fraction))
        .map(|p| format!("gamma {} prunes {:.3} at train RSR {:.2}", p.gamma, p.pruned_fraction, p.rsr))
        .unwrap_or_default();
    outcome(
        run.passes_7() && secs < 600.0 && fx.cfg.mask.s_max == 0.10,
        format!(
            "train RSR {:.2}, held-out RSR {:.2}, pruned fraction {:.3} at gamma {} (sparsest sweep point: {sparsest}); \
             relation-disjoint RSR {disjoint} (reported only); full run {secs:.0}s",
            run.train_rsr, run.test_rsr, run.pruned, mask.shared.gamma
        ),
    )
}

fn brute_force_perplexity(model: &TransformerModel, stream: &[usize]) -> f64 {
    let stride = model.config.max_seq_len - 1;
    let mut nll = 0.0;
    for t in 1..stream.len() {
        let start = (t - 1) / stride * stride;
        let p = model.next_token_probs(&stream[start..t], &Intervention::none()).unwrap();
        nll -= p[stream[t]].ln();
    }
    (nll / (stream.len() - 1) as f64).exp()
}

fn criterion_8(fx: &Fixture) -> Outcome {
    let model = fx.model();
    let corpus = fx.corpus();
    let stream = &corpus.neutral_eval[..500];
    let fast = model.perplexity(stream).unwrap();
    let brute = brute_force_perplexity(&model, stream);
    let oracle_rel = (fast - brute).abs() / brute;

    let mut runs = vec![mask_run(&fx.typed("metrics/mask.json"), &fx.typed("metrics/evaluate.json"))];
    let tmp = tempfile::tempdir().unwrap();
    for k in 1..REPETITIONS {
        let dir = tmp.path().join(format!("rep{k}"));
        for sub in ["corpus", "checkpoints", "edits", "masks"] {
            copy_dir(&fx.a.join(sub), &dir.join(sub));
        }
        let mut cfg = fx.cfg.clone();
        cfg.mask.seed = SEED + k;
        let mut p = Pipeline::new(cfg, RunDir::create(&dir).unwrap(), true);
        let mask = p.train_mask_with(false).unwrap();
        let eval = p.evaluate().unwrap();
        runs.push(mask_run(&mask, &eval));
    }
    let eligible: Vec<&MaskRun> = runs.iter().filter(|r| r.passes_7()).collect();
    let recovered = eligible.iter().filter(|r| r.ppl_mp <= r.ppl_me).count();
    let recovered_all = runs.iter().filter(|r| r.ppl_mp <= r.ppl_me).count();
    let ppl: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.ppl_mp, r.ppl_me))
        .collect();
    outcome(
        recovered >= 7 && oracle_rel <= 1e-6,
        format!(
            "{} of {REPETITIONS} mask seeds pass criterion 7; PPL_Mp <= PPL_Me in {recovered} of those \
             ({recovered_all} of all {REPETITIONS}); PPL_Mp/PPL_Me per seed [{}]; perplexity vs brute-force NLL rel error {oracle_rel:.1e}",
            eligible.len(),
            ppl.join(", ")
        ),
    )
}

fn criterion_9(fx: &Fixture) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("block");
    for sub in ["corpus", "checkpoints", "edits", "masks"] {
        copy_dir(&fx.a.join(sub), &dir.join(sub));
    }
    let t0 = Instant::now();
    let code = run_cli([
        "editlab",
        "--quiet",
        "--config",
        fx.config_path.to_str().unwrap(),
        "--seed",
        &SEED.to_string(),
        "--out",
        dir.to_str().unwrap(),
        "block-edit",
    ]);
    let secs = t0.elapsed().as_secs_f64();
    if code != 0 {
        return outcome(false, format!("block-edit exited with {code}"));
    }
    let report: Value = serde_json::from_slice(&fs::read(dir.join("metrics/blocking.json")).unwrap()).unwrap();
    let total = &report["total"];
    let n = total["n"].as_f64().unwrap();
    let standard = total["standard_success"].as_f64().unwrap() / n;
    let blocked = total["blocked_success"].as_f64().unwrap() / n;
    let same = fs::read(dir.join("metrics/blocking.json")).unwrap() == fs::read(fx.a.join("metrics/blocking.json")).unwrap();
    outcome(
        standard - blocked >= 0.30 && secs < 300.0,
        format!(
            "success {:.0}% -> {:.0}% over {n} requests ({:+.0} points) in {secs:.1}s; matches reproduce output: {same}",
            100.0 * standard,
            100.0 * blocked,
            100.0 * (blocked - standard)
        ),
    )
}

fn criterion_10(fx: &Fixture) -> Outcome {
    let d: Value = fx.json("analysis/decompose.json");
    let ratio = d["amplification"]["ratio"].as_f64().unwrap_or(f64::INFINITY);
    let att = &d["downstream_attention_o_star"];
    let (m, me, mp) = (
        att["original"].as_f64().unwrap(),
        att["edited"].as_f64().unwrap(),
        att["pruned"].as_f64().unwrap(),
    );
    outcome(
        ratio > 1.0 && me > m && (mp - m).abs() < (me - m).abs(),
        format!("amplification {ratio:.1}x; downstream attention to o*: M {m:.3}, M_e {me:.3}, M_p {mp:.3}"),
    )
}

fn criterion_11(fx: &Fixture) -> Outcome {
    let mut files: Vec<String> = fs::read_dir(fx.a.join("metrics"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| {
            let rel = format!("metrics/{f}");
            fs::read(fx.a.join(&rel)).ok() != fs::read(fx.b.join(&rel)).ok()
        })
        .collect();
    let (ca, _) = sha256_file(&fx.a.join(MASK)).unwrap();
    let (cb, _) = sha256_file(&fx.b.join(MASK)).unwrap();
    let ma: MaskMetrics = fx.typed("metrics/mask.json");
    let mb: MaskMetrics =
        serde_json::from_slice(&fs::read(fx.b.join("metrics/mask.json")).unwrap()).unwrap();
    outcome(
        differing.is_empty() && ca == cb && ma.shared.checksum == mb.shared.checksum,
        format!(
            "{} metrics files compared, {} differ; mask checksum {}",
            files.len(),
            differing.len(),
            &ma.shared.checksum[..16]
        ),
    )
}

fn criterion_12() -> Outcome {
    let s = signal_stats(&[0.12, 0.35, 0.28, 0.41, 0.19], &[0.62, 0.55, 0.81, 0.47, 0.70]).unwrap();
    let errs = [
        (s.cohens_d - 2.886936983152653).abs(),
        (s.p_value - 0.001902753458010933).abs(),
        (s.t - 4.564648164068766).abs(),
        (s.df - 7.89422243080282).abs(),
    ];
    let s2 = signal_stats(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 2.5, 2.9, 3.1, 10.0]).unwrap();
    let worst = errs
        .iter()
        .copied()
        .chain([(s2.p_value - 0.530094590955462).abs()])
        .fold(0.0, f64::max);
    outcome(
        worst <= 1e-9,
        format!("d {:.6}, Welch p {:.6}, max abs error {worst:.1e}", s.cohens_d, s.p_value),
    )
}

fn main() {
    let mut failures = Vec::new();
    let mut report = |id: u32, name: &str, o: Outcome| {
        println!("{} criterion {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failures.push(id);
        }
    };
    report(4, "loss-term oracles", criterion_4());
    report(12, "statistics oracle", criterion_12());
    let fx = Fixture::build();
    report(1, "mask gradient", criterion_1(&fx));
    report(2, "decomposition additivity", criterion_2(&fx));
    report(3, "closed-form edit identity", criterion_3(&fx));
    report(5, "pruning-mode identities", criterion_5(&fx));
    report(6, "edit efficacy", criterion_6(&fx));
    report(7, "shared-mask reversal", criterion_7(&fx));
    report(8, "perplexity recovery", criterion_8(&fx));
    report(9, "edit blocking", criterion_9(&fx));
    report(10, "overattention signature", criterion_10(&fx));
    report(11, "determinism", criterion_11(&fx));
    if failures.is_empty() {
        println!("acceptance: all 12 criteria pass");
    } else {
        println!("acceptance: failing criteria {failures:?}");
        std::process::exit(1);
    }
}
