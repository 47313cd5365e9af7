"""Smoke test for the editlab_py extension.

Build and install first:
    pip install --no-build-isolation ./crates/py
Then run:
    python python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import editlab_py as el


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok   {msg}")


def main():
    check(abs(el.restoration_loss(math.e * 0.1, 0.1) + 1.0) < 1e-12, "restoration loss log ratio")
    check(el.sparsity_loss([[1.0, 0.0], [0.0, 1.0]]) == 0.5, "sparsity of half-pruned mask")
    kl = el.kl_loss([[1.0, 2.0, 3.0]], [[3.0, 2.0, 1.0]], 1.0)
    check(abs(kl - 1.1504207652088825) < 1e-12, "KL hand value")
    check(abs(el.combined_loss(0.0, 0.12, -5.0) - 0.02) < 1e-12, "sparsity hinge slope")

    s = el.signal_stats([0.12, 0.35, 0.28, 0.41, 0.19], [0.62, 0.55, 0.81, 0.47, 0.70])
    check(abs(s["cohens_d"] - 2.886936983152653) < 1e-9, "Cohen's d")
    check(abs(s["p_value"] - 0.001902753458010933) < 1e-9, "Welch p-value")

    cfg = json.loads(el.default_config())
    check(cfg["mask"]["gamma"] == 0.7, "default config")
    try:
        el.validate_config('{"mask": {"delta": -1}}')
        check(False, "negative margin rejected")
    except el.EditlabError as e:
        check("mask.delta" in str(e), "negative margin rejected with key path")

    corpus = el.Corpus.generate(json.dumps({"neutral_train_tokens": 2000, "neutral_eval_tokens": 300}))
    check(corpus.n_facts == 64, "corpus fact count")
    prompt = corpus.prompt(0)
    check(corpus.encode(corpus.decode(prompt)) == prompt, "vocabulary round trip")

    model = el.Model(json.dumps({"n_layers": 2, "d_model": 16, "n_heads": 2, "d_mlp": 32}))
    trained, report = model.pretrain(corpus, json.dumps({"steps": 20, "log_every": 10}))
    check(0.0 <= report["recall"] <= 1.0, "pretraining report")
    probs = trained.next_token_probs(prompt)
    check(abs(sum(probs) - 1.0) < 1e-9, "next-token distribution sums to one")
    trace = trained.decompose(prompt, 3, "raw-additive")
    check(trace["residue"] < 1e-5, "lens decomposition is additive")
    check(math.isfinite(trained.perplexity(corpus.neutral_eval)), "finite perplexity")

    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "m.bin")
        trained.save(path)
        back = el.Model.load(path)
        check(back.top1(prompt) == trained.top1(prompt), "checkpoint reload")
        out = str(Path(tmp) / "run")
        check(el.run_cli(["--quiet", "--out", out, "gen-corpus"]) == 0, "CLI gen-corpus")
        check((Path(out) / "manifest.json").exists(), "manifest written")
        check(el.run_cli(["--out", out, "no-such-command"]) == 1, "CLI usage error code")

    print("smoke test passed")


if __name__ == "__main__":
    main()
