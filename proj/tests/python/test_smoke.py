"""End-to-end smoke test of the Python bindings at miniature scale."""

import math

import pytest

import neuronalloc as na


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    data = str(root / "data")
    pairs = [("en2copy", "identity_copy", 0), ("en2rev", "reversal", 0)]
    vocab_size = na.synthesize(
        data,
        pairs,
        vocab=12,
        min_len=3,
        max_len=6,
        train=120,
        dev=24,
        test=24,
        seed=7,
    )
    assert vocab_size == 3 + 2 + 12  # reserved + language tokens + content
    return {"root": root, "data": data, "pairs": ["en2copy", "en2rev"]}


@pytest.fixture(scope="module")
def pretrained(workspace):
    ckpt = str(workspace["root"] / "pretrain.ckpt")
    info = na.pretrain(
        workspace["data"],
        workspace["pairs"],
        ckpt,
        layers=1,
        d_model=16,
        heads=2,
        d_ffn=32,
        max_seq_len=16,
        dropout=0.0,
        steps=30,
        warmup=5,
        lr=3e-3,
        batch_tokens=64,
        eval_every=0,
        seed=3,
    )
    assert info["steps"] == 30
    return ckpt


def test_pretrain_is_deterministic(workspace, pretrained):
    again = str(workspace["root"] / "pretrain_again.ckpt")
    info = na.pretrain(
        workspace["data"],
        workspace["pairs"],
        again,
        layers=1,
        d_model=16,
        heads=2,
        d_ffn=32,
        max_seq_len=16,
        dropout=0.0,
        steps=30,
        warmup=5,
        lr=3e-3,
        batch_tokens=64,
        eval_every=0,
        seed=3,
    )
    with open(pretrained, "rb") as f1, open(again, "rb") as f2:
        assert f1.read() == f2.read()
    assert info["fingerprint"]


@pytest.fixture(scope="module")
def plan(workspace, pretrained):
    table = str(workspace["root"] / "imp.table")
    plan_path = str(workspace["root"] / "alloc.plan")
    na.score_importance(pretrained, workspace["data"], criterion="te", cap=0, out=table)
    info = na.allocate(table, rho=0.75, k=0.7, variant="pair", out=plan_path)
    assert info["general"] + info["specific"] == info["neurons"]
    assert 0 < info["general"] < info["neurons"]
    return plan_path


def test_plan_report_scores_are_fractions(plan):
    report = na.plan_report(plan)
    assert report["pairs"] == ["en2copy", "en2rev"]
    assert report["lscore"], "expected at least one LScore row"
    for row in report["lscore"]:
        assert 0.0 <= row["value"] <= 1.0
    for row in report["mscore"]:
        assert 0.0 <= row["value"] <= 1.0
    # Every pair's specific neurons cover each listed layer: summed over
    # pairs, a layer's assignment fractions total at least one.
    by_layer = {}
    for row in report["lscore"]:
        by_layer.setdefault((row["side"], row["layer"]), 0.0)
        by_layer[(row["side"], row["layer"])] += row["value"]
    for total in by_layer.values():
        assert total >= 1.0 - 1e-12


def test_finetune_and_translate(workspace, pretrained, plan):
    tuned = str(workspace["root"] / "tuned.ckpt")
    info = na.finetune(
        pretrained,
        plan,
        workspace["data"],
        tuned,
        steps=10,
        warmup=5,
        lr=1e-3,
        batch_tokens=64,
        eval_every=0,
        seed=4,
    )
    assert info["steps"] == 10
    out = na.translate(
        tuned, workspace["data"], "en2copy", split="test", plan=plan, beam=2, alpha=0.6
    )
    assert len(out["hypotheses"]) == len(out["references"]) == 24
    score = na.bleu(out["hypotheses"], out["references"])
    assert 0.0 <= score <= 100.0


def test_bleu_identity_and_disjoint():
    ref = [["a", "b", "c", "d", "e"], ["f", "g", "h", "i"]]
    assert na.bleu(ref, ref) == pytest.approx(100.0)
    hyp = [["x", "y", "z", "w", "v"], ["q", "r", "s", "t"]]
    assert na.bleu(hyp, ref) < 1.0


def test_erase_eval_reports_all_pairs(workspace, pretrained, plan):
    deltas = na.erase_eval(
        pretrained,
        plan,
        workspace["data"],
        target="general",
        fraction=0.5,
        seed=11,
        beam=1,
    )
    assert set(deltas) == set(workspace["pairs"])
    for before, after in deltas.values():
        assert math.isfinite(before) and math.isfinite(after)


def test_errors_map_to_python_exceptions(workspace):
    with pytest.raises(ValueError):
        na.synthesize(str(workspace["root"] / "bad"), [("en2copy", "warp", 0)])
