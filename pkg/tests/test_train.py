import json

import numpy as np
import pytest

from fewkp import diffcore as dc
from fewkp.diffcore import Tensor
from fewkp.synthgen import generate_dataset, load_dataset, stock_spec
from fewkp.train import (
    AdamState,
    NumericFailure,
    TrainConfig,
    adam_step,
    config_echo,
    evaluate_model,
    load_checkpoint,
    substream,
    train,
)


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    spec = stock_spec("biped-2d")
    spec.image_size = 32
    return generate_dataset(spec, 24, 100, tmp_path_factory.mktemp("ds") / "d", {"train": 16, "test": 8})


def small_cfg(ds, out, **kw):
    d = dict(dataset=str(ds), out=str(out), image_size=32, shots=4, iterations=3, checkpoint_every=2,
             batch_unlabeled=4, width_mult=0.25, decoder_width_mult=0.25, eval_batch=8)  # fmt: skip
    d.update(kw)
    return TrainConfig(**d)


# -------------------------------------------------------------------- adam


def test_adam_zero_grad_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    st = AdamState()
    for _ in range(3):
        adam_step({"p": p}, st)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    q = Tensor(np.ones(2), requires_grad=True)  # no grad at all: skipped
    adam_step({"q": q}, st)
    np.testing.assert_array_equal(q.data, 1.0)


def test_adam_first_step_hand_formula():
    p = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
    g = np.array([2.0, -0.01, 1e-12])
    p.grad = g.copy()
    adam_step({"p": p}, AdamState(), lr=1e-3, beta1=0.9, beta2=0.99, eps=1e-8)
    # m_hat = g, v_hat = g^2 after bias correction
    np.testing.assert_allclose(p.data, 0.5 - 1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_two_constant_steps_closed_form():
    p = Tensor(np.array([0.0]), requires_grad=True)
    st = AdamState()
    for _ in range(2):
        p.grad = np.array([3.0])
        adam_step({"p": p}, st, lr=0.1, beta1=0.9, beta2=0.99, eps=0.0)
    # with a constant gradient each step moves exactly lr * sign(g)
    np.testing.assert_allclose(p.data, [-0.2], rtol=1e-12)
    assert st.t == 2


# ---------------------------------------------------------------- rng/config


def test_substreams_are_distinct_and_reproducible():
    draws = {(n, i): substream(7, n, i).integers(2**62) for n in ("data", "mask", "transform") for i in (0, 1)}
    assert len(set(draws.values())) == len(draws)
    assert substream(7, "mask", 1).integers(2**62) == draws[("mask", 1)]
    assert substream(8, "mask", 1).integers(2**62) != draws[("mask", 1)]


def test_config_validation():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        TrainConfig(shots=0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    with pytest.raises(ValueError):
        TrainConfig(edge_variant="additive")
    assert TrainConfig().labeled_batch == 10 and TrainConfig(shots=40).labeled_batch == 16


def test_config_echo_origins():
    d = config_echo(TrainConfig(lr=2e-4), given={"lr"})
    o = d["_defaults"]
    assert o["lr"] == "user" and o["beta1"] == "published" and o["width_mult"] == "desk"
    assert o["iterations"].startswith("desk (published")
    assert TrainConfig.from_dict(d) == TrainConfig(lr=2e-4)


# ------------------------------------------------------------------- runs


def test_zero_iterations_emits_start_artifacts(small_ds, tmp_path):
    res = train(small_cfg(small_ds, tmp_path / "r", iterations=0))
    names = {p.name for p in (tmp_path / "r").iterdir()}
    assert {"ckpt_000000.fkp", "last.fkp", "metrics_000000.json", "metrics.json", "shots.txt", "config.json"} <= names
    assert (tmp_path / "r" / "metrics_000000.json").read_text() == (tmp_path / "r" / "metrics.json").read_text()
    assert len(res["shots"]) == 4 and (tmp_path / "r" / "loss_log.jsonl").read_text() == ""


def test_run_is_bitwise_reproducible(small_ds, tmp_path):
    a = train(small_cfg(small_ds, tmp_path / "a"))
    b = train(small_cfg(small_ds, tmp_path / "b"))
    for name in ("loss_log.jsonl", "metrics.json", "shots.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ma, mb = load_checkpoint(a["checkpoint"])[0], load_checkpoint(b["checkpoint"])[0]
    for k, v in ma.state_arrays().items():
        assert v.tobytes() == mb.state_arrays()[k].tobytes(), k
    recs = [json.loads(line) for line in (tmp_path / "a" / "loss_log.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in recs] == [0, 1, 2]
    assert {"few_shot", "recon", "geo2d", "geo3d", "total", "warmup"} <= set(recs[0])
    assert sorted(p.name for p in (tmp_path / "a").glob("ckpt_*")) == ["ckpt_000000.fkp", "ckpt_000002.fkp", "ckpt_000003.fkp"]


def test_resume_matches_uninterrupted(small_ds, tmp_path, monkeypatch):
    import fewkp.train as tr

    full = train(small_cfg(small_ds, tmp_path / "full", iterations=4))
    real = tr.train_step

    def interrupted(*a, **k):
        if a[5] == 3:  # dies during iteration 3; last checkpoint is at 2
            raise KeyboardInterrupt
        return real(*a, **k)

    monkeypatch.setattr(tr, "train_step", interrupted)
    with pytest.raises(KeyboardInterrupt):
        train(small_cfg(small_ds, tmp_path / "part", iterations=4))
    monkeypatch.setattr(tr, "train_step", real)
    resumed = train(small_cfg(small_ds, tmp_path / "part", iterations=4), resume=True)
    assert (tmp_path / "full" / "loss_log.jsonl").read_bytes() == (tmp_path / "part" / "loss_log.jsonl").read_bytes()
    assert full["metrics"].to_json() == resumed["metrics"].to_json()
    m1, a1, it1, _ = load_checkpoint(full["checkpoint"])
    m2, a2, it2, _ = load_checkpoint(resumed["checkpoint"])
    assert it1 == it2 == 4 and a1.t == a2.t == 4
    for k, v in m1.state_arrays().items():
        assert v.tobytes() == m2.state_arrays()[k].tobytes(), k


def test_checkpoint_reloads_to_same_metrics(small_ds, tmp_path):
    res = train(small_cfg(small_ds, tmp_path / "r", iterations=2))
    model, _, _, cfg = load_checkpoint(res["checkpoint"])
    rep = evaluate_model(model, load_dataset(small_ds), "test", cfg.eval_batch)
    assert rep.to_json() == (tmp_path / "r" / "metrics.json").read_text()


def test_shots_file_and_ablation_switches(small_ds, tmp_path):
    shots = tmp_path / "shots.txt"
    shots.write_text("0\n3\n5\n7\n")
    res = train(small_cfg(small_ds, tmp_path / "r", iterations=1, shots_file=str(shots), use_recon=False, use_geo3d=False))
    assert list(res["shots"]) == [0, 3, 5, 7]
    rec = json.loads((tmp_path / "r" / "loss_log.jsonl").read_text())
    assert "recon" not in rec and "geo3d" not in rec
    shots.write_text("0\n20\n5\n7\n")  # 20 is a test sample
    with pytest.raises(ValueError):
        train(small_cfg(small_ds, tmp_path / "bad", shots_file=str(shots)))


def test_image_size_mismatch_rejected(small_ds, tmp_path):
    with pytest.raises(ValueError, match="image_size"):
        train(small_cfg(small_ds, tmp_path / "r", image_size=64))


def test_non_finite_step_raises_numeric_failure(small_ds, tmp_path, monkeypatch):
    import fewkp.train as tr

    monkeypatch.setattr(tr, "recon_loss", lambda *a, **k: Tensor(np.array(np.nan)))
    with pytest.raises(NumericFailure, match="iteration 0") as ei:
        train(small_cfg(small_ds, tmp_path / "r"))
    assert ei.value.iteration == 0 and ei.value.term == "recon"


def test_non_finite_op_inside_step_is_numeric_failure(small_ds, tmp_path, monkeypatch):
    import fewkp.train as tr

    def boom(*a, **k):
        raise dc.NonFiniteError("exp overflow")

    monkeypatch.setattr(tr, "equivariance_loss", boom)
    with pytest.raises(NumericFailure, match="exp overflow"):
        train(small_cfg(small_ds, tmp_path / "r"))
