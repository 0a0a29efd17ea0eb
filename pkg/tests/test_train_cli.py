import json

import numpy as np
import pytest

from pets import autodiff as ad
from pets import cli
from pets.errors import InvalidConfig, InvalidInput, NumericalError, ShapeError
from pets.train import (RunConfig, Trainer, _split_errors, build_dataset, evaluate, load_model,
                        reconstruct_series)

SINE = {"length": 93, "components": [{"freq": 0.05, "amp": 1.0}], "noise": 0.0}


def tiny(tmp_path=None, **kw):
    d = dict(task="forecast", data=SINE, seq_len=16, horizon=8, split_lengths=(33, 30, 30),
             n_layers=1, patch={"patch_len": 4, "token_dim": 8}, sdaq={"lam": 8},
             batch_size=4, epochs=1, dropout=0.0, lr=3e-3,
             out=str(tmp_path / "run") if tmp_path else "runs/tiny")
    d.update(kw)
    return RunConfig(**d)


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg.to_dict()))
    return p


# ---------------------------------------------------------------- config


def test_config_json_roundtrip(tmp_path):
    cfg = tiny(tmp_path, seed=5)
    again = RunConfig.load(write_cfg(tmp_path, cfg))
    assert again.to_dict() == cfg.to_dict()


def test_unknown_config_keys_rejected():
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict({"task": "forecast", "colour": "red"})
    with pytest.raises(InvalidConfig):
        RunConfig(task="dance")


# ---------------------------------------------------------------- trainer


def test_one_epoch_writes_checkpoint_and_log(tmp_path):
    cfg = tiny(tmp_path)
    tr = Trainer(cfg)
    assert len(tr.data.train) == 10
    log, best = tmp_path / "log.jsonl", tmp_path / "best.json"
    tr.fit(1, log_path=log, best_path=best)
    recs = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(recs) == 1 and recs[0]["epoch"] == 1 and recs[0]["best"]
    assert ad.load_parameters(best)["epoch"] == 1


def test_loss_decreases_on_noiseless_sinusoid(tmp_path):
    tr = Trainer(tiny(tmp_path, lr=1e-2))
    hist = tr.fit(8)
    assert hist[-1]["train_loss"] < 0.5 * hist[0]["train_loss"]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full = Trainer(tiny(tmp_path, dropout=0.2))
    full.fit(4)
    first = Trainer(tiny(tmp_path, dropout=0.2))
    first.fit(2, state_path=tmp_path / "state.json")
    resumed = Trainer(tiny(tmp_path, dropout=0.2))
    resumed.load_state(tmp_path / "state.json")
    resumed.fit(2)
    assert [r["train_loss"] for r in resumed.history] == [r["train_loss"] for r in full.history]
    for (n, a), (_, b) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=n)


def test_zero_head_predicts_zero_and_mse_is_target_power(tmp_path):
    cfg = tiny(tmp_path, instance_norm=False)
    tr = Trainer(cfg)
    tr.model.head.proj.weight.data[...] = 0.0
    tr.model.head.proj.bias.data[...] = 0.0
    rep = evaluate(tr.model, cfg, tr.data, "test")
    ws = tr.data.test
    assert rep["mse"] == pytest.approx(np.mean((ws.targets * ws.norm.std[None, :, None]) ** 2), rel=1e-12)


@pytest.mark.parametrize("task,keys", [
    ("forecast", {"mse", "mae", "rmse", "n"}),
    ("impute", {"mse", "mae", "n"}),
    ("anomaly", {"threshold", "n_flagged", "n"}),
])
def test_metric_keys_and_repeatable_eval(tmp_path, task, keys):
    cfg = tiny(tmp_path, task=task)
    tr = Trainer(cfg)
    a, b = evaluate(tr.model, cfg, tr.data), evaluate(tr.model, cfg, tr.data)
    assert set(a) == keys
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_classification_eval_keys(tmp_path):
    data = {"kind": "classification", "n_train": 8, "n_val": 4, "n_test": 4, "burst_width": 8}
    cfg = tiny(tmp_path, task="classify", data=data)
    tr = Trainer(cfg)
    tr.fit(1)
    assert set(evaluate(tr.model, cfg, tr.data)) == {"accuracy", "n"}


def test_gates_become_nonzero_after_ten_steps(tmp_path):
    cfg = tiny(tmp_path, batch_size=1)
    tr = Trainer(cfg)
    assert len(tr.data.train) == 10
    gates = {n: p for n, p in tr.model.named_parameters() if ".gates." in n}
    assert gates and all(not p.data.any() for p in gates.values())
    tr.fit(1)
    assert all(np.abs(p.data).sum() > 0 for n, p in gates.items() if n.endswith("weight"))


def test_nonfinite_loss_raises_with_diagnostics(tmp_path):
    tr = Trainer(tiny(tmp_path))
    tr.model.head.proj.bias.data[...] = np.nan
    with pytest.raises(NumericalError) as info:
        tr.train_epoch()
    assert "head.proj.weight" in info.value.diagnostics


def test_incompatible_checkpoint_is_rejected(tmp_path):
    tr = Trainer(tiny(tmp_path))
    tr.save_checkpoint(tmp_path / "ck.json")
    other = tiny(tmp_path, patch={"patch_len": 4, "token_dim": 16})
    with pytest.raises(ShapeError):
        load_model(tmp_path / "ck.json", other, 1)


def test_burst_wider_than_window_rejected(tmp_path):
    data = {"kind": "classification", "n_train": 8, "n_val": 4, "n_test": 4}
    with pytest.raises(InvalidConfig):
        build_dataset(tiny(tmp_path, task="classify", data=data))


def test_classification_data_requires_classify_task(tmp_path):
    with pytest.raises(InvalidConfig):
        build_dataset(tiny(tmp_path, task="forecast", data={"kind": "classification"}))


# ---------------------------------------------------------------- CLI


def test_cli_train_then_eval(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tiny(tmp_path))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--quiet"]) == cli.EXIT_OK
    for name in ("train_log.jsonl", "best.json", "state.json", "config.json", "report.json"):
        assert (out / name).exists(), name
    assert cli.main(["eval", "--config", str(cfg), "--predictions"]) == cli.EXIT_OK
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == {"mse", "mae", "rmse", "n"}
    assert np.loadtxt(out / "predictions.csv", delimiter=",").shape == (metrics["n"], 8)


def test_cli_resume_completes_epochs(tmp_path):
    cfg = write_cfg(tmp_path, tiny(tmp_path, epochs=2))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--epochs", "1", "--quiet"]) == 0
    assert cli.main(["train", "--config", str(cfg), "--resume", str(out / "state.json"), "--quiet"]) == 0
    lines = (out / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]


def test_cli_decompose_fft_is_lossless_and_deterministic(tmp_path):
    csv = tmp_path / "s.csv"
    t = np.arange(200)
    rows = np.stack([np.sin(0.1 * t), np.cos(0.37 * t) + 0.01 * t], axis=1)
    csv.write_text("a,b\n" + "\n".join(f"{float(x)!r},{float(y)!r}" for x, y in rows) + "\n")
    args = ["decompose", "--input", str(csv), "--backend", "fft"]
    assert cli.main(args + ["--out", str(tmp_path / "d1")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "d2")]) == 0
    rep = json.loads((tmp_path / "d1" / "energy_report.json").read_text())
    assert rep["reconstruction_error"] <= 1e-9 and rep["backend"] == "fft"
    files = sorted(p.name for p in (tmp_path / "d1").glob("pattern_*.csv"))
    assert files == ["pattern_1.csv", "pattern_2.csv", "pattern_3.csv"]
    for name in files + ["energy_report.json"]:
        assert (tmp_path / "d1" / name).read_bytes() == (tmp_path / "d2" / name).read_bytes()
    pats = sum(np.loadtxt(tmp_path / "d1" / f, delimiter=",", skiprows=1) for f in files)
    np.testing.assert_allclose(pats, rows, atol=1e-9)


def test_cli_export_attention(tmp_path):
    cfg = tiny(tmp_path, n_layers=2)
    path = write_cfg(tmp_path, cfg)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(path), "--quiet"]) == 0
    assert cli.main(["export-attention", "--config", str(path), "--sample", "1"]) == 0
    meta = json.loads((out / "attention_meta.json").read_text())
    assert meta["n_layers"] == 2
    P = meta["tokens_per_pattern"]
    spans = [(b["start"], b["stop"]) for b in meta["patterns"]]
    assert spans[0][0] == 0 and spans[-1][1] == 3 * P
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    for n in (1, 2):
        att = np.loadtxt(out / f"attention_layer_{n}.csv", delimiter=",")
        assert att.shape == (3 * P, 3 * P)
        np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-12)
    assert cli.main(["export-attention", "--config", str(path), "--sample", "999"]) == cli.EXIT_DATA


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--task", "dance"])
    assert info.value.code == cli.EXIT_USAGE
    bad = tmp_path / "bad.csv"
    bad.write_text("a\n1\nzz\n")
    assert cli.main(["decompose", "--input", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
    assert cli.main(["decompose", "--input", str(tmp_path / "missing.csv"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_cli_numerical_failure_exit_code(tmp_path, monkeypatch):
    def explode(self):
        raise NumericalError("non-finite loss", {"head.proj.weight": None})

    monkeypatch.setattr(Trainer, "train_epoch", explode)
    path = write_cfg(tmp_path, tiny(tmp_path))
    assert cli.main(["train", "--config", str(path), "--quiet"]) == cli.EXIT_NUMERIC
    assert json.loads((tmp_path / "run" / "grad_norms.json").read_text()) == {"head.proj.weight": None}


class _Stub:
    """Stands in for a model: adds 1 to each window, or emits window positions."""

    def __init__(self, L, positional=False):
        self.cfg = type("Cfg", (), {"seq_len": L})()
        self.positional = positional

    def eval(self):
        pass

    def __call__(self, x, mask=None):
        out = np.broadcast_to(np.arange(x.shape[2], dtype=float), x.shape) if self.positional else x + 1.0
        return ad.Tensor(out)


@pytest.mark.parametrize("stride", [1, 3, 8])
def test_reconstruct_series_covers_every_point(stride):
    x = np.random.default_rng(0).normal(size=(2, 30))
    np.testing.assert_allclose(reconstruct_series(_Stub(8), x, stride=stride), x + 1.0, atol=1e-12)


def test_reconstruct_series_averages_overlaps():
    rec = reconstruct_series(_Stub(4, positional=True), np.zeros((1, 6)), batch_size=2, stride=1)
    # point t is seen at window positions t - s for every start s in [max(0, t-3), min(t, 2)]
    want = [np.mean([t - s for s in range(max(0, t - 3), min(t, 2) + 1)]) for t in range(6)]
    np.testing.assert_allclose(rec[0], want, atol=1e-12)
    with pytest.raises(InvalidInput):
        reconstruct_series(_Stub(8), np.zeros((1, 5)))


class _Offset(_Stub):
    """Adds each point's window position to it, so the error is the mean position squared."""

    def __call__(self, x, mask=None):
        return ad.Tensor(x + np.arange(x.shape[2], dtype=float))


def test_split_errors_borrow_preceding_context():
    ds = build_dataset(tiny(task="anomaly", horizon=0))
    L = 16
    err = _split_errors(_Offset(L), ds, "test", "val")
    assert err.shape == (30,)
    # with L-1 context points every test point but the last L-1 sits in L windows
    np.testing.assert_allclose(err[: 30 - (L - 1)], ((L - 1) / 2) ** 2, atol=1e-12)
    alone = _split_errors(_Offset(L), ds, "test", None)
    assert alone[0] == 0.0
