import csv
import json

import numpy as np
import pytest

from pnnunet.errors import ConfigError, DataError, DependencyError, FormatError, IoError
from pnnunet.evalstat import METRICS, volume_report
from pnnunet.gradcore import Tensor
from pnnunet.runner import (Checkpoint, ExperimentConfig, ReportRow, build_model, compare_models, emit_report,
                            evaluate_model, load_checkpoint, main, overfit, param_hash, parse_experiments,
                            probabilities, read_report_csv, report_rows, save_checkpoint, snapshot, split_cases,
                            held_out_cases, train_model)
from pnnunet.volumedata import CachedCase, Rng, derive_seed, split_dataset, synthetic_cases, synthetic_slices

TINY = dict(data="synthetic:5", scale=16, epochs=1, batch=8)


@pytest.fixture(scope="module")
def cases():
    return synthetic_cases(5, seed=0)


def cfg(**kw):
    return ExperimentConfig(**{**TINY, **kw})


# ---------------------------------------------------------------- config


def test_config_defaults_and_validation():
    c = ExperimentConfig()
    assert (c.epochs, c.batch, c.lr, c.scale, c.experiments) == (20, 8, 1e-3, 8, (1, 2, 3, 4, 5))
    for bad in (dict(model="unet"), dict(phase="both"), dict(experiments=(0,)), dict(lr=0), dict(batch=0)):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"model": "deep", "learning_rate": 1})


def test_experiment_parsing():
    assert parse_experiments("1..5") == (1, 2, 3, 4, 5)
    assert parse_experiments("2,4") == (2, 4)
    assert ExperimentConfig.from_mapping({"experiments": "3"}).experiments == (3,)


def test_run_split_matches_library_split(cases):
    split = split_cases(cases, Rng(derive_seed(2)))
    _, _, test = split_dataset([c.id for c in cases], derive_seed(2))
    assert [c.id for c in split.test] == test == [c.id for c in held_out_cases(cases, 2)]


# ---------------------------------------------------------------- checkpoints


def _checkpoint(model="pnn"):
    net = build_model(cfg(model=model), Rng(4))
    return net, Checkpoint(model, derive_seed(1), 1, "noaug", 3, 0.5, cfg(model=model).to_dict(), snapshot(net))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net, ckpt = _checkpoint()
    path = save_checkpoint(ckpt, tmp_path)
    assert path.name == "pnn-noaug-s1.json"
    manifest = json.loads(path.read_text())
    total = sum(int(np.prod(e["shape"])) for e in manifest["parameters"])
    assert (tmp_path / manifest["blob"]).stat().st_size == 4 * total
    back = load_checkpoint(path)
    assert back.sha256 == ckpt.sha256 == manifest["sha256"]
    x = synthetic_slices(2, 1)[0]
    np.testing.assert_array_equal(probabilities(back.to_model(), x), probabilities(net, x))


def test_checkpoint_corruption_detected(tmp_path):
    _, ckpt = _checkpoint("deep")
    path = save_checkpoint(ckpt, tmp_path)
    blob = tmp_path / "deep-noaug-s1.f32"
    raw = bytearray(blob.read_bytes())
    blob.write_bytes(bytes(raw[:-4]))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    with pytest.raises(DependencyError):
        load_checkpoint(tmp_path / "wide-noaug-s1.json")


def test_checkpoint_write_failure(tmp_path):
    _, ckpt = _checkpoint("deep")
    (tmp_path / "file").write_text("")
    with pytest.raises(IoError):
        save_checkpoint(ckpt, tmp_path / "file" / "sub")


# ---------------------------------------------------------------- training


def test_training_is_bitwise_deterministic(cases):
    a = train_model(cfg(model="deep"), 1, cases)
    b = train_model(cfg(model="deep"), 1, cases)
    assert a.sha256 == b.sha256 and a.history == b.history
    assert train_model(cfg(model="deep"), 2, cases).sha256 != a.sha256


def test_augmented_phase_trains_and_is_deterministic(cases):
    a = train_model(cfg(model="deep", phase="aug"), 1, cases)
    b = train_model(cfg(model="deep", phase="aug"), 1, cases)
    assert a.sha256 == b.sha256
    assert a.sha256 != train_model(cfg(model="deep"), 1, cases).sha256


def test_best_validation_epoch_is_kept(cases):
    ckpt = train_model(cfg(model="deep", epochs=3), 1, cases)
    vals = [h["val_dice"] for h in ckpt.history]
    assert len(vals) == 3 and ckpt.val_dice == max(vals) and ckpt.epoch == vals.index(max(vals)) + 1


def test_training_loss_descends_on_overfit_set():
    x, y = synthetic_slices(8, 0)
    net = build_model(cfg(model="deep"), Rng(derive_seed(1) + 1))
    result = overfit(net, x, y, steps=200, target=2.0)
    assert len(result.losses) == 200 and result.losses[-1] < result.losses[0]


def test_too_few_cases():
    with pytest.raises(DataError):
        train_model(cfg(model="deep"), 1, synthetic_cases(2, seed=0))


def test_transfer_assembly(tmp_path, cases):
    out = str(tmp_path)
    with pytest.raises(DependencyError):
        train_model(cfg(model="ensemble-transfer", out=out), 1, cases)
    members = {m: train_model(cfg(model=m, out=out), 1, cases) for m in ("deep", "wide")}
    for ck in members.values():
        save_checkpoint(ck, out)
    ens = train_model(cfg(model="ensemble-transfer", out=out), 1, cases)
    assert ens.members == {m: ck.sha256 for m, ck in members.items()}
    for m, ck in members.items():
        sub = [a for n, a in ens.params.items() if n.startswith(m + ".")]
        assert param_hash(sub) == ck.sha256
    # the stacked forward is the mean of the independently evaluated members
    x = cases[0].image[:4, None]
    want = (probabilities(members["deep"].to_model(), x) + probabilities(members["wide"].to_model(), x)) / 2
    np.testing.assert_array_equal(probabilities(ens.to_model(), x), want.astype(np.float32))


def test_retrain_and_pnn_train(cases):
    for model in ("ensemble-retrain", "pnn"):
        ckpt = train_model(cfg(model=model), 1, cases)
        assert ckpt.history and np.isfinite(ckpt.history[0]["loss"])


# ---------------------------------------------------------------- evaluation


class OracleNet:
    """Predicts the label encoded in the image (image == label / 2)."""

    def __init__(self, constant=None):
        self.constant = constant

    def probabilities(self, x: Tensor) -> Tensor:
        labels = np.rint(x.data[:, 0] * 2).astype(int)
        if self.constant is not None:
            labels[:] = self.constant
        return Tensor(np.moveaxis(np.eye(3)[labels], -1, 1))


def _encoded_cases():
    out = []
    for c in synthetic_cases(3, seed=5):
        out.append(CachedCase(c.id, c.mask / 2.0, c.mask, c.extents, c.offsets))
    return out


def test_oracle_model_scores_one():
    for r in evaluate_model(OracleNet(), _encoded_cases()):
        assert r.value("L1+L2", "dice") == 1 and r.value("L1+L2", "jaccard") == 1


def test_background_model_scores_zero():
    for r in evaluate_model(OracleNet(constant=0), _encoded_cases()):
        for ls in ("L1", "L2"):
            assert r.value(ls, "dice") == 0 and r.value(ls, "specificity") == 1


def test_evaluation_independent_of_batch_size(cases):
    net = build_model(cfg(model="pnn"), Rng(7))
    one = evaluate_model(net, cases[:2], batch=1)
    eight = evaluate_model(net, cases[:2], batch=8)
    assert one == eight


def test_evaluation_rejects_extent_mismatch(cases):
    c = cases[0]
    bad = CachedCase(c.id, c.image[:-1], c.mask[:-1], c.extents, c.offsets)
    with pytest.raises(FormatError):
        evaluate_model(OracleNet(), [bad])


# ---------------------------------------------------------------- comparison and reports


def _runs(seed_shift=0.0, volumes=("a", "b", "c")):
    gen = np.random.default_rng(int(seed_shift * 100))
    runs = {}
    for k in range(1, 6):
        reps = []
        for v in volumes:
            truth = gen.integers(0, 3, (4, 6, 6))
            pred = np.where(gen.random(truth.shape) < 0.8 + seed_shift, truth, gen.integers(0, 3, truth.shape))
            reps.append(volume_report(pred, truth, v, derive_seed(k)))
        runs[k] = reps
    return runs


def test_compare_identical_models():
    runs = _runs()
    rows = compare_models("pnn", runs, "deep", runs)
    assert len(rows) == len(METRICS) * 3
    assert {r.label for r in rows} == {"L1+L2", "L1", "L2"}
    assert all(r.p == 1 and r.marker == "" for r in rows)


def test_compare_is_symmetric_in_p():
    a, b = _runs(0.0), _runs(0.1)
    for ab, ba in zip(compare_models("a", a, "b", b), compare_models("b", b, "a", a)):
        assert ab.p == ba.p and ab.t == -ba.t


def test_compare_pairing_mismatch():
    with pytest.raises(DataError):
        compare_models("a", _runs(), "b", _runs(volumes=("a", "b", "d")))


def test_report_rows_have_five_values():
    rows = report_rows("pnn", _runs())
    assert len(rows) == 3 * len(METRICS)
    for r in rows:
        assert len(r.values) == 5 and r.mean == pytest.approx(sum(r.values) / 5, abs=1e-15)


def test_csv_round_trip_and_determinism(tmp_path):
    rows = [ReportRow("deep", "L1+L2", "dice", (0.1, 0.2, 0.3, 0.4, 0.8665085))]
    path = emit_report(rows, "csv", tmp_path / "r.csv")
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["model", "label", "metric", "s1", "s2", "s3", "s4", "s5", "mean"]
    assert "0.866509" in path.read_text()
    back = read_report_csv(path)
    assert back[0].model == "deep" and back[0].values[:4] == (0.1, 0.2, 0.3, 0.4)
    again = emit_report(rows, "csv", tmp_path / "r2.csv")
    assert again.read_bytes() == path.read_bytes()


def test_markdown_layouts(tmp_path):
    runs = {"pnn": _runs(0.1), "deep": _runs(0.0)}
    means = [row for m, r in runs.items() for row in report_rows(m, r)]
    text = emit_report(means, "markdown", tmp_path / "m.md").read_text()
    assert "| Models | L1 Mean | L2 Mean | L1 & L2 Mean |" in text and "| PNN-UNet |" in text
    cmp = compare_models("pnn", runs["pnn"], "deep", runs["deep"])
    text = emit_report(cmp, "markdown", tmp_path / "t.md").read_text()
    assert "| T-Test in dice | L1+L2 | L1 | L2 |" in text
    assert "| PNN-UNet versus Deep-UNet |" in text


def test_report_errors(tmp_path):
    with pytest.raises(DataError):
        emit_report([], "csv", tmp_path / "x.csv")
    (tmp_path / "file").write_text("")
    rows = [ReportRow("deep", "L1", "dice", (0.5,) * 5)]
    with pytest.raises(IoError):
        emit_report(rows, "csv", tmp_path / "file" / "x.csv")
    with pytest.raises(ConfigError):
        emit_report(rows, "html", tmp_path / "x.html")


# ---------------------------------------------------------------- CLI


def test_cli_seeds(capsys):
    assert main(["seeds"]) == 0
    assert capsys.readouterr().out.strip() == "71582788 143165576 214748364 286331153 357913941"


def test_cli_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 2


def test_cli_runtime_error_exit_one(tmp_path, capsys):
    rc = main(["train", "--model", "ensemble-transfer", "--data", "synthetic:5", "--out", str(tmp_path),
               "--scale", "16", "--epochs", "1"])
    assert rc == 1 and "error" in capsys.readouterr().err


def test_cli_train_evaluate_report(tmp_path, capsys):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"data": "synthetic:5", "scale": 16, "epochs": 3, "out": str(tmp_path)}))
    args = ["--config", str(config), "--epochs", "1", "--experiments", "1"]
    assert main(["train", "--model", "deep", "--phase", "noaug", *args]) == 0
    assert (tmp_path / "deep-noaug-s1.json").exists()
    assert json.loads((tmp_path / "deep-noaug-s1.json").read_text())["config"]["epochs"] == 1
    assert main(["evaluate", "--model", "deep", *args]) == 0
    assert (tmp_path / "deep-noaug-s1.metrics.json").exists()
    assert main(["report", *args]) == 0
    assert (tmp_path / "means-noaug.csv").exists()
    assert "Deep-UNet" in capsys.readouterr().out


def test_cli_selftest():
    assert main(["selftest"]) == 0
