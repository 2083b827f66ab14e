import json

import numpy as np
import pytest

from adaptseg import checkpoint, params_count
from adaptseg import config as C
from adaptseg.cli import main
from adaptseg.model import ModelConfig, SegModel
from adaptseg.synthetic import SyntheticSpec, gen_dataset, read_manifest, split
from adaptseg.train import (
    TrainConfig,
    evaluate,
    make_prompt,
    segmentation_loss,
    stack_images,
    train,
)

TINY = dict(image_size=32, patch=8, embed_len=16, heads=2, blocks=1, decoder_blocks=1, batch_size=4)
DATA = dict(kind="multi", image_size=32, min_radius=3.0, max_radius=6.0)


@pytest.fixture(scope="module")
def samples():
    return gen_dataset(SyntheticSpec(count=12, seed=1, **DATA))


def _tensors(model):
    return {n: t.data.copy() for n, t in model.named_parameters()}


# -- config ---------------------------------------------------------------------------------


def test_config_roundtrip():
    cfg = TrainConfig(epochs=3, mode="add", lr=5e-4, adapters=False)
    assert C.loads(TrainConfig, C.dumps(cfg)) == cfg


def test_config_unknown_key():
    with pytest.raises(C.ConfigError, match="unknown config keys"):
        C.loads(TrainConfig, "epochs=2\nlearning_rate=0.1\n")


@pytest.mark.parametrize("text", ["epochs=two", "adapters=maybe", "epochs=2\nepochs=3", "just a line", "mode=bogus"])
def test_config_bad_values(text):
    with pytest.raises(C.ConfigError):
        C.loads(TrainConfig, text)


def test_config_comments_bools_and_overrides():
    cfg = C.loads(TrainConfig, "# desk run\nadapters = off\nseed=4\n", seed=9, mode=None)
    assert cfg.adapters is False and cfg.seed == 9 and cfg.mode == "hyper"


def test_config_missing_file(tmp_path):
    with pytest.raises(C.ConfigError):
        C.load(TrainConfig, tmp_path / "nope.cfg")


# -- checkpoint -----------------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path, samples):
    cfg = TrainConfig(epochs=1, **TINY)
    res = train(cfg, samples[:8])
    a = checkpoint.save(tmp_path / "a", res.model, cfg, step=res.steps)
    model, cfg2, manifest = checkpoint.load(a)
    assert cfg2 == cfg and manifest["step"] == res.steps
    b = checkpoint.save(tmp_path / "b", model, cfg2, step=manifest["step"])
    for name in ("manifest.json", "weights.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_checkpoint_manifest_layout(tmp_path):
    cfg = TrainConfig(**TINY)
    path = checkpoint.save(tmp_path, SegModel(cfg.model_config), cfg)
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["version"] == 1
    recs = manifest["tensors"]
    assert len({r["name"] for r in recs}) == len(recs)
    end = 0
    for r in recs:
        assert r["offset"] == end
        end += 8 * int(np.prod(r["shape"]))
    assert (path / "weights.bin").stat().st_size == end
    assert sum(int(np.prod(r["shape"])) for r in recs if r["trainable"]) == params_count.count(cfg.model_config).trainable


def test_checkpoint_errors(tmp_path):
    cfg = TrainConfig(**TINY)
    path = checkpoint.save(tmp_path, SegModel(cfg.model_config), cfg)
    manifest = json.loads((path / "manifest.json").read_text())
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "missing")
    for edit in (
        lambda m: m.pop("version"),
        lambda m: m.update(version=99),
        lambda m: m["tensors"].append(dict(m["tensors"][0])),
        lambda m: m["tensors"][1].update(offset=0),
        lambda m: m["tensors"].pop(),
        lambda m: m["tensors"][0].update(shape=[3, 3]),
    ):
        bad = json.loads(json.dumps(manifest))
        edit(bad)
        (path / "manifest.json").write_text(json.dumps(bad))
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(path)


# -- training -------------------------------------------------------------------------------


def test_zero_epochs_checkpoint_equals_init(tmp_path, samples):
    cfg = TrainConfig(epochs=0, **TINY)
    res = train(cfg, samples)
    init = SegModel(cfg.model_config, seed=cfg.seed)
    assert res.steps == 0 and res.history == []
    model, _, _ = checkpoint.load(checkpoint.save(tmp_path, res.model, cfg))
    for (n, a), (_, b) in zip(model.named_parameters(), init.named_parameters()):
        assert np.array_equal(a.data, b.data), n


def test_frozen_everything_loss_constant(samples):
    cfg = TrainConfig(epochs=4, adapters=False, **TINY)
    probe = samples[:4]
    images = stack_images(probe)
    prompts = [make_prompt(s.mask, "1point", [0, k], False) for k, s in enumerate(probe)]
    target = np.stack([s.mask for s in probe])
    model = SegModel(cfg.model_config, seed=cfg.seed)
    assert not model.trainable_parameters()
    losses = []

    def probe_loss(_):
        losses.append(segmentation_loss(model.forward(images, prompts), target).item())

    probe_loss(None)
    train(cfg, samples, model=model, on_epoch=probe_loss)
    assert len(losses) == 5 and len(set(losses)) == 1


def test_only_trainable_parameters_change(samples):
    cfg = TrainConfig(epochs=2, **TINY)
    before = _tensors(SegModel(cfg.model_config, seed=cfg.seed))
    res = train(cfg, samples)
    mask = res.model.freeze_mask()
    changed = 0
    for n, t in res.model.named_parameters():
        if mask[n]:
            changed += not np.array_equal(t.data, before[n])
        else:
            assert np.array_equal(t.data, before[n]), n
    assert changed > 0


def test_training_deterministic_per_seed(tmp_path, samples):
    cfg = TrainConfig(epochs=2, **TINY)
    train_set, test_set = split(samples, 0.75, 0)
    a = train(cfg, train_set, test_set, log_path=tmp_path / "a.jsonl")
    b = train(cfg, train_set, test_set, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for (_, x), (_, y) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(x.data, y.data)
    rows = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert set(rows[0]) == {"epoch", "loss", "dice", "iou", "hd95"}


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(TrainConfig(**TINY), [])


# -- evaluation -----------------------------------------------------------------------------


class Oracle:
    """Returns the ground truth of each sample in evaluation order."""

    def __init__(self, samples):
        self.masks = [s.mask.astype(float) for s in samples]
        self.seen = 0

    def __call__(self, images, prompts):
        out = np.stack(self.masks[self.seen : self.seen + len(images)])
        self.seen += len(images)
        return out


@pytest.mark.parametrize("setting", ["1point", "3points", "bbox0.5", "bbox0.75"])
def test_oracle_predictor_scores_perfectly(samples, setting):
    rep = evaluate(Oracle(samples), samples, setting, volume=False, batch_size=5)
    assert rep.summary == {"dice": 1.0, "iou": 1.0, "hd95": 0.0}
    assert len(rep.rows) == len(samples)


def test_empty_prediction_scores_grid_diagonal(samples):
    rep = evaluate(lambda im, pr: np.zeros((len(im), 1, 32, 32)), samples[:3], "1point", volume=False)
    assert rep.summary["dice"] == 0.0
    assert rep.summary["hd95"] == pytest.approx(np.hypot(32, 32))


def test_evaluate_deterministic(samples):
    model = SegModel(TrainConfig(**TINY).model_config)
    a = evaluate(model, samples, "bbox0.5", seed=3)
    b = evaluate(model, samples, "bbox0.5", seed=3)
    assert a.rows == b.rows


def test_unknown_setting(samples):
    with pytest.raises(ValueError):
        evaluate(Oracle(samples), samples, "5points", volume=False)


# -- parameter audit ------------------------------------------------------------------------


def test_adapters_disabled_has_no_trainable_parameters():
    cfg = ModelConfig(adapters=False)
    assert params_count.count(cfg).trainable == 0
    assert SegModel(cfg).trainable_parameters() == []


@pytest.mark.parametrize("mode", ["none", "add", "concat", "hyper"])
@pytest.mark.parametrize("adapters", [True, False])
@pytest.mark.parametrize("decoder_len", [None, 32])
def test_formula_matches_assembled_model(mode, adapters, decoder_len):
    cfg = ModelConfig(mode=mode, adapters=adapters, decoder_len=decoder_len)
    model = SegModel(cfg)
    counted = params_count.count(cfg)
    assert counted.total == sum(t.size for _, t in model.named_parameters())
    assert counted.trainable == sum(t.size for t in model.trainable_parameters())


def test_vit_h_audit_within_budget():
    counted = params_count.count(params_count.vit_h_config(reduction=16))
    assert counted.fraction <= 0.03
    assert 600e6 < counted.total < 700e6


@pytest.mark.xfail(strict=True, reason="bottleneck width 320 puts adapter weights alone near 8% of ViT-H")
def test_vit_h_audit_within_budget_at_reduction_4():
    assert params_count.count(params_count.vit_h_config(reduction=4)).fraction <= 0.03


# -- command line ---------------------------------------------------------------------------


def _write(path, **pairs):
    path.write_text("".join(f"{k}={v}\n" for k, v in pairs.items()))
    return path


def test_cli_end_to_end(tmp_path, capsys):
    data_cfg = _write(tmp_path / "data.cfg", count=8, seed=2, **DATA)
    assert main(["gen-data", "--config", str(data_cfg), "--out", str(tmp_path / "data")]) == 0
    assert len(read_manifest(tmp_path / "data")["samples"]) == 8

    assert main(["gen-data", "--config", str(data_cfg), "--out", str(tmp_path / "data2")]) == 0
    for name in ("manifest.json", "images.bin", "masks.bin"):
        assert (tmp_path / "data" / name).read_bytes() == (tmp_path / "data2" / name).read_bytes()

    train_cfg = _write(tmp_path / "train.cfg", epochs=1, data=tmp_path / "data", **TINY)
    run = tmp_path / "run"
    assert main(["train", "--config", str(train_cfg), "--seed", "1", "--mode", "add", "--out", str(run)]) == 0
    rows = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 1
    _, cfg, _ = checkpoint.load(run / "checkpoint")
    assert cfg.seed == 1 and cfg.mode == "add"

    out = tmp_path / "eval"
    args = ["eval", "--checkpoint", str(run / "checkpoint"), "--prompt", "all", "--seed", "0", "--out", str(out)]
    assert main(args) == 0
    summary = (out / "summary.tsv").read_text().splitlines()
    assert summary[0].split("\t")[:3] == ["setting", "seed", "samples"]
    assert [line.split("\t")[0] for line in summary[1:]] == ["1point", "3points", "bbox0.5", "bbox0.75"]
    assert (out / "overlay_bbox0.5.png").exists()
    first = (out / "eval_1point.tsv").read_bytes()
    assert main(args) == 0
    assert (out / "eval_1point.tsv").read_bytes() == first

    capsys.readouterr()
    assert main(["count-params", "--config", str(train_cfg)]) == 0
    text = capsys.readouterr().out
    assert "assembled model agrees" in text


def test_cli_count_params_vit_h(capsys, tmp_path):
    assert main(["count-params", "--vit-h", "--out", str(tmp_path / "c.tsv")]) == 0
    out = capsys.readouterr().out
    fraction = float(next(line.split("\t")[1] for line in out.splitlines() if line.startswith("fraction")))
    assert fraction <= 0.03
    assert "formula only" in out


def test_cli_ablate(tmp_path):
    _write(tmp_path / "data.cfg", count=8, seed=2, **DATA)
    main(["gen-data", "--config", str(tmp_path / "data.cfg"), "--out", str(tmp_path / "data")])
    cfg = _write(tmp_path / "t.cfg", epochs=1, **TINY)
    args = ["ablate", "--config", str(cfg), "--data", str(tmp_path / "data"), "--seeds", "0", "--out", str(tmp_path / "abl")]
    assert main(args) == 0
    table = (tmp_path / "abl" / "ablation.tsv").read_text().splitlines()
    assert [line.split("\t")[0] for line in table[1:]] == ["none", "add", "concat", "hyper"]


def test_cli_errors(tmp_path, capsys):
    bad = _write(tmp_path / "bad.cfg", epochs=1, colour="red")
    assert main(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path / "o")]) == 2
    assert "no dataset" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit):
        main(["eval", "--checkpoint", "x", "--prompt", "7points", "--out", "o"])


def test_cli_dataset_shape_mismatch(tmp_path, capsys):
    _write(tmp_path / "data.cfg", count=4, **DATA)
    main(["gen-data", "--config", str(tmp_path / "data.cfg"), "--out", str(tmp_path / "data")])
    assert main(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "o")]) == 2
    assert "config expects" in capsys.readouterr().err
