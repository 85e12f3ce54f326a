import json
import math

import numpy as np
import pytest

from xmodal import tensorlab as tl
from xmodal.association import total_loss
from xmodal.errors import ConfigError, InputError, NonFiniteError
from xmodal.harness import checkpoint
from xmodal.harness.cli import main
from xmodal.harness.config import Config, load_config, parse_text
from xmodal.harness.data import SyntheticSpec, gen_data, generate, load_dataset, save_dataset
from xmodal.harness.train import (
    METRICS,
    Model,
    dropout_policy,
    evaluate_params,
    learning_rate,
    plan_for,
    split_checkpoint,
    step_rng,
    train,
)
from xmodal.mining import BatchSpec, sample_batch

# ---------------------------------------------------------------- config


def test_defaults_validate():
    cfg = Config().validate()
    assert cfg.optim.lr == 2e-3 and cfg.optim.decay_epochs == [70, 90] and cfg.optim.decay_rate == 0.1
    assert cfg.loss.margin == 0.2 and cfg.batch.identities == 8 and cfg.model.embed_dim == 32


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nseed = 3\nmodel.pooling = avg  # trailing\noptim.decay_epochs = [5, 8]\n")
    cfg = load_config(path, ["seed=4", "loss.margin=0.5"])
    assert cfg.seed == 4 and cfg.model.pooling == "avg" and cfg.optim.decay_epochs == [5, 8]
    assert cfg.loss.margin == 0.5


def test_dumps_round_trips():
    cfg = Config()
    cfg.set("loss.terms", '["pos", "semi"]')
    cfg.set("model.temperature", "3")
    again = Config().update(parse_text(cfg.dumps()))
    assert again == cfg


@pytest.mark.parametrize(
    "key,value",
    [
        ("model.embed_dm", 3),
        ("optim.epochs", 0),
        ("optim.epochs", 1.5),
        ("loss.dropout_rate", 1.0),
        ("loss.dropout_policy", "everywhere"),
        ("loss.terms", "[]"),
        ("loss.terms", '["pos", "bogus"]'),
        ("model.hidden", 7),
        ("model.pooling", "median"),
        ("batch.identities", 1),
        ("optim.decay_rate", 0),
        ("model.learn_temperature", "maybe"),
        ("seed", -1),
        ("model", 3),
    ],
)
def test_config_rejects(key, value):
    with pytest.raises(ConfigError):
        Config().update([(key, value)]).validate()


def test_config_file_syntax_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("seed 3\n")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


# ---------------------------------------------------------------- data

SMALL = dict(num_identities=10, attributes=4, values=3, synonyms=2, height=8, width=8)


def test_gen_data_is_byte_identical_for_a_seed(tmp_path):
    spec = SyntheticSpec(**SMALL)
    a, b, c = gen_data(spec, 5, tmp_path / "a"), gen_data(spec, 5, tmp_path / "b"), gen_data(spec, 6, tmp_path / "c")
    for name in ("manifest.jsonl", "images.bin", "vocab.txt", "meta.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "images.bin").read_bytes() != (c / "images.bin").read_bytes()


def test_dataset_files_round_trip(tmp_path):
    ds = generate(SyntheticSpec(**SMALL), 0)
    back = load_dataset(save_dataset(ds, tmp_path / "d"))
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.image_ids, ds.image_ids)
    np.testing.assert_array_equal(back.text_image, ds.text_image)
    np.testing.assert_array_equal(back.split, ds.split)
    assert back.texts == ds.texts and back.vocab == ds.vocab


def test_dataset_shape_and_counts():
    spec = SyntheticSpec(**SMALL)
    ds = generate(spec, 0)
    assert ds.images.shape == (20, 3, 8, 8)
    assert len(ds.texts) == 40 and len(ds.vocab) == spec.vocab_size == 4 * 3 * 2 + 1
    assert all(len(t) == spec.mentions == 2 for t in ds.texts)
    assert len(ds.subset("test").identities()) == 2 and len(ds.subset("train").identities()) == 8


def test_degenerate_spec_gives_identical_texts_per_identity():
    ds = generate(SyntheticSpec(**{**SMALL, "sigma_img": 0.0, "rho": 1.0, "synonyms": 1}), 0)
    by_id = {}
    for t, pid in zip(ds.texts, ds.text_ids):
        by_id.setdefault(int(pid), set()).add(tuple(sorted(t)))
    assert all(len(v) == 1 for v in by_id.values())
    for pid in by_id:
        imgs = ds.images[ds.image_ids == pid]
        np.testing.assert_array_equal(imgs[0], imgs[1])


def test_raw_images_nearest_neighbour_finds_identity():
    ds = generate(SyntheticSpec(sigma_img=0.1, attributes=8), 0)
    x = ds.images.reshape(len(ds.images), -1)
    d = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    acc = np.mean(ds.image_ids[d.argmin(1)] == ds.image_ids)
    assert acc > 0.9


@pytest.mark.parametrize(
    "bad",
    [dict(num_identities=1), dict(rho=0.0), dict(rho=0.1, attributes=4), dict(sigma_img=-1.0),
     dict(attributes=2, values=2, num_identities=5), dict(height=1), dict(test_fraction=1.0)],
)
def test_spec_validation(bad):
    with pytest.raises(InputError):
        generate(SyntheticSpec(**{**SMALL, **bad}), 0)


def test_unwritable_output_is_an_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        gen_data(SyntheticSpec(**SMALL), 0, blocker / "sub")


# ---------------------------------------------------------------- checkpoint


def _tensors(rng):
    return {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,)), "meta.epoch": np.array(7.0)}


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    t = _tensors(np.random.default_rng(0))
    path = checkpoint.save(tmp_path / "c.xmck", t)
    back = checkpoint.load(path)
    assert set(back) == set(t)
    for k in t:
        assert back[k].tobytes() == np.asarray(t[k], dtype="<f8").tobytes() and back[k].shape == t[k].shape
    assert checkpoint.dumps(back) == path.read_bytes()
    assert [p.name for p in tmp_path.iterdir()] == ["c.xmck"]


def test_single_precision_checkpoint(tmp_path):
    t = _tensors(np.random.default_rng(1))
    back = checkpoint.load(checkpoint.save(tmp_path / "c.xmck", t, single_precision=True))
    np.testing.assert_allclose(back["a.w"], t["a.w"], rtol=1e-6)
    assert back["a.w"].dtype == np.float64


def test_corrupt_checkpoints_are_rejected(tmp_path):
    raw = checkpoint.dumps(_tensors(np.random.default_rng(2)))
    with pytest.raises(InputError):
        checkpoint.loads(b"NOPE" + raw[4:])
    with pytest.raises(InputError):
        checkpoint.loads(raw[:-3])
    with pytest.raises(InputError):
        checkpoint.loads(raw[:4] + (9).to_bytes(4, "little") + raw[8:])


# ---------------------------------------------------------------- training


def toy_config(**extra) -> Config:
    cfg = Config()
    base = {
        "model.embed_dim": 8, "model.hidden": 4, "model.word_dim": 8, "model.conv_channels": [4],
        "batch.identities": 4, "optim.epochs": 1, "optim.decay_epochs": [50],
    }
    return cfg.update({**base, **extra}.items()).validate()


@pytest.fixture(scope="module")
def toy_data():
    return generate(SyntheticSpec(num_identities=6, attributes=4, values=3, height=8, width=8, test_fraction=0.34), 0)


def test_one_epoch_writes_one_metrics_line(tmp_path, toy_data):
    res = train(toy_config(), toy_data, tmp_path)
    lines = (tmp_path / METRICS).read_text().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    for key in ("epoch", "lr", "l_pos", "l_hardest", "l_semi", "l_tri_img", "l_tri_txt", "total", "top1", "top10"):
        assert key in rec
    assert "wall_time" not in rec and "wall_time" in (tmp_path / "timings.jsonl").read_text()
    assert {p.name for p in tmp_path.iterdir()} >= {"ckpt_e0000.xmck", "final.xmck", "config.txt"}
    assert res.metrics == [rec]


def test_same_seed_gives_byte_identical_logs(tmp_path, toy_data):
    cfg = toy_config(**{"optim.epochs": 3})
    train(cfg, toy_data, tmp_path / "a")
    train(cfg, toy_data, tmp_path / "b")
    assert (tmp_path / "a" / METRICS).read_bytes() == (tmp_path / "b" / METRICS).read_bytes()
    assert (tmp_path / "a" / "final.xmck").read_bytes() == (tmp_path / "b" / "final.xmck").read_bytes()
    train(toy_config(**{"optim.epochs": 3, "seed": 1}), toy_data, tmp_path / "c")
    assert (tmp_path / "a" / METRICS).read_bytes() != (tmp_path / "c" / METRICS).read_bytes()


def test_step_zero_losses_recomputed_from_the_initial_checkpoint(tmp_path, toy_data):
    cfg = toy_config(**{"optim.batches_per_epoch": 1})
    seen = {}
    train(cfg, toy_data, tmp_path, on_step=lambda e, s, r: seen.setdefault((e, s), r))
    logged = seen[(1, 0)].loss.as_dict()

    params, _, epoch = split_checkpoint(checkpoint.load(tmp_path / "ckpt_e0000.xmck"))
    assert epoch == 0
    rng = step_rng(cfg, 1, 0)
    batch = sample_batch(toy_data.subset("train"), BatchSpec(4, 2, 2), rng)
    policy = dropout_policy(cfg)
    masks = [policy.mask(rng, (n, 8)) for n in (len(batch.image_ids), len(batch.text_ids))]
    with tl.no_grad():
        model = Model.from_arrays(cfg, params)
        feats = model.encode(batch.images, batch.texts, *masks)
        plan = plan_for(cfg, feats, batch, cfg.model.temperature)
        again = total_loss(feats, plan, batch.positives, 0.2, cfg.model.temperature, policy, cfg.model.gate_mode)
    assert again.as_dict() == logged
    assert json.loads((tmp_path / METRICS).read_text())["total"] == logged["total"]


def test_learning_rate_schedule_in_log(tmp_path, toy_data):
    cfg = toy_config(**{"optim.epochs": 5, "optim.decay_epochs": [2, 4], "optim.batches_per_epoch": 1})
    train(cfg, toy_data, tmp_path)
    lrs = [json.loads(line)["lr"] for line in (tmp_path / METRICS).read_text().splitlines()]
    passed = [sum(d < e for d in (2, 4)) for e in range(1, 6)]
    assert lrs == [2e-3 * 0.1 ** n for n in passed]
    assert [learning_rate(cfg, e) for e in range(1, 6)] == lrs


def test_final_checkpoint_reproduces_logged_eval(tmp_path, toy_data):
    cfg = toy_config(**{"optim.epochs": 2})
    train(cfg, toy_data, tmp_path)
    last = json.loads((tmp_path / METRICS).read_text().splitlines()[-1])
    params, _, _ = split_checkpoint(checkpoint.load(tmp_path / "final.xmck"))
    res = evaluate_params(cfg, params, toy_data.subset("test"))
    assert {f"top{k}": v for k, v in res.topk.items()} == {k: last[k] for k in ("top1", "top5", "top10")}


def test_resume_continues_the_same_run(tmp_path, toy_data):
    cfg = toy_config(**{"optim.epochs": 3, "train.checkpoint_every": 1})
    train(cfg, toy_data, tmp_path / "full")
    train(toy_config(**{"optim.epochs": 1}), toy_data, tmp_path / "part")
    train(cfg, toy_data, tmp_path / "part", resume=tmp_path / "part" / "final.xmck")
    assert (tmp_path / "full" / METRICS).read_bytes() == (tmp_path / "part" / METRICS).read_bytes()
    assert (tmp_path / "full" / "final.xmck").read_bytes() == (tmp_path / "part" / "final.xmck").read_bytes()


def test_nonfinite_parameters_abort_with_a_named_tensor(tmp_path, toy_data):
    cfg = toy_config()
    train(cfg, toy_data, tmp_path / "a")
    t = checkpoint.load(tmp_path / "a" / "ckpt_e0000.xmck")
    t["img.conv0.w"] = np.full_like(t["img.conv0.w"], np.nan)
    checkpoint.save(tmp_path / "nan.xmck", {**t, "meta.epoch": np.array(0.0)})
    with pytest.raises(NonFiniteError, match="image features"):
        train(cfg, toy_data, tmp_path / "b", resume=tmp_path / "nan.xmck")


def test_too_few_training_identities(toy_data):
    with pytest.raises(InputError):
        train(toy_config(**{"batch.identities": 5}), toy_data)


# ---------------------------------------------------------------- cli


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--seed", "1", "--set", "num_identities=50",
                 "--set", "test_fraction=0"]) == 0
    sets = ["--set", "optim.epochs=1", "--set", "optim.batches_per_epoch=1"]
    assert main(["train", "--data", str(data), "--out", str(root / "run"), *sets]) == 0
    return root


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", "--set", "optim.epochs=0"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--no-such-flag"]) == 1
    assert main([]) == 1
    assert main(["gen-data", "--out", str(tmp_path), "--set", "rho=0"]) == 1
    assert main(["gen-data", "--out", str(tmp_path), "--set", "colour=3"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "none.xmck"), "--data", str(tmp_path)]) == 2
    assert main(["--help"]) == 0
    assert "usage" in capsys.readouterr().err


def test_cli_eval_untrained_is_near_chance(cli_run, capsys):
    code = main(["eval", "--checkpoint", str(cli_run / "run" / "ckpt_e0000.xmck"), "--data", str(cli_run / "data"),
                 "--split", "all", "--results", str(cli_run / "res")])
    assert code == 0
    row = capsys.readouterr().out.splitlines()[1].split()
    top1 = float(row[1]) / 100
    p, n = 1 / 50, 200
    assert abs(top1 - p) <= 3 * math.sqrt(p * (1 - p) / n)
    assert (cli_run / "res.csv").read_text().startswith("method,top1")


def test_cli_mine_dumps_a_plan(cli_run, capsys):
    code = main(["mine", "--checkpoint", str(cli_run / "run" / "final.xmck"), "--data", str(cli_run / "data"),
                 "--batch-seed", "3"])
    assert code == 0
    plan = json.loads(capsys.readouterr().out)
    assert len(plan["image_ids"]) == 16 and len(plan["text_ids"]) == 32
    assert not {tuple(p) for p in plan["hardest_pairs"]} & {tuple(p) for p in plan["semi_hard_pairs"]}


def test_cli_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith("passed")
