# Copyright 2026 The nkb-lab Authors
# SPDX-License-Identifier: Apache-2.0

import os

import numpy as np
import pytest

import nkb_lab as nkb

SMALL = {
    "seed": "3",
    "model.num_layers": "1",
    "model.model_dim": "16",
    "model.num_heads": "2",
    "model.nkb_dim": "8",
    "pretrain.max_steps": "20",
    "pretrain.warmup_steps": "5",
    "inject.max_steps": "20",
    "inject.warmup_steps": "5",
    "finetune.max_steps": "5",
    "finetune.warmup_steps": "0",
}


@pytest.fixture(scope="module")
def setup():
    cfg = nkb.Config(os.environ.get("NKB_CONFIG", ""), SMALL)
    ds = nkb.generate_dataset(cfg)
    return cfg, ds


def test_config_errors():
    with pytest.raises(nkb.ConfigError, match="no.such"):
        nkb.Config("", {"no.such": "1"})
    assert "inject.peak_lr = " in nkb.Config().to_text()


def test_dataset(setup, tmp_path):
    cfg, ds = setup
    assert len(ds.qa_base) == 500 and len(ds.qa_new) == 100
    q, a = ds.qa_new[0]
    assert q and a
    nkb.write_dataset(tmp_path, ds)
    assert nkb.read_dataset(tmp_path).qa_new == ds.qa_new
    with pytest.raises(nkb.DataError):
        nkb.read_dataset(tmp_path / "missing")


def test_memory_view():
    rng = np.random.default_rng(0)
    for act in ("relu", "gelu"):
        w1, w2 = rng.normal(size=(32, 8)), rng.normal(size=(32, 8))
        h = rng.normal(size=(1, 8))
        dense = nkb.ffn_forward(h, w1, w2, act)
        out, weights = nkb.ffn_memory_forward(h[0].tolist(), w1, w2, act)
        assert np.max(np.abs(dense[0] - np.array(out))) < 1e-9
        assert len(weights) == 32


def test_phases_and_freeze(setup, tmp_path):
    cfg, ds = setup
    model = nkb.new_base_model(cfg, ds)
    assert not model.has_nkb
    r = nkb.pretrain(model, cfg, ds)
    assert r["steps"] == 20
    nkb.mount_nkb(model, cfg)
    assert model.has_nkb and model.nkb_values().shape == (8, 16)
    assert not model.nkb_values().any()
    before = model.digests()
    nkb.inject(model, cfg, ds)
    after = model.digests()
    changed = sorted(k for k in before if before[k] != after[k])
    assert changed == ["nkb.w1", "nkb.w2"]

    nkb.finetune(model, cfg, ds)
    report = nkb.evaluate(model, cfg, ds)
    assert report["base"]["total"] == 500 and report["new"]["total"] == 100
    assert 0.0 <= report["new"]["em"] <= 100.0

    path = str(tmp_path / "m.ckpt")
    model.save(path)
    again = nkb.load_model(path)
    assert again.digests() == model.digests()
    assert isinstance(again.answer(ds.qa_base[0][0], ds), str)


def test_probes_and_surgery(setup):
    cfg, ds = setup
    model = nkb.new_base_model(cfg, ds)
    with pytest.raises(nkb.ContractError):
        nkb.key_probe(model, cfg, ds)
    nkb.mount_nkb(model, cfg)
    nkb.inject(model, cfg, ds)
    p = nkb.project_value(model, 0)
    assert abs(sum(p) - 1.0) < 1e-9
    values = nkb.value_probe(model, cfg, ds)
    assert len(values["slots"]) == 8
    keys = nkb.key_probe(model, cfg, ds)
    assert len(keys["keys"]) == len(keys["active"])

    edited = model.clone()
    vocab = ds.vocab
    nkb.apply_surgery(edited, 3, 0.07, vocab[10], vocab[11], ds)
    rows, others = nkb.changed_value_rows(model, edited)
    assert rows == [3] and others == []
    delta = edited.nkb_values() - model.nkb_values()
    emb = model.parameter("embedding")
    assert np.allclose(delta[3], 0.07 * (emb[11] - emb[10]), atol=1e-15)
