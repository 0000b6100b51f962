"""Training harness: configs, sampling, metric logs, checkpoint lifecycle."""

import json
import os

import numpy as np
import pytest

from tonetrans.corpus import write_corpus
from tonetrans.features import FrontendConfig
from tonetrans.grammar import default_grammar
from tonetrans.harness import (BucketSampler, ConfigError, MetricLog,
                               TrainConfig, batch_quantizer, load_model_checkpoint,
                               load_quantizer_checkpoint, run_training, step_rng)
from tonetrans.quantizer import VqConfig
from tonetrans.translator import ModelConfig


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("harness_corpus"))
    write_corpus(d, default_grammar(), 48, 0, FrontendConfig())
    return d


def quick_train(steps=6, **kw):
    kw.setdefault("checkpoint_every", steps)
    return TrainConfig(steps=steps, batch_size=4, warmup_steps=2,
                       eval_every=3, **kw)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(steps=10, warmup_steps=20)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(precision="float16")
    with pytest.raises(ConfigError):
        TrainConfig(mask_fraction=0.0)


def test_step_rng_decorrelated_but_deterministic():
    a = step_rng(0, 1).integers(0, 1 << 30, 8)
    b = step_rng(0, 1).integers(0, 1 << 30, 8)
    c = step_rng(0, 2).integers(0, 1 << 30, 8)
    d = step_rng(1, 1).integers(0, 1 << 30, 8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_bucket_sampler_groups_similar_lengths():
    lengths = [10, 50, 12, 52, 11, 51]
    s = BucketSampler(lengths, batch_size=3)
    assert sorted(s.buckets[0]) == [0, 2, 4]  # the three short items
    assert sorted(s.buckets[1]) == [1, 3, 5]
    picks = {tuple(sorted(s.sample(np.random.default_rng(i)))) for i in range(20)}
    assert picks == {(0, 2, 4), (1, 3, 5)}


def test_batch_quantizer_pads_and_masks():
    items = [
        {"stacked": np.ones((3, 8)), "frames": np.ones((6, 4)), "len": 3},
        {"stacked": np.ones((2, 8)) * 2, "frames": np.ones((4, 4)) * 2, "len": 2},
    ]
    stacked, frames, pos_mask = batch_quantizer(items, [0, 1], stride=2)
    assert stacked.shape == (2, 3, 8)
    assert frames.shape == (2, 6, 4)
    np.testing.assert_array_equal(pos_mask, [[1, 1, 1], [1, 1, 0]])
    np.testing.assert_array_equal(stacked[1, 2], 0.0)
    np.testing.assert_array_equal(frames[1, 4:], 0.0)


def test_metric_log_format_and_monotonicity(tmp_path):
    path = str(tmp_path / "m.jsonl")
    log = MetricLog(path)
    log.log(1, "loss", 2.0)
    log.log(1, "lr", 0.1)
    log.log(2, "loss", 1.5)
    log.flush()
    lines = [json.loads(l) for l in open(path)]
    assert lines[0] == {"step": 1, "name": "loss", "value": 2.0}
    assert all(set(l) == {"step", "name", "value"} for l in lines)  # no timestamps
    with pytest.raises(ValueError):
        log.log(1, "loss", 9.0)  # steps must not go backwards per name


def test_quantizer_training_writes_artifacts(corpus, tmp_path):
    out = str(tmp_path / "q")
    res = run_training("quantizer", out_dir=out, corpus_dir=corpus,
                       train_config=quick_train(),
                       vq_config=VqConfig(quantizer_kind="linear"))
    assert os.path.exists(os.path.join(out, "checkpoint.ckpt"))
    assert os.path.exists(os.path.join(out, "metrics.jsonl"))
    assert len(res["loss_history"]) == 6
    q, config, _ = load_quantizer_checkpoint(os.path.join(out, "checkpoint.ckpt"))
    assert config["step"] == 6
    assert q.stats is not None


def test_training_rerun_byte_identical(corpus, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = str(tmp_path / name)
        run_training("quantizer", out_dir=out, corpus_dir=corpus,
                     train_config=quick_train(),
                     vq_config=VqConfig(quantizer_kind="linear"))
        outs.append(out)
    for fname in ("checkpoint.ckpt", "metrics.jsonl"):
        with open(os.path.join(outs[0], fname), "rb") as f1, \
             open(os.path.join(outs[1], fname), "rb") as f2:
            assert f1.read() == f2.read(), fname


def test_resume_matches_uninterrupted(corpus, tmp_path):
    straight = str(tmp_path / "straight")
    run_training("quantizer", out_dir=straight, corpus_dir=corpus,
                 train_config=quick_train(steps=8, checkpoint_every=8),
                 vq_config=VqConfig(quantizer_kind="linear"))
    resumed = str(tmp_path / "resumed")
    run_training("quantizer", out_dir=resumed, corpus_dir=corpus,
                 train_config=quick_train(steps=4, checkpoint_every=4),
                 vq_config=VqConfig(quantizer_kind="linear"))
    run_training("quantizer", out_dir=resumed, corpus_dir=corpus,
                 train_config=quick_train(steps=8, checkpoint_every=8),
                 vq_config=VqConfig(quantizer_kind="linear"), resume=True)
    from tonetrans.checkpoint import load_checkpoint
    _, t1 = load_checkpoint(os.path.join(straight, "checkpoint.ckpt"))
    _, t2 = load_checkpoint(os.path.join(resumed, "checkpoint.ckpt"))
    assert sorted(t1) == sorted(t2)
    for k in t1:
        if t1[k].dtype.kind == "f":
            rel = np.max(np.abs(t1[k] - t2[k]) /
                         np.maximum(np.abs(t1[k]), 1e-12))
            assert rel <= 1e-6, (k, rel)
        else:
            np.testing.assert_array_equal(t1[k], t2[k])


def test_resume_rejects_config_change(corpus, tmp_path):
    out = str(tmp_path / "q")
    run_training("quantizer", out_dir=out, corpus_dir=corpus,
                 train_config=quick_train(steps=4, checkpoint_every=4),
                 vq_config=VqConfig(quantizer_kind="linear"))
    with pytest.raises(ConfigError):
        run_training("quantizer", out_dir=out, corpus_dir=corpus,
                     train_config=quick_train(steps=8, checkpoint_every=8),
                     vq_config=VqConfig(quantizer_kind="linear", latent_dim=32),
                     resume=True)


def test_s2st_requires_matching_quantizer(corpus, tmp_path):
    qdir = str(tmp_path / "q")
    run_training("quantizer", out_dir=qdir, corpus_dir=corpus,
                 train_config=quick_train(steps=4, checkpoint_every=4),
                 vq_config=VqConfig(quantizer_kind="linear", stride=2))
    with pytest.raises(ConfigError):
        run_training("s2st", out_dir=str(tmp_path / "m"), corpus_dir=corpus,
                     train_config=quick_train(steps=4, checkpoint_every=4),
                     model_config=ModelConfig(stride=4),
                     quantizer_path=os.path.join(qdir, "checkpoint.ckpt"))


def test_s2st_missing_quantizer_path(corpus, tmp_path):
    with pytest.raises((ConfigError, FileNotFoundError)):
        run_training("s2st", out_dir=str(tmp_path / "m"), corpus_dir=corpus,
                     train_config=quick_train(steps=4, checkpoint_every=4),
                     model_config=ModelConfig(),
                     quantizer_path=str(tmp_path / "missing.ckpt"))


def test_pretrain_stage_and_init_chain(corpus, tmp_path):
    qdir = str(tmp_path / "q")
    run_training("quantizer", out_dir=qdir, corpus_dir=corpus,
                 train_config=quick_train(steps=4, checkpoint_every=4),
                 vq_config=VqConfig(quantizer_kind="random"))
    pdir = str(tmp_path / "p")
    res = run_training("encoder_pretrain", out_dir=pdir, corpus_dir=corpus,
                       train_config=quick_train(steps=4, checkpoint_every=4),
                       quantizer_path=os.path.join(qdir, "checkpoint.ckpt"))
    assert len(res["loss_history"]) == 4
    mdir = str(tmp_path / "m")
    res2 = run_training("s2st", out_dir=mdir, corpus_dir=corpus,
                        train_config=quick_train(steps=4, checkpoint_every=4),
                        model_config=ModelConfig(),
                        quantizer_path=os.path.join(qdir, "checkpoint.ckpt"),
                        encoder_init_path=os.path.join(pdir, "checkpoint.ckpt"),
                        init_synth_from_vqvae=True)
    model, config, _ = load_model_checkpoint(os.path.join(mdir, "checkpoint.ckpt"))
    assert config["kind"] == "s2st_model"
    assert model.cfg.stride == 4


def test_encoder_init_weights_actually_copied(corpus, tmp_path):
    qdir = str(tmp_path / "q")
    run_training("quantizer", out_dir=qdir, corpus_dir=corpus,
                 train_config=quick_train(steps=4, checkpoint_every=4),
                 vq_config=VqConfig(quantizer_kind="random"))
    pdir = str(tmp_path / "p")
    run_training("encoder_pretrain", out_dir=pdir, corpus_dir=corpus,
                 train_config=quick_train(steps=4, checkpoint_every=4),
                 quantizer_path=os.path.join(qdir, "checkpoint.ckpt"))
    from tonetrans.checkpoint import load_checkpoint
    from tonetrans.harness import load_encoder_init
    from tonetrans.translator import TextlessModel
    _, ptensors = load_checkpoint(os.path.join(pdir, "checkpoint.ckpt"))
    model = TextlessModel(ModelConfig(), seed=123)
    load_encoder_init(os.path.join(pdir, "checkpoint.ckpt"), model)
    for name, tensor in model.encoder_parameters().items():
        np.testing.assert_array_equal(tensor.data, ptensors[name], err_msg=name)
