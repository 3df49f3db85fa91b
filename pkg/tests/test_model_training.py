import json
import struct

import numpy as np
import pytest

from irnet import training
from irnet.autodiff import Tape
from irnet.checkpoint import load_checkpoint, load_into, read_checkpoint, save_checkpoint
from irnet.config import FIDELITY_LR, TrainConfig
from irnet.episodes import EpisodeSampler, generate_synthetic, split_domains
from irnet.exceptions import (CheckpointError, ContractError, IncompatibleCheckpointError,
                              NumericError)
from irnet.model import RelationNetwork


def episode_for(data, cfg, seed=0, domains=("d0",)):
    return EpisodeSampler(data, list(domains), training.episode_spec(cfg), seed).sample()


def test_config_defaults_and_validation(tmp_path):
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.beta, cfg.n_layers, cfg.tasks_per_epoch) == (0.1, 1.0, 2, 100)
    assert cfg.warmup_proportion == 0.05 and cfg.weight_decay == 0.01
    assert FIDELITY_LR == 5e-5
    assert cfg.total_steps == cfg.epochs * cfg.tasks_per_epoch
    for bad in ({"lr": 0.0}, {"warmup_proportion": 1.0}, {"aggregation": "max"},
                {"edge_mode": "dot"}, {"n_way": 1}, {"init_scheme": "zeros"}):
        with pytest.raises(ContractError):
            TrainConfig(**bad)
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"nonsense": 1})
    (tmp_path / "c.json").write_text(json.dumps({"alpha": 0.5, "epochs": 3}))
    cfg = TrainConfig.from_file(tmp_path / "c.json", epochs=7, lr=None)
    assert (cfg.alpha, cfg.epochs, cfg.lr) == (0.5, 7, TrainConfig().lr)


def test_forward_shapes_and_mask(small_data, tiny_cfg):
    model = training.build_model(small_data, tiny_cfg)
    ep = episode_for(small_data, tiny_cfg)
    out = model.forward(ep)
    n_s = len(ep.support)
    assert out.scores.shape == (tiny_cfg.n_query, tiny_cfg.n_way)
    assert len(out.graph.edges) == tiny_cfg.n_layers + 1
    E0 = out.graph.edges[0].data
    assert (E0[n_s:] == 0).all() and (E0[:, n_s:] == 0).all()
    assert set(out.losses.as_floats()) == {"loss", "support_loss", "query_loss"}


def test_parameter_names_unique_and_frozen_embedding(small_data, tiny_cfg):
    model = training.build_model(small_data, tiny_cfg)
    names = list(model.named_parameters())
    assert len(names) == len(set(names))
    frozen = RelationNetwork(model.vocab, tiny_cfg.replace(freeze_embeddings=True))
    assert "encoder.embedding" not in {p.name for p in frozen.trainable_parameters()}


def test_near_identity_init(small_data, tiny_cfg):
    model = training.build_model(small_data, tiny_cfg)
    assert np.array_equal(model.encoder.W3.data, np.eye(8))
    assert all(np.array_equal(l.W4.data, np.eye(8)) for l in model.layers[1:])
    plain = training.build_model(small_data, tiny_cfg.replace(init_scheme="fan-uniform"))
    assert not np.array_equal(plain.encoder.W3.data, np.eye(8))
    # key/query maps are identical across schemes: same RNG draws
    assert np.array_equal(plain.layers[0].W_k.data, model.layers[0].W_k.data)


def test_train_epoch_steps_and_lowers_loss(small_data, tiny_cfg):
    cfg = tiny_cfg.replace(tasks_per_epoch=1)
    model = training.build_model(small_data, cfg)
    opt = training.make_optimizer(model)
    sampler = EpisodeSampler(small_data, ["d0"], training.episode_spec(cfg), 0)
    report = training.train_epoch(model, opt, sampler, cfg)
    assert opt.state.step == 1 and report.steps == 1


def test_zero_loss_weights_leave_parameters(small_data, tiny_cfg):
    cfg = tiny_cfg.replace(alpha=0.0, beta=0.0, weight_decay=0.0)
    model = training.build_model(small_data, cfg)
    before = model.state_arrays()
    sampler = EpisodeSampler(small_data, ["d0"], training.episode_spec(cfg), 0)
    report = training.train_epoch(model, training.make_optimizer(model), sampler, cfg)
    assert report.loss == 0.0
    after = model.state_arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_signal_first_epoch(small_data):
    cfg = TrainConfig(hidden_size=16, attention_size=16, n_way=3, n_query=8, epochs=1,
                      tasks_per_epoch=60, embedding_std=0.3, rotate_embeddings=True, lr=3e-3)
    model = training.build_model(small_data, cfg)
    sampler = EpisodeSampler(small_data, ["d0"], training.episode_spec(cfg), 1)
    report = training.train_epoch(model, training.make_optimizer(model), sampler, cfg)
    head, tail = np.mean(report.losses[:15]), np.mean(report.losses[-15:])
    assert tail < head


def test_numeric_failure_writes_rescue(small_data, tiny_cfg, tmp_path, monkeypatch):
    model = training.build_model(small_data, tiny_cfg)
    opt = training.make_optimizer(model)
    sampler = EpisodeSampler(small_data, ["d0"], training.episode_spec(tiny_cfg), 0)

    def boom(*args, **kwargs):
        raise NumericError("synthetic failure")

    monkeypatch.setattr(training, "train_step", boom)
    with pytest.raises(NumericError):
        training.train_epoch(model, opt, sampler, tiny_cfg, rescue_path=tmp_path / "rescue.ckpt")
    assert (tmp_path / "rescue.ckpt").exists()


def test_evaluate_is_pure_and_seeded(small_data, small_split, tiny_cfg):
    model = training.build_model(small_data, tiny_cfg)
    before = model.state_arrays()
    a, _ = training.evaluate(model, small_data, small_split.test, episodes=4)
    b, _ = training.evaluate(model, small_data, small_split.test, episodes=4)
    assert a == b and a.episodes == 4
    assert all(np.array_equal(before[k], v) for k, v in model.state_arrays().items())
    with pytest.raises(ContractError):
        training.evaluate(model, small_data, small_split.test, episodes=0)


def test_fit_with_split_writes_checkpoints(small_data, small_split, tiny_cfg, tmp_path):
    model = training.build_model(small_data, tiny_cfg)
    res = training.fit(model, small_data, small_split, checkpoint_dir=tmp_path)
    assert len(res.history) == 2 and res.best_epoch in (1, 2)
    assert res.test.episodes == tiny_cfg.eval_episodes
    assert {"best.ckpt", "final.ckpt"} <= {p.name for p in tmp_path.iterdir()}
    assert "val_macro_f1" in res.history[0]
    json.dumps(res.to_dict())


def test_fit_without_split(small_data, tiny_cfg):
    res = training.fit(training.build_model(small_data, tiny_cfg), small_data)
    assert res.test is None and res.best_epoch is None


def probe_loss(model, ep):
    return model.forward(ep).losses.total.item()


def test_checkpoint_roundtrip_bit_exact(small_data, tiny_cfg, tmp_path):
    model = training.build_model(small_data, tiny_cfg)
    opt = training.make_optimizer(model)
    sampler = EpisodeSampler(small_data, ["d0"], training.episode_spec(tiny_cfg), 0)
    training.train_epoch(model, opt, sampler, tiny_cfg)
    save_checkpoint(tmp_path / "m.ckpt", model, opt, {"k": 1}, {"note": "x"})
    back, back_opt, header = load_checkpoint(tmp_path / "m.ckpt")
    ep = episode_for(small_data, tiny_cfg, seed=9)
    assert probe_loss(back, ep) == probe_loss(model, ep)
    assert back_opt.state.step == opt.state.step == tiny_cfg.tasks_per_epoch
    assert all(np.array_equal(back_opt.state.m[k], opt.state.m[k]) for k in opt.state.m)
    assert header["rng_state"] == {"k": 1} and header["extra"] == {"note": "x"}
    assert {p.name for p in back_opt.params} == {p.name for p in opt.params}


def test_checkpoint_rejects_version_corruption_and_shape(small_data, tiny_cfg, tmp_path):
    model = training.build_model(small_data, tiny_cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    blob = path.read_bytes()
    (n,) = struct.unpack_from("<Q", blob)
    header = json.loads(blob[8:8 + n])
    header["version"] = 99
    head = json.dumps(header).encode()
    (tmp_path / "v.ckpt").write_bytes(struct.pack("<Q", len(head)) + head + blob[8 + n:])
    with pytest.raises(IncompatibleCheckpointError):
        read_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "c.ckpt").write_bytes(blob[:8] + b"{not json" + blob[17:])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "c.ckpt")
    (tmp_path / "t.ckpt").write_bytes(blob[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "t.ckpt")
    wide = RelationNetwork(model.vocab, tiny_cfg.replace(hidden_size=10))
    with pytest.raises(ContractError, match="encoder.embedding"):
        load_into(path, wide)


def test_gradients_flow_to_every_parameter(small_data, tiny_cfg):
    model = training.build_model(small_data, tiny_cfg.replace(init_scheme="fan-uniform"))
    ep = episode_for(small_data, tiny_cfg)
    model.zero_grad()
    with Tape() as tape:
        loss = model.loss(ep)
    tape.backward(loss)
    dead = [n for n, p in model.named_parameters().items() if not p.grad.any()]
    assert dead == []


def test_untrained_model_ranks_at_chance():
    data = generate_synthetic(n_instances=1500, seed=11)
    split = split_domains(data.domains, ["d1"], ["d2"])
    model = training.build_model(data, TrainConfig())
    agg, _ = training.evaluate(model, data, split.test, episodes=100)
    assert abs(agg.auc_mean - 0.5) <= 0.08
