import csv
import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from irnet.cli import main
from irnet.config import TrainConfig
from irnet.estimator import InstanceRelationClassifier, build_episode
from irnet.episodes import EpisodeSampler, EpisodeSpec
from irnet.exceptions import ContractError

TINY = dict(hidden_size=8, attention_size=6, n_way=3, n_query=4, epochs=1, tasks_per_epoch=3,
            eval_episodes=2, embedding_std=0.3)


def test_params_mirror_config():
    est = InstanceRelationClassifier(**TINY)
    assert set(est.get_params()) == set(TrainConfig().to_dict())
    assert est.get_config() == TrainConfig(**TINY)
    assert clone(est).get_params() == est.get_params()


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        InstanceRelationClassifier().predict(None)


def test_fit_predict_on_dataset(small_data, small_split, tmp_path):
    est = InstanceRelationClassifier(**TINY).fit(small_data, split=small_split)
    assert est.test_metrics_.episodes == 2 and est.best_epoch_ == 1
    ep = EpisodeSampler(small_data, small_split.test, EpisodeSpec(3, 1, 4), 0).sample()
    scores = est.decision_function(ep)
    assert scores.shape == (4, 3)
    assert np.array_equal(est.predict(ep), (scores > 0).astype(np.int8))
    assert 0.0 <= est.score(small_data, small_split.test, n_episodes=2) <= 1.0
    est.save(tmp_path / "e.ckpt")
    back = InstanceRelationClassifier.load(tmp_path / "e.ckpt")
    assert np.array_equal(back.decision_function(ep), scores)
    assert back.get_params() == est.get_params()


def test_fit_on_raw_text_and_predict_labels():
    texts, labels, domains = [], [], []
    for i in range(60):
        k = i % 3
        texts.append(f"word{k} thing{k} extra{i % 5}")
        labels.append([f"intent_{k}"])
        domains.append("a")
    est = InstanceRelationClassifier(**TINY).fit(texts, labels, domains=domains)
    out = est.predict_labels(["word0 thing0", "word1 thing1", "word2 thing2"],
                             ["intent_0", "intent_1", "intent_2"], ["word1 extra3", "thing2"])
    assert len(out) == 2
    assert all(set(row) <= {"intent_0", "intent_1", "intent_2"} for row in out)


def test_build_episode_validation():
    ep = build_episode(["a b", "c d"], [["x", "y"], "y"], ["a"], descriptions={"x": "ex"})
    assert ep.classes == ["x", "y"] and ep.descriptions[0] == ("ex",)
    assert ep.support_labels.tolist() == [[1, 1], [0, 1]]
    assert ep.sampled_classes.tolist() == [0, 1]
    with pytest.raises(ContractError):
        build_episode(["a"], ["x"], ["b"])  # one class
    with pytest.raises(ContractError):
        build_episode(["a", "!!"], ["x", "y"], ["b"])
    with pytest.raises(ContractError):
        build_episode(["a", "b"], ["x"], ["c"])
    with pytest.raises(ContractError):
        build_episode(["a", "b"], ["x", "y"], ["c"], query_labels=[["z"]])


# --- command line ------------------------------------------------------------

def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", "x", "--no-such-flag"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_synth_gen_is_reproducible(tmp_path):
    args = ["synth-gen", "--n-instances", "200", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.catalog.json").read_bytes() == (tmp_path / "b.catalog.json").read_bytes()


@pytest.fixture
def corpus(tmp_path):
    main(["synth-gen", "--n-classes", "12", "--vocab-size", "120", "--n-instances", "360",
          "--seed", "2", "--out", str(tmp_path / "d.jsonl")])
    return tmp_path / "d.jsonl", tmp_path / "d.catalog.json"


def tiny_flags():
    return ["--hidden-size", "8", "--attention-size", "6", "--n-way", "3", "--n-query", "4",
            "--epochs", "1", "--tasks-per-epoch", "2", "--eval-episodes", "2"]


def test_train_then_eval(tmp_path, corpus, capsys):
    data, cat = corpus
    (tmp_path / "cfg.json").write_text(json.dumps({"alpha": 0.2, "epochs": 5}))
    out = tmp_path / "run"
    rc = main(["train", "--config", str(tmp_path / "cfg.json"), *tiny_flags(), "--data", str(data),
               "--catalog", str(cat), "--out", str(out)])
    assert rc == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["alpha"] == 0.2 and saved["epochs"] == 1  # flag beats file
    assert (out / "best.ckpt").exists() and (out / "summary.csv").exists()
    lines = (out / "test_metrics.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["type"] == "aggregate"
    rc = main(["eval", str(out / "best.ckpt"), "--data", str(data), "--catalog", str(cat),
               "--domains", "d2", "--episodes", "2", "--seed", "1",
               "--summary-out", str(tmp_path / "e.csv"), "--metrics-out", str(tmp_path / "e.jsonl")])
    assert rc == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["episodes"] == 2


def test_sample_episodes_dump(tmp_path, corpus):
    data, cat = corpus
    rc = main(["sample-episodes", "--data", str(data), "--catalog", str(cat), "--n-way", "3",
               "--n-query", "2", "--count", "2", "--out", str(tmp_path / "e.jsonl")])
    assert rc == 0
    eps = [json.loads(l) for l in (tmp_path / "e.jsonl").read_text().splitlines()]
    assert len(eps) == 2 and len(eps[0]["classes"]) == 3


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--aggregation", "masked-softmax"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_bad_input_exit_code(tmp_path, capsys):
    rc = main(["eval", str(tmp_path / "missing.ckpt"), "--domains", "d2"])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_shot_sweep_small_range(tmp_path, corpus):
    data, cat = corpus
    rc = main(["shot-sweep", *tiny_flags(), "--data", str(data), "--catalog", str(cat),
               "--k-min", "1", "--k-max", "2", "--out", str(tmp_path / "s.csv")])
    assert rc == 0
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["k_shot"] for r in rows] == ["1", "2"]
