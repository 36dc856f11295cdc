import json
import os

import pandas as pd
import pytest

from cli import main, parse_coalition
from exceptions import ArgumentError
from mlp import load_model


def write_game(tmp_path, source, x, baseline, name="game.json", **extra):
    path = tmp_path / name
    path.write_text(json.dumps({"n": len(x), "backend": {"kind": "expr", "source": source},
                                "x": x, "baseline": baseline, **extra}))
    return str(path)


@pytest.fixture
def and2_path(tmp_path):
    return write_game(tmp_path, "x1*x2", [1, 1], [0, 0])


class TestCoalitionArgument:
    def test_forms(self):
        assert parse_coalition("101", 3).bits == 0b101
        assert parse_coalition("1,3", 3).bits == 0b101
        assert parse_coalition("{2}", 3).bits == 0b010
        assert parse_coalition("", 3).bits == 0

    def test_rejects(self):
        with pytest.raises(ArgumentError):
            parse_coalition("a,b", 3)
        with pytest.raises(ArgumentError):
            parse_coalition("1,4", 3)


class TestGameCommands:
    def test_shapley_exact(self, tmp_path, and2_path):
        out = str(tmp_path / "phi.json")
        assert main(["shapley", "--game", and2_path, "--exact", "--out", out]) == 0
        payload = json.loads(open(out).read())
        assert payload["phi"] == [0.5, 0.5]
        assert payload["method"] == {"kind": "exact"}
        manifest = json.loads(open(out + ".manifest.json").read())
        assert manifest["command"] == "shapley"
        assert manifest["inputs"]["game"] == os.path.abspath(and2_path)

    def test_shapley_sampled_reproducible(self, tmp_path, and2_path):
        outs = [str(tmp_path / f"run{k}.json") for k in range(2)]
        for out in outs:
            assert main(["shapley", "--game", and2_path, "--perms", "500", "--seed", "3", "--out", out]) == 0
        assert open(outs[0], "rb").read() == open(outs[1], "rb").read()
        assert "stderr" in json.loads(open(outs[0]).read())

    def test_stdout(self, capsys, and2_path):
        assert main(["eval", "--game", and2_path, "--coalition", "11"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload == {"coalition": "{1,2}", "bits": 3, "value": 1.0}

    def test_spectrum(self, tmp_path, capsys):
        path = write_game(tmp_path, "x1*x2*x3*x4*x5", [1] * 5, [0] * 5)
        assert main(["spectrum", "--game", path]) == 0
        assert capsys.readouterr().out == "order,ratio\n1,0.0\n2,0.0\n3,0.0\n4,0.0\n5,1.0\n"

    def test_interactions(self, tmp_path, and2_path):
        out = str(tmp_path / "inter.csv")
        assert main(["interactions", "--game", and2_path, "--out", out]) == 0
        frame = pd.read_csv(out)
        assert list(frame.columns) == ["coalition_bits", "order", "value"]
        assert frame.to_numpy().tolist() == [[3, 2, 1.0]]

    def test_orders_and_saliency(self, tmp_path, capsys):
        path = write_game(tmp_path, "x1*x2*x3", [1] * 3, [0] * 3)
        assert main(["orders", "--game", path, "--var", "1"]) == 0
        assert capsys.readouterr().out == "order,value,method\n0,0.0,exact\n1,0.0,exact\n2,1.0,exact\n"
        assert main(["saliency", "--game", path, "--var", "1", "--top", "0.25"]) == 0
        assert capsys.readouterr().out == "variable,p\n2,1.0\n3,1.0\n"

    def test_sii_and_profile(self, tmp_path, capsys):
        path = write_game(tmp_path, "x1*x2*x3", [1] * 3, [0] * 3)
        assert main(["sii", "--game", path, "--coalition", "1,2"]) == 0
        assert json.loads(capsys.readouterr().out)["value"] == pytest.approx(0.5)
        assert main(["profile", "--game", path]) == 0
        assert capsys.readouterr().out.splitlines()[0] == "order,shapley,marginal"


class TestExitCodes:
    def test_malformed_manifest(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{oops")
        assert main(["shapley", "--game", str(path)]) == 2

    @pytest.mark.parametrize("backend, extra", [
        ({"kind": "expr"}, {}),
        ({"kind": "mlp"}, {"label": 1}),
        ({"kind": "mlp", "weights": "w.json"}, {"label": "one"}),
    ])
    def test_incomplete_backend(self, tmp_path, backend, extra):
        path = tmp_path / "game.json"
        path.write_text(json.dumps({"n": 1, "backend": backend, "x": [1], "baseline": [0], **extra}))
        assert main(["eval", "--game", str(path), "--coalition", ""]) == 2

    def test_usage_errors(self, and2_path):
        assert main(["shapley", "--game", and2_path, "--bogus"]) == 2
        assert main(["shapley"]) == 2
        assert main(["orders", "--game", and2_path, "--var", "3"]) == 2

    def test_bad_expression(self, tmp_path):
        path = write_game(tmp_path, "x1 $ x2", [1, 1], [0, 0])
        assert main(["shapley", "--game", path]) == 2

    def test_domain_error(self, tmp_path):
        path = write_game(tmp_path, "x1/x2", [1, 1], [0, 0])
        assert main(["shapley", "--game", path]) == 3
        assert main(["eval", "--game", path, "--coalition", "10"]) == 3

    def test_help(self):
        assert main(["--help"]) == 0


class TestLearn:
    def test_learn(self, tmp_path, and2_path):
        config = tmp_path / "learn.json"
        config.write_text(json.dumps({"game": "game.json", "truth": [0, 0], "loss": "marginal", "steps": 50,
                                      "step_size": 0.1, "batch": [[0, 0], [0, 1], [1, 0], [1, 1]]}))
        out = str(tmp_path / "b.json")
        assert main(["learn", "--config", str(config), "--out", out]) == 0
        payload = json.loads(open(out).read())
        assert set(payload) == {"b", "loss_trace", "converged", "accuracy"}
        assert 1 <= len(payload["loss_trace"]) <= 50

    def test_learn_missing_game_key(self, tmp_path):
        config = tmp_path / "learn.json"
        config.write_text(json.dumps({"steps": 5}))
        assert main(["learn", "--config", str(config)]) == 2

    def test_learn_domain_failure(self, tmp_path):
        write_game(tmp_path, "x1/x2", [1, 1], [0.5, 0.5])
        config = tmp_path / "learn.json"
        config.write_text(json.dumps({"game": "game.json", "init": "zero", "steps": 5}))
        assert main(["learn", "--config", str(config)]) == 3


class TestSynthCommands:
    def test_gen(self, tmp_path):
        out = str(tmp_path / "corpus.jsonl")
        assert main(["synth", "gen", "--count", "3", "--seed", "1", "--out", out]) == 0
        lines = open(out).read().splitlines()
        assert [json.loads(line)["name"] for line in lines] == ["synth-1-000", "synth-1-001", "synth-1-002"]
        assert json.loads(open(out + ".manifest.json").read())["seed"] == 1

    def test_bad_grammar(self, tmp_path):
        grammar = tmp_path / "grammar.json"
        grammar.write_text(json.dumps({"templates": ["spline"]}))
        assert main(["synth", "gen", "--count", "1", "--grammar", str(grammar)]) == 2

    def test_tsang(self, capsys):
        assert main(["synth", "tsang"]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 10

    def test_verify(self, tmp_path):
        corpus = tmp_path / "corpus.jsonl"
        corpus.write_text(json.dumps({"name": "and", "n": 2, "expr": "x1*x2", "domain": "binary",
                                      "truth": [0, 0]}) + "\n")
        config = tmp_path / "learn.json"
        config.write_text(json.dumps({"steps": 5}))
        out = str(tmp_path / "verify.csv")
        assert main(["synth", "verify", "--corpus", str(corpus), "--config", str(config),
                     "--losses", "marginal", "--inits", "zero", "--out", out]) == 0
        frame = pd.read_csv(out)
        assert list(frame.columns) == ["function", "loss", "init", "accuracy", "final_loss", "steps"]
        assert len(frame) == 1
        assert os.path.exists(out + ".summary.csv")


class TestMlpCommands:
    def test_blobs_train_and_attribute(self, tmp_path, capsys):
        data = str(tmp_path / "blobs.csv")
        assert main(["mlp", "blobs", "--per-class", "20", "--seed", "2", "--out", data]) == 0
        weights = str(tmp_path / "weights.json")
        assert main(["mlp", "train", "--data", data, "--arch", "4", "--epochs", "5", "--out", weights]) == 0
        assert load_model(weights).input_size == 2

        manifest = tmp_path / "mlp_game.json"
        manifest.write_text(json.dumps({"n": 2, "backend": {"kind": "mlp", "weights": "weights.json"},
                                        "label": 1, "transform": "logodds", "x": [0.2, 0.8],
                                        "baseline": [0.5, 0.5]}))
        assert main(["shapley", "--game", str(manifest)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert abs(payload["efficiency_gap"]) <= 1e-9

    def test_bad_arch(self, tmp_path):
        data = str(tmp_path / "blobs.csv")
        assert main(["mlp", "blobs", "--per-class", "5", "--out", data]) == 0
        assert main(["mlp", "train", "--data", data, "--arch", "four"]) == 2
