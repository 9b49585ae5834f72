"""Command-line surface: exit codes, file outputs, subcommand wiring."""

import csv
import json

import pytest

from duolog.cli import main

GOOD_SCENARIO = {
    "engine": "exch",
    "seed": 5,
    "workload": {"producers": 2, "consumers": 1, "record_size_bytes": 16,
                 "messages_per_producer": 6},
    "qos": {"delivery": "at_least_once", "ordering": "per_channel"},
    "topology": {"durable": True},
    "faults": [{"kind": "drop_ack", "on": "produce", "index": 3}],
}

TOPOLOGY = {
    "vhost": "/",
    "exchanges": [{"name": "ex", "kind": "topic"}],
    "queues": [{"name": "q"}],
    "bindings": [{"exchange": "ex", "queue": "q", "pattern": "a.#"}],
}


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

def test_verify_pass(tmp_path, capsys):
    rc = main(["verify", write_json(tmp_path / "s.json", GOOD_SCENARIO)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["verdict"] == "pass"
    assert out["no_loss"] is True


def test_verify_broken_engine_build_fails(tmp_path, capsys):
    broken = dict(GOOD_SCENARIO)
    broken["defects"] = ["lose_confirmed"]
    rc = main(["verify", write_json(tmp_path / "s.json", broken)])
    assert rc == 1
    out = json.loads(capsys.readouterr().out)
    assert out["verdict"] == "fail:loss"


def test_verify_missing_file():
    assert main(["verify", "/nonexistent/scenario.json"]) == 2


def test_verify_invalid_scenario(tmp_path):
    bad = dict(GOOD_SCENARIO, engine="bogus")
    assert main(["verify", write_json(tmp_path / "s.json", bad)]) == 2


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def test_bench_writes_csv_and_metadata(tmp_path, capsys):
    out = tmp_path / "results.csv"
    rc = main([
        "bench", "--engine", "exch", "--sweep", "record_size=64,256",
        "--producers", "1", "--consumers", "1",
        "--duration", "0.5", "--warmup", "0.1", "--out", str(out),
    ])
    assert rc == 0
    rows = list(csv.reader(out.open()))
    assert len(rows) == 3  # header + 2 sweep points
    meta = json.loads(out.with_suffix(".meta.json").read_text())
    assert meta["engine"] == "exch" and meta["sweep"]["values"] == [64, 256]


def test_bench_rejects_warmup_longer_than_duration(tmp_path):
    rc = main([
        "bench", "--engine", "log", "--sweep", "record_size=64",
        "--duration", "5", "--warmup", "10", "--out", str(tmp_path / "x.csv"),
    ])
    assert rc == 2


def test_bench_harness_mode_is_deterministic(tmp_path):
    out1, out2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    argv = ["bench", "--engine", "log", "--sweep", "record_size=16",
            "--mode", "harness", "--messages", "20", "--seed", "9"]
    assert main(argv + ["--out", str(out1)]) == 0
    assert main(argv + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_bench_bad_sweep(tmp_path):
    rc = main(["bench", "--engine", "log", "--sweep", "nope=1",
               "--out", str(tmp_path / "x.csv")])
    assert rc == 2


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

def test_model_predict_rabbit_preset(capsys):
    rc = main([
        "model", "predict", "rabbit", "--producers", "1", "--size", "100",
        "--preset", "rabbit.no_replication",
    ])
    assert rc == 0
    assert abs(float(capsys.readouterr().out) - 30153.2) < 1.0


def test_model_predict_kafka_with_constants_file(tmp_path, capsys):
    consts = tmp_path / "fit.json"
    consts.write_text(json.dumps(
        {"constants": {"u_routing": 3.8e-4, "u_topics": 2.1e-7, "u_byte": 4.9e-6}}
    ))
    rc = main([
        "model", "predict", "kafka", "--producers", "5", "--size", "4000",
        "--partitions", "10", "--topics", "5", "--effective-size", "4000",
        "--constants", str(consts),
    ])
    assert rc == 0
    assert abs(float(capsys.readouterr().out) - 72363.8) < 2.0


def test_model_fit_round_trip(tmp_path, capsys):
    data = tmp_path / "measurements.csv"
    with open(data, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["producers", "size_bytes", "pps"])
        for p in (1, 2):
            for s in (100, 1000, 10000, 40000):
                w.writerow([p, s, p / (3.0e-5 + s * 8.0e-9)])
    out = tmp_path / "fit.json"
    rc = main(["model", "fit", "--form", "rabbit", "--in", str(data), "--out", str(out)])
    assert rc == 0
    fitted = json.loads(out.read_text())
    assert abs(fitted["constants"]["u_routing"] - 3.0e-5) / 3.0e-5 < 0.01
    assert fitted["mean_relative_error"] < 1e-6


def test_model_fit_underdetermined_exits_2(tmp_path):
    data = tmp_path / "one.csv"
    with open(data, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["producers", "partitions", "topics", "effective_size", "pps"])
        w.writerow([1, 1, 1, 100, 5000.0])
    rc = main(["model", "fit", "--form", "kafka", "--in", str(data),
               "--out", str(tmp_path / "fit.json")])
    assert rc == 2


# --------------------------------------------------------------------------
# advise
# --------------------------------------------------------------------------

ADVISE_XL = [
    "advise", "--latency", "N", "--routing", "N", "--storage", "N",
    "--topic-throughput", "N", "--order", "N", "--elasticity", "N",
    "--throughput", "XL", "--at-least-once", "N", "--availability", "N",
]


def test_advise_match(capsys):
    assert main(ADVISE_XL) == 0
    assert capsys.readouterr().out.strip() == "Kafka with multiple partitions"


def test_advise_no_match():
    argv = list(ADVISE_XL)
    argv[argv.index("--order") + 1] = "Y"  # ordered XL profile: no row
    assert main(argv) == 3


def test_advise_missing_flag_is_usage_error():
    assert main(ADVISE_XL[:-2]) == 2


# --------------------------------------------------------------------------
# topo
# --------------------------------------------------------------------------

def test_topo_valid(tmp_path):
    assert main(["topo", write_json(tmp_path / "t.json", TOPOLOGY)]) == 0


def test_topo_invalid(tmp_path):
    bad = {"exchanges": [{"name": "e", "kind": "bogus"}]}
    assert main(["topo", write_json(tmp_path / "t.json", bad)]) == 1


def test_topo_missing_file():
    assert main(["topo", "/nonexistent/topo.json"]) == 2


# --------------------------------------------------------------------------
# generic surface
# --------------------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    ["--help"], ["verify", "--help"], ["bench", "--help"],
    ["model", "--help"], ["advise", "--help"], ["topo", "--help"],
])
def test_help_exits_zero(argv):
    assert main(argv) == 0


def test_unknown_subcommand_exits_two():
    assert main(["frobnicate"]) == 2
