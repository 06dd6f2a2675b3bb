import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from tlevo.chromosome import Chromosome, canonical_key, enumerate_chromosomes, map_to_architecture
from tlevo.fitness import (
    Concurrency,
    EvaluatorError,
    LookupEvaluator,
    SyntheticLandscape,
    TrainerBridge,
    TrainerBridgeConfig,
    bridge_evaluate,
    lookup_evaluate,
    synthetic_evaluate,
)


def chrom(*values):
    return Chromosome.from_values(*values)


def plan(*values):
    return map_to_architecture(chrom(*values))


TARGET = chrom(57, 2, 0.1, 0.1)


# --- synthetic ----------------------------------------------------------------


def test_synthetic_optimum_is_zero():
    land = SyntheticLandscape(TARGET)
    assert synthetic_evaluate(land, map_to_architecture(TARGET), 5) == 0.0


def test_synthetic_normalization():
    land = SyntheticLandscape(chrom(58, 0, 0.1, 0.1), weights=(1, 0, 0, 0))
    assert land.evaluate(plan(1, 0, 0.1, 0.1)) == 1.0
    assert land.evaluate(plan(1, 0, 0.000001, 0.9)) == 1.0


def test_synthetic_hand_values():
    land = SyntheticLandscape(TARGET)
    # |40-57|/57 + |5-2|/18 + 2/5 + 4/8
    expected = 17 / 57 + 3 / 18 + 2 / 5 + 4 / 8
    assert land.evaluate(plan(40, 5, 0.001, 0.5)) == pytest.approx(expected, abs=1e-15)


def test_synthetic_unique_argmin_by_enumeration():
    land = SyntheticLandscape(chrom(23, 11, 0.0001, 0.7), weights=(1.0, 0.5, 2.0, 0.25))
    losses = {c: land.loss_of(c) for c in enumerate_chromosomes()}
    best = min(losses.values())
    argmins = [c for c, v in losses.items() if v == best]
    assert argmins == [land.target]
    assert best == 0.0


def test_synthetic_strictly_increasing_in_distance():
    land = SyntheticLandscape(TARGET)
    steps = [land.evaluate(plan(57 - k, 2, 0.1, 0.1)) for k in range(0, 50, 7)]
    assert steps == sorted(steps) and len(set(steps)) == len(steps)


def test_synthetic_noise_is_repeatable():
    land = SyntheticLandscape(TARGET, noise_amplitude=0.05, noise_seed=3)
    p = plan(30, 4, 0.01, 0.3)
    first = land.evaluate(p)
    assert land.evaluate(p) == first
    assert 0 <= first - SyntheticLandscape(TARGET).evaluate(p) < 0.05
    other_seed = SyntheticLandscape(TARGET, noise_amplitude=0.05, noise_seed=4)
    assert other_seed.evaluate(p) != first


def test_synthetic_validation():
    with pytest.raises(ValueError):
        SyntheticLandscape(TARGET, weights=(1, -1, 0, 0))
    with pytest.raises(ValueError):
        SyntheticLandscape(TARGET, noise_amplitude=-1)


# --- lookup -------------------------------------------------------------------


def test_lookup_returns_stored_value():
    x = chrom(30, 4, 0.01, 0.3)
    table = {canonical_key(x): 0.3}
    assert lookup_evaluate(table, map_to_architecture(x)) == 0.3


def test_lookup_missing_key_raises():
    table = LookupEvaluator.from_losses({chrom(30, 4, 0.01, 0.3): 0.3})
    with pytest.raises(EvaluatorError, match="no loss recorded"):
        table.evaluate(plan(31, 4, 0.01, 0.3))


def test_lookup_csv_round_trip(tmp_path):
    losses = {c: 0.001 * i for i, c in enumerate(itertools.islice(enumerate_chromosomes(), 0, 5000, 37))}
    table = LookupEvaluator.from_losses(losses)
    path = tmp_path / "table.csv"
    table.to_csv(path)
    loaded = LookupEvaluator.from_csv(path)
    assert loaded.table == table.table


def test_lookup_csv_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("included_layers,frozen_layers,learning_rate,dropout\n10,1,0.1,0.1\n")
    with pytest.raises(ValueError, match="avg_loss"):
        LookupEvaluator.from_csv(path)


# --- trainer bridge -----------------------------------------------------------


def test_bridge_config_validation():
    with pytest.raises(ValueError):
        TrainerBridgeConfig([], request_timeout=1)
    with pytest.raises(ValueError):
        TrainerBridgeConfig(["x"], request_timeout=0)
    with pytest.raises(ValueError):
        TrainerBridgeConfig(["x"], pool_size=0)
    assert TrainerBridgeConfig("python3 train.py --fast").command == ("python3", "train.py", "--fast")


def test_bridge_echo(stub_command):
    cfg = TrainerBridgeConfig(stub_command("echo_trainer"), request_timeout=10)
    assert bridge_evaluate(cfg, plan(57, 2, 0.1, 0.1)) == 0.42


def test_bridge_reuses_child(stub_command):
    with TrainerBridge(TrainerBridgeConfig(stub_command("echo_trainer", 0.125), request_timeout=10)) as bridge:
        for n in range(5, 10):
            assert bridge.evaluate(plan(n, 0, 0.1, 0.1)) == 0.125
        assert len(bridge._all) == 1


def test_bridge_wire_format(stub_command, tmp_path):
    script = tmp_path / "record.py"
    log = tmp_path / "requests.jsonl"
    script.write_text(
        "import json, sys\n"
        f"log = open({str(log)!r}, 'a')\n"
        "for line in sys.stdin:\n"
        "    log.write(line); log.flush()\n"
        "    req = json.loads(line)\n"
        "    print(json.dumps({'id': req['id'], 'avg_loss': 0.5}), flush=True)\n"
    )
    import sys

    cfg = TrainerBridgeConfig([sys.executable, str(script)], request_timeout=10)
    bridge_evaluate(cfg, plan(57, 2, 0.1, 0.1), epochs=5)
    request = json.loads(log.read_text().splitlines()[0])
    assert set(request) == {"id", "epochs", "plan"}
    assert isinstance(request["id"], int)
    assert request["epochs"] == 5
    assert request["plan"] == {
        "block_layer_counts": [6, 12, 24, 15],
        "frozen_prefix": 2,
        "se_layer_count": 3,
        "learning_rate": 0.1,
        "dropout": 0.1,
    }


def test_bridge_retries_malformed(stub_command):
    cfg = TrainerBridgeConfig(stub_command("malformed_once_trainer"), request_timeout=10, max_retries=1)
    assert bridge_evaluate(cfg, plan(20, 2, 0.1, 0.1)) == 0.42


def test_bridge_malformed_without_retry_fails(stub_command):
    cfg = TrainerBridgeConfig(stub_command("malformed_once_trainer"), request_timeout=10, max_retries=0)
    with pytest.raises(EvaluatorError, match="this is not json"):
        bridge_evaluate(cfg, plan(20, 2, 0.1, 0.1))


def test_bridge_mismatched_id_is_malformed(stub_command):
    cfg = TrainerBridgeConfig(stub_command("wrong_id_trainer"), request_timeout=10, max_retries=1)
    with pytest.raises(EvaluatorError, match="malformed"):
        bridge_evaluate(cfg, plan(20, 2, 0.1, 0.1))


def test_bridge_error_response(stub_command):
    cfg = TrainerBridgeConfig(stub_command("error_trainer"), request_timeout=10)
    with pytest.raises(EvaluatorError, match="CUDA out of memory"):
        bridge_evaluate(cfg, plan(20, 2, 0.1, 0.1))


def test_bridge_child_exit_reports_stderr(stub_command):
    cfg = TrainerBridgeConfig(stub_command("crash_trainer"), request_timeout=10)
    with pytest.raises(EvaluatorError) as info:
        bridge_evaluate(cfg, plan(20, 2, 0.1, 0.1))
    assert "status 3" in str(info.value)
    assert "dataset not found" in str(info.value)


def test_bridge_missing_program():
    cfg = TrainerBridgeConfig(["/nonexistent/trainer"], request_timeout=1)
    with pytest.raises(EvaluatorError, match="cannot start trainer"):
        bridge_evaluate(cfg, plan(20, 2, 0.1, 0.1))


@pytest.mark.parametrize("retries", [0, 1])
def test_bridge_timeout_is_bounded(stub_command, retries):
    timeout = 0.4
    bridge = TrainerBridge(TrainerBridgeConfig(stub_command("hang_trainer"), request_timeout=timeout, max_retries=retries))
    start = time.monotonic()
    with pytest.raises(EvaluatorError, match="no response"):
        bridge.evaluate(plan(20, 2, 0.1, 0.1))
    elapsed = time.monotonic() - start
    children = list(bridge._all)
    bridge.close()
    # process start-up and kill/reap add a little on top of the timeouts
    assert elapsed < (retries + 1) * timeout + 2.0
    assert children == []


def test_bridge_kills_hung_child(stub_command):
    bridge = TrainerBridge(TrainerBridgeConfig(stub_command("hang_trainer"), request_timeout=0.3, max_retries=0))
    spawned = []
    original = bridge._spawn

    def spy():
        worker = original()
        spawned.append(worker)
        return worker

    bridge._spawn = spy
    with pytest.raises(EvaluatorError):
        bridge.evaluate(plan(20, 2, 0.1, 0.1))
    bridge.close()
    assert spawned and all(w.proc.returncode is not None for w in spawned)


def test_bridge_pool_runs_concurrently(stub_command, tmp_path):
    import sys

    script = tmp_path / "slow.py"
    script.write_text(
        "import json, sys, time\n"
        "for line in sys.stdin:\n"
        "    req = json.loads(line)\n"
        "    time.sleep(0.5)\n"
        "    print(json.dumps({'id': req['id'], 'avg_loss': sum(req['plan']['block_layer_counts']) / 100}), flush=True)\n"
    )
    cfg = TrainerBridgeConfig([sys.executable, str(script)], request_timeout=10, pool_size=4)
    with TrainerBridge(cfg) as bridge:
        assert bridge.concurrency is Concurrency.CONCURRENT
        assert bridge.max_workers == 4
        plans = [plan(n, 0, 0.1, 0.1) for n in (10, 20, 30, 40)]
        start = time.monotonic()
        with ThreadPoolExecutor(4) as pool:
            losses = list(pool.map(bridge.evaluate, plans))
        elapsed = time.monotonic() - start
    assert losses == [0.1, 0.2, 0.3, 0.4]
    assert elapsed < 1.9


def test_bridge_serial_by_default(stub_command):
    bridge = TrainerBridge(TrainerBridgeConfig(stub_command("echo_trainer")))
    assert bridge.concurrency is Concurrency.SERIAL
    bridge.close()
    with pytest.raises(EvaluatorError, match="closed"):
        bridge.evaluate(plan(20, 2, 0.1, 0.1))
