import json
import math

import pytest

from sdlt.errors import ConfigError, InvalidShare, StepError
from sdlt.harness import (
    MetricSummary,
    binomial_stderr,
    catchup_oracle,
    config_from_json,
    config_to_json,
    derive_seed,
    load_config,
    monte_carlo,
    rewrite_bound,
    run_scenario,
    run_trials,
    summarize,
    worker_width,
)
from sdlt.ledger import is_prefix
from sdlt.resolvers import check_strong, check_weak, resolve_ba, resolve_pow

BA_DOC = {
    "consensus": "BA",
    "horizon": 3,
    "genesis": {"tag": "ba", "ba_committee": ["C1", "C2", "C3", "C4"]},
    "roster": [{"id": "C1"}, {"id": "C2"}, {"id": "C3"}, {"id": "C4", "honest": False}, {"id": "OBS"}],
    "adversary": {"kind": "ba_forge"},
}

POW_DOC = {
    "consensus": "PoW",
    "horizon": 30,
    "seed": 5,
    "genesis": {"tag": "pow"},
    "roster": [{"id": "H", "power": 0.7}, {"id": "A", "honest": False, "power": 0.3}],
}


class TestSeeds:
    def test_golden(self):
        # frozen from the first run; any change breaks reproducibility of published runs
        assert derive_seed(0) == 0x6ACDF7D4CC7E5739
        assert derive_seed(42, 3, 7) == 0xEAB2BA98FA9ACF48
        assert derive_seed(1, 2) != derive_seed(2, 1)

    def test_stable(self):
        assert derive_seed(42, 3, 7) == derive_seed(42, 3, 7)
        assert 0 <= derive_seed(2**64 - 1, 5) < 2**64

    def test_distinct(self):
        seeds = {derive_seed(9, i) for i in range(2000)}
        assert len(seeds) == 2000


class TestWorkers:
    def test_width_from_env(self, monkeypatch):
        monkeypatch.setenv("SDLT_THREADS", "3")
        assert worker_width() == 3
        monkeypatch.setenv("SDLT_THREADS", "0")
        assert worker_width() >= 1

    def test_bad_env(self, monkeypatch):
        monkeypatch.setenv("SDLT_THREADS", "many")
        with pytest.raises(ConfigError):
            worker_width()

    def test_order_preserved_across_widths(self):
        jobs = [(i, 2) for i in range(40)]
        assert run_trials(pow, jobs, 1) == run_trials(pow, jobs, 4) == [i * i for i in range(40)]


class TestStatistics:
    def test_stderr(self):
        assert binomial_stderr(0.3, 100) == pytest.approx(math.sqrt(0.21 / 100))
        assert binomial_stderr(0.0, 10) == pytest.approx(math.sqrt(0.25 / 10))

    def test_summary_binary(self):
        s = summarize([0, 1, 1, 0] * 10)
        assert s.mean == 0.5 and s.n == 40
        lo, hi = s.ci99
        assert lo < 0.5 < hi

    def test_summary_continuous(self):
        s = summarize([1.0, 2.0, 3.0])
        assert s.stderr == pytest.approx(1 / math.sqrt(3))

    def test_single_sample_json(self):
        assert MetricSummary(1, 2.0, math.nan).to_json()["stderr"] is None

    def test_oracle_and_bound(self):
        assert catchup_oracle(0.7, 0.3, 2) == pytest.approx(9 / 49)
        assert rewrite_bound(0.21, 8) == pytest.approx(0.84**8)
        assert rewrite_bound(0.21, 8) == pytest.approx(0.2479, abs=1e-4)
        with pytest.raises(InvalidShare):
            catchup_oracle(0.5, 0.5, 1)
        with pytest.raises(InvalidShare):
            catchup_oracle(0.7, 0.2, 1)


class TestConfig:
    @pytest.mark.parametrize("doc", [BA_DOC, POW_DOC], ids=["ba", "pow"])
    def test_round_trip(self, doc):
        cfg = config_from_json(doc)
        again = config_from_json(json.loads(json.dumps(config_to_json(cfg))))
        assert again == cfg
        assert again.digest() == cfg.digest()

    def test_round_trip_binary_payload(self):
        cfg = config_from_json(BA_DOC)
        odd = config_to_json(cfg)
        odd["genesis"]["tag"] = b"\xff\x00tag".decode("utf-8", "surrogateescape")
        again = config_from_json(json.loads(json.dumps(odd)))
        assert again.genesis.tag == b"\xff\x00tag"
        assert config_from_json(json.loads(json.dumps(config_to_json(again)))) == again

    @pytest.mark.parametrize("patch,match", [
        ({"consensus": "PoX"}, "consensus"),
        ({"horizon": -1}, "horizon"),
        ({"roster": [{"id": "C1"}, {"id": "C1"}]}, "unique"),
        ({"adversary": {"kind": "private_mine"}}, "does not apply"),
        ({"seed": -4}, "seed"),
        ({"genesis": {"tag": "x", "ba_committee": ["Z"]}}, "missing"),
        ({"events": [{}]}, "event batches"),
    ])
    def test_rejects(self, patch, match):
        with pytest.raises(ConfigError, match=match):
            config_from_json({**BA_DOC, **patch})

    def test_missing_field(self):
        doc = dict(BA_DOC)
        del doc["horizon"]
        with pytest.raises(ConfigError, match="horizon"):
            config_from_json(doc)

    def test_parse_error_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"consensus": "BA",\n  horizon: 3}')
        with pytest.raises(ConfigError, match="line 2 column 3"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")


class TestRunScenario:
    def test_ba_trace(self):
        trace = run_scenario(config_from_json(BA_DOC))
        assert len(trace.states) == 4
        assert all(is_prefix(a, b) for a, b in zip(trace.states, trace.states[1:]))
        assert check_strong(resolve_ba, trace).passed
        assert trace.meta["byzantine"] == ["C4"]

    def test_ba_quorum_loss_is_step_error(self):
        doc = {**BA_DOC, "roster": [{"id": c, "honest": c in ("C1", "C2")} for c in ("C1", "C2", "C3", "C4")],
               "adversary": {"kind": "ba_forge", "withhold": True}}
        with pytest.raises(StepError) as exc:
            run_scenario(config_from_json(doc))
        assert exc.value.step == 0

    def test_pow_honest_only_is_consistent(self):
        trace = run_scenario(config_from_json(POW_DOC))
        assert trace.states[-1].height == 30
        assert check_weak(resolve_pow, trace)

    def test_pow_private_mining_meta(self):
        doc = {**POW_DOC, "adversary": {"kind": "private_mine", "fork_depth": 2}}
        trace = run_scenario(config_from_json(doc))
        meta = trace.meta
        assert meta["honest_blocks"] + meta["adversary_blocks"] == 30
        assert len(meta["producers"]) == 30

    def test_seeded_reproducible(self):
        a = run_scenario(config_from_json(POW_DOC))
        b = run_scenario(config_from_json(POW_DOC))
        assert json.dumps(a.to_json()) == json.dumps(b.to_json())
        c = run_scenario(config_from_json(POW_DOC).with_seed(6))
        assert a.meta["producers"] != c.meta["producers"]

    def test_pos_trace(self):
        doc = {
            "consensus": "PoS", "horizon": 2,
            "genesis": {"tag": "pos", "initial_stake": {"G": 10}},
            "roster": [{"id": "G", "honest": False}, {"id": "H"}],
            "events": [{"transfers": [["G", "H", 3]]}, {}],
        }
        trace = run_scenario(config_from_json(doc))
        assert trace.states[-1].records[0].evidence.transfers[0].amount == 3


def _height(trace):
    return {"final_height": trace.states[-1].height, "adv": trace.meta["adversary_blocks"] / 30}


class TestMonteCarlo:
    def test_width_independent(self):
        cfg = config_from_json({**POW_DOC, "adversary": {"kind": "private_mine", "fork_depth": 1}})
        one = monte_carlo(cfg, 24, _height, width=1)
        four = monte_carlo(cfg, 24, _height, width=4)
        assert one == four
        assert set(one) == {"adv", "final_height"}

    def test_adversary_share_tracks_power(self):
        agg = monte_carlo(config_from_json(POW_DOC), 200, _height, width=1)
        assert abs(agg["adv"].mean - 0.3) < 3 * agg["adv"].stderr
