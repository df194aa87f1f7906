import csv
from dataclasses import replace

import numpy as np
import pytest

from sghmcseg.config import config_from_dict
from sghmcseg.protocols import (ProtocolSpec, evaluate_probs, functional_diversity, make_protocol, prior_sweep,
                                run_protocol, temperature_sweep, write_csv)
from sghmcseg.sampler import SamplerConfig
from sghmcseg.synth import SceneConfig, generate_dataset

TINY = {
    "model": {"levels": 2, "base_channels": 4},
    "sampler": {"epochs": 8, "cycles": 2, "restart_epochs": 1, "thin_stride": 1, "burn_in": 0.5},
    "energy": {"batch_size": 4},
    "protocol": {"members": 2, "samples": 4},
    "augment": {"enabled": False},
}


@pytest.fixture(scope="module")
def cfg():
    return config_from_dict(TINY)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SceneConfig(), {"train": 4, "val": 2, "test_in": 2, "test_shift": 2}, seed=0)


@pytest.fixture(scope="module")
def cache():
    return {}


class TestSpec:
    def test_recipes(self, cfg):
        assert make_protocol("vanilla", cfg).sampler.schedule == "poly"
        assert make_protocol("deep-ensembles", cfg).members == 2
        assert make_protocol("mc-dropout", cfg).model.dropout_p == cfg.protocol.mc_dropout_p
        sc = make_protocol("sgd-const", cfg).sampler
        assert sc.cycles == 1 and sc.temperature == 0.0
        assert make_protocol("sghmc-multi", cfg).sampler == cfg.sampler

    def test_validation(self, cfg):
        with pytest.raises(ValueError):
            make_protocol("bayes-by-backprop", cfg)
        with pytest.raises(ValueError):
            ProtocolSpec("deep-ensembles", sampler=SamplerConfig(temperature=1e-5))
        with pytest.raises(ValueError):
            ProtocolSpec("sgd-const", sampler=SamplerConfig(temperature=0.0, cycles=3))
        with pytest.raises(ValueError):
            ProtocolSpec("vanilla", members=0)


class TestRun:
    def test_vanilla_keeps_final_weights(self, cfg, data, cache):
        res = run_protocol(make_protocol("vanilla", cfg), data, 0, cfg, cache)
        assert len(res.samples) == 1 and len(res.stores[0]) == 1
        assert res.stores[0].checkpoints[0].epoch == cfg.sampler.epochs - 1

    def test_single_is_a_suffix_of_multi(self, cfg, data, cache):
        multi = run_protocol(make_protocol("sghmc-multi", cfg, samples=4), data, 0, cfg, cache)
        single = run_protocol(make_protocol("sghmc-single", cfg, samples=4), data, 0, cfg, cache)
        assert multi.stores[0] is single.stores[0]                  # the chain ran once
        last = max(multi.stores[0].cycles)
        multi_last = [w.values for c, w in zip(multi.stores[0].cycles, multi.stores[0].weights()) if c == last]
        assert len(single.samples) == len(multi_last)
        for a, b in zip(single.samples, multi_last):
            np.testing.assert_array_equal(a.values, b)
        assert {c.cycle for c in multi.stores[0]} == {0, 1}

    def test_sgd_const_equals_one_cycle_cold_sghmc(self, cfg, data):
        sgd = make_protocol("sgd-const", cfg)
        sghmc = make_protocol("sghmc-multi", cfg, sampler=sgd.sampler)
        a = run_protocol(sgd, data, 5, cfg)
        b = run_protocol(sghmc, data, 5, cfg)
        assert len(a.stores[0]) == len(b.stores[0]) > 0
        for x, y in zip(a.stores[0].weights(), b.stores[0].weights()):
            np.testing.assert_array_equal(x.values, y.values)

    def test_rerun_is_bit_identical(self, cfg, data):
        spec = make_protocol("deep-ensembles", cfg)
        a = run_protocol(spec, data, 3, cfg)
        b = run_protocol(spec, data, 3, cfg)
        assert a.provenance == b.provenance
        for x, y in zip(a.samples, b.samples):
            np.testing.assert_array_equal(x.values, y.values)
        seeds = a.provenance["seeds"]["members"]
        assert len(seeds) == 2 and seeds[0]["init"] != seeds[1]["init"]
        assert not np.array_equal(a.samples[0].values, a.samples[1].values)

    def test_mc_dropout_prediction(self, cfg, data):
        res = run_protocol(make_protocol("mc-dropout", cfg), data, 0, cfg)
        x, y = data["val"]
        p = res.predict(x)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)
        rep = functional_diversity(res, x, y)
        assert rep.functional.shape == (5, 5) and rep.volume is None
        ev = evaluate_probs(p, y)
        assert ev.dice.shape == (2, 3) and ev.nll > 0


class TestSweeps:
    def test_temperature_sweep_rows(self, cfg, data, cache, tmp_path):
        rows = temperature_sweep([0.0, 1e-5], [False], data, 0, cfg, cache=cache)
        assert [r["temperature"] for r in rows] == [0.0, 1e-5]
        for r in rows:
            assert np.isfinite(r["nll"]) and 0 <= r["mean_dice"] <= 1
        p = write_csv(rows, tmp_path / "sweep.csv")
        with p.open() as fh:
            assert len(list(csv.DictReader(fh))) == 2

    def test_needs_two_temperatures(self, cfg, data):
        with pytest.raises(ValueError):
            temperature_sweep([1e-5], [False], data, 0, cfg)

    def test_prior_sweep(self, cfg, data, cache):
        small = replace(cfg, sampler=replace(cfg.sampler, epochs=4, restart_epochs=0),
                        protocol=replace(cfg.protocol, samples=2))
        rows = prior_sweep([1e-3, 1e-1], data, 0, small, cache=cache)
        assert [r["lam"] for r in rows] == [1e-3, 1e-1]
