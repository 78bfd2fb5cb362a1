"""Acceptance suite: the end-to-end behavioral bars the package must clear.

Every test here exercises a full pipeline (train, fuzz, export, retrain) and
appends one PASS/FAIL line with measured numbers to the summary that conftest
prints after the run. Unit-level edge cases live in the per-module test files;
this file is only about whether the product delivers what it advertises.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import conftest
from test_nn import finite_difference

from neurofuzz import coverage, nn
from neurofuzz.architectures import build_model
from neurofuzz.cli import _pick_inputs
from neurofuzz.fuzzer import (
    FuzzConfig,
    SeedQueue,
    fuzz_corpus,
    read_campaign_records,
    relative_distance,
    write_campaign_report,
)
from neurofuzz.tensor import Tensor
from neurofuzz.trainer import TrainConfig, retrain_with_adversarial


def report(label: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def canonical_inputs(test_split):
    """The 20 test images a default-configuration campaign runs on."""
    return _pick_inputs(test_split, 20, FuzzConfig().rng_seed)


@pytest.fixture(scope="module")
def default_campaign(trained_model, canonical_inputs, tmp_path_factory):
    """One default-config campaign over the canonical inputs, plus its
    on-disk artifacts; shared by the yield, oracle and determinism tests."""
    start = time.perf_counter()
    rep = fuzz_corpus(trained_model, canonical_inputs, FuzzConfig())
    wall = time.perf_counter() - start
    out_dir = tmp_path_factory.mktemp("campaign")
    write_campaign_report(rep, out_dir)
    return rep, out_dir, wall


class TestGradients:
    def test_input_gradient_matches_finite_differences(self):
        start = time.perf_counter()
        worst = 0.0
        checked = 0
        triples = [("lenet1", s) for s in range(6)] + [("lenet4", s) for s in range(4)]
        for i, (arch, model_seed) in enumerate(triples):
            model = build_model(arch, rng_seed=model_seed)
            rng = np.random.default_rng(300 + i)
            x = Tensor.wrap(rng.random((28, 28, 1), dtype=np.float32))
            trace = nn.predict(model, x)
            neurons = coverage.all_neurons(model)
            chosen = rng.choice(len(neurons), size=10, replace=False)
            spec = nn.ObjectiveSpec(
                original_label=trace.predicted_label,
                topk_labels=tuple(nn.top_k_other_labels(trace, 4)),
                target_neurons=tuple(neurons[j] for j in chosen),
            )
            got = nn.input_gradient(model, x, spec).array.astype(np.float64)
            want = finite_difference(model, x, spec, h=1e-4)
            mask = np.abs(got) > 1e-6
            checked += int(mask.sum())
            if mask.any():
                rel = np.abs(got[mask] - want[mask]) / np.abs(want[mask])
                worst = max(worst, float(rel.max()))
        elapsed = time.perf_counter() - start
        ok = worst < 1e-3 and checked > 0 and elapsed < 60.0
        report(
            "input gradients",
            ok,
            f"{len(triples)} model/input/objective triples, {checked} elements "
            f"vs central differences, max rel err {worst:.2e}, {elapsed:.1f}s",
        )


class TestCoverageAccounting:
    def test_covered_set_equals_per_trace_union(self, trained_model, test_split,
                                                monkeypatch):
        captured = []
        inner = coverage.update

        def spy(tracker, model, trace):
            captured.append((tracker, trace))
            return inner(tracker, model, trace)

        monkeypatch.setattr(coverage, "update", spy)
        start = time.perf_counter()
        rep = fuzz_corpus(trained_model, _pick_inputs(test_split, 6, 11), FuzzConfig())
        elapsed = time.perf_counter() - start
        assert captured, "campaign never updated the tracker"
        tracker = captured[-1][0]

        threshold = FuzzConfig().activation_threshold
        union = set()
        for _, trace in captured:
            outs = coverage.neuron_outputs(trained_model, trace)
            by_layer = {}
            for nid, value in outs.items():
                by_layer.setdefault(nid.layer_index, []).append((nid, value))
            for pairs in by_layer.values():
                pairs.sort(key=lambda p: p[0].unit_index)
                scaled = coverage.scale_layer([v for _, v in pairs])
                union.update(
                    nid for (nid, _), s in zip(pairs, scaled) if s > threshold
                )

        rates = [p.coverage_rate for p in rep.coverage_curve]
        sets_match = tracker.covered_neurons() == frozenset(union)
        rate_match = abs(rep.final_coverage - len(union) / tracker.total_neurons) < 1e-12
        monotone = rates == sorted(rates)
        ok = sets_match and rate_match and monotone and elapsed < 60.0
        report(
            "coverage accounting",
            ok,
            f"covered set == union over {len(captured)} traces "
            f"({len(union)}/{tracker.total_neurons} neurons), curve monotone, "
            f"{elapsed:.1f}s",
        )


class TestCampaignYield:
    def test_default_campaign_finds_adversarials(self, default_campaign,
                                                 model_accuracy):
        rep, _, wall = default_campaign
        n = len(rep.records)
        flipped = len({r.input_index for r in rep.records})
        ok = model_accuracy >= 0.97 and n >= 20 and wall < 300.0
        report(
            "campaign yield",
            ok,
            f"model accuracy {model_accuracy:.4f}, {n} adversarial records "
            f"from 20 inputs ({flipped} inputs flipped) in {wall:.2f}s",
        )


class TestPerturbationBound:
    def test_kept_seeds_stay_inside_distance_bound(self, trained_model,
                                                   test_split, monkeypatch,
                                                   default_campaign):
        kept = []
        origin = {}
        inner = SeedQueue.push

        def spy(queue, seed):
            if seed.generation == 0:
                origin["x"] = seed.x
            else:
                kept.append(relative_distance(seed.x, origin["x"]))
            return inner(queue, seed)

        monkeypatch.setattr(SeedQueue, "push", spy)
        # a small within-bound step so the queue actually grows; the distance
        # gate itself stays at its default
        small = replace(FuzzConfig(), step_size=0.05)
        fuzz_corpus(trained_model, _pick_inputs(test_split, 8, 23), small)

        rep, _, _ = default_campaign
        mean_rel = float(np.mean([r.distance for r in rep.records]))
        mean_abs = float(np.mean([r.distance_abs for r in rep.records]))
        within = sum(d <= small.distance_max + 1e-9 for d in kept)
        ok = kept and within == len(kept)
        report(
            "perturbation bound",
            bool(ok),
            f"{within}/{len(kept)} kept seeds within rel {small.distance_max}; "
            f"adversarial outputs mean rel {mean_rel:.4f}, mean abs {mean_abs:.3f}",
        )


class TestGuidance:
    def test_each_strategy_beats_random_mutation(self, trained_model, test_split):
        start = time.perf_counter()
        wins = {}
        for strategy in (1, 2, 3, 4):
            won = 0
            for trial in range(5):
                inputs = _pick_inputs(test_split, 10, 100 + trial)
                # small step: label flips end a seed's run early, so at the
                # default step both sides would mostly compare how soon they
                # flip; here seeds survive, keeps happen, and the comparison
                # isolates where the mutation budget is SPENT
                cfg = replace(FuzzConfig(), strategies=(strategy,),
                              rng_seed=trial, step_size=0.1)
                guided = fuzz_corpus(trained_model, inputs, cfg)
                rand = fuzz_corpus(trained_model, inputs, cfg, mutation="random")
                won += guided.final_coverage > rand.final_coverage
            wins[strategy] = won
        elapsed = time.perf_counter() - start
        ok = all(w >= 4 for w in wins.values()) and elapsed < 900.0
        report(
            "guided vs random",
            ok,
            "wins over random per strategy: "
            + ", ".join(f"s{s}={w}/5" for s, w in wins.items())
            + f", {elapsed:.1f}s",
        )


class TestOracleSoundness:
    def test_exported_records_survive_quantized_roundtrip(self, default_campaign,
                                                          trained_model):
        _, out_dir, _ = default_campaign
        records = read_campaign_records(out_dir)
        assert records
        boundary = []
        for rec in records:
            label = nn.predict(trained_model, rec.mutated).predicted_label
            if label == rec.original_label:
                boundary.append(
                    f"input {rec.input_index} reverted to {label} after quantization"
                )
        rate = 1.0 - len(boundary) / len(records)
        ok = rate >= 0.95
        tail = f"; {' | '.join(boundary)}" if boundary else ""
        report(
            "oracle soundness",
            ok,
            f"{len(records) - len(boundary)}/{len(records)} records still "
            f"adversarial after PGM round-trip ({rate * 100.0:.1f}%){tail}",
        )


class TestRetraining:
    def test_retraining_absorbs_adversarial_set(self, trained_model, train_split,
                                                test_split):
        campaign = fuzz_corpus(
            trained_model, _pick_inputs(test_split, 130, 5), FuzzConfig()
        )
        records = list(campaign.records)
        # ~110 repair images are 0.5% of the corpus; repeating them gives
        # the repair enough gradient weight at a rate that leaves the rest
        # of the fit undisturbed
        result = retrain_with_adversarial(
            trained_model,
            train_split,
            test_split,
            records,
            TrainConfig(epochs=5, learning_rate=0.01),
            oversample=20,
        )
        drop = result.test_acc_before - result.test_acc_after
        ok = (
            len(records) >= 100
            and result.adv_acc_before < 0.05
            and result.adv_acc_after >= 0.80
            and drop <= 0.005 + 1e-9
        )
        report(
            "adversarial retraining",
            ok,
            f"{len(records)} records; adversarial accuracy "
            f"{result.adv_acc_before * 100.0:.1f}% -> {result.adv_acc_after * 100.0:.1f}%, "
            f"test accuracy {result.test_acc_before * 100.0:.2f}% -> "
            f"{result.test_acc_after * 100.0:.2f}% (drop {drop * 100.0:+.2f}pp)",
        )


class TestDeterminism:
    def test_same_seed_reproduces_campaign_bytes(self, trained_model,
                                                 canonical_inputs,
                                                 default_campaign, tmp_path):
        rep2 = fuzz_corpus(trained_model, canonical_inputs, FuzzConfig())
        out2 = tmp_path / "again"
        write_campaign_report(rep2, out2)
        _, out1, _ = default_campaign
        manifest_same = (out1 / "manifest.csv").read_bytes() == (out2 / "manifest.csv").read_bytes()
        curve_same = (out1 / "coverage.csv").read_bytes() == (out2 / "coverage.csv").read_bytes()
        ok = manifest_same and curve_same
        report(
            "determinism",
            ok,
            f"manifest.csv byte-identical: {manifest_same}, "
            f"coverage.csv byte-identical: {curve_same}",
        )
