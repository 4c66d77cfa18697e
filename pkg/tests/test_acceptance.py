"""Acceptance gate: eleven verifiable contracts, one verdict line each.

Every test registers an ``ACCEPTANCE <n>: PASS/FAIL — <contract>`` line
that the shared terminal-summary hook echoes after the run, so a test-log
skim shows the verdict of each criterion at a glance.  Tolerances are
part of the contract and are pinned in the assertions, not in helper
defaults.
"""

import math
import sys
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
import torch

from emovc.audio_frontend import F0Contour, MelConfig
from emovc.data_ingest import parse_manifest
from emovc.diagnostics import leakage_score
from emovc.emotion_embedder import (
    ClassifierArch,
    EmotionClassifier,
    train_stage1_emotion_conversion,
    train_stage2_classifier,
)
from emovc.losses import (
    LossWeights,
    adversarial_losses,
    asr_loss,
    cycle_loss,
    demo_loss,
    diversity_loss,
    discriminator_objective,
    f0_loss,
    generator_objective,
    inv_loss,
    norm_loss,
    speaker_adv_loss,
    style_reconstruction_loss,
)
from emovc.networks import ArchConfig, Generator, MappingNetwork, StyleEncoder, VCModel, model_from_checkpoint
from emovc.evaluation import cer, mae_embed, pcc, sss
from emovc.vc_trainer import (
    TrainingSession,
    probe_report,
    train_discriminator_step,
    train_generator_step,
)

import conftest
from conftest import build_corpus, tiny_extractor, tiny_train_config
from test_diagnostics import blob_embeddings


def _say(line: str) -> None:
    conftest.ACCEPTANCE_LINES.append(line)
    print(line, file=sys.__stdout__, flush=True)


@contextmanager
def verdict(n: int, contract: str):
    try:
        yield
    except BaseException:
        _say(f"ACCEPTANCE {n}: FAIL — {contract}")
        raise
    _say(f"ACCEPTANCE {n}: PASS — {contract}")


# --------------------------------------------------------------------------
# independent elementwise oracles (pure Python loops, no torch/numpy math)


def mean_abs_oracle(a: torch.Tensor, b: torch.Tensor) -> float:
    va = a.reshape(-1).tolist()
    vb = b.reshape(-1).tolist()
    return sum(abs(x - y) for x, y in zip(va, vb)) / len(va)


def style_oracle(ref, trg, ref2, mode: str) -> float:
    value = mean_abs_oracle(ref, trg)
    if mode == "augmented":
        value += mean_abs_oracle(trg, ref2) + mean_abs_oracle(ref, ref2)
    return value


def norm_oracle(a: torch.Tensor, b: torch.Tensor) -> float:
    frames_a = a.reshape(-1, a.shape[-1]).tolist()
    frames_b = b.reshape(-1, b.shape[-1]).tolist()
    diffs = [
        abs(sum(abs(v) for v in fa) - sum(abs(v) for v in fb))
        for fa, fb in zip(frames_a, frames_b)
    ]
    return sum(diffs) / len(diffs)


def normalize_oracle(hz, voiced) -> list[float]:
    vals = [h for h, v in zip(hz, voiced) if v]
    if not vals:
        return [0.0] * len(hz)
    mean = sum(vals) / len(vals)
    if mean <= 0.0:
        return [0.0] * len(hz)
    return [h / mean if v else 0.0 for h, v in zip(hz, voiced)]


def interp_oracle(values: list[float], length: int) -> list[float]:
    n = len(values)
    if n == length:
        return list(values)
    out = []
    for k in range(length):
        pos = k * (n - 1) / (length - 1) if length > 1 else 0.0
        lo = math.floor(pos)
        hi = min(lo + 1, n - 1)
        frac = pos - lo
        out.append(values[lo] * (1.0 - frac) + values[hi] * frac)
    return out


def f0_oracle(c_src: F0Contour, c_trg: F0Contour) -> float:
    a = normalize_oracle(c_src.hz.tolist(), c_src.voiced.tolist())
    b = normalize_oracle(c_trg.hz.tolist(), c_trg.voiced.tolist())
    n = min(len(a), len(b))
    a = interp_oracle(a, n)
    b = interp_oracle(b, n)
    return sum(abs(x - y) for x, y in zip(a, b)) / n


def _rand(rng: np.random.Generator, *shape) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape))


# --------------------------------------------------------------------------
# gradient-check helper: central differences at sampled coordinates


def check_gradient(fn, x0: torch.Tensor, coords: int = 8, eps: float = 1e-5, seed: int = 0):
    """Compare autograd against central differences at random coordinates."""
    x = x0.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.reshape(-1)
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(x0.numel(), generator=g)[: min(coords, x0.numel())]
    for i in idx.tolist():
        flat_p = x0.reshape(-1).clone()
        flat_m = x0.reshape(-1).clone()
        flat_p[i] += eps
        flat_m[i] -= eps
        plus = fn(flat_p.reshape(x0.shape)).item()
        minus = fn(flat_m.reshape(x0.shape)).item()
        numeric = (plus - minus) / (2.0 * eps)
        ana = analytic[i].item()
        scale = max(abs(numeric), abs(ana), 1e-8)
        assert abs(numeric - ana) <= 1e-3 * scale, (
            f"gradient mismatch at coordinate {i}: analytic {ana}, numeric {numeric}"
        )


# --------------------------------------------------------------------------
# the eleven criteria, in order


def test_criterion_01_loss_oracle_equivalence():
    with verdict(1, "distance losses match pure-loop oracles within 1e-9 on 100 inputs in < 10 s"):
        started = time.perf_counter()
        rng = np.random.default_rng(101)
        for _ in range(100):
            b, t, m = (int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(2, 9)))
            x = _rand(rng, b, t, m)
            y = _rand(rng, b, t, m)
            e1 = _rand(rng, b, m)
            e2 = _rand(rng, b, m)
            e3 = _rand(rng, b, m)

            assert float(demo_loss(e1, e2)) == pytest.approx(mean_abs_oracle(e1, e2), abs=1e-9)
            assert float(inv_loss(x, y)) == pytest.approx(mean_abs_oracle(x, y), abs=1e-9)
            assert float(cycle_loss(x, y)) == pytest.approx(mean_abs_oracle(x, y), abs=1e-9)
            assert float(asr_loss(x, y)) == pytest.approx(mean_abs_oracle(x, y), abs=1e-9)
            assert float(diversity_loss(x, y)) == pytest.approx(mean_abs_oracle(x, y), abs=1e-9)
            for mode in ("vanilla", "augmented"):
                got = float(style_reconstruction_loss(e1, e2, e3, mode=mode))
                assert got == pytest.approx(style_oracle(e1, e2, e3, mode), abs=1e-9)
            assert float(norm_loss(x, y)) == pytest.approx(norm_oracle(x, y), abs=1e-9)

            n1, n2 = int(rng.integers(3, 12)), int(rng.integers(3, 12))
            c1 = F0Contour(hz=rng.uniform(80, 300, n1), voiced=rng.random(n1) > 0.3)
            c2 = F0Contour(hz=rng.uniform(80, 300, n2), voiced=rng.random(n2) > 0.3)
            assert f0_loss(c1, c2) == pytest.approx(f0_oracle(c1, c2), abs=1e-9)
        elapsed = time.perf_counter() - started
        assert elapsed < 10.0, f"oracle sweep took {elapsed:.1f}s"


def test_criterion_02_augmented_style_structure():
    with verdict(2, "augmented style loss is exactly 2x vanilla when both references agree, 0 when all equal"):
        rng = np.random.default_rng(22)
        for _ in range(20):
            ref = _rand(rng, 3, 64)
            trg = _rand(rng, 3, 64)
            vanilla = float(style_reconstruction_loss(ref, trg, ref, mode="vanilla"))
            augmented = float(style_reconstruction_loss(ref, trg, ref, mode="augmented"))
            assert augmented == 2.0 * vanilla
            assert float(style_reconstruction_loss(trg, trg, trg, mode="augmented")) == 0.0


def test_criterion_03_objective_arithmetic():
    with verdict(3, "generator objective of all-ones parts is 29.5; discriminator objective(1, 2) is -0.8"):
        w = LossWeights()
        parts = {k: 1.0 for k in ("adv", "spk", "style", "div", "asr", "norm", "cycle", "f0", "demo", "inv")}
        assert generator_objective(parts, w) == 29.5
        assert discriminator_objective(1.0, 2.0, w) == -0.8


def test_criterion_04_gradient_checks():
    with verdict(4, "autograd matches central differences within rel 1e-3 at 64-bit, incl. the composed emotion map"):
        started = time.perf_counter()
        rng = np.random.default_rng(44)
        e_const = _rand(rng, 4, 16)
        check_gradient(lambda x: demo_loss(x, e_const), _rand(rng, 4, 16))
        code_const = _rand(rng, 2, 3, 8)
        check_gradient(lambda x: inv_loss(x, code_const), _rand(rng, 2, 3, 8))
        ref, ref2 = _rand(rng, 4, 16), _rand(rng, 4, 16)
        check_gradient(
            lambda t: style_reconstruction_loss(ref, t, ref2, mode="augmented"),
            _rand(rng, 4, 16),
        )
        check_gradient(lambda f: adversarial_losses(None, f, side="generator"), _rand(rng, 6))
        fake_const = _rand(rng, 6)
        check_gradient(
            lambda r: adversarial_losses(r, fake_const, side="discriminator"), _rand(rng, 6)
        )
        labels = [0, 2, 1, 2]
        for phase in ("generator_targets_trg", "discriminator_classifies_src"):
            check_gradient(
                lambda t: speaker_adv_loss(t, labels, phase=phase), _rand(rng, 4, 3)
            )

        # composed map: emotion-embedding distance of a generated mel,
        # differentiated all the way back to the source mel
        torch.manual_seed(4)
        n_mels = 12
        arch = ArchConfig(
            n_mels=n_mels, num_domains=2, base_channels=4, style_dim=8,
            latent_dim=4, trunk_dim=16, map_hidden=8, disc_channels=4,
        )
        gen = Generator(arch).double().eval()
        clf = EmotionClassifier(
            ClassifierArch(n_mels=n_mels, base_channels=4, trunk_dim=16, hidden_dim=8, embed_dim=8),
            MelConfig(n_mels=n_mels),
        ).double().eval()
        f0 = torch.rand(1, 8, dtype=torch.float64) + 0.5
        style = torch.randn(1, arch.style_dim, dtype=torch.float64)
        target = torch.randn(1, 8, dtype=torch.float64)
        check_gradient(
            lambda x: demo_loss(clf.embed(gen(x, f0, style)), target),
            torch.randn(1, 8, n_mels, dtype=torch.float64),
        )
        elapsed = time.perf_counter() - started
        assert elapsed < 120.0, f"gradient checks took {elapsed:.1f}s"


def _clone_state(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _assert_bit_equal(before: dict, module: torch.nn.Module, prefixes: tuple[str, ...]):
    after = module.state_dict()
    for key, tensor in before.items():
        if key.startswith(prefixes):
            assert torch.equal(tensor, after[key]), f"{key} changed"


def test_criterion_05_isolation_contracts(corpus, tmp_path):
    with verdict(5, "each optimization step leaves the other side's parameters (and the frozen trunk) bit-equal"):
        extractor = tiny_extractor()
        cfg = tiny_train_config(weights=LossWeights())  # emotion term active
        session = TrainingSession(corpus["records"], cfg, emotion_extractor=extractor)
        batch = session.next_batch()

        model_snap = _clone_state(session.model)
        emo_snap = _clone_state(extractor)
        train_discriminator_step(session.model, batch, cfg, session.opt_d, 0, session.z_source)
        _assert_bit_equal(model_snap, session.model, ("generator.", "style_encoder.", "mapping."))
        _assert_bit_equal(emo_snap, extractor, ("",))

        model_snap = _clone_state(session.model)
        train_generator_step(
            session.model, batch, cfg, session.opt_g, 0,
            emotion_extractor=extractor,
            content_features=session.content_features,
            pitch_proxy=session.pitch_proxy,
            z_source=session.z_source,
        )
        _assert_bit_equal(model_snap, session.model, ("discriminator.", "speaker_classifier."))
        _assert_bit_equal(emo_snap, extractor, ("",))

        # second-stage head training must not move the carried-over trunk
        stage1 = train_stage1_emotion_conversion(
            corpus["records"], tiny_train_config(), tmp_path / "s1"
        )
        clf = train_stage2_classifier(stage1.final, corpus["records"], tiny_train_config(), max_steps=3)
        stage1_model, _, _, _ = model_from_checkpoint(stage1.final)
        trunk_snap = _clone_state(stage1_model.style_encoder.trunk)
        _assert_bit_equal(trunk_snap, clf.trunk, ("",))


def test_criterion_06_toy_overfit(tmp_path):
    with verdict(6, "200 toy training steps strictly reduce the probe total and cycle loss from their step-10 values in < 15 min"):
        started = time.perf_counter()
        manifest = build_corpus(tmp_path / "toy", speakers=2, clips=8, seconds=0.5, seed=0)
        records = parse_manifest(manifest)
        cfg = tiny_train_config(batch_size=4, seed=5, max_steps=200, log_every=50)
        session = TrainingSession(records, cfg)
        probe = session.next_batch()

        def snapshot():
            report = probe_report(
                session.model, probe, cfg, step_index=0,
                pitch_proxy=session.pitch_proxy,
                content_features=session.content_features,
            )
            return report.total, report.terms["cycle"]

        total_10 = cycle_10 = None
        for _ in range(200):
            session.step()
            if session.step_index == 10:
                total_10, cycle_10 = snapshot()
        total_200, cycle_200 = snapshot()
        elapsed = time.perf_counter() - started

        assert total_200 < total_10, f"probe total {total_10} -> {total_200}"
        assert cycle_200 < cycle_10, f"probe cycle {cycle_10} -> {cycle_200}"
        assert elapsed < 900.0, f"toy overfit took {elapsed:.0f}s"


def _first_step(records, cfg, extractor):
    session = TrainingSession(records, cfg, emotion_extractor=extractor)
    return session.step()


def test_criterion_07_ablation_fidelity(corpus):
    with verdict(7, "ablating the emotion term or the augmented style mode changes only the targeted report entries"):
        extractor = tiny_extractor()
        base_cfg = tiny_train_config(weights=LossWeights(), seed=21)
        d_base, g_base = _first_step(corpus["records"], base_cfg, extractor)

        no_demo = replace(base_cfg, weights=replace(base_cfg.weights, demo=0.0))
        d_demo, g_demo = _first_step(corpus["records"], no_demo, extractor)

        vanilla = replace(base_cfg, style_loss_mode="vanilla")
        d_style, g_style = _first_step(corpus["records"], vanilla, extractor)

        assert d_demo.to_json() == d_base.to_json()
        assert d_style.to_json() == d_base.to_json()
        for key, value in g_base.terms.items():
            if key == "demo":
                assert g_demo.terms[key] != value
            else:
                assert g_demo.terms[key] == value, key
            if key == "style":
                assert g_style.terms[key] != value
            else:
                assert g_style.terms[key] == value, key
        assert g_demo.total != g_base.total
        assert g_style.total != g_base.total


def test_criterion_08_metric_fixtures():
    with verdict(8, "correlation, error-rate, embedding-distance, and similarity metrics match their fixtures"):
        xs, ys = [1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 5.0, 9.0]
        mx, my = sum(xs) / 4, sum(ys) / 4
        cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
        expected = cov / math.sqrt(
            sum((x - mx) ** 2 for x in xs) * sum((y - my) ** 2 for y in ys)
        )
        got = pcc(
            F0Contour(hz=np.array(xs), voiced=np.ones(4, bool)),
            F0Contour(hz=np.array(ys), voiced=np.ones(4, bool)),
        )
        assert got == pytest.approx(expected, abs=1e-9)

        assert round(cer("abc", "abd"), 2) == 33.33

        rng = np.random.default_rng(88)
        for _ in range(100):
            a = rng.standard_normal(64).astype(np.float32)
            b = rng.standard_normal(64).astype(np.float32)
            assert mae_embed(a, b) == float(demo_loss(torch.from_numpy(a), torch.from_numpy(b)))

        assert sss(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(0.7071, abs=1e-4)


def test_criterion_09_leakage_diagnostic():
    with verdict(9, "emotion-aligned blobs raise the leakage flag and speaker-aligned blobs do not, 100/100 each"):
        for seed in range(100):
            aligned = leakage_score(blob_embeddings(by="emotion", seed=seed))
            assert aligned["leakage_flag"] is True, f"seed {seed}"
            grounded = leakage_score(blob_embeddings(by="speaker", seed=seed))
            assert grounded["leakage_flag"] is False, f"seed {seed}"


def test_criterion_10_shape_contracts():
    with verdict(10, "embedding widths 64/512/5 at defaults; generator preserves shape for 8/77/192/500 frames"):
        torch.manual_seed(10)
        arch = ArchConfig(num_domains=2)
        se = StyleEncoder(arch).eval()
        mapper = MappingNetwork(arch).eval()
        clf = EmotionClassifier(ClassifierArch(), MelConfig()).eval()
        mel = torch.randn(3, 40, 80)
        with torch.no_grad():
            assert se.shared(mel).shape == (3, 512)
            assert se(mel, 1).shape == (3, 64)
            assert mapper(torch.randn(3, arch.latent_dim), 0).shape == (3, 64)
            assert clf.embed(mel).shape == (3, 64)
            assert clf(mel).shape == (3, 5)

        model = VCModel(arch).eval()
        with torch.no_grad():
            for frames in (8, 77, 192, 500):
                x = torch.randn(1, frames, 80)
                f0 = torch.rand(1, frames) + 0.5
                style = torch.randn(1, arch.style_dim)
                assert model.generate(x, f0, style).shape == x.shape, frames


def test_criterion_11_determinism_and_round_trip(corpus, tmp_path):
    with verdict(11, "fixed-seed reruns reproduce loss reports bit-identically; checkpoints round-trip probe forwards bit-identically"):
        cfg = tiny_train_config(seed=31)
        runs = []
        for _ in range(2):
            session = TrainingSession(corpus["records"], cfg)
            runs.append([report.to_json() for _ in range(2) for report in session.step()])
        assert runs[0] == runs[1]

        session = TrainingSession(corpus["records"], cfg)
        session.step()
        path = session.save(tmp_path / "round_trip.pt")
        reloaded, _, _, _ = model_from_checkpoint(path)

        probe = session.next_batch()
        with torch.no_grad():
            style_a = session.model.style_encode(probe.ref_mel, probe.y_trg)
            style_b = reloaded.style_encode(probe.ref_mel, probe.y_trg)
            out_a = session.model.generate(probe.src_mel, probe.src_f0, style_a)
            out_b = reloaded.generate(probe.src_mel, probe.src_f0, style_b)
        assert torch.equal(style_a, style_b)
        assert torch.equal(out_a, out_b)
