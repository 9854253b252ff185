import math

import numpy as np
import pytest

from graft.checkpoint import (HEADER, Checkpoint, CheckpointError, Entry, load_checkpoint, load_module_entries,
                              module_entries, save_checkpoint)
from graft.model import GraftConfig, GraftModel
from graft.nn import Parameter
from graft.optim import AdamW


def reference_adamw(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Scalar AdamW written out longhand, one python float at a time."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w = w - lr * wd * w
        w = w - lr * m_hat / (math.sqrt(v_hat) + eps)
    return w


def run(param, grads, **kw):
    opt = AdamW([param], **kw)
    for g in grads:
        param.grad = np.array(g, dtype=float)
        opt.step()
    return opt


class TestAdamW:
    def test_first_step_matches_reference(self):
        p = Parameter(np.array([1.0]), name="w")
        run(p, [[1.0]], lr=0.1)
        assert p.data[0] == reference_adamw(1.0, [1.0], 0.1)
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_many_steps_with_decay_match_reference(self):
        grads = [0.3, -1.2, 0.7, 2.0, -0.1, 0.0, 0.5]
        p = Parameter(np.array([0.8]), name="w")
        run(p, [[g] for g in grads], lr=0.05, weight_decay=0.01)
        assert p.data[0] == pytest.approx(reference_adamw(0.8, grads, 0.05, wd=0.01), abs=1e-15)

    def test_zero_gradient_no_decay_is_noop(self):
        p = Parameter(np.array([0.5, -2.0]), name="w")
        run(p, [[0.0, 0.0]] * 3, lr=0.1)
        assert np.array_equal(p.data, [0.5, -2.0])

    def test_decay_is_decoupled_from_moments(self):
        p = Parameter(np.array([2.0]), name="w")
        opt = run(p, [[0.0]], lr=0.1, weight_decay=0.5)
        assert p.data[0] == 2.0 - 0.1 * 0.5 * 2.0
        assert opt.m["w"][0] == 0.0 and opt.v["w"][0] == 0.0

    def test_frozen_parameter_untouched(self):
        p = Parameter(np.array([1.0, 2.0]), name="w")
        p.frozen = True
        run(p, [[1.0, 1.0]] * 3, lr=0.1, weight_decay=0.1)
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_mask_stays_zero_for_ten_steps(self):
        p = Parameter(np.array([1.0, 2.0, 3.0]), name="w")
        p.set_mask(np.array([True, False, True]))
        run(p, [[1.0, 5.0, -1.0]] * 10, lr=0.1, weight_decay=0.1)
        assert p.data[1] == 0.0 and p.data[0] != 1.0

    def test_clip_norm_scales_update(self):
        a = Parameter(np.array([0.0]), name="a")
        opt = AdamW([a], lr=1.0, clip_norm=0.5)
        a.grad = np.array([4.0])
        opt.step()
        # Adam normalises the step, so clipping shows up in the moments only
        assert opt.m["a"][0] == pytest.approx(0.1 * 0.5)


class TestCheckpoint:
    def test_roundtrip_preserves_everything(self, tmp_path):
        mask = np.array([[True, False], [True, True]])
        entries = {
            "w": Entry(np.array([[1.5, 0.0], [-2.0, 3.25]]), "param", frozen=True, mask=mask),
            "buf": Entry(np.arange(3.0), "buffer"),
        }
        path = save_checkpoint(tmp_path / "a.ckpt", Checkpoint(entries, {"k": [1, 2]}))
        assert path.read_bytes().startswith(HEADER)
        back = load_checkpoint(path)
        assert back.meta == {"k": [1, 2]}
        assert np.array_equal(back.entries["w"].data, entries["w"].data)
        assert np.array_equal(back.entries["w"].mask, mask)
        assert back.entries["w"].frozen and not back.entries["buf"].frozen

    def test_rejects_wrong_header_and_trailing_bytes(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.ckpt", Checkpoint({"x": Entry(np.ones(2), "param")}, {}))
        raw = path.read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT\n" + raw[len(HEADER):])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")
        (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "long.ckpt")

    def test_model_weights_roundtrip_bit_exact(self, tmp_path):
        cfg = GraftConfig(embed_dim=16, depth=1, heads=2, encoder_heads=2, n_classes=3)
        src, dst = GraftModel(cfg), GraftModel(GraftConfig(**{**cfg.to_dict(), "seed": 9}))
        save_checkpoint(tmp_path / "m.ckpt", Checkpoint(module_entries(src), {}))
        load_module_entries(dst, load_checkpoint(tmp_path / "m.ckpt").entries)
        for (n, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
            assert np.array_equal(a.data, b.data), n
