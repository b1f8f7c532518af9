import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from risfusion.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from risfusion.data import Dataset, Sample, make_toy_data, make_toy_split, read_manifest, split_regions, write_manifest
from risfusion.errors import FormatError, ShapeError, TrainingError, ValidationError
from risfusion.metrics import MetricsReport, iou
from risfusion.model import RISFusionModel
from risfusion.nn import Parameter
from risfusion.optim import AdamW, AdamWConfig
from risfusion.text import toy_embed
from risfusion.train import TrainConfig, batch_indices, evaluate, train

TINY = dict(fusion_channels=(4, 4, 8, 8), seg_channels=(4, 8, 8), text_dim=8, size=32, batch=2)


# -- optimiser -----------------------------------------------------------------

def param(value, group="fusion", grad=None):
    p = Parameter(np.asarray(value, dtype=np.float64), name="w", group=group)
    p.grad = None if grad is None else np.asarray(grad, dtype=np.float64)
    return p


def test_zero_grad_zero_decay_is_a_fixed_point():
    p = param([0.5, -2.0], grad=[0.0, 0.0])
    AdamW([p], AdamWConfig(weight_decay=0.0)).step()
    np.testing.assert_array_equal(p.data, [0.5, -2.0])


def test_single_step_matches_hand_computation():
    c = AdamWConfig(lr_seg=0.01, lr_fuse=0.02, weight_decay=0.1)
    p, q = param([1.0, -3.0], "fusion", [0.5, -0.25]), param([2.0], "segmentation", [4.0])
    AdamW([p, q], c).step()
    for x, g, lr in ((np.array([1.0, -3.0]), np.array([0.5, -0.25]), 0.02), (np.array([2.0]), np.array([4.0]), 0.01)):
        m_hat = (0.1 * g) / 0.1
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = x - lr * 0.1 * x - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        got = p.data if lr == 0.02 else q.data
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_decay_only_scales_weights():
    p = param([3.0, -1.5], grad=[0.0, 0.0])
    AdamW([p], AdamWConfig(lr_fuse=0.1, weight_decay=0.5)).step()
    np.testing.assert_allclose(p.data, np.array([3.0, -1.5]) * (1 - 0.1 * 0.5), rtol=0, atol=1e-15)


def test_missing_gradient_raises():
    with pytest.raises(TrainingError, match="no gradient"):
        AdamW([param([1.0])]).step()


def test_parameter_without_group_rejected():
    p = param([1.0])
    p.group = "other"
    with pytest.raises(ValidationError):
        AdamW([p])


def test_optimizer_config_validation():
    with pytest.raises(ValidationError):
        AdamWConfig(lr_seg=-1.0)
    with pytest.raises(ValidationError):
        AdamWConfig(beta1=1.0)


# -- metrics -------------------------------------------------------------------

def test_iou_examples():
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True
    b = np.zeros((4, 4), bool)
    b[:2, 1:3] = True
    assert iou(a, a) == 1.0
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-15)
    assert iou(a, ~a) == 0.0
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ShapeError):
        iou(a, a[:3])


class FixedMasks:
    """Stands in for a model and returns prepared probability maps in dataset order."""

    def __init__(self, probs):
        self.probs = list(probs)

    def __call__(self, vis, ir, embs):
        out, self.probs = np.stack(self.probs[:len(vis)])[:, None], self.probs[len(vis):]
        return SimpleNamespace(mask=SimpleNamespace(prob=out))


def tiny_dataset(masks):
    emb = toy_embed("hot blob upper left", 8)
    return Dataset(Sample(f"{i}", np.zeros((1, 5, 4)), np.zeros((3, 5, 4)), m, emb.expression, emb)
                   for i, m in enumerate(masks))


def test_evaluate_reproduces_hand_aggregated_fixture():
    target = np.ones((5, 4), bool)
    preds = []
    for hits in (11, 13, 15, 19):
        p = np.zeros(20)
        p[:hits] = 0.9
        preds.append(p.reshape(5, 4))
    report = evaluate(FixedMasks(preds), tiny_dataset([target] * 4), batch=3)
    np.testing.assert_allclose(report.per_sample_iou, [0.55, 0.65, 0.75, 0.95], rtol=0, atol=1e-15)
    assert report.mIoU == pytest.approx(0.725, abs=1e-12)
    assert report.precision_at == {0.5: 1.0, 0.6: 0.75, 0.7: 0.5, 0.8: 0.25, 0.9: 0.25}


def test_oracle_and_empty_predictors():
    g = np.random.default_rng(0)
    masks = [g.random((5, 4)) > 0.5 for _ in range(5)]
    for m in masks:
        m[0, 0] = True
    data = tiny_dataset(masks)
    assert evaluate(FixedMasks([m * 0.9 for m in masks]), data).mIoU == 1.0
    empty = evaluate(FixedMasks([np.zeros((5, 4))] * 5), data)
    assert empty.mIoU == 0.0 and set(empty.precision_at.values()) == {0.0}


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30))
def test_precision_is_monotone_and_bounded(ious):
    r = MetricsReport.from_ious(ious)
    ps = [r.precision_at[t] for t in sorted(r.precision_at)]
    assert all(a >= b for a, b in zip(ps, ps[1:]))
    assert all(0.0 <= p <= 1.0 for p in ps)
    assert min(ious) - 1e-12 <= r.mIoU <= max(ious) + 1e-12


def test_precision_monotone_on_1000_random_reports():
    g = np.random.default_rng(3)
    for _ in range(1000):
        r = MetricsReport.from_ious(g.random(g.integers(1, 40)))
        ps = [r.precision_at[t] for t in (0.5, 0.6, 0.7, 0.8, 0.9)]
        assert all(a >= b for a, b in zip(ps, ps[1:]))


def test_report_reaggregates_from_per_sample_values():
    g = np.random.default_rng(4)
    ious = g.random(17)
    r = MetricsReport.from_ious(ious)
    assert r.mIoU == pytest.approx(sum(ious) / 17, abs=1e-12)
    for t, p in r.precision_at.items():
        assert p == sum(1 for v in ious if v > t) / 17
    assert MetricsReport.from_dict(json.loads(json.dumps(r.to_dict()))) == r


def test_report_rejects_bad_values():
    with pytest.raises(ValidationError):
        MetricsReport.from_ious([])
    with pytest.raises(ValidationError):
        MetricsReport.from_ious([0.5, 1.2])


# -- region splitting ----------------------------------------------------------

def test_split_regions_connectivity():
    diag = np.eye(3, dtype=int)
    assert len(split_regions(diag, 8)) == 1
    assert len(split_regions(diag, 4)) == 3
    two = np.zeros((4, 6), int)
    two[0, 0] = two[3, 5] = 1
    first, second = split_regions(two)
    assert first[0, 0] and second[3, 5]


def test_split_regions_errors():
    with pytest.raises(ValidationError):
        split_regions(np.eye(3), 6)
    with pytest.raises(ValidationError):
        split_regions(np.full((2, 2), 2))
    with pytest.raises(ShapeError):
        split_regions(np.zeros((2, 2, 2)))


@given(st.integers(0, 2**32 - 1), st.sampled_from([4, 8]))
def test_regions_partition_the_mask(seed, conn):
    mask = np.random.default_rng(seed).random((7, 9)) > 0.6
    regions = split_regions(mask, conn)
    total = np.zeros(mask.shape, int)
    for r in regions:
        assert r.any()
        total += r
    np.testing.assert_array_equal(total, mask)


# -- toy data and manifests ---------------------------------------------------

def test_toy_data_contract():
    data = make_toy_data(6, 64, seed=3)
    assert len(data) == 6
    for s in data:
        assert s.ir.shape == (1, 64, 64) and s.vis.shape == (3, 64, 64) and s.mask.any()
        assert s.ir[0][s.mask].mean() - s.ir[0][~s.mask].mean() > 0.3
        assert s.expression.startswith("hot blob ")
        np.testing.assert_array_equal(np.round(s.vis * 255), s.vis * 255)
    again = make_toy_data(6, 64, seed=3)
    for a, b in zip(data, again):
        np.testing.assert_array_equal(a.ir, b.ir)
        np.testing.assert_array_equal(a.vis, b.vis)


def test_toy_split_is_disjoint_prefix_free():
    train_set, test_set = make_toy_split(4, 2, 32, seed=1)
    assert [s.id for s in train_set] == ["00000", "00001", "00002", "00003"]
    assert [s.id for s in test_set] == ["00004", "00005"]
    np.testing.assert_array_equal(make_toy_data(6, 32, seed=1)[5].ir, test_set[1].ir)


def test_toy_data_errors():
    with pytest.raises(ValidationError):
        make_toy_data(0)
    with pytest.raises(ShapeError):
        make_toy_data(2, 60)
    with pytest.raises(ValidationError):
        make_toy_data(2, 64, variant="three")


def test_manifest_round_trip(tmp_path):
    data = make_toy_data(3, 32, seed=5, variant="two_targets", text_dim=8)
    path = write_manifest(data, tmp_path)
    back = read_manifest(path)
    for a, b in zip(data, back):
        assert (a.id, a.expression) == (b.id, b.expression)
        np.testing.assert_array_equal(a.ir, b.ir)
        np.testing.assert_array_equal(a.vis, b.vis)
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.embedding.matrix, b.embedding.matrix)


def test_manifest_errors(tmp_path):
    with pytest.raises(ValidationError):
        read_manifest(tmp_path / "none.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    with pytest.raises(FormatError, match="bad.jsonl:1"):
        read_manifest(bad)
    bad.write_text(json.dumps({"id": "x"}) + "\n")
    with pytest.raises(ValidationError, match="missing keys"):
        read_manifest(bad)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("\n")
    with pytest.raises(ValidationError, match="empty"):
        read_manifest(empty)


def test_sample_validation():
    emb = toy_embed("x", 8)
    with pytest.raises(ShapeError):
        Sample("a", np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), np.ones((4, 4)), "x", emb)
    with pytest.raises(ValidationError, match="no positive pixel"):
        Sample("a", np.zeros((1, 4, 4)), np.zeros((3, 4, 4)), np.zeros((4, 4)), "x", emb)


# -- training -----------------------------------------------------------------

def test_batches_cover_each_epoch():
    stream = batch_indices(10, 4, seed=2)
    drawn = np.concatenate([next(stream) for _ in range(5)])
    assert sorted(drawn[:10]) == list(range(10))
    assert sorted(drawn[10:20]) == list(range(10))


def test_config_validation_and_round_trip(tmp_path):
    cfg = TrainConfig(**TINY, steps=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "c.toml"
    path.write_text('steps = 3\nlr_seg = 0.001\nfusion_channels = [4, 4, 8, 8]\n')
    assert TrainConfig.from_file(path).fusion_channels == (4, 4, 8, 8)
    path.write_text("stepz = 3\n")
    with pytest.raises(ValidationError):
        TrainConfig.from_file(path)
    for bad in (dict(size=30), dict(steps=0), dict(dtype="float16")):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)


@pytest.fixture(scope="module")
def toy():
    return make_toy_split(12, 4, 32, seed=7, text_dim=8)


def test_loss_decreases(toy):
    cfg = TrainConfig(**TINY, steps=200, lr_seg=1e-3, lr_fuse=1e-3, seed=0)
    log = train(cfg, toy[0]).log
    first = np.mean([r["L_total"] for r in log[:20]])
    last = np.mean([r["L_total"] for r in log[-20:]])
    assert last < first


def test_same_seed_logs_identical(toy, tmp_path):
    cfg = TrainConfig(**TINY, steps=4, seed=11)
    train(cfg, toy[0], log_path=tmp_path / "a.jsonl")
    train(cfg, toy[0], log_path=tmp_path / "b.jsonl")
    a, b = (tmp_path / "a.jsonl").read_bytes(), (tmp_path / "b.jsonl").read_bytes()
    assert a == b
    rec = json.loads(a.splitlines()[0])
    assert rec["step"] == 1
    assert {"L_seg", "L_fuse", "L_total", "L_ssim_vi", "L_mse_vi", "L_mse_ir", "L_sobel_ir", "L_grad"} <= set(rec)


def test_empty_dataset_rejected():
    with pytest.raises(ValidationError):
        train(TrainConfig(**TINY, steps=1), Dataset([]))


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(toy, tmp_path):
    model = train(TrainConfig(**TINY, steps=2), toy[0]).model
    path = tmp_path / "m.rfck"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.config == model.config
    for (n, p), (m, q) in zip(model.named_parameters(), back.named_parameters()):
        assert n == m and p.group == q.group
        assert p.data.dtype == q.data.dtype == np.float32
        np.testing.assert_array_equal(p.data, q.data)
    assert encode_checkpoint(back) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    raw = encode_checkpoint(RISFusionModel(TrainConfig(**TINY).model_config(), dtype=np.float32))
    with pytest.raises(FormatError, match="truncated"):
        decode_checkpoint(raw[:-3])
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(raw + b"\0")


def test_non_finite_update_raises():
    p = param([1.0], grad=[1.0])
    with pytest.raises(TrainingError, match="non-finite"):
        AdamW([p], AdamWConfig(lr_fuse=1e308, weight_decay=10.0)).step()
